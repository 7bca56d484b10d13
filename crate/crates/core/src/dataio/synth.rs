//! Synthetic walking figures.
//!
//! A figure is drawn in a side-on body frame (horizontal `u`, vertical `y`)
//! from a head circle, a torso ellipse, two-segment legs and one-segment
//! arms swinging with the gait phase. The view angle `θ` is emulated by a
//! horizontal scale and shear of that frame:
//!
//! ```text
//! x = cx + (0.35 + 0.65·sin θ)·u + 0.25·cos θ·(y − y_hip)
//! ```
//!
//! Vertical structure is therefore view-invariant while horizontal extent,
//! stride visibility and lean change with the view.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::write_frame;
use crate::error::{Error, Result};
use crate::exec;
use crate::network::{FRAME_HEIGHT, FRAME_WIDTH};

/// The eight views of the default synthetic dataset, in degrees.
pub const SYNTH_VIEWS: [u32; 8] = [0, 26, 51, 77, 103, 129, 154, 180];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub views: Vec<u32>,
    /// Condition names; `NM`, `BG` (carrying a bag) and `CL` (coat) are
    /// recognized, anything else renders like `NM`.
    pub conditions: Vec<String>,
    pub frames: usize,
    /// Sequences recorded per (identity, condition, view), numbered from 1.
    pub sequences: u32,
    pub seed: u64,
    /// Per-pixel flip probability.
    pub noise: f64,
    /// Maximum per-frame translation in pixels, both axes.
    pub jitter: i32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 20,
            views: SYNTH_VIEWS.to_vec(),
            conditions: vec!["NM".into(), "BG".into(), "CL".into()],
            frames: 40,
            sequences: 1,
            seed: 0,
            noise: 0.02,
            jitter: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.views.is_empty() || self.conditions.is_empty() || self.frames == 0 || self.sequences == 0 {
            return Err(Error::Config("synthetic spec needs identities, views, conditions and frames".into()));
        }
        if let Some(v) = self.views.iter().find(|&&v| v > 180) {
            return Err(Error::Config(format!("view {v} outside [0, 180] degrees")));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        if !(0..=8).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, 8]", self.jitter)));
        }
        for c in &self.conditions {
            if c.is_empty() || !c.chars().all(|ch| ch.is_ascii_alphabetic()) {
                return Err(Error::Config(format!("condition name {c:?} must be alphabetic")));
            }
        }
        Ok(())
    }

    /// Identity label of the `i`-th synthetic subject.
    pub fn identity_label(i: usize) -> String {
        format!("{:03}", i + 1)
    }
}

/// Body proportions and gait of one subject. Lengths in pixels, angles in
/// radians, period in frames.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityShape {
    pub head_radius: f64,
    pub torso_half_len: f64,
    pub torso_half_depth: f64,
    pub thigh: f64,
    pub shin: f64,
    pub leg_width: f64,
    pub arm: f64,
    pub arm_width: f64,
    pub stride: f64,
    pub knee_bend: f64,
    pub arm_swing: f64,
    pub lean: f64,
    pub bounce: f64,
    pub period: f64,
    /// Arm swing phase relative to the legs. Each limb sweeps the same poses
    /// whatever its value, so it shows in single frames but not in their
    /// average.
    pub arm_phase: f64,
    /// Knee bend phase relative to hip swing.
    pub knee_phase: f64,
}

impl IdentityShape {
    pub fn draw(seed: u64, identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ea5_0000_0000_0000 ^ (identity as u64).wrapping_mul(0x9e37_79b9));
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        Self {
            head_radius: u(3.5, 4.5),
            torso_half_len: u(9.0, 10.5),
            torso_half_depth: u(4.2, 5.4),
            thigh: u(12.0, 13.5),
            shin: u(12.0, 13.5),
            leg_width: u(2.0, 2.6),
            arm: u(14.5, 16.5),
            arm_width: u(1.5, 1.9),
            stride: u(0.35, 0.5),
            knee_bend: u(0.3, 0.6),
            arm_swing: u(0.3, 0.5),
            lean: u(-0.06, 0.06),
            bounce: u(0.5, 1.5),
            period: u(10.0, 18.0),
            arm_phase: u(0.0, 2.0 * PI),
            knee_phase: u(0.0, 2.0 * PI),
        }
    }
}

struct Ellipse {
    cu: f64,
    cy: f64,
    ru: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, y: f64) -> bool {
        let (du, dy) = (u - self.cu, y - self.cy);
        let a = (du * self.cos + dy * self.sin) / self.ru;
        let b = (-du * self.sin + dy * self.cos) / self.ry;
        a * a + b * b <= 1.0
    }
}

/// Segment with rounded ends.
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

impl Capsule {
    fn contains(&self, u: f64, y: f64) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((u - self.a.0) * dx + (y - self.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (self.a.0 + t * dx - u, self.a.1 + t * dy - y);
        px * px + py * py <= self.r * self.r
    }
}

struct Pose {
    ellipses: Vec<Ellipse>,
    capsules: Vec<Capsule>,
    hip_y: f64,
}

impl Pose {
    fn contains(&self, u: f64, y: f64) -> bool {
        self.ellipses.iter().any(|e| e.contains(u, y)) || self.capsules.iter().any(|c| c.contains(u, y))
    }
}

fn limb(from: (f64, f64), angle: f64, len: f64) -> (f64, f64) {
    (from.0 + len * angle.sin(), from.1 + len * angle.cos())
}

fn pose(shape: &IdentityShape, condition: &str, phase: f64) -> Pose {
    let floor = 61.0;
    let lift = shape.bounce * (2.0 * phase).cos().abs();
    let leg_len = shape.thigh + shape.shin;
    let hip_y = floor - leg_len - lift;
    let shoulder_y = hip_y - 2.0 * shape.torso_half_len;
    let (ls, lc) = shape.lean.sin_cos();
    let torso_c = (ls * shape.torso_half_len, hip_y - shape.torso_half_len);
    let shoulder = (2.0 * ls * shape.torso_half_len, shoulder_y);
    let head = (shoulder.0 + ls * (shape.head_radius + 2.0), shoulder_y - shape.head_radius - 1.5);

    let coat = condition == "CL";
    let mut ellipses = vec![
        Ellipse { cu: head.0, cy: head.1, ru: shape.head_radius, ry: shape.head_radius, cos: 1.0, sin: 0.0 },
        Ellipse {
            cu: torso_c.0,
            cy: torso_c.1 + if coat { 3.0 } else { 0.0 },
            ru: shape.torso_half_depth + if coat { 1.8 } else { 0.0 },
            ry: shape.torso_half_len + if coat { 4.5 } else { 0.0 },
            cos: lc,
            sin: -ls,
        },
    ];
    if condition == "BG" {
        ellipses.push(Ellipse {
            cu: torso_c.0 - shape.torso_half_depth - 2.5,
            cy: hip_y - 0.6 * shape.torso_half_len,
            ru: 3.5,
            ry: 5.0,
            cos: 1.0,
            sin: 0.0,
        });
    }

    let mut capsules = Vec::new();
    let hip = (0.0, hip_y);
    for side in [1.0, -1.0] {
        let swing = side * shape.stride * phase.sin();
        let bend = shape.knee_bend * (0.5 + 0.5 * (phase + side * PI / 2.0 + shape.knee_phase).sin());
        let knee = limb(hip, swing, shape.thigh);
        let foot = limb(knee, swing - bend, shape.shin);
        capsules.push(Capsule { a: hip, b: knee, r: shape.leg_width });
        capsules.push(Capsule { a: knee, b: foot, r: shape.leg_width * 0.85 });
        let arm_angle = -side * shape.arm_swing * (phase + shape.arm_phase).sin();
        let hand = limb(shoulder, arm_angle, shape.arm);
        let width = shape.arm_width + if coat { 0.8 } else { 0.0 };
        capsules.push(Capsule { a: shoulder, b: hand, r: width });
    }
    Pose { ellipses, capsules, hip_y }
}

/// Render one binary frame. `offset` translates the figure in pixels.
fn render(pose: &Pose, view_deg: f64, offset: (f64, f64)) -> Vec<f32> {
    let theta = view_deg.to_radians();
    let scale = 0.35 + 0.65 * theta.sin();
    let shear = 0.25 * theta.cos();
    let cx = FRAME_WIDTH as f64 / 2.0;
    let mut out = vec![0f32; FRAME_HEIGHT * FRAME_WIDTH];
    const SUB: [f64; 2] = [0.25, 0.75];
    for row in 0..FRAME_HEIGHT {
        for col in 0..FRAME_WIDTH {
            let mut hits = 0;
            for sy in SUB {
                for sx in SUB {
                    let y = row as f64 + sy - offset.1;
                    let x = col as f64 + sx - offset.0;
                    let u = (x - cx - shear * (y - pose.hip_y)) / scale;
                    if pose.contains(u, y) {
                        hits += 1;
                    }
                }
            }
            if hits >= 2 {
                out[row * FRAME_WIDTH + col] = 1.0;
            }
        }
    }
    out
}

/// Frames of one sequence, each `FRAME_HEIGHT × FRAME_WIDTH`.
pub fn synth_sequence(spec: &SynthSpec, identity: usize, condition: &str, seq: u32, view: u32) -> Result<Vec<Vec<f32>>> {
    spec.validate()?;
    let shape = IdentityShape::draw(spec.seed, identity);
    let cond_tag: u64 = condition.bytes().fold(0, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_add((identity as u64) << 32)
            .wrapping_add(cond_tag << 12)
            .wrapping_add((seq as u64) << 24)
            .wrapping_add(view as u64),
    );
    let start = rng.gen_range(0.0..2.0 * PI);
    let period = shape.period * rng.gen_range(0.95..1.05);
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let phase = start + 2.0 * PI * t as f64 / period;
        let p = pose(&shape, condition, phase);
        let j = spec.jitter;
        let offset = (rng.gen_range(-j..=j) as f64, rng.gen_range(-j..=j) as f64);
        let mut f = render(&p, view as f64, offset);
        if spec.noise > 0.0 {
            for v in &mut f {
                if rng.gen_bool(spec.noise) {
                    *v = 1.0 - *v;
                }
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Write the dataset under `root` as `<id>/<cond>-<seq>/<view>/<frame>.png`.
/// Returns the number of sequences written.
pub fn synth_generate(spec: &SynthSpec, root: &Path) -> Result<usize> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for id in 0..spec.identities {
        for cond in &spec.conditions {
            for seq in 1..=spec.sequences {
                for &view in &spec.views {
                    jobs.push((id, cond.as_str(), seq, view));
                }
            }
        }
    }
    exec::map_range(jobs.len(), |j| -> Result<()> {
        let (id, cond, seq, view) = jobs[j];
        let dir = root
            .join(SynthSpec::identity_label(id))
            .join(format!("{}-{seq:02}", cond.to_lowercase()))
            .join(format!("{view:03}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in synth_sequence(spec, id, cond, seq, view)?.iter().enumerate() {
            write_frame(&dir.join(format!("{:03}.png", t + 1)), f)?;
        }
        Ok(())
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    Ok(jobs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthSpec {
        SynthSpec { identities: 2, views: vec![0, 90], conditions: vec!["NM".into()], frames: 3, ..Default::default() }
    }

    #[test]
    fn frames_are_binary_and_nonempty() {
        let f = synth_sequence(&tiny(), 0, "NM", 1, 90).unwrap();
        assert_eq!(f.len(), 3);
        for frame in &f {
            assert!(frame.iter().all(|&v| v == 0.0 || v == 1.0));
            let on = frame.iter().filter(|&&v| v == 1.0).count();
            assert!(on > 150 && on < 1500, "{on}");
        }
    }

    #[test]
    fn deterministic_and_identity_dependent() {
        let spec = SynthSpec { noise: 0.0, jitter: 0, ..tiny() };
        assert_eq!(synth_sequence(&spec, 1, "NM", 1, 0).unwrap(), synth_sequence(&spec, 1, "NM", 1, 0).unwrap());
        assert_ne!(IdentityShape::draw(0, 0), IdentityShape::draw(0, 1));
        let a = render(&pose(&IdentityShape::draw(0, 0), "NM", 0.3), 90.0, (0.0, 0.0));
        let b = render(&pose(&IdentityShape::draw(0, 1), "NM", 0.3), 90.0, (0.0, 0.0));
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn conditions_change_the_figure() {
        let s = IdentityShape::draw(4, 2);
        let count = |c: &str| render(&pose(&s, c, 1.0), 90.0, (0.0, 0.0)).iter().filter(|&&v| v == 1.0).count();
        assert!(count("BG") > count("NM"));
        assert!(count("CL") > count("NM"));
    }

    #[test]
    fn arm_phase_hides_in_the_average() {
        let a = IdentityShape::draw(0, 3);
        let b = IdentityShape { arm_phase: a.arm_phase + PI / 2.0, ..a.clone() };
        let steps = 64;
        let (mut mean_a, mut mean_b) = (vec![0f64; FRAME_HEIGHT * FRAME_WIDTH], vec![0f64; FRAME_HEIGHT * FRAME_WIDTH]);
        let mut frame_diff = 0f64;
        for t in 0..steps {
            let phase = 2.0 * PI * t as f64 / steps as f64;
            let fa = render(&pose(&a, "NM", phase), 90.0, (0.0, 0.0));
            let fb = render(&pose(&b, "NM", phase), 90.0, (0.0, 0.0));
            for i in 0..fa.len() {
                mean_a[i] += fa[i] as f64 / steps as f64;
                mean_b[i] += fb[i] as f64 / steps as f64;
                frame_diff += (fa[i] - fb[i]).abs() as f64 / steps as f64;
            }
        }
        let mean_diff: f64 = mean_a.iter().zip(&mean_b).map(|(x, y)| (x - y).abs()).sum();
        assert!(frame_diff > 5.0 * mean_diff, "frames differ by {frame_diff:.1} px, averages by {mean_diff:.1}");
    }

    #[test]
    fn rejects_bad_views() {
        let spec = SynthSpec { views: vec![0, 200], ..tiny() };
        assert!(spec.validate().is_err());
    }
}
