//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use gaitset::network::{Embedding, EmbeddingMeta, InputMode, NetworkConfig};
use gaitset::setpool::SpStrategy;
use gaitset::tensor::Tensor;

/// Batch-all triplet loss by plain enumeration: per strip, the mean of the
/// positive hinge terms (0 if none), then the mean over strips.
pub fn triplet_oracle(e: &Tensor<f64>, labels: &[usize], margin: f64) -> f64 {
    let (b, rows, d) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let mut total = 0.0;
    for r in 0..rows {
        let v = |i: usize| &e.data()[(i * rows + r) * d..(i * rows + r + 1) * d];
        let dist = |i: usize, j: usize| v(i).iter().zip(v(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let (mut sum, mut count) = (0.0, 0usize);
        for a in 0..b {
            for p in 0..b {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..b {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    let h = margin + dist(a, p) - dist(a, n);
                    if h > 0.0 {
                        sum += h;
                        count += 1;
                    }
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total / rows as f64
}

/// Rank-1 by exhaustive distance computation. Returns per (probe view,
/// gallery view) `(correct, total)`; ties go to the smallest source key.
pub fn rank1_oracle(probes: &[Embedding], gallery: &[Embedding]) -> BTreeMap<(u32, u32), (usize, usize)> {
    let mut views: Vec<u32> = gallery.iter().map(|g| g.meta.view).collect();
    views.sort_unstable();
    views.dedup();
    let mut out = BTreeMap::new();
    for p in probes {
        for &gv in &views {
            let mut best: Option<(f64, &Embedding)> = None;
            for g in gallery.iter().filter(|g| g.meta.view == gv) {
                let d: f64 = p.data.data().iter().zip(g.data.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                best = match best {
                    Some((bd, bg)) if bd < d || (bd == d && bg.meta.source <= g.meta.source) => Some((bd, bg)),
                    _ => Some((d, g)),
                };
            }
            let (_, g) = best.expect("view has entries");
            let cell = out.entry((p.meta.view, gv)).or_insert((0, 0));
            cell.1 += 1;
            if g.meta.identity == p.meta.identity {
                cell.0 += 1;
            }
        }
    }
    out
}

pub fn embedding(identity: &str, view: u32, source: &str, rows: usize, d: usize, data: Vec<f32>) -> Embedding {
    Embedding {
        data: Tensor::new(vec![rows, d], data).unwrap(),
        meta: EmbeddingMeta { identity: identity.into(), view, condition: "NM".into(), source: source.into() },
    }
}

/// A network small enough for many forward passes: 32×20 frames, narrow
/// layers, three pyramid scales.
pub fn small_config(strategy: SpStrategy) -> NetworkConfig {
    NetworkConfig {
        channels: [4, 4, 8, 8, 8, 8],
        scales: 3,
        embed_dim: 8,
        sp_strategy: strategy,
        leaky_slope: 0.1,
        mgp_enabled: true,
        hpm_independent: true,
        input_mode: InputMode::Set,
        frame_height: 32,
        frame_width: 20,
    }
}

/// Binary-looking random frames `[n, 1, h, w]`.
pub fn random_frames(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, h, w], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
}

/// `PASS`/`FAIL` line in the acceptance format.
pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
