//! The full embedding graph: a frame-level convolutional backbone, set
//! pooling taps, the multilayer global pipeline (MGP) and horizontal pyramid
//! mapping (HPM) into strip embeddings.
//!
//! Backbone layout (kernel sizes and pooling placement are choices of this
//! crate):
//!
//! ```text
//! C1 5×5 → C2 3×3 → pool 2×2      tap 1   [n, c2, H/2, W/2]
//! C3 3×3 → C4 3×3 → pool 2×2      tap 2   [n, c4, H/4, W/4]
//! C5 3×3 → C6 3×3                 tap 3   [n, c6, H/4, W/4]
//! ```
//!
//! Every convolution is followed by a leaky ReLU and has no bias. The MGP
//! consumes the tap-1 set feature, runs its own copies of the C3/C4 and C5/C6
//! blocks, and adds the tap-2 and tap-3 set features after the matching
//! block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::setpool::{set_pool_graph, SetLayout, SpStrategy};
use crate::tensor::{init_bound, Checkpoint, CustomOp, Graph, Real, Tensor, Var};

/// How a sample's frames enter the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputMode {
    /// Every frame is an element of the set.
    Set,
    /// The frames are averaged into one energy image, fed as a set of one.
    Gei,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Set => "set",
            InputMode::Gei => "gei",
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set" => Ok(InputMode::Set),
            "gei" => Ok(InputMode::Gei),
            _ => Err(Error::Config(format!("unknown input mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Output channels of C1..C6.
    pub channels: [usize; 6],
    /// Pyramid scales; scale `s` (1-based) splits the height into `2^(s-1)` strips.
    pub scales: usize,
    /// Dimension of each strip embedding.
    pub embed_dim: usize,
    pub sp_strategy: SpStrategy,
    pub leaky_slope: f64,
    pub mgp_enabled: bool,
    /// One affine map per strip (true) or a single map shared by all strips.
    pub hpm_independent: bool,
    pub input_mode: InputMode,
    pub frame_height: usize,
    pub frame_width: usize,
}

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 44;

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::casia()
    }
}

impl NetworkConfig {
    /// Channel widths used for CASIA-B sized data.
    pub fn casia() -> Self {
        Self {
            channels: [32, 32, 64, 64, 128, 128],
            scales: 5,
            embed_dim: 256,
            sp_strategy: SpStrategy::Max,
            leaky_slope: 0.1,
            mgp_enabled: true,
            hpm_independent: true,
            input_mode: InputMode::Set,
            frame_height: FRAME_HEIGHT,
            frame_width: FRAME_WIDTH,
        }
    }

    /// Doubled channel widths for OU-MVLP sized data.
    pub fn oumvlp() -> Self {
        Self { channels: [64, 64, 128, 128, 256, 256], ..Self::casia() }
    }

    /// Reduced widths for CPU-scale synthetic experiments.
    pub fn desk() -> Self {
        Self { channels: [16, 16, 32, 32, 64, 64], embed_dim: 64, ..Self::casia() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "casia" => Ok(Self::casia()),
            "oumvlp" => Ok(Self::oumvlp()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown network preset {name:?}"))),
        }
    }

    /// Strips produced by one HPM head: `2^S - 1`.
    pub fn strips_per_head(&self) -> usize {
        (1 << self.scales) - 1
    }

    /// Rows of the final embedding.
    pub fn embedding_rows(&self) -> usize {
        if self.mgp_enabled {
            2 * self.strips_per_head()
        } else {
            self.strips_per_head()
        }
    }

    /// Spatial extent of the tap-3 feature maps.
    pub fn feature_extent(&self) -> (usize, usize) {
        (self.frame_height / 4, self.frame_width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.embed_dim == 0 || self.scales == 0 {
            return Err(Error::Config("channels, embed_dim and scales must be positive".into()));
        }
        if self.scales > 16 {
            return Err(Error::Config(format!("{} scales is unreasonably many", self.scales)));
        }
        if !self.frame_height.is_multiple_of(4) || !self.frame_width.is_multiple_of(4) || self.frame_height == 0 || self.frame_width == 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of 4 in both axes",
                self.frame_height, self.frame_width
            )));
        }
        let (hf, _) = self.feature_extent();
        let finest = 1 << (self.scales - 1);
        if hf % finest != 0 {
            return Err(Error::Config(format!(
                "feature height {hf} is not divisible by {finest} strips at scale {}",
                self.scales
            )));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let c = &self.channels;
        let _ = writeln!(s, "channels = {},{},{},{},{},{}", c[0], c[1], c[2], c[3], c[4], c[5]);
        let _ = writeln!(s, "scales = {}", self.scales);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "sp_strategy = {}", self.sp_strategy);
        let _ = writeln!(s, "leaky_slope = {}", self.leaky_slope);
        let _ = writeln!(s, "mgp_enabled = {}", self.mgp_enabled);
        let _ = writeln!(s, "hpm_independent = {}", self.hpm_independent);
        let _ = writeln!(s, "input_mode = {}", self.input_mode.name());
        let _ = writeln!(s, "frame_height = {}", self.frame_height);
        let _ = writeln!(s, "frame_width = {}", self.frame_width);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        Self::from_map(&map)
    }

    /// Build from a key/value map; missing keys keep the CASIA defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::casia();
        for (k, v) in map {
            let bad = || Error::Config(format!("bad value {v:?} for {k}"));
            match k.as_str() {
                "channels" => {
                    let parts: Vec<usize> =
                        v.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    cfg.channels = parts.try_into().map_err(|_| bad())?;
                }
                "scales" => cfg.scales = v.parse().map_err(|_| bad())?,
                "embed_dim" => cfg.embed_dim = v.parse().map_err(|_| bad())?,
                "sp_strategy" => cfg.sp_strategy = v.parse()?,
                "leaky_slope" => cfg.leaky_slope = v.parse().map_err(|_| bad())?,
                "mgp_enabled" => cfg.mgp_enabled = v.parse().map_err(|_| bad())?,
                "hpm_independent" => cfg.hpm_independent = v.parse().map_err(|_| bad())?,
                "input_mode" => cfg.input_mode = v.parse()?,
                "frame_height" => cfg.frame_height = v.parse().map_err(|_| bad())?,
                "frame_width" => cfg.frame_width = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

/// Parameter names and shapes for a configuration, in canonical order.
pub fn param_manifest(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.channels;
    let mut m = vec![
        ("backbone.c1".to_string(), vec![c[0], 1, 5, 5]),
        ("backbone.c2".to_string(), vec![c[1], c[0], 3, 3]),
        ("backbone.c3".to_string(), vec![c[2], c[1], 3, 3]),
        ("backbone.c4".to_string(), vec![c[3], c[2], 3, 3]),
        ("backbone.c5".to_string(), vec![c[4], c[3], 3, 3]),
        ("backbone.c6".to_string(), vec![c[5], c[4], 3, 3]),
    ];
    if cfg.mgp_enabled {
        m.push(("mgp.c3".into(), vec![c[2], c[1], 3, 3]));
        m.push(("mgp.c4".into(), vec![c[3], c[2], 3, 3]));
        m.push(("mgp.c5".into(), vec![c[4], c[3], 3, 3]));
        m.push(("mgp.c6".into(), vec![c[5], c[4], 3, 3]));
    }
    for (tap, ch) in sp_taps(cfg) {
        if let Some(shape) = cfg.sp_strategy.param_shape(ch) {
            m.push((format!("setpool.tap{tap}.weight"), shape.to_vec()));
        }
    }
    let rows = cfg.strips_per_head();
    let hpm_shape = if cfg.hpm_independent { vec![rows, c[5], cfg.embed_dim] } else { vec![c[5], cfg.embed_dim] };
    m.push(("hpm.main.weight".into(), hpm_shape.clone()));
    if cfg.mgp_enabled {
        m.push(("hpm.mgp.weight".into(), hpm_shape));
    }
    m
}

/// `(tap index, channel count)` of every set pooling site in use.
fn sp_taps(cfg: &NetworkConfig) -> Vec<(usize, usize)> {
    let c = cfg.channels;
    if cfg.mgp_enabled {
        vec![(1, c[1]), (2, c[3]), (3, c[5])]
    } else {
        vec![(3, c[5])]
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        3 => shape[1],
        _ => shape[0],
    }
}

/// Final representation of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `[rows, d]`: HPM strips of the main pipeline, then those of the MGP.
    pub data: Tensor<f32>,
    pub meta: EmbeddingMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmbeddingMeta {
    pub identity: String,
    pub view: u32,
    pub condition: String,
    /// Human-readable provenance, e.g. which sequences the frames came from.
    pub source: String,
}

/// Parameters of one model bound into a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Frame-level features at the three set pooling taps.
#[derive(Clone, Copy, Debug)]
pub struct BackboneStages {
    pub tap1: Var,
    pub tap2: Var,
    pub tap3: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaitSet<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
}

impl<T: Real> GaitSet<T> {
    /// Fresh model with scaled-uniform weights drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = param_manifest(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = Tensor::uniform(&shape, init_bound(fan_in(&shape)), &mut rng);
                (name, t)
            })
            .collect();
        Ok(Self { config, params: ParamStore { entries } })
    }

    /// Model with caller-supplied parameters; names and shapes must match the
    /// configuration's manifest exactly.
    pub fn with_params(config: NetworkConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let manifest = param_manifest(&config);
        if manifest.len() != entries.len() {
            return Err(Error::Config(format!(
                "configuration expects {} parameter tensors, got {}",
                manifest.len(),
                entries.len()
            )));
        }
        for ((want_name, want_shape), (name, t)) in manifest.iter().zip(&entries) {
            if want_name != name || want_shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params: ParamStore { entries } })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> GaitSet<U> {
        GaitSet { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut meta = vec![("setpool.strategy".to_string(), self.config.sp_strategy.name().to_string())];
        for (k, v) in parse_kv(&self.config.to_kv()).expect("own output parses") {
            meta.push((format!("config.{k}"), v));
        }
        Checkpoint { meta, tensors: self.params.entries.clone() }
    }

    /// Rebuild from a checkpoint. If `expected` is given, the stored
    /// configuration must equal it.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, expected: Option<&NetworkConfig>) -> Result<Self> {
        let map: BTreeMap<String, String> = ckpt
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = NetworkConfig::from_map(&map)?;
        if let Some(strategy) = ckpt.meta_value("setpool.strategy") {
            if strategy.parse::<SpStrategy>()? != config.sp_strategy {
                return Err(Error::Config("set pooling strategy in manifest disagrees with config".into()));
            }
        }
        if let Some(want) = expected {
            if want != &config {
                return Err(Error::Config("checkpoint configuration does not match the requested one".into()));
            }
        }
        Self::with_params(config, ckpt.tensors)
    }

    /// Put every parameter on the graph, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.bind_except(g, trainable, None)
    }

    /// Like [`GaitSet::bind`], but use `replace` for the named parameter.
    pub fn bind_except(&self, g: &mut Graph<T>, trainable: bool, replace: Option<(&str, Var)>) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params.entries {
            let v = match replace {
                Some((n, v)) if n == name => v,
                _ if trainable => g.param(t.clone()),
                _ => g.constant(t.clone()),
            };
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = (self.config.frame_height, self.config.frame_width);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(Error::Shape(format!("frames must be [n, 1, {h}, {w}], got {shape:?}")));
        }
        Ok(())
    }

    /// Stack several sets for one forward pass. In GEI mode each set is
    /// first collapsed to its mean image.
    pub fn stack_input(&self, sets: &[&Tensor<T>]) -> Result<(Tensor<T>, SetLayout)> {
        if sets.is_empty() {
            return Err(Error::EmptySet);
        }
        for s in sets {
            self.check_frames(s.shape())?;
        }
        match self.config.input_mode {
            InputMode::Set => {
                let layout = SetLayout::new(sets.iter().map(|s| s.shape()[0]).collect())?;
                Ok((Tensor::concat_outer(sets)?, layout))
            }
            InputMode::Gei => {
                let means: Vec<Tensor<T>> = sets.iter().map(|s| s.mean_outer()).collect();
                let refs: Vec<&Tensor<T>> = means.iter().collect();
                Ok((Tensor::concat_outer(&refs)?, SetLayout::new(vec![1; sets.len()])?))
            }
        }
    }

    fn conv_act(&self, g: &mut Graph<T>, x: Var, kernel: Var) -> Result<Var> {
        let y = g.conv2d_same(x, kernel)?;
        g.leaky_relu(y, T::of(self.config.leaky_slope))
    }

    /// Frame-level features; every frame is processed independently with
    /// shared weights.
    pub fn backbone_forward(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Result<BackboneStages> {
        self.check_frames(g.value(frames).shape())?;
        let x = self.conv_act(g, frames, p.var("backbone.c1")?)?;
        let x = self.conv_act(g, x, p.var("backbone.c2")?)?;
        let tap1 = g.max_pool2d(x, 2)?;
        let x = self.conv_act(g, tap1, p.var("backbone.c3")?)?;
        let x = self.conv_act(g, x, p.var("backbone.c4")?)?;
        let tap2 = g.max_pool2d(x, 2)?;
        let x = self.conv_act(g, tap2, p.var("backbone.c5")?)?;
        let tap3 = self.conv_act(g, x, p.var("backbone.c6")?)?;
        Ok(BackboneStages { tap1, tap2, tap3 })
    }

    fn pool_tap(&self, g: &mut Graph<T>, p: &Bound, x: Var, layout: &SetLayout, tap: usize) -> Result<Var> {
        let params = p.opt(&format!("setpool.tap{tap}.weight"));
        set_pool_graph(g, x, layout, self.config.sp_strategy, params)
    }

    /// Multilayer global pipeline over set-level features. `main` is the
    /// tap-3 set feature already computed for the main pipeline.
    pub fn mgp_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        stages: &BackboneStages,
        layout: &SetLayout,
        main: Var,
    ) -> Result<Var> {
        if !self.config.mgp_enabled {
            return Err(Error::Config("MGP is disabled in this configuration".into()));
        }
        let z1 = self.pool_tap(g, p, stages.tap1, layout, 1)?;
        let m = self.conv_act(g, z1, p.var("mgp.c3")?)?;
        let m = self.conv_act(g, m, p.var("mgp.c4")?)?;
        let m = g.max_pool2d(m, 2)?;
        let z2 = self.pool_tap(g, p, stages.tap2, layout, 2)?;
        let m = g.add(m, z2)?;
        let m = self.conv_act(g, m, p.var("mgp.c5")?)?;
        let m = self.conv_act(g, m, p.var("mgp.c6")?)?;
        g.add(m, main)
    }

    /// Embeddings `[S, rows, d]` for the sets stacked in `frames`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, frames: Var, layout: &SetLayout) -> Result<Var> {
        let stages = self.backbone_forward(g, p, frames)?;
        let main = self.pool_tap(g, p, stages.tap3, layout, 3)?;
        let scales = self.config.scales;
        let head_main = hpm_forward(g, main, scales, p.var("hpm.main.weight")?, self.config.hpm_independent)?;
        if !self.config.mgp_enabled {
            return Ok(head_main);
        }
        let global = self.mgp_forward(g, p, &stages, layout, main)?;
        let head_mgp = hpm_forward(g, global, scales, p.var("hpm.mgp.weight")?, self.config.hpm_independent)?;
        g.concat_channels(&[head_main, head_mgp])
    }

    /// Embed several sets in one pass; returns `[rows, d]` per set.
    pub fn embed_batch(&self, sets: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (frames, layout) = self.stack_input(sets)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(frames);
        let out = self.forward(&mut g, &p, x, &layout)?;
        let t = g.value(out);
        let (rows, d) = (t.shape()[1], t.shape()[2]);
        (0..sets.len())
            .map(|i| t.slice_outer(i, 1).and_then(|s| s.reshape(&[rows, d])))
            .collect()
    }

    /// Embed one set `[n, 1, H, W]` into `[rows, d]`.
    pub fn embed_set(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.embed_batch(&[frames])?.remove(0))
    }

    /// Embed many sets independently, in parallel when enabled. Output order
    /// follows input order.
    pub fn embed_many(&self, sets: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        exec::map_range(sets.len(), |i| self.embed_set(sets[i])).into_iter().collect()
    }
}

struct StripPoolOp {
    argmax: Vec<usize>,
    /// For each output entry: strip geometry needed to spread the average.
    scales: usize,
}

/// Strip boundaries `(row_start, row_count)` in scale-major order.
fn strips(height: usize, scales: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in 0..scales {
        let n = 1 << s;
        let hs = height / n;
        for t in 0..n {
            out.push((t * hs, hs));
        }
    }
    out
}

impl<T: Real> CustomOp<T> for StripPoolOp {
    fn name(&self) -> &'static str {
        "strip_pool"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let x = inputs[0];
        let (sets, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let bounds = strips(h, self.scales);
        let mut dx = vec![T::zero(); x.numel()];
        let mut k = 0;
        for s in 0..sets {
            for &(r0, hs) in &bounds {
                let inv = T::one() / T::of((hs * w) as f64);
                for ch in 0..c {
                    let gv = grad[k];
                    dx[self.argmax[k]] += gv;
                    let share = gv * inv;
                    let base = ((s * c + ch) * h + r0) * w;
                    for v in &mut dx[base..base + hs * w] {
                        *v += share;
                    }
                    k += 1;
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Split `[S, c, h, w]` into pyramid strips and reduce each to
/// `max + mean` per channel: `[S, 2^scales - 1, c]`.
pub fn strip_pool<T: Real>(g: &mut Graph<T>, z: Var, scales: usize) -> Result<Var> {
    let x = g.value(z);
    if x.ndim() != 4 {
        return Err(Error::Shape(format!("strip pooling expects [s,c,h,w], got {:?}", x.shape())));
    }
    let (sets, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if scales == 0 || h % (1 << (scales - 1)) != 0 {
        return Err(Error::Shape(format!("height {h} not divisible into {} strips", 1usize << scales.saturating_sub(1))));
    }
    let bounds = strips(h, scales);
    let data = x.data();
    let mut out = Vec::with_capacity(sets * bounds.len() * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for s in 0..sets {
        for &(r0, hs) in &bounds {
            for ch in 0..c {
                let base = ((s * c + ch) * h + r0) * w;
                let region = &data[base..base + hs * w];
                let mut best = 0;
                let mut sum = 0f64;
                for (i, v) in region.iter().enumerate() {
                    if *v > region[best] {
                        best = i;
                    }
                    sum += v.as_f64();
                }
                out.push(region[best] + T::of(sum / region.len() as f64));
                argmax.push(base + best);
            }
        }
    }
    let value = Tensor::new(vec![sets, bounds.len(), c], out)?;
    g.custom(&[z], value, Box::new(StripPoolOp { argmax, scales }))
}

struct StripAffineOp;

impl<T: Real> CustomOp<T> for StripAffineOp {
    fn name(&self) -> &'static str {
        "strip_affine"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (sets, rows, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let d = w.shape()[2];
        let mut dx = vec![T::zero(); x.numel()];
        let mut dw = vec![T::zero(); w.numel()];
        for r in 0..rows {
            let xr = gather_rows(x.data(), sets, rows, c, r);
            let gr = gather_rows(grad, sets, rows, d, r);
            let wr = &w.data()[r * c * d..(r + 1) * c * d];
            let mut dxr = vec![T::zero(); sets * c];
            crate::tensor::kernels::gemm(sets, d, c, T::one(), &gr, false, wr, true, T::zero(), &mut dxr);
            crate::tensor::kernels::gemm(c, sets, d, T::one(), &xr, true, &gr, false, T::zero(), &mut dw[r * c * d..(r + 1) * c * d]);
            for s in 0..sets {
                dx[(s * rows + r) * c..(s * rows + r + 1) * c].copy_from_slice(&dxr[s * c..(s + 1) * c]);
            }
        }
        Ok(vec![Some(dx), Some(dw)])
    }
}

fn gather_rows<T: Real>(data: &[T], sets: usize, rows: usize, width: usize, r: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(sets * width);
    for s in 0..sets {
        out.extend_from_slice(&data[(s * rows + r) * width..(s * rows + r + 1) * width]);
    }
    out
}

/// Independent per-strip maps: `[S, R, c] × [R, c, d] → [S, R, d]`.
pub fn strip_affine<T: Real>(g: &mut Graph<T>, x: Var, weight: Var) -> Result<Var> {
    let (xt, wt) = (g.value(x), g.value(weight));
    let (xs, ws) = (xt.shape(), wt.shape());
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || xs[2] != ws[1] {
        return Err(Error::Shape(format!("strip_affine: input {xs:?} incompatible with weight {ws:?}")));
    }
    let (sets, rows, c, d) = (xs[0], xs[1], xs[2], ws[2]);
    let mut out = vec![T::zero(); sets * rows * d];
    for r in 0..rows {
        let xr = gather_rows(xt.data(), sets, rows, c, r);
        let mut yr = vec![T::zero(); sets * d];
        crate::tensor::kernels::gemm(sets, c, d, T::one(), &xr, false, &wt.data()[r * c * d..(r + 1) * c * d], false, T::zero(), &mut yr);
        for s in 0..sets {
            out[(s * rows + r) * d..(s * rows + r + 1) * d].copy_from_slice(&yr[s * d..(s + 1) * d]);
        }
    }
    let value = Tensor::new(vec![sets, rows, d], out)?;
    g.custom(&[x, weight], value, Box::new(StripAffineOp))
}

/// Horizontal pyramid mapping of set features `[S, c, h, w]` into
/// `[S, 2^scales - 1, d]`. `weight` is `[2^scales-1, c, d]` when
/// `independent`, otherwise a single shared `[c, d]` map.
pub fn hpm_forward<T: Real>(g: &mut Graph<T>, z: Var, scales: usize, weight: Var, independent: bool) -> Result<Var> {
    let pooled = strip_pool(g, z, scales)?;
    let rows = (1usize << scales) - 1;
    let c = g.value(pooled).shape()[2];
    let ws = g.value(weight).shape().to_vec();
    if independent {
        if ws.len() != 3 || ws[0] != rows || ws[1] != c {
            return Err(Error::Shape(format!("HPM needs {rows} independent [{c}, d] maps, got weight {ws:?}")));
        }
        strip_affine(g, pooled, weight)
    } else {
        if ws.len() != 2 || ws[0] != c {
            return Err(Error::Shape(format!("shared HPM needs one [{c}, d] map, got weight {ws:?}")));
        }
        g.affine(pooled, weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn small(strategy: SpStrategy, mgp: bool) -> NetworkConfig {
        NetworkConfig {
            channels: [2, 3, 4, 4, 5, 6],
            scales: 2,
            embed_dim: 3,
            sp_strategy: strategy,
            leaky_slope: 0.1,
            mgp_enabled: mgp,
            hpm_independent: true,
            input_mode: InputMode::Set,
            frame_height: 8,
            frame_width: 8,
        }
    }

    fn random_frames(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(&[n, 1, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_geometry() {
        let cfg = NetworkConfig::casia();
        assert_eq!(cfg.strips_per_head(), 31);
        assert_eq!(cfg.embedding_rows(), 62);
        assert_eq!(cfg.feature_extent(), (16, 11));
        assert!(cfg.validate().is_ok());
        let off = NetworkConfig { mgp_enabled: false, ..cfg };
        assert_eq!(off.embedding_rows(), 31);
        assert_eq!(NetworkConfig::oumvlp().channels, [64, 64, 128, 128, 256, 256]);
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = NetworkConfig { sp_strategy: SpStrategy::Attention, hpm_independent: false, ..NetworkConfig::desk() };
        assert_eq!(NetworkConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(NetworkConfig::from_kv("scales = 9").is_err());
        assert!(NetworkConfig::from_kv("sp_strategy = sum").is_err());
    }

    #[test]
    fn backbone_stage_shapes_and_zero_propagation() {
        let model = GaitSet::<f32>::new(NetworkConfig::desk(), 1).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, 64, 44]));
        let st = model.backbone_forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(st.tap1).shape(), &[1, 16, 32, 22]);
        assert_eq!(g.value(st.tap2).shape(), &[1, 32, 16, 11]);
        assert_eq!(g.value(st.tap3).shape(), &[1, 64, 16, 11]);
        for v in [st.tap1, st.tap2, st.tap3] {
            assert!(g.value(v).data().iter().all(|&a| a == 0.0));
        }
        let bad = g.constant(Tensor::zeros(&[1, 1, 64, 40]));
        assert!(model.backbone_forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn duplicating_a_frame_leaves_per_frame_features_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small(SpStrategy::Max, true);
        let model = GaitSet::<f64>::new(cfg, 2).unwrap();
        let x = random_frames(3, 8, 8, &mut rng);
        let x2 = x.gather_outer(&[0, 1, 2, 1]).unwrap();
        let stage = |frames: Tensor<f64>| {
            let mut g = Graph::new();
            let p = model.bind(&mut g, false);
            let v = g.constant(frames);
            let st = model.backbone_forward(&mut g, &p, v).unwrap();
            g.value(st.tap3).clone()
        };
        let a = stage(x);
        let b = stage(x2);
        assert_eq!(a, b.slice_outer(0, 3).unwrap());
        assert_eq!(b.slice_outer(1, 1).unwrap(), b.slice_outer(3, 1).unwrap());
    }

    #[test]
    fn embedding_shapes_follow_mgp_switch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mgp in [true, false] {
            let model = GaitSet::<f64>::new(small(SpStrategy::Max, mgp), 4).unwrap();
            for n in [1, 5] {
                let e = model.embed_set(&random_frames(n, 8, 8, &mut rng)).unwrap();
                assert_eq!(e.shape(), &[if mgp { 6 } else { 3 }, 3]);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_mgp_output() {
        let model = GaitSet::<f64>::new(small(SpStrategy::Max, true), 5).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[4, 1, 8, 8]));
        let layout = SetLayout::single(4).unwrap();
        let st = model.backbone_forward(&mut g, &p, x).unwrap();
        let main = set_pool_graph(&mut g, st.tap3, &layout, SpStrategy::Max, None).unwrap();
        let m = model.mgp_forward(&mut g, &p, &st, &layout, main).unwrap();
        assert_eq!(g.value(m).shape(), &[1, 6, 2, 2]);
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_invariance_through_full_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for st in SpStrategy::ALL {
            let model = GaitSet::<f64>::new(small(st, true), 6).unwrap();
            let x = random_frames(7, 8, 8, &mut rng);
            let base = model.embed_set(&x).unwrap();
            let mut idx: Vec<usize> = (0..7).collect();
            idx.shuffle(&mut rng);
            let got = model.embed_set(&x.gather_outer(&idx).unwrap()).unwrap();
            if st.is_order_statistic() {
                assert_eq!(got, base, "{st}");
            } else {
                assert!(got.max_rel_diff(&base, 1e-12) <= 1e-6, "{st}");
            }
        }
    }

    #[test]
    fn gei_collapse_differs_from_set_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = small(SpStrategy::Max, true);
        let set_model = GaitSet::<f64>::new(cfg.clone(), 7).unwrap();
        let gei_model =
            GaitSet::<f64>::with_params(NetworkConfig { input_mode: InputMode::Gei, ..cfg }, set_model.params().entries.clone()).unwrap();
        assert_eq!(set_model.params().scalar_count(), gei_model.params().scalar_count());
        let x = random_frames(6, 8, 8, &mut rng);
        let a = set_model.embed_set(&x).unwrap();
        let b = gei_model.embed_set(&x).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        // the GEI arm is the set path on the mean image
        assert_eq!(b, set_model.embed_set(&x.mean_outer()).unwrap());
    }

    #[test]
    fn strip_counts_and_constant_maps() {
        for scales in 1..=5 {
            let mut g = Graph::<f64>::new();
            let z = g.constant(Tensor::full(&[1, 2, 16, 3], 1.5));
            let p = strip_pool(&mut g, z, scales).unwrap();
            assert_eq!(g.value(p).shape(), &[1, (1 << scales) - 1, 2]);
            assert!(g.value(p).data().iter().all(|&v| v == 3.0));
        }
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 12, 3]));
        assert!(strip_pool(&mut g, z, 4).is_err());
    }

    #[test]
    fn hpm_weight_count_is_checked() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 4, 2]));
        let w_bad = g.constant(Tensor::zeros(&[2, 2, 3]));
        assert!(hpm_forward(&mut g, z, 2, w_bad, true).is_err());
        let w_shared_bad = g.constant(Tensor::zeros(&[3, 3]));
        assert!(hpm_forward(&mut g, z, 2, w_shared_bad, false).is_err());
    }

    #[test]
    fn gradients_of_hpm_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = Tensor::<f64>::uniform(&[2, 3, 4, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 3, 2], 1.0, &mut rng);
        let proj = Tensor::<f64>::uniform(&[2, 3, 2], 1.0, &mut rng);
        let loss = |g: &mut Graph<f64>, zv: Var, wv: Var| -> Result<Var> {
            let y = hpm_forward(g, zv, 2, wv, true)?;
            let pv = g.constant(proj.clone());
            let m = g.mul(y, pv)?;
            g.sum(m)
        };
        let r = grad_check(|g, zv| { let wv = g.constant(w.clone()); loss(g, zv, wv) }, &z, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
        let r = grad_check(|g, wv| { let zv = g.constant(z.clone()); loss(g, zv, wv) }, &w, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let model = GaitSet::<f32>::new(NetworkConfig { sp_strategy: SpStrategy::JointConv, ..small(SpStrategy::Max, true) }, 8).unwrap();
        let ck = model.to_checkpoint();
        assert!(ck.tensors.iter().any(|(n, _)| n == "setpool.tap2.weight"));
        for (n, _) in &ck.tensors {
            assert!(["backbone.", "mgp.", "setpool.", "hpm.main.", "hpm.mgp."].iter().any(|p| n.starts_with(p)));
        }
        let back = GaitSet::from_checkpoint(ck.clone(), Some(model.config())).unwrap();
        assert_eq!(back, model);
        let other = small(SpStrategy::Max, true);
        assert!(GaitSet::from_checkpoint(ck, Some(&other)).is_err());
    }
}
