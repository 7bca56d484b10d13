//! Set pooling: permutation-invariant aggregation of frame-level feature
//! maps into one set-level map.
//!
//! Several sets are usually pooled at once. Their frames are stacked along
//! axis 0 of one `[N, c, h, w]` tensor and a [`SetLayout`] records how many
//! consecutive frames belong to each set; pooled output is `[S, c, h, w]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

/// Aggregation applied over the set axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpStrategy {
    Max,
    Mean,
    Median,
    /// max + mean + median
    JointSum,
    /// 1×1 convolution over the concatenated max/mean/median maps
    JointConv,
    /// residual element-wise attention refinement followed by max
    Attention,
}

impl SpStrategy {
    pub const ALL: [SpStrategy; 6] = [
        SpStrategy::Max,
        SpStrategy::Mean,
        SpStrategy::Median,
        SpStrategy::JointSum,
        SpStrategy::JointConv,
        SpStrategy::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpStrategy::Max => "max",
            SpStrategy::Mean => "mean",
            SpStrategy::Median => "median",
            SpStrategy::JointSum => "joint_sum",
            SpStrategy::JointConv => "joint_conv",
            SpStrategy::Attention => "attention",
        }
    }

    /// Shape of the trainable 1×1 kernel for `channels` input channels, if any.
    pub fn param_shape(self, channels: usize) -> Option<[usize; 4]> {
        match self {
            SpStrategy::JointConv => Some([channels, 3 * channels, 1, 1]),
            SpStrategy::Attention => Some([channels, 4 * channels, 1, 1]),
            _ => None,
        }
    }

    /// Whether the output is a pure order statistic (exactly invariant).
    pub fn is_order_statistic(self) -> bool {
        matches!(self, SpStrategy::Max | SpStrategy::Median)
    }
}

impl fmt::Display for SpStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpStrategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown set pooling strategy {s:?}")))
    }
}

/// Number of frames in each of the sets stacked along axis 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetLayout {
    lens: Vec<usize>,
}

impl SetLayout {
    pub fn new(lens: Vec<usize>) -> Result<Self> {
        if lens.is_empty() || lens.contains(&0) {
            return Err(Error::EmptySet);
        }
        Ok(Self { lens })
    }

    pub fn single(n: usize) -> Result<Self> {
        Self::new(vec![n])
    }

    pub fn num_sets(&self) -> usize {
        self.lens.len()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// `(first_frame, len)` for each set.
    pub fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens.iter().scan(0, |start, &len| {
            let r = (*start, len);
            *start += len;
            Some(r)
        })
    }

    fn check(&self, shape: &[usize]) -> Result<usize> {
        if shape.is_empty() || shape[0] != self.total() {
            return Err(Error::Shape(format!(
                "set layout covers {} frames, tensor has shape {shape:?}",
                self.total()
            )));
        }
        Ok(shape[1..].iter().product())
    }

    fn pooled_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        s[0] = self.num_sets();
        s
    }
}

struct SetMaxOp {
    argmax: Vec<usize>,
}

impl<T: Real> CustomOp<T> for SetMaxOp {
    fn name(&self) -> &'static str {
        "set_max"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for (&src, &g) in self.argmax.iter().zip(grad) {
            dx[src] += g;
        }
        Ok(vec![Some(dx)])
    }
}

struct SetMeanOp {
    layout: SetLayout,
}

impl<T: Real> CustomOp<T> for SetMeanOp {
    fn name(&self) -> &'static str {
        "set_mean"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let inner = inputs[0].numel() / self.layout.total();
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for (s, (start, len)) in self.layout.ranges().enumerate() {
            let scale = T::one() / T::of(len as f64);
            let g = &grad[s * inner..(s + 1) * inner];
            for f in start..start + len {
                for (d, &gv) in dx[f * inner..(f + 1) * inner].iter_mut().zip(g) {
                    *d = gv * scale;
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct SetMedianOp {
    /// The one or two source indices whose average forms each output.
    picks: Vec<(usize, usize)>,
}

impl<T: Real> CustomOp<T> for SetMedianOp {
    fn name(&self) -> &'static str {
        "set_median"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx = vec![T::zero(); inputs[0].numel()];
        let half = T::of(0.5);
        for (&(lo, hi), &g) in self.picks.iter().zip(grad) {
            if lo == hi {
                dx[lo] += g;
            } else {
                dx[lo] += g * half;
                dx[hi] += g * half;
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct BroadcastOp {
    layout: SetLayout,
}

impl<T: Real> CustomOp<T> for BroadcastOp {
    fn name(&self) -> &'static str {
        "broadcast_sets"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let inner = inputs[0].numel() / self.layout.num_sets();
        let mut dz = vec![T::zero(); inputs[0].numel()];
        for (s, (start, len)) in self.layout.ranges().enumerate() {
            let acc = &mut dz[s * inner..(s + 1) * inner];
            for f in start..start + len {
                for (a, &g) in acc.iter_mut().zip(&grad[f * inner..(f + 1) * inner]) {
                    *a += g;
                }
            }
        }
        Ok(vec![Some(dz)])
    }
}

/// Elementwise max over each set. Gradient goes to the first maximal frame.
pub fn set_max<T: Real>(g: &mut Graph<T>, x: Var, layout: &SetLayout) -> Result<Var> {
    let xt = g.value(x);
    let inner = layout.check(xt.shape())?;
    let data = xt.data();
    let mut out = Vec::with_capacity(layout.num_sets() * inner);
    let mut argmax = Vec::with_capacity(layout.num_sets() * inner);
    for (start, len) in layout.ranges() {
        let base = out.len();
        out.extend_from_slice(&data[start * inner..(start + 1) * inner]);
        argmax.extend((0..inner).map(|e| start * inner + e));
        for f in start + 1..start + len {
            let row = &data[f * inner..(f + 1) * inner];
            for e in 0..inner {
                if row[e] > out[base + e] {
                    out[base + e] = row[e];
                    argmax[base + e] = f * inner + e;
                }
            }
        }
    }
    let value = Tensor::new(layout.pooled_shape(xt.shape()), out)?;
    g.custom(&[x], value, Box::new(SetMaxOp { argmax }))
}

/// Elementwise mean over each set, accumulated in double precision.
pub fn set_mean<T: Real>(g: &mut Graph<T>, x: Var, layout: &SetLayout) -> Result<Var> {
    let xt = g.value(x);
    let inner = layout.check(xt.shape())?;
    let data = xt.data();
    let mut out = Vec::with_capacity(layout.num_sets() * inner);
    let mut acc = vec![0f64; inner];
    for (start, len) in layout.ranges() {
        acc.fill(0.0);
        for f in start..start + len {
            for (a, v) in acc.iter_mut().zip(&data[f * inner..(f + 1) * inner]) {
                *a += v.as_f64();
            }
        }
        out.extend(acc.iter().map(|a| T::of(a / len as f64)));
    }
    let value = Tensor::new(layout.pooled_shape(xt.shape()), out)?;
    g.custom(&[x], value, Box::new(SetMeanOp { layout: layout.clone() }))
}

/// Elementwise median over each set. Even cardinality averages the two
/// middle order statistics and splits the gradient between them.
pub fn set_median<T: Real>(g: &mut Graph<T>, x: Var, layout: &SetLayout) -> Result<Var> {
    let xt = g.value(x);
    let inner = layout.check(xt.shape())?;
    let data = xt.data();
    let mut out = Vec::with_capacity(layout.num_sets() * inner);
    let mut picks = Vec::with_capacity(layout.num_sets() * inner);
    let mut column: Vec<(T, usize)> = Vec::new();
    let half = T::of(0.5);
    for (start, len) in layout.ranges() {
        for e in 0..inner {
            column.clear();
            column.extend((start..start + len).map(|f| (data[f * inner + e], f * inner + e)));
            column.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            if len % 2 == 1 {
                let (v, i) = column[len / 2];
                out.push(v);
                picks.push((i, i));
            } else {
                let (a, i) = column[len / 2 - 1];
                let (b, j) = column[len / 2];
                out.push((a + b) * half);
                picks.push((i, j));
            }
        }
    }
    let value = Tensor::new(layout.pooled_shape(xt.shape()), out)?;
    g.custom(&[x], value, Box::new(SetMedianOp { picks }))
}

/// Replicate each set-level row `[S, ...]` across that set's frames `[N, ...]`.
pub fn broadcast_sets<T: Real>(g: &mut Graph<T>, z: Var, layout: &SetLayout) -> Result<Var> {
    let zt = g.value(z);
    if zt.shape()[0] != layout.num_sets() {
        return Err(Error::Shape(format!(
            "broadcast of {:?} over {} sets",
            zt.shape(),
            layout.num_sets()
        )));
    }
    let inner = zt.numel() / layout.num_sets();
    let mut out = Vec::with_capacity(layout.total() * inner);
    for (s, (_, len)) in layout.ranges().enumerate() {
        for _ in 0..len {
            out.extend_from_slice(&zt.data()[s * inner..(s + 1) * inner]);
        }
    }
    let mut shape = zt.shape().to_vec();
    shape[0] = layout.total();
    let value = Tensor::new(shape, out)?;
    g.custom(&[z], value, Box::new(BroadcastOp { layout: layout.clone() }))
}

fn check_params<T: Real>(g: &Graph<T>, strategy: SpStrategy, x: Var, params: Option<Var>) -> Result<Option<Var>> {
    let channels = g.value(x).shape().get(1).copied().unwrap_or(0);
    match (strategy.param_shape(channels), params) {
        (None, _) => Ok(None),
        (Some(want), Some(p)) => {
            if g.value(p).shape() != want {
                return Err(Error::Shape(format!(
                    "{strategy} parameters have shape {:?}, expected {want:?} for {channels} channels",
                    g.value(p).shape()
                )));
            }
            Ok(Some(p))
        }
        (Some(_), None) => Err(Error::InvalidArgument(format!("{strategy} pooling needs trainable parameters"))),
    }
}

/// Max, mean and median maps concatenated along channels: `[S, 3c, h, w]`.
fn statistics<T: Real>(g: &mut Graph<T>, x: Var, layout: &SetLayout) -> Result<Var> {
    let mx = set_max(g, x, layout)?;
    let mn = set_mean(g, x, layout)?;
    let md = set_median(g, x, layout)?;
    g.concat_channels(&[mx, mn, md])
}

/// Pool `x: [N, c, h, w]` into `[S, c, h, w]` with the given strategy.
/// `params` is the strategy's 1×1 kernel when it has one.
pub fn set_pool_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layout: &SetLayout,
    strategy: SpStrategy,
    params: Option<Var>,
) -> Result<Var> {
    if g.value(x).ndim() != 4 {
        return Err(Error::Shape(format!("set pooling expects [n,c,h,w], got {:?}", g.value(x).shape())));
    }
    layout.check(g.value(x).shape())?;
    let params = check_params(g, strategy, x, params)?;
    match strategy {
        SpStrategy::Max => set_max(g, x, layout),
        SpStrategy::Mean => set_mean(g, x, layout),
        SpStrategy::Median => set_median(g, x, layout),
        SpStrategy::JointSum => {
            let mx = set_max(g, x, layout)?;
            let mn = set_mean(g, x, layout)?;
            let md = set_median(g, x, layout)?;
            let s = g.add(mx, mn)?;
            g.add(s, md)
        }
        SpStrategy::JointConv => {
            let stats = statistics(g, x, layout)?;
            g.conv2d(stats, params.expect("checked"), (0, 0))
        }
        SpStrategy::Attention => {
            let stats = statistics(g, x, layout)?;
            let spread = broadcast_sets(g, stats, layout)?;
            let joined = g.concat_channels(&[x, spread])?;
            let attention = g.conv2d(joined, params.expect("checked"), (0, 0))?;
            let scaled = g.mul(x, attention)?;
            let refined = g.add(scaled, x)?;
            set_max(g, refined, layout)
        }
    }
}

fn pool_single<T: Real>(features: &Tensor<T>, strategy: SpStrategy, params: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if features.ndim() != 4 {
        return Err(Error::Shape(format!("set pooling expects [n,c,h,w], got {:?}", features.shape())));
    }
    let layout = SetLayout::single(features.shape()[0])?;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let p = params.map(|p| g.constant(p.clone()));
    let z = set_pool_graph(&mut g, x, &layout, strategy, p)?;
    let s = g.value(z).shape()[1..].to_vec();
    g.value(z).clone().reshape(&s)
}

/// Pool one set `[n, c, h, w]` into a set-level map `[c, h, w]`.
pub fn set_pool<T: Real>(features: &Tensor<T>, strategy: SpStrategy, params: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    pool_single(features, strategy, params)
}

/// Concatenate max/mean/median and apply a `[c, 3c, 1, 1]` combiner.
pub fn joint_conv_pool<T: Real>(features: &Tensor<T>, combiner: &Tensor<T>) -> Result<Tensor<T>> {
    pool_single(features, SpStrategy::JointConv, Some(combiner))
}

/// Residual attention refinement with a `[c, 4c, 1, 1]` kernel, then max.
pub fn attention_pool<T: Real>(features: &Tensor<T>, params: &Tensor<T>) -> Result<Tensor<T>> {
    pool_single(features, SpStrategy::Attention, Some(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(rows: &[&[f64]]) -> Tensor<f64> {
        let w = rows[0].len();
        Tensor::new(vec![rows.len(), 1, 1, w], rows.concat()).unwrap()
    }

    fn shuffled(t: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut idx: Vec<usize> = (0..t.shape()[0]).collect();
        idx.shuffle(rng);
        t.gather_outer(&idx).unwrap()
    }

    #[test]
    fn max_example() {
        let x = frames(&[&[1.0, 5.0], &[4.0, 2.0], &[3.0, 3.0]]);
        assert_eq!(set_pool(&x, SpStrategy::Max, None).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn joint_sum_example() {
        let x = frames(&[&[2.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(set_pool(&x, SpStrategy::JointSum, None).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn median_odd_and_even() {
        let x = frames(&[&[3.0], &[1.0], &[2.0]]);
        assert_eq!(set_pool(&x, SpStrategy::Median, None).unwrap().data(), &[2.0]);
        let x = frames(&[&[3.0], &[1.0], &[2.0], &[10.0]]);
        assert_eq!(set_pool(&x, SpStrategy::Median, None).unwrap().data(), &[2.5]);
    }

    #[test]
    fn empty_and_mismatched_params_error() {
        assert!(matches!(SetLayout::new(vec![3, 0]), Err(Error::EmptySet)));
        let x = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        let bad = Tensor::<f64>::zeros(&[2, 5, 1, 1]);
        assert!(joint_conv_pool(&x, &bad).is_err());
        assert!(attention_pool(&x, &bad).is_err());
        assert!(set_pool(&x, SpStrategy::JointConv, None).is_err());
    }

    #[test]
    fn joint_conv_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[5, 2, 3, 3], 1.0, &mut rng);
        // per output channel o: weight 1 on (max_o, mean_o, median_o)
        let sum_w = Tensor::from_fn(&[2, 6, 1, 1], |i| {
            let (o, j) = (i / 6, i % 6);
            if j % 2 == o { 1.0 } else { 0.0 }
        });
        let got = joint_conv_pool(&x, &sum_w).unwrap();
        let want = set_pool(&x, SpStrategy::JointSum, None).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);

        let max_w = Tensor::from_fn(&[2, 6, 1, 1], |i| if i % 6 == i / 6 { 1.0 } else { 0.0 });
        let got = joint_conv_pool(&x, &max_w).unwrap();
        assert_eq!(got, set_pool(&x, SpStrategy::Max, None).unwrap());
    }

    #[test]
    fn joint_conv_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[4, 3, 2, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 9, 1, 1], 1.0, &mut rng);
        let mx = set_pool(&x, SpStrategy::Max, None).unwrap();
        let mn = set_pool(&x, SpStrategy::Mean, None).unwrap();
        let md = set_pool(&x, SpStrategy::Median, None).unwrap();
        let plane = 4;
        let got = joint_conv_pool(&x, &w).unwrap();
        for o in 0..3 {
            for p in 0..plane {
                let mut acc = 0.0;
                for (blk, stat) in [&mx, &mn, &md].into_iter().enumerate() {
                    for c in 0..3 {
                        acc += w.data()[o * 9 + blk * 3 + c] * stat.data()[c * plane + p];
                    }
                }
                assert!((got.data()[o * plane + p] - acc).abs() <= 1e-6 * acc.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn zero_attention_is_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[6, 2, 3, 2], 1.0, &mut rng);
        let zeros = Tensor::zeros(&[2, 8, 1, 1]);
        assert_eq!(attention_pool(&x, &zeros).unwrap(), set_pool(&x, SpStrategy::Max, None).unwrap());
    }

    #[test]
    fn singleton_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[1, 2, 2, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[2, 8, 1, 1], 1.0, &mut rng);
        let got = attention_pool(&x, &w).unwrap();
        assert_eq!(got.shape(), &[2, 2, 2]);
        // statistics of a singleton all equal the frame itself
        let plane = 4;
        for c in 0..2 {
            for p in 0..plane {
                let v = x.data()[c * plane + p];
                let a: f64 = (0..8).map(|j| w.data()[c * 8 + j] * x.data()[(j % 2) * plane + p]).sum();
                let want = v * a + v;
                assert!((got.data()[c * plane + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[7, 3, 2, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 12, 1, 1], 0.5, &mut rng);
        let base = attention_pool(&x, &w).unwrap();
        for _ in 0..20 {
            let got = attention_pool(&shuffled(&x, &mut rng), &w).unwrap();
            assert!(got.max_rel_diff(&base, 1e-12) <= 1e-6);
        }
    }

    #[test]
    fn broadcast_round_trip_gradient() {
        let layout = SetLayout::new(vec![2, 3]).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = broadcast_sets(&mut g, z, &layout).unwrap();
        assert_eq!(g.value(b).data(), &[0.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0, 3.0, 2.0, 3.0]);
        let s = g.sum(b).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn multi_set_layout_pools_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::<f64>::uniform(&[3, 2, 2, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4, 2, 2, 2], 1.0, &mut rng);
        let both = Tensor::concat_outer(&[&a, &b]).unwrap();
        let layout = SetLayout::new(vec![3, 4]).unwrap();
        for st in [SpStrategy::Max, SpStrategy::Mean, SpStrategy::Median, SpStrategy::JointSum] {
            let mut g = Graph::new();
            let x = g.constant(both.clone());
            let z = set_pool_graph(&mut g, x, &layout, st, None).unwrap();
            let za = set_pool(&a, st, None).unwrap();
            let zb = set_pool(&b, st, None).unwrap();
            assert_eq!(&g.value(z).data()[..8], za.data());
            assert_eq!(&g.value(z).data()[8..], zb.data());
        }
    }

    #[test]
    fn gradients_of_statistics_and_trainable_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 4, 5] {
            let x = Tensor::<f64>::uniform(&[n, 2, 2, 3], 1.0, &mut rng);
            let layout = SetLayout::single(n).unwrap();
            let weights = Tensor::<f64>::uniform(&[1, 2, 2, 3], 1.0, &mut rng);
            for st in SpStrategy::ALL {
                let p = st.param_shape(2).map(|s| Tensor::<f64>::uniform(&s, 0.5, &mut rng));
                // w.r.t. frames
                let r = grad_check(
                    |g, xv| {
                        let pv = p.clone().map(|t| g.constant(t));
                        let z = set_pool_graph(g, xv, &layout, st, pv)?;
                        let w = g.constant(weights.clone());
                        let m = g.mul(z, w)?;
                        g.sum(m)
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                assert!(r.max_rel_error < 1e-4, "{st} n={n}: {}", r.max_rel_error);
                // w.r.t. parameters
                if let Some(p0) = &p {
                    let r = grad_check(
                        |g, pv| {
                            let xv = g.constant(x.clone());
                            let z = set_pool_graph(g, xv, &layout, st, Some(pv))?;
                            let w = g.constant(weights.clone());
                            let m = g.mul(z, w)?;
                            g.sum(m)
                        },
                        p0,
                        1e-6,
                    )
                    .unwrap();
                    assert!(r.max_rel_error < 1e-4, "{st} params: {}", r.max_rel_error);
                }
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in SpStrategy::ALL {
            assert_eq!(st.name().parse::<SpStrategy>().unwrap(), st);
        }
        assert!("sum".parse::<SpStrategy>().is_err());
    }
}
