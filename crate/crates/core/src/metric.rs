//! Batch-all triplet loss, the p×k batch sampler and the optimizer step.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{SequenceKey, SilhouetteSet};
use crate::error::{Error, Result};
use crate::network::GaitSet;
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    /// Persons per batch.
    pub p: usize,
    /// Samples per person.
    pub k: usize,
    /// Frames per sample.
    pub m: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p: 8, k: 16, m: 30 }
    }
}

impl BatchSpec {
    pub fn new(p: usize, k: usize, m: usize) -> Result<Self> {
        if p < 2 || k < 2 || m == 0 {
            return Err(Error::Config(format!("batch spec p={p} k={k} m={m}: need p >= 2, k >= 2, m >= 1")));
        }
        Ok(Self { p, k, m })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLossReport {
    pub total: f64,
    /// Fraction of valid (anchor, positive, negative) terms with a positive
    /// hinge, over all strips.
    pub nonzero_fraction: f64,
    pub per_strip: Vec<f64>,
}

struct Hinge {
    a: usize,
    p: usize,
    n: usize,
}

struct TripletOp {
    /// Active hinges per strip.
    active: Vec<Vec<Hinge>>,
    /// Pairwise distances per strip, `[b * b]`.
    dist: Vec<Vec<f64>>,
    batch: usize,
}

impl<T: Real> CustomOp<T> for TripletOp {
    fn name(&self) -> &'static str {
        "batch_all_triplet"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let e = inputs[0];
        let (b, rows, d) = (e.shape()[0], e.shape()[1], e.shape()[2]);
        let x = e.data();
        let mut gx = vec![0f64; x.len()];
        let scale = grad[0].as_f64() / rows as f64;
        for (r, hinges) in self.active.iter().enumerate() {
            if hinges.is_empty() {
                continue;
            }
            let w = scale / hinges.len() as f64;
            // d(dist(i,j))/dx_i = (x_i - x_j) / dist(i,j); zero at coincidence.
            let mut pull = |i: usize, j: usize, sign: f64| {
                let dij = self.dist[r][i * self.batch + j];
                if dij == 0.0 {
                    return;
                }
                let c = sign * w / dij;
                for t in 0..d {
                    let diff = x[(i * rows + r) * d + t].as_f64() - x[(j * rows + r) * d + t].as_f64();
                    gx[(i * rows + r) * d + t] += c * diff;
                    gx[(j * rows + r) * d + t] -= c * diff;
                }
            };
            for h in hinges {
                pull(h.a, h.p, 1.0);
                pull(h.a, h.n, -1.0);
            }
        }
        debug_assert_eq!(b, self.batch);
        Ok(vec![Some(gx.into_iter().map(T::of).collect())])
    }
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "triplet loss expects [b, rows, d] embeddings with b labels, got {shape:?} and {} labels",
            labels.len()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 || !counts.values().any(|&c| c >= 2) {
        return Err(Error::DegenerateBatch(format!(
            "{} labels over {} identities leave no (anchor, positive, negative) triplet",
            labels.len(),
            counts.len()
        )));
    }
    Ok(())
}

/// Batch-all triplet loss on the graph. For every strip, the hinge
/// `max(0, margin + d(a,p) - d(a,n))` is averaged over its positive terms;
/// the total is the mean over strips.
pub fn batch_all_triplet_graph<T: Real>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<(Var, TripletLossReport)> {
    let e = g.value(embeddings);
    check_labels(e.shape(), labels)?;
    let (b, rows, d) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let x = e.data();
    let mut active = Vec::with_capacity(rows);
    let mut dist_all = Vec::with_capacity(rows);
    let mut per_strip = Vec::with_capacity(rows);
    let (mut positive, mut valid) = (0usize, 0usize);
    for r in 0..rows {
        let mut dist = vec![0f64; b * b];
        for i in 0..b {
            for j in i + 1..b {
                let mut s = 0f64;
                for t in 0..d {
                    let diff = x[(i * rows + r) * d + t].as_f64() - x[(j * rows + r) * d + t].as_f64();
                    s += diff * diff;
                }
                dist[i * b + j] = s.sqrt();
                dist[j * b + i] = s.sqrt();
            }
        }
        let mut hinges = Vec::new();
        let mut sum = 0f64;
        for a in 0..b {
            for p in 0..b {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..b {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    valid += 1;
                    let h = margin + dist[a * b + p] - dist[a * b + n];
                    if h > 0.0 {
                        sum += h;
                        hinges.push(Hinge { a, p, n });
                    }
                }
            }
        }
        positive += hinges.len();
        per_strip.push(if hinges.is_empty() { 0.0 } else { sum / hinges.len() as f64 });
        active.push(hinges);
        dist_all.push(dist);
    }
    let total = per_strip.iter().sum::<f64>() / rows as f64;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "batch_all_triplet", pass: "forward" });
    }
    let report = TripletLossReport { total, nonzero_fraction: positive as f64 / valid as f64, per_strip };
    let value = Tensor::scalar(T::of(total));
    let op = TripletOp { active, dist: dist_all, batch: b };
    let v = g.custom(&[embeddings], value, Box::new(op))?;
    Ok((v, report))
}

/// Value-only form of [`batch_all_triplet_graph`].
pub fn batch_all_triplet<T: Real>(embeddings: &Tensor<T>, labels: &[usize], margin: f64) -> Result<TripletLossReport> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    Ok(batch_all_triplet_graph(&mut g, e, labels, margin)?.1)
}

/// One training batch: `p·k` samples of `m` frames each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: Vec<Tensor<f32>>,
    /// Dense identity labels, `0..p`, in identity order of `identities`.
    pub labels: Vec<usize>,
    pub identities: Vec<String>,
    pub sources: Vec<SequenceKey>,
}

/// Draw a batch: `p` distinct identities, `k` sequences each (with
/// replacement only when an identity has fewer than `k`), `m` frames per
/// sequence (with replacement only when the sequence is shorter than `m`).
pub fn sample_batch_with<R: Rng + ?Sized>(dataset: &[SilhouetteSet], spec: BatchSpec, rng: &mut R) -> Result<Batch> {
    let mut by_id: BTreeMap<&str, Vec<&SilhouetteSet>> = BTreeMap::new();
    for s in dataset {
        by_id.entry(s.key.identity.as_str()).or_default().push(s);
    }
    if by_id.len() < spec.p {
        return Err(Error::Data(format!("batch needs {} identities, dataset has {}", spec.p, by_id.len())));
    }
    let ids: Vec<&str> = by_id.keys().copied().collect();
    let mut chosen = index::sample(rng, ids.len(), spec.p).into_vec();
    chosen.sort_unstable();
    let mut batch = Batch { samples: Vec::new(), labels: Vec::new(), identities: Vec::new(), sources: Vec::new() };
    for (label, &ci) in chosen.iter().enumerate() {
        let seqs = &by_id[ids[ci]];
        let picks: Vec<usize> = if seqs.len() >= spec.k {
            index::sample(rng, seqs.len(), spec.k).into_vec()
        } else {
            (0..spec.k).map(|_| rng.gen_range(0..seqs.len())).collect()
        };
        batch.identities.push(ids[ci].to_string());
        for si in picks {
            let s = seqs[si];
            let rows = crate::dataio::draw_frames(s.len(), spec.m, rng);
            batch.samples.push(s.frames.gather_outer(&rows)?);
            batch.labels.push(label);
            batch.sources.push(s.key.clone());
        }
    }
    Ok(batch)
}

pub fn sample_batch(dataset: &[SilhouetteSet], spec: BatchSpec, seed: u64) -> Result<Batch> {
    sample_batch_with(dataset, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update; `grads` must follow the parameter order.
    pub fn update<T: Real>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.numel() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::Shape(format!("parameter {i}: size mismatch in optimizer state")));
            }
            for (j, (w, gv)) in p.data_mut().iter_mut().zip(g).enumerate() {
                let gv = gv.as_f64();
                let m = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gv;
                let v = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gv * gv;
                self.m[i][j] = m;
                self.v[i][j] = v;
                *w -= T::of(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Loss and per-parameter gradients (in parameter order) for one batch.
pub fn batch_gradients<T: Real>(
    model: &GaitSet<T>,
    batch: &Batch,
    margin: f64,
) -> Result<(TripletLossReport, Vec<(String, Vec<T>)>)> {
    let samples: Vec<Tensor<T>> = batch.samples.iter().map(|s| s.cast()).collect();
    let refs: Vec<&Tensor<T>> = samples.iter().collect();
    let (frames, layout) = model.stack_input(&refs)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = g.constant(frames);
    let emb = model.forward(&mut g, &p, x, &layout)?;
    let (loss, report) = batch_all_triplet_graph(&mut g, emb, &batch.labels, margin)?;
    g.backward(loss)?;
    let mut grads = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        let v = p.var(name)?;
        let gr = g.take_grad(v).unwrap_or_else(|| vec![T::zero(); t.numel()]);
        grads.push((name.to_string(), gr));
    }
    Ok((report, grads))
}

/// Forward, backward and one optimizer update. Parameters are left alone
/// when no hinge term is positive.
pub fn train_step<T: Real>(model: &mut GaitSet<T>, batch: &Batch, opt: &mut Adam, margin: f64) -> Result<TripletLossReport> {
    let (report, grads) = batch_gradients(model, batch, margin)?;
    if report.nonzero_fraction == 0.0 {
        return Ok(report);
    }
    let grads: Vec<Vec<T>> = grads.into_iter().map(|(_, g)| g).collect();
    let mut params: Vec<&mut Tensor<T>> = model.params_mut().iter_mut().map(|(_, t)| t).collect();
    opt.update(&mut params, &grads)?;
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite { op: "adam", pass: "update" });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{InputMode, NetworkConfig};
    use crate::setpool::SpStrategy;

    /// Exhaustive enumeration, written independently of the fused op.
    fn oracle(e: &Tensor<f64>, labels: &[usize], margin: f64) -> f64 {
        let (b, rows, d) = (e.shape()[0], e.shape()[1], e.shape()[2]);
        let at = |i: usize, r: usize| &e.data()[(i * rows + r) * d..(i * rows + r + 1) * d];
        let dist = |i: usize, j: usize, r: usize| at(i, r).iter().zip(at(j, r)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let mut total = 0.0;
        for r in 0..rows {
            let terms: Vec<f64> = (0..b)
                .flat_map(|a| (0..b).map(move |p| (a, p)))
                .filter(|&(a, p)| a != p && labels[a] == labels[p])
                .flat_map(|(a, p)| (0..b).filter(move |&n| labels[n] != labels[a]).map(move |n| (a, p, n)))
                .map(|(a, p, n)| (margin + dist(a, p, r) - dist(a, n, r)).max(0.0))
                .filter(|&h| h > 0.0)
                .collect();
            if !terms.is_empty() {
                total += terms.iter().sum::<f64>() / terms.len() as f64;
            }
        }
        total / rows as f64
    }

    fn one_d(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![values.len(), 1, 1], values.to_vec()).unwrap()
    }

    #[test]
    fn separated_clusters_cost_nothing() {
        let r = batch_all_triplet(&one_d(&[0.0, 0.0, 10.0, 10.0]), &[0, 0, 1, 1], 0.2).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.nonzero_fraction, 0.0);
    }

    #[test]
    fn small_example_matches_oracle() {
        let e = one_d(&[0.0, 1.0, 1.5, 2.5]);
        let labels = [0, 0, 1, 1];
        let r = batch_all_triplet(&e, &labels, 0.2).unwrap();
        assert!((r.total - oracle(&e, &labels, 0.2)).abs() < 1e-12);
        // 8 valid triplets; hinges: a=0:(1.2-1.5, 1.2-2.5) a=1:(1.2-0.5, 1.2-1.5) a=2:(1.2-1.5, 1.2-0.5) a=3:(1.2-2.5, 1.2-1.5)
        assert!((r.total - 0.7).abs() < 1e-12);
        assert_eq!(r.nonzero_fraction, 2.0 / 8.0);
    }

    #[test]
    fn permutation_of_batch_order() {
        let e = Tensor::from_fn(&[6, 3, 2], |i| ((i * 37 % 11) as f64).sin());
        let labels = [0, 1, 2, 0, 1, 2];
        let a = batch_all_triplet(&e, &labels, 0.2).unwrap();
        let perm = [5, 3, 1, 0, 2, 4];
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = batch_all_triplet(&e.gather_outer(&perm).unwrap(), &pl, 0.2).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batches() {
        let e = one_d(&[0.0, 1.0, 2.0]);
        assert!(matches!(batch_all_triplet(&e, &[0, 0, 0], 0.2), Err(Error::DegenerateBatch(_))));
        assert!(matches!(batch_all_triplet(&e, &[0, 1, 2], 0.2), Err(Error::DegenerateBatch(_))));
        assert!(batch_all_triplet(&e, &[0, 1], 0.2).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Tensor::<f64>::uniform(&[6, 2, 3], 1.0, &mut rng);
        let labels = [0, 0, 1, 1, 2, 2];
        let r = crate::tensor::grad_check(|g, x| Ok(batch_all_triplet_graph(g, x, &labels, 0.5)?.0), &e, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    fn toy_dataset(ids: usize, seqs: usize, frames: usize) -> Vec<SilhouetteSet> {
        let mut out = Vec::new();
        for i in 0..ids {
            for s in 0..seqs {
                let key = SequenceKey { identity: format!("{i:03}"), condition: "NM".into(), seq: s as u32 + 1, view: 90 };
                let t = Tensor::from_fn(&[frames, 1, 64, 44], |j| ((i * 7 + s * 3 + j / 2816) % 5) as f32 / 4.0);
                out.push(SilhouetteSet::new(key, t).unwrap());
            }
        }
        out
    }

    #[test]
    fn sampler_labels_and_replacement() {
        let data = toy_dataset(2, 1, 3);
        let b = sample_batch(&data, BatchSpec::new(2, 2, 4).unwrap(), 1).unwrap();
        assert_eq!(b.labels, [0, 0, 1, 1]);
        assert_eq!(b.identities, ["000", "001"]);
        let b = sample_batch(&data, BatchSpec::new(2, 2, 30).unwrap(), 1).unwrap();
        assert!(b.samples.iter().all(|s| s.shape()[0] == 30));
        assert_eq!(b, sample_batch(&data, BatchSpec::new(2, 2, 30).unwrap(), 1).unwrap());
        assert!(sample_batch(&data, BatchSpec::new(3, 2, 4).unwrap(), 1).is_err());
        assert!(BatchSpec::new(1, 4, 4).is_err());
    }

    fn small_model() -> GaitSet<f32> {
        let cfg = NetworkConfig {
            channels: [2, 2, 4, 4, 4, 4],
            scales: 2,
            embed_dim: 4,
            sp_strategy: SpStrategy::Max,
            leaky_slope: 0.1,
            mgp_enabled: true,
            hpm_independent: true,
            input_mode: InputMode::Set,
            frame_height: 64,
            frame_width: 44,
        };
        GaitSet::new(cfg, 3).unwrap()
    }

    #[test]
    fn zero_loss_leaves_parameters_untouched() {
        let data = toy_dataset(2, 2, 4);
        let batch = sample_batch(&data, BatchSpec::new(2, 2, 2).unwrap(), 0).unwrap();
        let mut model = small_model();
        let before = model.clone();
        let mut opt = Adam::new(1e-3);
        let r = train_step(&mut model, &batch, &mut opt, -1e6).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(model, before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn positive_hinge_moves_hpm_and_is_deterministic() {
        let data = toy_dataset(3, 2, 5);
        let batch = sample_batch(&data, BatchSpec::new(2, 2, 3).unwrap(), 4).unwrap();
        let model = small_model();
        let (r, grads) = batch_gradients(&model, &batch, 1e3).unwrap();
        assert!(r.nonzero_fraction > 0.0);
        let hpm = grads.iter().find(|(n, _)| n == "hpm.main.weight").unwrap();
        assert!(hpm.1.iter().map(|v| v * v).sum::<f32>() > 0.0);
        let run = || {
            let mut m = model.clone();
            let mut opt = Adam::new(1e-3);
            train_step(&mut m, &batch, &mut opt, 0.2).unwrap();
            train_step(&mut m, &batch, &mut opt, 0.2).unwrap();
            m
        };
        assert_eq!(run(), run());
    }
}
