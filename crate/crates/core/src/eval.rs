//! Gallery/probe retrieval: embedding stores, rank-1 accuracy matrices and
//! the practicality sweeps (limited frames, multiple views, multiple
//! walking conditions).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataio::{compose_probe, DatasetIndex, ProbeMode, SequenceKey, SilhouetteSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::network::{Embedding, EmbeddingMeta, GaitSet};
use crate::tensor::Tensor;

pub const STORE_MAGIC: &[u8; 4] = b"GSEM";
pub const STORE_VERSION: u32 = 1;

/// Embeddings of many samples plus the provenance of the run that made them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    pub provenance: String,
    pub entries: Vec<Embedding>,
}

impl EmbeddingStore {
    /// Binary layout, little-endian:
    ///
    /// ```text
    /// "GSEM" u32 version  str provenance  u32 count  u32 rows  u32 d
    /// count × { str identity, str condition, str source, u32 view, rows·d × f32 }
    /// ```
    ///
    /// where `str` is a u32 byte length followed by UTF-8.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (rows, d) = self.dims()?;
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        put_str(&mut out, &self.provenance);
        for v in [self.entries.len(), rows, d] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for e in &self.entries {
            put_str(&mut out, &e.meta.identity);
            put_str(&mut out, &e.meta.condition);
            put_str(&mut out, &e.meta.source);
            out.extend_from_slice(&e.meta.view.to_le_bytes());
            for v in e.data.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::format(path, "not an embedding store (bad magic)"));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::format(path, format!("unsupported store version {version}")));
        }
        let provenance = r.string()?;
        let (count, rows, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let identity = r.string()?;
            let condition = r.string()?;
            let source = r.string()?;
            let view = r.u32()?;
            let raw = r.take(rows * d * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let data = Tensor::new(vec![rows, d], data).map_err(|e| Error::format(path, e.to_string()))?;
            entries.push(Embedding { data, meta: EmbeddingMeta { identity, view, condition, source } });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self { provenance, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// `(rows, d)` shared by all entries.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self.entries.first().ok_or_else(|| Error::Data("embedding store is empty".into()))?;
        let shape = first.data.shape().to_vec();
        if shape.len() != 2 || self.entries.iter().any(|e| e.data.shape() != shape.as_slice()) {
            return Err(Error::Shape("embedding store entries disagree in shape".into()));
        }
        Ok((shape[0], shape[1]))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }
}

pub fn meta_for(key: &SequenceKey) -> EmbeddingMeta {
    EmbeddingMeta { identity: key.identity.clone(), view: key.view, condition: key.condition.clone(), source: key.to_string() }
}

/// Embed every listed sequence from all of its frames, in parallel across
/// sequences; output order follows `entries`.
pub fn embed_sequences(model: &GaitSet<f32>, index: &DatasetIndex, entries: &[usize], provenance: &str) -> Result<EmbeddingStore> {
    if entries.is_empty() {
        return Err(Error::Data("no sequences to embed".into()));
    }
    let embedded = exec::map_range(entries.len(), |i| -> Result<Embedding> {
        let set = index.load(entries[i])?;
        Ok(Embedding { data: model.embed_set(&set.frames)?, meta: meta_for(&set.key) })
    });
    Ok(EmbeddingStore { provenance: provenance.to_string(), entries: embedded.into_iter().collect::<Result<_>>()? })
}

/// Embed already-loaded sequences.
pub fn embed_loaded(model: &GaitSet<f32>, sets: &[SilhouetteSet], provenance: &str) -> Result<EmbeddingStore> {
    if sets.is_empty() {
        return Err(Error::Data("no sequences to embed".into()));
    }
    let embedded = exec::map_range(sets.len(), |i| -> Result<Embedding> {
        Ok(Embedding { data: model.embed_set(&sets[i].frames)?, meta: meta_for(&sets[i].key) })
    });
    Ok(EmbeddingStore { provenance: provenance.to_string(), entries: embedded.into_iter().collect::<Result<_>>()? })
}

/// Gallery embeddings: one per gallery sequence of the protocol split.
pub fn embed_gallery(model: &GaitSet<f32>, dataset: &crate::dataio::Dataset, provenance: &str) -> Result<EmbeddingStore> {
    if dataset.split.gallery.is_empty() {
        return Err(Error::Data(format!("protocol {} selects an empty gallery", dataset.protocol.name)));
    }
    embed_sequences(model, &dataset.index, &dataset.split.gallery, provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    /// Euclidean distance between the flattened `rows·d` vectors.
    Concat,
    /// Sum over strips of per-strip Euclidean distances.
    StripSum,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(DistanceMode::Concat),
            "strip-sum" => Ok(DistanceMode::StripSum),
            _ => Err(Error::Config(format!("unknown distance {s:?} (concat | strip-sum)"))),
        }
    }
}

/// Monotone transform of the distance (squared for `Concat`).
fn distance(a: &Tensor<f32>, b: &Tensor<f32>, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Concat => a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum(),
        DistanceMode::StripSum => {
            let d = a.shape()[1];
            a.data()
                .chunks_exact(d)
                .zip(b.data().chunks_exact(d))
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>().sqrt())
                .sum()
        }
    }
}

/// Gallery entries indexed for nearest-neighbour queries: sorted by source
/// key so the first minimum is the lexicographically smallest.
pub struct Gallery<'a> {
    entries: Vec<&'a Embedding>,
    by_view: BTreeMap<u32, Vec<usize>>,
    shape: Vec<usize>,
}

impl<'a> Gallery<'a> {
    pub fn new(entries: &'a [Embedding]) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::Data("gallery is empty".into()))?;
        let shape = first.data.shape().to_vec();
        let mut sorted: Vec<&Embedding> = entries.iter().collect();
        sorted.sort_by(|a, b| a.meta.source.cmp(&b.meta.source));
        let mut by_view: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in sorted.iter().enumerate() {
            if e.data.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("gallery entry {} has shape {:?}, expected {shape:?}", e.meta.source, e.data.shape())));
            }
            by_view.entry(e.meta.view).or_default().push(i);
        }
        Ok(Self { entries: sorted, by_view, shape })
    }

    pub fn views(&self) -> Vec<u32> {
        self.by_view.keys().copied().collect()
    }

    /// Nearest gallery entry at view `view`; ties go to the smallest key.
    pub fn nearest(&self, probe: &Tensor<f32>, view: u32, mode: DistanceMode) -> Result<Option<&'a Embedding>> {
        if probe.shape() != self.shape.as_slice() {
            return Err(Error::Shape(format!("probe shape {:?} does not match gallery {:?}", probe.shape(), self.shape)));
        }
        let Some(idx) = self.by_view.get(&view) else {
            return Ok(None);
        };
        let mut best: Option<(f64, usize)> = None;
        for &i in idx {
            let d = distance(probe, &self.entries[i].data, mode);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        Ok(best.map(|(_, i)| self.entries[i]))
    }
}

/// Rank-1 hits per (probe view, gallery view).
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub probe_views: Vec<u32>,
    pub gallery_views: Vec<u32>,
    /// `[probe view][gallery view]`
    pub correct: Vec<Vec<usize>>,
    pub total: Vec<Vec<usize>>,
}

impl RetrievalResult {
    pub fn from_counts(probe_views: Vec<u32>, gallery_views: Vec<u32>, correct: Vec<Vec<usize>>, total: Vec<Vec<usize>>) -> Self {
        Self { probe_views, gallery_views, correct, total }
    }

    /// Percent correct in one cell, `None` if the cell is empty.
    pub fn accuracy(&self, pi: usize, gi: usize) -> Option<f64> {
        let t = self.total[pi][gi];
        (t > 0).then(|| 100.0 * self.correct[pi][gi] as f64 / t as f64)
    }

    /// Mean over gallery views other than the probe's own view.
    pub fn view_mean(&self, pi: usize) -> Option<f64> {
        let pv = self.probe_views[pi];
        let cells: Vec<f64> = self
            .gallery_views
            .iter()
            .enumerate()
            .filter(|(_, &gv)| gv != pv)
            .filter_map(|(gi, _)| self.accuracy(pi, gi))
            .collect();
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    }

    /// Mean of the per-probe-view means, identical views excluded.
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = (0..self.probe_views.len()).filter_map(|pi| self.view_mean(pi)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn probe_count(&self) -> usize {
        self.total.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum()
    }

    /// Aligned matrix: rows are probe views, columns gallery views, then the
    /// identical-view-excluded mean.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = format!("{title}\nprobe\\gallery");
        for gv in &self.gallery_views {
            let _ = write!(s, " {gv:>6}");
        }
        s.push_str("   mean\n");
        for (pi, pv) in self.probe_views.iter().enumerate() {
            let _ = write!(s, "{pv:>13}");
            for gi in 0..self.gallery_views.len() {
                match self.accuracy(pi, gi) {
                    Some(a) if self.gallery_views[gi] == *pv => {
                        let _ = write!(s, " ({a:>4.0})");
                    }
                    Some(a) => {
                        let _ = write!(s, " {a:>6.1}");
                    }
                    None => s.push_str("      -"),
                }
            }
            match self.view_mean(pi) {
                Some(m) => {
                    let _ = writeln!(s, " {m:>6.1}");
                }
                None => s.push_str("      -\n"),
            }
        }
        s
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        if let Some(m) = self.mean() {
            let _ = writeln!(s, "{prefix}.mean = {m:.4}");
        }
        for (pi, pv) in self.probe_views.iter().enumerate() {
            if let Some(m) = self.view_mean(pi) {
                let _ = writeln!(s, "{prefix}.view.{pv:03}.mean = {m:.4}");
            }
            for (gi, gv) in self.gallery_views.iter().enumerate() {
                let _ = writeln!(s, "{prefix}.cell.{pv:03}.{gv:03}.correct = {}", self.correct[pi][gi]);
                let _ = writeln!(s, "{prefix}.cell.{pv:03}.{gv:03}.total = {}", self.total[pi][gi]);
            }
        }
        s
    }
}

/// Rank-1 accuracy of `probes` against `gallery`. For every probe and every
/// gallery view, the nearest gallery entry of that view decides the
/// predicted identity.
pub fn rank1(probes: &[Embedding], gallery: &[Embedding], mode: DistanceMode) -> Result<RetrievalResult> {
    if probes.is_empty() {
        return Err(Error::Data("no probe embeddings".into()));
    }
    let gal = Gallery::new(gallery)?;
    let gallery_views = gal.views();
    let mut probe_views: Vec<u32> = probes.iter().map(|p| p.meta.view).collect();
    probe_views.sort_unstable();
    probe_views.dedup();
    let hits = exec::map_range(probes.len(), |i| -> Result<Vec<bool>> {
        gallery_views
            .iter()
            .map(|&gv| Ok(gal.nearest(&probes[i].data, gv, mode)?.is_some_and(|g| g.meta.identity == probes[i].meta.identity)))
            .collect()
    });
    let mut correct = vec![vec![0; gallery_views.len()]; probe_views.len()];
    let mut total = correct.clone();
    for (p, h) in probes.iter().zip(hits) {
        let h = h?;
        let pi = probe_views.binary_search(&p.meta.view).expect("view collected above");
        for (gi, hit) in h.into_iter().enumerate() {
            total[pi][gi] += 1;
            correct[pi][gi] += hit as usize;
        }
    }
    Ok(RetrievalResult { probe_views, gallery_views, correct, total })
}

/// Results of every probe subset of a protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub provenance: String,
    pub subsets: Vec<(String, RetrievalResult)>,
}

impl EvalReport {
    /// Summary in the layout of the usual results table: one row per probe
    /// subset, one column per probe view (each averaged over the other
    /// gallery views) and the overall mean; followed by each full matrix.
    pub fn to_table(&self) -> String {
        let mut views: Vec<u32> = self.subsets.iter().flat_map(|(_, r)| r.probe_views.clone()).collect();
        views.sort_unstable();
        views.dedup();
        let mut s = String::from("rank-1 accuracy (%), identical views excluded\nsubset");
        for v in &views {
            let _ = write!(s, " {v:>6}");
        }
        s.push_str("   mean\n");
        for (name, r) in &self.subsets {
            let _ = write!(s, "{name:<6}");
            for v in &views {
                match r.probe_views.iter().position(|p| p == v).and_then(|pi| r.view_mean(pi)) {
                    Some(m) => {
                        let _ = write!(s, " {m:>6.1}");
                    }
                    None => s.push_str("      -"),
                }
            }
            match r.mean() {
                Some(m) => {
                    let _ = writeln!(s, " {m:>6.1}");
                }
                None => s.push_str("      -\n"),
            }
        }
        for (name, r) in &self.subsets {
            s.push('\n');
            s.push_str(&r.to_table(&format!("{name} (diagonal in parentheses)")));
        }
        s
    }

    /// `key = value` lines; provenance lines are prefixed with `run.`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for line in self.provenance.lines().filter(|l| !l.trim().is_empty()) {
            let _ = writeln!(s, "run.{line}");
        }
        for (name, r) in &self.subsets {
            s.push_str(&r.to_kv(&format!("subset.{name}")));
        }
        s
    }
}

/// Embed the gallery and every probe subset of `dataset` and score each
/// subset against the gallery.
pub fn evaluate_dataset(model: &GaitSet<f32>, dataset: &crate::dataio::Dataset, mode: DistanceMode, provenance: &str) -> Result<EvalReport> {
    let gallery = embed_gallery(model, dataset, provenance)?;
    let mut subsets = Vec::new();
    for (name, entries) in &dataset.split.probes {
        if entries.is_empty() {
            log::warn!("probe subset {name} is empty; skipped");
            continue;
        }
        let probes = embed_sequences(model, &dataset.index, entries, provenance)?;
        subsets.push((name.clone(), rank1(&probes.entries, &gallery.entries, mode)?));
    }
    if subsets.is_empty() {
        return Err(Error::Data("every probe subset is empty".into()));
    }
    Ok(EvalReport { provenance: provenance.to_string(), subsets })
}

/// Decoded probe sequences for a sweep: one named subset, or the union of
/// all subsets in index order.
pub fn sweep_probes(dataset: &crate::dataio::Dataset, subset: Option<&str>) -> Result<Vec<SilhouetteSet>> {
    let mut entries: Vec<usize> = match subset {
        Some(name) => dataset
            .split
            .probes
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, e)| e.clone())
            .ok_or_else(|| Error::Config(format!("protocol {} has no probe subset {name:?}", dataset.protocol.name)))?,
        None => dataset.split.probes.iter().flat_map(|(_, e)| e.iter().copied()).collect(),
    };
    entries.sort_unstable();
    entries.dedup();
    if entries.is_empty() {
        return Err(Error::Data("no probe sequences selected".into()));
    }
    dataset.index.load_many(&entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    Frames,
    MultiView,
    MultiCondition,
}

impl std::str::FromStr for SweepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames" => Ok(SweepMode::Frames),
            "multiview" => Ok(SweepMode::MultiView),
            "multicondition" => Ok(SweepMode::MultiCondition),
            _ => Err(Error::Config(format!("unknown sweep {s:?} (frames | multiview | multicondition)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    /// One accuracy per seed.
    pub per_seed: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.per_seed.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.per_seed.len() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub mode: SweepMode,
    pub provenance: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let seeds = self.rows.first().map_or(0, |r| r.per_seed.len());
        let mut s = format!("{:?} sweep, rank-1 accuracy (%) over {seeds} seeds\n{:<16} {:>7} {:>6}\n", self.mode, "probe", "mean", "std");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:>7.2} {:>6.2}", r.label, r.mean(), r.std());
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for line in self.provenance.lines().filter(|l| !l.trim().is_empty()) {
            let _ = writeln!(s, "run.{line}");
        }
        for r in &self.rows {
            let _ = writeln!(s, "sweep.{}.mean = {:.4}", r.label, r.mean());
            let _ = writeln!(s, "sweep.{}.std = {:.4}", r.label, r.std());
            let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "sweep.{}.per_seed = {}", r.label, seeds.join(","));
        }
        s
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// One probe sample: its embedding, identity and the gallery views it must
/// be scored against.
struct ScoredProbe {
    data: Tensor<f32>,
    identity: String,
    excluded_views: Vec<u32>,
}

/// Mean accuracy over probes, where each probe's accuracy is averaged over
/// the gallery views it is not excluded from.
fn score(probes: &[ScoredProbe], gallery: &Gallery, mode: DistanceMode) -> Result<f64> {
    let views = gallery.views();
    let per_probe = exec::map_range(probes.len(), |i| -> Result<Option<f64>> {
        let p = &probes[i];
        let mut hits = Vec::new();
        for &gv in views.iter().filter(|v| !p.excluded_views.contains(v)) {
            if let Some(g) = gallery.nearest(&p.data, gv, mode)? {
                hits.push(if g.meta.identity == p.identity { 100.0 } else { 0.0 });
            }
        }
        Ok((!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64))
    });
    let vals: Vec<f64> = per_probe.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(Error::Data("no probe could be scored against the gallery".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn embed_probe(model: &GaitSet<f32>, sources: &[&SilhouetteSet], mode: ProbeMode, budget: usize, seed: u64) -> Result<ScoredProbe> {
    let sample = compose_probe(sources, mode, budget, seed)?;
    let mut excluded: Vec<u32> = sample.sources.iter().map(|k| k.view).collect();
    excluded.dedup();
    Ok(ScoredProbe { data: model.embed_set(&sample.frames)?, identity: sample.sources[0].identity.clone(), excluded_views: excluded })
}

fn embed_probes(model: &GaitSet<f32>, jobs: &[(Vec<&SilhouetteSet>, ProbeMode, usize, u64)]) -> Result<Vec<ScoredProbe>> {
    exec::map_range(jobs.len(), |i| {
        let (src, mode, budget, seed) = &jobs[i];
        embed_probe(model, src, *mode, *budget, *seed)
    })
    .into_iter()
    .collect()
}

/// Probe frame-budget sweep. Each probe sequence is cut down to `budget`
/// randomly chosen frames; gallery entries keep all frames. Accuracy is the
/// mean over probes of the identical-view-excluded per-probe accuracy.
pub fn sweep_frames(
    model: &GaitSet<f32>,
    gallery: &[Embedding],
    probes: &[SilhouetteSet],
    budgets: &[usize],
    seeds: usize,
    base_seed: u64,
    mode: DistanceMode,
) -> Result<Vec<SweepRow>> {
    let gal = Gallery::new(gallery)?;
    let mut rows = Vec::new();
    for &b in budgets {
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let jobs: Vec<_> = probes
                .iter()
                .enumerate()
                .map(|(i, p)| (vec![p], ProbeMode::Single, b, mix(base_seed, s as u64, i as u64)))
                .collect();
            per_seed.push(score(&embed_probes(model, &jobs)?, &gal, mode)?);
        }
        rows.push(SweepRow { label: format!("frames_{b}"), per_seed });
    }
    Ok(rows)
}

/// View difference folded at 90°: `min(d, 180 - d)` for `d = |v1 - v2|`.
pub fn fold_view_difference(v1: u32, v2: u32) -> u32 {
    let d = v1.abs_diff(v2) % 360;
    let d = d.min(360 - d);
    d.min(180 - d.min(180))
}

/// Two-view fusion sweep: every pair of views of the same identity and
/// condition contributes a probe of `per_view` + `per_view` frames, bucketed
/// by folded view difference; the `single_view` row uses `2·per_view` frames
/// from one sequence. Gallery views present in a probe are excluded.
pub fn sweep_multiview(
    model: &GaitSet<f32>,
    gallery: &[Embedding],
    probes: &[SilhouetteSet],
    per_view: usize,
    seeds: usize,
    base_seed: u64,
    mode: DistanceMode,
) -> Result<Vec<SweepRow>> {
    let gal = Gallery::new(gallery)?;
    let mut groups: BTreeMap<(String, String, u32), Vec<&SilhouetteSet>> = BTreeMap::new();
    for p in probes {
        groups.entry((p.key.identity.clone(), p.key.condition.clone(), p.key.seq)).or_default().push(p);
    }
    let mut pairs: BTreeMap<u32, Vec<Vec<&SilhouetteSet>>> = BTreeMap::new();
    for seqs in groups.values() {
        for i in 0..seqs.len() {
            for j in i + 1..seqs.len() {
                if seqs[i].key.view != seqs[j].key.view {
                    pairs.entry(fold_view_difference(seqs[i].key.view, seqs[j].key.view)).or_default().push(vec![seqs[i], seqs[j]]);
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data("multi-view sweep needs sequences of one identity at two or more views".into()));
    }
    let mut rows = Vec::new();
    for (diff, srcs) in &pairs {
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let jobs: Vec<_> = srcs
                .iter()
                .enumerate()
                .map(|(i, src)| (src.clone(), ProbeMode::MultiView, per_view, mix(base_seed, s as u64, 1_000_000 + i as u64)))
                .collect();
            per_seed.push(score(&embed_probes(model, &jobs)?, &gal, mode)?);
        }
        rows.push(SweepRow { label: format!("diff_{diff:03}"), per_seed });
    }
    let mut per_seed = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let jobs: Vec<_> = probes
            .iter()
            .enumerate()
            .map(|(i, p)| (vec![p], ProbeMode::Single, 2 * per_view, mix(base_seed, s as u64, i as u64)))
            .collect();
        per_seed.push(score(&embed_probes(model, &jobs)?, &gal, mode)?);
    }
    rows.push(SweepRow { label: "single_view".into(), per_seed });
    Ok(rows)
}

/// Mean over all two-view rows, weighting every view pair equally.
pub fn multiview_mean(rows: &[SweepRow]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.label.starts_with("diff_")).map(|r| r.mean()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Multi-condition grid: single-condition probes with `budget` and
/// `2·budget` frames and every pair of conditions at the same view with
/// `budget` + `budget` frames.
pub fn sweep_multicondition(
    model: &GaitSet<f32>,
    gallery: &[Embedding],
    probes: &[SilhouetteSet],
    conditions: &[&str],
    budget: usize,
    seeds: usize,
    base_seed: u64,
    mode: DistanceMode,
) -> Result<Vec<SweepRow>> {
    let gal = Gallery::new(gallery)?;
    let mut cells: BTreeMap<(String, u32), BTreeMap<String, &SilhouetteSet>> = BTreeMap::new();
    for p in probes {
        cells.entry((p.key.identity.clone(), p.key.view)).or_default().insert(p.key.condition.clone(), p);
    }
    let mut arms: Vec<(String, Vec<&str>, usize)> = Vec::new();
    for c in conditions {
        arms.push((format!("{c}({budget})"), vec![c], budget));
    }
    for i in 0..conditions.len() {
        for j in i + 1..conditions.len() {
            arms.push((format!("{}({budget})+{}({budget})", conditions[i], conditions[j]), vec![conditions[i], conditions[j]], budget));
        }
    }
    for c in conditions {
        arms.push((format!("{c}({})", 2 * budget), vec![c], 2 * budget));
    }
    let mut rows = Vec::new();
    for (label, conds, b) in arms {
        let sources: Vec<Vec<&SilhouetteSet>> = cells
            .values()
            .filter_map(|by_cond| conds.iter().map(|c| by_cond.get(*c).copied()).collect::<Option<Vec<_>>>())
            .collect();
        if sources.is_empty() {
            return Err(Error::Data(format!("no probe sequences for arm {label}")));
        }
        let pm = if conds.len() == 1 { ProbeMode::Single } else { ProbeMode::MultiCondition };
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let jobs: Vec<_> = sources.iter().enumerate().map(|(i, src)| (src.clone(), pm, b, mix(base_seed, s as u64, i as u64))).collect();
            per_seed.push(score(&embed_probes(model, &jobs)?, &gal, mode)?);
        }
        rows.push(SweepRow { label, per_seed });
    }
    Ok(rows)
}
