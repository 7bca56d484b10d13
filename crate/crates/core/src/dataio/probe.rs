use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SequenceKey, SilhouetteSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Frames from one sequence.
    Single,
    /// Same condition, different views.
    MultiView,
    /// Same view, different conditions.
    MultiCondition,
}

/// A probe sample assembled from one or more sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub frames: Tensor<f32>,
    pub sources: Vec<SequenceKey>,
    /// `(source, frame)` for every frame in `frames`.
    pub frame_refs: Vec<(usize, usize)>,
    /// True when some source had fewer frames than the budget.
    pub replaced: bool,
}

/// Draw `budget` frames from each source (without replacement when the
/// source is long enough) and merge them into one sample.
pub fn compose_probe(sources: &[&SilhouetteSet], mode: ProbeMode, budget: usize, seed: u64) -> Result<ProbeSample> {
    if budget == 0 {
        return Err(Error::InvalidArgument("probe frame budget must be positive".into()));
    }
    match mode {
        ProbeMode::Single if sources.len() != 1 => {
            return Err(Error::Data(format!("single-sequence probe needs 1 source, got {}", sources.len())))
        }
        ProbeMode::MultiView | ProbeMode::MultiCondition if sources.len() < 2 => {
            return Err(Error::Data(format!("{mode:?} probe needs at least 2 sources, got {}", sources.len())))
        }
        _ => {}
    }
    let keys: Vec<&SequenceKey> = sources.iter().map(|s| &s.key).collect();
    let distinct = |f: &dyn Fn(&SequenceKey) -> String| {
        let mut v: Vec<String> = keys.iter().map(|k| f(k)).collect();
        v.sort();
        v.dedup();
        v.len()
    };
    let n = keys.len();
    match mode {
        ProbeMode::MultiView if distinct(&|k| k.condition.clone()) != 1 || distinct(&|k| k.view.to_string()) != n => {
            return Err(Error::Data("multi-view probe needs one condition and distinct views".into()))
        }
        ProbeMode::MultiCondition
            if distinct(&|k| k.view.to_string()) != 1 || distinct(&|k| format!("{}-{}", k.condition, k.seq)) != n =>
        {
            return Err(Error::Data("multi-condition probe needs one view and distinct conditions".into()))
        }
        _ => {}
    }
    if distinct(&|k| k.identity.clone()) != 1 {
        return Err(Error::Data("probe sources must share an identity".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame_refs = Vec::with_capacity(n * budget);
    let mut replaced = false;
    for (si, s) in sources.iter().enumerate() {
        let picks = draw_frames(s.len(), budget, &mut rng);
        if s.len() < budget {
            replaced = true;
            log::warn!("{}: {} frames, budget {budget}; drawing with replacement", s.key, s.len());
        }
        frame_refs.extend(picks.into_iter().map(|f| (si, f)));
    }
    let parts: Vec<Tensor<f32>> = sources
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let rows: Vec<usize> = frame_refs.iter().filter(|(src, _)| *src == si).map(|(_, f)| *f).collect();
            s.frames.gather_outer(&rows)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(ProbeSample {
        frames: Tensor::concat_outer(&refs)?,
        sources: keys.into_iter().cloned().collect(),
        frame_refs,
        replaced,
    })
}

/// `m` frame indices from `0..len`: distinct when `len >= m`, otherwise
/// drawn with replacement.
pub(crate) fn draw_frames<R: Rng + ?Sized>(len: usize, m: usize, rng: &mut R) -> Vec<usize> {
    if len >= m {
        index::sample(rng, len, m).into_vec()
    } else {
        (0..m).map(|_| rng.gen_range(0..len)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(cond: &str, view: u32, n: usize) -> SilhouetteSet {
        let key = SequenceKey { identity: "001".into(), condition: cond.into(), seq: 1, view };
        let frames = Tensor::from_fn(&[n, 1, 64, 44], |i| (i / 2816) as f32);
        SilhouetteSet::new(key, frames).unwrap()
    }

    #[test]
    fn single_budget() {
        let s = seq("NM", 90, 40);
        let p = compose_probe(&[&s], ProbeMode::Single, 7, 3).unwrap();
        assert_eq!(p.frames.shape()[0], 7);
        assert!(!p.replaced);
        let mut f: Vec<usize> = p.frame_refs.iter().map(|r| r.1).collect();
        f.sort();
        f.dedup();
        assert_eq!(f.len(), 7);
        assert_eq!(p, compose_probe(&[&s], ProbeMode::Single, 7, 3).unwrap());
    }

    #[test]
    fn multiview_and_multicondition() {
        let (a, b) = (seq("NM", 0, 40), seq("NM", 90, 40));
        let p = compose_probe(&[&a, &b], ProbeMode::MultiView, 5, 1).unwrap();
        assert_eq!(p.frames.shape()[0], 10);
        assert_eq!(p.sources.iter().map(|k| k.view).collect::<Vec<_>>(), [0, 90]);
        let (c, d) = (seq("NM", 36, 40), seq("BG", 36, 40));
        let p = compose_probe(&[&c, &d], ProbeMode::MultiCondition, 10, 1).unwrap();
        assert_eq!(p.frames.shape()[0], 20);
        assert_eq!(p.sources.iter().map(|k| k.condition.as_str()).collect::<Vec<_>>(), ["NM", "BG"]);
    }

    #[test]
    fn mode_constraints() {
        let (a, b) = (seq("NM", 0, 4), seq("BG", 90, 4));
        assert!(compose_probe(&[&a, &b], ProbeMode::MultiView, 2, 0).is_err());
        assert!(compose_probe(&[&a, &b], ProbeMode::MultiCondition, 2, 0).is_err());
        assert!(compose_probe(&[&a], ProbeMode::MultiView, 2, 0).is_err());
        assert!(compose_probe(&[&a, &a], ProbeMode::Single, 2, 0).is_err());
    }

    #[test]
    fn short_sequence_falls_back_to_replacement() {
        let s = seq("NM", 0, 3);
        let p = compose_probe(&[&s], ProbeMode::Single, 30, 9).unwrap();
        assert!(p.replaced);
        assert_eq!(p.frames.shape()[0], 30);
    }
}
