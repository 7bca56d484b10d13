mod common;

use common::triplet_oracle;
use gaitset::dataio::{SequenceKey, SilhouetteSet};
use gaitset::metric::{batch_all_triplet, sample_batch, BatchSpec};
use gaitset::tensor::Tensor;
use proptest::prelude::*;

fn labels_for(p: usize, k: usize) -> Vec<usize> {
    (0..p * k).map(|i| i % p).collect()
}

/// Rotate every strip vector by `theta` in the plane of its first two axes.
fn rotate(e: &Tensor<f64>, theta: f64) -> Tensor<f64> {
    let d = e.shape()[2];
    let mut out = e.clone();
    for v in out.data_mut().chunks_mut(d) {
        let (x, y) = (v[0], v[1]);
        v[0] = theta.cos() * x - theta.sin() * y;
        v[1] = theta.sin() * x + theta.cos() * y;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_enumeration(p in 2usize..5, k in 2usize..5, rows in 1usize..4, seed in any::<u64>(), margin in 0.05f64..1.0) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let e = Tensor::<f64>::uniform(&[p * k, rows, 3], 1.0, &mut rng);
        let labels = labels_for(p, k);
        let r = batch_all_triplet(&e, &labels, margin).unwrap();
        prop_assert!((r.total - triplet_oracle(&e, &labels, margin)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r.nonzero_fraction));
    }

    #[test]
    fn loss_ignores_rotations(seed in any::<u64>(), theta in 0.0f64..std::f64::consts::TAU) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let e = Tensor::<f64>::uniform(&[9, 2, 4], 1.0, &mut rng);
        let labels = labels_for(3, 3);
        let a = batch_all_triplet(&e, &labels, 0.2).unwrap().total;
        let b = batch_all_triplet(&rotate(&e, theta), &labels, 0.2).unwrap().total;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn sampler_draws_k_of_each_label(p in 2usize..5, k in 2usize..4, m in 1usize..6, seed in any::<u64>()) {
        let data: Vec<SilhouetteSet> = (0..6)
            .flat_map(|i| (0..3).map(move |s| {
                let key = SequenceKey { identity: format!("{i:03}"), condition: "NM".into(), seq: s + 1, view: 0 };
                SilhouetteSet::new(key, Tensor::from_fn(&[4, 1, 64, 44], |j| (j % 2) as f32)).unwrap()
            }))
            .collect();
        let b = sample_batch(&data, BatchSpec::new(p, k, m).unwrap(), seed).unwrap();
        let mut counts = vec![0; p];
        for &l in &b.labels {
            counts[l] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c == k));
        prop_assert!(b.samples.iter().all(|s| s.shape()[0] == m));
        for (l, src) in b.labels.iter().zip(&b.sources) {
            prop_assert_eq!(&b.identities[*l], &src.identity);
        }
    }
}
