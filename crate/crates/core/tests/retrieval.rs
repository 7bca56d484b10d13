mod common;

use common::{embedding, rank1_oracle};
use gaitset::eval::{rank1, DistanceMode, EmbeddingStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small-integer embeddings so distances are exact and ties are common.
fn integer_set(n: usize, ids: usize, views: &[u32], tag: &str, rng: &mut ChaCha8Rng) -> Vec<gaitset::network::Embedding> {
    (0..n)
        .map(|i| {
            let id = format!("{:03}", rng.gen_range(0..ids));
            let view = views[rng.gen_range(0..views.len())];
            let data = (0..6).map(|_| rng.gen_range(0..3) as f32).collect();
            embedding(&id, view, &format!("{tag}{i:04}"), 2, 3, data)
        })
        .collect()
}

#[test]
fn rank1_agrees_with_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let views = [0, 90, 180];
    let gallery = integer_set(100, 10, &views, "g", &mut rng);
    let probes = integer_set(100, 10, &views, "p", &mut rng);
    let r = rank1(&probes, &gallery, DistanceMode::Concat).unwrap();
    let oracle = rank1_oracle(&probes, &gallery);
    for (pi, pv) in r.probe_views.iter().enumerate() {
        for (gi, gv) in r.gallery_views.iter().enumerate() {
            let (c, t) = oracle.get(&(*pv, *gv)).copied().unwrap_or((0, 0));
            assert_eq!((r.correct[pi][gi], r.total[pi][gi]), (c, t), "cell ({pv}, {gv})");
        }
    }
}

#[test]
fn random_embeddings_score_near_chance() {
    let mut means = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views = [0u32, 90];
        let mut gallery = Vec::new();
        let mut probes = Vec::new();
        for id in 0..10 {
            for &v in &views {
                let g: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                gallery.push(embedding(&format!("{id:02}"), v, &format!("g{id:02}-{v}"), 4, 4, g));
                for s in 0..20 {
                    let p: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    probes.push(embedding(&format!("{id:02}"), v, &format!("p{id:02}-{v}-{s}"), 4, 4, p));
                }
            }
        }
        means.push(rank1(&probes, &gallery, DistanceMode::Concat).unwrap().mean().unwrap());
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    assert!((mean - 10.0).abs() <= 3.0, "chance level {mean}");
}

#[test]
fn store_survives_disk_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let entries = integer_set(20, 4, &[0, 18], "s", &mut rng);
    let store = EmbeddingStore { provenance: "seed = 1\n".into(), entries };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.gsem");
    store.write(&p).unwrap();
    let back = EmbeddingStore::read(&p).unwrap();
    assert_eq!(back, store);
    assert_eq!(std::fs::read(&p).unwrap(), store.to_bytes().unwrap());
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let g = vec![embedding("a", 0, "g", 2, 2, vec![0.0; 4])];
    let p = vec![embedding("a", 90, "p", 2, 3, vec![0.0; 6])];
    assert!(rank1(&p, &g, DistanceMode::Concat).is_err());
    assert!(rank1(&p, &[], DistanceMode::Concat).is_err());
}
