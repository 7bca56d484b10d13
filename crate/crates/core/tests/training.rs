use gaitset::dataio::{synth_sequence, SequenceKey, SilhouetteSet, SynthSpec};
use gaitset::metric::BatchSpec;
use gaitset::network::{GaitSet, NetworkConfig};
use gaitset::setpool::SpStrategy;
use gaitset::tensor::Tensor;
use gaitset::train::{read_run_config, run_training, train_model, RunConfig, CHECKPOINT_FILE, LOG_FILE};

fn narrow() -> NetworkConfig {
    NetworkConfig { channels: [2, 2, 4, 4, 4, 4], scales: 2, embed_dim: 4, ..NetworkConfig::desk() }
}

fn synth_sets(spec: &SynthSpec) -> Vec<SilhouetteSet> {
    let mut out = Vec::new();
    for id in 0..spec.identities {
        for cond in &spec.conditions {
            for &view in &spec.views {
                let frames = synth_sequence(spec, id, cond, 1, view).unwrap();
                let n = frames.len();
                let t = Tensor::new(vec![n, 1, 64, 44], frames.concat()).unwrap();
                let key = SequenceKey { identity: SynthSpec::identity_label(id), condition: cond.clone(), seq: 1, view };
                out.push(SilhouetteSet::new(key, t).unwrap());
            }
        }
    }
    out
}

fn tiny_run(seed: u64) -> RunConfig {
    RunConfig { network: narrow(), batch: BatchSpec::new(2, 2, 3).unwrap(), iterations: 6, seed, lr: 1e-2, ..RunConfig::default() }
}

#[test]
fn same_seed_same_weights() {
    let spec = SynthSpec { identities: 3, views: vec![0, 90], frames: 5, ..SynthSpec::default() };
    let data = synth_sets(&spec);
    let a = train_model(&tiny_run(7), &data, |_, _| Ok(())).unwrap();
    let b = train_model(&tiny_run(7), &data, |_, _| Ok(())).unwrap();
    let c = train_model(&tiny_run(8), &data, |_, _| Ok(())).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    assert_ne!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
    let fresh = GaitSet::<f32>::new(narrow(), 7).unwrap();
    assert_ne!(a.to_checkpoint().to_bytes(), fresh.to_checkpoint().to_bytes());
}

#[test]
fn every_step_is_reported() {
    let spec = SynthSpec { identities: 2, views: vec![0], frames: 4, ..SynthSpec::default() };
    let data = synth_sets(&spec);
    let mut seen = Vec::new();
    train_model(&tiny_run(1), &data, |r, _| {
        assert!(r.loss.is_finite() && (0.0..=1.0).contains(&r.nonzero_fraction));
        seen.push(r.iteration);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (1..=6).collect::<Vec<_>>());
}

#[test]
fn run_directory_is_complete() {
    let data = tempfile::tempdir().unwrap();
    let spec = SynthSpec { identities: 4, views: vec![0, 90], frames: 4, ..SynthSpec::default() };
    gaitset::dataio::synth_generate(&spec, data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        dataset: data.path().to_path_buf(),
        out: out.path().join("run"),
        checkpoint_every: 3,
        log_every: 1,
        network: NetworkConfig { sp_strategy: SpStrategy::Attention, ..narrow() },
        ..tiny_run(2)
    };
    run_training(&cfg).unwrap();
    let dir = out.path().join("run");
    assert!(dir.join(CHECKPOINT_FILE).exists());
    assert!(dir.join("model-0000003.gsck").exists());
    assert_eq!(std::fs::read_to_string(dir.join(LOG_FILE)).unwrap().lines().count(), 6);
    assert_eq!(read_run_config(&dir).unwrap(), cfg);
    let ck = gaitset::tensor::read_checkpoint::<f32>(&dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.meta_value("train.iterations"), Some("6"));
    assert_eq!(ck.meta_value("run.seed"), Some("2"));
}
