//! Run configuration and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{load_dataset, ProtocolSpec, SilhouetteSet, CASIA_TEMPLATE};
use crate::error::{Error, Result};
use crate::metric::{sample_batch_with, train_step, Adam, BatchSpec, DEFAULT_MARGIN};
use crate::network::{parse_kv, GaitSet, NetworkConfig};
use crate::tensor::{write_checkpoint, Checkpoint};

pub const CHECKPOINT_FILE: &str = "model.gsck";
pub const CONFIG_FILE: &str = "run.conf";
pub const LOG_FILE: &str = "train.log";

/// Everything needed to reproduce a training run. Serialized into every
/// artifact the run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub template: String,
    pub protocol: String,
    pub network: NetworkConfig,
    pub batch: BatchSpec,
    pub seed: u64,
    pub iterations: u64,
    pub lr: f64,
    /// Switch to a second rate at the given iteration.
    pub lr_drop: Option<(u64, f64)>,
    pub margin: f64,
    pub out: PathBuf,
    /// Write an intermediate checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            template: CASIA_TEMPLATE.to_string(),
            protocol: "SYNTH".into(),
            network: NetworkConfig::desk(),
            batch: BatchSpec { p: 4, k: 4, m: 15 },
            seed: 0,
            iterations: 2000,
            lr: 1e-3,
            lr_drop: None,
            margin: DEFAULT_MARGIN,
            out: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

/// Iteration budgets of the full-scale schedules, for reference.
pub const FULL_ITERATIONS: [(&str, u64); 4] = [("ST", 50_000), ("MT", 60_000), ("LT", 80_000), ("OUMVLP", 250_000)];

impl RunConfig {
    /// Full-scale settings for a named protocol: CASIA or OU-MVLP widths,
    /// p=8, k=16, m=30, rate 1e-4 (dropping to 1e-5 at 150K for OU-MVLP).
    pub fn full_preset(protocol: &str) -> Result<Self> {
        let spec = ProtocolSpec::preset(protocol)?;
        let iterations = FULL_ITERATIONS
            .iter()
            .find(|(n, _)| *n == spec.name)
            .map(|(_, it)| *it)
            .ok_or_else(|| Error::Config(format!("no full-scale schedule for {}", spec.name)))?;
        let oumvlp = spec.name == "OUMVLP";
        Ok(Self {
            protocol: spec.name,
            network: if oumvlp { NetworkConfig::oumvlp() } else { NetworkConfig::casia() },
            batch: BatchSpec::default(),
            iterations,
            lr: 1e-4,
            lr_drop: oumvlp.then_some((150_000, 1e-5)),
            ..Self::default()
        })
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_drop {
            Some((at, lr)) if iteration >= at => lr,
            _ => self.lr,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        let _ = writeln!(s, "template = {}", self.template);
        let _ = writeln!(s, "protocol = {}", self.protocol);
        let _ = writeln!(s, "batch = {},{},{}", self.batch.p, self.batch.k, self.batch.m);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "lr = {:e}", self.lr);
        if let Some((at, lr)) = self.lr_drop {
            let _ = writeln!(s, "lr_drop = {at}:{lr:e}");
        }
        let _ = writeln!(s, "margin = {}", self.margin);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        for line in self.network.to_kv().lines() {
            let _ = writeln!(s, "network.{line}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut cfg = Self::default();
        let net: std::collections::BTreeMap<String, String> =
            map.iter().filter_map(|(k, v)| k.strip_prefix("network.").map(|k| (k.to_string(), v.clone()))).collect();
        cfg.network = NetworkConfig::from_map(&net)?;
        for (k, v) in &map {
            let bad = || Error::Config(format!("bad value {v:?} for {k}"));
            match k.as_str() {
                "dataset" => cfg.dataset = PathBuf::from(v),
                "template" => cfg.template = v.clone(),
                "protocol" => cfg.protocol = v.clone(),
                "batch" => {
                    let p: Vec<usize> = v.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    if p.len() != 3 {
                        return Err(bad());
                    }
                    cfg.batch = BatchSpec::new(p[0], p[1], p[2])?;
                }
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "iterations" => cfg.iterations = v.parse().map_err(|_| bad())?,
                "lr" => cfg.lr = v.parse().map_err(|_| bad())?,
                "lr_drop" => {
                    let (at, lr) = v.split_once(':').ok_or_else(bad)?;
                    cfg.lr_drop = Some((at.trim().parse().map_err(|_| bad())?, lr.trim().parse().map_err(|_| bad())?));
                }
                "margin" => cfg.margin = v.parse().map_err(|_| bad())?,
                "out" => cfg.out = PathBuf::from(v),
                "checkpoint_every" => cfg.checkpoint_every = v.parse().map_err(|_| bad())?,
                "log_every" => cfg.log_every = v.parse().map_err(|_| bad())?,
                k if k.starts_with("network.") => {}
                _ => return Err(Error::Config(format!("unknown run setting {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        BatchSpec::new(self.batch.p, self.batch.k, self.batch.m)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        Ok(())
    }
}

/// The nine arms of the ablation grid: GEI input; set input with max
/// pooling and shared or independent HPM; each other pooling strategy with
/// independent HPM; and the full model with MGP. Every arm keeps the
/// widths, scales and embedding size of `base`.
pub fn ablation_arms(base: &NetworkConfig) -> Vec<(String, NetworkConfig)> {
    use crate::network::InputMode;
    use crate::setpool::SpStrategy;
    let plain = NetworkConfig { mgp_enabled: false, hpm_independent: true, input_mode: InputMode::Set, sp_strategy: SpStrategy::Max, ..base.clone() };
    let mut arms = vec![
        ("gei_shared".to_string(), NetworkConfig { input_mode: InputMode::Gei, hpm_independent: false, ..plain.clone() }),
        ("max_shared".to_string(), NetworkConfig { hpm_independent: false, ..plain.clone() }),
    ];
    for st in SpStrategy::ALL {
        arms.push((format!("{}_independent", st.name()), NetworkConfig { sp_strategy: st, ..plain.clone() }));
    }
    arms.push(("max_independent_mgp".to_string(), NetworkConfig { mgp_enabled: true, ..plain }));
    arms
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: u64,
    pub loss: f64,
    pub nonzero_fraction: f64,
    pub wall_seconds: f64,
}

impl TrainRecord {
    pub fn to_line(&self) -> String {
        format!(
            "iter={} loss={:.6} nonzero={:.4} wall={:.1}",
            self.iteration, self.loss, self.nonzero_fraction, self.wall_seconds
        )
    }
}

/// Attach provenance to a checkpoint.
pub fn annotate(ckpt: &mut Checkpoint<f32>, cfg: &RunConfig, iterations_done: u64) {
    ckpt.meta.push(("train.iterations".into(), iterations_done.to_string()));
    for (k, v) in parse_kv(&cfg.to_kv()).expect("own output parses") {
        ckpt.meta.push((format!("run.{k}"), v));
    }
}

/// Train on already-loaded sequences. `on_step` sees every iteration's
/// record and the model after the update; returning an error stops the run.
pub fn train_model(
    cfg: &RunConfig,
    data: &[SilhouetteSet],
    mut on_step: impl FnMut(&TrainRecord, &GaitSet<f32>) -> Result<()>,
) -> Result<GaitSet<f32>> {
    cfg.validate()?;
    let mut model = GaitSet::<f32>::new(cfg.network.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c_4e5a_11d0_0000);
    let mut opt = Adam::new(cfg.lr);
    let start = Instant::now();
    for it in 1..=cfg.iterations {
        opt.lr = cfg.lr_at(it);
        let batch = sample_batch_with(data, cfg.batch, &mut rng)?;
        let report = train_step(&mut model, &batch, &mut opt, cfg.margin)?;
        let rec = TrainRecord {
            iteration: it,
            loss: report.total,
            nonzero_fraction: report.nonzero_fraction,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&rec, &model)?;
    }
    Ok(model)
}

/// Load the training split, train, and write checkpoint, config and log
/// under `cfg.out`.
pub fn run_training(cfg: &RunConfig) -> Result<GaitSet<f32>> {
    cfg.validate()?;
    let protocol = ProtocolSpec::preset(&cfg.protocol)?;
    let dataset = load_dataset(&cfg.dataset, &cfg.template, &protocol)?;
    let data = dataset.load_train()?;
    log::info!("training on {} sequences of {} identities", data.len(), dataset.split.train_ids.len());
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let conf_path = cfg.out.join(CONFIG_FILE);
    fs::write(&conf_path, cfg.to_kv()).map_err(|e| Error::io(&conf_path, e))?;
    let log_path = cfg.out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let model = train_model(cfg, &data, |rec, model| {
        if cfg.log_every > 0 && (rec.iteration % cfg.log_every == 0 || rec.iteration == cfg.iterations) {
            writeln!(log, "{}", rec.to_line()).map_err(|e| Error::io(&log_path, e))?;
            log::info!("{}", rec.to_line());
        }
        if cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every == 0 && rec.iteration < cfg.iterations {
            let mut ck = model.to_checkpoint();
            annotate(&mut ck, cfg, rec.iteration);
            write_checkpoint(&cfg.out.join(format!("model-{:07}.gsck", rec.iteration)), &ck)?;
        }
        Ok(())
    })?;
    let mut ck = model.to_checkpoint();
    annotate(&mut ck, cfg, cfg.iterations);
    write_checkpoint(&cfg.out.join(CHECKPOINT_FILE), &ck)?;
    Ok(model)
}

/// Read `run.conf` from a run directory.
pub fn read_run_config(dir: &Path) -> Result<RunConfig> {
    let p = dir.join(CONFIG_FILE);
    RunConfig::from_kv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
}
