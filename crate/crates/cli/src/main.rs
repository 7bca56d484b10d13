//! `gaitset`: synthesize data, train, embed, evaluate, sweep, ablate and
//! verify gradients from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gaitset::dataio::{load_dataset, synth_generate, ProtocolSpec, SynthSpec, CASIA_TEMPLATE};
use gaitset::eval::{
    embed_gallery, embed_sequences, evaluate_dataset, multiview_mean, rank1, sweep_frames, sweep_multicondition,
    sweep_multiview, sweep_probes, DistanceMode, EmbeddingStore, EvalReport, SweepMode, SweepReport,
};
use gaitset::gradsuite::{full_graph_check, op_suite};
use gaitset::metric::BatchSpec;
use gaitset::network::{GaitSet, InputMode, NetworkConfig};
use gaitset::setpool::SpStrategy;
use gaitset::tensor::{read_checkpoint, Checkpoint};
use gaitset::train::{ablation_arms, run_training, RunConfig, CHECKPOINT_FILE};
use gaitset::{exec, Error, Result};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "gaitset", version, about = "Set-based gait recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural silhouette dataset.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint, run config and log under --out.
    Train(TrainArgs),
    /// Embed the gallery and probe subsets of a protocol into stores.
    Embed(EmbedArgs),
    /// Score probe stores against a gallery store.
    Eval(EvalArgs),
    /// Limited-frame, multi-view or multi-condition probe sweeps.
    Sweep(SweepArgs),
    /// Train and evaluate the nine ablation arms.
    Ablate(AblateArgs),
    /// Finite-difference verification of the gradient engine.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    /// Comma-separated view angles in degrees.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', default_value = "NM,BG,CL")]
    conditions: Vec<String>,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    sequences: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    jitter: i32,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = CASIA_TEMPLATE)]
    template: String,
    /// ST, MT, LT, OUMVLP or SYNTH.
    #[arg(long, default_value = "SYNTH")]
    protocol: String,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Start from a saved run.conf; other flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network widths: desk, casia or oumvlp.
    #[arg(long)]
    preset: Option<String>,
    /// Use the full-scale schedule and widths of the protocol.
    #[arg(long)]
    full_schedule: bool,
    #[arg(long)]
    strategy: Option<SpStrategy>,
    #[arg(long)]
    input: Option<InputMode>,
    #[arg(long)]
    no_mgp: bool,
    #[arg(long)]
    shared_hpm: bool,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// p,k,m: identities, sequences per identity, frames per sequence.
    #[arg(long, value_delimiter = ',')]
    batch: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint file, or a run directory holding one.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use the NM#2/BG#2/CL#2 gallery.
    #[arg(long)]
    multicondition_gallery: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `embed` (gallery.gsem plus probe-*.gsem).
    #[arg(long, conflicts_with_all = ["gallery", "probe"])]
    stores: Option<PathBuf>,
    #[arg(long, requires = "probe")]
    gallery: Option<PathBuf>,
    /// Probe store, optionally as NAME=PATH; repeatable.
    #[arg(long)]
    probe: Vec<String>,
    #[arg(long, default_value = "concat")]
    distance: DistanceMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// frames, multiview or multicondition.
    #[arg(long)]
    mode: SweepMode,
    /// Probe subset; the union of all subsets when omitted.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10,15,20,25,30")]
    budgets: Vec<usize>,
    /// Frames per view (multiview) or per condition (multicondition).
    #[arg(long, default_value_t = 10)]
    per_part: usize,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "concat")]
    distance: DistanceMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Print the arm names and exit.
    #[arg(long)]
    list: bool,
    /// Run only these arms.
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    #[arg(long, required_unless_present = "list")]
    data: Option<PathBuf>,
    #[arg(long, default_value = CASIA_TEMPLATE)]
    template: String,
    #[arg(long, default_value = "SYNTH")]
    protocol: String,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "concat")]
    distance: DistanceMode,
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the whole-network checks.
    #[arg(long)]
    ops_only: bool,
}

fn main() -> ExitCode {
    // Keep freed pages mapped: training reallocates the same large
    // activation buffers every iteration and refaulting them is costly.
    if std::env::var_os("MIMALLOC_PURGE_DELAY").is_none() {
        std::env::set_var("MIMALLOC_PURGE_DELAY", "-1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    log::debug!("{} worker threads", exec::init_threads());
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        identities: a.identities,
        conditions: a.conditions,
        frames: a.frames,
        sequences: a.sequences,
        seed: a.seed,
        noise: a.noise,
        jitter: a.jitter,
        ..SynthSpec::default()
    };
    if let Some(v) = a.views {
        spec.views = v;
    }
    let n = synth_generate(&spec, &a.out)?;
    println!("wrote {n} sequences to {}", a.out.display());
    Ok(())
}

fn run_config(data: Option<&DataArgs>, m: &ModelArgs, out: &Path) -> Result<RunConfig> {
    let mut cfg = match (&m.config, m.full_schedule) {
        (Some(p), _) => RunConfig::from_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        (None, true) => RunConfig::full_preset(&data.map_or("SYNTH".to_string(), |d| d.protocol.clone()))?,
        (None, false) => RunConfig::default(),
    };
    if let Some(d) = data {
        cfg.dataset = d.data.clone();
        cfg.template = d.template.clone();
        cfg.protocol = d.protocol.clone();
    }
    if let Some(p) = &m.preset {
        cfg.network = NetworkConfig::preset(p)?;
    }
    let n = &mut cfg.network;
    if let Some(s) = m.strategy {
        n.sp_strategy = s;
    }
    if let Some(i) = m.input {
        n.input_mode = i;
    }
    if m.no_mgp {
        n.mgp_enabled = false;
    }
    if m.shared_hpm {
        n.hpm_independent = false;
    }
    if let Some(s) = m.scales {
        n.scales = s;
    }
    if let Some(d) = m.embed_dim {
        n.embed_dim = d;
    }
    if let Some(b) = &m.batch {
        if b.len() != 3 {
            return Err(Error::Config(format!("--batch takes p,k,m; got {} values", b.len())));
        }
        cfg.batch = BatchSpec::new(b[0], b[1], b[2])?;
    }
    if let Some(s) = m.seed {
        cfg.seed = s;
    }
    if let Some(i) = m.iterations {
        cfg.iterations = i;
    }
    if let Some(lr) = m.lr {
        cfg.lr = lr;
    }
    if let Some(v) = m.margin {
        cfg.margin = v;
    }
    if let Some(v) = m.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = m.log_every {
        cfg.log_every = v;
    }
    cfg.out = out.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = run_config(Some(&a.data), &a.model, &a.out)?;
    run_training(&cfg)?;
    println!("checkpoint written to {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Model plus provenance lines (`key = value`) recovered from a checkpoint.
fn load_model(path: &Path) -> Result<(GaitSet<f32>, String, Option<u64>)> {
    let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let ck: Checkpoint<f32> = read_checkpoint(&path)?;
    let iterations = ck.meta_value("train.iterations").and_then(|v| v.parse().ok());
    let mut prov = format!("checkpoint = {}\n", path.display());
    for (k, v) in &ck.meta {
        if let Some(k) = k.strip_prefix("run.") {
            prov.push_str(&format!("{k} = {v}\n"));
        }
    }
    if let Some(it) = iterations {
        prov.push_str(&format!("iterations_done = {it}\n"));
    }
    Ok((GaitSet::from_checkpoint(ck, None)?, prov, iterations))
}

fn protocol(d: &DataArgs, multicondition: bool) -> Result<ProtocolSpec> {
    let p = ProtocolSpec::preset(&d.protocol)?;
    Ok(if multicondition { p.multicondition() } else { p })
}

fn embed(a: EmbedArgs) -> Result<()> {
    let (model, prov, _) = load_model(&a.checkpoint)?;
    let dataset = load_dataset(&a.data.data, &a.data.template, &protocol(&a.data, a.multicondition_gallery)?)?;
    let gallery = embed_gallery(&model, &dataset, &prov)?;
    gallery.write(&a.out.join("gallery.gsem"))?;
    println!("gallery: {} embeddings", gallery.entries.len());
    for (name, entries) in &dataset.split.probes {
        if entries.is_empty() {
            log::warn!("probe subset {name} is empty; skipped");
            continue;
        }
        let store = embed_sequences(&model, &dataset.index, entries, &prov)?;
        store.write(&a.out.join(format!("probe-{name}.gsem")))?;
        println!("probe {name}: {} embeddings", store.entries.len());
    }
    Ok(())
}

fn probe_stores(a: &EvalArgs) -> Result<(PathBuf, Vec<(String, PathBuf)>)> {
    if let Some(dir) = &a.stores {
        let mut probes = Vec::new();
        let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in rd {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(n) = name.strip_prefix("probe-").and_then(|n| n.strip_suffix(".gsem")) {
                probes.push((n.to_string(), p.clone()));
            }
        }
        probes.sort();
        if probes.is_empty() {
            return Err(Error::Data(format!("no probe-*.gsem stores in {}", dir.display())));
        }
        return Ok((dir.join("gallery.gsem"), probes));
    }
    let gallery = a.gallery.clone().ok_or_else(|| Error::Config("need --stores or --gallery with --probe".into()))?;
    let probes = a
        .probe
        .iter()
        .map(|s| match s.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(s);
                let n = p.file_stem().and_then(|n| n.to_str()).unwrap_or("probe");
                (n.strip_prefix("probe-").unwrap_or(n).to_string(), p)
            }
        })
        .collect();
    Ok((gallery, probes))
}

fn report_out(out: Option<&Path>, table: &str, kv: &str) -> Result<()> {
    println!("{table}");
    if let Some(dir) = out {
        write(&dir.join("results.txt"), table)?;
        write(&dir.join("results.kv"), kv)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (gpath, probes) = probe_stores(&a)?;
    let gallery = EmbeddingStore::read(&gpath)?;
    let mut subsets = Vec::new();
    for (name, path) in probes {
        let store = EmbeddingStore::read(&path)?;
        subsets.push((name, rank1(&store.entries, &gallery.entries, a.distance)?));
    }
    let report = EvalReport { provenance: gallery.provenance.clone(), subsets };
    report_out(a.out.as_deref(), &report.to_table(), &report.to_kv())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (model, prov, iterations) = load_model(&a.checkpoint)?;
    if iterations.unwrap_or(0) == 0 {
        log::warn!("checkpoint records no training iterations; sweeping an untrained model");
    }
    let mc = a.mode == SweepMode::MultiCondition;
    let dataset = load_dataset(&a.data.data, &a.data.template, &protocol(&a.data, mc)?)?;
    let gallery = embed_gallery(&model, &dataset, &prov)?;
    let probes = sweep_probes(&dataset, a.subset.as_deref())?;
    let rows = match a.mode {
        SweepMode::Frames => sweep_frames(&model, &gallery.entries, &probes, &a.budgets, a.seeds, a.seed, a.distance)?,
        SweepMode::MultiView => sweep_multiview(&model, &gallery.entries, &probes, a.per_part, a.seeds, a.seed, a.distance)?,
        SweepMode::MultiCondition => {
            sweep_multicondition(&model, &gallery.entries, &probes, &["NM", "BG", "CL"], a.per_part, a.seeds, a.seed, a.distance)?
        }
    };
    let report = SweepReport { mode: a.mode, provenance: prov, rows };
    let mut table = report.to_table();
    if a.mode == SweepMode::MultiView {
        if let Some(m) = multiview_mean(&report.rows) {
            table.push_str(&format!("two-view mean {m:.2}\n"));
        }
    }
    report_out(a.out.as_deref(), &table, &report.to_kv())
}

fn ablate(a: AblateArgs) -> Result<()> {
    if a.list {
        for (name, _) in ablation_arms(&run_config(None, &a.model, Path::new("."))?.network) {
            println!("{name}");
        }
        return Ok(());
    }
    let (Some(data), Some(out)) = (a.data.clone(), a.out.clone()) else {
        return Err(Error::Config("ablate needs --data and --out".into()));
    };
    let d = DataArgs { data, template: a.template.clone(), protocol: a.protocol.clone() };
    let base = run_config(Some(&d), &a.model, &out)?;
    let arms = ablation_arms(&base.network);
    if let Some(bad) = a.arms.iter().find(|n| !arms.iter().any(|(m, _)| m == *n)) {
        return Err(Error::Config(format!("unknown ablation arm {bad:?}")));
    }
    let dataset = load_dataset(&d.data, &d.template, &protocol(&d, false)?)?;
    let mut summary = String::from("arm                    ");
    let names: Vec<String> = dataset.split.probes.iter().map(|(n, _)| n.clone()).collect();
    for n in &names {
        summary.push_str(&format!(" {n:>6}"));
    }
    summary.push('\n');
    let mut kv = String::new();
    for (name, net) in arms.into_iter().filter(|(n, _)| a.arms.is_empty() || a.arms.contains(n)) {
        let cfg = RunConfig { network: net, out: out.join(&name), ..base.clone() };
        log::info!("arm {name}");
        let model = run_training(&cfg)?;
        let report = evaluate_dataset(&model, &dataset, a.distance, &cfg.to_kv())?;
        write(&cfg.out.join("results.txt"), &report.to_table())?;
        write(&cfg.out.join("results.kv"), &report.to_kv())?;
        summary.push_str(&format!("{name:<23}"));
        for n in &names {
            match report.subsets.iter().find(|(s, _)| s == n).and_then(|(_, r)| r.mean()) {
                Some(m) => {
                    summary.push_str(&format!(" {m:>6.1}"));
                    kv.push_str(&format!("arm.{name}.{n}.mean = {m:.4}\n"));
                }
                None => summary.push_str("      -"),
            }
        }
        summary.push('\n');
    }
    report_out(Some(&out), &summary, &kv)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut failed = 0;
    for c in op_suite(a.instances, a.seed)? {
        let ok = c.max_rel_error < 1e-4;
        failed += usize::from(!ok);
        println!("{} op {:<28} {:>3} instances  max rel error {:.2e}", if ok { "PASS" } else { "FAIL" }, c.name, c.instances, c.max_rel_error);
    }
    if !a.ops_only {
        for st in SpStrategy::ALL {
            let worst = full_graph_check(st, a.seed)?.into_iter().fold(0f64, |m, (_, e)| m.max(e));
            let ok = worst < 1e-3;
            failed += usize::from(!ok);
            println!("{} network/{:<20} max rel error {:.2e}", if ok { "PASS" } else { "FAIL" }, st.name(), worst);
        }
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}
