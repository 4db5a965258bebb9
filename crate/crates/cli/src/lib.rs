//! Command implementations behind the `floorgen` binary.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use floorgen_core::checkpoint::load_model;
use floorgen_core::dataset::synth::synth_corpus;
use floorgen_core::dataset::{load_corpus, split_corpus, write_manifest, SplitName};
use floorgen_core::metrics::{evaluate_dirs, write_png, RASTER_SIZE};
use floorgen_core::postprocess::PostConfig;
use floorgen_core::trainer::{RunConfig, Trainer};
use floorgen_core::{FloorPlan, Mode};
use floorgen_service::{GenerateRequest, RoomSpec, SampleParams, ServiceConfig};
use tracing::{info, warn};

#[derive(Debug, Parser)]
#[command(name = "floorgen", version, about = "Boundary-conditioned floor plan generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on a directory of interchange files.
    Train(TrainArgs),
    /// Sample plans from a checkpoint.
    Sample(SampleArgs),
    /// Compare predicted plans against ground truth.
    Evaluate(EvaluateArgs),
    /// Rasterize an interchange file to PNG.
    Render(RenderArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a synthetic fixture corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trainer checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train without the boundary condition.
    #[arg(long)]
    pub no_boundary: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "auto")]
    pub mode: Mode,
    /// Interchange file whose boundary and entrance condition the plans.
    #[arg(long)]
    pub boundary: Option<PathBuf>,
    /// JSON list of rooms, or an interchange file whose rooms are used.
    #[arg(long)]
    pub rooms: Option<PathBuf>,
    /// Room indices to pin in mode part, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Option<Vec<usize>>,
    #[arg(short = 'k', long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a PNG raster per plan.
    #[arg(long)]
    pub render: bool,
    #[arg(long)]
    pub noise_inject: bool,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Align boxes after sampling.
    #[arg(long)]
    pub align: bool,
    /// Align, then merge same-type neighbours.
    #[arg(long)]
    pub merge: bool,
    #[arg(long, default_value = "sample")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Adjacency gap tolerance in pixels.
    #[arg(long, default_value_t = PostConfig::default().tau)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = RASTER_SIZE)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Session log; sessions live in memory only when absent.
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Errors the user can fix by changing the invocation or inputs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UserError(pub String);

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// Exit code for an error: 1 for bad input, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let missing_input = e
        .chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound));
    if missing_input {
        return 1;
    }
    for cause in e.chain() {
        if cause.is::<UserError>() || cause.is::<clap::Error>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<floorgen_core::Error>() {
            return if core.is_user_error() { 1 } else { 2 };
        }
        if let Some(api) = cause.downcast_ref::<floorgen_service::ApiError>() {
            return if api.status.is_client_error() { 1 } else { 2 };
        }
    }
    2
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Render(a) => render(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if a.no_boundary {
        config.boundary_enabled = false;
    }
    if a.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let (Some(data), Some(out)) = (&a.data, &a.out) else {
        return Err(user("train needs --data and --out"));
    };
    let corpus = load_corpus(data)?;
    if corpus.records.is_empty() {
        return Err(user(format!("no plans in {}", data.display())));
    }
    let split = split_corpus(corpus.records.len(), config.seed);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ids: Vec<String> = corpus.records.iter().map(|r| r.id.clone()).collect();
    write_manifest(&out.join("split.tsv"), &split, &ids)?;
    let pick = |name| -> Vec<FloorPlan> { split.get(name).iter().map(|&i| corpus.records[i].plan.clone()).collect() };
    let (train, val) = (pick(SplitName::Train), pick(SplitName::Val));
    info!(train = train.len(), val = val.len(), skipped = corpus.skipped.len(), "corpus loaded");
    std::fs::write(out.join("config.toml"), config.to_toml()).with_context(|| format!("writing {}", out.display()))?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let t = Trainer::resume(config, ckpt, &train, &val)?;
            info!(step = t.step, "resuming");
            t
        }
        None => Trainer::new(config, &train, &val)?,
    }
    .with_output(out)?;
    let path = trainer.fit()?;
    info!(path = %path.display(), "training finished");
    Ok(())
}

fn read_json(path: &Path) -> anyhow::Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn read_rooms(path: &Path) -> anyhow::Result<Vec<RoomSpec>> {
    let mut value = read_json(path)?;
    if let Some(rooms) = value.get_mut("rooms") {
        value = rooms.take();
    }
    serde_json::from_value(value).map_err(|e| user(format!("{}: {e}", path.display())))
}

/// Writes `<prefix>.<i>.json` (and `.png`) per plan.
pub fn write_plans(dir: &Path, prefix: &str, plans: &[FloorPlan], render: bool) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let path = dir.join(format!("{prefix}.{i}.json"));
        plan.write(&path)?;
        written.push(path);
        if render {
            let png = dir.join(format!("{prefix}.{i}.png"));
            write_png(&png, plan, RASTER_SIZE)?;
            written.push(png);
        }
    }
    Ok(written)
}

fn sample(a: SampleArgs) -> anyhow::Result<()> {
    let (boundary, entrance) = match &a.boundary {
        Some(p) => {
            let plan = FloorPlan::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .map_err(|e| user(format!("{}: {e}", p.display())))?;
            (plan.boundary, plan.entrance)
        }
        None => (None, None),
    };
    let rooms = a.rooms.as_deref().map(read_rooms).transpose()?;
    let params = SampleParams {
        k: a.k,
        noise_inject: a.noise_inject,
        alpha: a.alpha,
        seed: Some(a.seed),
        merge: a.merge,
    };
    let req = GenerateRequest {
        session_id: None,
        boundary,
        entrance,
        mode: a.mode,
        rooms,
        fixed_rooms: a.fixed.clone(),
        params,
    };
    let constraints = req.constraints()?;
    let model = load_model(&a.ckpt, None)?;
    if model.meta.boundary_enabled && constraints.boundary.is_none() {
        warn!("checkpoint was trained with boundaries but none was given");
    }
    let post = PostConfig::default();
    let post = (a.align || a.merge).then_some(&post);
    let (plans, seeds, _) = floorgen_service::sample(&model, &constraints, a.mode, &params, post)?;
    let written = write_plans(&a.out, &a.prefix, &plans, a.render)?;
    for (i, seed) in seeds.iter().enumerate() {
        info!(variant = i, seed, "sampled");
    }
    info!(files = written.len(), out = %a.out.display(), "done");
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let report = evaluate_dirs(&a.pred, &a.gt, a.tau)?;
    for id in &report.unmatched {
        warn!(id = %id, "no counterpart, skipped");
    }
    if report.rows.is_empty() {
        warn!("no matching plans; the report is empty");
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(&a.out, report.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    if !report.rows.is_empty() {
        let ratio = report.mean_pred().ratio_to(&report.mean_gt());
        info!(rows = report.rows.len(), mean_ged = report.mean_ged(), ratios = ?ratio.values(), "evaluated");
    }
    Ok(())
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    if a.size == 0 {
        bail!(UserError("size must be positive".into()));
    }
    let plan = FloorPlan::read(&a.plan)?;
    write_png(&a.out, &plan, a.size)?;
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut config = ServiceConfig::default();
    if let Some(w) = a.workers {
        if w == 0 {
            return Err(user("workers must be positive"));
        }
        config.workers = w;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(floorgen_service::serve(a.addr, a.ckpt, a.sessions, config))?;
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, plan) in synth_corpus(a.n, a.seed).iter().enumerate() {
        plan.write(&a.out.join(format!("plan_{i:05}.json")))?;
    }
    info!(n = a.n, out = %a.out.display(), "corpus written");
    Ok(())
}
