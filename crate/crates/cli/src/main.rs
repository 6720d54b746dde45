//! Command-line pipeline: corpus generation, training, sampling,
//! strength sweeps, zero-shot transfer, and evaluation.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage, 3 unsafe overwrite,
//! 4 protocol violation. Every command writes a run manifest into its
//! output directory before exiting, on success and failure alike.

mod config;
mod evalcmd;
mod manifest;
mod sampling;

use clap::{Args, Parser, Subcommand};
use defectgen_core::checkpoint;
use defectgen_core::conditioning::{GOOD_LABEL, NULL_TOKEN};
use defectgen_core::data::{build_corpus, load_dataset, save_image};
use defectgen_core::eval::DownstreamConfig;
use defectgen_core::train::format_log_line;
use defectgen_core::{CorpusSpec, Error, TrainConfig, TrainableSystem};
use manifest::RunManifest;
use serde_json::json;
use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Command failure carrying its exit code class.
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Overwrite(String),
    Protocol(String),
    Internal(Error),
}

impl CmdError {
    fn code(&self) -> u8 {
        match self {
            CmdError::Internal(_) => 1,
            CmdError::Usage(_) => 2,
            CmdError::Overwrite(_) => 3,
            CmdError::Protocol(_) => 4,
        }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Usage(m) | CmdError::Overwrite(m) | CmdError::Protocol(m) => f.write_str(m),
            CmdError::Internal(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::UnknownLabel(_)
            | Error::UnknownToken(_)
            | Error::Dataset { .. }
            | Error::CheckpointFormat(_)
            | Error::EmptyInput(_) => CmdError::Usage(e.to_string()),
            other => CmdError::Internal(other),
        }
    }
}

#[derive(Parser)]
#[command(name = "defectgen", version = manifest::VERSION, about = "Defect image generation pipeline")]
struct Cli {
    /// Worker-thread bound for parallel sampling and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural multi-product defect corpus.
    GenData(GenDataArgs),
    /// Train the conditioned diffusion model on a corpus.
    Train(TrainArgs),
    /// Sample image and mask pairs from a checkpoint.
    Sample(SampleArgs),
    /// Render a defect-strength sweep grid across seeds.
    Sweep(SweepArgs),
    /// Apply a defect to a product it was never trained with.
    ZeroShot(ZeroShotArgs),
    /// Compare real and generated sets and write a metrics report.
    Eval(EvalArgs),
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData(_) => "gen-data",
            Cmd::Train(_) => "train",
            Cmd::Sample(_) => "sample",
            Cmd::Sweep(_) => "sweep",
            Cmd::ZeroShot(_) => "zero-shot",
            Cmd::Eval(_) => "eval",
        }
    }

    /// Directory the run manifest lands in.
    fn manifest_dir(&self) -> PathBuf {
        match self {
            Cmd::GenData(a) => a.out.clone(),
            Cmd::Train(a) => a.out.clone(),
            Cmd::Sample(a) => a.out.clone(),
            Cmd::Sweep(a) => a.out.clone(),
            Cmd::ZeroShot(a) => a.out.clone(),
            Cmd::Eval(a) => a
                .out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Corpus spec as a key=value file; omitted keys use desk defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Corpus output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Override the spec's corpus seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config as a key=value file; omitted keys use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.bin and loss.log.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training step count.
    #[arg(long)]
    steps: Option<u64>,
    /// Ablation switch: no_fusion or fused_prompt_only (repeatable).
    #[arg(long = "ablate", value_name = "FLAG")]
    ablate: Vec<String>,
    /// Constant defect-loss weight replacing the adaptive ratio.
    #[arg(long)]
    fixed_r: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint produced by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Product condition label.
    #[arg(long)]
    product: String,
    /// Defect condition label.
    #[arg(long)]
    defect: String,
    /// Background guidance strength.
    #[arg(long, default_value_t = 1.0)]
    wp: f64,
    /// Defect guidance strength.
    #[arg(long, default_value_t = 1.0)]
    wd: f64,
    /// Number of image and mask pairs to draw.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Base seed; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps for the respaced sampler.
    #[arg(long, default_value_t = 50)]
    sample_steps: usize,
    /// Output directory for the sample files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Checkpoint produced by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Product condition label.
    #[arg(long)]
    product: String,
    /// Defect condition label.
    #[arg(long)]
    defect: String,
    /// Comma-separated defect strengths, one grid column each.
    #[arg(long)]
    wd_list: String,
    /// Background guidance strength.
    #[arg(long, default_value_t = 1.0)]
    wp: f64,
    /// Number of seed rows in the grid.
    #[arg(long, default_value_t = 4)]
    seeds: usize,
    /// Base seed; row r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps for the respaced sampler.
    #[arg(long, default_value_t = 50)]
    sample_steps: usize,
    /// Output directory for the grid, cells, and summary table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ZeroShotArgs {
    /// Checkpoint produced by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target product the defect was never trained with.
    #[arg(long)]
    product: String,
    /// Source defect learned on other products.
    #[arg(long)]
    defect: String,
    /// Number of image and mask pairs to draw.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Background guidance strength.
    #[arg(long, default_value_t = 1.0)]
    wp: f64,
    /// Defect guidance strength.
    #[arg(long, default_value_t = 1.0)]
    wd: f64,
    /// Base seed; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps for the respaced sampler.
    #[arg(long, default_value_t = 50)]
    sample_steps: usize,
    /// Sample even though the combination appeared in training.
    #[arg(long)]
    allow_seen: bool,
    /// Output directory for the sample files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Real corpus root.
    #[arg(long)]
    real: PathBuf,
    /// Generated set: corpus-layout tree or flat sample files.
    #[arg(long)]
    generated: PathBuf,
    /// Metrics JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// Seed of the frozen feature extractor.
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    /// Downstream harness seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Segmenter training steps per downstream run.
    #[arg(long, default_value_t = 2000)]
    downstream_steps: usize,
    /// Segmenter batch size per downstream run.
    #[arg(long, default_value_t = 4)]
    downstream_batch: usize,
    /// Generated samples kept per product, as a multiple of real count.
    #[arg(long, default_value_t = 2.0)]
    augment_ratio: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let started = Instant::now();
    let mut man = RunManifest::new(cli.command.name());
    let dir = cli.command.manifest_dir();
    let result = std::panic::catch_unwind(AssertUnwindSafe(|| run(&cli.command, &mut man)))
        .unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            Err(CmdError::Internal(Error::Degenerate(msg)))
        });
    man.wall_time_secs = started.elapsed().as_secs_f64();
    match &result {
        Ok(()) => man.status = "ok".to_string(),
        Err(e) => {
            man.status = "error".to_string();
            man.error = Some(e.to_string());
        }
    }
    man.write(&dir);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: &Cmd, man: &mut RunManifest) -> Result<(), CmdError> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a, man),
        Cmd::Train(a) => cmd_train(a, man),
        Cmd::Sample(a) => cmd_sample(a, man),
        Cmd::Sweep(a) => cmd_sweep(a, man),
        Cmd::ZeroShot(a) => cmd_zero_shot(a, man),
        Cmd::Eval(a) => cmd_eval(a, man),
    }
}

/// True when the directory holds anything besides an old run manifest.
fn dir_has_payload(dir: &Path) -> Result<bool, CmdError> {
    if !dir.exists() {
        return Ok(false);
    }
    for entry in std::fs::read_dir(dir).map_err(Error::from)? {
        let entry = entry.map_err(Error::from)?;
        if entry.file_name() != manifest::MANIFEST_FILE {
            return Ok(true);
        }
    }
    Ok(false)
}

fn cmd_gen_data(a: &GenDataArgs, man: &mut RunManifest) -> Result<(), CmdError> {
    let mut spec = match &a.spec {
        Some(path) => config::corpus_spec(path)?,
        None => CorpusSpec::default_desk(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    man.seed = spec.seed;
    man.config = serde_json::to_value(&spec).map_err(Error::from)?;
    if !a.force && dir_has_payload(&a.out)? {
        return Err(CmdError::Overwrite(format!(
            "output directory {} is not empty; pass --force to write into it",
            a.out.display()
        )));
    }
    let entries = build_corpus(&spec, &a.out)?;
    man.record_output(&a.out);
    man.record_output(&a.out.join("manifest.tsv"));
    println!(
        "wrote {} image/mask pairs under {}",
        entries.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, man: &mut RunManifest) -> Result<(), CmdError> {
    let mut cfg = match &a.config {
        Some(path) => config::train_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    for flag in &a.ablate {
        match flag.as_str() {
            "no_fusion" => cfg.no_fusion = true,
            "fused_prompt_only" => cfg.fused_prompt_only = true,
            other => {
                return Err(CmdError::Usage(format!(
                    "unknown ablation {other:?}; expected no_fusion or fused_prompt_only"
                )))
            }
        }
    }
    if let Some(r) = a.fixed_r {
        cfg.fixed_r = Some(r);
    }
    cfg.validate()?;
    man.seed = cfg.seed;
    man.config = serde_json::to_value(&cfg).map_err(Error::from)?;
    if !a.data.is_dir() {
        return Err(CmdError::Usage(format!(
            "data root {} is not a directory",
            a.data.display()
        )));
    }
    let data = load_dataset(&a.data)?;
    let mut sys = TrainableSystem::from_dataset(cfg.clone(), &data)?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let log_path = a.out.join("loss.log");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(Error::from)?);
    let every = (cfg.steps / 10).max(1);
    sys.fit(&data, |step, lb| {
        log.write_all(format_log_line(step, lb).as_bytes())?;
        if step % every == 0 || step == cfg.steps {
            println!(
                "step {step}/{}: total {:.4e} recon {:.4e} R {:.2}",
                cfg.steps, lb.total, lb.recon, lb.ratio_r
            );
        }
        Ok(())
    })?;
    log.into_inner()
        .map_err(|e| Error::from(e.into_error()))?
        .flush()
        .map_err(Error::from)?;
    let ckpt_path = a.out.join("checkpoint.bin");
    checkpoint::save(&sys, &ckpt_path)?;
    man.record_output(&ckpt_path);
    man.record_output(&log_path);
    println!(
        "trained {} steps over {} parameters; checkpoint at {}",
        sys.step(),
        sys.parameter_count(),
        ckpt_path.display()
    );
    Ok(())
}

/// One batch of same-strength samples, seeds base..base+count.
struct Generation<'a> {
    product: &'a str,
    defect: &'a str,
    w_p: f64,
    w_d: f64,
    steps: usize,
    base_seed: u64,
    count: usize,
}

fn run_generation(
    sys: &TrainableSystem,
    gen: &Generation,
    out_dir: &Path,
    man: &mut RunManifest,
) -> Result<usize, CmdError> {
    if gen.count == 0 {
        return Err(CmdError::Usage("--count must be at least 1".to_string()));
    }
    let plan: Vec<(f64, u64)> = (0..gen.count)
        .map(|i| (gen.w_d, gen.base_seed.wrapping_add(i as u64)))
        .collect();
    let cells = sampling::sample_cells(sys, gen.product, gen.defect, gen.w_p, gen.steps, &plan)?;
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    let mut nonzero = 0;
    for cell in &cells {
        if cell.mask_fraction() > 0.0 {
            nonzero += 1;
        }
        sampling::write_cell(out_dir, gen.product, gen.defect, cell, man)?;
    }
    Ok(nonzero)
}

fn cmd_sample(a: &SampleArgs, man: &mut RunManifest) -> Result<(), CmdError> {
    man.seed = a.seed;
    man.config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "product": a.product,
        "defect": a.defect,
        "wp": a.wp,
        "wd": a.wd,
        "count": a.count,
        "sample_steps": a.sample_steps,
    });
    let sys = checkpoint::load(&a.checkpoint)?;
    sampling::check_label(&sys, &a.product, "product")?;
    sampling::check_label(&sys, &a.defect, "defect")?;
    let gen = Generation {
        product: &a.product,
        defect: &a.defect,
        w_p: a.wp,
        w_d: a.wd,
        steps: a.sample_steps,
        base_seed: a.seed,
        count: a.count,
    };
    let nonzero = run_generation(&sys, &gen, &a.out, man)?;
    println!(
        "wrote {} samples to {} ({nonzero} with nonzero masks)",
        a.count,
        a.out.display()
    );
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, man: &mut RunManifest) -> Result<(), CmdError> {
    let wds: Vec<f64> = a
        .wd_list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CmdError::Usage(format!("--wd-list entry {s:?} is not a number")))
        })
        .collect::<Result<_, _>>()?;
    if wds.is_empty() {
        return Err(CmdError::Usage(
            "--wd-list must name at least one strength".to_string(),
        ));
    }
    if a.seeds == 0 {
        return Err(CmdError::Usage("--seeds must be at least 1".to_string()));
    }
    man.seed = a.seed;
    man.config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "product": a.product,
        "defect": a.defect,
        "wd_list": wds,
        "wp": a.wp,
        "seeds": a.seeds,
        "sample_steps": a.sample_steps,
    });
    let sys = checkpoint::load(&a.checkpoint)?;
    sampling::check_label(&sys, &a.product, "product")?;
    sampling::check_label(&sys, &a.defect, "defect")?;
    let plan: Vec<(f64, u64)> = (0..a.seeds)
        .flat_map(|r| {
            let row_seed = a.seed.wrapping_add(r as u64);
            wds.iter().map(move |&wd| (wd, row_seed))
        })
        .collect();
    let cells = sampling::sample_cells(&sys, &a.product, &a.defect, a.wp, a.sample_steps, &plan)?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    for cell in &cells {
        sampling::write_cell(&a.out, &a.product, &a.defect, cell, man)?;
    }
    let grid = sampling::grid_image(&cells, a.seeds, wds.len());
    let grid_path = a.out.join(format!("grid_{}_{}.png", a.product, a.defect));
    save_image(&grid_path, &grid)?;
    man.record_output(&grid_path);
    let tsv_path = a.out.join("sweep_summary.tsv");
    let mut tsv = String::from("wd\tseed\tmask_fraction\n");
    for cell in &cells {
        tsv.push_str(&format!(
            "{}\t{}\t{:.6}\n",
            sampling::fmt_weight(cell.w_d),
            cell.seed,
            cell.mask_fraction()
        ));
    }
    std::fs::write(&tsv_path, tsv).map_err(Error::from)?;
    man.record_output(&tsv_path);
    for (j, &wd) in wds.iter().enumerate() {
        let mean: f64 = cells
            .iter()
            .skip(j)
            .step_by(wds.len())
            .map(sampling::Cell::mask_fraction)
            .sum::<f64>()
            / a.seeds as f64;
        println!("wd {}: mean mask fraction {mean:.4}", sampling::fmt_weight(wd));
    }
    println!("grid at {}", grid_path.display());
    Ok(())
}

fn cmd_zero_shot(a: &ZeroShotArgs, man: &mut RunManifest) -> Result<(), CmdError> {
    man.seed = a.seed;
    man.config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "product": a.product,
        "defect": a.defect,
        "wp": a.wp,
        "wd": a.wd,
        "count": a.count,
        "sample_steps": a.sample_steps,
        "allow_seen": a.allow_seen,
    });
    if a.defect == GOOD_LABEL || a.defect == NULL_TOKEN {
        return Err(CmdError::Usage(format!(
            "{:?} is not a transferable source defect",
            a.defect
        )));
    }
    let sys = checkpoint::load(&a.checkpoint)?;
    sampling::check_label(&sys, &a.product, "product")?;
    sampling::check_label(&sys, &a.defect, "defect")?;
    let combo = (a.product.clone(), a.defect.clone());
    if sys.trained_combos().contains(&combo) && !a.allow_seen {
        return Err(CmdError::Protocol(format!(
            "combination ({}, {}) appeared in training; pass --allow-seen to sample it anyway",
            a.product, a.defect
        )));
    }
    let gen = Generation {
        product: &a.product,
        defect: &a.defect,
        w_p: a.wp,
        w_d: a.wd,
        steps: a.sample_steps,
        base_seed: a.seed,
        count: a.count,
    };
    let nonzero = run_generation(&sys, &gen, &a.out, man)?;
    println!(
        "wrote {} transferred samples to {} ({nonzero} with nonzero masks)",
        a.count,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, man: &mut RunManifest) -> Result<(), CmdError> {
    man.seed = a.seed;
    man.config = json!({
        "real": a.real.display().to_string(),
        "generated": a.generated.display().to_string(),
        "extractor_seed": a.extractor_seed,
        "downstream_steps": a.downstream_steps,
        "downstream_batch": a.downstream_batch,
        "augment_ratio": a.augment_ratio,
    });
    let real = load_dataset(&a.real)?;
    let generated = evalcmd::load_generated(&a.generated)?;
    let opts = evalcmd::EvalOptions {
        extractor_seed: a.extractor_seed,
        downstream: DownstreamConfig {
            steps: a.downstream_steps,
            batch: a.downstream_batch,
            seed: a.seed,
            augment_ratio: a.augment_ratio,
            ..DownstreamConfig::default()
        },
    };
    let report = evalcmd::metrics_report(&real, &generated, &opts)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    let body = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    std::fs::write(&a.out, body).map_err(Error::from)?;
    man.record_output(&a.out);
    if let Some(doc) = report.as_object() {
        for (cat, entry) in doc.iter().filter(|(k, _)| *k != "schema") {
            let fid = entry["fid_proxy"].as_f64().unwrap_or(f64::NAN);
            let div = entry["diversity_proxy"].as_f64().unwrap_or(f64::NAN);
            match entry.get("augmented") {
                Some(aug) => println!(
                    "{cat}: fid_proxy {fid:.4} diversity_proxy {div:.4} miou {:.3} -> {:.3}",
                    entry["baseline"]["miou"].as_f64().unwrap_or(f64::NAN),
                    aug["miou"].as_f64().unwrap_or(f64::NAN),
                ),
                None => println!(
                    "{cat}: fid_proxy {fid:.4} diversity_proxy {div:.4} (downstream omitted)"
                ),
            }
        }
    }
    println!("metrics at {}", a.out.display());
    Ok(())
}
