use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lens_core::afp::DecodeParams;
use lens_core::config::PipelineConfig;
use lens_core::pipeline::{self, files};
use lens_core::Error;

/// Universal lesion detection pipeline on synthetic cohorts.
///
/// Stages read and write record streams in --out-dir; running them in order
/// reproduces `pipeline-run`.
#[derive(Parser)]
#[command(name = "lens", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory holding inputs and outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    theta_fp: Option<f64>,
    #[arg(long, global = true)]
    nms_iou: Option<f64>,
    #[arg(long, global = true)]
    iobb: Option<f64>,
    /// Count duplicate detections as FPs in FROC.
    #[arg(long, global = true)]
    strict_froc: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort, truth and visible labels.
    SynthGen,
    /// Run the oracle experts over the cohort.
    Simulate {
        /// Retrain the universal expert on the assembled training set first.
        #[arg(long)]
        refined: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode dense centerness and regression tensors into 2D proposals.
    Decode {
        #[arg(long)]
        centerness: PathBuf,
        #[arg(long)]
        regression: PathBuf,
        #[arg(long)]
        volume_id: String,
        #[arg(long, default_value_t = 4.0)]
        stride: f64,
        #[arg(long, default_value_t = 0)]
        slice: i64,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value = "afp")]
        expert_id: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pool experts and apply per-slice NMS.
    Fuse {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Link fused boxes into tracklets and stack them into 3D proposals.
    Stack3d {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Label mining.
    Mine {
        #[command(subcommand)]
        step: MineStep,
    },
    /// Build the training slice set.
    Assemble {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Select FPR training samples and rescore 3D proposals.
    FprSelect {
        #[arg(long)]
        fused: Option<PathBuf>,
    },
    /// FROC of 3D proposals against the planted truth.
    EvalFroc {
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Every stage in order, then manifest.json.
    PipelineRun,
}

#[derive(Subcommand)]
enum MineStep {
    /// Cross-slice propagation along tracklets.
    Propagate {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Intra-patient lesion matching.
    Match {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cross-dataset mining of uncertain labels.
    Cross {
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> lens_core::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = g.workers {
        cfg.workers = v;
    }
    let t = &mut cfg.thresholds;
    for (slot, v) in [
        (&mut t.theta, g.theta),
        (&mut t.delta, g.delta),
        (&mut t.sigma, g.sigma),
        (&mut t.theta_fp, g.theta_fp),
        (&mut t.nms_iou, g.nms_iou),
        (&mut t.iobb, g.iobb),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    cfg.strict_froc |= g.strict_froc;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> lens_core::Result<()> {
    let cfg = load_config(&cli.global)?;
    let dir = cli.global.out_dir.as_path();
    std::fs::create_dir_all(dir)?;
    let p = |name: &str| dir.join(name);
    let or = |given: Option<PathBuf>, name: &str| given.unwrap_or_else(|| p(name));
    pipeline::with_workers(cfg.workers, || -> lens_core::Result<()> {
        match cli.command {
            Command::SynthGen => {
                pipeline::synth_gen(&cfg, dir)?;
                println!("cohort written to {}", dir.display());
            }
            Command::Simulate { refined, output } => {
                let default = if refined { files::PROPOSALS_REFINED } else { files::PROPOSALS };
                let out = or(output, default);
                let n = pipeline::simulate(&cfg, dir, refined, &out)?;
                report(n, "proposals", &out);
            }
            Command::Decode { centerness, regression, volume_id, stride, slice, threshold, top_k, expert_id, output } => {
                let params = DecodeParams {
                    score_threshold: threshold,
                    top_k: top_k.unwrap_or(usize::MAX),
                    slice,
                    expert_id,
                    ..DecodeParams::new(stride)
                };
                let n = pipeline::decode(&cfg, &centerness, &regression, &volume_id, &params, &output)?;
                report(n, "proposals", &output);
            }
            Command::Fuse { input, output } => {
                let out = or(output, files::FUSED);
                let n = pipeline::fuse(&cfg, &or(input, files::PROPOSALS), &out)?;
                report(n, "fused boxes", &out);
            }
            Command::Stack3d { input, output } => {
                let out = or(output, files::PROPOSALS_3D);
                let n = pipeline::stack3d(&cfg, &or(input, files::FUSED), &out)?;
                report(n, "3D proposals", &out);
            }
            Command::Mine { step } => match step {
                MineStep::Propagate { output } => {
                    let out = or(output, files::MINED_PROPAGATE);
                    let n = pipeline::mine_propagate(&cfg, &p(files::FUSED), &[p(files::ANNOTATIONS)], &out)?;
                    report(n, "propagated boxes", &out);
                }
                MineStep::Match { output } => {
                    let out = or(output, files::MINED_MATCH);
                    let known = [p(files::ANNOTATIONS), p(files::MINED_PROPAGATE)];
                    let n = pipeline::mine_match(&cfg, &p(files::VOLUMES), &p(files::FUSED), &known, &out)?;
                    report(n, "matched boxes", &out);
                }
                MineStep::Cross { output } => {
                    let out = or(output, files::UNCERTAIN);
                    let known = [p(files::ANNOTATIONS), p(files::MINED_PROPAGATE), p(files::MINED_MATCH)];
                    let n = pipeline::mine_cross(&cfg, &p(files::VOLUMES), &p(files::PROPOSALS), &known, &out)?;
                    report(n, "uncertain boxes", &out);
                }
            },
            Command::Assemble { output } => {
                let out = or(output, files::TRAINING_SET);
                let set = pipeline::assemble(
                    &cfg,
                    &p(files::VOLUMES),
                    &p(files::ANNOTATIONS),
                    &[p(files::MINED_PROPAGATE), p(files::MINED_MATCH)],
                    &p(files::UNCERTAIN),
                    &out,
                )?;
                println!(
                    "{} positive and {} negative slices -> {}",
                    set.positives().count(),
                    set.negatives().count(),
                    out.display()
                );
            }
            Command::FprSelect { fused } => {
                let known = [p(files::ANNOTATIONS), p(files::MINED_PROPAGATE), p(files::MINED_MATCH), p(files::UNCERTAIN)];
                let (tp, fp) = pipeline::fpr_select(
                    &cfg,
                    &p(files::VOLUMES),
                    &or(fused, files::FUSED_REFINED),
                    &known,
                    &p(files::FPR_SAMPLES),
                    &p(files::SCORED_3D),
                )?;
                println!("{tp} TP and {fp} FP samples -> {}", p(files::FPR_SAMPLES).display());
            }
            Command::EvalFroc { proposals, output, svg } => {
                let out = or(output, files::FROC);
                let svg = svg.unwrap_or_else(|| p(files::FROC_SVG));
                let curve = pipeline::eval_froc(
                    &cfg,
                    &p(files::VOLUMES),
                    &p(files::TRUTH),
                    &or(proposals, files::SCORED_3D),
                    &out,
                    Some(&svg),
                )?;
                println!("average sensitivity {:.4} -> {}", curve.average_sensitivity, out.display());
            }
            Command::PipelineRun => {
                let m = pipeline::run(&cfg, dir)?;
                println!(
                    "config {}: average sensitivity {:.4} (detector {:.4}) -> {}",
                    m.config_hash,
                    m.froc.average_sensitivity,
                    m.froc_detector.average_sensitivity,
                    p(files::MANIFEST).display()
                );
            }
        }
        Ok(())
    })?
}

fn report(n: usize, what: &str, out: &Path) {
    println!("{n} {what} -> {}", out.display());
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::Config(_) => 3,
        Error::Format(_) => 4,
        Error::EmptyInput(_) => 5,
        Error::InvalidInput(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lens: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
