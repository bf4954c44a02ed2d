use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vli_core::attention::{purified_heatmap_with, ExpertHeadSet};
use vli_core::harness::{
    load_config, parse_range, read_report, read_validation_set, run_sweep, run_verify, sweep_csv,
    to_json_string, write_heatmap_csv, InpaintKind, Pipeline, RunConfig, SweepGrid,
};
use vli_core::model::{greedy_decode, load_checkpoint};
use vli_core::steering::{vli_generate, VliStepReport};
use vli_core::synthetic::{render_case, run_pope_like_bench, validation_set, SceneParams};

#[derive(Parser, Debug)]
#[command(
    name = "vli",
    version,
    about = "Introspective decoding on a toy vision-language model"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select expert heads on a validation set and write them as JSON.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
        /// JSON-lines validation set; generated from the seeds when absent.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Decode one rendered scene with and without introspection.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
        /// Scene index within the seeded suite.
        #[arg(long, default_value_t = 0)]
        case: usize,
        #[arg(long, default_value_t = 1)]
        max_len: usize,
        /// Write the first step's purified heatmap as CSV.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the yes/no existence benchmark.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
        /// Also write one CSV row per case.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Benchmark a grid of (rho, theta, alpha) values and emit a CSV of rates.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Range `start:stop:step` or a single value. With no range given,
        /// each of rho, theta and alpha is swept alone over its default range.
        #[arg(long, value_name = "RANGE")]
        rho: Option<String>,
        #[arg(long, value_name = "RANGE")]
        theta: Option<String>,
        #[arg(long, value_name = "RANGE")]
        alpha: Option<String>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the invariant and oracle suite; exit 0 iff every check passes.
    Verify {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Anchor energy ratio, conflict threshold and steering strength.
#[derive(Args, Debug, Default)]
struct Point {
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

/// Flags shared by the model-running subcommands. Each one overrides the
/// matching key of `--config`.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint; defaults to the built-in scene model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expert heads from `vli calibrate`; calibrated on the fly when absent.
    #[arg(long)]
    experts_file: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of expert heads.
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["mean", "zero", "noise"])]
    inpaint: Option<String>,
    #[arg(long)]
    sink_filter: bool,
    #[arg(long)]
    tau_sink: Option<f64>,
    /// Number of benchmark cases.
    #[arg(long)]
    cases: Option<usize>,
}

impl Common {
    fn run_config(&self, point: &Point) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $k:ident),*) => { $(if let Some(v) = self.$f { c.$k = v; })* };
        }
        if let Some(v) = point.rho {
            c.rho = v;
        }
        if let Some(v) = point.theta {
            c.theta = v;
        }
        if let Some(v) = point.alpha {
            c.alpha = v;
        }
        set!(lambda => lambda, epsilon => epsilon, experts => num_experts, seed => seed, tau_sink => tau_sink, cases => n_cases);
        if let Some(kind) = &self.inpaint {
            c.inpaint = kind.parse::<InpaintKind>()?;
        }
        if self.sink_filter {
            c.sink_filter = true;
        }
        c.validate()?;
        Ok(c)
    }

    fn pipeline(&self, point: &Point) -> anyhow::Result<Pipeline> {
        let config = self.run_config(point)?;
        match &self.checkpoint {
            None => Ok(Pipeline::prepare(&config)?),
            Some(p) => {
                let model =
                    load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
                let config = RunConfig {
                    model: model.config.clone(),
                    ..config
                };
                let val = validation_set(
                    &SceneParams::default(),
                    &model.config,
                    config.validation_seed,
                    config.n_validation,
                )?;
                Ok(Pipeline::with_parts(&config, model, val)?)
            }
        }
    }

    fn experts(&self, pipeline: &Pipeline) -> anyhow::Result<ExpertHeadSet> {
        match &self.experts_file {
            Some(p) => Ok(read_report(p).with_context(|| format!("loading {}", p.display()))?),
            None => Ok(pipeline.calibrate()?),
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct RunReport {
    case: usize,
    query_class: usize,
    present: bool,
    truth: usize,
    prompt: Vec<usize>,
    baseline_tokens: Vec<usize>,
    vli_tokens: Vec<usize>,
    steps: Vec<VliStepReport>,
}

fn execute(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Calibrate {
            common,
            point,
            validation,
            out,
        } => {
            let mut pipeline = common.pipeline(&point)?;
            if let Some(p) = validation {
                pipeline.validation =
                    read_validation_set(&p).with_context(|| format!("loading {}", p.display()))?;
            }
            let experts = pipeline.calibrate()?;
            emit(&to_json_string(&experts)?, out.as_deref())?;
        }
        Command::Run {
            common,
            point,
            case,
            max_len,
            heatmap,
            out,
        } => {
            let pipeline = common.pipeline(&point)?;
            let experts = common.experts(&pipeline)?;
            let config = pipeline.vli_config();
            let model = &pipeline.model;
            let scene = render_case(
                &SceneParams::default(),
                &model.config,
                pipeline.config.seed,
                case,
                None,
            )?;
            let prompt = scene.prompt();
            let visual = model.encode_visual(&scene.image)?;
            let baseline = greedy_decode(model, &visual, &prompt, max_len)?;
            let (tokens, steps) =
                vli_generate(model, &scene.image, &prompt, max_len, &experts, &config)?;
            if let Some(p) = heatmap {
                let trace = model.forward_step(&visual, &prompt, None)?;
                let heat = purified_heatmap_with(&trace, &experts, config.aggregation)?;
                write_heatmap_csv(&heat, model.config.grid_rows, model.config.grid_cols, &p)?;
            }
            let report = RunReport {
                case,
                query_class: scene.query_class,
                present: scene.present,
                truth: scene.truth(),
                prompt,
                baseline_tokens: baseline,
                vli_tokens: tokens,
                steps,
            };
            emit(&to_json_string(&report)?, out.as_deref())?;
        }
        Command::Bench {
            common,
            point,
            csv,
            out,
        } => {
            let pipeline = common.pipeline(&point)?;
            let experts = common.experts(&pipeline)?;
            let c = &pipeline.config;
            let report = run_pope_like_bench(
                &pipeline.model,
                &experts,
                &pipeline.vli_config(),
                c.n_cases,
                c.seed,
            )?;
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv())
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            emit(&to_json_string(&report)?, out.as_deref())?;
        }
        Command::Sweep {
            common,
            rho,
            theta,
            alpha,
            out,
        } => {
            let pipeline = common.pipeline(&Point::default())?;
            let experts = common.experts(&pipeline)?;
            let base = pipeline.vli_config();
            let grid = SweepGrid::new(
                &base,
                rho.map(|r| parse_range("rho", &r)).transpose()?,
                theta.map(|r| parse_range("theta", &r)).transpose()?,
                alpha.map(|r| parse_range("alpha", &r)).transpose()?,
            )?;
            let c = &pipeline.config;
            let rows = run_sweep(&pipeline.model, &experts, &base, &grid, c.n_cases, c.seed)?;
            emit(&sweep_csv(&rows), out.as_deref())?;
        }
        Command::Verify { out } => {
            let report = run_verify()?;
            let text = to_json_string(&report)?;
            emit(&text, out.as_deref())?;
            for c in report.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAILED {}: {}", c.name, c.detail);
            }
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
