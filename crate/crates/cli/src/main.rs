//! `smoea` command-line front end. Every command writes a run directory and
//! prints a one-line JSON summary; failures print a JSON error line on
//! stderr and exit with a kind-specific code.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use smoea::config::{ModelSource, RunConfig};
use smoea::data::calibration_batch;
use smoea::evolution::{evolve, knee_index};
use smoea::export::{default_output_root, front_rows, sweep_to_csv, EvolutionDocument, RunDir};
use smoea::network::Network;
use smoea::objectives::AlphaMode;
use smoea::parallel;
use smoea::pipeline::{
    baseline_prune, layer_context, layer_evolution_config, smoea_prune, solve_uniform_fraction,
    sweep_uniform_retention, uniform_rates, Criterion,
};
use smoea::train::{evaluate_accuracy, finetune};
use smoea::Error;

#[derive(Parser)]
#[command(name = "smoea", version, about = "Sub-network evolutionary filter pruning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (default: <output root>/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for population evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Load the network from a saved model directory.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model from its initialization.
    Train,
    /// Evolve masks for a single conv layer and export its front.
    EvolveLayer {
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value = "optimized")]
        alpha_mode: AlphaArg,
    },
    /// Group-progressive pruning with knee-point masks.
    Prune,
    /// Prune the planned layers with a classic criterion.
    Baseline {
        #[arg(long, value_enum, default_value = "random")]
        criterion: CriterionArg,
        /// Uniform retain fraction per layer.
        #[arg(long, conflicts_with = "params_pct")]
        fraction: Option<f64>,
        /// Solve for the uniform fraction that leaves this percentage of parameters.
        #[arg(long)]
        params_pct: Option<f64>,
    },
    /// Accuracy against uniform retention targets.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.35, 0.45, 0.55, 0.65, 0.75])]
        fractions: Vec<f64>,
    },
    /// Parameter and FLOPs accounting for a model.
    Report {
        /// Use a built-in architecture at its standard geometry.
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaArg {
    Optimized,
    FixedOne,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Random,
    L2,
    Fpgm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Vgg14,
    ToyCnn,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::EvolveLayer { .. } => "evolve-layer",
            Command::Prune => "prune",
            Command::Baseline { .. } => "baseline",
            Command::Sweep { .. } => "sweep",
            Command::Report { .. } => "report",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InfeasibleBounds(_) => 2,
        Error::Io { .. } => 3,
        Error::UnknownLayer(_) => 4,
        Error::CorruptData(_) | Error::CorruptModel(_) => 5,
        Error::InvalidPlan(_) => 6,
        _ => 1,
    }
}

fn load_config(common: &Common) -> smoea::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(path) = &common.model {
        cfg.model = ModelSource::Path { path: path.clone() };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(common: &Common, cfg: &RunConfig, command: &str) -> smoea::Result<RunDir> {
    let path = match &common.out {
        Some(p) => p.clone(),
        None => cfg.output_dir.clone().unwrap_or_else(default_output_root).join(command),
    };
    RunDir::create(path)
}

fn sci(x: f64) -> String {
    let s = format!("{x:.2E}");
    // Rust prints `6.26E8`; pad the exponent to two digits with a sign.
    match s.split_once('E') {
        Some((m, e)) => {
            let (sign, digits) = e.strip_prefix('-').map_or(("+", e), |d| ("-", d));
            format!("{m}E{sign}{digits:0>2}")
        }
        None => s,
    }
}

fn accounting(net: &Network) -> smoea::Result<Value> {
    let [_, h, w] = net.input_shape();
    let flops = net.count_flops((h, w))?;
    Ok(json!({
        "input_shape": net.input_shape(),
        "conv_layers": net.num_convs(),
        "filters": net.filter_counts(),
        "params": net.count_params(),
        "flops": flops,
        "flops_sci": sci(flops as f64),
    }))
}

fn execute(cli: &Cli) -> smoea::Result<Value> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    let name = cli.command.name();
    let mut run = run_dir(common, &cfg, name)?;
    let echo = cfg.to_toml()?;
    run.log(&format!("command {name}"))?;

    let summary = match &cli.command {
        Command::Report { arch } => {
            let net = match arch {
                Some(ArchArg::Vgg14) => smoea::network::build_vgg14(0),
                Some(ArchArg::ToyCnn) => smoea::network::ArchSpec::toy([3, 16, 16], 10).build(0)?,
                None => cfg.model.load_for(cfg.dataset.geometry())?,
            };
            let acc = accounting(&net)?;
            run.write_json("report.json", &acc)?;
            acc
        }
        Command::Train => {
            let data = cfg.dataset()?;
            let net = cfg.model.load(&data)?;
            let (trained, losses) = finetune(&net, &data.train, &cfg.train)?;
            for (e, l) in losses.iter().enumerate() {
                run.log(&format!("epoch {e} loss {l}"))?;
            }
            let accuracy = evaluate_accuracy(&trained, &data.test)?;
            run.save_model(&trained)?;
            let report = json!({
                "accuracy": accuracy,
                "losses": losses,
                "model": accounting(&trained)?,
            });
            run.write_json("report.json", &report)?;
            json!({ "accuracy": accuracy })
        }
        Command::EvolveLayer { layer, alpha_mode } => {
            let mut pc = cfg.prune_config();
            pc.evolution.alpha_mode = match alpha_mode {
                AlphaArg::Optimized => AlphaMode::Optimized,
                AlphaArg::FixedOne => AlphaMode::FixedOne,
            };
            let data = cfg.dataset()?;
            let net = cfg.model.load(&data)?;
            net.conv(*layer)?;
            let calibration = calibration_batch(&data.train, pc.calibration_size, pc.evolution.seed)?;
            let ctx = layer_context(&net, *layer, &calibration, &pc)?;
            let evo = layer_evolution_config(&pc.evolution, *layer);
            let result = evolve(&ctx, &evo)?;
            let pts: Vec<_> = result.front.members.iter().map(|m| m.objectives).collect();
            let knee = knee_index(&pts)?;
            for s in &result.history {
                run.log(&format!(
                    "generation {} best {} median {}",
                    s.generation, s.best_error, s.median_error
                ))?;
            }
            run.write_front(*layer, &result.front)?;
            let doc = EvolutionDocument {
                layer: *layer,
                num_filters: net.conv(*layer)?.out_channels,
                config: evo,
                history: result.history,
                front: front_rows(&result.front),
                knee_index: knee,
            };
            run.write_json("evolution.json", &doc)?;
            run.write_json("report.json", &doc)?;
            json!({ "layer": layer, "front_size": doc.front.len(), "knee_index": knee })
        }
        Command::Prune => {
            let plan = cfg.plan()?.clone();
            let data = cfg.dataset()?;
            let net = cfg.model.load(&data)?;
            plan.validate(net.num_convs())?;
            let pc = cfg.prune_config();
            let (pruned, report) = smoea_prune(&net, &data, &plan, &pc)?;
            for l in &report.layers {
                if let Some(front) = &l.front {
                    run.write_front(l.layer, front)?;
                }
                run.log(&format!("layer {} retained {}/{}", l.layer, l.retained, l.filters))?;
            }
            run.save_model(&pruned)?;
            run.write_json("report.json", &report)?;
            json!({
                "remained_params_pct": report.remained_params_pct(),
                "accuracy_before": report.accuracy_before,
                "accuracy_after": report.accuracy_after,
            })
        }
        Command::Baseline {
            criterion,
            fraction,
            params_pct,
        } => {
            let criterion = match criterion {
                CriterionArg::Random => Criterion::Random,
                CriterionArg::L2 => Criterion::L2,
                CriterionArg::Fpgm => Criterion::Fpgm,
            };
            let plan = cfg.plan()?.clone();
            let data = cfg.dataset()?;
            let net = cfg.model.load(&data)?;
            plan.validate(net.num_convs())?;
            let layers = plan.layers();
            let f = match (fraction, params_pct) {
                (_, Some(pct)) => {
                    let target = (pct / 100.0 * net.count_params() as f64).round() as usize;
                    solve_uniform_fraction(&net, &layers, target)?
                }
                (Some(f), None) => *f,
                (None, None) => 0.5,
            };
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!("retain fraction must lie in (0, 1], got {f}")));
            }
            run.log(&format!("uniform fraction {f}"))?;
            let rates: BTreeMap<usize, f64> = uniform_rates(&layers, f);
            let seed = cfg.evolution.seed;
            let (pruned, report) = baseline_prune(&net, &data, &plan, criterion, &rates, &cfg.finetune, seed)?;
            run.save_model(&pruned)?;
            run.write_json("report.json", &report)?;
            json!({
                "criterion": criterion.name(),
                "fraction": f,
                "remained_params_pct": report.remained_params_pct(),
                "accuracy_after": report.accuracy_after,
            })
        }
        Command::Sweep { fractions } => {
            let plan = cfg.plan()?.clone();
            let data = cfg.dataset()?;
            let net = cfg.model.load(&data)?;
            let pc = cfg.prune_config();
            let rows = sweep_uniform_retention(&net, &data, &plan, fractions, &pc)?;
            run.write_text("sweep.csv", &sweep_to_csv(&rows)?)?;
            run.write_json("report.json", &rows)?;
            json!({ "rows": rows.len() })
        }
    };
    let dir = run.finish(name, &echo)?;
    let mut out = json!({ "command": name, "run_dir": dir });
    if let (Value::Object(o), Value::Object(s)) = (&mut out, summary) {
        o.extend(s);
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match parallel::with_threads(cli.common.threads, || execute(&cli)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                json!({ "error": e.kind(), "code": code, "message": e.to_string() })
            );
            ExitCode::from(code)
        }
    }
}
