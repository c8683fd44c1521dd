//! Command line entry points for the radflow library: dataset generation
//! and ingestion, training, evaluation, forecasting and the post-hoc
//! analyses. Every command writes its outputs atomically into an output
//! directory, together with the fully resolved configuration it ran with.
//!
//! Exit codes: 0 on success, 2 for configuration or usage problems, 3 for
//! data, format or runtime failures.

use clap::{Args, Parser, Subcommand};
use radflow::data::graph::DynamicGraph;
use radflow::data::ingest::ingest_traffic;
use radflow::data::panel::{FilledPanel, SeriesPanel};
use radflow::data::synth::{generate, SynthConfig};
use radflow::eval::analysis::{
    attention_correlation, counterfactual_double, network_contribution, robustness_sweep,
};
use radflow::eval::{evaluate, EvalOptions, Setting};
use radflow::model::RadflowParams;
use radflow::train::checkpoint;
use radflow::train::{fit, FitConfig};
use radflow::RadflowError;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "radflow", version, about = "Forecasting for dynamic networks of time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel, edge list and influence matrix.
    Synth(SynthArgs),
    /// Convert traffic-style CSV matrices into the panel and edge formats.
    Ingest(IngestArgs),
    /// Train a model and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write pooled and per-node metrics.
    Eval(EvalArgs),
    /// Write raw and log-scale forecasts for selected nodes.
    Forecast(ForecastArgs),
    /// Break one node's forecast into per-layer, recurrent and network terms.
    Decompose(DecomposeArgs),
    /// Dump attention weights and their correlation with neighbor series.
    Attention(AttentionArgs),
    /// Robustness sweep over random value and edge deletions.
    Perturb(PerturbArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with the generator settings; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// CSV with one row per time step and one column per node.
    #[arg(long)]
    speeds: PathBuf,
    /// CSV with the square adjacency matrix; nonzero entries become edges.
    #[arg(long)]
    adjacency: PathBuf,
    /// Mark zero readings as missing (sensor dropouts).
    #[arg(long)]
    zeros_missing: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with the model, optimizer and data-range settings.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    /// First step of the forecast horizon; the backcast window ends here.
    #[arg(long)]
    test_start: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// "imputation" observes true neighbor values over the horizon;
    /// "forecast" replaces them with a pretrained no-network model's output.
    #[arg(long, default_value = "imputation")]
    setting: String,
    /// Checkpoint of the no-network model the forecast setting substitutes.
    #[arg(long)]
    neighbor_checkpoint: Option<PathBuf>,
    /// Drop samples whose truth is exactly zero.
    #[arg(long)]
    nonzero_only: bool,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated node ids; all nodes when omitted.
    #[arg(long)]
    nodes: Option<String>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    node: usize,
}

#[derive(Args)]
struct AttentionArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Restrict the dump to one ego node.
    #[arg(long)]
    node: Option<usize>,
    /// Also double this "src:day" neighbor observation and report the shift.
    #[arg(long)]
    counterfactual: Option<String>,
}

#[derive(Args)]
struct PerturbArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated fractions of observations to delete, e.g. "0,0.4,1".
    #[arg(long, default_value = "")]
    value_fractions: String,
    /// Comma-separated fractions of edges to delete.
    #[arg(long, default_value = "")]
    edge_fractions: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Ingest(a) => run_ingest(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Forecast(a) => run_forecast(a),
        Command::Decompose(a) => run_decompose(a),
        Command::Attention(a) => run_attention(a),
        Command::Perturb(a) => run_perturb(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RadflowError::InvalidConfig(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

type Result<T> = std::result::Result<T, RadflowError>;

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Echo the fully resolved settings next to the outputs, so a run can be
/// reproduced without the original invocation.
fn echo_config<T: Serialize>(out_dir: &Path, name: &str, config: &T) -> Result<()> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| RadflowError::InvalidConfig(e.to_string()))?;
    write_atomic(&out_dir.join(format!("{name}.resolved.toml")), &text)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| {
        RadflowError::InvalidConfig(format!("{}: {e}", path.display()))
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn parse_fractions(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| RadflowError::InvalidConfig(format!("bad fraction {s:?}")))
        })
        .collect()
}

struct Loaded {
    params: RadflowParams,
    panel: FilledPanel,
    graph: DynamicGraph,
}

fn load_data(args: &DataArgs) -> Result<Loaded> {
    let params = checkpoint::load(&args.checkpoint)?;
    let raw = SeriesPanel::load(&args.panel)?;
    let graph = DynamicGraph::load_edges(&args.edges, raw.n_nodes(), raw.n_steps())?;
    Ok(Loaded {
        params,
        panel: FilledPanel::from_panel(&raw),
        graph,
    })
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let config: SynthConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => SynthConfig::default(),
    };
    let data = generate(&config)?;
    ensure_dir(&args.out_dir)?;
    data.panel.save(&args.out_dir.join("panel.bin"))?;
    data.graph.save_edges(&args.out_dir.join("edges.txt"))?;

    let mut csv = String::from(
        "# Ground-truth influence strengths of the synthetic generator.\n\
         # src, dst: directed edge endpoints (node ids).\n\
         # influence: gamma times the fraction of steps the edge is active.\n\
         src,dst,influence\n",
    );
    let n = config.nodes;
    for src in 0..n {
        for dst in 0..n {
            let v = data.influence[src * n + dst];
            if v != 0.0 {
                csv.push_str(&format!("{src},{dst},{v}\n"));
            }
        }
    }
    write_atomic(&args.out_dir.join("influence.csv"), &csv)?;
    echo_config(&args.out_dir, "synth", &config)?;
    println!(
        "wrote {} nodes x {} steps, {} edges to {}",
        config.nodes,
        config.steps,
        data.graph.edges().len(),
        args.out_dir.display()
    );
    Ok(())
}

fn run_ingest(args: IngestArgs) -> Result<()> {
    let (panel, graph, report) =
        ingest_traffic(&args.speeds, &args.adjacency, args.zeros_missing)?;
    ensure_dir(&args.out_dir)?;
    panel.save(&args.out_dir.join("panel.bin"))?;
    graph.save_edges(&args.out_dir.join("edges.txt"))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| RadflowError::Data(e.to_string()))?;
    write_atomic(&args.out_dir.join("ingest_report.json"), &json)?;
    println!(
        "ingested {} nodes x {} steps, {} edges, missing rate {:.4}",
        report.nodes, report.steps, report.edges, report.missing_rate
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config: FitConfig = read_toml(&args.config)?;
    let raw = SeriesPanel::load(&args.panel)?;
    let panel = FilledPanel::from_panel(&raw);
    let graph = DynamicGraph::load_edges(&args.edges, raw.n_nodes(), raw.n_steps())?;
    ensure_dir(&args.out_dir)?;
    echo_config(&args.out_dir, "train", &config)?;
    let result = fit(&panel, &graph, &config, Some(&args.out_dir))?;
    result.log.write_jsonl(&args.out_dir.join("train_log.jsonl"))?;

    #[derive(Serialize)]
    struct Summary {
        best_epoch: usize,
        best_valid_smape: f64,
        steps: usize,
    }
    let summary = Summary {
        best_epoch: result.best_epoch,
        best_valid_smape: result.best_valid_smape,
        steps: result.log.steps.len(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| RadflowError::Data(e.to_string()))?;
    write_atomic(&args.out_dir.join("fit_summary.json"), &json)?;
    println!(
        "trained {} steps; best epoch {} with validation SMAPE {:.4}",
        summary.steps, summary.best_epoch, summary.best_valid_smape
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalResolved {
    setting: Setting,
    test_start: usize,
    nonzero_only: bool,
    checkpoint: String,
    neighbor_checkpoint: Option<String>,
}

fn parse_setting(s: &str) -> Result<Setting> {
    match s {
        "imputation" => Ok(Setting::Imputation),
        "forecast" => Ok(Setting::Forecast),
        other => Err(RadflowError::InvalidConfig(format!(
            "setting must be \"imputation\" or \"forecast\", got {other:?}"
        ))),
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let setting = parse_setting(&args.setting)?;
    let loaded = load_data(&args.data)?;
    let neighbor_model = args
        .neighbor_checkpoint
        .as_ref()
        .map(|p| checkpoint::load(p))
        .transpose()?;
    let opts = EvalOptions {
        setting,
        test_start: args.data.test_start,
        nonzero_only: args.nonzero_only,
    };
    let (report, bundles) = evaluate(
        &loaded.params,
        &loaded.panel,
        &loaded.graph,
        &opts,
        neighbor_model.as_ref(),
    )?;
    ensure_dir(&args.data.out_dir)?;
    echo_config(
        &args.data.out_dir,
        "eval",
        &EvalResolved {
            setting,
            test_start: args.data.test_start,
            nonzero_only: args.nonzero_only,
            checkpoint: args.data.checkpoint.display().to_string(),
            neighbor_checkpoint: args
                .neighbor_checkpoint
                .as_ref()
                .map(|p| p.display().to_string()),
        },
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| RadflowError::Data(e.to_string()))?;
    write_atomic(&args.data.out_dir.join("eval_report.json"), &json)?;

    let mut csv = String::from(
        "# Per-node metrics over the forecast horizon.\n\
         # node: node id. smape: symmetric mean absolute percentage error (0-200).\n\
         # rmse, mae: raw-scale errors. count: samples after filtering.\n\
         # network_contribution: mean share of the forecast magnitude carried\n\
         # by the neighbor-aggregation term (0 when no neighbor was active).\n\
         node,smape,rmse,mae,count,network_contribution\n",
    );
    for (m, b) in report.per_node.iter().zip(&bundles) {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.node,
            m.smape,
            m.rmse,
            m.mae,
            m.count,
            network_contribution(b)
        ));
    }
    write_atomic(&args.data.out_dir.join("per_node.csv"), &csv)?;
    println!(
        "SMAPE {:.4}  RMSE {:.4}  MAE {:.4} over {} samples",
        report.smape, report.rmse, report.mae, report.samples
    );
    Ok(())
}

fn eval_bundles(loaded: &Loaded, test_start: usize) -> Result<Vec<radflow::model::ForecastBundle>> {
    let opts = EvalOptions {
        setting: Setting::Imputation,
        test_start,
        nonzero_only: false,
    };
    let (_, bundles) = evaluate(&loaded.params, &loaded.panel, &loaded.graph, &opts, None)?;
    Ok(bundles)
}

fn run_forecast(args: ForecastArgs) -> Result<()> {
    let loaded = load_data(&args.data)?;
    let keep: Option<Vec<usize>> = match &args.nodes {
        Some(list) => Some(
            list.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| RadflowError::InvalidConfig(format!("bad node id {s:?}")))
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let bundles = eval_bundles(&loaded, args.data.test_start)?;
    ensure_dir(&args.data.out_dir)?;

    let mut csv = String::from(
        "# Forecasts over the horizon, one row per node, step and dim.\n\
         # step: horizon index (0-based). forecast_raw: value on the\n\
         # original scale, clamped at zero. forecast_log: pre-inverse value\n\
         # in log1p space (may be negative).\n\
         node,step,dim,forecast_raw,forecast_log\n",
    );
    for b in &bundles {
        if keep.as_ref().is_some_and(|k| !k.contains(&b.node)) {
            continue;
        }
        for (f, (raw, log)) in b.forecast_raw.iter().zip(&b.forecast_log).enumerate() {
            for (d, (&r, &l)) in raw.iter().zip(log).enumerate() {
                csv.push_str(&format!("{},{f},{d},{r},{l}\n", b.node));
            }
        }
    }
    write_atomic(&args.data.out_dir.join("forecasts.csv"), &csv)?;
    #[derive(Serialize)]
    struct Resolved {
        test_start: usize,
        nodes: Option<Vec<usize>>,
        checkpoint: String,
    }
    echo_config(
        &args.data.out_dir,
        "forecast",
        &Resolved {
            test_start: args.data.test_start,
            nodes: keep,
            checkpoint: args.data.checkpoint.display().to_string(),
        },
    )?;
    println!("wrote forecasts to {}", args.data.out_dir.display());
    Ok(())
}

fn run_decompose(args: DecomposeArgs) -> Result<()> {
    let loaded = load_data(&args.data)?;
    if args.node >= loaded.panel.n_nodes() {
        return Err(RadflowError::InvalidConfig(format!(
            "node {} outside the {}-node panel",
            args.node,
            loaded.panel.n_nodes()
        )));
    }
    let bundles = eval_bundles(&loaded, args.data.test_start)?;
    let b = &bundles[args.node];
    let layers = loaded.params.config.layers;
    ensure_dir(&args.data.out_dir)?;

    let mut csv = String::from(
        "# Forecast decomposition for one node, log1p space.\n\
         # layer<i>: contribution of stack layer i to the recurrent term.\n\
         # recurrent: sum of the layer columns. network: neighbor-aggregation\n\
         # term (zero when no neighbor was active). total = recurrent + network.\n",
    );
    csv.push_str("step,dim");
    for l in 0..layers {
        csv.push_str(&format!(",layer{l}"));
    }
    csv.push_str(",recurrent,network,total\n");
    let dims = b.forecast_log[0].len();
    for f in 0..b.forecast_log.len() {
        for d in 0..dims {
            csv.push_str(&format!("{f},{d}"));
            for l in 0..layers {
                csv.push_str(&format!(",{}", b.per_layer_log[l][f][d]));
            }
            csv.push_str(&format!(
                ",{},{},{}\n",
                b.recurrent_log[f][d], b.network_log[f][d], b.forecast_log[f][d]
            ));
        }
    }
    write_atomic(&args.data.out_dir.join("decompose.csv"), &csv)?;
    #[derive(Serialize)]
    struct Resolved {
        test_start: usize,
        node: usize,
        layers: usize,
        checkpoint: String,
    }
    echo_config(
        &args.data.out_dir,
        "decompose",
        &Resolved {
            test_start: args.data.test_start,
            node: args.node,
            layers,
            checkpoint: args.data.checkpoint.display().to_string(),
        },
    )?;
    println!(
        "decomposed node {} over {} horizon steps",
        args.node,
        b.forecast_log.len()
    );
    Ok(())
}

fn run_attention(args: AttentionArgs) -> Result<()> {
    let loaded = load_data(&args.data)?;
    let bundles = eval_bundles(&loaded, args.data.test_start)?;
    ensure_dir(&args.data.out_dir)?;

    let mut csv = String::from(
        "# Head-averaged attention weights per ego node and horizon step.\n\
         # neighbor: source node id, or \"null\" for the learned no-neighbor\n\
         # slot. score: softmax weight in [0, 1]; scores for one (ego, step)\n\
         # sum to 1 across neighbors plus the null slot.\n\
         ego,step,neighbor,score\n",
    );
    for b in &bundles {
        if args.node.is_some_and(|n| n != b.node) {
            continue;
        }
        for (f, trace) in b.traces.iter().enumerate() {
            let Some(tr) = trace else { continue };
            for (i, &id) in tr.neighbor_ids.iter().enumerate() {
                csv.push_str(&format!("{},{f},{id},{}\n", b.node, tr.neighbor_score(i)));
            }
            csv.push_str(&format!("{},{f},null,{}\n", b.node, tr.null_score()));
        }
    }
    write_atomic(&args.data.out_dir.join("attention.csv"), &csv)?;

    let horizon = loaded.params.config.horizon;
    let records = attention_correlation(
        &bundles,
        &loaded.panel,
        args.data.test_start,
        horizon,
    );
    let mut csv = String::from(
        "# Attention versus series correlation per (ego, neighbor) pair.\n\
         # correlation: Pearson correlation of the two raw series over the\n\
         # horizon; empty when either series is constant (skipped = 1).\n\
         # mean_lambda: head-averaged attention, averaged over the steps the\n\
         # neighbor appears in.\n\
         ego,neighbor,correlation,skipped,mean_lambda\n",
    );
    for r in &records {
        if args.node.is_some_and(|n| n != r.ego) {
            continue;
        }
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.ego,
            r.neighbor,
            r.correlation.map_or(String::new(), |c| c.to_string()),
            r.skipped as u8,
            r.mean_lambda
        ));
    }
    write_atomic(&args.data.out_dir.join("correlation.csv"), &csv)?;

    if let Some(spec) = &args.counterfactual {
        let (nb, day) = spec
            .split_once(':')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| {
                RadflowError::InvalidConfig(format!(
                    "counterfactual must be \"neighbor:day\", got {spec:?}"
                ))
            })?;
        let ego = args.node.ok_or_else(|| {
            RadflowError::InvalidConfig("--counterfactual needs --node for the ego".into())
        })?;
        let record = counterfactual_double(
            &loaded.params,
            &loaded.panel,
            &loaded.graph,
            ego,
            nb,
            day,
            args.data.test_start,
        )?;
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| RadflowError::Data(e.to_string()))?;
        write_atomic(&args.data.out_dir.join("counterfactual.json"), &json)?;
    }

    #[derive(Serialize)]
    struct Resolved {
        test_start: usize,
        node: Option<usize>,
        counterfactual: Option<String>,
        checkpoint: String,
    }
    echo_config(
        &args.data.out_dir,
        "attention",
        &Resolved {
            test_start: args.data.test_start,
            node: args.node,
            counterfactual: args.counterfactual.clone(),
            checkpoint: args.data.checkpoint.display().to_string(),
        },
    )?;
    println!("wrote attention dumps to {}", args.data.out_dir.display());
    Ok(())
}

fn run_perturb(args: PerturbArgs) -> Result<()> {
    let value_fractions = parse_fractions(&args.value_fractions)?;
    let edge_fractions = parse_fractions(&args.edge_fractions)?;
    let loaded = load_data(&args.data)?;
    let raw = SeriesPanel::load(&args.data.panel)?;
    let points = robustness_sweep(
        &loaded.params,
        &raw,
        &loaded.graph,
        &value_fractions,
        &edge_fractions,
        args.data.test_start,
        args.seed,
    )?;
    ensure_dir(&args.data.out_dir)?;
    let mut csv = String::from(
        "# Imputation-setting SMAPE after random deletion.\n\
         # kind: \"values\" masks observations (forward-filled afterwards),\n\
         # \"edges\" removes graph edges entirely. fraction: share deleted.\n\
         kind,fraction,smape\n",
    );
    for p in &points {
        csv.push_str(&format!("{},{},{}\n", p.kind, p.fraction, p.smape));
    }
    write_atomic(&args.data.out_dir.join("robustness.csv"), &csv)?;
    #[derive(Serialize)]
    struct Resolved {
        test_start: usize,
        value_fractions: Vec<f64>,
        edge_fractions: Vec<f64>,
        seed: u64,
        checkpoint: String,
    }
    echo_config(
        &args.data.out_dir,
        "perturb",
        &Resolved {
            test_start: args.data.test_start,
            value_fractions,
            edge_fractions,
            seed: args.seed,
            checkpoint: args.data.checkpoint.display().to_string(),
        },
    )?;
    println!("wrote {} sweep points", points.len());
    Ok(())
}
