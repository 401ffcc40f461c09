// SPDX-License-Identifier: MIT OR Apache-2.0

//! `intervene` command-line harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use intervene::engine::{ConstantSource, IntervenableConfig, IntervenableModel};
use intervene::harness::csv;
use intervene::harness::localize::{self, DasConfig, GridRow, PronounSet, METRIC_IIA, METRIC_PROBE};
use intervene::harness::steer::{self, DEFAULT_COEFFICIENT};
use intervene::harness::trace::{Tracer, STREAMS, WINDOW};
use intervene::harness::{default_train_config, train_task_model, Dataset, Task};
use intervene::interventions::Registry;
use intervene::model::{checkpoint, Component, Model};
use intervene::par::{self, Execution};
use intervene::serialization::save_bundle;
use intervene::tensor::blob;

#[derive(Parser)]
#[command(name = "intervene", version, about = "Toy-scale intervention studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON.
    MakeData(MakeData),
    /// Train the toy model for a dataset and save a checkpoint directory.
    TrainModel(TrainModel),
    /// Causal tracing grid for one prompt.
    Trace(Trace),
    /// Train a low-rank DAS intervention on the pronoun task.
    TrainDas(TrainDas),
    /// Fit a linear probe on collected activations.
    TrainProbe(TrainProbe),
    /// Greedy generation with and without activation steering.
    Steer(Steer),
    /// Check a config document against a model checkpoint.
    Validate(Validate),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeData {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainModel {
    #[arg(long)]
    data: PathBuf,
    /// Override the task's default number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Trace {
    #[arg(long)]
    model: PathBuf,
    /// Whitespace-separated prompt tokens.
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    gold: String,
    /// Positions to corrupt; the default fits fact_lookup prompts.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    subject: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_stream)]
    streams: Option<Vec<Component>>,
    /// Restore window for mlp_activation and attention_output.
    #[arg(long, default_value_t = WINDOW)]
    window: usize,
    /// Noise standard deviation; defaults to a multiple of the embedding std.
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Cell {
    #[arg(long)]
    model: PathBuf,
    /// A pronoun dataset from `make-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    position: usize,
    /// Sweep every (layer, position) and write a CSV grid to `--out`.
    #[arg(long)]
    grid: bool,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainDas {
    #[command(flatten)]
    cell: Cell,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 120)]
    steps: usize,
    #[arg(long, default_value_t = 240)]
    eval_pairs: usize,
}

#[derive(Args)]
struct TrainProbe {
    #[command(flatten)]
    cell: Cell,
    /// Permute labels before fitting (null control).
    #[arg(long)]
    shuffle_labels: bool,
}

#[derive(Args)]
struct Steer {
    #[arg(long)]
    model: PathBuf,
    /// Whitespace-separated prompt tokens; `<bos>` is prepended.
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    steer_token: String,
    #[arg(long, default_value_t = DEFAULT_COEFFICIENT)]
    coefficient: f64,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Validate {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn parse_stream(s: &str) -> std::result::Result<Component, String> {
    STREAMS
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| format!("unknown stream {s:?}"))
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn load_model(dir: &Path) -> Result<Model> {
    checkpoint::load(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset from {}", path.display()))
}

fn make_data(args: MakeData) -> Result<()> {
    let data = Dataset::generate(args.task, args.common.seed);
    data.save(&args.common.out)?;
    println!("wrote {} dataset to {}", args.task, args.common.out.display());
    Ok(())
}

fn train_model(args: TrainModel) -> Result<()> {
    let data = load_data(&args.data)?;
    let mut cfg = default_train_config(data.task(), args.common.seed);
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    let (model, report) = train_task_model(&data, &cfg)?;
    checkpoint::save(&model, &args.common.out)?;
    println!(
        "trained {} model: final loss {:.6}, train accuracy {:.4}",
        data.task(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.train_accuracy
    );
    Ok(())
}

fn trace(args: Trace) -> Result<()> {
    let model = load_model(&args.model)?;
    let prompt = model.vocab().encode(&args.prompt)?;
    let gold = model.vocab().id(&args.gold)?;
    let tracer = Tracer::new(&model, prompt, gold, args.subject, args.noise_scale, args.common.seed)?
        .with_window(args.window)?;
    let streams = args.streams.unwrap_or_else(|| STREAMS.to_vec());
    let rows = tracer.grid(&streams, exec(args.sequential))?;
    csv::write(&args.common.out, &csv::trace_csv(&rows))?;
    println!(
        "clean {:.6} noise-only {:.6}; {} rows to {}",
        tracer.clean_prob()?,
        tracer.noise_only_prob()?,
        rows.len(),
        args.common.out.display()
    );
    Ok(())
}

fn pronoun_set(model: &Model, path: &Path) -> Result<PronounSet> {
    match load_data(path)? {
        Dataset::Pronoun(d) => Ok(PronounSet::encode(&d, model.vocab())?),
        other => bail!("expected a pronoun dataset, got {}", other.task()),
    }
}

fn cells(model: &Model, set: &PronounSet, cell: &Cell) -> Vec<(usize, usize)> {
    if cell.grid {
        (0..model.schema().num_layers)
            .flat_map(|l| (0..set.seq_len()).map(move |p| (l, p)))
            .collect()
    } else {
        vec![(cell.layer, cell.position)]
    }
}

fn train_das(args: TrainDas) -> Result<()> {
    let c = &args.cell;
    let model = load_model(&c.model)?;
    let set = pronoun_set(&model, &c.data)?;
    let eval = set.eval_pairs(args.eval_pairs, c.common.seed);
    let das = |layer, pos| DasConfig {
        k: args.k,
        steps: args.steps,
        seed: c.common.seed,
        ..DasConfig::new(layer, pos)
    };
    if !c.grid {
        let cfg = das(c.layer, c.position);
        let pv = localize::train_das(&model, &set, &cfg)?;
        let iia = localize::iia(&pv, &set, &eval, cfg.pos)?;
        save_bundle(&pv, &c.common.out, false)?;
        println!("IIA {iia:.4} at layer {} position {}; bundle in {}", cfg.layer, cfg.pos, c.common.out.display());
        return Ok(());
    }
    let cells = cells(&model, &set, c);
    let values = par::try_map(exec(c.sequential), &cells, |&(layer, pos)| {
        let pv = localize::train_das(&model, &set, &das(layer, pos))?;
        localize::iia(&pv, &set, &eval, pos)
    })?;
    write_grid(&c.common.out, &cells, &values, METRIC_IIA)
}

fn train_probe(args: TrainProbe) -> Result<()> {
    let c = &args.cell;
    let model = load_model(&c.model)?;
    let set = pronoun_set(&model, &c.data)?;
    let cells = cells(&model, &set, c);
    let values = par::try_map(exec(c.sequential), &cells, |&(layer, pos)| {
        localize::probe_cell(&model, &set, layer, pos, c.common.seed, args.shuffle_labels)
    })?;
    if let [acc] = values[..] {
        println!("probe accuracy {acc:.4} at layer {} position {}", c.layer, c.position);
    }
    write_grid(&c.common.out, &cells, &values, METRIC_PROBE)
}

fn write_grid(out: &Path, cells: &[(usize, usize)], values: &[f64], metric: &'static str) -> Result<()> {
    let rows: Vec<GridRow> = cells
        .iter()
        .zip(values)
        .map(|(&(layer, pos), &value)| GridRow { layer, pos, metric, value })
        .collect();
    csv::write(out, &csv::grid_csv(&rows))?;
    println!("{} {metric} cells to {}", rows.len(), out.display());
    Ok(())
}

fn steer(args: Steer) -> Result<()> {
    let model = load_model(&args.model)?;
    let vocab = model.vocab().clone();
    let mut prompt = vec![vocab.bos()];
    prompt.extend(vocab.encode(&args.prompt)?);
    let token = vocab.id(&args.steer_token)?;
    let pv = steer::steering_model(&model)?;
    let report = steer::steer(&pv, &prompt, token, args.coefficient, args.steps)?;
    let doc = json!({
        "prompt": vocab.decode(&report.prompt),
        "steer_token": args.steer_token,
        "coefficient": args.coefficient,
        "original": vocab.decode(&report.original),
        "steered": vocab.decode(&report.steered),
        "original_logit": report.original_logit,
        "steered_logit": report.steered_logit,
        "logit_shift": report.logit_shift(),
    });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    csv::write(&args.common.out, &text)?;
    println!("original: {}", doc["original"].as_str().unwrap_or_default());
    println!("steered:  {}", doc["steered"].as_str().unwrap_or_default());
    println!("logit shift {:+.4}", report.logit_shift());
    Ok(())
}

fn validate(args: Validate) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = IntervenableConfig::parse_str(&text)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    for spec in &mut config.interventions {
        if let Some(ConstantSource::Blob(name)) = &spec.constant_source {
            let path = base.join(name);
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            spec.constant_source = Some(ConstantSource::Values(blob::decode(&bytes)?.to_f64_vec()));
        }
    }
    let schema = checkpoint::load_schema(&args.model)?;
    let model = Model::build(schema, 0)?;
    let pv = IntervenableModel::wrap_with(model, config, Registry::new(), 0)?;
    println!("valid: {} intervention(s), {} mode", pv.config().len(), pv.config().mode.name());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::TrainModel(a) => train_model(a),
        Command::Trace(a) => trace(a),
        Command::TrainDas(a) => train_das(a),
        Command::TrainProbe(a) => train_probe(a),
        Command::Steer(a) => steer(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
