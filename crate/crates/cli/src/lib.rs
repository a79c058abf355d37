//! Command-line driver: data synthesis, training, evaluation, the ablation
//! grid and the feature embedding dump.

pub mod config;
pub mod error;
pub mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protocomp::dataset::{build_split, load_split_part, pair_dir_name, save_split, CompletionPair, Split};
use protocomp::embedding::{embed, to_csv};
use protocomp::geometry::xyz;
use protocomp::training::{evaluate, evaluate_with, fingerprint, inference, train, EvalReport, TrainConfig, TrainState};
use serde::Serialize;
use serde_json::Value;

pub use config::Config;
pub use error::CliError;
pub use manifest::{DirLock, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "protocomp", version, about = "Prototype-memory point-cloud completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat JSON configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for per-sample parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run every per-sample loop sequentially.
    #[arg(long)]
    pub strict_deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateFlag {
    None,
    NoPm,
    NoDe,
    NoPmNoDe,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes and write train/val/test pair directories.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a synthesized data directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Switch off components for an ablation run.
        #[arg(long, value_enum, default_value = "none")]
        ablate: AblateFlag,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Decode the partial descriptor without memory retrieval.
        #[arg(long)]
        no_pm: bool,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
        /// Write each de-normalized prediction joined with its context.
        #[arg(long)]
        dump_predictions: bool,
    },
    /// Train and evaluate the three memory/encoder configurations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Project partial descriptors and prototypes to 2D.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Embed { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Embed { .. } => "embed",
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    protocomp::Error::io(path, e).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Loads the configuration and applies the command-line seed.
pub fn resolve_config(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_part(data: &Path, name: &str) -> Result<Vec<CompletionPair>, CliError> {
    let pairs = load_split_part(data, name)?;
    if pairs.is_empty() {
        return Err(CliError::Data(format!("split `{name}` under {} is empty", data.display())));
    }
    Ok(pairs)
}

/// JSON-lines writer for training logs.
pub struct JsonLines(BufWriter<File>);

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        Ok(Self(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?)))
    }

    pub fn write(&mut self, v: &Value) -> protocomp::Result<()> {
        let map = |e: std::io::Error| protocomp::Error::io("training log", e);
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n").map_err(map)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.0.flush().map_err(|e| io_err(Path::new("training log"), e))
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub use_pm: bool,
    pub use_de: bool,
    pub seeds: Vec<u64>,
    /// Mean test CD (x1e-4) of each seed's best-validation model.
    pub cd_e4: Vec<f64>,
    pub median_cd_e4: f64,
    pub duration_secs: f64,
}

/// Table rows in order: (no PM, no DE), (PM, no DE), (PM, DE).
pub const ABLATION_ROWS: [(bool, bool); 3] = [(false, false), (true, false), (true, true)];

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains from scratch and evaluates the best-validation snapshot on `split.test`.
pub fn train_and_test(
    cfg: &TrainConfig,
    split: &Split,
    parallel: bool,
    log: &mut dyn FnMut(&Value) -> protocomp::Result<()>,
) -> Result<(TrainState, EvalReport), CliError> {
    let state = TrainState::init(cfg, &split.train, parallel)?;
    let outcome = train(state, &split.train, &split.val, parallel, log)?;
    let report = evaluate(&outcome.best.store, &outcome.best.bank, &split.test, cfg.use_pm, &fingerprint(cfg)?, parallel)?;
    Ok((outcome.best, report))
}

/// Runs every ablation row over `seeds`. `log` receives each run's
/// training records together with its row index and seed.
pub fn run_ablation(
    base: &TrainConfig,
    seeds: &[u64],
    split: &Split,
    parallel: bool,
    log: &mut dyn FnMut(usize, u64, &Value) -> protocomp::Result<()>,
) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    for (row, &(use_pm, use_de)) in ABLATION_ROWS.iter().enumerate() {
        let start = Instant::now();
        let mut cds = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { use_pm, use_de, seed, ..base.clone() };
            let (_, report) = train_and_test(&cfg, split, parallel, &mut |v| log(row, seed, v))?;
            cds.push(report.mean_cd_e4);
        }
        rows.push(AblationRow {
            use_pm,
            use_de,
            seeds: seeds.to_vec(),
            median_cd_e4: median(&cds),
            cd_e4: cds,
            duration_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "−"
    }
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("| PM | DE | CD-L2 (x1e-4, median) | per seed |\n|----|----|-----------------------|----------|\n");
    for r in rows {
        let per: Vec<String> = r.cd_e4.iter().map(|v| format!("{v:.2}")).collect();
        out.push_str(&format!("| {} | {} | {:.2} | {} |\n", mark(r.use_pm), mark(r.use_de), r.median_cd_e4, per.join(" ")));
    }
    out
}

fn row_dir_name(use_pm: bool, use_de: bool) -> String {
    format!("{}_{}", if use_pm { "pm" } else { "no_pm" }, if use_de { "de" } else { "no_de" })
}

struct Outputs {
    inputs: Vec<String>,
    outputs: Vec<String>,
    seeds: Vec<u64>,
}

/// Runs a parsed command line; `args` is recorded in the manifest.
pub fn run(cli: &Cli, args: &[String]) -> Result<(), CliError> {
    let start = Instant::now();
    let common = cli.command.common();
    let cfg = resolve_config(common)?;
    let parallel = !common.strict_deterministic;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        // a second command in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = &common.out;
    let _lock = DirLock::acquire(out)?;
    let produced = match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg, out)?,
        Command::Train { data, ablate, resume, .. } => cmd_train(&cfg, data, out, *ablate, resume.as_deref(), parallel)?,
        Command::Eval { checkpoint, data, no_pm, oracle, dump_predictions, common } => cmd_eval(
            &cfg,
            common.config.is_some(),
            checkpoint.as_deref(),
            data,
            out,
            *no_pm,
            *oracle,
            *dump_predictions,
            parallel,
        )?,
        Command::Ablate { data, .. } => cmd_ablate(&cfg, data, out, args, parallel)?,
        Command::Embed { checkpoint, data, .. } => cmd_embed(checkpoint, data, out)?,
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: args.to_vec(),
        seed: cfg.seed,
        config: cfg,
        seeds: produced.seeds,
        version: manifest::version().to_string(),
        inputs: produced.inputs,
        outputs: produced.outputs,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(out)
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_synth(cfg: &Config, out: &Path) -> Result<Outputs, CliError> {
    let [a, b, c] = cfg.ratios;
    let split = build_split(&cfg.scene_spec(), cfg.n_scenes, (a, b, c), cfg.pair_options(), cfg.seed)?;
    save_split(out, &split)?;
    println!("wrote {} train, {} val, {} test pairs to {}", split.train.len(), split.val.len(), split.test.len(), out.display());
    Ok(Outputs {
        inputs: vec![],
        outputs: ["train", "val", "test"].iter().map(|s| path_string(&out.join(s))).collect(),
        seeds: vec![cfg.seed],
    })
}

fn cmd_train(
    cfg: &Config,
    data: &Path,
    out: &Path,
    ablate: AblateFlag,
    resume: Option<&Path>,
    parallel: bool,
) -> Result<Outputs, CliError> {
    let mut tc = cfg.train_config();
    match ablate {
        AblateFlag::None => {}
        AblateFlag::NoPm => tc.use_pm = false,
        AblateFlag::NoDe => tc.use_de = false,
        AblateFlag::NoPmNoDe => {
            tc.use_pm = false;
            tc.use_de = false;
        }
    }
    let train_pairs = load_part(data, "train")?;
    let val_pairs = load_part(data, "val")?;
    let mut inputs = vec![path_string(data)];
    let state = match resume {
        Some(path) => {
            let mut s = TrainState::load(path)?;
            s.check_compatible(&tc)?;
            if s.config.use_pm != tc.use_pm {
                return Err(protocomp::Error::CheckpointMismatch {
                    field: "use_pm".into(),
                    expected: tc.use_pm.to_string(),
                    found: s.config.use_pm.to_string(),
                }
                .into());
            }
            s.adam.config = tc.adam();
            s.bank_adam.config = tc.adam();
            s.config = tc.clone();
            inputs.push(path_string(path));
            s
        }
        None => TrainState::init(&tc, &train_pairs, parallel)?,
    };
    let log_path = out.join("train_log.jsonl");
    let mut log = JsonLines::create(&log_path)?;
    let outcome = train(state, &train_pairs, &val_pairs, parallel, &mut |v| log.write(v))?;
    log.finish()?;
    let best = out.join("best.ckpt");
    let last = out.join("final.ckpt");
    outcome.best.save(&best)?;
    outcome.state.save(&last)?;
    println!(
        "trained {} epochs ({} steps); best val CD-L2 {} x1e-4",
        outcome.state.epoch,
        outcome.state.step,
        outcome.best_val_cd_e4.map_or("n/a".to_string(), |v| format!("{v:.3}"))
    );
    Ok(Outputs { inputs, outputs: [log_path, best, last].iter().map(|p| path_string(p)).collect(), seeds: vec![tc.seed] })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &Config,
    explicit_config: bool,
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    no_pm: bool,
    oracle: bool,
    dump_predictions: bool,
    parallel: bool,
) -> Result<Outputs, CliError> {
    let test = load_part(data, "test")?;
    let mut inputs = vec![path_string(data)];
    let mut outputs = Vec::new();
    let report_path = out.join("eval_report.json");
    let (report, state) = if oracle {
        let fp = fingerprint(cfg)?;
        (evaluate_with(&test, false, &fp, parallel, |p| Ok(p.gt.clone()))?, None)
    } else {
        let path = checkpoint.ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
        inputs.push(path_string(path));
        let state = TrainState::load(path)?;
        if explicit_config {
            state.check_compatible(&cfg.train_config())?;
        }
        let use_pm = state.config.use_pm && !no_pm;
        let fp = fingerprint(&state.config)?;
        (evaluate(&state.store, &state.bank, &test, use_pm, &fp, parallel)?, Some(state))
    };
    write_json(&report_path, &report)?;
    outputs.push(path_string(&report_path));
    if dump_predictions {
        let dir = out.join("predictions");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for pair in &test {
            let pred = match &state {
                Some(s) => inference(&s.store, &s.bank, &pair.partial, report.use_pm)?,
                None => pair.gt.clone(),
            };
            let scene = pair.stats.invert(&pred).concat(&pair.context);
            let path = dir.join(format!("{}.xyz", pair_dir_name(pair)));
            xyz::write(&path, &scene)?;
        }
        outputs.push(path_string(&dir));
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outputs { inputs, outputs, seeds: vec![] })
}

fn cmd_ablate(cfg: &Config, data: &Path, out: &Path, args: &[String], parallel: bool) -> Result<Outputs, CliError> {
    let split = Split { train: load_part(data, "train")?, val: load_part(data, "val")?, test: load_part(data, "test")? };
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|s| cfg.seed + s).collect();
    let base = cfg.train_config();
    let mut logs: Vec<Vec<JsonLines>> = Vec::new();
    for &(pm, de) in &ABLATION_ROWS {
        let dir = out.join(row_dir_name(pm, de));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        logs.push(seeds.iter().map(|s| JsonLines::create(&dir.join(format!("seed_{s}_log.jsonl")))).collect::<Result<_, _>>()?);
    }
    let rows = run_ablation(&base, &seeds, &split, parallel, &mut |row, seed, v| {
        let k = seeds.iter().position(|&s| s == seed).unwrap_or(0);
        logs[row][k].write(v)
    })?;
    for row_logs in logs {
        for w in row_logs {
            w.finish()?;
        }
    }
    let mut outputs = Vec::new();
    for r in &rows {
        let dir = out.join(row_dir_name(r.use_pm, r.use_de));
        write_json(&dir.join("row.json"), r)?;
        let mut row_cfg = cfg.clone();
        row_cfg.use_pm = r.use_pm;
        row_cfg.use_de = r.use_de;
        RunManifest {
            command: "ablate".into(),
            args: args.to_vec(),
            config: row_cfg,
            seed: cfg.seed,
            seeds: r.seeds.clone(),
            version: manifest::version().to_string(),
            inputs: vec![path_string(data)],
            outputs: vec![path_string(&dir.join("row.json"))],
            duration_secs: r.duration_secs,
        }
        .write(&dir)?;
        outputs.push(path_string(&dir));
    }
    let table = format_ablation_table(&rows);
    let table_path = out.join("ablation.json");
    write_json(&table_path, &rows)?;
    fs::write(out.join("ablation.md"), &table).map_err(|e| io_err(&out.join("ablation.md"), e))?;
    outputs.push(path_string(&table_path));
    print!("{table}");
    Ok(Outputs { inputs: vec![path_string(data)], outputs, seeds })
}

fn cmd_embed(checkpoint: &Path, data: &Path, out: &Path) -> Result<Outputs, CliError> {
    let test = load_part(data, "test")?;
    let state = TrainState::load(checkpoint)?;
    let embedding = embed(&state.store, &state.bank, &test)?;
    let csv_path = out.join("embedding.csv");
    fs::write(&csv_path, to_csv(&embedding.rows)).map_err(|e| io_err(&csv_path, e))?;
    let summary_path = out.join("embedding.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "rho": embedding.rho,
            "partials": test.len(),
            "prototypes": state.bank.len(),
        }),
    )?;
    println!("rho = {:.4} (prototype spread / partial spread)", embedding.rho);
    Ok(Outputs {
        inputs: vec![path_string(checkpoint), path_string(data)],
        outputs: vec![path_string(&csv_path), path_string(&summary_path)],
        seeds: vec![],
    })
}
