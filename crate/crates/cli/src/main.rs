use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use mbgr_core::data::{business_shares, generate, read_dataset, write_dataset, SyntheticConfig};
use mbgr_core::eval::{embedding_separation, save_metrics_csv, write_coords_csv, write_metrics_csv, SeparationMode};
use mbgr_core::loss::LossConfig;
use mbgr_core::model::Variant;
use mbgr_core::tokenizer::{fit_residual_quantizer, read_item_vectors, write_item_vectors};
use mbgr_core::trainer::{
    evaluate, grad_check_config, load_checkpoint, model_grad_check, prepare, run, run_dir, runs_root,
    save_checkpoint, sweep_configs, write_curve_csv, Prepared, RunConfig, RunReport, SweepGrid,
};
use mbgr_core::Codebook;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error
  3  missing file
  4  invalid config
  5  malformed data
  6  numeric failure (non-finite values, failed gradient check)

Errors are printed as one line: `error[<code>] <kind>: <message>`.
Run directories live under $MBGR_RUNS_DIR (default ./runs), one per config hash and seed.";

const EVENTS_FILE: &str = "events.jsonl";
const ITEMS_FILE: &str = "items.jsonl";

#[derive(Parser)]
#[command(name = "mbgr", version, about = "Multi-business generative recommendation experiments", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set loss.alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding events.jsonl and items.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Codebook from `fit-tokenizer`; fitted on the fly when absent.
    #[arg(long)]
    codebook: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-business dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the residual-quantizer codebook on item vectors.
    FitTokenizer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one configuration.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint on the held-out cases.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Metrics CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant with the same seed and data.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated subset of full,no-ldr,no-mbp,no-bid,ntp-baseline.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Run a hyperparameter grid: alpha, experts or weights.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        grid: String,
        /// Train grid points on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Project item representations to 2-D and score business separation.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// `bid` or `sum-pool`.
        #[arg(long, default_value = "bid")]
        mode: String,
        /// Coordinates CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole-model finite-difference gradient check on a tiny configuration.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug, Clone, Copy)]
enum Kind {
    Other = 1,
    MissingFile = 3,
    InvalidConfig = 4,
    Data = 5,
    Numeric = 6,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Other => "other",
            Kind::MissingFile => "missing-file",
            Kind::InvalidConfig => "invalid-config",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
struct Tagged(Kind, String);

impl std::fmt::Display for Tagged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Tagged {}

fn fail(kind: Kind, msg: impl Into<String>) -> anyhow::Error {
    Tagged(kind, msg.into()).into()
}

fn classify(err: &anyhow::Error) -> Kind {
    use mbgr_core::Error as E;
    for cause in err.chain() {
        if let Some(Tagged(kind, _)) = cause.downcast_ref::<Tagged>() {
            return *kind;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidConfig(_) => Kind::InvalidConfig,
                E::Parse { .. } | E::Json(_) | E::UnknownBusiness(_) => Kind::Data,
                E::NonFinite { .. } | E::ZeroNorm { .. } | E::Degenerate(_) => Kind::Numeric,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Kind::MissingFile,
                _ => Kind::Other,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return Kind::MissingFile;
            }
        }
    }
    Kind::Other
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = classify(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{}] {}: {msg}", kind as u8, kind.name());
            ExitCode::from(kind as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::FitTokenizer { config, data, out } => fit_tokenizer(&config, &data, &out),
        Command::Train { config, data } => train(&config, &data),
        Command::Eval { checkpoint, data, out } => eval(&checkpoint, &data, out.as_deref()),
        Command::Ablate { config, data, variants } => ablate(&config, &data, &variants),
        Command::Sweep {
            config,
            data,
            grid,
            parallel,
        } => sweep(&config, &data, &grid, parallel),
        Command::Viz {
            checkpoint,
            data,
            mode,
            out,
        } => viz(&checkpoint, &data, &mode, out.as_deref()),
        Command::GradCheck { tolerance, seed } => grad_check(tolerance, seed),
    }
}

// Config loading.

fn load_config<T: Serialize + DeserializeOwned + Default>(args: &ConfigArgs) -> Result<T> {
    let mut value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| fail(Kind::InvalidConfig, format!("{}: {e}", path.display())))?
        }
        None => serde_json::to_value(T::default())?,
    };
    for o in &args.overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| fail(Kind::InvalidConfig, e.to_string()))
}

/// Sets `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| fail(Kind::InvalidConfig, format!("override `{spec}` is not PATH=VALUE")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => bail!(fail(Kind::InvalidConfig, format!("`{path}`: `{}` is not an object", keys[..i].join(".")))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg: RunConfig = load_config(args)?;
    cfg.validate()?;
    Ok(cfg)
}

// Data loading.

struct Loaded {
    prepared: Prepared,
    codebook: Codebook,
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> Result<Loaded> {
    let events = args.data.join(EVENTS_FILE);
    let items_path = args.data.join(ITEMS_FILE);
    let users = read_dataset(&events).with_context(|| format!("reading {}", events.display()))?;
    let items = read_item_vectors(&items_path).with_context(|| format!("reading {}", items_path.display()))?;
    let codebook = match &args.codebook {
        Some(p) => Codebook::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let vectors: Vec<Vec<f64>> = items.iter().map(|i| i.vec.clone()).collect();
            fit_residual_quantizer(&vectors, cfg.model.k_sid, cfg.model.vocab, cfg.tokenizer.seed)?
        }
    };
    let prepared = prepare(&users, &items, &codebook, cfg.model.max_len)?;
    info!(
        "{} users, {} items, {} test cases",
        users.len(),
        items.len(),
        prepared.split.test.len()
    );
    Ok(Loaded { prepared, codebook })
}

// Commands.

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg: SyntheticConfig = load_config(args)?;
    let data = generate(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(&out.join(EVENTS_FILE), &data.users)?;
    write_item_vectors(&out.join(ITEMS_FILE), &data.items)?;
    std::fs::write(out.join("data_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let events: usize = data.users.iter().map(|u| u.events.len()).sum();
    let shares = business_shares(&data.users, cfg.businesses());
    let shares: Vec<String> = shares.iter().map(|s| format!("{:.4}", s)).collect();
    println!(
        "{} users, {events} events, {} items, shares {}",
        data.users.len(),
        data.items.len(),
        shares.join(",")
    );
    Ok(())
}

fn fit_tokenizer(args: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = run_config(args)?;
    let path = data.join(ITEMS_FILE);
    let items = read_item_vectors(&path).with_context(|| format!("reading {}", path.display()))?;
    let vectors: Vec<Vec<f64>> = items.iter().map(|i| i.vec.clone()).collect();
    let cb = fit_residual_quantizer(&vectors, cfg.model.k_sid, cfg.model.vocab, cfg.tokenizer.seed)?;
    cb.save(out)?;
    println!("{} levels x {} codewords -> {}", cb.levels, cb.vocab, out.display());
    Ok(())
}

/// Writes config, checkpoint, curve and metrics into the run directory.
fn save_run(report: &RunReport, codebook: &Codebook) -> Result<PathBuf> {
    let dir = run_dir(&runs_root(), &report.config);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&report.config)?)?;
    codebook.save(&dir.join("codebook.json"))?;
    save_checkpoint(&dir.join("checkpoint.json"), &report.config, &report.model)?;
    let mut curve = std::io::BufWriter::new(std::fs::File::create(dir.join("curve.csv"))?);
    write_curve_csv(&mut curve, &report.curve)?;
    curve.flush()?;
    save_metrics_csv(&dir.join("metrics.csv"), &report.metric_rows())?;
    Ok(dir)
}

fn print_metrics(reports: &[RunReport]) -> Result<()> {
    let rows: Vec<_> = reports.iter().flat_map(|r| r.metric_rows()).collect();
    write_metrics_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}

fn train(args: &ConfigArgs, data: &DataArgs) -> Result<()> {
    let cfg = run_config(args)?;
    let loaded = load_data(data, &cfg)?;
    let report = run(&cfg, cfg.variant.name(), &loaded.prepared, &loaded.codebook)?;
    let dir = save_run(&report, &loaded.codebook)?;
    print_metrics(std::slice::from_ref(&report))?;
    eprintln!("run directory: {}", dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let (cfg, model) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = DataArgs {
        data: data.data.clone(),
        codebook: data
            .codebook
            .clone()
            .or_else(|| checkpoint.parent().map(|p| p.join("codebook.json")).filter(|p| p.exists())),
    };
    let loaded = load_data(&data, &cfg)?;
    let ev = evaluate(&model, &loaded.prepared, &cfg)?;
    let rows = mbgr_core::eval::hit_rate_rows(&cfg.run_id(), cfg.variant.name(), &ev.hit_rates);
    match out {
        Some(p) => save_metrics_csv(p, &rows)?,
        None => write_metrics_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn ablate(args: &ConfigArgs, data: &DataArgs, names: &[String]) -> Result<()> {
    let cfg = run_config(args)?;
    let variants = if names.is_empty() {
        Variant::ALL.to_vec()
    } else {
        names.iter().map(|n| Variant::parse(n)).collect::<mbgr_core::Result<Vec<_>>>()?
    };
    let loaded = load_data(data, &cfg)?;
    let mut reports = Vec::new();
    for v in variants {
        let report = run(&cfg.with_variant(v), v.name(), &loaded.prepared, &loaded.codebook)?;
        let dir = save_run(&report, &loaded.codebook)?;
        info!("{v}: {}", dir.display());
        reports.push(report);
    }
    print_metrics(&reports)
}

fn sweep(args: &ConfigArgs, data: &DataArgs, grid: &str, parallel: bool) -> Result<()> {
    let cfg = run_config(args)?;
    let grid = SweepGrid::parse(grid)?;
    let loaded = load_data(data, &cfg)?;
    let shares = business_shares(&loaded.prepared.split.train, loaded.prepared.businesses);
    let points = sweep_configs(&cfg, grid, &shares)?;
    let train_point = |(label, c): &(String, RunConfig)| run(c, label, &loaded.prepared, &loaded.codebook);
    let reports: Vec<RunReport> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = points.iter().map(|p| s.spawn(move || train_point(p))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect::<mbgr_core::Result<_>>()
        })?
    } else {
        points.iter().map(train_point).collect::<mbgr_core::Result<_>>()?
    };
    for r in &reports {
        save_run(r, &loaded.codebook)?;
    }
    print_metrics(&reports)
}

fn viz(checkpoint: &Path, data: &DataArgs, mode: &str, out: Option<&Path>) -> Result<()> {
    let mode = match mode {
        "bid" => SeparationMode::Bid,
        "sum-pool" => SeparationMode::SumPool,
        other => bail!(fail(Kind::InvalidConfig, format!("unknown mode `{other}`, expected bid or sum-pool"))),
    };
    let (cfg, model) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = DataArgs {
        data: data.data.clone(),
        codebook: data
            .codebook
            .clone()
            .or_else(|| checkpoint.parent().map(|p| p.join("codebook.json")).filter(|p| p.exists())),
    };
    let loaded = load_data(&data, &cfg)?;
    let p = &loaded.prepared;
    let items: Vec<u32> = (0..p.catalog.len() as u32).collect();
    let labels: Vec<u16> = items
        .iter()
        .map(|&i| p.catalog.business_of(i).ok_or_else(|| fail(Kind::Data, format!("item {i} has no business"))))
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = items.iter().map(|&i| (p.sids[i as usize].clone(), labels[i as usize])).collect();
    let reps = model.item_representations(&pairs, mode)?;
    let sep = embedding_separation(&reps, &labels)?;
    match out {
        Some(path) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_coords_csv(&mut w, &items, &labels, &sep.coords)?;
            w.flush()?;
        }
        None => write_coords_csv(std::io::stdout().lock(), &items, &labels, &sep.coords)?,
    }
    let per: Vec<String> = sep.per_business.iter().map(|s| format!("{s:.4}")).collect();
    eprintln!("silhouette {:.4} per business {}", sep.silhouette, per.join(","));
    Ok(())
}

fn grad_check(tolerance: f64, seed: u64) -> Result<()> {
    let cfg = grad_check_config();
    let mut failed = Vec::new();
    for v in Variant::ALL {
        let report = model_grad_check(&cfg, v, &LossConfig::default(), seed, tolerance)?;
        let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
        let verdict = if report.pass { "pass" } else { "FAIL" };
        println!("{v}: {verdict} max relative error {:.3e} ({worst})", report.max_rel_err);
        if !report.pass {
            failed.push(v.name());
        }
    }
    if !failed.is_empty() {
        bail!(fail(Kind::Numeric, format!("gradient check failed for {}", failed.join(","))));
    }
    println!("pass");
    Ok(())
}
