use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use recdiff::datapipe::{load_interactions, sha256_hex, Dataset, DatasetManifest, InputFormat, InteractionLog};
use recdiff::evaluation::{
    category_diversity, evaluate, linear_probe, summarize, CategoryTable, Diversity, EvalReport, MeanStd, ProbeResult,
};
use recdiff::inference::{read_histories, write_recommendations, Recommender};
use recdiff::model::ModelParams;
use recdiff::synthetic::{generate, SyntheticConfig};
use recdiff::trainer::{fit, load_checkpoint, save_checkpoint, FitResult, TrainConfig};
use recdiff::{Error, Execution};
use serde::{Deserialize, Serialize};

use crate::config::{parse_enum, RunConfig};
use crate::Failure;

type Result<T> = std::result::Result<T, Failure>;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const DATASET_FILE: &str = "dataset.json";
pub const CATEGORIES_FILE: &str = "categories.tsv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Where run directories go when `--out` is not given.
pub struct Output {
    pub root: PathBuf,
}

impl Output {
    /// `out` if given, else `<root>/<command>-<timestamp>` (suffixed on
    /// collision). The directory is created.
    pub fn run_dir(&self, command: &str, out: Option<&Path>) -> Result<PathBuf> {
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = self.root.join(format!("{command}-{stamp}"));
                let mut dir = base.clone();
                let mut k = 1;
                while dir.exists() {
                    dir = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                dir
            }
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value).map_err(Error::from)? + "\n"))
}

/// `dataset.json` of a prepared directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub manifest: DatasetManifest,
    pub split_seed: u64,
}

/// A prepared dataset as loaded back from disk.
pub struct Prepared {
    pub dir: PathBuf,
    pub info: DatasetInfo,
    pub log: InteractionLog,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let info: DatasetInfo = serde_json::from_str(&text).map_err(Error::from)?;
        let log = load_interactions(&dir.join(INTERACTIONS_FILE), InputFormat::Tsv)?;
        if log.items.hash() != info.manifest.item_vocab_hash {
            return Err(Failure::Mismatch(format!(
                "{}: item vocabulary does not match {DATASET_FILE}",
                dir.display()
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            info,
            log,
        })
    }

    pub fn dataset(&self, max_len: usize) -> Result<Dataset> {
        Ok(Dataset::new(self.log.clone(), max_len, self.info.split_seed)?)
    }
}

/// Writes the canonical TSV and reloads it so item indices come from the
/// file every later command reads.
fn write_prepared(dir: &Path, log: &InteractionLog, source: &Path, format: InputFormat, max_len: usize, seed: u64) -> Result<Prepared> {
    let path = dir.join(INTERACTIONS_FILE);
    log.write_tsv(&path)?;
    let log = load_interactions(&path, InputFormat::Tsv)?;
    let info = DatasetInfo {
        manifest: DatasetManifest::new(&log, source, format, max_len),
        split_seed: seed,
    };
    // fail early if the split is impossible
    Dataset::new(log.clone(), max_len, seed)?;
    write_json(&dir.join(DATASET_FILE), &info)?;
    Ok(Prepared {
        dir: dir.to_path_buf(),
        info,
        log,
    })
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Raw interaction file.
    #[arg(long)]
    pub input: PathBuf,
    /// `tsv`, `ml10m` or `yoochoose`.
    #[arg(long, default_value = "tsv", value_parser = parse_enum::<InputFormat>)]
    pub format: InputFormat,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    /// Seed of the user split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn prepare(args: &PrepareArgs, output: &Output) -> Result<()> {
    let log = load_interactions(&args.input, args.format)?;
    let dir = output.run_dir("prepare", args.out.as_deref())?;
    let prepared = write_prepared(&dir, &log, &args.input, args.format, args.max_len, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&prepared.info.manifest).map_err(Error::from)?);
    println!("prepared dataset: {}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    pub users: usize,
    #[arg(long, default_value_t = 2000)]
    pub items: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 10)]
    pub min_events: usize,
    #[arg(long, default_value_t = 30)]
    pub max_events: usize,
    #[arg(long, default_value_t = 0.8)]
    pub persistence: f64,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes a prepared synthetic dataset plus `categories.tsv`.
pub fn synth(args: &SynthArgs, output: &Output) -> Result<()> {
    let cfg = SyntheticConfig {
        users: args.users,
        items: args.items,
        clusters: args.clusters,
        length: (args.min_events, args.max_events),
        persistence: args.persistence,
        ..SyntheticConfig::default()
    };
    let data = generate(&cfg, args.seed)?;
    let dir = output.run_dir("synth", args.out.as_deref())?;
    let prepared = write_prepared(&dir, &data.log, Path::new("synthetic"), InputFormat::Tsv, args.max_len, args.seed)?;
    let path = dir.join(CATEGORIES_FILE);
    let mut w = create(&path)?;
    for i in 0..data.log.items.len() {
        if let Some(label) = data.categories.primary(i) {
            writeln!(w, "{}\t{label}", data.log.items.name(i)).map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("{}", serde_json::to_string_pretty(&prepared.info.manifest.counts).map_err(Error::from)?);
    println!("synthetic dataset: {}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat TOML file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfig,
}

fn merged(config: Option<&Path>, flags: &RunConfig) -> Result<RunConfig> {
    let base = match config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    Ok(base.overlay(flags))
}

fn require_data(run: &RunConfig) -> Result<&Path> {
    run.data
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config file".into()).into())
}

/// Trains into `dir`: resolved config, JSON-lines step log, loss curves,
/// checkpoint.
fn train_into(dir: &Path, run: &RunConfig, prepared: &Prepared) -> Result<(TrainConfig, FitResult)> {
    let cfg = run.train_config(prepared.info.manifest.max_len)?;
    write_file(&dir.join(CONFIG_FILE), &run.resolved(&cfg).to_toml())?;
    let dataset = prepared.dataset(cfg.max_len)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let result = fit(&dataset, &cfg, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    write_curves(dir, &result)?;
    save_checkpoint(
        &dir.join(CHECKPOINT_DIR),
        &result.params,
        &cfg.schedule,
        serde_json::to_value(&cfg).map_err(Error::from)?,
        Some(prepared.info.manifest.item_vocab_hash.clone()),
    )?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "best_epoch": result.best_epoch,
            "best_valid_recall@20": result.best_valid_recall,
            "stopped_early": result.stopped_early,
            "epochs": result.epochs,
        }),
    )?;
    Ok((cfg, result))
}

/// `loss_curve.csv` per step and `epoch_losses.csv` per epoch.
fn write_curves(dir: &Path, result: &FitResult) -> Result<()> {
    let path = dir.join("loss_curve.csv");
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "step,epoch,gem,recon,ssm,total,grad_norm,clipped").map_err(io)?;
    let mut epoch_of_step = Vec::new();
    for e in &result.epochs {
        epoch_of_step.extend(std::iter::repeat_n(e.epoch, e.steps));
    }
    for (i, s) in result.steps.iter().enumerate() {
        let epoch = epoch_of_step.get(i).copied().unwrap_or(0);
        writeln!(
            w,
            "{},{epoch},{},{},{},{},{},{}",
            s.step, s.gem, s.recon, s.ssm, s.total, s.grad_norm, s.clipped
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = dir.join("epoch_losses.csv");
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "epoch,gem,recon,ssm,total,valid_recall@20").map_err(io)?;
    for e in &result.epochs {
        let valid = e.valid_recall_at_20.map_or(String::new(), |v| v.to_string());
        writeln!(w, "{},{},{},{},{},{valid}", e.epoch, e.gem, e.recon, e.ssm, e.total).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn train(args: &TrainArgs, output: &Output) -> Result<()> {
    let run = merged(args.config.as_deref(), &args.run)?;
    let prepared = Prepared::load(require_data(&run)?)?;
    // resolve before creating anything
    run.train_config(prepared.info.manifest.max_len)?;
    let dir = output.run_dir("train", args.out.as_deref())?;
    let (_, result) = train_into(&dir, &run, &prepared)?;
    if let Some(last) = result.epochs.last() {
        println!(
            "epochs {} best {} valid recall@20 {:?} final total loss {:.6}",
            result.epochs.len(),
            result.best_epoch,
            result.best_valid_recall,
            last.total
        );
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

/// A checkpoint with the dataset it was trained on.
struct Loaded {
    prepared: Prepared,
    cfg: TrainConfig,
    params: ModelParams,
    schedule: recdiff::diffusion::NoiseSchedule,
    checkpoint_hash: String,
}

#[derive(Args, Debug, Clone)]
pub struct CheckpointArgs {
    /// Checkpoint directory, or a train run directory containing one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared dataset; defaults to the one recorded next to the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl CheckpointArgs {
    fn load(&self) -> Result<Loaded> {
        let dir = if self.checkpoint.join(CHECKPOINT_DIR).is_dir() {
            self.checkpoint.join(CHECKPOINT_DIR)
        } else {
            self.checkpoint.clone()
        };
        let data = match &self.data {
            Some(d) => d.clone(),
            None => {
                let cfg = dir.parent().map(|p| p.join(CONFIG_FILE)).filter(|p| p.is_file());
                let run = cfg.map(|p| RunConfig::read(&p)).transpose()?.unwrap_or_default();
                require_data(&run)?.to_path_buf()
            }
        };
        let prepared = Prepared::load(&data)?;
        let ckpt = load_checkpoint(&dir, Some(&prepared.info.manifest.item_vocab_hash))?;
        if ckpt.vocab_mismatch || ckpt.manifest.model.item_count != prepared.log.items.len() {
            return Err(Failure::Mismatch(format!(
                "checkpoint {} was trained on a different item vocabulary than {}",
                dir.display(),
                data.display()
            )));
        }
        let cfg: TrainConfig = serde_json::from_value(ckpt.manifest.config.clone()).map_err(|e| Error::Checkpoint {
            tensor: "manifest.config".into(),
            message: e.to_string(),
        })?;
        let schedule = ckpt.manifest.schedule.build()?;
        let weights = dir.join(recdiff::trainer::WEIGHTS_FILE);
        let bytes = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        Ok(Loaded {
            prepared,
            cfg,
            params: ckpt.params,
            schedule,
            checkpoint_hash: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Valid,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Metric cutoffs.
    #[arg(long, default_value = "20,50", value_delimiter = ',')]
    pub at: Vec<usize>,
    #[arg(long, default_value = "test", value_parser = parse_enum::<Split>)]
    pub split: Split,
    /// Reverse steps at inference (defaults to the trained T).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Generation seed (defaults to the training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Repeat with consecutive seeds and report mean ± std.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, value_parser = parse_enum::<Execution>)]
    pub execution: Option<Execution>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: &'a str,
    steps: usize,
    seeds: Vec<u64>,
    reports: &'a [EvalReport],
    summary: std::collections::BTreeMap<String, MeanStd>,
}

pub fn eval(args: &EvalArgs, output: &Output) -> Result<()> {
    if args.repeats == 0 {
        return Err(Error::Config("--repeats must be positive".into()).into());
    }
    let loaded = args.source.load()?;
    let mut serve = loaded.cfg.serve_config();
    if let Some(s) = args.steps {
        serve.steps = s;
    }
    let rec = Recommender::new(&loaded.params, &loaded.schedule, serve)?;
    let dataset = loaded.prepared.dataset(loaded.cfg.max_len)?;
    let (name, cases) = match args.split {
        Split::Valid => ("valid", dataset.valid_cases()),
        Split::Test => ("test", dataset.test_cases()),
    };
    let exec = args.execution.unwrap_or(loaded.cfg.execution);
    let base_seed = args.seed.unwrap_or(loaded.cfg.seed);
    let seeds: Vec<u64> = (0..args.repeats as u64).map(|k| base_seed + k).collect();
    let config_hash = sha256_hex(&serde_json::to_vec(&loaded.cfg).map_err(Error::from)?);
    let mut reports = Vec::new();
    for &seed in &seeds {
        let mut r = evaluate(&rec, &cases, &args.at, seed, exec)?;
        r.config_hash = Some(config_hash.clone());
        r.checkpoint_hash = Some(loaded.checkpoint_hash.clone());
        reports.push(r);
    }
    let dir = output.run_dir("eval", args.out.as_deref())?;
    let summary = summarize(&reports);
    write_json(
        &dir.join("report.json"),
        &EvalOutput {
            split: name,
            steps: serve.steps,
            seeds,
            reports: &reports,
            summary: summary.clone(),
        },
    )?;
    let path = dir.join("per_user.tsv");
    reports[0]
        .write_tsv(create(&path)?, &loaded.prepared.log.users)
        .map_err(|e| Error::io(&path, e))?;
    for (metric, ms) in &summary {
        if args.repeats > 1 {
            println!("{metric}\t{:.6} ± {:.6}", ms.mean, ms.std);
        } else {
            println!("{metric}\t{:.6}", ms.mean);
        }
    }
    println!("users {} skipped {}", reports[0].users, reports[0].skipped);
    println!("run directory: {}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// `user \t item,item,…` per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    /// Reverse steps at inference (defaults to the trained T).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_enum::<Execution>)]
    pub execution: Option<Execution>,
    /// Output TSV; defaults to `recommendations.tsv` in a new run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn recommend(args: &RecommendArgs, output: &Output) -> Result<()> {
    let loaded = args.source.load()?;
    let mut serve = loaded.cfg.serve_config();
    if let Some(s) = args.steps {
        serve.steps = s;
    }
    let rec = Recommender::new(&loaded.params, &loaded.schedule, serve)?;
    let f = File::open(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let requests = read_histories(BufReader::new(f), &args.input, &loaded.prepared.log.items)?;
    let results = rec.recommend_batch(
        &requests,
        args.n,
        args.seed.unwrap_or(loaded.cfg.seed),
        args.execution.unwrap_or(loaded.cfg.execution),
    )?;
    let path = match &args.out {
        Some(p) => p.clone(),
        None => output.run_dir("recommend", None)?.join("recommendations.tsv"),
    };
    let mut w = create(&path)?;
    write_recommendations(&mut w, &requests, &results, &loaded.prepared.log.items)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    println!("{} users, {} steps: {}", requests.len(), serve.steps, path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// `item \t label|label` or `movies.dat`; defaults to the dataset's
    /// `categories.tsv`.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// List length for the category-diversity measurement on test users.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ProbeOutput {
    probe: ProbeResult,
    diversity: Diversity,
    n: usize,
}

pub fn probe(args: &ProbeArgs, output: &Output) -> Result<()> {
    let loaded = args.source.load()?;
    let path = args
        .categories
        .clone()
        .unwrap_or_else(|| loaded.prepared.dir.join(CATEGORIES_FILE));
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let table = CategoryTable::read(BufReader::new(f), &path, &loaded.prepared.log.items)?;
    let probe = linear_probe(&loaded.params.item_embedding, &table, args.epochs, args.lr, args.seed)?;

    let rec = Recommender::new(&loaded.params, &loaded.schedule, loaded.cfg.serve_config())?;
    let cases = loaded.prepared.dataset(loaded.cfg.max_len)?.test_cases();
    let lists = loaded.cfg.execution.map(cases.len(), |i| -> Result<Vec<usize>> {
        let c = &cases[i];
        let eligible = rec.index.len() - c.history.iter().collect::<std::collections::HashSet<_>>().len();
        let mut rng = Recommender::rng(loaded.cfg.seed, c.user);
        Ok(rec.recommend(&c.history, args.n.min(eligible), &mut rng)?.into_iter().map(|s| s.item).collect())
    });
    let lists = lists.into_iter().collect::<Result<Vec<_>>>()?;
    let diversity = category_diversity(&lists, &table);

    let dir = output.run_dir("probe", args.out.as_deref())?;
    println!(
        "probe accuracy {:.4} over {} classes ({} held out); diversity@{} {:.3}",
        probe.accuracy, probe.classes, probe.test, args.n, diversity.mean
    );
    write_json(
        &dir.join("probe.json"),
        &ProbeOutput {
            probe,
            diversity,
            n: args.n,
        },
    )?;
    println!("run directory: {}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Config key to vary, e.g. `T`, `lambda`, `mu`, `interests`, `dim`.
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Train grid points concurrently. Results do not depend on this.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long, default_value = "20,50", value_delimiter = ',')]
    pub at: Vec<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfig,
}

/// One grid value as a config layer; bare words are taken as strings.
fn point_layer(param: &str, value: &str) -> Result<RunConfig> {
    let parse = |v: &str| toml::from_str::<RunConfig>(&format!("{param} = {v}"));
    parse(value)
        .or_else(|_| parse(&format!("\"{value}\"")))
        .map_err(|e| Error::Config(format!("sweep value {param} = {value}: {}", e.message())).into())
}

struct PointResult {
    best_epoch: usize,
    valid: Option<f64>,
    report: EvalReport,
}

pub fn sweep(args: &SweepArgs, output: &Output) -> Result<()> {
    let base = merged(args.config.as_deref(), &args.run)?;
    let prepared = Prepared::load(require_data(&base)?)?;
    let mut points = Vec::new();
    for v in &args.values {
        let run = base.overlay(&point_layer(&args.param, v)?);
        run.train_config(prepared.info.manifest.max_len)?;
        points.push(run);
    }
    let dir = output.run_dir("sweep", args.out.as_deref())?;
    let exec = if args.parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let results = exec.map(points.len(), |i| -> Result<PointResult> {
        let pdir = dir.join(format!("point-{i:02}"));
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let (cfg, fit) = train_into(&pdir, &points[i], &prepared)?;
        let schedule = cfg.schedule.build()?;
        let rec = Recommender::new(&fit.params, &schedule, cfg.serve_config())?;
        let cases = prepared.dataset(cfg.max_len)?.test_cases();
        let report = evaluate(&rec, &cases, &args.at, cfg.seed, cfg.execution)?;
        log::info!("{} = {} done", args.param, args.values[i]);
        Ok(PointResult {
            best_epoch: fit.best_epoch,
            valid: fit.best_valid_recall,
            report,
        })
    });
    let path = dir.join("summary.tsv");
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    let metrics: Vec<String> = results
        .iter()
        .find_map(|r| r.as_ref().ok())
        .map(|r| r.report.metrics.keys().cloned().collect())
        .unwrap_or_default();
    write!(w, "{}\tbest_epoch\tvalid_recall@20", args.param).map_err(io)?;
    for m in &metrics {
        write!(w, "\t{m}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    let mut first_err = None;
    for (v, r) in args.values.iter().zip(results) {
        match r {
            Ok(p) => {
                let valid = p.valid.map_or(String::new(), |x| format!("{x:.6}"));
                write!(w, "{v}\t{}\t{valid}", p.best_epoch).map_err(io)?;
                for m in &metrics {
                    write!(w, "\t{:.6}", p.report.metrics[m]).map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
            Err(e) => {
                log::error!("{} = {v}: {e}", args.param);
                writeln!(w, "{v}\tfailed").map_err(io)?;
                first_err.get_or_insert(e);
            }
        }
    }
    w.flush().map_err(io)?;
    print!("{}", fs::read_to_string(&path).map_err(io)?);
    println!("run directory: {}", dir.display());
    first_err.map_or(Ok(()), Err)
}
