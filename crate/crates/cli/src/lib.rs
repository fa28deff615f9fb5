//! `mat-bench` command-line front end.
//!
//! ```text
//! mat-bench <train|eval|attack|embed|gmm-dump> [--config PATH] [--flag value ...]
//! ```
//!
//! Settings come from an optional JSON [`RunConfig`] and are overridden by
//! flags. Every command writes the resolved configuration next to its
//! artifacts.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mat_core::data::{gen_two_moons, load_idx, split_semisup};
use mat_core::net::mlp_specs;
use mat_core::trainer::{
    attack_sweep, evaluate, sweep_to_csv, train, AttackFamily, TrainConfig, TrainOutcome,
};
use mat_core::{
    Activation, CovarianceMode, Dataset, GmmState, LpNorm, MklMode, NetworkParams, TrainingMode,
};

pub const CHECKPOINT_FILE: &str = "model.matnet";
pub const GMM_FILE: &str = "gmm.json";
pub const REPORT_FILE: &str = "report.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const GMM_CSV_FILE: &str = "gmm.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoMoons,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Training points generated for two-moons.
    pub n_samples: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Labeled subset size; `None` keeps every training label.
    pub n_labeled: Option<usize>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first samples of the IDX files.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub data_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            n_samples: 1000,
            n_test: 1000,
            noise: 0.1,
            n_labeled: Some(6),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Hidden widths; the last one is the latent layer.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `None` picks full covariances up to 32 latent dimensions.
    pub covariance: Option<CovarianceMode>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 8],
            activation: Activation::Relu,
            covariance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub sigmas: Vec<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: AttackFamily::Fgsm,
            sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.3],
        }
    }
}

/// Everything needed to reproduce a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub out_dir: PathBuf,
    /// Checkpoint read by `eval`, `attack` and `embed`; defaults to
    /// `<out_dir>/model.matnet`.
    pub checkpoint: Option<PathBuf>,
    /// Mixture read by `gmm-dump`; defaults to `<out_dir>/gmm.json`.
    pub gmm: Option<PathBuf>,
}

impl Default for RunConfig {
    /// The two-moons semi-supervised recipe.
    fn default() -> Self {
        let mut train = TrainConfig {
            epochs: 2000,
            batch_labeled: 6,
            batch_unlabeled: 64,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        train.objective.lambda1 = 1.0;
        train.objective.lambda2 = 0.1;
        train.perturbation.sigma = 0.2;
        train.ema.ridge = 0.1;
        Self {
            command: String::new(),
            dataset: DatasetConfig::default(),
            architecture: ArchitectureConfig::default(),
            train,
            attack: AttackConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            gmm: None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mat-bench",
    version,
    about = "Manifold adversarial training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, mixture, report and config.
    Train(Flags),
    /// Print the test error rate and mean NLL of a checkpoint.
    Eval(Flags),
    /// White-box accuracy sweep over perturbation budgets.
    Attack(Flags),
    /// Export latent coordinates with true and predicted labels.
    Embed(Flags),
    /// Convert a saved mixture to CSV.
    GmmDump(Flags),
}

#[derive(Debug, Args)]
struct Flags {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    gmm: Option<PathBuf>,

    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Labeled subset size, or `all`.
    #[arg(long)]
    n_labeled: Option<String>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,

    /// Comma-separated hidden widths; the last is the latent layer.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long, value_parser = parse_covariance)]
    covariance: Option<CovarianceMode>,

    #[arg(long)]
    mode: Option<TrainingMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    log_smooth: Option<bool>,
    #[arg(long, value_parser = parse_mkl)]
    mkl_mode: Option<MklMode>,
    /// Training perturbation budget, in feature units.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    n_iters: Option<usize>,
    /// Norm of the supervised attack used by `at-sup` (`2`, `inf`, ...).
    #[arg(long)]
    p: Option<LpNorm>,
    #[arg(long)]
    strict_xi_budget: Option<bool>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    r_smooth_samples: Option<usize>,

    #[arg(long)]
    family: Option<AttackFamily>,
    /// Comma-separated budgets in raw input units (pixel levels for idx), ascending from 0.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "two-moons" => Ok(DatasetKind::TwoMoons),
        "idx" | "mnist" => Ok(DatasetKind::Idx),
        _ => Err(format!("unknown dataset {s:?} (expected two-moons or idx)")),
    }
}

fn parse_covariance(s: &str) -> Result<CovarianceMode, String> {
    match s {
        "full" => Ok(CovarianceMode::Full),
        "diagonal" => Ok(CovarianceMode::Diagonal),
        _ => Err(format!("unknown covariance mode {s:?}")),
    }
}

fn parse_mkl(s: &str) -> Result<MklMode, String> {
    match s {
        "matched-gaussian" => Ok(MklMode::MatchedGaussian),
        "responsibility-kl" => Ok(MklMode::ResponsibilityKl),
        _ => Err(format!("unknown latent divergence {s:?}")),
    }
}

macro_rules! set {
    ($($flag:expr => $target:expr),* $(,)?) => {
        $(if let Some(v) = $flag.clone() { $target = v; })*
    };
}

impl Flags {
    fn resolve(&self, command: &str) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.command = command.to_string();
        let d = &mut cfg.dataset;
        set! {
            self.dataset => d.kind,
            self.n_samples => d.n_samples,
            self.n_test => d.n_test,
            self.noise => d.noise,
            self.data_seed => d.data_seed,
        }
        if let Some(n) = &self.n_labeled {
            d.n_labeled = match n.as_str() {
                "all" => None,
                v => Some(v.parse().with_context(|| format!("--n-labeled {v:?}"))?),
            };
        }
        for (flag, target) in [
            (&self.train_images, &mut d.train_images),
            (&self.train_labels, &mut d.train_labels),
            (&self.test_images, &mut d.test_images),
            (&self.test_labels, &mut d.test_labels),
        ] {
            if flag.is_some() {
                target.clone_from(flag);
            }
        }
        if self.train_limit.is_some() {
            d.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            d.test_limit = self.test_limit;
        }
        let a = &mut cfg.architecture;
        set! {
            self.hidden => a.hidden,
            self.activation => a.activation,
        }
        if self.covariance.is_some() {
            a.covariance = self.covariance;
        }
        let t = &mut cfg.train;
        set! {
            self.mode => t.objective.mode,
            self.seed => t.seed,
            self.epochs => t.epochs,
            self.batch_labeled => t.batch_labeled,
            self.batch_unlabeled => t.batch_unlabeled,
            self.lr => t.learning_rate,
            self.momentum => t.momentum,
            self.lr_decay => t.lr_decay,
            self.lr_decay_every => t.lr_decay_every,
            self.lambda1 => t.objective.lambda1,
            self.lambda2 => t.objective.lambda2,
            self.log_smooth => t.objective.log_smooth,
            self.mkl_mode => t.objective.mkl_mode,
            self.sigma => t.perturbation.sigma,
            self.n_iters => t.perturbation.n_iters,
            self.p => t.perturbation.p,
            self.strict_xi_budget => t.perturbation.strict_xi_budget,
            self.alpha => t.ema.alpha,
            self.beta => t.ema.beta,
            self.ridge => t.ema.ridge,
            self.r_smooth_samples => t.r_smooth_samples,
            self.family => cfg.attack.family,
            self.sigmas => cfg.attack.sigmas,
            self.out_dir => cfg.out_dir,
        }
        if self.xi.is_some() {
            t.perturbation.xi = self.xi;
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint.clone_from(&self.checkpoint);
        }
        if self.gmm.is_some() {
            cfg.gmm.clone_from(&self.gmm);
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Training and test data for a run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub test: Dataset,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("the idx dataset needs --{flag}"))
}

/// Builds the datasets described by `cfg`.
pub fn load_splits(cfg: &DatasetConfig) -> anyhow::Result<Splits> {
    let (train_set, test) = match cfg.kind {
        DatasetKind::TwoMoons => (
            gen_two_moons(cfg.n_samples, cfg.noise, cfg.data_seed)?,
            gen_two_moons(cfg.n_test, cfg.noise, cfg.data_seed.wrapping_add(1))?,
        ),
        DatasetKind::Idx => {
            let train_set = load_idx(
                required(&cfg.train_images, "train-images")?,
                required(&cfg.train_labels, "train-labels")?,
            )?;
            let test = load_idx(
                required(&cfg.test_images, "test-images")?,
                required(&cfg.test_labels, "test-labels")?,
            )?;
            let cap = |d: Dataset, n: Option<usize>| match n {
                Some(n) => d.head(n),
                None => d,
            };
            (cap(train_set, cfg.train_limit), cap(test, cfg.test_limit))
        }
    };
    let (labeled, unlabeled) = match cfg.n_labeled {
        Some(n) => split_semisup(&train_set, n, cfg.data_seed)?,
        None => {
            let empty = train_set.head(0).without_labels();
            (train_set, empty)
        }
    };
    Ok(Splits {
        labeled,
        unlabeled,
        test,
    })
}

fn class_count(s: &Splits) -> usize {
    s.labeled.class_count().max(s.test.class_count())
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_snapshot(cfg: &RunConfig, name: &str) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    write(&cfg.out_dir.join(name), &text)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<NetworkParams> {
    let path = checkpoint_path(cfg);
    NetworkParams::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Builds the network and mixture for `cfg` and trains them on `splits`.
/// Per-epoch test accuracy is tracked when `track_test` is set.
pub fn fit(cfg: &RunConfig, splits: &Splits, track_test: bool) -> anyhow::Result<TrainOutcome> {
    if cfg.architecture.hidden.is_empty() {
        bail!("the architecture needs at least one hidden layer");
    }
    let m = class_count(splits);
    let mut dims = vec![splits.labeled.dim()];
    dims.extend(&cfg.architecture.hidden);
    dims.push(m);
    let params = NetworkParams::init(
        &mlp_specs(&dims, cfg.architecture.activation),
        cfg.train.seed,
    )?;
    let latent = params.latent_dim();
    let cov = cfg
        .architecture
        .covariance
        .unwrap_or(CovarianceMode::auto(latent));
    let gmm = GmmState::standard(m, latent, cov);
    let eval = track_test.then_some(&splits.test);
    Ok(train(
        params,
        gmm,
        &splits.labeled,
        &splits.unlabeled,
        eval,
        &cfg.train,
    )?)
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.dataset)?;
    let out = fit(cfg, &splits, true)?;
    let mut resolved = cfg.clone();
    resolved.architecture.covariance = Some(out.gmm.mode());
    out.params.save(cfg.out_dir.join(CHECKPOINT_FILE))?;
    let mut gmm_json = serde_json::to_string_pretty(&out.gmm)?;
    gmm_json.push('\n');
    write(&cfg.out_dir.join(GMM_FILE), &gmm_json)?;
    write(&cfg.out_dir.join(REPORT_FILE), &out.report.to_jsonl())?;
    write_snapshot(&resolved, "config.json")?;
    let secs: f64 = out.report.epochs.iter().map(|r| r.wall_clock_secs).sum();
    if let Some(last) = out.report.epochs.last() {
        println!(
            "mode={} epochs={} train_accuracy={} test_accuracy={}",
            cfg.train.objective.mode,
            out.report.epochs.len(),
            last.train_accuracy,
            last.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    eprintln!("trained in {secs:.1}s");
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.dataset)?;
    let params = load_checkpoint(cfg)?;
    let e = evaluate(&params, &splits.test)?;
    write_snapshot(cfg, "eval-config.json")?;
    println!(
        "error_rate={} accuracy={} mean_nll={}",
        e.error_rate, e.accuracy, e.mean_nll
    );
    Ok(())
}

fn cmd_attack(cfg: &RunConfig) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.dataset)?;
    let params = load_checkpoint(cfg)?;
    let rows = attack_sweep(&params, &splits.test, cfg.attack.family, &cfg.attack.sigmas)?;
    let csv = sweep_to_csv(&rows);
    write(&cfg.out_dir.join(SWEEP_FILE), &csv)?;
    write_snapshot(cfg, "attack-config.json")?;
    print!("{csv}");
    Ok(())
}

/// `z_0..z_{D-1},label,predicted` rows for every test sample.
pub fn embeddings_csv(params: &NetworkParams, test: &Dataset) -> anyhow::Result<String> {
    let labels = test.require_labels()?;
    let mut s = String::new();
    let header: Vec<String> = (0..params.latent_dim()).map(|k| format!("z_{k}")).collect();
    writeln!(s, "{},label,predicted", header.join(","))?;
    for (x, y) in test.inputs().iter().zip(labels) {
        let t = params.forward(x)?;
        for v in t.latent() {
            write!(s, "{v},")?;
        }
        writeln!(s, "{y},{}", t.predicted())?;
    }
    Ok(s)
}

fn cmd_embed(cfg: &RunConfig) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.dataset)?;
    let params = load_checkpoint(cfg)?;
    write(
        &cfg.out_dir.join(EMBEDDINGS_FILE),
        &embeddings_csv(&params, &splits.test)?,
    )?;
    write_snapshot(cfg, "embed-config.json")?;
    println!("wrote {} rows", splits.test.len());
    Ok(())
}

fn cmd_gmm_dump(cfg: &RunConfig) -> anyhow::Result<()> {
    let path = cfg
        .gmm
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(GMM_FILE));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let gmm: GmmState =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    write(&cfg.out_dir.join(GMM_CSV_FILE), &gmm.to_csv())?;
    write_snapshot(cfg, "gmm-dump-config.json")?;
    println!("wrote {} components", gmm.num_components());
    Ok(())
}

type Handler = fn(&RunConfig) -> anyhow::Result<()>;

fn execute(command: &Command) -> anyhow::Result<()> {
    let (name, flags, f): (&str, &Flags, Handler) = match command {
        Command::Train(f) => ("train", f, cmd_train),
        Command::Eval(f) => ("eval", f, cmd_eval),
        Command::Attack(f) => ("attack", f, cmd_attack),
        Command::Embed(f) => ("embed", f, cmd_embed),
        Command::GmmDump(f) => ("gmm-dump", f, cmd_gmm_dump),
    };
    let cfg = flags.resolve(name)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    f(&cfg)
}

/// Runs the CLI and returns the process exit status: 0 on success, 2 for
/// usage errors, 1 for data and configuration errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
