//! `masakit` command-line front end.
//!
//! [`run`] parses arguments, executes one subcommand and maps the outcome
//! onto an exit code: 0 on success, 1 for usage or validation errors and
//! 2 for numerical failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use masakit_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use masakit_core::compress::{compress_model, CompressOptions, GroupSelection, PairingPolicy};
use masakit_core::corpus::{calibration_samples, read_bytes, synthetic_text, train_windows};
use masakit_core::masa::{projection_compression_ratio, similarity_matrix, ProjectionStorage};
use masakit_core::model::gradcheck::{default_check_config, gradient_check, GradCheckSettings};
use masakit_core::model::{perplexity, train, CoefficientPath, ModelParams, ToyConfig, TrainSettings};
use masakit_core::{MasaError, ProjectionKind, SharingMode};

/// Largest gradient deviation `grad-check` accepts.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "masakit", version, about = "Train, compress and inspect shared-atom attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a toy byte-level model and save a checkpoint.
    TrainToy(TrainArgs),
    /// Compress a dense checkpoint into shared atoms.
    Compress(CompressArgs),
    /// Report perplexity on a byte corpus.
    Eval(EvalArgs),
    /// Print tensor shapes, compression ratios and atom similarities.
    Inspect(InspectArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mode: Option<SharingMode>,
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training window length in bytes.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train the coefficient matrix directly instead of through the MLP.
    #[arg(long)]
    direct_coefficients: bool,
    #[arg(long)]
    tie_embeddings: bool,
    /// Write the per-step `step,loss,lr` trace here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which projections to share: qkv or qkvo.
    #[arg(long)]
    mode: Option<SharingMode>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Residual budget override.
    #[arg(long)]
    beta: Option<f64>,
    /// `auto:K`, `K`, or a JSON file `{"ranges": [[start, end], ...]}`.
    #[arg(long)]
    groups: Option<String>,
    /// Basis count, or a comma-separated list with one count per group.
    #[arg(long)]
    basis: Option<String>,
    /// Calibration bytes (same format as a corpus).
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Number of calibration windows.
    #[arg(long)]
    calib_samples: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// `paired` (default) or `independent` residual ranks.
    #[arg(long)]
    pairing: Option<String>,
    /// Move budget of the rank balancing walk.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mode: Option<SharingMode>,
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sampled parameter entries.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long)]
    direct_coefficients: bool,
}

/// File form of a run; every key is optional and unknown keys are errors.
#[derive(Debug, Default, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub layers: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub mode: Option<SharingMode>,
    pub atoms: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub vocab: Option<usize>,
    pub context: Option<usize>,
    pub tie_embeddings: Option<bool>,
    pub coefficient_path: Option<CoefficientPath>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub seq_len: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub groups: Option<String>,
    pub basis: Option<String>,
    pub calib: Option<PathBuf>,
    pub calib_samples: Option<usize>,
    pub report: Option<PathBuf>,
    pub pairing: Option<String>,
    pub max_steps: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, MasaError> {
        toml::from_str(text).map_err(|e| MasaError::Invalid(format!("run config: {e}")))
    }

    fn load(path: Option<&Path>) -> Result<Self, MasaError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| MasaError::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::from_toml(&text)
            }
        }
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, MasaError> {
    value.ok_or_else(|| MasaError::Invalid(format!("missing required --{flag}")))
}

/// Parses `auto:K`, `K`, or a JSON group file.
pub fn parse_groups(spec: &str) -> Result<GroupSelection, MasaError> {
    let count = spec.strip_prefix("auto:").unwrap_or(spec);
    if let Ok(k) = count.trim().parse::<usize>() {
        return Ok(GroupSelection::Auto(k));
    }
    if spec.starts_with("auto:") {
        return Err(MasaError::Invalid(format!("bad group count in '{spec}'")));
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct GroupFile {
        ranges: Vec<[usize; 2]>,
    }
    let text = std::fs::read_to_string(spec).map_err(|e| MasaError::Io {
        path: PathBuf::from(spec),
        source: e,
    })?;
    let file: GroupFile =
        serde_json::from_str(&text).map_err(|e| MasaError::Invalid(format!("group file {spec}: {e}")))?;
    Ok(GroupSelection::Explicit(file.ranges.iter().map(|[s, e]| *s..*e).collect()))
}

pub fn parse_basis(spec: &str) -> Result<Vec<usize>, MasaError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| MasaError::Invalid(format!("bad basis count '{s}'")))
        })
        .collect()
}

fn parse_pairing(spec: &str) -> Result<PairingPolicy, MasaError> {
    match spec {
        "paired" => Ok(PairingPolicy::Paired),
        "independent" => Ok(PairingPolicy::Independent),
        other => Err(MasaError::Invalid(format!("unknown pairing policy '{other}'"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), MasaError> {
    write_atomic(path, text.as_bytes())
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> Result<(), MasaError> {
    let file = RunConfig::load(args.config.as_deref())?;
    let mode = args.mode.or(file.mode).unwrap_or(SharingMode::Dense);
    let atoms = args.atoms.or(file.atoms).unwrap_or(if mode == SharingMode::Dense { 0 } else { 2 });
    let mut config = ToyConfig::new(
        args.layers.or(file.layers).unwrap_or(4),
        args.dim.or(file.dim).unwrap_or(64),
        args.heads.or(file.heads).unwrap_or(4),
        mode,
        atoms,
    );
    config.seed = args.seed.or(file.seed).unwrap_or(0);
    if let Some(v) = file.ffn_mult {
        config.ffn_mult = v;
    }
    if let Some(v) = file.vocab {
        config.vocab_size = v;
    }
    config.tie_embeddings = args.tie_embeddings || file.tie_embeddings.unwrap_or(false);
    config.coefficient_path = if args.direct_coefficients {
        CoefficientPath::Direct
    } else {
        file.coefficient_path.unwrap_or_default()
    };
    let settings = TrainSettings {
        steps: args.steps.or(file.steps).unwrap_or(1000),
        batch_size: args.batch.or(file.batch).unwrap_or(8),
        seq_len: args.seq_len.or(file.seq_len).unwrap_or(128),
        lr: args.lr.or(file.lr).unwrap_or(3e-3),
        ..TrainSettings::default()
    };
    config.context = file.context.unwrap_or(settings.seq_len);
    let corpus_path = required(args.corpus.or(file.corpus), "corpus")?;
    let out_path = required(args.out.or(file.out), "out")?;
    let metrics_path = args.metrics.or(file.metrics);
    config.validate()?;
    settings.validate()?;

    let corpus = read_bytes(&corpus_path)?;
    train_windows(&corpus, settings.seq_len)?;
    let outcome = train(&config, &corpus, &settings)?;
    save_checkpoint(&outcome.params, &out_path)?;
    if let Some(path) = metrics_path {
        let mut csv = String::from("step,loss,lr\n");
        for m in &outcome.metrics {
            csv.push_str(&format!("{},{:.9},{:.6e}\n", m.step, m.loss, m.lr));
        }
        write_text(&path, &csv)?;
    }
    let mut baked = outcome.params.clone();
    baked.bake()?;
    let last = outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
    writeln!(out, "trained {} steps, final loss {last:.6}", settings.steps).ok();
    writeln!(
        out,
        "attention parameters {} (dense equivalent {})",
        baked.attention_parameter_count(),
        baked.dense_attention_parameter_count()
    )
    .ok();
    writeln!(out, "saved {}", out_path.display()).ok();
    Ok(())
}

fn cmd_compress(args: CompressArgs, out: &mut dyn Write) -> Result<(), MasaError> {
    let file = RunConfig::load(args.config.as_deref())?;
    let ckpt = required(args.ckpt.or(file.ckpt), "ckpt")?;
    let out_path = required(args.out.or(file.out), "out")?;
    let groups = parse_groups(&required(args.groups.or(file.groups), "groups")?)?;
    let basis = parse_basis(&args.basis.or(file.basis).unwrap_or_else(|| "1".into()))?;
    let pairing = parse_pairing(&args.pairing.or(file.pairing).unwrap_or_else(|| "paired".into()))?;
    let alpha = args.alpha.or(file.alpha).unwrap_or(0.5);
    let mode = args.mode.or(file.mode).unwrap_or(SharingMode::Qkvo);
    let calib_path = args.calib.or(file.calib);
    let calib_count = args.calib_samples.or(file.calib_samples).unwrap_or(1024);
    let report_path = args.report.or(file.report);
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MasaError::Invalid(format!("alpha {alpha} outside (0, 1]")));
    }

    let params = load_checkpoint(&ckpt)?;
    let calib = match &calib_path {
        Some(p) => calibration_samples(&read_bytes(p)?, params.config.context, calib_count)?,
        None => Vec::new(),
    };
    let opts = CompressOptions {
        mode,
        alpha,
        beta: args.beta.or(file.beta),
        groups,
        basis,
        pairing,
        max_steps: args.max_steps.or(file.max_steps),
        ..CompressOptions::default()
    };
    let (compressed, report) = compress_model(&params, &calib, &opts)?;
    save_checkpoint(&compressed, &out_path)?;
    if let Some(path) = report_path {
        write_text(&path, &report.to_csv())?;
    }
    let ranges: Vec<String> = report
        .groups
        .ranges
        .iter()
        .zip(&report.groups.basis_counts)
        .map(|(r, b)| format!("[{}, {}) B={b}", r.start, r.end))
        .collect();
    writeln!(out, "groups: {}", ranges.join(", ")).ok();
    let betas: Vec<String> = report.betas.iter().map(|b| format!("{b:.4}")).collect();
    writeln!(out, "residual budgets: {}", betas.join(", ")).ok();
    writeln!(out, "attention compression ratio {:.4}", report.attention_cr).ok();
    writeln!(out, "saved {}", out_path.display()).ok();
    Ok(())
}

fn cmd_eval(args: EvalArgs, out: &mut dyn Write) -> Result<(), MasaError> {
    let params = load_checkpoint(&args.ckpt)?;
    let corpus = read_bytes(&args.corpus)?;
    let ppl = perplexity(&params, &corpus)?;
    writeln!(out, "perplexity {ppl:.12e}").ok();
    Ok(())
}

fn cmd_inspect(args: InspectArgs, out: &mut dyn Write) -> Result<(), MasaError> {
    let params = load_checkpoint(&args.ckpt)?;
    let c = &params.config;
    writeln!(
        out,
        "layers {} dim {} heads {} mode {} atoms {} vocab {} context {}",
        c.num_layers,
        c.model_dim,
        c.num_heads,
        c.mode.as_str(),
        c.num_atoms,
        c.vocab_size,
        c.context
    )
    .ok();
    if let Some(g) = params.layout() {
        let ranges: Vec<String> = g.ranges.iter().map(|r| format!("[{}, {})", r.start, r.end)).collect();
        writeln!(out, "groups {} basis {:?}", ranges.join(" "), g.basis_counts).ok();
    }
    writeln!(out, "# tensors").ok();
    for (name, m) in params.tensors() {
        writeln!(out, "{name} {}x{}", m.nrows(), m.ncols()).ok();
    }
    writeln!(out, "# compression").ok();
    let (l, d) = (c.num_layers, c.model_dim);
    for kind in ProjectionKind::ALL {
        let storage = params.attention.get(kind);
        let measured = 1.0 - storage.parameter_count() as f64 / (l * d * d) as f64;
        match storage {
            ProjectionStorage::Dense(_) => {
                writeln!(out, "{} dense params {} cr 0.0000", kind.tag(), storage.parameter_count()).ok();
            }
            ProjectionStorage::Shared(sp) => {
                let formula = projection_compression_ratio(sp.dictionary.len(), l, d, d);
                writeln!(
                    out,
                    "{} shared atoms {} params {} cr {formula:.4} measured {measured:.4}",
                    kind.tag(),
                    sp.dictionary.len(),
                    storage.parameter_count()
                )
                .ok();
            }
        }
    }
    let total = 1.0 - params.attention_parameter_count() as f64 / params.dense_attention_parameter_count() as f64;
    writeln!(out, "attention measured cr {total:.4}").ok();
    for kind in ProjectionKind::ALL {
        if let ProjectionStorage::Shared(sp) = params.attention.get(kind) {
            writeln!(out, "# cosine_similarity {}", kind.tag()).ok();
            let sim = similarity_matrix(&sp.dictionary)?;
            for i in 0..sim.nrows() {
                let row: Vec<String> = (0..sim.ncols()).map(|j| format!("{:.6}", sim[(i, j)])).collect();
                writeln!(out, "{}", row.join(",")).ok();
            }
        }
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs, out: &mut dyn Write) -> Result<bool, MasaError> {
    let mut config = default_check_config();
    if let Some(v) = args.layers {
        config.num_layers = v;
    }
    if let Some(v) = args.dim {
        config.model_dim = v;
    }
    if let Some(v) = args.heads {
        config.num_heads = v;
    }
    if let Some(v) = args.mode {
        config.mode = v;
    }
    if let Some(v) = args.atoms {
        config.num_atoms = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.direct_coefficients {
        config.coefficient_path = CoefficientPath::Direct;
    }
    let params = ModelParams::init(&config)?;
    let text = synthetic_text(config.seed, 4 * config.context);
    let windows = train_windows(&text, config.context - 1)?;
    let settings = GradCheckSettings {
        samples: args.samples,
        seed: config.seed,
        ..GradCheckSettings::default()
    };
    let report = gradient_check(&params, &windows[..windows.len().min(2)], &settings)?;
    writeln!(
        out,
        "checked {} entries over {} tensors, max relative deviation {:.3e} at {}",
        report.checked,
        report.per_tensor.len(),
        report.max_deviation,
        report.worst
    )
    .ok();
    Ok(report.max_deviation <= GRAD_CHECK_TOLERANCE)
}

fn exit_code(err: &MasaError) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{text}").ok();
                    0
                }
                _ => {
                    write!(err, "{text}").ok();
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::TrainToy(a) => cmd_train(a, out),
        Command::Compress(a) => cmd_compress(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::GradCheck(a) => match cmd_grad_check(a, out) {
            Ok(true) => Ok(()),
            Ok(false) => {
                writeln!(err, "error: gradient deviation above {GRAD_CHECK_TOLERANCE:e}").ok();
                return 2;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            exit_code(&e)
        }
    }
}
