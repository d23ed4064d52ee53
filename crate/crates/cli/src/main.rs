use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ccup::eval::{self, EvaluationReport, Evaluator, Scale, Split, SweepAxis};
use ccup::oracle::{self, MinimizeOptions};
use ccup::projection::{self, Components, Method, ProjectionMatrix, RegularizationConfig};
use ccup::store::{self, ClassManifest, EmbeddingMatrix, LabeledDataset};
use ccup::synthetic::{self, SyntheticSpec};
use ccup::Exec;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Closed-form unlearning projections for CLIP-style embeddings.
#[derive(Debug, Parser)]
#[command(name = "ccup", version)]
struct Cli {
    /// Seed for every random choice (class splits, synthetic data, verify instances).
    /// Defaults to 0; a `synth` spec file's own seed is kept unless this is given.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Default directory for files written by `project` and `synth`.
    #[arg(long, global = true, env = "CCUP_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,

    /// Print accuracies as fractions in [0, 1] instead of percentages.
    #[arg(long, global = true)]
    fraction: bool,

    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a projection matrix from class text embeddings.
    Project(ProjectArgs),
    /// Score a projection on labelled image features.
    Evaluate(EvaluateArgs),
    /// Evaluate CCUP (or the partial projector) over a range of one parameter.
    Sweep(SweepArgs),
    /// Evaluate the component ablation grid.
    Ablate(AblateArgs),
    /// Write a synthetic benchmark fixture.
    Synth(SynthArgs),
    /// Check the closed form against the objective on a random instance.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct TextArgs {
    /// Class text embeddings (EMB1 or CSV).
    #[arg(long)]
    texts: PathBuf,

    /// Class manifest. Defaults to the `<stem>.manifest.json` sidecar of --texts.
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Re-split classes: forget a seeded random `ceil(fraction * K)` of them.
    #[arg(long, conflicts_with = "forget")]
    forget_fraction: Option<f64>,

    /// Re-split classes: forget exactly these (comma separated names).
    #[arg(long, value_delimiter = ',')]
    forget: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct RegArgs {
    #[arg(long, default_value_t = projection::DEFAULT_LAMBDA, allow_negative_numbers = true)]
    lambda: f64,

    #[arg(long, default_value_t = projection::DEFAULT_MU, allow_negative_numbers = true)]
    mu: f64,
}

impl RegArgs {
    fn config(&self) -> Result<RegularizationConfig> {
        RegularizationConfig::new(self.lambda, self.mu).context("validating parameters")
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Image features (EMB1 or CSV), one column per image.
    #[arg(long)]
    features: PathBuf,

    /// Labels file, one class index per line.
    #[arg(long)]
    labels: PathBuf,

    /// Name printed in the dataset column.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[command(flatten)]
    text: TextArgs,

    #[command(flatten)]
    reg: RegArgs,

    #[arg(long, default_value = "ccup")]
    method: Method,

    /// Component set for `--method ablation`, e.g. `C1+C2`.
    #[arg(long, default_value = "C1+C2+C3")]
    components: Components,

    /// Strength of the partial projector.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    alpha: f64,

    /// Output path. Defaults to `<out-dir>/projection.emb`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    text: TextArgs,

    /// Projection written by `project`. The identity when omitted.
    #[arg(long)]
    projection: Option<PathBuf>,

    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    text: TextArgs,

    #[command(flatten)]
    reg: RegArgs,

    /// Parameter to vary: lambda, mu or alpha.
    #[arg(long)]
    axis: SweepAxis,

    /// Comma separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    text: TextArgs,

    #[command(flatten)]
    reg: RegArgs,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON spec. Flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,

    #[arg(long)]
    dim: Option<usize>,

    #[arg(long)]
    classes: Option<usize>,

    #[arg(long)]
    images_per_class: Option<usize>,

    #[arg(long)]
    concentration: Option<f64>,

    #[arg(long)]
    text_noise: Option<f64>,

    #[arg(long)]
    overlap: Option<f64>,

    #[arg(long)]
    forget_fraction: Option<f64>,

    /// Output directory. Defaults to --out-dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    reg: RegArgs,

    #[arg(long, default_value_t = 16)]
    dim: usize,

    /// Number of forget text embeddings.
    #[arg(long, default_value_t = 3)]
    n_forget: usize,

    /// Number of retain text embeddings.
    #[arg(long, default_value_t = 5)]
    n_retain: usize,
}

struct Ctx {
    seed: u64,
    seed_given: bool,
    out_dir: PathBuf,
    format: Format,
    scale: Scale,
    exec: Exec,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        seed_given: cli.seed.is_some(),
        out_dir: cli.out_dir,
        format: cli.format,
        scale: Scale { fraction: cli.fraction },
        exec: if cli.sequential { Exec::Sequential } else { Exec::default() },
    };
    let result = match cli.command {
        Command::Project(a) => project(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_texts(ctx: &Ctx, args: &TextArgs) -> Result<(EmbeddingMatrix, ClassManifest)> {
    let manifest_file = args
        .manifest
        .clone()
        .unwrap_or_else(|| store::manifest_path(&args.texts));
    let (texts, manifest) = store::load_embeddings(&args.texts, Some(&manifest_file))
        .with_context(|| format!("loading text embeddings {}", args.texts.display()))?;
    let split = match (&args.forget_fraction, &args.forget) {
        (Some(f), _) => Some(Split::Fraction(*f)),
        (None, Some(names)) => Some(Split::Named(names.clone())),
        (None, None) => None,
    };
    let manifest = match split {
        Some(split) => eval::split_classes(&manifest, &split, ctx.seed).context("splitting classes")?,
        None => manifest,
    };
    Ok((texts, manifest))
}

fn load_data(args: &DataArgs) -> Result<(LabeledDataset, String)> {
    let features = store::load_matrix(&args.features)
        .with_context(|| format!("loading features {}", args.features.display()))?;
    let labels = store::load_labels(&args.labels)
        .with_context(|| format!("loading labels {}", args.labels.display()))?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let dataset = LabeledDataset::new(features, labels, n_classes).context("pairing features with labels")?;
    let name = args.dataset.clone().unwrap_or_else(|| {
        args.features
            .file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    Ok((dataset, name))
}

fn evaluator<'a>(
    ctx: &Ctx,
    dataset: &'a LabeledDataset,
    name: String,
    manifest: &ClassManifest,
    texts: &EmbeddingMatrix,
) -> Result<Evaluator<'a>> {
    if dataset.features().dim() != texts.dim() {
        bail!(
            "features have dimension {} but text embeddings have {}",
            dataset.features().dim(),
            texts.dim()
        );
    }
    Ok(Evaluator::with_exec(dataset, manifest, texts, ctx.exec)
        .context("computing before-forgetting accuracy")?
        .named(name)
        .seeded(ctx.seed))
}

fn render(ctx: &Ctx, reports: &[EvaluationReport]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match ctx.format {
        Format::Table => buf.extend_from_slice(eval::format_table(reports, ctx.scale).as_bytes()),
        Format::Csv => eval::write_csv(reports, &mut buf, ctx.scale)?,
        Format::Json => eval::write_json(reports, &mut buf)?,
    }
    Ok(buf)
}

fn emit(ctx: &Ctx, reports: &[EvaluationReport], out: Option<&Path>) -> Result<bool> {
    let text = render(ctx, reports).context("formatting report")?;
    io::stdout().write_all(&text)?;
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(true)
}

fn project(ctx: &Ctx, args: ProjectArgs) -> Result<bool> {
    let config = args.reg.config()?;
    if !(0.0..=1.0).contains(&args.alpha) {
        bail!("validating parameters: alpha must lie in [0, 1], got {}", args.alpha);
    }
    let (texts, manifest) = load_texts(ctx, &args.text)?;
    let (t_f, t_r) = manifest.split_texts(&texts)?;
    let proj = match args.method {
        Method::Identity => ProjectionMatrix::identity(texts.dim()),
        Method::Nullspace => projection::nullspace_projector(&t_f)?,
        Method::Ccup => projection::ccup_matrix(&t_f, &t_r, config)?,
        Method::Ablation => projection::ablation_matrix(&t_f, &t_r, config, args.components)?,
        Method::Partial => projection::partial_projector(&t_f, args.alpha)?,
    };
    let out = args.out.unwrap_or_else(|| ctx.out_dir.join("projection.emb"));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    projection::save_projection(&out, &proj)
        .with_context(|| format!("writing projection {}", out.display()))?;
    println!(
        "wrote {} ({} x {}, method {}, {} forget / {} retain classes)",
        out.display(),
        proj.dim(),
        proj.dim(),
        proj.provenance().method,
        t_f.count(),
        t_r.count()
    );
    Ok(true)
}

fn evaluate(ctx: &Ctx, args: EvaluateArgs) -> Result<bool> {
    let (texts, manifest) = load_texts(ctx, &args.text)?;
    let (dataset, name) = load_data(&args.data)?;
    let ev = evaluator(ctx, &dataset, name, &manifest, &texts)?;
    let proj = match &args.projection {
        Some(path) => projection::load_projection(path)
            .with_context(|| format!("loading projection {}", path.display()))?,
        None => ProjectionMatrix::identity(texts.dim()),
    };
    let report = ev.evaluate(&proj).context("evaluating projection")?;
    emit(ctx, &[report], args.out.as_deref())
}

fn sweep(ctx: &Ctx, args: SweepArgs) -> Result<bool> {
    let config = args.reg.config()?;
    let (texts, manifest) = load_texts(ctx, &args.text)?;
    let (dataset, name) = load_data(&args.data)?;
    let ev = evaluator(ctx, &dataset, name, &manifest, &texts)?;
    let (t_f, t_r) = manifest.split_texts(&texts)?;
    let result = eval::sweep(&ev, &t_f, &t_r, args.axis, &args.values, config).context("running sweep")?;
    emit(ctx, &result.reports(), args.out.as_deref())
}

fn ablate(ctx: &Ctx, args: AblateArgs) -> Result<bool> {
    let config = args.reg.config()?;
    let (texts, manifest) = load_texts(ctx, &args.text)?;
    let (dataset, name) = load_data(&args.data)?;
    let ev = evaluator(ctx, &dataset, name, &manifest, &texts)?;
    let (t_f, t_r) = manifest.split_texts(&texts)?;
    let grid = eval::ablation_grid(&ev, &t_f, &t_r, config).context("running ablation grid")?;
    let reports: Vec<_> = grid.into_iter().map(|(_, r)| r).collect();
    emit(ctx, &reports, args.out.as_deref())
}

fn synth(ctx: &Ctx, args: SynthArgs) -> Result<bool> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .with_context(|| format!("parsing spec {}", path.display()))?
        }
        None => SyntheticSpec { seed: ctx.seed, ..SyntheticSpec::default() },
    };
    if ctx.seed_given {
        spec.seed = ctx.seed;
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = args.$flag { spec.$field = v; })*
        };
    }
    set!(dim <- dim, n_classes <- classes, images_per_class <- images_per_class,
         concentration <- concentration, text_noise <- text_noise, overlap <- overlap,
         forget_fraction <- forget_fraction);
    let data = synthetic::generate_with(&spec, ctx.exec).context("generating fixture")?;
    let dir = args.out.unwrap_or_else(|| ctx.out_dir.clone());
    let paths = data.save(&dir).with_context(|| format!("writing fixture to {}", dir.display()))?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(true)
}

fn unit_columns(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<EmbeddingMatrix> {
    let raw = DMatrix::from_fn(d, m, |_, _| StandardNormal.sample(rng));
    let t = EmbeddingMatrix::new(raw)?;
    Ok(if m == 0 { t } else { t.normalize_columns()? })
}

fn verify(ctx: &Ctx, args: VerifyArgs) -> Result<bool> {
    let config = args.reg.config()?;
    if args.dim == 0 || args.n_forget == 0 {
        bail!("validating parameters: dim and n-forget must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let t_f = unit_columns(args.dim, args.n_forget, &mut rng)?;
    let t_r = unit_columns(args.dim, args.n_retain, &mut rng)?;
    let closed = projection::ccup_matrix(&t_f, &t_r, config).context("closed form")?;
    let grad = oracle::gradient(closed.values(), &t_f, &t_r, config)?.norm();
    let threshold = 1e-8 * (1.0 + config.lambda + config.mu);
    let descent = oracle::minimize(&t_f, &t_r, config, MinimizeOptions::default()).context("gradient descent")?;
    let distance = (descent.values() - closed.values()).norm();
    let grad_ok = grad <= threshold;
    let dist_ok = distance <= 1e-4;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    println!(
        "instance: dim {}, {} forget, {} retain, lambda {}, mu {}, seed {}",
        args.dim, args.n_forget, args.n_retain, config.lambda, config.mu, ctx.seed
    );
    println!("gradient norm at closed form: {grad:.3e} (threshold {threshold:.3e}) {}", mark(grad_ok));
    println!("distance to descent minimizer: {distance:.3e} (threshold 1.000e-4) {}", mark(dist_ok));
    Ok(grad_ok && dist_ok)
}
