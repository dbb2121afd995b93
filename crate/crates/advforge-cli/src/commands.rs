//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use advforge_core::attacks::AttackSpec;
use advforge_core::data::{self, Dataset};
use advforge_core::defense::{self, TrainConfig};
use advforge_core::eval;
use advforge_core::nn::io::{load_model, save_model};
use advforge_core::nn::{LabelBatch, Model};
use advforge_core::Error as CoreError;

use crate::manifest::ManifestBuilder;

#[derive(Parser)]
#[command(
    name = "advforge",
    version,
    about = "Train small image classifiers under adversarial regimes, \
             attack them, and measure what survives",
    long_about = "Trains MNIST-scale convolutional classifiers naturally or with \
                  single-step, iterative, or two-step adversarial objectives; \
                  generates FGSM/IFGSM/PGD perturbations; and reports accuracy \
                  matrices and loss-surface grids as CSV. Every command writes a \
                  manifest recording the resolved configuration, seeds, and input \
                  digests needed to reproduce the run bit-for-bit."
)]
pub struct Cli {
    /// Cap the worker thread pool (default: one worker per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Train a classifier and save it with its loss trace.
    Train(TrainArgs),
    /// Generate adversarial examples against a saved model.
    Attack(AttackArgs),
    /// Score models on clean, white-box, or transferred inputs.
    Eval(EvalArgs),
    /// Sweep the loss over a 2-D perturbation plane around clean inputs.
    Surface(SurfaceArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_stems(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON training config; unknown keys are rejected. Flags below
    /// override individual fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training objective: natural, adv_fgsm, adv_ifgsm, or e2sad.
    #[arg(long)]
    pub mode: Option<String>,
    /// Clean-loss weight α in [0,1]; the adversarial term gets 1−α.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Dissimilarity weight λ ≥ 0 (two-step mode only).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Two-step mode: first-step size ε₁.
    #[arg(long)]
    pub eps1: Option<f64>,
    /// Two-step mode: second-step size ε₂.
    #[arg(long)]
    pub eps2: Option<f64>,
    /// Single-step / iterative modes: generation budget ε.
    #[arg(long)]
    pub adv_eps: Option<f64>,
    /// Iterative mode: generation step count k.
    #[arg(long)]
    pub adv_steps: Option<usize>,
    /// Label smoothing mass δ in [0,1); 0 keeps hard labels.
    #[arg(long)]
    pub smoothing_delta: Option<f64>,
    /// Minibatch size m.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer steps to run.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Seed for weight init and batch shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer kind: adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Optimizer learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Directory holding the IDX data files (else $ADVFORGE_DATA).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Train on a stratified subset of this many examples (0 = full split).
    #[arg(long, default_value_t = 0)]
    pub train_subset: usize,
    /// Seed for the stratified subset draw.
    #[arg(long, default_value_t = 7)]
    pub subset_seed: u64,
    /// Where to save the trained model.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to save the per-interval loss trace
    /// (default: the model path with extension `train.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct AttackArgs {
    /// Saved model to attack.
    #[arg(long)]
    pub model: PathBuf,
    /// Attack family: fgsm, ifgsm, or pgd.
    #[arg(long)]
    pub family: String,
    /// Perturbation budget ε (ℓ∞).
    #[arg(long)]
    pub eps: f64,
    /// Iteration count k (ifgsm/pgd; step size is ε/k).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Random-start seed (pgd only).
    #[arg(long)]
    pub attack_seed: Option<u64>,
    /// Directory holding the IDX data files (else $ADVFORGE_DATA).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Which split to perturb.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Stratified subset size (0 = full split).
    #[arg(long, default_value_t = 0)]
    pub subset: usize,
    /// Seed for the stratified subset draw.
    #[arg(long, default_value_t = 7)]
    pub subset_seed: u64,
    /// Output prefix; writes PREFIX-images-idx3-ubyte,
    /// PREFIX-labels-idx1-ubyte, PREFIX.csv, and PREFIX.manifest.json.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Saved models to score (columns of the matrix).
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Attack row, as family:eps[:steps[:seed]] (e.g. fgsm:0.3,
    /// ifgsm:0.3:10, pgd:0.3:10:42). Repeatable.
    #[arg(long)]
    pub attack: Vec<String>,
    /// Score clean accuracy only.
    #[arg(long, conflicts_with = "attack")]
    pub clean_only: bool,
    /// Transfer mode: generate adversarial examples against each listed
    /// substitute model and score every --models column on them.
    /// Requires exactly one --attack. Repeatable.
    #[arg(long, conflicts_with = "clean_only")]
    pub transfer: Vec<PathBuf>,
    /// Score models on a previously exported adversarial CSV instead of
    /// generating anything.
    #[arg(long, conflicts_with_all = ["attack", "clean_only", "transfer"])]
    pub adv_csv: Option<PathBuf>,
    /// Directory holding the IDX data files (else $ADVFORGE_DATA).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Which split to evaluate on.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Stratified subset size (0 = full split).
    #[arg(long, default_value_t = 0)]
    pub subset: usize,
    /// Seed for the stratified subset draw.
    #[arg(long, default_value_t = 7)]
    pub subset_seed: u64,
    /// Output directory for matrix.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct SurfaceArgs {
    /// Saved model whose loss surface to sweep.
    #[arg(long)]
    pub model: PathBuf,
    /// Attack family supplying the first direction (sign of the
    /// adversarial displacement): fgsm, ifgsm, or pgd.
    #[arg(long, default_value = "fgsm")]
    pub direction_family: String,
    /// Budget ε for the direction attack.
    #[arg(long)]
    pub direction_eps: f64,
    /// Iteration count for the direction attack (ifgsm/pgd).
    #[arg(long)]
    pub direction_steps: Option<usize>,
    /// Random-start seed for the direction attack (pgd only).
    #[arg(long)]
    pub direction_seed: Option<u64>,
    /// Grid extent: both axes sweep [0, t_max].
    #[arg(long, default_value_t = eval::SURFACE_T_MAX)]
    pub t_max: f64,
    /// Points per axis (inclusive endpoints).
    #[arg(long, default_value_t = eval::SURFACE_GRID_STEPS)]
    pub grid_steps: usize,
    /// Seed for the random orthogonal second direction.
    #[arg(long, default_value_t = 11)]
    pub surface_seed: u64,
    /// Directory holding the IDX data files (else $ADVFORGE_DATA).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Which split to draw the batch from.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Stratified batch size to sweep over (0 = full split).
    #[arg(long, default_value_t = 128)]
    pub batch_n: usize,
    /// Seed for the stratified batch draw.
    #[arg(long, default_value_t = 7)]
    pub subset_seed: u64,
    /// Output directory for surface.csv, direction_meta.json,
    /// and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Attack(args) => cmd_attack(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Surface(args) => cmd_surface(args),
    }
}

/// 2 = invalid configuration or shapes, 3 = I/O or data-format trouble,
/// 4 = numeric failure. Anything unclassified is treated as a usage error.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::InvalidConfig(_) | CoreError::ShapeMismatch { .. } => 2,
            CoreError::Io { .. } | CoreError::DataFormat(_) => 3,
            CoreError::NumericFailure(_) => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    2
}

// ---------------------------------------------------------------------------
// shared plumbing

fn resolve_data_dir(flag: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(d) = flag {
        return Ok(d.clone());
    }
    if let Some(d) = std::env::var_os("ADVFORGE_DATA") {
        return Ok(PathBuf::from(d));
    }
    Err(CoreError::InvalidConfig(
        "no data directory: pass --data-dir or set ADVFORGE_DATA".into(),
    )
    .into())
}

struct LoadedSplit {
    dataset: Dataset,
    images_path: PathBuf,
    labels_path: PathBuf,
    id: String,
}

fn load_split(
    data_dir: &Option<PathBuf>,
    split: Split,
    subset: usize,
    subset_seed: u64,
) -> Result<LoadedSplit> {
    let dir = resolve_data_dir(data_dir)?;
    let (img_stem, lbl_stem) = split.file_stems();
    let images_path = dir.join(img_stem);
    let labels_path = dir.join(lbl_stem);
    let full = data::load_idx(&images_path, &labels_path)?;
    let (dataset, id) = if subset > 0 {
        (
            data::subset(&full, subset, subset_seed)?,
            format!("{}[n={},seed={}]", split.name(), subset, subset_seed),
        )
    } else {
        let id = format!("{}[full]", split.name());
        (full, id)
    };
    Ok(LoadedSplit {
        dataset,
        images_path,
        labels_path,
        id,
    })
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Parses `family:eps[:steps[:seed]]`.
fn parse_attack(s: &str, data_range: [f64; 2]) -> Result<AttackSpec> {
    let bad = |why: &str| -> anyhow::Error {
        CoreError::InvalidConfig(format!(
            "attack '{s}': {why}; expected family:eps[:steps[:seed]], \
             e.g. fgsm:0.3, ifgsm:0.3:10, pgd:0.3:10:42"
        ))
        .into()
    };
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() < 2 {
        return Err(bad("missing epsilon"));
    }
    let eps: f64 = parts[1].parse().map_err(|_| bad("epsilon is not a number"))?;
    let steps: Option<usize> = match parts.get(2) {
        Some(p) => Some(p.parse().map_err(|_| bad("steps is not an integer"))?),
        None => None,
    };
    let seed: Option<u64> = match parts.get(3) {
        Some(p) => Some(p.parse().map_err(|_| bad("seed is not an integer"))?),
        None => None,
    };
    let spec = match parts[0] {
        "fgsm" => {
            if parts.len() > 2 {
                return Err(bad("fgsm takes no steps or seed"));
            }
            AttackSpec::fgsm(eps, data_range)
        }
        "ifgsm" => {
            if parts.len() > 3 {
                return Err(bad("ifgsm takes no seed"));
            }
            AttackSpec::ifgsm(eps, steps.ok_or_else(|| bad("ifgsm needs steps"))?, data_range)
        }
        "pgd" => AttackSpec::pgd(
            eps,
            steps.ok_or_else(|| bad("pgd needs steps"))?,
            seed.ok_or_else(|| bad("pgd needs a seed for its random start"))?,
            data_range,
        ),
        other => return Err(bad(&format!("unknown family '{other}'"))),
    };
    spec.validate()?;
    Ok(spec)
}

fn build_attack_spec(
    family: &str,
    eps: f64,
    steps: Option<usize>,
    seed: Option<u64>,
    data_range: [f64; 2],
) -> Result<AttackSpec> {
    let mut s = format!("{family}:{eps}");
    if let Some(k) = steps {
        s.push_str(&format!(":{k}"));
    }
    if let Some(sd) = seed {
        if steps.is_none() {
            return Err(CoreError::InvalidConfig(
                "an attack seed requires --steps as well".into(),
            )
            .into());
        }
        s.push_str(&format!(":{sd}"));
    }
    parse_attack(&s, data_range)
}

fn attack_manifest_value(spec: &AttackSpec) -> serde_json::Value {
    let mut v = serde_json::to_value(spec).expect("attack spec serializes");
    // The per-step size is derived, but record it so the manifest states
    // the full recipe without the reader doing arithmetic.
    v["step_size"] = json!(spec.step_size());
    v
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut raw: serde_json::Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CoreError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| {
                CoreError::InvalidConfig(format!("config {}: {e}", path.display()))
            })?
        }
        None => json!({}),
    };
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| CoreError::InvalidConfig("config root must be a JSON object".into()))?;

    if let Some(m) = &args.mode {
        obj.insert("mode".into(), json!(m));
    }
    macro_rules! override_field {
        ($key:literal, $val:expr) => {
            if let Some(v) = $val {
                obj.insert($key.into(), json!(v));
            }
        };
    }
    override_field!("alpha", args.alpha);
    override_field!("lambda", args.lambda);
    override_field!("eps1", args.eps1);
    override_field!("eps2", args.eps2);
    override_field!("adv_eps", args.adv_eps);
    override_field!("adv_steps", args.adv_steps);
    override_field!("smoothing_delta", args.smoothing_delta);
    override_field!("batch_size", args.batch_size);
    override_field!("iterations", args.iterations);
    override_field!("seed", args.seed);
    if args.optimizer.is_some() || args.lr.is_some() {
        let mut opt = obj
            .get("optimizer")
            .cloned()
            .unwrap_or_else(|| json!({"type": "adam", "lr": 1e-4}));
        if let Some(kind) = &args.optimizer {
            opt["type"] = json!(kind);
        }
        if let Some(lr) = args.lr {
            opt["lr"] = json!(lr);
        }
        obj.insert("optimizer".into(), opt);
    }

    let config: TrainConfig = serde_json::from_value(raw)
        .map_err(|e| CoreError::InvalidConfig(format!("training config: {e}")))?;
    config.validate()?;

    let split = load_split(
        &args.data_dir,
        Split::Train,
        args.train_subset,
        args.subset_seed,
    )?;
    println!(
        "training mode={} on {} ({} examples), {} iterations at batch {}",
        config.mode,
        split.id,
        split.dataset.len(),
        config.iterations,
        config.batch_size
    );

    let manifest = ManifestBuilder::new("train");
    let report = defense::train(&split.dataset, &config)?;
    save_model(&report.model, &args.out)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("train.csv"));
    report.write_csv(&report_path)?;

    if let Some(last) = report.records.last() {
        println!(
            "final loss {:.6} (clean {:.6}, adv {:.6}, dissim {:.6}) at iteration {}",
            last.loss_total, last.loss_clean, last.loss_adv, last.loss_dissim, last.iteration
        );
    }

    let manifest_path = manifest_path_for(&args.out);
    let mut mb = manifest
        .config(&config)
        .seeds(json!({
            "train_seed": config.seed,
            "subset": if args.train_subset > 0 {
                json!({"n": args.train_subset, "seed": args.subset_seed})
            } else {
                serde_json::Value::Null
            },
        }))
        .input(&split.images_path)
        .input(&split.labels_path)
        .output(&args.out)
        .output(&report_path);
    if let Some(cfg) = &args.config {
        mb = mb.input(cfg);
    }
    mb.write(&manifest_path)?;
    println!(
        "saved model {}, loss trace {}, manifest {}",
        args.out.display(),
        report_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn manifest_path_for(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

// ---------------------------------------------------------------------------
// attack

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let split = load_split(&args.data_dir, args.split, args.subset, args.subset_seed)?;
    let ds = &split.dataset;
    let spec = build_attack_spec(
        &args.family,
        args.eps,
        args.steps,
        args.attack_seed,
        ds.data_range,
    )?;
    let model = load_model(&args.model)?;
    println!(
        "generating {} (ε={}, {} step{}) against {} on {} ({} examples)",
        spec.family,
        spec.epsilon,
        spec.steps,
        if spec.steps == 1 { "" } else { "s" },
        model_id(&args.model),
        split.id,
        ds.len()
    );

    let manifest = ManifestBuilder::new("attack");
    let hard = LabelBatch::one_hot(&ds.labels_usize(), data::NUM_CLASSES)?;
    let adv = spec.run(&model, &ds.images, &hard)?;

    let prefix = args.out_prefix.display().to_string();
    let images_out = PathBuf::from(format!("{prefix}-images-idx3-ubyte"));
    let labels_out = PathBuf::from(format!("{prefix}-labels-idx1-ubyte"));
    let csv_out = PathBuf::from(format!("{prefix}.csv"));
    data::export_idx(&adv, &ds.labels, &images_out, &labels_out)?;
    data::export_float_csv(&adv, &ds.labels, &csv_out)?;

    verify_written_attack(ds, &spec, &csv_out, &images_out, &labels_out)?;

    let manifest_path = PathBuf::from(format!("{prefix}.manifest.json"));
    manifest
        .config(json!({
            "attack": attack_manifest_value(&spec),
            "model": args.model.display().to_string(),
            "split": args.split.name(),
            "dataset": split.id,
        }))
        .seeds(json!({
            "attack_seed": args.attack_seed,
            "subset_seed": if args.subset > 0 { json!(args.subset_seed) } else { serde_json::Value::Null },
        }))
        .input(&args.model)
        .input(&split.images_path)
        .input(&split.labels_path)
        .output(&images_out)
        .output(&labels_out)
        .output(&csv_out)
        .write(&manifest_path)?;
    println!(
        "wrote {}, {}, {} and manifest {}",
        images_out.display(),
        labels_out.display(),
        csv_out.display(),
        manifest_path.display()
    );
    Ok(())
}

/// Re-reads the artifacts just written and checks them against the clean
/// inputs: the lossless CSV must sit inside the ε-ball and the data range
/// exactly; the quantized IDX pair may additionally differ by one grey
/// level per pixel from rounding both sides.
fn verify_written_attack(
    clean: &Dataset,
    spec: &AttackSpec,
    csv_path: &Path,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let eps = spec.epsilon;
    let [lo, hi] = clean.data_range;

    let reread = data::load_float_csv(csv_path, clean.data_range)?;
    if reread.labels != clean.labels {
        return Err(CoreError::NumericFailure(
            "post-write check: CSV labels differ from the source split".into(),
        )
        .into());
    }
    let mut max_dev: f64 = 0.0;
    let mut max_range: f64 = 0.0;
    for (a, x) in reread.images.data().iter().zip(clean.images.data()) {
        max_dev = max_dev.max((a - x).abs());
        max_range = max_range.max((a - hi).max(lo - a));
    }
    if max_dev > eps + 1e-12 || max_range > 0.0 {
        return Err(CoreError::NumericFailure(format!(
            "post-write check failed on {}: ℓ∞ deviation {max_dev} vs budget {eps}, \
             range excess {max_range}",
            csv_path.display()
        ))
        .into());
    }

    let quantized = data::load_idx(images_path, labels_path)?;
    // Quantizing adversarial and clean pixels separately can move each by
    // up to half a grey level, so allow one full level of slack.
    let grey = (hi - lo) / 255.0;
    let mut max_qdev: f64 = 0.0;
    for (a, x) in quantized.images.data().iter().zip(clean.images.data()) {
        let xq = ((x - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) / 255.0 * (hi - lo) + lo;
        max_qdev = max_qdev.max((a - xq).abs());
    }
    if max_qdev > eps + grey + 1e-12 {
        return Err(CoreError::NumericFailure(format!(
            "post-write check failed on {}: quantized ℓ∞ deviation {max_qdev} \
             vs budget {eps} (+1 grey level)",
            images_path.display()
        ))
        .into());
    }
    println!(
        "post-write check: ℓ∞ = {max_dev:.6} ≤ ε = {eps}, all pixels in [{lo}, {hi}]"
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if !args.transfer.is_empty() && args.attack.len() != 1 {
        return Err(CoreError::InvalidConfig(
            "--transfer needs exactly one --attack to generate with".into(),
        )
        .into());
    }
    if args.attack.is_empty()
        && !args.clean_only
        && args.transfer.is_empty()
        && args.adv_csv.is_none()
    {
        return Err(CoreError::InvalidConfig(
            "nothing to evaluate: pass --attack, --clean-only, --transfer, or --adv-csv".into(),
        )
        .into());
    }

    let split = load_split(&args.data_dir, args.split, args.subset, args.subset_seed)?;
    let ds = &split.dataset;

    let mut models: Vec<(String, Model)> = Vec::new();
    for path in &args.models {
        let id = model_id(path);
        if models.iter().any(|(existing, _)| *existing == id) {
            return Err(CoreError::InvalidConfig(format!(
                "two models share the id '{id}'; rename one file"
            ))
            .into());
        }
        models.push((id, load_model(path)?));
    }
    let model_refs: Vec<(&str, &Model)> =
        models.iter().map(|(id, m)| (id.as_str(), m)).collect();

    let manifest = ManifestBuilder::new("eval");
    let matrix = if !args.transfer.is_empty() {
        let spec = parse_attack(&args.attack[0], ds.data_range)?;
        let mut subs: Vec<(String, Model)> = Vec::new();
        for path in &args.transfer {
            subs.push((model_id(path), load_model(path)?));
        }
        let sub_refs: Vec<(&str, &Model)> =
            subs.iter().map(|(id, m)| (id.as_str(), m)).collect();
        println!(
            "transfer: {} substitute(s) x {} target(s) under {} on {}",
            sub_refs.len(),
            model_refs.len(),
            args.attack[0],
            split.id
        );
        eval::blackbox_matrix(&sub_refs, &model_refs, &spec, ds, &split.id)?
    } else if let Some(csv) = &args.adv_csv {
        let adv = data::load_float_csv(csv, ds.data_range)?;
        println!(
            "scoring {} model(s) on {} ({} examples)",
            model_refs.len(),
            csv.display(),
            adv.len()
        );
        let mut cells = Vec::with_capacity(model_refs.len());
        for (_, m) in &model_refs {
            cells.push(eval::accuracy_on(m, &adv.images, &adv.labels)?);
        }
        eval::EvalMatrix {
            row_kind: "input".into(),
            row_ids: vec![model_id(csv)],
            col_ids: model_refs.iter().map(|(id, _)| id.to_string()).collect(),
            cells,
            dataset_id: format!("file:{}", csv.display()),
        }
    } else {
        let mut specs: Vec<(String, AttackSpec)> = Vec::new();
        for s in &args.attack {
            specs.push((s.clone(), parse_attack(s, ds.data_range)?));
        }
        let spec_refs: Vec<(&str, AttackSpec)> =
            specs.iter().map(|(id, sp)| (id.as_str(), *sp)).collect();
        println!(
            "white-box: {} model(s), clean + {} attack row(s) on {}",
            model_refs.len(),
            spec_refs.len(),
            split.id
        );
        eval::whitebox_matrix(&model_refs, &spec_refs, ds, &split.id)?
    };

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CoreError::io(&args.out_dir, e))?;
    let matrix_path = args.out_dir.join("matrix.csv");
    matrix.write_csv(&matrix_path)?;
    print_matrix(&matrix);

    let manifest_path = args.out_dir.join("manifest.json");
    let mut mb = manifest
        .config(json!({
            "models": args.models.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "attacks": args.attack,
            "clean_only": args.clean_only,
            "transfer": args.transfer.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "adv_csv": args.adv_csv.as_ref().map(|p| p.display().to_string()),
            "split": args.split.name(),
            "dataset": split.id,
        }))
        .seeds(json!({
            "subset_seed": if args.subset > 0 { json!(args.subset_seed) } else { serde_json::Value::Null },
        }))
        .input(&split.images_path)
        .input(&split.labels_path)
        .output(&matrix_path);
    for p in args.models.iter().chain(args.transfer.iter()) {
        mb = mb.input(p);
    }
    if let Some(csv) = &args.adv_csv {
        mb = mb.input(csv);
    }
    mb.write(&manifest_path)?;
    println!(
        "wrote {} and manifest {}",
        matrix_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn print_matrix(m: &eval::EvalMatrix) {
    let width = m
        .row_ids
        .iter()
        .map(|r| r.len())
        .chain([m.row_kind.len()])
        .max()
        .unwrap_or(8)
        .max(8);
    print!("{:width$}", m.row_kind);
    for c in &m.col_ids {
        print!("  {c:>12}");
    }
    println!();
    for (i, r) in m.row_ids.iter().enumerate() {
        print!("{r:width$}");
        for j in 0..m.col_ids.len() {
            print!("  {:>12.4}", m.cell(i, j));
        }
        println!();
    }
}

// ---------------------------------------------------------------------------
// surface

fn cmd_surface(args: SurfaceArgs) -> Result<()> {
    let split = load_split(&args.data_dir, args.split, args.batch_n, args.subset_seed)?;
    let ds = &split.dataset;
    let spec = build_attack_spec(
        &args.direction_family,
        args.direction_eps,
        args.direction_steps,
        args.direction_seed,
        ds.data_range,
    )?;
    let model = load_model(&args.model)?;
    println!(
        "surface: {} grid over [0, {}]^2 around {} examples, direction {}:{}",
        args.grid_steps, args.t_max, ds.len(), spec.family, spec.epsilon
    );

    let manifest = ManifestBuilder::new("surface");
    let grid = eval::loss_surface(
        &model,
        ds,
        &spec,
        args.t_max,
        args.grid_steps,
        args.surface_seed,
    )?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CoreError::io(&args.out_dir, e))?;
    let csv_path = args.out_dir.join("surface.csv");
    let meta_path = args.out_dir.join("direction_meta.json");
    grid.write_csv(&csv_path)?;
    grid.write_meta_json(&meta_path)?;

    let manifest_path = args.out_dir.join("manifest.json");
    manifest
        .config(json!({
            "model": args.model.display().to_string(),
            "direction_attack": attack_manifest_value(&spec),
            "t_max": args.t_max,
            "grid_steps": args.grid_steps,
            "split": args.split.name(),
            "dataset": split.id,
            "batch_n": args.batch_n,
        }))
        .seeds(json!({
            "surface_seed": args.surface_seed,
            "subset_seed": if args.batch_n > 0 { json!(args.subset_seed) } else { serde_json::Value::Null },
            "direction_seed": args.direction_seed,
        }))
        .input(&args.model)
        .input(&split.images_path)
        .input(&split.labels_path)
        .output(&csv_path)
        .output(&meta_path)
        .write(&manifest_path)?;
    println!(
        "wrote {}, {} and manifest {}",
        csv_path.display(),
        meta_path.display(),
        manifest_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
