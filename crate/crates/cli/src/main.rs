//! `rosa`: synthetic data, training, attacks, defended prediction,
//! evaluation, epsilon sweeps and ablations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rosa_core::eval::{FBetaForm, DEFAULT_THRESHOLDS};
use rosa_core::pipeline::Defense;
use rosa_core::synthetic::SyntheticSpec;
use rosa_core::{Error, Result};

use crate::manifest::{AttackSettings, ExperimentManifest};

#[derive(Parser)]
#[command(
    name = "rosa",
    version,
    about = "Adversarial attacks and segment-shielding defenses for saliency models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with exact masks and a dataset manifest.
    GenData(GenDataArgs),
    /// Train the backbone, then fine-tune it jointly with the CRF.
    Train(ManifestArg),
    /// Attack the test split against the trained backbone.
    Attack(AttackArgs),
    /// Write saliency maps for one defense.
    Predict(PredictArgs),
    /// Score saliency maps against ground-truth masks.
    Eval(EvalArgs),
    /// Evaluate every configured defense across attack budgets.
    Sweep(SweepArgs),
    /// Compare shielding-only, restoration-only and the full defense.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ManifestArg {
    /// Experiment manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Full specification as JSON; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Background texture standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttackOverrides {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Clip the final perturbation into the budget (`true`/`false`).
    #[arg(long)]
    strict_clip: Option<bool>,
}

impl AttackOverrides {
    fn apply(&self, base: AttackSettings) -> AttackSettings {
        AttackSettings {
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            alpha: self.alpha.unwrap_or(base.alpha),
            max_iters: self.max_iters.or(base.max_iters),
            strict_clip: self.strict_clip.unwrap_or(base.strict_clip),
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    overrides: AttackOverrides,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    /// none, smooth-r<N>, quant-b<N>, rosa, sws-only or car-only.
    #[arg(long, default_value = "rosa")]
    defense: Defense,
    /// Directory of `.ppm` inputs; defaults to the clean test split.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Output directory; defaults to `<output_dir>/predictions/<defense>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Average this many independent shuffles per prediction.
    #[arg(long)]
    resample_shield: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<name>.pgm` saliency maps.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of same-named `<name>.pgm` masks.
    #[arg(long)]
    gt_dir: PathBuf,
    /// JSON report path; the curve goes next to it as `.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLDS)]
    thresholds: usize,
    /// Use the alternative F-beta denominator.
    #[arg(long)]
    printed_denominator: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    /// Comma-separated budgets; defaults to the manifest's list.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    resample_shield: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    overrides: AttackOverrides,
    #[arg(long)]
    resample_shield: Option<usize>,
}

fn synthetic_spec(args: &GenDataArgs) -> Result<SyntheticSpec> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(v) = args.n_images {
        spec.n_images = v;
    }
    if let Some(v) = args.n_val {
        spec.n_val = v;
    }
    if let Some(v) = args.n_test {
        spec.n_test = v;
    }
    if let Some(v) = args.size {
        spec.height = v;
        spec.width = v;
    }
    if let Some(v) = args.noise {
        spec.noise_level = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    Ok(spec)
}

fn load(path: &Path) -> Result<ExperimentManifest> {
    ExperimentManifest::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&synthetic_spec(&a)?, &a.out),
        Command::Train(a) => commands::train(&load(&a.manifest)?),
        Command::Attack(a) => {
            let m = load(&a.manifest.manifest)?;
            let settings = a.overrides.apply(m.attack);
            let dir = commands::attack(&m, &settings)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Predict(a) => {
            let m = load(&a.manifest.manifest)?;
            let dir = commands::predict(
                &m,
                &a.defense,
                a.input_dir.as_deref(),
                a.out.as_deref(),
                a.resample_shield,
            )?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Eval(a) => {
            let form = if a.printed_denominator {
                FBetaForm::PrintedDenominator
            } else {
                FBetaForm::Standard
            };
            commands::eval(&a.pred_dir, &a.gt_dir, &a.out, a.thresholds, form)
        }
        Command::Sweep(a) => {
            let m = load(&a.manifest.manifest)?;
            let eps = a.epsilons.clone().unwrap_or_else(|| m.sweep_epsilons.clone());
            commands::sweep(&m, &eps, a.resample_shield)
        }
        Command::Ablate(a) => {
            let m = load(&a.manifest.manifest)?;
            let settings = a.overrides.apply(m.attack);
            commands::ablate(&m, &settings, a.resample_shield)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 3 } else { 2 })
        }
    }
}
