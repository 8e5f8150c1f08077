use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rosa_core::attack::AttackTrace;
use rosa_core::backbone::ConvNet;
use rosa_core::checkpoint::Checkpoint;
use rosa_core::dataset::{binarize_mask, load_dataset, Dataset, Sample};
use rosa_core::eval::{evaluate, summary, FBetaForm};
use rosa_core::image::{BinaryMask, ImageTensor, SaliencyMap};
use rosa_core::io::{read_image, write_image, write_saliency};
use rosa_core::pipeline::{attack_all, epsilon_sweep, sweep_csv, Defense, Predictors};
use rosa_core::synthetic::{gen_synthetic, SyntheticSpec};
use rosa_core::train::{train_backbone, train_rosa, TrainReport};
use rosa_core::{Error, Result};
use serde::Serialize;

use crate::manifest::{write_json, AttackSettings, ExperimentManifest};

pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const ROSA_CKPT: &str = "rosa.ckpt";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Budget formatted for directory names: `20`, `2.5`.
fn eps_label(eps: f64) -> String {
    format!("eps{eps}")
}

pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    gen_synthetic(spec, out)?;
    write_json(&out.join("synthetic_spec.json"), spec)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    mean_pixel: &'a [f64],
    backbone: &'a TrainReport,
    rosa: Option<&'a TrainReport>,
}

pub fn train(m: &ExperimentManifest) -> Result<()> {
    m.prepare_output()?;
    let data = load_dataset(&m.dataset)?;
    if data.train.is_empty() {
        return Err(Error::Data("the dataset has no training split".into()));
    }
    let mean = data.mean_pixel();
    let mean3 = [mean[0], mean[1], mean[2]];
    let mut net = ConvNet::reference(m.seed);
    let report = train_backbone(&mut net, &data.train, &data.val, &mean, &m.sgd, m.seed)?;
    Checkpoint {
        net: net.clone(),
        mean_pixel: mean3,
        crf: None,
    }
    .save(m.out(BACKBONE_CKPT))?;
    let mut crf = m.crf;
    let rosa_report = if m.rosa_sgd.epochs > 0 {
        Some(train_rosa(
            &mut net,
            &mut crf,
            &data.train,
            &data.val,
            &mean,
            &m.rosa_sgd,
            &m.rosa_train,
            &m.rosa,
            m.seed,
        )?)
    } else {
        None
    };
    Checkpoint {
        net,
        mean_pixel: mean3,
        crf: Some(crf),
    }
    .save(m.out(ROSA_CKPT))?;
    write_json(
        &m.out("train_report.json"),
        &TrainSummary {
            seed: m.seed,
            mean_pixel: &mean,
            backbone: &report,
            rosa: rosa_report.as_ref(),
        },
    )
}

/// Trained models of an experiment.
struct Models {
    plain: Checkpoint,
    rosa: Checkpoint,
}

impl Models {
    fn load(m: &ExperimentManifest) -> Result<Self> {
        Ok(Self {
            plain: Checkpoint::load(m.out(BACKBONE_CKPT))?,
            rosa: Checkpoint::load(m.out(ROSA_CKPT))?,
        })
    }

    fn mean(&self) -> Vec<f64> {
        self.plain.mean_pixel.to_vec()
    }

    fn predictors(&self, m: &ExperimentManifest, resample: Option<usize>) -> Predictors<'_> {
        let mut cfg = m.rosa;
        if let Some(n) = resample {
            cfg.resample = n;
        }
        Predictors {
            plain: &self.plain.net,
            rosa: &self.rosa.net,
            crf: self.rosa.crf.unwrap_or(m.crf),
            mean: self.mean(),
            cfg,
        }
    }
}

fn test_split(data: &Dataset) -> Result<&[Sample]> {
    if data.test.is_empty() {
        return Err(Error::Data("the dataset has no test split".into()));
    }
    Ok(&data.test)
}

#[derive(Serialize)]
struct AttackLog<'a> {
    seed: u64,
    attack: &'a AttackSettings,
    max_iters: usize,
    images: BTreeMap<&'a str, &'a AttackTrace>,
}

/// Attacks the test split against the plain backbone; writes
/// `attack/eps<e>/<name>.ppm` and `traces.json` there. Returns the directory.
pub fn attack(m: &ExperimentManifest, settings: &AttackSettings) -> Result<PathBuf> {
    m.prepare_output()?;
    let models = Models::load(m)?;
    let data = load_dataset(&m.dataset)?;
    let samples = test_split(&data)?;
    let cfg = settings.config(models.mean());
    let (images, traces) = attack_all(&models.plain.net, samples, &cfg)?;
    let dir = m.out("attack").join(eps_label(settings.epsilon));
    create_dir(&dir)?;
    for (s, x) in samples.iter().zip(&images) {
        write_image(x, dir.join(format!("{}.ppm", s.name)))?;
    }
    let log = AttackLog {
        seed: m.seed,
        attack: settings,
        max_iters: cfg.max_iters,
        images: samples.iter().map(|s| s.name.as_str()).zip(&traces).collect(),
    };
    write_json(&dir.join("traces.json"), &log)?;
    Ok(dir)
}

/// `*.ppm` files of a directory, sorted by name.
fn read_image_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let mut out = Vec::new();
    for path in sorted_files(dir, "ppm")? {
        let name = stem(&path);
        out.push((name, read_image(&path)?));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds no .ppm images", dir.display())));
    }
    Ok(out)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Saliency maps for `input_dir` (or the clean test split) under one
/// defense, written as `<name>.pgm`. Returns the output directory.
pub fn predict(
    m: &ExperimentManifest,
    defense: &Defense,
    input_dir: Option<&Path>,
    out_dir: Option<&Path>,
    resample: Option<usize>,
) -> Result<PathBuf> {
    m.prepare_output()?;
    let models = Models::load(m)?;
    let inputs = match input_dir {
        Some(dir) => read_image_dir(dir)?,
        None => {
            let data = load_dataset(&m.dataset)?;
            test_split(&data)?
                .iter()
                .map(|s| (s.name.clone(), s.image.clone()))
                .collect()
        }
    };
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| m.out("predictions").join(defense.name()));
    create_dir(&dir)?;
    let p = models.predictors(m, resample);
    for (i, (name, x)) in inputs.iter().enumerate() {
        let s = p.predict(defense, x, i, m.seed)?;
        write_saliency(&s, dir.join(format!("{name}.pgm")))?;
    }
    Ok(dir)
}

/// Scores `<name>.pgm` predictions against same-named masks.
pub fn eval(pred_dir: &Path, gt_dir: &Path, out: &Path, n_thresholds: usize, form: FBetaForm) -> Result<()> {
    let mut names = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for path in sorted_files(pred_dir, "pgm")? {
        let name = stem(&path);
        let gray = read_image(&path)?;
        let values = gray.data().iter().map(|v| v / 255.0).collect();
        let pred = SaliencyMap::new(gray.height(), gray.width(), values)?;
        let gt_path = gt_dir.join(format!("{name}.pgm"));
        if !gt_path.exists() {
            return Err(Error::Data(format!(
                "no ground truth {} for {}",
                gt_path.display(),
                path.display()
            )));
        }
        let gt: BinaryMask = binarize_mask(&read_image(&gt_path)?)?;
        names.push(name);
        preds.push(pred);
        gts.push(gt);
    }
    if preds.is_empty() {
        return Err(Error::Data(format!("{} holds no .pgm predictions", pred_dir.display())));
    }
    let report = evaluate(&names, &preds, &gts, n_thresholds, form)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    write_text(&out.with_extension("csv"), &report.curve_csv())
}

pub fn sweep(m: &ExperimentManifest, epsilons: &[f64], resample: Option<usize>) -> Result<()> {
    m.prepare_output()?;
    let models = Models::load(m)?;
    let data = load_dataset(&m.dataset)?;
    let samples = test_split(&data)?;
    let template = m.attack.config(models.mean());
    let rows = epsilon_sweep(
        &models.predictors(m, resample),
        samples,
        epsilons,
        &m.defenses,
        &template,
        m.attack.max_iters.is_some(),
        m.seed,
    )?;
    write_text(&m.out("sweep.csv"), &sweep_csv(&rows))
}

#[derive(Serialize)]
struct AblationRow {
    config: String,
    clean_f_beta: f64,
    clean_mae: f64,
    attacked_f_beta: f64,
    attacked_mae: f64,
}

pub fn ablate(m: &ExperimentManifest, settings: &AttackSettings, resample: Option<usize>) -> Result<()> {
    m.prepare_output()?;
    let models = Models::load(m)?;
    let data = load_dataset(&m.dataset)?;
    let samples = test_split(&data)?;
    let masks: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let clean: Vec<ImageTensor> = samples.iter().map(|s| s.image.clone()).collect();
    let (attacked, _) = attack_all(&models.plain.net, samples, &settings.config(models.mean()))?;
    let p = models.predictors(m, resample);
    let mut rows = Vec::new();
    let mut csv = String::from("config,clean_f_beta,clean_mae,attacked_f_beta,attacked_mae\n");
    for d in [Defense::None, Defense::SwsOnly, Defense::CarOnly, Defense::Rosa] {
        let (clean_f_beta, clean_mae) = summary(&p.predict_all(&d, &clean, m.seed)?, &masks)?;
        let (attacked_f_beta, attacked_mae) = summary(&p.predict_all(&d, &attacked, m.seed)?, &masks)?;
        csv.push_str(&format!(
            "{},{clean_f_beta},{clean_mae},{attacked_f_beta},{attacked_mae}\n",
            d.name()
        ));
        rows.push(AblationRow {
            config: d.name(),
            clean_f_beta,
            clean_mae,
            attacked_f_beta,
            attacked_mae,
        });
    }
    write_json(&m.out("ablation.json"), &rows)?;
    write_text(&m.out("ablation.csv"), &csv)
}
