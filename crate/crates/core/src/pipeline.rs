//! The defended predictor and the experiment drivers built on it.
//!
//! ROSA runs the input through segment-wise shielding, the backbone, and
//! CRF restoration guided by the bilateral-filtered raw input. The
//! baselines apply a fixed input transformation before the backbone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{generate_adversarial, AttackConfig, AttackTrace};
use crate::backbone::Backbone;
use crate::crf::{mean_field_infer, CrfParams, UnaryField};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::eval::summary;
use crate::filters::{bilateral_filter, quant_baseline, smooth_baseline, BilateralConfig};
use crate::image::{to_mean_subtracted, BinaryMask, ImageTensor, SaliencyMap};
use crate::rng::Rng;
use crate::shielding::{shuffle_within_segments, slic_segment, SlicConfig};

/// Stream id for test-time shuffling; image `i` uses `child(i)` of it.
pub const SHIELD_STREAM: u64 = 0x5348_4945_4c44;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RosaConfig {
    pub slic: SlicConfig,
    pub bilateral: BilateralConfig,
    /// Number of independent shuffles averaged per prediction.
    pub resample: usize,
}

impl Default for RosaConfig {
    fn default() -> Self {
        Self {
            slic: SlicConfig::for_size(64, 64),
            bilateral: BilateralConfig::default(),
            resample: 1,
        }
    }
}

impl RosaConfig {
    pub fn validate(&self, pixel_count: usize) -> Result<()> {
        self.slic.validate(pixel_count)?;
        self.bilateral.validate()?;
        if self.resample == 0 {
            return Err(Error::Config("resample must be at least 1".into()));
        }
        Ok(())
    }
}

/// Backbone saliency of an `Rgb255` image.
pub fn backbone_saliency(model: &dyn Backbone, image: &ImageTensor, mean: &[f64]) -> Result<SaliencyMap> {
    model.saliency(&to_mean_subtracted(image, mean)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Shielding, no restoration.
    SwsOnly,
    /// Restoration, no shielding.
    CarOnly,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::SwsOnly, AblationMode::CarOnly, AblationMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::SwsOnly => "sws-only",
            AblationMode::CarOnly => "car-only",
            AblationMode::Full => "full",
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sws-only" => Ok(AblationMode::SwsOnly),
            "car-only" => Ok(AblationMode::CarOnly),
            "full" => Ok(AblationMode::Full),
            other => Err(Error::Config(format!(
                "unknown ablation mode '{other}' (expected sws-only, car-only or full)"
            ))),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Runs the selected subset of the defended pipeline on an `Rgb255` image.
pub fn ablation(
    image: &ImageTensor,
    mode: AblationMode,
    model: &dyn Backbone,
    mean: &[f64],
    crf: &CrfParams,
    cfg: &RosaConfig,
    rng: &Rng,
) -> Result<SaliencyMap> {
    cfg.validate(image.pixel_count())?;
    let shield = mode != AblationMode::CarOnly;
    let restore = mode != AblationMode::SwsOnly;
    let segments = if shield {
        Some(slic_segment(image, &cfg.slic)?)
    } else {
        None
    };
    let guidance = if restore {
        Some(bilateral_filter(image, &cfg.bilateral)?)
    } else {
        None
    };
    let draws = if shield { cfg.resample } else { 1 };
    let mut acc = vec![0.0; image.pixel_count()];
    for k in 0..draws {
        let input = match &segments {
            Some(seg) => {
                let draw_rng = if draws == 1 { rng.clone() } else { rng.child(k as u64) };
                shuffle_within_segments(image, seg, &draw_rng)?
            }
            None => image.clone(),
        };
        let scores = model.forward(&to_mean_subtracted(&input, mean)?)?;
        let map = match &guidance {
            Some(g) => mean_field_infer(&UnaryField::from_scores(&scores), g, crf)?,
            None => scores.saliency(),
        };
        if draws == 1 {
            return Ok(map);
        }
        for (a, v) in acc.iter_mut().zip(map.values()) {
            *a += v;
        }
    }
    let n = draws as f64;
    SaliencyMap::new(image.height(), image.width(), acc.into_iter().map(|v| v / n).collect())
}

/// Full pipeline: shield, backbone, CRF restoration with bilateral guidance
/// taken from the unshuffled input.
pub fn rosa_predict(
    image: &ImageTensor,
    model: &dyn Backbone,
    mean: &[f64],
    crf: &CrfParams,
    cfg: &RosaConfig,
    rng: &Rng,
) -> Result<SaliencyMap> {
    ablation(image, AblationMode::Full, model, mean, crf, cfg, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Defense {
    None,
    Smooth { radius: usize },
    Quant { bits: u32 },
    Rosa,
    SwsOnly,
    CarOnly,
}

impl Defense {
    pub fn name(&self) -> String {
        match self {
            Defense::None => "none".into(),
            Defense::Smooth { radius } => format!("smooth-r{radius}"),
            Defense::Quant { bits } => format!("quant-b{bits}"),
            Defense::Rosa => "rosa".into(),
            Defense::SwsOnly => "sws-only".into(),
            Defense::CarOnly => "car-only".into(),
        }
    }
}

impl FromStr for Defense {
    type Err = Error;

    /// Parses the names produced by [`Defense::name`]; `smooth` and `quant`
    /// alone take radius 1 and 4 bits.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown defense '{s}'"));
        Ok(match s {
            "none" => Defense::None,
            "rosa" | "full" => Defense::Rosa,
            "sws-only" => Defense::SwsOnly,
            "car-only" => Defense::CarOnly,
            "smooth" => Defense::Smooth { radius: 1 },
            "quant" => Defense::Quant { bits: 4 },
            _ => {
                if let Some(r) = s.strip_prefix("smooth-r") {
                    Defense::Smooth {
                        radius: r.parse().map_err(|_| bad())?,
                    }
                } else if let Some(b) = s.strip_prefix("quant-b") {
                    Defense::Quant {
                        bits: b.parse().map_err(|_| bad())?,
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

/// Everything needed to run any defense.
pub struct Predictors<'a> {
    /// The undefended model; also the one the attacks target.
    pub plain: &'a dyn Backbone,
    /// The backbone fine-tuned together with the CRF.
    pub rosa: &'a dyn Backbone,
    pub crf: CrfParams,
    pub mean: Vec<f64>,
    pub cfg: RosaConfig,
}

impl Predictors<'_> {
    /// Prediction for image `index`, which selects its shuffle stream.
    pub fn predict(&self, defense: &Defense, image: &ImageTensor, index: usize, seed: u64) -> Result<SaliencyMap> {
        let rng = Rng::with_stream(seed, SHIELD_STREAM).child(index as u64);
        match *defense {
            Defense::None => backbone_saliency(self.plain, image, &self.mean),
            Defense::Smooth { radius } => backbone_saliency(self.plain, &smooth_baseline(image, radius)?, &self.mean),
            Defense::Quant { bits } => backbone_saliency(self.plain, &quant_baseline(image, bits)?, &self.mean),
            Defense::Rosa => rosa_predict(image, self.rosa, &self.mean, &self.crf, &self.cfg, &rng),
            Defense::SwsOnly => ablation(
                image,
                AblationMode::SwsOnly,
                self.rosa,
                &self.mean,
                &self.crf,
                &self.cfg,
                &rng,
            ),
            Defense::CarOnly => ablation(
                image,
                AblationMode::CarOnly,
                self.rosa,
                &self.mean,
                &self.crf,
                &self.cfg,
                &rng,
            ),
        }
    }

    pub fn predict_all(&self, defense: &Defense, images: &[ImageTensor], seed: u64) -> Result<Vec<SaliencyMap>> {
        images
            .iter()
            .enumerate()
            .map(|(i, x)| self.predict(defense, x, i, seed))
            .collect()
    }
}

/// Attacks every sample against `model`. `epsilon = 0` returns the clean
/// images without running the attack.
pub fn attack_all(
    model: &dyn Backbone,
    samples: &[Sample],
    cfg: &AttackConfig,
) -> Result<(Vec<ImageTensor>, Vec<AttackTrace>)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        if cfg.epsilon == 0.0 {
            images.push(s.image.clone());
            traces.push(AttackTrace {
                iterations: 0,
                final_set_size: s.mask.len(),
                steps: Vec::new(),
                zero_gradient: false,
            });
        } else {
            let (x, t) = generate_adversarial(model, &s.image, &s.mask, cfg)?;
            images.push(x);
            traces.push(t);
        }
    }
    Ok((images, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub defense: String,
    pub f_beta: f64,
    pub mae: f64,
}

/// For each budget: attack the samples against the plain model (with the
/// template's `alpha` and strict-clip setting and the default iteration cap
/// for that budget unless the template pins one), then score every defense.
pub fn epsilon_sweep(
    predictors: &Predictors<'_>,
    samples: &[Sample],
    eps_list: &[f64],
    defenses: &[Defense],
    template: &AttackConfig,
    fixed_iters: bool,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::Data("sweep needs at least one sample".into()));
    }
    let masks: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let mut rows = Vec::with_capacity(eps_list.len() * defenses.len());
    for &epsilon in eps_list {
        let mut cfg = template.clone();
        cfg.epsilon = epsilon;
        if !fixed_iters {
            cfg.max_iters = crate::attack::default_max_iters(epsilon, cfg.alpha);
        }
        let (images, _) = attack_all(predictors.plain, samples, &cfg)?;
        for d in defenses {
            let maps = predictors.predict_all(d, &images, seed)?;
            let (f_beta, mae) = summary(&maps, &masks)?;
            rows.push(SweepRow {
                epsilon,
                defense: d.name(),
                f_beta,
                mae,
            });
        }
    }
    Ok(rows)
}

/// `epsilon,defense,f_beta,mae` rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("epsilon,defense,f_beta,mae\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epsilon, r.defense, r.f_beta, r.mae));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defense_names_round_trip() {
        for d in [
            Defense::None,
            Defense::Smooth { radius: 2 },
            Defense::Quant { bits: 3 },
            Defense::Rosa,
            Defense::SwsOnly,
            Defense::CarOnly,
        ] {
            assert_eq!(d.name().parse::<Defense>().unwrap(), d);
        }
        assert!("smooth-rx".parse::<Defense>().is_err());
        assert!("jpeg".parse::<Defense>().is_err());
    }
    use crate::backbone::ConvNet;
    use crate::image::ValueSpace;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        let data = (0..h * w * 3).map(|_| rng.below(256) as f64).collect();
        ImageTensor::new(h, w, 3, data, ValueSpace::Rgb255).unwrap()
    }

    fn neutral_crf() -> CrfParams {
        CrfParams {
            omega1: 0.0,
            omega2: 0.0,
            ..CrfParams::default()
        }
    }

    fn cfg(k: usize) -> RosaConfig {
        RosaConfig {
            slic: SlicConfig {
                k,
                ..SlicConfig::default()
            },
            ..RosaConfig::default()
        }
    }

    const MEAN: [f64; 3] = [120.0, 120.0, 120.0];

    #[test]
    fn neutralized_pipeline_is_the_backbone() {
        let net = ConvNet::reference(3);
        let x = image(12, 10, 4);
        let rosa = rosa_predict(&x, &net, &MEAN, &neutral_crf(), &cfg(120), &Rng::new(1)).unwrap();
        let plain = backbone_saliency(&net, &x, &MEAN).unwrap();
        assert_eq!(rosa, plain);
    }

    #[test]
    fn ablations_with_neutral_crf() {
        let net = ConvNet::reference(5);
        let x = image(16, 16, 6);
        let rng = Rng::new(2);
        let c = cfg(6);
        let full = ablation(&x, AblationMode::Full, &net, &MEAN, &neutral_crf(), &c, &rng).unwrap();
        let sws = ablation(&x, AblationMode::SwsOnly, &net, &MEAN, &neutral_crf(), &c, &rng).unwrap();
        assert_eq!(full, sws);
        let car = ablation(&x, AblationMode::CarOnly, &net, &MEAN, &neutral_crf(), &c, &rng).unwrap();
        assert_eq!(car, backbone_saliency(&net, &x, &MEAN).unwrap());
    }

    #[test]
    fn prediction_is_deterministic() {
        let net = ConvNet::reference(7);
        let x = image(16, 16, 8);
        let c = RosaConfig { resample: 3, ..cfg(6) };
        let a = rosa_predict(&x, &net, &MEAN, &CrfParams::default(), &c, &Rng::new(9)).unwrap();
        let b = rosa_predict(&x, &net, &MEAN, &CrfParams::default(), &c, &Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resampling_averages_single_draws() {
        let net = ConvNet::reference(7);
        let x = image(12, 12, 8);
        let rng = Rng::new(4);
        let many = rosa_predict(
            &x,
            &net,
            &MEAN,
            &neutral_crf(),
            &RosaConfig { resample: 2, ..cfg(5) },
            &rng,
        )
        .unwrap();
        let one = |k| rosa_predict(&x, &net, &MEAN, &neutral_crf(), &cfg(5), &rng.child(k)).unwrap();
        let (a, b) = (one(0), one(1));
        for i in 0..many.len() {
            assert!((many.values()[i] - (a.values()[i] + b.values()[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ablation_mode_parsing() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!(matches!("both".parse::<AblationMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_budget_sweep_scores_clean_data() {
        let net = ConvNet::reference(11);
        let samples: Vec<Sample> = (0..2)
            .map(|i| Sample {
                name: format!("{i}"),
                image: image(10, 10, 20 + i),
                mask: BinaryMask::new(10, 10, (0..100).map(|p| u8::from(p % 7 == 0)).collect()).unwrap(),
            })
            .collect();
        let p = Predictors {
            plain: &net,
            rosa: &net,
            crf: CrfParams::default(),
            mean: MEAN.to_vec(),
            cfg: cfg(4),
        };
        let rows = epsilon_sweep(
            &p,
            &samples,
            &[0.0],
            &[Defense::None],
            &AttackConfig::new(0.0, MEAN.to_vec()),
            false,
            1,
        )
        .unwrap();
        let clean: Vec<SaliencyMap> = samples
            .iter()
            .map(|s| backbone_saliency(&net, &s.image, &MEAN).unwrap())
            .collect();
        let masks: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
        let (f, m) = summary(&clean, &masks).unwrap();
        assert_eq!(
            rows,
            vec![SweepRow {
                epsilon: 0.0,
                defense: "none".into(),
                f_beta: f,
                mae: m
            }]
        );
        assert_eq!(sweep_csv(&rows).lines().count(), 2);
    }
}
