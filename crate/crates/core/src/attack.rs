//! Non-targeted white-box attacks on dense saliency models.
//!
//! [`generate_adversarial`] pushes every still-correct pixel towards the
//! wrong class with an L-infinity-normalized gradient step until the
//! perturbation budget is spent, the iteration cap is hit, or no pixel is
//! classified correctly. [`fgsm`] and [`iterative_fgsm`] are the classic
//! sign-gradient references.

use serde::{Deserialize, Serialize};

use crate::backbone::{cross_entropy, Backbone, ScoreWeights};
use crate::error::{Error, Result};
use crate::image::{round_half_away, to_mean_subtracted, BinaryMask, ImageTensor, ValueSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity budget in 0-255 units.
    pub epsilon: f64,
    /// Step length in 0-255 units.
    pub alpha: f64,
    pub max_iters: usize,
    /// Per-channel mean pixel subtracted before the model sees the input.
    pub mean_pixel: Vec<f64>,
    /// Clip the final perturbation into the budget before rounding.
    pub strict_clip: bool,
}

/// `min(100, ceil(2 epsilon / alpha) + 20)`.
pub fn default_max_iters(epsilon: f64, alpha: f64) -> usize {
    let steps = (2.0 * epsilon / alpha).ceil().max(0.0) as usize;
    (steps + 20).min(100)
}

impl AttackConfig {
    /// Defaults: `alpha = 1`, the default iteration cap, strict clipping.
    pub fn new(epsilon: f64, mean_pixel: Vec<f64>) -> Self {
        Self {
            epsilon,
            alpha: 1.0,
            max_iters: default_max_iters(epsilon, 1.0),
            mean_pixel,
            strict_clip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.mean_pixel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mean pixel must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `||x_t - x||_inf` after the step.
    pub linf: f64,
    /// Fraction of pixels whose predicted class differs from the mask.
    pub misclassified_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub iterations: usize,
    pub final_set_size: usize,
    pub steps: Vec<StepRecord>,
    /// The loop stopped on a zero gradient.
    pub zero_gradient: bool,
}

fn check_mask(x: &ImageTensor, y: &BinaryMask) -> Result<()> {
    if !x.same_dims(y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Pixels whose argmax class (ties to class 0) equals the mask, ascending.
/// `x_t` is fed to the model as is.
pub fn correctly_classified_set(model: &dyn Backbone, x_t: &ImageTensor, y: &BinaryMask) -> Result<Vec<usize>> {
    check_mask(x_t, y)?;
    let pred = model.forward(x_t)?.argmax();
    Ok(pred
        .iter()
        .zip(y.values())
        .enumerate()
        .filter(|(_, (p, t))| p == t)
        .map(|(i, _)| i)
        .collect())
}

/// Raw ascent direction and whether it vanished.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationStep {
    pub direction: ImageTensor,
    pub zero: bool,
}

/// `sum_{i in S} grad(f_{i,1-y_i} - f_{i,y_i})` at `x_t`.
pub fn perturbation_step(
    model: &dyn Backbone,
    x_t: &ImageTensor,
    y: &BinaryMask,
    set: &[usize],
) -> Result<PerturbationStep> {
    check_mask(x_t, y)?;
    if set.is_empty() {
        return Err(Error::Data("perturbation step needs a non-empty pixel set".into()));
    }
    let n = y.len();
    let mut weights: ScoreWeights = vec![[0.0; 2]; n];
    for &i in set {
        if i >= n {
            return Err(Error::Shape(format!("pixel {i} outside a {n}-pixel image")));
        }
        let t = usize::from(y.values()[i]);
        weights[i][t] = -1.0;
        weights[i][1 - t] = 1.0;
    }
    let direction = model.input_gradient(x_t, &weights)?;
    let zero = direction.data().iter().all(|&v| v == 0.0);
    Ok(PerturbationStep { direction, zero })
}

fn misclassified_fraction(model: &dyn Backbone, x_t: &ImageTensor, y: &BinaryMask) -> Result<(f64, Vec<usize>)> {
    let set = correctly_classified_set(model, x_t, y)?;
    let n = y.len().max(1);
    Ok(((n - set.len()) as f64 / n as f64, set))
}

/// Final integer image: `x + r` rounded, with `r` clipped to the budget
/// first when `strict`, and the result kept inside the integer budget and
/// `[0, 255]`.
fn finalize(x: &ImageTensor, x_t: &[f64], epsilon: f64, strict: bool) -> Result<ImageTensor> {
    let data = x
        .data()
        .iter()
        .zip(x_t)
        .map(|(&x0, &xt)| {
            if strict {
                let r = (xt - x0).clamp(-epsilon, epsilon);
                let lo = (x0 - epsilon).ceil().max(0.0);
                let hi = (x0 + epsilon).floor().min(255.0);
                round_half_away(x0 + r).clamp(lo, hi)
            } else {
                round_half_away(xt).clamp(0.0, 255.0)
            }
        })
        .collect();
    x.with_data(data, ValueSpace::Rgb255)
}

/// Iterative gradient attack. `x` must be an integer-valued `Rgb255` image;
/// the output is one too.
pub fn generate_adversarial(
    model: &dyn Backbone,
    x: &ImageTensor,
    y: &BinaryMask,
    cfg: &AttackConfig,
) -> Result<(ImageTensor, AttackTrace)> {
    cfg.validate()?;
    x.require_space(ValueSpace::Rgb255)?;
    check_mask(x, y)?;
    let mut trace = AttackTrace {
        iterations: 0,
        final_set_size: y.len(),
        steps: Vec::new(),
        zero_gradient: false,
    };
    let mut current = x.data().to_vec();
    let mut set: Vec<usize> = (0..y.len()).collect();
    let mut e = 0.0;
    while trace.iterations < cfg.max_iters && e <= cfg.epsilon && !set.is_empty() {
        let xt = x.with_data(current.clone(), ValueSpace::Rgb255)?;
        let step = perturbation_step(model, &to_mean_subtracted(&xt, &cfg.mean_pixel)?, y, &set)?;
        if step.zero {
            trace.zero_gradient = true;
            break;
        }
        let norm = step.direction.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = cfg.alpha / norm;
        for (c, d) in current.iter_mut().zip(step.direction.data()) {
            *c = (*c + scale * d).clamp(0.0, 255.0);
        }
        trace.iterations += 1;
        e = x
            .data()
            .iter()
            .zip(&current)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let xt = x.with_data(current.clone(), ValueSpace::Rgb255)?;
        let (frac, next) = misclassified_fraction(model, &to_mean_subtracted(&xt, &cfg.mean_pixel)?, y)?;
        set = next;
        trace.steps.push(StepRecord {
            linf: e,
            misclassified_fraction: frac,
        });
    }
    trace.final_set_size = set.len();
    Ok((finalize(x, &current, cfg.epsilon, cfg.strict_clip)?, trace))
}

/// `d/dx` of the pixel-mean cross-entropy at `x` (in `Rgb255` units).
fn loss_gradient(model: &dyn Backbone, x: &ImageTensor, y: &BinaryMask, mean: &[f64]) -> Result<Vec<f64>> {
    let xs = to_mean_subtracted(x, mean)?;
    let scores = model.forward(&xs)?;
    let (_, weights) = cross_entropy(&scores, y)?;
    Ok(model.input_gradient(&xs, &weights)?.into_data())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed step `x + epsilon * sign(grad L)`, clamped to `[0, 255]`.
/// Not rounded.
pub fn fgsm(model: &dyn Backbone, x: &ImageTensor, y: &BinaryMask, epsilon: f64, mean: &[f64]) -> Result<ImageTensor> {
    x.require_space(ValueSpace::Rgb255)?;
    check_mask(x, y)?;
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let g = loss_gradient(model, x, y, mean)?;
    let data = x
        .data()
        .iter()
        .zip(&g)
        .map(|(v, d)| (v + epsilon * sign(*d)).clamp(0.0, 255.0))
        .collect();
    x.with_data(data, ValueSpace::Rgb255)
}

/// `cfg.max_iters` sign steps of length `cfg.alpha`, each followed by a clip
/// into the `epsilon` ball around `x` and into `[0, 255]`. Not rounded.
pub fn iterative_fgsm(
    model: &dyn Backbone,
    x: &ImageTensor,
    y: &BinaryMask,
    cfg: &AttackConfig,
) -> Result<ImageTensor> {
    cfg.validate()?;
    x.require_space(ValueSpace::Rgb255)?;
    check_mask(x, y)?;
    let mut current = x.clone();
    for _ in 0..cfg.max_iters {
        let g = loss_gradient(model, &current, y, &cfg.mean_pixel)?;
        let data = current
            .data()
            .iter()
            .zip(x.data())
            .zip(&g)
            .map(|((v, x0), d)| {
                (v + cfg.alpha * sign(*d))
                    .clamp(x0 - cfg.epsilon, x0 + cfg.epsilon)
                    .clamp(0.0, 255.0)
            })
            .collect();
        current = x.with_data(data, ValueSpace::Rgb255)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ConvLayer, ConvNet, Padding, PixelScores};
    use crate::rng::Rng;

    /// Single 1x1 layer: `f_c = sum_k w[c][k] x_k + b_c`.
    fn linear(w: [[f64; 3]; 2], b: [f64; 2]) -> ConvNet {
        let mut l = ConvLayer::zeros(2, 3, 1, 1).unwrap();
        for c in 0..2 {
            l.weight[c * 3..c * 3 + 3].copy_from_slice(&w[c]);
        }
        l.bias.copy_from_slice(&b);
        ConvNet::new(vec![l], Padding::Reflect).unwrap()
    }

    fn rgb(h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
        let data = (0..h * w * 3).map(|_| rng.below(256) as f64).collect();
        ImageTensor::new(h, w, 3, data, ValueSpace::Rgb255).unwrap()
    }

    fn random_net(seed: u64) -> ConvNet {
        let mut rng = Rng::new(seed);
        let mut net = ConvNet::he_init(&[3, 4, 2], 64.0, &mut rng).unwrap();
        for l in net.layers_mut() {
            for b in &mut l.bias {
                *b = rng.uniform_range(-0.5, 0.5);
            }
        }
        net
    }

    fn mask(h: usize, w: usize, rng: &mut Rng) -> BinaryMask {
        BinaryMask::new(h, w, (0..h * w).map(|_| rng.below(2) as u8).collect()).unwrap()
    }

    const MEAN: [f64; 3] = [100.0, 110.0, 120.0];

    #[test]
    fn constant_model_sets() {
        let net = linear([[0.0; 3]; 2], [0.0, 1.0]);
        let x = ImageTensor::filled(3, 3, 3, 10.0, ValueSpace::MeanSubtracted).unwrap();
        let ones = BinaryMask::new(3, 3, vec![1; 9]).unwrap();
        let zeros = BinaryMask::new(3, 3, vec![0; 9]).unwrap();
        assert_eq!(
            correctly_classified_set(&net, &x, &ones).unwrap(),
            (0..9).collect::<Vec<_>>()
        );
        assert!(correctly_classified_set(&net, &x, &zeros).unwrap().is_empty());
        // equal scores are class 0
        let tie = linear([[0.0; 3]; 2], [0.0, 0.0]);
        assert_eq!(correctly_classified_set(&tie, &x, &zeros).unwrap().len(), 9);
    }

    #[test]
    fn set_matches_naive_argmax() {
        let mut rng = Rng::new(3);
        let net = random_net(4);
        let x = to_mean_subtracted(&rgb(6, 7, &mut rng), &MEAN).unwrap();
        let y = mask(6, 7, &mut rng);
        let set = correctly_classified_set(&net, &x, &y).unwrap();
        let scores: PixelScores = net.forward(&x).unwrap();
        let naive: Vec<usize> = (0..42)
            .filter(|&i| {
                let s = scores.scores()[i];
                let c = if s[1] > s[0] { 1 } else { 0 };
                c == y.values()[i]
            })
            .collect();
        assert_eq!(set, naive);
    }

    #[test]
    fn linear_model_step_is_analytic() {
        let w = [[0.5, -1.0, 2.0], [1.5, 0.25, -3.0]];
        let net = linear(w, [0.1, -0.2]);
        let mut rng = Rng::new(9);
        let x = to_mean_subtracted(&rgb(2, 3, &mut rng), &MEAN).unwrap();
        let y = BinaryMask::new(2, 3, vec![0, 1, 1, 0, 1, 0]).unwrap();
        let set = [0, 1, 4];
        let step = perturbation_step(&net, &x, &y, &set).unwrap();
        assert!(!step.zero);
        for i in 0..6 {
            for k in 0..3 {
                let expected = if set.contains(&i) {
                    let t = y.values()[i] as usize;
                    w[1 - t][k] - w[t][k]
                } else {
                    0.0
                };
                assert!((step.direction.pixel(i)[k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_pixel_step_equals_input_gradient() {
        let net = random_net(5);
        let mut rng = Rng::new(6);
        let x = to_mean_subtracted(&rgb(5, 5, &mut rng), &MEAN).unwrap();
        let y = mask(5, 5, &mut rng);
        let step = perturbation_step(&net, &x, &y, &[7]).unwrap();
        let mut wts = vec![[0.0; 2]; 25];
        let t = y.values()[7] as usize;
        wts[7][t] = -1.0;
        wts[7][1 - t] = 1.0;
        assert_eq!(step.direction, net.input_gradient(&x, &wts).unwrap());
    }

    #[test]
    fn step_matches_finite_differences() {
        let net = random_net(11);
        let mut rng = Rng::new(12);
        let x = to_mean_subtracted(&rgb(5, 5, &mut rng), &MEAN).unwrap();
        let y = mask(5, 5, &mut rng);
        let set: Vec<usize> = (0..25).step_by(2).collect();
        let step = perturbation_step(&net, &x, &y, &set).unwrap();
        let objective = |img: &ImageTensor| -> f64 {
            let s = net.forward(img).unwrap();
            set.iter()
                .map(|&i| {
                    let t = y.values()[i] as usize;
                    s.scores()[i][1 - t] - s.scores()[i][t]
                })
                .sum()
        };
        let h = 1e-3;
        for k in 0..x.data().len() {
            let mut plus = x.data().to_vec();
            plus[k] += h;
            let mut minus = x.data().to_vec();
            minus[k] -= h;
            let fd = (objective(&x.with_data(plus, ValueSpace::MeanSubtracted).unwrap())
                - objective(&x.with_data(minus, ValueSpace::MeanSubtracted).unwrap()))
                / (2.0 * h);
            let an = step.direction.data()[k];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                "{k}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn empty_set_rejected_and_zero_gradient_flagged() {
        let net = linear([[0.0; 3]; 2], [0.0, 1.0]);
        let x = ImageTensor::filled(2, 2, 3, 50.0, ValueSpace::Rgb255).unwrap();
        let y = BinaryMask::new(2, 2, vec![1; 4]).unwrap();
        assert!(perturbation_step(&net, &x, &y, &[]).is_err());
        let (adv, trace) = generate_adversarial(&net, &x, &y, &AttackConfig::new(8.0, MEAN.to_vec())).unwrap();
        assert!(trace.zero_gradient);
        assert_eq!(trace.iterations, 0);
        assert_eq!(adv, x);
    }

    #[test]
    fn zero_budget_and_zero_iterations_return_input() {
        let net = random_net(1);
        let mut rng = Rng::new(2);
        let x = rgb(6, 6, &mut rng);
        let y = mask(6, 6, &mut rng);
        let (adv, _) = generate_adversarial(&net, &x, &y, &AttackConfig::new(0.0, MEAN.to_vec())).unwrap();
        assert_eq!(adv, x);
        let mut cfg = AttackConfig::new(10.0, MEAN.to_vec());
        cfg.max_iters = 0;
        let (adv, trace) = generate_adversarial(&net, &x, &y, &cfg).unwrap();
        assert_eq!(adv, x);
        assert_eq!(trace.iterations, 0);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn strict_clip_bounds_and_integer_output() {
        let net = random_net(21);
        let mut rng = Rng::new(22);
        for eps in [0.5, 1.0, 3.0, 7.5] {
            let x = rgb(8, 8, &mut rng);
            let y = mask(8, 8, &mut rng);
            let mut cfg = AttackConfig::new(eps, MEAN.to_vec());
            cfg.alpha = 2.0;
            let (adv, trace) = generate_adversarial(&net, &x, &y, &cfg).unwrap();
            assert!(trace.iterations <= cfg.max_iters);
            assert!(adv.linf_distance(&x).unwrap() <= eps);
            assert!(adv.data().iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v)));
        }
    }

    #[test]
    fn verbatim_mode_may_overshoot_by_one_step() {
        let net = random_net(31);
        let mut rng = Rng::new(32);
        let x = rgb(8, 8, &mut rng);
        let y = mask(8, 8, &mut rng);
        let mut cfg = AttackConfig::new(2.0, MEAN.to_vec());
        cfg.alpha = 1.5;
        cfg.strict_clip = false;
        let (adv, trace) = generate_adversarial(&net, &x, &y, &cfg).unwrap();
        let d = adv.linf_distance(&x).unwrap();
        assert!(d <= cfg.epsilon + cfg.alpha + 0.5);
        assert!(
            trace.steps.last().unwrap().linf > cfg.epsilon
                || trace.iterations == cfg.max_iters
                || trace.final_set_size == 0
        );
    }

    #[test]
    fn attack_is_deterministic() {
        let net = random_net(41);
        let mut rng = Rng::new(42);
        let x = rgb(8, 8, &mut rng);
        let y = mask(8, 8, &mut rng);
        let cfg = AttackConfig::new(6.0, MEAN.to_vec());
        assert_eq!(
            generate_adversarial(&net, &x, &y, &cfg).unwrap(),
            generate_adversarial(&net, &x, &y, &cfg).unwrap()
        );
    }

    #[test]
    fn default_iteration_cap() {
        assert_eq!(default_max_iters(0.0, 1.0), 20);
        assert_eq!(default_max_iters(20.0, 1.0), 60);
        assert_eq!(default_max_iters(2.5, 1.0), 25);
        assert_eq!(default_max_iters(50.0, 1.0), 100);
    }

    #[test]
    fn fgsm_examples() {
        let net = random_net(51);
        let mut rng = Rng::new(52);
        let x = ImageTensor::new(
            5,
            5,
            3,
            (0..75).map(|_| 20.0 + rng.below(200) as f64).collect(),
            ValueSpace::Rgb255,
        )
        .unwrap();
        let y = mask(5, 5, &mut rng);
        assert_eq!(fgsm(&net, &x, &y, 0.0, &MEAN).unwrap(), x);
        let adv = fgsm(&net, &x, &y, 4.0, &MEAN).unwrap();
        let g = loss_gradient(&net, &x, &y, &MEAN).unwrap();
        for ((a, b), d) in adv.data().iter().zip(x.data()).zip(&g) {
            if *d != 0.0 {
                assert_eq!((a - b).abs(), 4.0);
            }
        }
        // sign pattern against central differences of the loss
        let loss = |img: &ImageTensor| {
            let s = net.forward(&to_mean_subtracted(img, &MEAN).unwrap()).unwrap();
            cross_entropy(&s, &y).unwrap().0
        };
        let h = 1e-3;
        let mut checked = 0;
        for k in 0..75 {
            let mut p = x.data().to_vec();
            p[k] += h;
            let mut m = x.data().to_vec();
            m[k] -= h;
            let fd = (loss(&x.with_data(p, ValueSpace::Rgb255).unwrap())
                - loss(&x.with_data(m, ValueSpace::Rgb255).unwrap()))
                / (2.0 * h);
            if fd.abs() > 1e-9 {
                assert_eq!(sign(fd), sign(g[k]), "coordinate {k}");
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn iterative_fgsm_examples() {
        let net = random_net(61);
        let mut rng = Rng::new(62);
        let x = rgb(6, 6, &mut rng);
        let y = mask(6, 6, &mut rng);
        let mut cfg = AttackConfig::new(5.0, MEAN.to_vec());
        cfg.alpha = 5.0;
        cfg.max_iters = 1;
        assert_eq!(
            iterative_fgsm(&net, &x, &y, &cfg).unwrap(),
            fgsm(&net, &x, &y, 5.0, &MEAN).unwrap()
        );
        cfg.alpha = 2.0;
        cfg.max_iters = 7;
        let adv = iterative_fgsm(&net, &x, &y, &cfg).unwrap();
        assert!(adv.linf_distance(&x).unwrap() <= 5.0);
    }

    #[test]
    fn iterative_fgsm_linear_trace_by_hand() {
        // f_1 - f_0 = x_r - x_g on one pixel labelled 1: loss decreases in
        // x_r and increases in x_g, so each step moves r down and g up.
        let net = linear([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]], [0.0, 0.0]);
        let x = ImageTensor::new(1, 1, 3, vec![100.0, 100.0, 100.0], ValueSpace::Rgb255).unwrap();
        let y = BinaryMask::new(1, 1, vec![1]).unwrap();
        let cfg = AttackConfig {
            epsilon: 2.5,
            alpha: 1.0,
            max_iters: 3,
            mean_pixel: MEAN.to_vec(),
            strict_clip: true,
        };
        let adv = iterative_fgsm(&net, &x, &y, &cfg).unwrap();
        assert_eq!(adv.data(), &[97.5, 102.5, 100.0]);
    }
}
