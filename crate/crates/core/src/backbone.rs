//! Dense two-class saliency backbones.
//!
//! [`Backbone`] is the interface the attack, the defenses and the trainer
//! program against: class scores per pixel, plus exact gradients of any
//! weighted score sum with respect to the input and (for
//! [`TrainableBackbone`]) the parameters.
//!
//! [`ConvNet`] is the reference implementation: a stack of stride-1
//! convolutions with ReLU in between and padding that preserves the spatial
//! size, evaluated as im2col followed by a GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::reflect101;
use crate::image::{BinaryMask, ImageTensor, SaliencyMap, ValueSpace};
use crate::rng::Rng;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pre-softmax scores `(f_{i,0}, f_{i,1})` per pixel; class 1 is salient.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelScores {
    height: usize,
    width: usize,
    scores: Vec<[f64; 2]>,
}

impl PixelScores {
    pub fn new(height: usize, width: usize, scores: Vec<[f64; 2]>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::Shape("score count does not match dimensions".into()));
        }
        Ok(Self { height, width, scores })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[[f64; 2]] {
        &self.scores
    }

    /// `f_{i,1} - f_{i,0}`, the log-odds of the salient class.
    pub fn logits(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s[1] - s[0]).collect()
    }

    /// Softmax probability of the salient class.
    pub fn saliency(&self) -> SaliencyMap {
        let values = self.scores.iter().map(|s| sigmoid(s[1] - s[0])).collect();
        SaliencyMap::new(self.height, self.width, values).expect("sigmoid is unit-bounded")
    }

    /// Predicted class per pixel; ties resolve to class 0.
    pub fn argmax(&self) -> Vec<u8> {
        self.scores.iter().map(|s| u8::from(s[1] > s[0])).collect()
    }
}

/// Per-pixel coefficients `w_{i,c}` of a weighted score sum
/// `sum_{i,c} w_{i,c} f_{i,c}`.
pub type ScoreWeights = Vec<[f64; 2]>;

/// Mean pixel-wise cross-entropy of the class scores against `gt`, and its
/// gradient with respect to the scores.
pub fn cross_entropy(scores: &PixelScores, gt: &BinaryMask) -> Result<(f64, ScoreWeights)> {
    if gt.height() != scores.height || gt.width() != scores.width {
        return Err(Error::Shape("mask does not match scores".into()));
    }
    let n = scores.scores.len() as f64;
    let mut loss = 0.0;
    let grad = scores
        .scores
        .iter()
        .zip(gt.values())
        .map(|(s, &y)| {
            let p1 = sigmoid(s[1] - s[0]);
            // -log softmax_y = softplus(f_other - f_y)
            let margin = if y == 1 { s[0] - s[1] } else { s[1] - s[0] };
            loss += softplus(margin);
            let d1 = (p1 - f64::from(y)) / n;
            [-d1, d1]
        })
        .collect();
    Ok((loss / n, grad))
}

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Chain rule through the softmax: turns `dL/d saliency_i` into score
/// weights `dL/d f_{i,c}`.
pub fn saliency_to_score_weights(scores: &PixelScores, upstream: &[f64]) -> Result<ScoreWeights> {
    if upstream.len() != scores.scores.len() {
        return Err(Error::Shape("upstream gradient length".into()));
    }
    Ok(scores
        .scores
        .iter()
        .zip(upstream)
        .map(|(s, g)| {
            let p = sigmoid(s[1] - s[0]);
            let d = g * p * (1.0 - p);
            [-d, d]
        })
        .collect())
}

pub trait Backbone: Send + Sync {
    fn in_channels(&self) -> usize;

    /// Class scores for a mean-subtracted image.
    fn forward(&self, image: &ImageTensor) -> Result<PixelScores>;

    /// `d/dx sum_{i,c} weights[i][c] * f_{i,c}(x)`.
    fn input_gradient(&self, image: &ImageTensor, weights: &ScoreWeights) -> Result<ImageTensor>;

    fn saliency(&self, image: &ImageTensor) -> Result<SaliencyMap> {
        Ok(self.forward(image)?.saliency())
    }
}

pub trait TrainableBackbone: Backbone + Clone {
    fn param_count(&self) -> usize;

    /// All trainable parameters in a fixed order.
    fn param_vec(&self) -> Vec<f64>;

    fn set_param_vec(&mut self, params: &[f64]) -> Result<()>;

    /// Scores plus `d/dtheta sum_{i,c} w_{i,c} f_{i,c}` in `param_vec` order.
    /// `weights` is produced from the scores by the caller.
    fn scores_and_param_gradient(
        &self,
        image: &ImageTensor,
        weights: &dyn Fn(&PixelScores) -> Result<ScoreWeights>,
    ) -> Result<(PixelScores, Vec<f64>)>;

    fn param_gradient(&self, image: &ImageTensor, weights: &ScoreWeights) -> Result<Vec<f64>> {
        let w = weights.clone();
        Ok(self.scores_and_param_gradient(image, &move |_| Ok(w.clone()))?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Reflect-101 borders.
    #[default]
    Reflect,
    /// Wrap-around borders.
    Periodic,
}

impl Padding {
    #[inline]
    fn index(self, i: isize, n: usize) -> usize {
        match self {
            Padding::Reflect => reflect101(i, n),
            Padding::Periodic => i.rem_euclid(n as isize) as usize,
        }
    }
}

/// Stride-1, size-preserving convolution. `weight` is laid out
/// `(out_ch, in_ch, kh, kw)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::Shape("kernel sizes must be odd".into()));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kh,
            kw,
            weight: vec![0.0; out_ch * in_ch * kh * kw],
            bias: vec![0.0; out_ch],
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Fully convolutional network with ReLU between layers and two output
/// channels (non-salient, salient).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    layers: Vec<ConvLayer>,
    padding: Padding,
    /// Fixed divisor applied to the input before the first layer.
    input_scale: f64,
}

/// The network is the backbone parameter set.
pub type BackboneParams = ConvNet;

struct LayerTape {
    cols: Vec<f64>,
    /// Pre-activation output; ReLU is applied after every layer but the last.
    pre: Vec<f64>,
}

struct Tape {
    height: usize,
    width: usize,
    layers: Vec<LayerTape>,
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe the row-major buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl ConvNet {
    pub fn new(layers: Vec<ConvLayer>, padding: Padding) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(Error::Shape(format!(
                    "layer outputs {} channels but next layer expects {}",
                    pair[0].out_ch, pair[1].in_ch
                )));
            }
        }
        for l in &layers {
            if l.weight.len() != l.out_ch * l.patch_len() || l.bias.len() != l.out_ch {
                return Err(Error::Shape("layer buffer sizes".into()));
            }
            if l.kh % 2 == 0 || l.kw % 2 == 0 {
                return Err(Error::Shape("kernel sizes must be odd".into()));
            }
        }
        if layers.last().map(|l| l.out_ch) != Some(2) {
            return Err(Error::Shape("final layer must output 2 channels".into()));
        }
        Ok(Self {
            layers,
            padding,
            input_scale: 1.0,
        })
    }

    /// He-initialized stack of 3x3 convolutions over `channels` widths,
    /// e.g. `[3, 16, 16, 16, 2]`, reading its input divided by `input_scale`.
    pub fn he_init(channels: &[usize], input_scale: f64, rng: &mut Rng) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::Shape("need at least input and output widths".into()));
        }
        let mut layers = Vec::with_capacity(channels.len() - 1);
        for pair in channels.windows(2) {
            let mut layer = ConvLayer::zeros(pair[1], pair[0], 3, 3)?;
            let fan_in = layer.patch_len() as f64;
            let std = (2.0 / fan_in).sqrt();
            for w in &mut layer.weight {
                *w = rng.normal() * std;
            }
            layers.push(layer);
        }
        Self::new(layers, Padding::Reflect)?.with_input_scale(input_scale)
    }

    pub fn with_input_scale(mut self, input_scale: f64) -> Result<Self> {
        if !(input_scale > 0.0 && input_scale.is_finite()) {
            return Err(Error::Shape(format!("input scale must be positive, got {input_scale}")));
        }
        self.input_scale = input_scale;
        Ok(self)
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    /// Reference architecture: 3 -> 16 -> 16 -> 16 -> 2.
    pub fn reference(seed: u64) -> Self {
        Self::he_init(&[3, 16, 16, 16, 2], 64.0, &mut Rng::new(seed)).expect("valid widths")
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn set_padding(&mut self, padding: Padding) {
        self.padding = padding;
    }

    fn im2col(&self, layer: &ConvLayer, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        let (ph, pw) = ((layer.kh / 2) as isize, (layer.kw / 2) as isize);
        let mut cols = vec![0.0; layer.patch_len() * n];
        for ic in 0..layer.in_ch {
            let plane = &input[ic * n..(ic + 1) * n];
            for ky in 0..layer.kh {
                for kx in 0..layer.kw {
                    let row = (ic * layer.kh + ky) * layer.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for y in 0..h {
                        let sy = self.padding.index(y as isize + ky as isize - ph, h);
                        for x in 0..w {
                            let sx = self.padding.index(x as isize + kx as isize - pw, w);
                            dst[y * w + x] = plane[sy * w + sx];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, layer: &ConvLayer, dcols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        let (ph, pw) = ((layer.kh / 2) as isize, (layer.kw / 2) as isize);
        let mut out = vec![0.0; layer.in_ch * n];
        for ic in 0..layer.in_ch {
            let plane = &mut out[ic * n..(ic + 1) * n];
            for ky in 0..layer.kh {
                for kx in 0..layer.kw {
                    let row = (ic * layer.kh + ky) * layer.kw + kx;
                    let src = &dcols[row * n..(row + 1) * n];
                    for y in 0..h {
                        let sy = self.padding.index(y as isize + ky as isize - ph, h);
                        for x in 0..w {
                            let sx = self.padding.index(x as isize + kx as isize - pw, w);
                            plane[sy * w + sx] += src[y * w + x];
                        }
                    }
                }
            }
        }
        out
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        if image.channels() != self.layers[0].in_ch {
            return Err(Error::Shape(format!(
                "network expects {} input channels, image has {}",
                self.layers[0].in_ch,
                image.channels()
            )));
        }
        Ok(())
    }

    fn run(&self, image: &ImageTensor, record: bool) -> Result<(PixelScores, Option<Tape>)> {
        self.check_input(image)?;
        let (h, w) = (image.height(), image.width());
        let n = h * w;
        let inv = 1.0 / self.input_scale;
        let mut act: Vec<f64> = image.to_planar().into_iter().map(|v| v * inv).collect();
        let mut tape = Tape {
            height: h,
            width: w,
            layers: Vec::new(),
        };
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let cols = self.im2col(layer, &act, h, w);
            let mut out = vec![0.0; layer.out_ch * n];
            for (oc, chunk) in out.chunks_exact_mut(n).enumerate() {
                chunk.fill(layer.bias[oc]);
            }
            gemm(
                layer.out_ch,
                layer.patch_len(),
                n,
                &layer.weight,
                false,
                &cols,
                false,
                &mut out,
                1.0,
            );
            let next = if li < last {
                out.iter().map(|&v| v.max(0.0)).collect()
            } else {
                out.clone()
            };
            if record {
                tape.layers.push(LayerTape { cols, pre: out });
            }
            act = next;
        }
        let scores = (0..n).map(|i| [act[i], act[n + i]]).collect();
        Ok((PixelScores::new(h, w, scores)?, record.then_some(tape)))
    }

    /// Backpropagates score weights through the tape. Returns the input
    /// gradient (planar) when requested, and the parameter gradient.
    fn backward(
        &self,
        tape: &Tape,
        weights: &ScoreWeights,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<ConvLayer>>)> {
        let (h, w) = (tape.height, tape.width);
        let n = h * w;
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "score weights cover {} pixels, scores cover {n}",
                weights.len()
            )));
        }
        let mut grad = vec![0.0; 2 * n];
        for (i, wt) in weights.iter().enumerate() {
            grad[i] = wt[0];
            grad[n + i] = wt[1];
        }
        let last = self.layers.len() - 1;
        let mut param_grads: Vec<ConvLayer> = Vec::new();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let lt = &tape.layers[li];
            if li < last {
                for (g, &z) in grad.iter_mut().zip(&lt.pre) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            if want_params {
                let k = layer.patch_len();
                let mut dw = vec![0.0; layer.out_ch * k];
                gemm(layer.out_ch, n, k, &grad, false, &lt.cols, true, &mut dw, 0.0);
                let db = grad.chunks_exact(n).map(|c| c.iter().sum()).collect();
                param_grads.push(ConvLayer {
                    weight: dw,
                    bias: db,
                    ..layer.clone()
                });
            }
            if li > 0 || want_input {
                let k = layer.patch_len();
                let mut dcols = vec![0.0; k * n];
                gemm(k, layer.out_ch, n, &layer.weight, true, &grad, false, &mut dcols, 0.0);
                grad = self.col2im(layer, &dcols, h, w);
            }
        }
        param_grads.reverse();
        if want_input {
            let inv = 1.0 / self.input_scale;
            for g in &mut grad {
                *g *= inv;
            }
        }
        Ok((want_input.then_some(grad), want_params.then_some(param_grads)))
    }

    /// Parameter gradient in network shape.
    pub fn param_gradient_layers(&self, image: &ImageTensor, weights: &ScoreWeights) -> Result<ConvNet> {
        let (_, tape) = self.run(image, true)?;
        let (_, grads) = self.backward(&tape.expect("recorded"), weights, false, true)?;
        Ok(ConvNet {
            layers: grads.expect("requested"),
            ..self.clone()
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl Backbone for ConvNet {
    fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    fn forward(&self, image: &ImageTensor) -> Result<PixelScores> {
        Ok(self.run(image, false)?.0)
    }

    fn input_gradient(&self, image: &ImageTensor, weights: &ScoreWeights) -> Result<ImageTensor> {
        let (_, tape) = self.run(image, true)?;
        let (grad, _) = self.backward(&tape.expect("recorded"), weights, true, false)?;
        ImageTensor::from_planar(
            image.height(),
            image.width(),
            image.channels(),
            &grad.expect("requested"),
            ValueSpace::MeanSubtracted,
        )
    }
}

impl TrainableBackbone for ConvNet {
    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn param_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn set_param_vec(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn scores_and_param_gradient(
        &self,
        image: &ImageTensor,
        weights: &dyn Fn(&PixelScores) -> Result<ScoreWeights>,
    ) -> Result<(PixelScores, Vec<f64>)> {
        let (scores, tape) = self.run(image, true)?;
        let wts = weights(&scores)?;
        let (_, grads) = self.backward(&tape.expect("recorded"), &wts, false, true)?;
        let net = ConvNet {
            layers: grads.expect("requested"),
            ..self.clone()
        };
        Ok((scores, net.param_vec()))
    }
}
