//! Context-aware restoration: a fully connected two-label CRF over pixels
//! with a bilateral (position + guidance color) kernel and a spatial
//! smoothness kernel, solved by a fixed number of mean-field updates.
//!
//! The updates are unrolled, so [`mean_field_backward`] differentiates the
//! exact computation performed by [`mean_field_forward`] with respect to
//! the unary log-odds, both kernel weights and the label compatibility.
//!
//! With two labels everything is expressed through `q_i = Q_i(salient)`:
//! `Q_i(non-salient) = 1 - q_i`, and the update is
//!
//! ```text
//! m_i(l)  = sum_{j != i} k(i, j) Q_j(l)
//! c_i(l)  = sum_l' mu(l, l') m_i(l')
//! q_i     = sigmoid(logit_i - (c_i(1) - c_i(0)))
//! ```
//!
//! which is the normalized `exp(-u_i(l) - c_i(l))` with `u = -log p`.

use serde::{Deserialize, Serialize};

use crate::backbone::{sigmoid, PixelScores};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, SaliencyMap};

/// Floor added to probabilities before taking `-log`.
pub const UNARY_FLOOR: f64 = 1e-8;

/// Largest pixel count for which the bilateral kernel matrix is cached.
const DENSE_CACHE_LIMIT: usize = 64 * 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MessagePassing {
    /// All pixel pairs.
    Exact,
    /// Only pairs with `|dy| <= radius` and `|dx| <= radius` (approximate).
    Window { radius: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    /// Weight of the bilateral (appearance) kernel.
    pub omega1: f64,
    /// Weight of the spatial smoothness kernel.
    pub omega2: f64,
    /// Positional bandwidth of the bilateral kernel, pixels.
    pub theta_alpha: f64,
    /// Color bandwidth of the bilateral kernel, 0-255 scale.
    pub theta_beta: f64,
    /// Positional bandwidth of the smoothness kernel, pixels.
    pub theta_gamma: f64,
    /// Label compatibility `mu[l][l']`.
    pub mu: [[f64; 2]; 2],
    pub iters: usize,
    pub messages: MessagePassing,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 1.0,
            theta_alpha: 160.0,
            theta_beta: 3.0,
            theta_gamma: 3.0,
            mu: POTTS,
            iters: 5,
            messages: MessagePassing::Exact,
        }
    }
}

pub const POTTS: [[f64; 2]; 2] = [[0.0, 1.0], [1.0, 0.0]];

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_alpha > 0.0 && self.theta_beta > 0.0 && self.theta_gamma > 0.0) {
            return Err(Error::Config("crf bandwidths must be positive".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("crf iters must be at least 1".into()));
        }
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0) {
            return Err(Error::Config("crf kernel weights must be non-negative".into()));
        }
        if self.mu.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("crf compatibility must be finite".into()));
        }
        Ok(())
    }

    /// Weight applied to the salient-minus-background penalty difference:
    /// `c(1) - c(0) = coef_bg * m(0) + coef_fg * m(1)`.
    fn coefficients(&self) -> (f64, f64) {
        (self.mu[1][0] - self.mu[0][0], self.mu[1][1] - self.mu[0][1])
    }
}

/// Unary potentials, kept as per-pixel log-odds of the salient class.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    height: usize,
    width: usize,
    logits: Vec<f64>,
}

impl UnaryField {
    /// From per-pixel `(p_background, p_salient)` pairs, which must each sum
    /// to 1 within 1e-9. Uses `u(l) = -log(p(l) + UNARY_FLOOR)`.
    pub fn from_probabilities(height: usize, width: usize, probs: &[[f64; 2]]) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::Shape("unary length does not match dimensions".into()));
        }
        let mut logits = Vec::with_capacity(probs.len());
        for p in probs {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("unary ({}, {}) is not a distribution", p[0], p[1])));
            }
            logits.push((p[1] + UNARY_FLOOR).ln() - (p[0] + UNARY_FLOOR).ln());
        }
        Ok(Self { height, width, logits })
    }

    pub fn from_saliency(map: &SaliencyMap) -> Result<Self> {
        let probs: Vec<[f64; 2]> = map.values().iter().map(|&p| [1.0 - p, p]).collect();
        Self::from_probabilities(map.height(), map.width(), &probs)
    }

    /// Directly from backbone scores: the softmax unary has log-odds
    /// `f_1 - f_0`, so no floor is needed.
    pub fn from_scores(scores: &PixelScores) -> Self {
        Self {
            height: scores.height(),
            width: scores.width(),
            logits: scores.logits(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// `Q(salient)` with no pairwise messages.
    pub fn salient_probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

fn color_dist2(guidance: &ImageTensor, i: usize, j: usize) -> f64 {
    guidance
        .pixel(i)
        .iter()
        .zip(guidance.pixel(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// `k(i, j)` for two distinct pixels (flat indices into `guidance`).
pub fn pairwise_kernel(i: usize, j: usize, guidance: &ImageTensor, params: &CrfParams) -> f64 {
    let (bil, sp) = kernel_parts(i, j, guidance, params);
    params.omega1 * bil + params.omega2 * sp
}

/// Unweighted bilateral and spatial kernel values.
fn kernel_parts(i: usize, j: usize, guidance: &ImageTensor, params: &CrfParams) -> (f64, f64) {
    let w = guidance.width();
    let dy = (i / w) as f64 - (j / w) as f64;
    let dx = (i % w) as f64 - (j % w) as f64;
    let d2 = dy * dy + dx * dx;
    let c2 = color_dist2(guidance, i, j);
    let bil = (-d2 / (2.0 * params.theta_alpha.powi(2)) - c2 / (2.0 * params.theta_beta.powi(2))).exp();
    let sp = (-d2 / (2.0 * params.theta_gamma.powi(2))).exp();
    (bil, sp)
}

/// Message operators `v -> sum_{j != i} K(i, j) v_j` for both kernels.
struct Kernels {
    height: usize,
    width: usize,
    bilateral: Bilateral,
    spatial_y: Vec<f64>,
    spatial_x: Vec<f64>,
    window: Option<usize>,
    /// Row sums of the unweighted kernels.
    row_bil: Vec<f64>,
    row_sp: Vec<f64>,
}

enum Bilateral {
    Dense(Vec<f64>),
    OnTheFly {
        guidance: ImageTensor,
        pos_y: Vec<f64>,
        pos_x: Vec<f64>,
        inv_color: f64,
    },
}

impl Kernels {
    fn build(guidance: &ImageTensor, params: &CrfParams) -> Self {
        let (h, w) = (guidance.height(), guidance.width());
        let n = h * w;
        let window = match params.messages {
            MessagePassing::Exact => None,
            MessagePassing::Window { radius } => Some(radius),
        };
        let gauss = |len: usize, theta: f64| -> Vec<f64> {
            (0..len)
                .map(|d| {
                    let d = d as f64;
                    (-d * d / (2.0 * theta * theta)).exp()
                })
                .collect()
        };
        let mut spatial_y = gauss(h, params.theta_gamma);
        let mut spatial_x = gauss(w, params.theta_gamma);
        let pos_y = gauss(h, params.theta_alpha);
        let pos_x = gauss(w, params.theta_alpha);
        if let Some(r) = window {
            spatial_y.iter_mut().skip(r + 1).for_each(|v| *v = 0.0);
            spatial_x.iter_mut().skip(r + 1).for_each(|v| *v = 0.0);
        }
        let inv_color = 1.0 / (2.0 * params.theta_beta * params.theta_beta);
        let within = |i: usize, j: usize| -> bool {
            window.is_none_or(|r| (i / w).abs_diff(j / w) <= r && (i % w).abs_diff(j % w) <= r)
        };

        let bilateral = if n <= DENSE_CACHE_LIMIT {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                let (yi, xi) = (i / w, i % w);
                for j in (i + 1)..n {
                    if !within(i, j) {
                        continue;
                    }
                    let (yj, xj) = (j / w, j % w);
                    let v = pos_y[yi.abs_diff(yj)]
                        * pos_x[xi.abs_diff(xj)]
                        * (-color_dist2(guidance, i, j) * inv_color).exp();
                    m[i * n + j] = v;
                    m[j * n + i] = v;
                }
            }
            Bilateral::Dense(m)
        } else {
            Bilateral::OnTheFly {
                guidance: guidance.clone(),
                pos_y,
                pos_x,
                inv_color,
            }
        };
        let mut k = Self {
            height: h,
            width: w,
            bilateral,
            spatial_y,
            spatial_x,
            window,
            row_bil: Vec::new(),
            row_sp: Vec::new(),
        };
        let ones = vec![1.0; n];
        k.row_bil = k.apply_bilateral(&ones);
        k.row_sp = k.apply_spatial(&ones);
        k
    }

    fn apply_bilateral(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        match &self.bilateral {
            Bilateral::Dense(m) => m
                .chunks_exact(n)
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect(),
            Bilateral::OnTheFly {
                guidance,
                pos_y,
                pos_x,
                inv_color,
            } => {
                let w = self.width;
                let r = self.window;
                (0..n)
                    .map(|i| {
                        let (yi, xi) = (i / w, i % w);
                        let mut s = 0.0;
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            let (yj, xj) = (j / w, j % w);
                            let (ay, ax) = (yi.abs_diff(yj), xi.abs_diff(xj));
                            if r.is_some_and(|r| ay > r || ax > r) {
                                continue;
                            }
                            s += pos_y[ay] * pos_x[ax] * (-color_dist2(guidance, i, j) * inv_color).exp() * v[j];
                        }
                        s
                    })
                    .collect()
            }
        }
    }

    /// Separable Gaussian over every offset, minus the self term.
    fn apply_spatial(&self, v: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            let row = &v[y * w..(y + 1) * w];
            for x in 0..w {
                tmp[y * w + x] = row
                    .iter()
                    .enumerate()
                    .map(|(sx, val)| self.spatial_x[sx.abs_diff(x)] * val)
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for sy in 0..h {
                    s += self.spatial_y[sy.abs_diff(y)] * tmp[sy * w + x];
                }
                out[y * w + x] = s - v[y * w + x];
            }
        }
        out
    }
}

/// Everything the backward pass needs from one inference.
pub struct CrfTrace {
    params: CrfParams,
    logits: Vec<f64>,
    /// `q` before every iteration plus the final output (`iters + 1` entries).
    q: Vec<Vec<f64>>,
    /// Bilateral and spatial messages `K q` of every iteration.
    msg_bil: Vec<Vec<f64>>,
    msg_sp: Vec<Vec<f64>>,
    kernels: Kernels,
}

impl CrfTrace {
    pub fn iterations(&self) -> usize {
        self.q.len() - 1
    }

    pub fn output(&self) -> &[f64] {
        self.q.last().expect("at least the initial state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfGradients {
    /// Gradient with respect to each pixel's unary log-odds.
    pub logits: Vec<f64>,
    pub omega1: f64,
    pub omega2: f64,
    pub mu: [[f64; 2]; 2],
}

impl CrfGradients {
    /// Gradient with respect to `p_i(salient)` for a unary built by
    /// [`UnaryField::from_probabilities`] with `p_i(background) = 1 - p_i(salient)`.
    pub fn salient_probability_gradient(&self, salient: &[f64]) -> Vec<f64> {
        self.logits
            .iter()
            .zip(salient)
            .map(|(g, &p)| g * (1.0 / (p + UNARY_FLOOR) + 1.0 / (1.0 - p + UNARY_FLOOR)))
            .collect()
    }
}

fn check_dims(unary: &UnaryField, guidance: &ImageTensor) -> Result<()> {
    if !guidance.same_dims(unary.height, unary.width) {
        return Err(Error::Shape(format!(
            "guidance {}x{} does not match unary {}x{}",
            guidance.height(),
            guidance.width(),
            unary.height,
            unary.width
        )));
    }
    Ok(())
}

/// Runs `params.iters` mean-field updates and records the trace.
pub fn mean_field_forward(
    unary: &UnaryField,
    guidance: &ImageTensor,
    params: &CrfParams,
) -> Result<(SaliencyMap, CrfTrace)> {
    params.validate()?;
    check_dims(unary, guidance)?;
    let kernels = Kernels::build(guidance, params);
    let (coef_bg, coef_fg) = params.coefficients();
    let mut q = vec![unary.salient_probabilities()];
    let mut msg_bil = Vec::with_capacity(params.iters);
    let mut msg_sp = Vec::with_capacity(params.iters);
    for _ in 0..params.iters {
        let prev = q.last().expect("initial state");
        let a1 = kernels.apply_bilateral(prev);
        let a2 = kernels.apply_spatial(prev);
        let next = (0..prev.len())
            .map(|i| {
                let m_fg = params.omega1 * a1[i] + params.omega2 * a2[i];
                let m_bg = params.omega1 * (kernels.row_bil[i] - a1[i]) + params.omega2 * (kernels.row_sp[i] - a2[i]);
                sigmoid(unary.logits[i] - (coef_bg * m_bg + coef_fg * m_fg))
            })
            .collect();
        q.push(next);
        msg_bil.push(a1);
        msg_sp.push(a2);
    }
    let map = SaliencyMap::new(unary.height, unary.width, q.last().expect("output").clone())?;
    Ok((
        map,
        CrfTrace {
            params: *params,
            logits: unary.logits.clone(),
            q,
            msg_bil,
            msg_sp,
            kernels,
        },
    ))
}

pub fn mean_field_infer(unary: &UnaryField, guidance: &ImageTensor, params: &CrfParams) -> Result<SaliencyMap> {
    Ok(mean_field_forward(unary, guidance, params)?.0)
}

/// Reverse-mode pass through the unrolled updates.
pub fn mean_field_backward(trace: &CrfTrace, upstream: &[f64]) -> Result<CrfGradients> {
    let n = trace.logits.len();
    if upstream.len() != n {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, trace has {n}",
            upstream.len()
        )));
    }
    if trace.msg_bil.len() != trace.iterations() || trace.params.iters != trace.iterations() {
        return Err(Error::Data("crf trace is inconsistent with its iteration count".into()));
    }
    let p = &trace.params;
    let k = &trace.kernels;
    let (coef_bg, coef_fg) = p.coefficients();
    let mut grads = CrfGradients {
        logits: vec![0.0; n],
        omega1: 0.0,
        omega2: 0.0,
        mu: [[0.0; 2]; 2],
    };
    let mut g_q = upstream.to_vec();
    for t in (0..trace.iterations()).rev() {
        let q_out = &trace.q[t + 1];
        let (a1, a2) = (&trace.msg_bil[t], &trace.msg_sp[t]);
        let mut g_a1 = vec![0.0; n];
        let mut g_a2 = vec![0.0; n];
        for i in 0..n {
            let g_z = g_q[i] * q_out[i] * (1.0 - q_out[i]);
            grads.logits[i] += g_z;
            let g_pen = -g_z;
            let m_fg = p.omega1 * a1[i] + p.omega2 * a2[i];
            let m_bg = p.omega1 * (k.row_bil[i] - a1[i]) + p.omega2 * (k.row_sp[i] - a2[i]);
            grads.mu[1][0] += g_pen * m_bg;
            grads.mu[0][0] -= g_pen * m_bg;
            grads.mu[1][1] += g_pen * m_fg;
            grads.mu[0][1] -= g_pen * m_fg;
            let g_bg = g_pen * coef_bg;
            let g_fg = g_pen * coef_fg;
            grads.omega1 += g_fg * a1[i] + g_bg * (k.row_bil[i] - a1[i]);
            grads.omega2 += g_fg * a2[i] + g_bg * (k.row_sp[i] - a2[i]);
            g_a1[i] = p.omega1 * (g_fg - g_bg);
            g_a2[i] = p.omega2 * (g_fg - g_bg);
        }
        // both kernels are symmetric, so the adjoint is the same operator
        let b1 = k.apply_bilateral(&g_a1);
        let b2 = k.apply_spatial(&g_a2);
        g_q = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
    }
    let q0 = &trace.q[0];
    for i in 0..n {
        grads.logits[i] += g_q[i] * q0[i] * (1.0 - q0[i]);
    }
    Ok(grads)
}
