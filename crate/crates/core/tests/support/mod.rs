//! Brute-force oracles and randomized check suites shared by the core
//! integration tests and the acceptance target.
//!
//! Every oracle here is written with plain scalar loops over `Vec<f64>` and
//! never calls into the tape, so a bug in an op cannot cancel itself out.

#![allow(dead_code, clippy::needless_range_loop)]

use lawg_core::backbone::attention_block;
use lawg_core::config::{LossWeights, Mode, ModelConfig};
use lawg_core::gradcheck::{grad_check_many, relative_error, DEFAULT_STEP};
use lawg_core::head::{binarize, lap_pool, project_mask};
use lawg_core::law::{aggregate, generate_weights, reduce, GeneratedLayerWeights};
use lawg_core::model;
use lawg_core::objectives::{
    box_iou, dice_loss, focal_loss, focal_loss_logits, giou_loss, l1_loss, mask_iou, miou, prec_at_05, total_loss,
    LossInputs,
};
use lawg_core::params::{Graph, ParamStore};
use lawg_core::text::TokenSequence;
use lawg_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one randomized comparison suite.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} cases {:>4}  max err {:.3e}  tol {:.0e}",
            self.name, self.cases, self.max_err, self.tol
        )
    }
}

pub const PURE_ARITHMETIC_TOL: f64 = 1e-12;
pub const CLOSED_FORM_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_CASES: usize = 120;

// ---------------------------------------------------------------------------
// randomness

pub struct Draw(ChaCha8Rng);

impl Draw {
    pub fn new(seed: u64) -> Self {
        Draw(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..hi)
    }

    pub fn index(&mut self, lo: usize, hi: usize) -> usize {
        self.0.gen_range(lo..hi)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.0.gen_bool(p)
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, self.vec(n, lo, hi)).unwrap()
    }

    /// Values whose magnitude is at least `gap`, keeping kinks out of reach.
    pub fn away_from_zero(&mut self, shape: &[usize], gap: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = self.uniform(gap, hi);
                if self.coin(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape, v).unwrap()
    }

    /// A normalized box with positive size.
    pub fn bbox(&mut self) -> [f64; 4] {
        [
            self.uniform(0.1, 0.9),
            self.uniform(0.1, 0.9),
            self.uniform(0.05, 0.8),
            self.uniform(0.05, 0.8),
        ]
    }

    pub fn mask(&mut self, n: usize, p: f64) -> Vec<bool> {
        (0..n).map(|_| self.coin(p)).collect()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// scalar building blocks

/// `erf` by its Maclaurin series; accurate to ~1e-13 for `|x| ≤ 3`.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-17 * sum.abs().max(1e-300) && n > 5.0 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

/// `∫_a^b` of the standard normal density by composite Simpson quadrature.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    let n = 20_000usize;
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        let t = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 * pdf(t) } else { 2.0 * pdf(t) };
    }
    s * h / 3.0
}

/// `Φ(x)`: the series near zero, the integrated tail further out.
pub fn normal_cdf_oracle(x: f64) -> f64 {
    if x.abs() <= 3.0 {
        return 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
    }
    let tail = if x.abs() >= 12.0 {
        0.0
    } else {
        normal_mass(-12.0, -x.abs())
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Exact GeLU `x Φ(x)`.
pub fn gelu_oracle(x: f64) -> f64 {
    x * normal_cdf_oracle(x)
}

pub fn sigmoid_oracle(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Row-major `m×n` matrix as nested rows.
fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, n) = t.dims2().unwrap();
    (0..m).map(|i| t.data()[i * n..(i + 1) * n].to_vec()).collect()
}

/// `x Wᵀ + b` for row vectors.
fn affine(x: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
    let (o, i) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), i);
            (0..o)
                .map(|r| {
                    let mut s = b.map(|b| b.data()[r]).unwrap_or(0.0);
                    for c in 0..i {
                        s += row[c] * w.at(&[r, c]);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm_oracle(x: &[Vec<f64>], g: &Tensor, b: &Tensor, eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mu) / (var + eps).sqrt() * g.data()[c] + b.data()[c])
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// model-level oracles

/// Group-wise attention pooling: for group `g`, token `j` scores
/// `Σ_{c∈g} e_c F_jc`; masked tokens are dropped from the softmax.
pub fn aggregate_oracle(f: &[Vec<f64>], mask: &[bool], e: &[f64], groups: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = e.len();
    let s = d / groups;
    let mut h0 = vec![0.0; d];
    let mut alpha = vec![vec![0.0; f.len()]; groups];
    for g in 0..groups {
        let cols = g * s..(g + 1) * s;
        let kept: Vec<usize> = (0..f.len()).filter(|&j| mask[j]).collect();
        let scores: Vec<f64> = kept
            .iter()
            .map(|&j| cols.clone().map(|c| e[c] * f[j][c]).sum())
            .collect();
        let w = softmax_oracle(&scores);
        for (&j, &a) in kept.iter().zip(&w) {
            alpha[g][j] = a;
            for c in cols.clone() {
                h0[c] += a * f[j][c];
            }
        }
    }
    (h0, alpha)
}

/// `W0[r][c] + Σ_{a,b} P[r][a] M[a][b] Q[c][b]`, with
/// `M[a][b] = Σ_k Φw[a·d_w+b][k] h1[k] + Φb[a·d_w+b]`.
pub fn generate_oracle(h1: &[f64], w0: &Tensor, p: &Tensor, q: &Tensor, phi_w: &Tensor, phi_b: &Tensor) -> Vec<f64> {
    let (d_out, d_in) = w0.dims2().unwrap();
    let d_w = p.dims2().unwrap().1;
    let mut m = vec![vec![0.0; d_w]; d_w];
    for a in 0..d_w {
        for b in 0..d_w {
            let k = a * d_w + b;
            m[a][b] = phi_b.data()[k] + h1.iter().enumerate().map(|(j, h)| phi_w.at(&[k, j]) * h).sum::<f64>();
        }
    }
    let mut out = vec![0.0; d_out * d_in];
    for r in 0..d_out {
        for c in 0..d_in {
            let mut s = 0.0;
            for a in 0..d_w {
                for b in 0..d_w {
                    s += p.at(&[r, a]) * m[a][b] * q.at(&[c, b]);
                }
            }
            out[r * d_in + c] = w0.at(&[r, c]) + s;
        }
    }
    out
}

/// Full pre-norm attention block with fused QKV weight `w` (`3d×d`).
pub fn attention_block_oracle(
    x: &[Vec<f64>],
    w: &Tensor,
    qkv_b: &Tensor,
    store: &ParamStore,
    heads: usize,
    eps: f64,
) -> Vec<Vec<f64>> {
    let p = |n: &str| store.get(&format!("vit.b0.{n}")).unwrap();
    let d = x[0].len();
    let t = x.len();
    let dh = d / heads;
    let h = layer_norm_oracle(x, p("ln1.g"), p("ln1.b"), eps);
    let qkv = affine(&h, w, Some(qkv_b));
    let mut attn = vec![vec![0.0; d]; t];
    for hd in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = (0..dh).map(|c| qkv[i][hd * dh + c] * qkv[j][d + hd * dh + c]).sum();
                    dot / (dh as f64).sqrt()
                })
                .collect();
            let a = softmax_oracle(&scores);
            for c in 0..dh {
                attn[i][hd * dh + c] = (0..t).map(|j| a[j] * qkv[j][2 * d + hd * dh + c]).sum();
            }
        }
    }
    let proj = affine(&attn, p("attn.out.w"), Some(p("attn.out.b")));
    let x1: Vec<Vec<f64>> = x
        .iter()
        .zip(&proj)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect();
    let h2 = layer_norm_oracle(&x1, p("ln2.g"), p("ln2.b"), eps);
    let hidden: Vec<Vec<f64>> = affine(&h2, p("mlp.fc1.w"), Some(p("mlp.fc1.b")))
        .into_iter()
        .map(|r| r.into_iter().map(gelu_oracle).collect())
        .collect();
    let out = affine(&hidden, p("mlp.fc2.w"), Some(p("mlp.fc2.b")));
    x1.iter()
        .zip(&out)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect()
}

/// Language-adaptive pooling: softmax over tokens of
/// `(cls Wlᵀ+bl)·(v_t Wvᵀ+bv) / √k`.
pub fn lap_oracle(tokens: &[Vec<f64>], cls: &[f64], store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let g = |n: &str| store.get(n).unwrap();
    let pv = affine(tokens, g("head.lap.v.w"), Some(g("head.lap.v.b")));
    let pl = &affine(&[cls.to_vec()], g("head.lap.l.w"), Some(g("head.lap.l.b")))[0];
    let scores: Vec<f64> = pv
        .iter()
        .map(|r| r.iter().zip(pl).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let a = softmax_oracle(&scores);
    let c = tokens[0].len();
    let pooled = (0..c)
        .map(|k| tokens.iter().zip(&a).map(|(t, w)| w * t[k]).sum())
        .collect();
    (pooled, a)
}

/// Half-pixel bilinear resize of an `h×w` map by `f`, written from the
/// sampling definition: output pixel `o` samples source coordinate
/// `(o + ½)/f − ½`, clamped to `[0, n−1]`.
pub fn bilinear_oracle(x: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let sample = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * f * w * f);
    for oy in 0..h * f {
        let (y0, y1, ty) = sample(oy, h);
        for ox in 0..w * f {
            let (x0, x1, tx) = sample(ox, w);
            let v = (1.0 - ty) * ((1.0 - tx) * x[y0 * w + x0] + tx * x[y0 * w + x1])
                + ty * ((1.0 - tx) * x[y1 * w + x0] + tx * x[y1 * w + x1]);
            out.push(v);
        }
    }
    out
}

/// Stride-2 transposed convolution by scattering each input pixel through
/// the 2×2 kernel.
pub fn transposed_conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[1];
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                out[o * oh * ow + y * ow + xx] = b.data()[o];
            }
        }
    }
    for c in 0..ci {
        for i in 0..h {
            for j in 0..w {
                let v = x.at(&[c, i, j]);
                for o in 0..co {
                    for a in 0..2 {
                        for bb in 0..2 {
                            out[o * oh * ow + (2 * i + a) * ow + 2 * j + bb] += v * k.at(&[c, o, a, bb]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dynamic mask projection `s̄ = cls · U`, upsampled ×4, then the sigmoid.
pub fn mask_projection_oracle(up: &Tensor, cls: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = (up.shape()[0], up.shape()[1], up.shape()[2]);
    let mut coarse = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            coarse[y * w + x] = (0..c).map(|k| cls[k] * up.at(&[k, y, x])).sum();
        }
    }
    let logits = bilinear_oracle(&coarse, h, w, 4);
    let probs = logits.iter().map(|&z| sigmoid_oracle(z)).collect();
    (coarse, logits, probs)
}

// ---------------------------------------------------------------------------
// loss and metric oracles

/// Box as `[x1, y1, x2, y2]` with empty extents clamped.
fn edges(b: &[f64; 4]) -> [f64; 4] {
    let w = if b[2] > 0.0 { b[2] } else { 0.0 };
    let h = if b[3] > 0.0 { b[3] } else { 0.0 };
    [b[0] - w / 2.0, b[1] - h / 2.0, b[0] + w / 2.0, b[1] + h / 2.0]
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn giou_oracle(p: &[f64; 4], g: &[f64; 4]) -> f64 {
    let (a, b) = (edges(p), edges(g));
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let ex = a[2].max(b[2]) - a[0].min(b[0]);
    let ey = a[3].max(b[3]) - a[1].min(b[1]);
    let hull = ex * ey;
    1.0 - (inter / union - (hull - union) / hull)
}

pub fn iou_oracle(p: &[f64; 4], g: &[f64; 4]) -> f64 {
    let (a, b) = (edges(p), edges(g));
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn focal_oracle(probs: &[f64], target: &[bool], alpha: f64, gamma: f64) -> f64 {
    let mut s = 0.0;
    for (&p, &t) in probs.iter().zip(target) {
        let pt = if t { p } else { 1.0 - p };
        s += -alpha * (1.0 - pt).powf(gamma) * pt.ln();
    }
    s / probs.len() as f64
}

pub fn dice_oracle(probs: &[f64], target: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut ps = 0.0;
    let mut ts = 0.0;
    for (&p, &t) in probs.iter().zip(target) {
        if t {
            inter += p;
            ts += 1.0;
        }
        ps += p;
    }
    1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0)
}

pub fn l1_oracle(p: &[f64; 4], g: &[f64; 4]) -> f64 {
    (0..4).map(|i| (p[i] - g[i]).abs()).sum::<f64>() / 4.0
}

/// Hit test without division: `IoU > ½ ⇔ 3·inter > area_a + area_b`.
pub fn prec_oracle(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> f64 {
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let (a, b) = (edges(p), edges(g));
            let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
            let sum = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]);
            3.0 * inter > sum
        })
        .count();
    hits as f64 / pred.len() as f64
}

/// Pixel counting: `|a ∩ b| / (|a| + |b| − |a ∩ b|)`.
pub fn miou_oracle(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> f64 {
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let np = p.iter().filter(|&&v| v).count();
        let ng = g.iter().filter(|&&v| v).count();
        let both = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
        let union = np + ng - both;
        s += if union == 0 { 1.0 } else { both as f64 / union as f64 };
    }
    s / pred.len() as f64
}

// ---------------------------------------------------------------------------
// oracle suites

fn matrix_rows(x: &Tensor) -> Vec<Vec<f64>> {
    rows(x)
}

pub fn check_aggregation(seed: u64) -> Check {
    let mut r = Draw::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let groups = [1, 2, 4][r.index(0, 3)];
        let d = groups * r.index(1, 5);
        let l = r.index(1, 9);
        let f = r.tensor(&[l, d], -2.0, 2.0);
        let e = r.vec(d, -2.0, 2.0);
        let mut mask: Vec<bool> = (0..l).map(|_| r.coin(0.7)).collect();
        mask[0] = true;
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let fv = g.constant(f.clone());
        let ev = g.constant(Tensor::new(&[d], e.clone()).unwrap());
        let (h0, alpha) = aggregate(&mut g, fv, &mask, ev, groups).unwrap();
        let (oh, oa) = aggregate_oracle(&matrix_rows(&f), &mask, &e, groups);
        worst = worst.max(max_diff(g.tape.value(h0).data(), &oh));
        worst = worst.max(max_diff(g.tape.value(alpha).data(), &oa.concat()));
    }
    Check {
        name: "aggregation".into(),
        cases: ORACLE_CASES,
        max_err: worst,
        tol: CLOSED_FORM_TOL,
    }
}

pub fn check_generation(seed: u64) -> Check {
    let mut r = Draw::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let d_in = r.index(1, 7);
        let d_out = 3 * d_in;
        let d_w = r.index(1, 4);
        let d_h = r.index(1, 5);
        let d_l = r.index(1, 6);
        let h0 = r.tensor(&[1, d_l], -1.5, 1.5);
        let w1 = r.tensor(&[d_h, d_l], -1.0, 1.0);
        let w0 = r.tensor(&[d_out, d_in], -1.0, 1.0);
        let p = r.tensor(&[d_out, d_w], -1.0, 1.0);
        let q = r.tensor(&[d_in, d_w], -1.0, 1.0);
        let phi_w = r.tensor(&[d_w * d_w, d_h], -1.0, 1.0);
        let phi_b = r.tensor(&[d_w * d_w], -1.0, 1.0);
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let vars: Vec<Var> = [&h0, &w1, &w0, &p, &q, &phi_w, &phi_b]
            .iter()
            .map(|t| g.constant((*t).clone()))
            .collect();
        let h1 = reduce(&mut g, vars[0], vars[1]).unwrap();
        let w = generate_weights(&mut g, h1, vars[2], vars[3], vars[4], vars[5], vars[6]).unwrap();
        let h1_oracle: Vec<f64> = affine(&[h0.data().to_vec()], &w1, None)[0]
            .iter()
            .map(|&z| gelu_oracle(z))
            .collect();
        worst = worst.max(max_diff(g.tape.value(h1).data(), &h1_oracle));
        // Feed the library's h1 so the generation step is compared on its own.
        let h1_lib = g.tape.value(h1).data().to_vec();
        worst = worst.max(max_diff(
            g.tape.value(w).data(),
            &generate_oracle(&h1_lib, &w0, &p, &q, &phi_w, &phi_b),
        ));
    }
    Check {
        name: "weight generation".into(),
        cases: ORACLE_CASES,
        max_err: worst,
        tol: CLOSED_FORM_TOL,
    }
}

/// Random parameters for block 0 of a backbone of width `d`.
fn block_store(r: &mut Draw, d: usize, hidden: usize) -> ParamStore {
    let mut s = ParamStore::new();
    let mut put = |s: &mut ParamStore, n: &str, shape: &[usize], lo: f64, hi: f64| {
        s.insert(format!("vit.b0.{n}"), r.tensor(shape, lo, hi));
    };
    put(&mut s, "ln1.g", &[d], 0.5, 1.5);
    put(&mut s, "ln1.b", &[d], -0.5, 0.5);
    put(&mut s, "w0", &[3 * d, d], -0.7, 0.7);
    put(&mut s, "qkv_b", &[3 * d], -0.3, 0.3);
    put(&mut s, "attn.out.w", &[d, d], -0.7, 0.7);
    put(&mut s, "attn.out.b", &[d], -0.3, 0.3);
    put(&mut s, "ln2.g", &[d], 0.5, 1.5);
    put(&mut s, "ln2.b", &[d], -0.5, 0.5);
    put(&mut s, "mlp.fc1.w", &[hidden, d], -0.7, 0.7);
    put(&mut s, "mlp.fc1.b", &[hidden], -0.3, 0.3);
    put(&mut s, "mlp.fc2.w", &[d, hidden], -0.7, 0.7);
    put(&mut s, "mlp.fc2.b", &[d], -0.3, 0.3);
    s
}

pub fn check_attention_block(seed: u64) -> Check {
    let mut r = Draw::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let heads = r.index(1, 4);
        let d = heads * r.index(1, 4);
        let t = r.index(1, 7);
        let hidden = r.index(1, 9);
        let store = block_store(&mut r, d, hidden);
        let cfg = ModelConfig {
            d_model: d,
            heads,
            ..ModelConfig::default()
        };
        let x = r.tensor(&[t, d], -2.0, 2.0);
        let mut g = Graph::eval(&store);
        let xv = g.constant(x.clone());
        let w = GeneratedLayerWeights {
            w: g.p("vit.b0.w0").unwrap(),
            bias: g.p("vit.b0.qkv_b").unwrap(),
        };
        let (y, _) = attention_block(&mut g, xv, &w, 0, &cfg).unwrap();
        let oracle = attention_block_oracle(
            &rows(&x),
            store.get("vit.b0.w0").unwrap(),
            store.get("vit.b0.qkv_b").unwrap(),
            &store,
            heads,
            cfg.ln_eps,
        );
        worst = worst.max(max_diff(g.tape.value(y).data(), &oracle.concat()));
    }
    Check {
        name: "attention block".into(),
        cases: ORACLE_CASES,
        max_err: worst,
        tol: CLOSED_FORM_TOL,
    }
}

pub fn check_lap(seed: u64) -> Check {
    let mut r = Draw::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let (t, c, d_l, k) = (r.index(1, 10), r.index(1, 7), r.index(1, 7), r.index(1, 6));
        let mut store = ParamStore::new();
        store.insert("head.lap.v.w", r.tensor(&[k, c], -1.0, 1.0));
        store.insert("head.lap.v.b", r.tensor(&[k], -0.5, 0.5));
        store.insert("head.lap.l.w", r.tensor(&[k, d_l], -1.0, 1.0));
        store.insert("head.lap.l.b", r.tensor(&[k], -0.5, 0.5));
        let tokens = r.tensor(&[t, c], -2.0, 2.0);
        let cls = r.tensor(&[1, d_l], -2.0, 2.0);
        let mut g = Graph::eval(&store);
        let tv = g.constant(tokens.clone());
        let cv = g.constant(cls.clone());
        let (pooled, a) = lap_pool(&mut g, tv, cv).unwrap();
        let (op, oa) = lap_oracle(&rows(&tokens), cls.data(), &store);
        worst = worst.max(max_diff(g.tape.value(pooled).data(), &op));
        worst = worst.max(max_diff(g.tape.value(a).data(), &oa));
    }
    Check {
        name: "language-adaptive pooling".into(),
        cases: ORACLE_CASES,
        max_err: worst,
        tol: CLOSED_FORM_TOL,
    }
}

pub fn check_mask_projection(seed: u64) -> Check {
    let mut r = Draw::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let (c, h, w) = (r.index(1, 6), r.index(1, 5), r.index(1, 5));
        let up = r.tensor(&[c, h, w], -1.5, 1.5);
        let cls = r.tensor(&[1, c], -1.5, 1.5);
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let uv = g.constant(up.clone());
        let cv = g.constant(cls.clone());
        let m = project_mask(&mut g, uv, cv).unwrap();
        let (oc, ol, op) = mask_projection_oracle(&up, cls.data());
        worst = worst.max(max_diff(g.tape.value(m.coarse).data(), &oc));
        worst = worst.max(max_diff(g.tape.value(m.logits).data(), &ol));
        worst = worst.max(max_diff(g.tape.value(m.probs).data(), &op));
    }
    Check {
        name: "dynamic mask projection".into(),
        cases: ORACLE_CASES,
        max_err: worst,
        tol: CLOSED_FORM_TOL,
    }
}

fn scalar_loss(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let v = f(&mut g);
    g.tape.value(v).item()
}

fn box_var(g: &mut Graph, b: &[f64; 4]) -> Var {
    g.constant(Tensor::matrix(1, 4, b.to_vec()).unwrap())
}

/// GIoU and L1 compare within the pure-arithmetic tolerance; focal loss
/// involves `exp`/`log`/`pow` and uses the closed-form tolerance; dice is
/// pure arithmetic.
pub fn check_losses(seed: u64) -> Vec<Check> {
    let mut r = Draw::new(seed);
    let (mut giou, mut l1, mut focal, mut dice) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..ORACLE_CASES {
        let p = r.bbox();
        // Every third case is disjoint so the enclosing-box term is exercised.
        let gt = if case % 3 == 0 {
            [1.0 - p[0], 1.0 - p[1], 0.05, 0.05]
        } else {
            r.bbox()
        };
        giou = giou.max(
            (scalar_loss(|g| {
                let (a, b) = (box_var(g, &p), box_var(g, &gt));
                giou_loss(g, a, b).unwrap()
            }) - giou_oracle(&p, &gt))
            .abs(),
        );
        l1 = l1.max(
            (scalar_loss(|g| {
                let (a, b) = (box_var(g, &p), box_var(g, &gt));
                l1_loss(g, a, b).unwrap()
            }) - l1_oracle(&p, &gt))
            .abs(),
        );

        let n = r.index(1, 40);
        let target = r.mask(n, 0.4);
        let logits = r.vec(n, -6.0, 6.0);
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid_oracle(z)).collect();
        let (alpha, gamma) = (r.uniform(0.1, 1.0), [0.0, 1.0, 2.0, 2.5][r.index(0, 4)]);
        let want = focal_oracle(&probs, &target, alpha, gamma);
        let from_logits = scalar_loss(|g| {
            let z = g.constant(Tensor::matrix(1, n, logits.clone()).unwrap());
            focal_loss_logits(g, z, &target, alpha, gamma).unwrap()
        });
        let from_probs = scalar_loss(|g| {
            let p = g.constant(Tensor::matrix(1, n, probs.clone()).unwrap());
            focal_loss(g, p, &target, alpha, gamma).unwrap()
        });
        focal = focal.max((from_logits - want).abs()).max((from_probs - want).abs());
        dice = dice.max(
            (scalar_loss(|g| {
                let p = g.constant(Tensor::matrix(1, n, probs.clone()).unwrap());
                dice_loss(g, p, &target).unwrap()
            }) - dice_oracle(&probs, &target))
            .abs(),
        );
    }
    vec![
        Check {
            name: "GIoU loss".into(),
            cases: ORACLE_CASES,
            max_err: giou,
            tol: PURE_ARITHMETIC_TOL,
        },
        Check {
            name: "L1 loss".into(),
            cases: ORACLE_CASES,
            max_err: l1,
            tol: PURE_ARITHMETIC_TOL,
        },
        Check {
            name: "focal loss".into(),
            cases: ORACLE_CASES,
            max_err: focal,
            tol: CLOSED_FORM_TOL,
        },
        Check {
            name: "dice loss".into(),
            cases: ORACLE_CASES,
            max_err: dice,
            tol: PURE_ARITHMETIC_TOL,
        },
    ]
}

pub fn check_metrics(seed: u64) -> Vec<Check> {
    let mut r = Draw::new(seed);
    let (mut prec, mut iou, mut mi) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..ORACLE_CASES {
        let n = r.index(1, 30);
        let gt: Vec<[f64; 4]> = (0..n).map(|_| r.bbox()).collect();
        let pred: Vec<[f64; 4]> = gt
            .iter()
            .map(|g| {
                let j = r.uniform(0.0, 0.15);
                [
                    g[0] + j,
                    g[1] - j / 2.0,
                    g[2] * r.uniform(0.6, 1.4),
                    g[3] * r.uniform(0.6, 1.4),
                ]
            })
            .collect();
        prec = prec.max((prec_at_05(&pred, &gt).unwrap() - prec_oracle(&pred, &gt)).abs());
        for (p, g) in pred.iter().zip(&gt) {
            iou = iou.max((box_iou(p, g) - iou_oracle(p, g)).abs());
        }
        let px = r.index(1, 80);
        let density = r.uniform(0.0, 1.0);
        let gm: Vec<Vec<bool>> = (0..n).map(|_| r.mask(px, density)).collect();
        let pm: Vec<Vec<bool>> = (0..n).map(|_| r.mask(px, density)).collect();
        mi = mi.max((miou(&pm, &gm).unwrap() - miou_oracle(&pm, &gm)).abs());
    }
    vec![
        Check {
            name: "Prec@0.5".into(),
            cases: ORACLE_CASES,
            max_err: prec.max(iou),
            tol: PURE_ARITHMETIC_TOL,
        },
        Check {
            name: "mIoU".into(),
            cases: ORACLE_CASES,
            max_err: mi,
            tol: PURE_ARITHMETIC_TOL,
        },
    ]
}

pub fn all_oracle_checks(seed: u64) -> Vec<Check> {
    let mut out = vec![
        check_aggregation(seed),
        check_generation(seed + 1),
        check_attention_block(seed + 2),
        check_lap(seed + 3),
        check_mask_projection(seed + 4),
    ];
    out.extend(check_losses(seed + 5));
    out.extend(check_metrics(seed + 6));
    out
}

// ---------------------------------------------------------------------------
// gradient suite

/// `Σ y ⊙ R` for a fixed, shape-derived weight `R`, so every output element
/// gets a distinct nonzero upstream gradient.
pub fn readout(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |k| 0.3 + (1.7 * k as f64 + 0.4).sin());
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases(r: &mut Draw) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut v: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, |$t:ident, $x:ident| $body:expr) => {
            v.push((
                $name,
                Box::new(|$t: &mut Tape, $x: &[Var]| -> Result<Var> {
                    let y = $body;
                    readout($t, y)
                }),
                $inputs,
            ));
        };
    }
    let a34 = r.tensor(&[3, 4], -1.5, 1.5);
    let b34 = r.tensor(&[3, 4], -1.5, 1.5);
    let near = a34.clone();
    let apart = {
        let off = r.away_from_zero(&[3, 4], 0.2, 1.0);
        let mut t = near.clone();
        t.data_mut().iter_mut().zip(off.data()).for_each(|(x, o)| *x += o);
        t
    };
    case!(
        "matmul",
        vec![r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[4, 2], -1.0, 1.0)],
        |t, x| t.matmul(x[0], x[1])?
    );
    case!(
        "matmul_nt",
        vec![r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[2, 4], -1.0, 1.0)],
        |t, x| t.matmul_nt(x[0], x[1])?
    );
    case!("transpose", vec![a34.clone()], |t, x| t.transpose(x[0])?);
    case!(
        "linear",
        vec![
            r.tensor(&[3, 4], -1.0, 1.0),
            r.tensor(&[2, 4], -1.0, 1.0),
            r.tensor(&[2], -1.0, 1.0)
        ],
        |t, x| t.linear(x[0], x[1], Some(x[2]))?
    );
    case!(
        "linear (no bias)",
        vec![r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[2, 4], -1.0, 1.0)],
        |t, x| t.linear(x[0], x[1], None)?
    );
    case!("add", vec![a34.clone(), b34.clone()], |t, x| t.add(x[0], x[1])?);
    case!("sub", vec![a34.clone(), b34.clone()], |t, x| t.sub(x[0], x[1])?);
    case!("mul", vec![a34.clone(), b34.clone()], |t, x| t.mul(x[0], x[1])?);
    case!("div", vec![a34.clone(), r.tensor(&[3, 4], 0.5, 2.0)], |t, x| t
        .div(x[0], x[1])?);
    case!("minimum", vec![near.clone(), apart.clone()], |t, x| t
        .minimum(x[0], x[1])?);
    case!("maximum", vec![near.clone(), apart.clone()], |t, x| t
        .maximum(x[0], x[1])?);
    case!("add_row_bias", vec![a34.clone(), r.tensor(&[4], -1.0, 1.0)], |t, x| t
        .add_row_bias(
        x[0], x[1]
    )?);
    case!("scale", vec![a34.clone()], |t, x| t.scale(x[0], -1.7)?);
    case!("add_scalar", vec![a34.clone()], |t, x| t.add_scalar(x[0], 0.3)?);
    case!("abs", vec![r.away_from_zero(&[3, 4], 0.2, 2.0)], |t, x| t.abs(x[0])?);
    case!("exp", vec![a34.clone()], |t, x| t.exp(x[0])?);
    case!("log", vec![r.tensor(&[3, 4], 0.2, 3.0)], |t, x| t.log(x[0])?);
    case!("sigmoid", vec![r.tensor(&[3, 4], -4.0, 4.0)], |t, x| t.sigmoid(x[0])?);
    case!("softplus", vec![r.tensor(&[3, 4], -4.0, 4.0)], |t, x| t
        .softplus(x[0])?);
    case!("gelu", vec![r.tensor(&[3, 4], -3.0, 3.0)], |t, x| t.gelu(x[0])?);
    case!("powf", vec![r.tensor(&[3, 4], 0.2, 2.0)], |t, x| t.powf(x[0], 2.5)?);
    case!("softmax_rows", vec![r.tensor(&[3, 5], -2.0, 2.0)], |t, x| t
        .softmax_rows(x[0])?);
    case!("sum", vec![a34.clone()], |t, x| t.sum(x[0])?);
    case!("mean", vec![a34.clone()], |t, x| t.mean(x[0])?);
    case!(
        "layer_norm",
        vec![
            r.tensor(&[3, 6], -2.0, 2.0),
            r.tensor(&[6], 0.5, 1.5),
            r.tensor(&[6], -0.5, 0.5)
        ],
        |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)?
    );
    case!("reshape", vec![a34.clone()], |t, x| t.reshape(x[0], &[2, 6])?);
    case!("slice_cols", vec![a34.clone()], |t, x| t.slice_cols(x[0], 1, 2)?);
    case!(
        "concat_cols",
        vec![a34.clone(), r.tensor(&[3, 2], -1.0, 1.0)],
        |t, x| t.concat_cols(&[x[0], x[1], x[0]])?
    );
    case!("slice_rows", vec![a34.clone()], |t, x| t.slice_rows(x[0], 1, 2)?);
    case!(
        "concat_rows",
        vec![a34.clone(), r.tensor(&[2, 4], -1.0, 1.0)],
        |t, x| t.concat_rows(&[x[1], x[0]])?
    );
    case!("gather_rows", vec![r.tensor(&[5, 3], -1.0, 1.0)], |t, x| t
        .gather_rows(x[0], &[4, 0, 4, 2])?);
    case!("gather_flat", vec![a34.clone()], |t, x| t.gather_flat(
        x[0],
        vec![11, 0, 3, 3, 7, 5],
        &[2, 3]
    )?);
    case!(
        "transposed_conv2x",
        vec![
            r.tensor(&[2, 2, 3], -1.0, 1.0),
            r.tensor(&[2, 3, 2, 2], -1.0, 1.0),
            r.tensor(&[3], -1.0, 1.0)
        ],
        |t, x| t.transposed_conv2x(x[0], x[1], x[2])?
    );
    case!("bilinear_upsample", vec![r.tensor(&[3, 4], -1.0, 1.0)], |t, x| t
        .bilinear_upsample(x[0], 4)?);
    v
}

/// Central-difference check of every differentiable tape op.
pub fn check_op_gradients(seed: u64) -> Vec<Check> {
    let mut r = Draw::new(seed);
    op_cases(&mut r)
        .into_iter()
        .map(|(name, f, inputs)| {
            let err = grad_check_many(|t, x| f(t, x), &inputs, DEFAULT_STEP).unwrap();
            Check {
                name: name.into(),
                cases: inputs.iter().map(Tensor::numel).sum(),
                max_err: err,
                tol: GRAD_TOL,
            }
        })
        .collect()
}

/// Two-block multitask model small enough for an element-wise gradient check.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 8,
        d_model: 8,
        blocks: 2,
        heads: 2,
        mlp_ratio: 2,
        d_l: 8,
        text_layers: 1,
        text_heads: 2,
        max_len: 6,
        vocab_size: 12,
        groups: 2,
        rank_dw: 2,
        reduction_r: 4,
        lap_k: 4,
        ..ModelConfig::default()
    }
}

/// Toy parameters with every entry jittered so zero-initialized tensors
/// (including the generator head) carry gradient through every path.
pub fn toy_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = model::init_params(cfg, seed).unwrap();
    let mut r = Draw::new(seed ^ 0x5eed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += r.uniform(-0.15, 0.15);
        }
    }
    store
}

pub fn toy_tokens() -> TokenSequence {
    TokenSequence {
        ids: vec![1, 5, 7, 3, 0, 0],
        mask: vec![true, true, true, true, false, false],
        words: vec![],
    }
}

pub fn toy_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut r = Draw::new(seed);
    r.tensor(&[3, cfg.image_size, cfg.image_size], 0.0, 1.0)
}

fn toy_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    gt_mask: &[bool],
    train: bool,
) -> (f64, Option<Vec<(String, Tensor)>>) {
    let mut g = if train { Graph::train(store) } else { Graph::eval(store) };
    let fw = model::forward(&mut g, cfg, image, &toy_tokens()).unwrap();
    let inputs = LossInputs {
        pred_box: Some(fw.pred_box),
        gt_box: [0.4, 0.55, 0.3, 0.2],
        mask_logits: fw.mask.map(|m| m.logits),
        gt_mask,
    };
    let (loss, _) = total_loss(&mut g, &inputs, &LossWeights::default(), Mode::Multitask).unwrap();
    let value = g.tape.value(loss).item();
    if !train {
        return (value, None);
    }
    g.tape.backward(loss).unwrap();
    (value, Some(g.grads().into_iter().collect()))
}

/// Full multitask loss through the toy model, every parameter element.
pub fn check_model_gradient(seed: u64) -> (Check, usize) {
    let cfg = toy_config();
    let mut store = toy_params(&cfg, seed);
    let image = toy_image(&cfg, seed + 1);
    let n = cfg.image_size * cfg.image_size;
    let gt_mask: Vec<bool> = (0..n).map(|k| (k % 16) > 5 && (k / 16) < 9).collect();
    let (_, grads) = toy_loss(&store, &cfg, &image, &gt_mask, true);
    let grads = grads.unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    let mut cases = 0;
    let h = DEFAULT_STEP;
    for name in &names {
        let analytic = grads.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let len = store.get(name).unwrap().numel();
        for k in 0..len {
            let orig = store.get(name).unwrap().data()[k];
            store.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let plus = toy_loss(&store, &cfg, &image, &gt_mask, false).0;
            store.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let minus = toy_loss(&store, &cfg, &image, &gt_mask, false).0;
            store.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map(|t| t.data()[k]).unwrap_or(0.0);
            worst = worst.max(relative_error(a, numeric));
            cases += 1;
        }
    }
    (
        Check {
            name: "multitask loss, toy model".into(),
            cases,
            max_err: worst,
            tol: GRAD_TOL,
        },
        store.numel(),
    )
}

// ---------------------------------------------------------------------------
// soft-mask binarization fixture

/// A 64×64 fixture: a 16×16 ground-truth square at probability 0.9, a halo
/// of `halo` background pixels at 0.42 (kept by 0.35, dropped by 0.5) and
/// every other pixel at 0.1.
pub fn soft_mask_fixture(halo: usize) -> (Vec<f64>, Vec<bool>) {
    let side = 64;
    let mut probs = vec![0.1; side * side];
    let mut gt = vec![false; side * side];
    for y in 24..40 {
        for x in 24..40 {
            gt[y * side + x] = true;
            probs[y * side + x] = 0.9;
        }
    }
    let mut placed = 0;
    'outer: for y in 0..side {
        for x in 0..side {
            if placed == halo {
                break 'outer;
            }
            if !gt[y * side + x] {
                probs[y * side + x] = 0.42;
                placed += 1;
            }
        }
    }
    (probs, gt)
}

/// mIoU at both thresholds for a sequence of halo sizes, as
/// `(halo, foreground at 0.35, miou@0.35, miou@0.5, expected@0.35, expected@0.5)`.
pub fn binarization_sweep(halos: &[usize]) -> Vec<(usize, usize, f64, f64, f64, f64)> {
    halos
        .iter()
        .map(|&halo| {
            let (probs, gt) = soft_mask_fixture(halo);
            let low = binarize(&probs, 0.35).unwrap();
            let high = binarize(&probs, 0.5).unwrap();
            let fg = low.iter().filter(|&&v| v).count();
            let m_low = mask_iou(&low, &gt).unwrap();
            let m_high = mask_iou(&high, &gt).unwrap();
            // Counted by hand: the 256 square pixels always match; the halo
            // adds false positives only at the lower threshold.
            (halo, fg, m_low, m_high, 256.0 / (256.0 + halo as f64), 1.0)
        })
        .collect()
}
