//! The CDR networks.
//!
//! Users are rows: every function below takes `B x ·` batches, and each row
//! is computed independently of the others, so a user's result does not
//! depend on which batch it travels in.
//!
//! Parameter layout (flattening order):
//!
//! | name                    | shape            |
//! |-------------------------|------------------|
//! | `encoder.{l}.weight`    | `in x out`       |
//! | `encoder.{l}.bias`      | `1 x out`        |
//! | `transition.weight`     | `(K + H) x 2H`   |
//! | `transition.bias`       | `1 x 2H`         |
//! | `decoder.alpha`         | `H x C`          |
//! | `decoder.beta`          | `I x C`          |
//! | `decoder.gamma.weight`  | `H x I`          |
//! | `decoder.gamma.bias`    | `1 x I`          |

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{Graph, ParamStore, Reduce, Tensor, Var};
use crate::config::TrainConfig;
use crate::rng::{self, Purpose};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims {
    pub items: usize,
    pub k: usize,
    pub h: usize,
    pub c: usize,
    pub hidden: Vec<usize>,
}

impl Dims {
    pub fn from_config(cfg: &TrainConfig, items: usize) -> Self {
        Self {
            items,
            k: cfg.k,
            h: cfg.h,
            c: cfg.c,
            hidden: cfg.hidden.clone(),
        }
    }

    /// Expected `(name, rows, cols)` for every parameter, in order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut widths = vec![self.items];
        widths.extend(&self.hidden);
        widths.push(2 * self.k);
        for (l, w) in widths.windows(2).enumerate() {
            out.push((format!("encoder.{l}.weight"), w[0], w[1]));
            out.push((format!("encoder.{l}.bias"), 1, w[1]));
        }
        out.push(("transition.weight".into(), self.k + self.h, 2 * self.h));
        out.push(("transition.bias".into(), 1, 2 * self.h));
        out.push(("decoder.alpha".into(), self.h, self.c));
        out.push(("decoder.beta".into(), self.items, self.c));
        out.push(("decoder.gamma.weight".into(), self.h, self.items));
        out.push(("decoder.gamma.bias".into(), 1, self.items));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdrModel {
    pub dims: Dims,
    pub params: ParamStore,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite Xavier bound");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl CdrModel {
    /// Every parameter zero.
    pub fn zeros(dims: Dims) -> Self {
        let mut params = ParamStore::new();
        for (name, r, c) in dims.layout() {
            params.push(name, Tensor::zeros(r, c));
        }
        Self { dims, params }
    }

    /// Xavier-uniform weights, zero biases, gate locations near 0.5.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut params = ParamStore::new();
        for (slot, (name, r, c)) in dims.layout().into_iter().enumerate() {
            let mut rng = rng::stream(seed, 0, 0, slot as u64, Purpose::Init);
            let t = if name.ends_with(".bias") {
                Tensor::zeros(r, c)
            } else if name == "decoder.alpha" || name == "decoder.beta" {
                let noise = rng::normal_vec(&mut rng, r * c);
                Tensor::new(r, c, noise.into_iter().map(|n| 0.5 + 0.05 * n).collect())
            } else {
                xavier(&mut rng, r, c)
            };
            params.push(name, t);
        }
        Self { dims, params }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter '{name}'"))
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars::from_vars(&self.dims, self.params.bind(g))
    }

    /// Gate matrices with the given noise, or noise-free when `None`.
    pub fn gate_matrices(&self, sigma_eps: f64, noise: Option<&GateNoise>) -> GateMatrices {
        let mut g = Graph::new();
        let alpha = g.constant(self.param("decoder.alpha").clone());
        let beta = g.constant(self.param("decoder.beta").clone());
        let gates = draw_gates(&mut g, alpha, beta, sigma_eps, noise);
        GateMatrices {
            raw_z: g.value(gates.raw_z).clone(),
            raw_x: g.value(gates.raw_x).clone(),
            norm_z: g.value(gates.norm_z).clone(),
            norm_x: g.value(gates.norm_x).clone(),
        }
    }
}

/// Graph handles for one bound copy of the parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Vec<(Var, Var)>,
    pub trans_w: Var,
    pub trans_b: Var,
    pub alpha: Var,
    pub beta: Var,
    pub gamma_w: Var,
    pub gamma_b: Var,
    /// Every parameter in flattening order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Names graph handles given in flattening order.
    pub fn from_vars(dims: &Dims, all: Vec<Var>) -> Self {
        let n_enc = dims.hidden.len() + 1;
        assert_eq!(all.len(), 2 * n_enc + 6, "parameter count does not match dims");
        let encoder = (0..n_enc).map(|l| (all[2 * l], all[2 * l + 1])).collect();
        let o = 2 * n_enc;
        Self {
            encoder,
            trans_w: all[o],
            trans_b: all[o + 1],
            alpha: all[o + 2],
            beta: all[o + 3],
            gamma_w: all[o + 4],
            gamma_b: all[o + 5],
            all,
        }
    }
}

/// Row-wise L2 normalization; all-zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise
/// `1 / (1 - p)`.
pub fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

/// Multi-hot batch `B x I` from sorted item lists.
pub fn multihot_batch(lists: &[&[u32]], items: usize) -> Tensor {
    let mut t = Tensor::zeros(lists.len(), items);
    for (r, list) in lists.iter().enumerate() {
        for &i in *list {
            t.set(r, i as usize, 1.0);
        }
    }
    t
}

/// Encoder `q(e_t | x_t)`: returns `(mean, log_sigma)`, each `B x K`.
///
/// `x` is the raw multi-hot batch; it is L2-normalized here and, when a mask
/// is given, dropout-masked before the MLP.
pub fn encode(g: &mut Graph, mv: &ModelVars, x: &Tensor, mask: Option<&Tensor>) -> (Var, Var) {
    let mut h = g.constant(l2_normalize_rows(x));
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        h = g.dropout(h, m);
    }
    let last = mv.encoder.len() - 1;
    for (l, &(w, b)) in mv.encoder.iter().enumerate() {
        let lin = g.matmul(h, w);
        h = g.add(lin, b);
        if l < last {
            h = g.tanh(h);
        }
    }
    let k = g.shape(h).1 / 2;
    (g.slice_cols(h, 0, k), g.slice_cols(h, k, k))
}

/// `mean + exp(log_sigma) * noise`.
pub fn reparam_sample(g: &mut Graph, mean: Var, log_sigma: Var, noise: &Tensor) -> Var {
    let sigma = g.exp(log_sigma);
    let n = g.constant(noise.clone());
    let spread = g.mul(sigma, n);
    g.add(mean, spread)
}

/// Transition `p(z_t | e_t, z_{t-1})`: returns `(mean, log_sigma)`, each `B x H`.
pub fn transition(g: &mut Graph, mv: &ModelVars, e: Var, z_prev: Var) -> (Var, Var) {
    let input = g.concat(&[e, z_prev]);
    let lin = g.matmul(input, mv.trans_w);
    let out = g.add(lin, mv.trans_b);
    let h = g.shape(out).1 / 2;
    (g.slice_cols(out, 0, h), g.slice_cols(out, h, h))
}

/// Additive gate noise `eps ~ N(0, sigma_eps^2)`, one draw per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNoise {
    pub z: Tensor,
    pub x: Tensor,
}

impl GateNoise {
    pub fn sample(rng: &mut ChaCha8Rng, dims: &Dims, sigma_eps: f64) -> Self {
        let mut draw = |r: usize, c: usize| {
            Tensor::new(
                r,
                c,
                (0..r * c)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(rng);
                        sigma_eps * n
                    })
                    .collect(),
            )
        };
        let z = draw(dims.h, dims.c);
        let x = draw(dims.items, dims.c);
        Self { z, x }
    }
}

/// Gate handles: raw clipped gates feed the sparsity term, row-softmaxed
/// gates feed the decoder.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub raw_z: Var,
    pub raw_x: Var,
    pub norm_z: Var,
    pub norm_x: Var,
}

/// Realized gate values.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrices {
    pub raw_z: Tensor,
    pub raw_x: Tensor,
    pub norm_z: Tensor,
    pub norm_x: Tensor,
}

/// `clip(param + eps, 0, 1)`, then softmax across the C columns.
pub fn draw_gates(
    g: &mut Graph,
    alpha: Var,
    beta: Var,
    sigma_eps: f64,
    noise: Option<&GateNoise>,
) -> GateVars {
    debug_assert!(sigma_eps > 0.0);
    let gate = |g: &mut Graph, p: Var, eps: Option<&Tensor>| {
        let shifted = match eps {
            Some(e) => {
                let e = g.constant(e.clone());
                g.add(p, e)
            }
            None => p,
        };
        let raw = g.clip(shifted, 0.0, 1.0);
        (raw, g.softmax(raw))
    };
    let (raw_z, norm_z) = gate(g, alpha, noise.map(|n| &n.z));
    let (raw_x, norm_x) = gate(g, beta, noise.map(|n| &n.x));
    GateVars {
        raw_z,
        raw_x,
        norm_z,
        norm_x,
    }
}

/// `sum_c W_x[:, c] * f_gamma(W_z[:, c] * z)` with `f_gamma(v) = v W + b`.
///
/// `z` is `B x H`, `wz` is `H x C`, `wx` is `I x C`; returns `B x I` logits.
pub fn sparse_decode(g: &mut Graph, z: Var, wz: Var, wx: Var, gamma_w: Var, gamma_b: Var) -> Var {
    let c = g.shape(wz).1;
    let wz_t = g.transpose(wz);
    let wx_t = g.transpose(wx);
    let mut acc: Option<Var> = None;
    for k in 0..c {
        let col_z = g.gather_rows(wz_t, &[k]);
        let masked = g.mul(z, col_z);
        let lin = g.matmul(masked, gamma_w);
        let f = g.add(lin, gamma_b);
        let col_x = g.gather_rows(wx_t, &[k]);
        let term = g.mul(f, col_x);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one category")
}

/// Decoder with gates already drawn.
pub fn decode(g: &mut Graph, mv: &ModelVars, gates: &GateVars, z: Var) -> Var {
    sparse_decode(g, z, gates.norm_z, gates.norm_x, mv.gamma_w, mv.gamma_b)
}

/// Per-row `sum_i x_i * log softmax(logits)_i`, `B x 1`.
pub fn log_multinomial(g: &mut Graph, x: Var, logits: Var) -> Var {
    let logp = g.log_softmax(logits);
    let weighted = g.mul(x, logp);
    g.sum_over(weighted, Reduce::OverCols)
}
