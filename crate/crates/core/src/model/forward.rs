//! Forward pass with cached intermediates and the matching hand-derived
//! backward pass.
//!
//! Block layout (pre-norm, RMS scale-only normalization):
//!
//! ```text
//! a   = s_attn · Attn(RMS(x))
//! h   = x + a
//! f   = s_ffn · (ReLU(RMS(h) Kᵀ) V)
//! out = x + s_block · (a + f)
//! ```
//!
//! With all scales equal to 1 this is the usual residual block. The scales
//! are where suppression plans act: multiplying by exactly 1.0 leaves every
//! value bit-identical.

use super::config::ModelConfig;
use super::params::{LayerParams, ModelParams};
use crate::activation::position_ratio;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, gemm, softmax_in_place, Matrix};
use crate::vocab::TokenId;

const RMS_EPS: f64 = 1e-6;

/// Per-layer multipliers applied at the attention output, the FFN
/// activation coefficients and the whole block contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScales {
    pub attn: Vec<f64>,
    pub ffn: Vec<f64>,
    pub block: Vec<f64>,
}

impl LayerScales {
    pub fn identity(n_layers: usize) -> Self {
        Self {
            attn: vec![1.0; n_layers],
            ffn: vec![1.0; n_layers],
            block: vec![1.0; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.ffn.len()
    }

    pub fn is_identity(&self) -> bool {
        self.attn
            .iter()
            .chain(&self.ffn)
            .chain(&self.block)
            .all(|s| *s == 1.0)
    }
}

/// FFN activation coefficients recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// Per layer, a (positions × d_ffn) matrix of post-ReLU coefficients
    /// (already multiplied by the layer's FFN scale).
    coefficients: Vec<Matrix>,
    /// Per layer, per position activation ratio.
    ratios: Vec<Vec<f64>>,
    /// Per layer, the FFN sublayer output (positions × d_model).
    ffn_outputs: Vec<Matrix>,
    /// Residual stream: entry 0 is the embedding, entry ℓ+1 the output of
    /// block ℓ.
    hidden_states: Vec<Matrix>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.coefficients.len()
    }

    pub fn n_positions(&self) -> usize {
        self.coefficients.first().map_or(0, Matrix::rows)
    }

    pub fn coefficients(&self, layer: usize) -> &Matrix {
        &self.coefficients[layer]
    }

    pub fn ratios(&self, layer: usize) -> &[f64] {
        &self.ratios[layer]
    }

    pub fn ffn_output(&self, layer: usize) -> &Matrix {
        &self.ffn_outputs[layer]
    }

    pub fn hidden_states(&self) -> &[Matrix] {
        &self.hidden_states
    }

    /// Builds a trace from raw coefficient matrices, deriving the ratios.
    pub fn from_coefficients(coefficients: Vec<Matrix>) -> Self {
        let ratios = coefficients
            .iter()
            .map(|m| (0..m.rows()).map(|i| ratio_of(m.row(i))).collect())
            .collect();
        Self {
            coefficients,
            ratios,
            ffn_outputs: Vec::new(),
            hidden_states: Vec::new(),
        }
    }
}

fn ratio_of(row: &[f64]) -> f64 {
    position_ratio(row).unwrap_or(0.0)
}

struct LayerCache {
    x: Matrix,
    inv_rms1: Vec<f64>,
    n1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    h: Matrix,
    inv_rms2: Vec<f64>,
    n2: Matrix,
    pre_act: Matrix,
    act: Matrix,
    ffn_raw: Matrix,
}

/// Result of [`run`]: logits plus everything the backward pass needs.
pub(crate) struct Forward {
    pub logits: Matrix,
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    x_final: Matrix,
    inv_rms_final: Vec<f64>,
    n_final: Matrix,
}

impl Forward {
    pub fn trace(&self, scales: &LayerScales) -> ActivationTrace {
        let mut coefficients = Vec::with_capacity(self.layers.len());
        let mut ffn_outputs = Vec::with_capacity(self.layers.len());
        let mut hidden_states = Vec::with_capacity(self.layers.len() + 1);
        for (l, c) in self.layers.iter().enumerate() {
            let mut coef = c.act.clone();
            coef.scale(scales.ffn[l]);
            coefficients.push(coef);
            let mut f = c.ffn_raw.clone();
            f.scale(scales.ffn[l]);
            ffn_outputs.push(f);
            hidden_states.push(c.x.clone());
        }
        hidden_states.push(self.x_final.clone());
        let mut trace = ActivationTrace::from_coefficients(coefficients);
        trace.ffn_outputs = ffn_outputs;
        trace.hidden_states = hidden_states;
        trace
    }
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::IndexOutOfRange {
            index: bad as usize,
            len: config.vocab_size,
        });
    }
    Ok(())
}

fn rms_norm(x: &Matrix, g: &[f64]) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = dot(row, row) / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for ((o, xv), gv) in out.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = gv * xv * r;
        }
    }
    (out, inv)
}

/// Accumulates the gradient of `y = g ⊙ x · r(x)` into `dx` and `dg`.
fn rms_norm_backward(x: &Matrix, g: &[f64], inv: &[f64], dy: &Matrix, dx: &mut Matrix, dg: &mut [f64]) {
    let d = x.cols() as f64;
    let mut gy = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        let (xr, dyr, r) = (x.row(i), dy.row(i), inv[i]);
        for j in 0..gy.len() {
            gy[j] = g[j] * dyr[j];
            dg[j] += dyr[j] * xr[j] * r;
        }
        let proj = dot(&gy, xr) * r * r * r / d;
        for ((o, gv), xv) in dx.row_mut(i).iter_mut().zip(&gy).zip(xr) {
            *o += r * gv - proj * xv;
        }
    }
}

fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> Result<(Matrix, Vec<Matrix>)> {
    let (t, d) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let row = &mut p.row_mut(i)[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(row)?;
            let mut out = vec![0.0; dh];
            for (j, &pij) in row.iter().enumerate() {
                axpy(pij, &v.row(j)[cols.clone()], &mut out);
            }
            ctx.row_mut(i)[cols.clone()].copy_from_slice(&out);
        }
        probs.push(p);
    }
    Ok((ctx, probs))
}

fn causal_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    dctx: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (t, d) = q.shape();
    let n_heads = probs.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    let mut dp = vec![0.0; t];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let dci = &dctx.row(i)[cols.clone()];
            let pi = &p.row(i)[..=i];
            let mut weighted = 0.0;
            for j in 0..=i {
                dp[j] = dot(dci, &v.row(j)[cols.clone()]);
                weighted += pi[j] * dp[j];
                axpy(pi[j], dci, &mut dv.row_mut(j)[cols.clone()]);
            }
            for j in 0..=i {
                let ds = pi[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, &k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    (dq, dk, dv)
}

fn linear(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    // Weights are stored (d_out × d_in); rows of x are inputs.
    x.matmul_t(w)
}

fn block_forward(
    x: Matrix,
    p: &LayerParams,
    n_heads: usize,
    s_attn: f64,
    s_ffn: f64,
    s_block: f64,
) -> Result<(Matrix, LayerCache)> {
    let (n1, inv_rms1) = rms_norm(&x, p.attn_norm.as_slice());
    let q = linear(&n1, &p.wq)?;
    let k = linear(&n1, &p.wk)?;
    let v = linear(&n1, &p.wv)?;
    let (ctx, probs) = causal_attention(&q, &k, &v, n_heads)?;
    let mut attn = linear(&ctx, &p.wo)?;
    attn.scale(s_attn);

    let mut h = x.clone();
    h.add_assign(&attn)?;
    let (n2, inv_rms2) = rms_norm(&h, p.ffn_norm.as_slice());
    let pre_act = linear(&n2, &p.ffn_key)?;
    let mut act = pre_act.clone();
    for a in act.as_mut_slice() {
        *a = a.max(0.0);
    }
    let ffn_raw = act.matmul(&p.ffn_value)?;

    let mut out = x.clone();
    for ((o, a), f) in out
        .as_mut_slice()
        .iter_mut()
        .zip(attn.as_slice())
        .zip(ffn_raw.as_slice())
    {
        *o += s_block * (a + s_ffn * f);
    }
    let cache = LayerCache {
        x,
        inv_rms1,
        n1,
        q,
        k,
        v,
        probs,
        ctx,
        h,
        inv_rms2,
        n2,
        pre_act,
        act,
        ffn_raw,
    };
    Ok((out, cache))
}

pub(crate) fn run(
    config: &ModelConfig,
    params: &ModelParams,
    scales: &LayerScales,
    tokens: &[TokenId],
) -> Result<Forward> {
    check_tokens(config, tokens)?;
    let t = tokens.len();
    let d = config.d_model;
    let mut x = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        row.copy_from_slice(params.tok_emb.row(tok as usize));
        axpy(1.0, params.pos_emb.row(i), row);
    }
    let mut layers = Vec::with_capacity(config.n_layers);
    for (l, p) in params.layers.iter().enumerate() {
        let (out, cache) = block_forward(
            x,
            p,
            config.n_heads,
            scales.attn[l],
            scales.ffn[l],
            scales.block[l],
        )?;
        layers.push(cache);
        x = out;
    }
    let (n_final, inv_rms_final) = rms_norm(&x, params.final_norm.as_slice());
    let logits = n_final.matmul_t(&params.tok_emb)?;
    Ok(Forward {
        logits,
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        inv_rms_final,
        n_final,
    })
}

/// Accumulates `∂L/∂θ` into `grads`, given `dlogits = ∂L/∂logits`.
pub(crate) fn backward(
    params: &ModelParams,
    scales: &LayerScales,
    fwd: &Forward,
    dlogits: &Matrix,
    grads: &mut ModelParams,
) -> Result<()> {
    let (t, d) = fwd.x_final.shape();
    let dn_final = dlogits.matmul(&params.tok_emb)?;
    gemm(1.0, dlogits, true, &fwd.n_final, false, 1.0, &mut grads.tok_emb)?;
    let mut dx = Matrix::zeros(t, d);
    rms_norm_backward(
        &fwd.x_final,
        params.final_norm.as_slice(),
        &fwd.inv_rms_final,
        &dn_final,
        &mut dx,
        grads.final_norm.as_mut_slice(),
    );

    for l in (0..fwd.layers.len()).rev() {
        let c = &fwd.layers[l];
        let p = &params.layers[l];
        let g = &mut grads.layers[l];
        let (s_attn, s_ffn, s_block) = (scales.attn[l], scales.ffn[l], scales.block[l]);

        // out = x + s_block·(a + s_ffn·ffn_raw)
        let mut dsum = dx.clone();
        dsum.scale(s_block);
        let mut dffn = dsum.clone();
        dffn.scale(s_ffn);

        gemm(1.0, &c.act, true, &dffn, false, 1.0, &mut g.ffn_value)?;
        let mut dpre = dffn.matmul_t(&p.ffn_value)?;
        for (dz, z) in dpre.as_mut_slice().iter_mut().zip(c.pre_act.as_slice()) {
            if *z <= 0.0 {
                *dz = 0.0;
            }
        }
        gemm(1.0, &dpre, true, &c.n2, false, 1.0, &mut g.ffn_key)?;
        let dn2 = dpre.matmul(&p.ffn_key)?;
        let mut dh = Matrix::zeros(t, d);
        rms_norm_backward(
            &c.h,
            p.ffn_norm.as_slice(),
            &c.inv_rms2,
            &dn2,
            &mut dh,
            g.ffn_norm.as_mut_slice(),
        );

        // h = x + a, and a also feeds the block sum directly.
        let mut dx_next = dx;
        dx_next.add_assign(&dh)?;
        let mut da = dsum;
        da.add_assign(&dh)?;
        da.scale(s_attn);

        gemm(1.0, &da, true, &c.ctx, false, 1.0, &mut g.wo)?;
        let dctx = da.matmul(&p.wo)?;
        let (dq, dk, dv) = causal_attention_backward(&c.q, &c.k, &c.v, &c.probs, &dctx);
        gemm(1.0, &dq, true, &c.n1, false, 1.0, &mut g.wq)?;
        gemm(1.0, &dk, true, &c.n1, false, 1.0, &mut g.wk)?;
        gemm(1.0, &dv, true, &c.n1, false, 1.0, &mut g.wv)?;
        let mut dn1 = dq.matmul(&p.wq)?;
        gemm(1.0, &dk, false, &p.wk, false, 1.0, &mut dn1)?;
        gemm(1.0, &dv, false, &p.wv, false, 1.0, &mut dn1)?;
        rms_norm_backward(
            &c.x,
            p.attn_norm.as_slice(),
            &c.inv_rms1,
            &dn1,
            &mut dx_next,
            g.attn_norm.as_mut_slice(),
        );
        dx = dx_next;
    }

    for (i, &tok) in fwd.tokens.iter().enumerate() {
        axpy(1.0, dx.row(i), grads.tok_emb.row_mut(tok as usize));
        axpy(1.0, dx.row(i), grads.pos_emb.row_mut(i));
    }
    Ok(())
}

/// A supervised next-token prediction: logits at `pos` should predict
/// `token`, contributing `weight · CE` to the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Target {
    pub pos: usize,
    pub token: TokenId,
    pub weight: f64,
}

/// Weighted cross-entropy over `targets` and its gradient wrt the logits.
pub(crate) fn weighted_ce(logits: &Matrix, targets: &[Target]) -> Result<(f64, Matrix)> {
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut probs = vec![0.0; logits.cols()];
    for tg in targets {
        if tg.pos >= logits.rows() {
            return Err(Error::IndexOutOfRange {
                index: tg.pos,
                len: logits.rows(),
            });
        }
        probs.copy_from_slice(logits.row(tg.pos));
        softmax_in_place(&mut probs)?;
        let tok = tg.token as usize;
        loss += tg.weight * crate::numerics::cross_entropy_slice(logits.row(tg.pos), tok)?;
        let row = dlogits.row_mut(tg.pos);
        axpy(tg.weight, &probs, row);
        row[tok] -= tg.weight;
    }
    Ok((loss, dlogits))
}
