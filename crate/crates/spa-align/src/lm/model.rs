//! A small decoder-only transformer with a hand-written backward pass.
//!
//! Pre-norm blocks, learned positional embeddings, multi-head causal
//! attention, SiLU MLP. The forward pass records every intermediate it
//! needs, so `backward` can push a gradient on the logits down to every
//! parameter without an autodiff graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::tensor::{gaussian, GradStore, ParameterStore, Scalar, Tensor};
use crate::seeding::{rng_for, stage};

const LN_EPS: f64 = 1e-5;

/// Architecture hyper-parameters. Total parameters stay desk-scale (about a
/// million at most).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Reuse the token embedding as the output head.
    #[serde(default)]
    pub tie_output: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.context_length == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
        {
            return Err(Error::Config(
                "model dimensions must all be positive".to_string(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every tensor this architecture owns, in manifest
    /// (sorted-name) order once stored.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_length, d]),
        ];
        for l in 0..self.n_layers {
            let p = format!("layer{l}");
            out.push((format!("{p}.ln1.g"), vec![d]));
            out.push((format!("{p}.ln1.b"), vec![d]));
            out.push((format!("{p}.attn.wq"), vec![d, d]));
            out.push((format!("{p}.attn.wk"), vec![d, d]));
            out.push((format!("{p}.attn.wv"), vec![d, d]));
            out.push((format!("{p}.attn.wo"), vec![d, d]));
            out.push((format!("{p}.ln2.g"), vec![d]));
            out.push((format!("{p}.ln2.b"), vec![d]));
            out.push((format!("{p}.mlp.w1"), vec![4 * d, d]));
            out.push((format!("{p}.mlp.w2"), vec![d, 4 * d]));
        }
        out.push(("ln_f.g".to_string(), vec![d]));
        out.push(("ln_f.b".to_string(), vec![d]));
        if !self.tie_output {
            out.push(("head.w".to_string(), vec![self.vocab_size, d]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Fresh parameters: gaussian(0.02) weights, unit layer-norm gains, and
    /// zero-initialized residual output projections.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> Result<ParameterStore<F>> {
        self.validate()?;
        let mut rng = rng_for(&[seed, stage::INIT]);
        let mut store = ParameterStore::new();
        for (name, shape) in self.tensor_shapes() {
            let tensor = if name.ends_with(".g") {
                Tensor::filled(&shape, F::one())
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".attn.wo") || name.ends_with(".mlp.w2") {
                Tensor::zeros(&shape)
            } else {
                let numel = shape.iter().product();
                let data = (0..numel).map(|_| gaussian(&mut rng, 0.02)).collect();
                Tensor::from_data(&shape, data)?
            };
            store.insert(name, tensor)?;
        }
        Ok(store)
    }

    /// Checks a parameter store against this architecture.
    pub fn check_params<F: Scalar>(&self, params: &ParameterStore<F>) -> Result<()> {
        let expected = self.tensor_shapes();
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, store has {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            let t = params
                .try_get(&name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// y = x @ w^T for row-major x: [t, din], w: [dout, din], y: [t, dout].
fn matmul<F: Scalar>(y: &mut [F], x: &[F], w: &[F], t: usize, din: usize, dout: usize) {
    for r in 0..t {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * din..(o + 1) * din]);
        }
    }
}

/// dx += dy @ w.
fn matmul_grad_x<F: Scalar>(dx: &mut [F], dy: &[F], w: &[F], t: usize, din: usize, dout: usize) {
    for r in 0..t {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for (o, &g) in dyr.iter().enumerate() {
            axpy(dxr, g, &w[o * din..(o + 1) * din]);
        }
    }
}

/// dw += dy^T @ x.
fn matmul_grad_w<F: Scalar>(dw: &mut [F], dy: &[F], x: &[F], t: usize, din: usize, dout: usize) {
    for r in 0..t {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let xr = &x[r * din..(r + 1) * din];
        for (o, &g) in dyr.iter().enumerate() {
            axpy(&mut dw[o * din..(o + 1) * din], g, xr);
        }
    }
}

#[inline]
fn sigmoid_s<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid_s(x)
}

#[inline]
fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid_s(x);
    s * (F::one() + x * (F::one() - s))
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    out: Vec<F>,
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

fn ln_forward<F: Scalar>(x: &[F], g: &[F], b: &[F], t: usize, d: usize) -> LnCache<F> {
    let mut out = vec![F::zero(); t * d];
    let mut xhat = vec![F::zero(); t * d];
    let mut inv_std = vec![F::zero(); t];
    let dn = F::from_f64(d as f64);
    let eps = F::from_f64(LN_EPS);
    for r in 0..t {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for i in 0..d {
            let xh = (xr[i] - mean) * inv;
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * g[i] + b[i];
        }
    }
    LnCache { out, xhat, inv_std }
}

/// Returns dx; accumulates dg/db.
fn ln_backward<F: Scalar>(
    dout: &[F],
    cache: &LnCache<F>,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
    t: usize,
    d: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); t * d];
    let dn = F::from_f64(d as f64);
    for r in 0..t {
        let dor = &dout[r * d..(r + 1) * d];
        let xhr = &cache.xhat[r * d..(r + 1) * d];
        let inv = cache.inv_std[r];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for i in 0..d {
            let dxh = dor[i] * g[i];
            m1 += dxh;
            m2 += dxh * xhr[i];
            dg[i] += dor[i] * xhr[i];
            db[i] += dor[i];
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let dxh = dor[i] * g[i];
            dxr[i] = inv * (dxh - m1 - xhr[i] * m2);
        }
    }
    dx
}

/// In-place softmax over `row[..=last]`, leaving later entries untouched.
fn softmax_prefix<F: Scalar>(row: &mut [F], last: usize) {
    let slice = &mut row[..=last];
    let max = slice.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in slice.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in slice.iter_mut() {
        *v = *v / total;
    }
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    ln1: LnCache<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// Attention weights, `[n_heads, t, t]`, lower triangle filled.
    attn: Vec<F>,
    heads_out: Vec<F>,
    ln2: LnCache<F>,
    mlp_pre: Vec<F>,
    mlp_act: Vec<F>,
}

/// Everything one forward pass produced; owns the logits and the activation
/// record the backward pass consumes.
#[derive(Debug, Clone)]
pub struct ForwardPass<F> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<F>>,
    ln_f: LnCache<F>,
    logits: Vec<F>,
    vocab: usize,
}

impl<F: Scalar> ForwardPass<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Logits row for position `t` (predicting token `t + 1`).
    pub fn logits_row(&self, t: usize) -> &[F] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn logits_flat(&self) -> &[F] {
        &self.logits
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Shape("forward over an empty sequence".to_string()));
    }
    if tokens.len() > config.context_length {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.context_length,
        });
    }
    for &tok in tokens {
        if tok as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: tok,
                vocab_size: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// Full-sequence forward pass, recording activations for `backward`.
pub fn forward<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    tokens: &[u32],
) -> Result<ForwardPass<F>> {
    check_tokens(config, tokens)?;
    let t = tokens.len();
    let d = config.d_model;
    let nh = config.n_heads;
    let dh = config.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let tok_emb = params.get("tok_emb").data();
    let pos_emb = params.get("pos_emb").data();
    let mut x = vec![F::zero(); t * d];
    for (r, &tok) in tokens.iter().enumerate() {
        let te = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &pos_emb[r * d..(r + 1) * d];
        for i in 0..d {
            x[r * d + i] = te[i] + pe[i];
        }
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("layer{l}");
        let ln1 = ln_forward(
            &x,
            params.get(&format!("{p}.ln1.g")).data(),
            params.get(&format!("{p}.ln1.b")).data(),
            t,
            d,
        );
        let mut q = vec![F::zero(); t * d];
        let mut k = vec![F::zero(); t * d];
        let mut v = vec![F::zero(); t * d];
        matmul(&mut q, &ln1.out, params.get(&format!("{p}.attn.wq")).data(), t, d, d);
        matmul(&mut k, &ln1.out, params.get(&format!("{p}.attn.wk")).data(), t, d, d);
        matmul(&mut v, &ln1.out, params.get(&format!("{p}.attn.wv")).data(), t, d, d);

        let mut attn = vec![F::zero(); nh * t * t];
        let mut heads_out = vec![F::zero(); t * d];
        for h in 0..nh {
            let hoff = h * dh;
            for r in 0..t {
                let qrow = &q[r * d + hoff..r * d + hoff + dh];
                let arow = &mut attn[h * t * t + r * t..h * t * t + (r + 1) * t];
                for u in 0..=r {
                    arow[u] = dot(qrow, &k[u * d + hoff..u * d + hoff + dh]) * scale;
                }
                softmax_prefix(arow, r);
                let orow = &mut heads_out[r * d + hoff..r * d + hoff + dh];
                for u in 0..=r {
                    axpy(orow, arow[u], &v[u * d + hoff..u * d + hoff + dh]);
                }
            }
        }

        let mut attn_out = vec![F::zero(); t * d];
        matmul(
            &mut attn_out,
            &heads_out,
            params.get(&format!("{p}.attn.wo")).data(),
            t,
            d,
            d,
        );
        let mut x_mid = vec![F::zero(); t * d];
        for i in 0..t * d {
            x_mid[i] = x[i] + attn_out[i];
        }

        let ln2 = ln_forward(
            &x_mid,
            params.get(&format!("{p}.ln2.g")).data(),
            params.get(&format!("{p}.ln2.b")).data(),
            t,
            d,
        );
        let dff = 4 * d;
        let mut mlp_pre = vec![F::zero(); t * dff];
        matmul(&mut mlp_pre, &ln2.out, params.get(&format!("{p}.mlp.w1")).data(), t, d, dff);
        let mlp_act: Vec<F> = mlp_pre.iter().map(|&h| silu(h)).collect();
        let mut mlp_out = vec![F::zero(); t * d];
        matmul(&mut mlp_out, &mlp_act, params.get(&format!("{p}.mlp.w2")).data(), t, dff, d);

        let mut x_out = vec![F::zero(); t * d];
        for i in 0..t * d {
            x_out[i] = x_mid[i] + mlp_out[i];
        }

        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            attn,
            heads_out,
            ln2,
            mlp_pre,
            mlp_act,
        });
        x = x_out;
    }

    let ln_f = ln_forward(
        &x,
        params.get("ln_f.g").data(),
        params.get("ln_f.b").data(),
        t,
        d,
    );
    let head = if config.tie_output {
        params.get("tok_emb").data()
    } else {
        params.get("head.w").data()
    };
    let vs = config.vocab_size;
    let mut logits = vec![F::zero(); t * vs];
    matmul(&mut logits, &ln_f.out, head, t, d, vs);

    Ok(ForwardPass {
        tokens: tokens.to_vec(),
        layers,
        ln_f,
        logits,
        vocab: vs,
    })
}

/// Forward pass when only the logits matter; the activation record is still
/// built but callers treat the result as a logits matrix.
pub fn forward_logits<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    tokens: &[u32],
) -> Result<ForwardPass<F>> {
    forward(config, params, tokens)
}

/// Accumulates parameter gradients for a loss whose gradient on the logits is
/// `dlogits` (flat `[t, vocab]`, matching the pass).
pub fn backward<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    pass: &ForwardPass<F>,
    dlogits: &[F],
    grads: &mut GradStore<F>,
) {
    let t = pass.tokens.len();
    let d = config.d_model;
    let nh = config.n_heads;
    let dh = config.head_dim();
    let vs = config.vocab_size;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    assert_eq!(dlogits.len(), t * vs, "dlogits shape mismatch");

    // Head.
    let head_name = if config.tie_output { "tok_emb" } else { "head.w" };
    let mut d_lnf_out = vec![F::zero(); t * d];
    matmul_grad_x(&mut d_lnf_out, dlogits, params.get(head_name).data(), t, d, vs);
    matmul_grad_w(
        grads.get_mut(head_name).data_mut(),
        dlogits,
        &pass.ln_f.out,
        t,
        d,
        vs,
    );

    // Final layer norm.
    let mut dg_buf = vec![F::zero(); d];
    let mut db_buf = vec![F::zero(); d];
    let mut dx = ln_backward(
        &d_lnf_out,
        &pass.ln_f,
        params.get("ln_f.g").data(),
        &mut dg_buf,
        &mut db_buf,
        t,
        d,
    );
    axpy(grads.get_mut("ln_f.g").data_mut(), F::one(), &dg_buf);
    axpy(grads.get_mut("ln_f.b").data_mut(), F::one(), &db_buf);

    for l in (0..config.n_layers).rev() {
        let p = format!("layer{l}");
        let lc = &pass.layers[l];
        let dff = 4 * d;

        // MLP block backward; dx currently holds d(x_out).
        let d_mlp_out = &dx;
        let mut d_mlp_act = vec![F::zero(); t * dff];
        matmul_grad_x(
            &mut d_mlp_act,
            d_mlp_out,
            params.get(&format!("{p}.mlp.w2")).data(),
            t,
            dff,
            d,
        );
        matmul_grad_w(
            grads.get_mut(&format!("{p}.mlp.w2")).data_mut(),
            d_mlp_out,
            &lc.mlp_act,
            t,
            dff,
            d,
        );
        let mut d_mlp_pre = d_mlp_act;
        for (g, &h) in d_mlp_pre.iter_mut().zip(&lc.mlp_pre) {
            *g *= silu_grad(h);
        }
        let mut d_ln2_out = vec![F::zero(); t * d];
        matmul_grad_x(
            &mut d_ln2_out,
            &d_mlp_pre,
            params.get(&format!("{p}.mlp.w1")).data(),
            t,
            d,
            dff,
        );
        matmul_grad_w(
            grads.get_mut(&format!("{p}.mlp.w1")).data_mut(),
            &d_mlp_pre,
            &lc.ln2.out,
            t,
            d,
            dff,
        );
        let mut dg_buf = vec![F::zero(); d];
        let mut db_buf = vec![F::zero(); d];
        let d_mid_ln = ln_backward(
            &d_ln2_out,
            &lc.ln2,
            params.get(&format!("{p}.ln2.g")).data(),
            &mut dg_buf,
            &mut db_buf,
            t,
            d,
        );
        axpy(grads.get_mut(&format!("{p}.ln2.g")).data_mut(), F::one(), &dg_buf);
        axpy(grads.get_mut(&format!("{p}.ln2.b")).data_mut(), F::one(), &db_buf);
        // Residual: d(x_mid) = d(x_out) + ln2 path.
        let mut d_mid = dx;
        axpy(&mut d_mid, F::one(), &d_mid_ln);

        // Attention block backward; d_mid holds d(x_mid).
        let d_attn_out = &d_mid;
        let mut d_heads = vec![F::zero(); t * d];
        matmul_grad_x(
            &mut d_heads,
            d_attn_out,
            params.get(&format!("{p}.attn.wo")).data(),
            t,
            d,
            d,
        );
        matmul_grad_w(
            grads.get_mut(&format!("{p}.attn.wo")).data_mut(),
            d_attn_out,
            &lc.heads_out,
            t,
            d,
            d,
        );

        let mut dq = vec![F::zero(); t * d];
        let mut dk = vec![F::zero(); t * d];
        let mut dv = vec![F::zero(); t * d];
        let mut daw = vec![F::zero(); t]; // reused per row
        for h in 0..nh {
            let hoff = h * dh;
            for r in 0..t {
                let arow = &lc.attn[h * t * t + r * t..h * t * t + r * t + t];
                let dh_row = &d_heads[r * d + hoff..r * d + hoff + dh];
                // Gradients into attention weights and values.
                for u in 0..=r {
                    daw[u] = dot(dh_row, &lc.v[u * d + hoff..u * d + hoff + dh]);
                    axpy(
                        &mut dv[u * d + hoff..u * d + hoff + dh],
                        arow[u],
                        dh_row,
                    );
                }
                // Softmax backward over the causal prefix.
                let mut inner = F::zero();
                for u in 0..=r {
                    inner += arow[u] * daw[u];
                }
                // Scores backward into q and k.
                let qrow_grad_base = r * d + hoff;
                for u in 0..=r {
                    let ds = arow[u] * (daw[u] - inner) * scale;
                    axpy(
                        &mut dq[qrow_grad_base..qrow_grad_base + dh],
                        ds,
                        &lc.k[u * d + hoff..u * d + hoff + dh],
                    );
                    axpy(
                        &mut dk[u * d + hoff..u * d + hoff + dh],
                        ds,
                        &lc.q[r * d + hoff..r * d + hoff + dh],
                    );
                }
            }
        }

        let mut d_ln1_out = vec![F::zero(); t * d];
        for (name, dmat) in [("wq", &dq), ("wk", &dk), ("wv", &dv)] {
            let wname = format!("{p}.attn.{name}");
            matmul_grad_x(&mut d_ln1_out, dmat, params.get(&wname).data(), t, d, d);
            matmul_grad_w(grads.get_mut(&wname).data_mut(), dmat, &lc.ln1.out, t, d, d);
        }
        let mut dg_buf = vec![F::zero(); d];
        let mut db_buf = vec![F::zero(); d];
        let d_in_ln = ln_backward(
            &d_ln1_out,
            &lc.ln1,
            params.get(&format!("{p}.ln1.g")).data(),
            &mut dg_buf,
            &mut db_buf,
            t,
            d,
        );
        axpy(grads.get_mut(&format!("{p}.ln1.g")).data_mut(), F::one(), &dg_buf);
        axpy(grads.get_mut(&format!("{p}.ln1.b")).data_mut(), F::one(), &db_buf);

        // Residual: d(x_in) = d(x_mid) + ln1 path.
        dx = d_mid;
        axpy(&mut dx, F::one(), &d_in_ln);
    }

    // Embeddings.
    let tok_grad = grads.get_mut("tok_emb").data_mut();
    for (r, &tok) in pass.tokens.iter().enumerate() {
        axpy(
            &mut tok_grad[tok as usize * d..(tok as usize + 1) * d],
            F::one(),
            &dx[r * d..(r + 1) * d],
        );
    }
    let pos_grad = grads.get_mut("pos_emb").data_mut();
    for r in 0..t {
        axpy(
            &mut pos_grad[r * d..(r + 1) * d],
            F::one(),
            &dx[r * d..(r + 1) * d],
        );
    }
}

/// Accumulated keys/values for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    len: usize,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            k: vec![Vec::new(); config.n_layers],
            v: vec![Vec::new(); config.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Processes one token at position `cache.len()` and returns the logits row
/// for the next token. Arithmetic matches the corresponding row of the full
/// forward pass.
pub fn forward_step<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    token: u32,
    cache: &mut KvCache<F>,
) -> Result<Vec<F>> {
    let d = config.d_model;
    let nh = config.n_heads;
    let dh = config.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let pos = cache.len;
    if pos >= config.context_length {
        return Err(Error::SequenceTooLong {
            len: pos + 1,
            max: config.context_length,
        });
    }
    if token as usize >= config.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab_size: config.vocab_size,
        });
    }

    let tok_emb = params.get("tok_emb").data();
    let pos_emb = params.get("pos_emb").data();
    let mut x = vec![F::zero(); d];
    for i in 0..d {
        x[i] = tok_emb[token as usize * d + i] + pos_emb[pos * d + i];
    }

    for l in 0..config.n_layers {
        let p = format!("layer{l}");
        let ln1 = ln_forward(
            &x,
            params.get(&format!("{p}.ln1.g")).data(),
            params.get(&format!("{p}.ln1.b")).data(),
            1,
            d,
        );
        let mut q = vec![F::zero(); d];
        let mut k = vec![F::zero(); d];
        let mut v = vec![F::zero(); d];
        matmul(&mut q, &ln1.out, params.get(&format!("{p}.attn.wq")).data(), 1, d, d);
        matmul(&mut k, &ln1.out, params.get(&format!("{p}.attn.wk")).data(), 1, d, d);
        matmul(&mut v, &ln1.out, params.get(&format!("{p}.attn.wv")).data(), 1, d, d);
        cache.k[l].extend_from_slice(&k);
        cache.v[l].extend_from_slice(&v);
        let t_len = pos + 1;

        let mut heads_out = vec![F::zero(); d];
        let mut scores = vec![F::zero(); t_len];
        for h in 0..nh {
            let hoff = h * dh;
            let qh = &q[hoff..hoff + dh];
            for u in 0..t_len {
                scores[u] = dot(qh, &cache.k[l][u * d + hoff..u * d + hoff + dh]) * scale;
            }
            softmax_prefix(&mut scores, t_len - 1);
            let orow = &mut heads_out[hoff..hoff + dh];
            for u in 0..t_len {
                axpy(orow, scores[u], &cache.v[l][u * d + hoff..u * d + hoff + dh]);
            }
        }

        let mut attn_out = vec![F::zero(); d];
        matmul(&mut attn_out, &heads_out, params.get(&format!("{p}.attn.wo")).data(), 1, d, d);
        let mut x_mid = vec![F::zero(); d];
        for i in 0..d {
            x_mid[i] = x[i] + attn_out[i];
        }

        let ln2 = ln_forward(
            &x_mid,
            params.get(&format!("{p}.ln2.g")).data(),
            params.get(&format!("{p}.ln2.b")).data(),
            1,
            d,
        );
        let dff = 4 * d;
        let mut mlp_pre = vec![F::zero(); dff];
        matmul(&mut mlp_pre, &ln2.out, params.get(&format!("{p}.mlp.w1")).data(), 1, d, dff);
        let mlp_act: Vec<F> = mlp_pre.iter().map(|&h| silu(h)).collect();
        let mut mlp_out = vec![F::zero(); d];
        matmul(&mut mlp_out, &mlp_act, params.get(&format!("{p}.mlp.w2")).data(), 1, dff, d);
        for i in 0..d {
            x[i] = x_mid[i] + mlp_out[i];
        }
    }

    let ln_f = ln_forward(
        &x,
        params.get("ln_f.g").data(),
        params.get("ln_f.b").data(),
        1,
        d,
    );
    let head = if config.tie_output {
        params.get("tok_emb").data()
    } else {
        params.get("head.w").data()
    };
    let vs = config.vocab_size;
    let mut logits = vec![F::zero(); vs];
    matmul(&mut logits, &ln_f.out, head, 1, d, vs);
    cache.len += 1;
    Ok(logits)
}
