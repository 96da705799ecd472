//! Training-mode forward pass with activation recording, and the
//! hand-derived backward pass.
//!
//! `forward_one_train` mirrors the inference forward for a single batch
//! element (training never hooks) and must stay bitwise-identical to it;
//! a regression test pins that equality. `backward_one` walks the tape in
//! reverse and accumulates parameter gradients.

use super::{
    affine, apply_gated_residual, layer_norm_with_stats, modulate, modulation, silu, sin_embed,
    DitModel, Params, TextCondition,
};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, softmax_row_in_place, Tensor2D};

/// Per-layer recorded activations.
pub(crate) struct LayerTape {
    mods: Tensor2D,
    ln1: Tensor2D,
    inv1: Vec<f64>,
    hmod1: Tensor2D,
    q1: Tensor2D,
    k1: Tensor2D,
    v1: Tensor2D,
    probs1: Vec<Tensor2D>,
    attn1: Tensor2D,
    o1: Tensor2D,
    ln2: Tensor2D,
    inv2: Vec<f64>,
    hmod2: Tensor2D,
    q2: Tensor2D,
    k2: Tensor2D,
    v2: Tensor2D,
    probs2: Vec<Tensor2D>,
    attn2: Tensor2D,
    o2: Tensor2D,
    ln3: Tensor2D,
    inv3: Vec<f64>,
    hmod3: Tensor2D,
    u: Tensor2D,
    act: Tensor2D,
    mlp: Tensor2D,
}

/// Recorded activations for one element's forward pass.
pub struct Tape {
    pub(crate) x: Tensor2D,
    pub(crate) active: usize,
    pub(crate) sin_t: Tensor2D,
    pub(crate) sin_dur: Tensor2D,
    pub(crate) z_cond: Tensor2D,
    pub(crate) cond_vec: Tensor2D,
    pub(crate) text: TextCondition,
    pub(crate) layers: Vec<LayerTape>,
    pub(crate) ln_f: Tensor2D,
    pub(crate) inv_f: Vec<f64>,
    pub(crate) modf: Tensor2D,
    pub(crate) y_pre: Tensor2D,
}

impl Tape {
    /// Active prefix length recorded for this element.
    pub fn active(&self) -> usize {
        self.active
    }
}

/// Multi-head attention that also returns the per-head softmax rows.
/// Arithmetic order matches `multi_head_attention` exactly.
fn mha_with_probs(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    heads: usize,
) -> Result<(Tensor2D, Vec<Tensor2D>)> {
    let d = q.cols();
    if d % heads != 0 || k.cols() != d || v.cols() != d || k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::shape("mha_with_probs: bad shapes"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor2D::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(heads);
    let mut scores = vec![0.0; k.rows()];
    for h in 0..heads {
        let off = h * dh;
        let mut p = Tensor2D::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            let qrow = &q.row(i)[off..off + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &k.row(j)[off..off + dh];
                let mut acc = 0.0;
                for (a, b) in qrow.iter().zip(krow) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            softmax_row_in_place(&mut scores);
            p.row_mut(i).copy_from_slice(&scores);
            let orow = &mut out.row_mut(i)[off..off + dh];
            for (j, &pj) in scores.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                let vrow = &v.row(j)[off..off + dh];
                for (o, val) in orow.iter_mut().zip(vrow) {
                    *o += pj * val;
                }
            }
        }
        probs.push(p);
    }
    Ok((out, probs))
}

impl DitModel {
    /// Training forward for one element; returns the prediction and the
    /// activation tape.
    pub fn forward_one_train(
        &self,
        latent: &Tensor2D,
        step: usize,
        cond: &TextCondition,
        duration_s: f64,
    ) -> Result<(Tensor2D, Tape)> {
        let cfg = self.config();
        let frames = latent.rows();
        if frames > cfg.max_frames || latent.cols() != cfg.latent_channels {
            return Err(Error::shape(format!(
                "latent {}x{} vs max_frames {} channels {}",
                frames,
                latent.cols(),
                cfg.max_frames,
                cfg.latent_channels
            )));
        }
        let active = self.active_frames(duration_s);
        if active > frames {
            return Err(Error::shape(format!(
                "duration {duration_s}s needs {active} frames, latent has {frames}"
            )));
        }
        let d = cfg.dim;
        let sin_t = sin_embed(step as f64, d);
        let sin_dur = sin_embed(duration_s * cfg.frame_rate, d);
        let (z_cond, cond_vec) = self.condition_vector(step, duration_s);

        let mut h = self.embed_tokens(latent, active);
        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &self.params.layers {
            let mods = modulation(&cond_vec, &lp.w_mod, &lp.b_mod)?;

            // Self-attention.
            let (ln1, inv1) = layer_norm_with_stats(&h);
            let hmod1 = modulate(&ln1, &mods, 0);
            let q1 = affine(&hmod1, &lp.w_q, &lp.b_q)?;
            let k1 = affine(&hmod1, &lp.w_k, &lp.b_k)?;
            let v1 = affine(&hmod1, &lp.w_v, &lp.b_v)?;
            let (attn1, probs1) = mha_with_probs(
                &q1,
                &k1.slice_rows(0..active),
                &v1.slice_rows(0..active),
                cfg.heads,
            )?;
            let o1 = affine(&attn1, &lp.w_o, &lp.b_o)?;
            apply_gated_residual(&mut h, &o1, &mods, 2);

            // Cross-attention.
            let (ln2, inv2) = layer_norm_with_stats(&h);
            let hmod2 = modulate(&ln2, &mods, 3);
            let q2 = affine(&hmod2, &lp.w_q2, &lp.b_q2)?;
            let k2 = affine(&cond.embeddings, &lp.w_k2, &lp.b_k2)?;
            let v2 = affine(&cond.embeddings, &lp.w_v2, &lp.b_v2)?;
            let (attn2, probs2) = mha_with_probs(&q2, &k2, &v2, cfg.heads)?;
            let o2 = affine(&attn2, &lp.w_o2, &lp.b_o2)?;
            apply_gated_residual(&mut h, &o2, &mods, 5);

            // MLP.
            let (ln3, inv3) = layer_norm_with_stats(&h);
            let hmod3 = modulate(&ln3, &mods, 6);
            let u = affine(&hmod3, &lp.w_up, &lp.b_up)?;
            let act = silu(&u);
            let mlp = affine(&act, &lp.w_down, &lp.b_down)?;
            apply_gated_residual(&mut h, &mlp, &mods, 8);

            layers.push(LayerTape {
                mods,
                ln1,
                inv1,
                hmod1,
                q1,
                k1,
                v1,
                probs1,
                attn1,
                o1,
                ln2,
                inv2,
                hmod2,
                q2,
                k2,
                v2,
                probs2,
                attn2,
                o2,
                ln3,
                inv3,
                hmod3,
                u,
                act,
                mlp,
            });
        }

        let modf = modulation(&cond_vec, &self.params.w_modf, &self.params.b_modf)?;
        let (ln_f, inv_f) = layer_norm_with_stats(&h);
        let y_pre = modulate(&ln_f, &modf, 0);
        let mut y = affine(&y_pre, &self.params.w_out, &self.params.b_out)?;
        for r in active..y.rows() {
            for v in y.row_mut(r) {
                *v = 0.0;
            }
        }

        let tape = Tape {
            x: latent.clone(),
            active,
            sin_t,
            sin_dur,
            z_cond,
            cond_vec,
            text: cond.clone(),
            layers,
            ln_f,
            inv_f,
            modf,
            y_pre,
        };
        Ok((y, tape))
    }
}

fn add_assign(dst: &mut Tensor2D, src: &Tensor2D) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += *b;
    }
}

/// `into += a^T * b` where a is (m x p), b is (m x q), into is (p x q).
fn matmul_tn_acc(a: &Tensor2D, b: &Tensor2D, into: &mut Tensor2D) {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(into.rows(), a.cols());
    debug_assert_eq!(into.cols(), b.cols());
    let q = b.cols();
    for i in 0..a.rows() {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let irow = &mut into.data_mut()[p * q..(p + 1) * q];
            for (o, &bv) in irow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Column sums of `x` accumulated into a 1-row tensor.
fn colsum_acc(x: &Tensor2D, into: &mut Tensor2D) {
    debug_assert_eq!(into.cols(), x.cols());
    for r in 0..x.rows() {
        for (o, v) in into.row_mut(0).iter_mut().zip(x.row(r)) {
            *o += *v;
        }
    }
}

/// Layer-norm backward (no affine): rows of `g` are gradients w.r.t. the
/// normalized output `xhat`; `inv` holds 1/sigma per row.
fn ln_backward(g: &Tensor2D, xhat: &Tensor2D, inv: &[f64]) -> Tensor2D {
    let d = g.cols() as f64;
    let mut out = g.clone();
    for r in 0..g.rows() {
        let grow = g.row(r);
        let xrow = xhat.row(r);
        let mean_g: f64 = grow.iter().sum::<f64>() / d;
        let mean_gx: f64 = grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d;
        let orow = out.row_mut(r);
        for c in 0..grow.len() {
            orow[c] = inv[r] * (grow[c] - mean_g - xrow[c] * mean_gx);
        }
    }
    out
}

/// Backward through `x * (1+scale) + shift` modulation. Returns the input
/// gradient and accumulates shift/scale gradients into `d_mods`.
fn modulate_backward(
    d_out: &Tensor2D,
    x: &Tensor2D,
    mods: &Tensor2D,
    base: usize,
    d_mods: &mut Tensor2D,
) -> Tensor2D {
    let d = x.cols();
    let mut dx = d_out.clone();
    for r in 0..x.rows() {
        for c in 0..d {
            let g = d_out.get(r, c);
            let scale = mods.get(0, (base + 1) * d + c);
            dx.set(r, c, g * (1.0 + scale));
            // d_shift
            let s = d_mods.get(0, base * d + c) + g;
            d_mods.set(0, base * d + c, s);
            // d_scale
            let sc = d_mods.get(0, (base + 1) * d + c) + g * x.get(r, c);
            d_mods.set(0, (base + 1) * d + c, sc);
        }
    }
    dx
}

/// Gate backward: residual was `h += gate ⊙ out`. Returns d_out and
/// accumulates the gate gradient at `gate_chunk`.
fn gate_backward(
    d_h: &Tensor2D,
    out: &Tensor2D,
    mods: &Tensor2D,
    gate_chunk: usize,
    d_mods: &mut Tensor2D,
) -> Tensor2D {
    let d = out.cols();
    let mut d_out = d_h.clone();
    for r in 0..out.rows() {
        for c in 0..d {
            let g = d_h.get(r, c);
            let gate = mods.get(0, gate_chunk * d + c);
            d_out.set(r, c, g * gate);
            let acc = d_mods.get(0, gate_chunk * d + c) + g * out.get(r, c);
            d_mods.set(0, gate_chunk * d + c, acc);
        }
    }
    d_out
}

/// Backward through multi-head attention. `probs` are the per-head softmax
/// matrices; accumulates into d_q (full rows) and d_k/d_v (key rows).
fn mha_backward(
    d_out: &Tensor2D,
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    probs: &[Tensor2D],
    heads: usize,
    d_q: &mut Tensor2D,
    d_k: &mut Tensor2D,
    d_v: &mut Tensor2D,
) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nk = k.rows();
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h];
        for i in 0..q.rows() {
            let dorow = &d_out.row(i)[off..off + dh];
            let prow = p.row(i);
            // d_v[j] += p[i][j] * d_out[i]; d_p[j] = d_out[i] . v[j]
            let mut dp = vec![0.0; nk];
            for j in 0..nk {
                let pj = prow[j];
                let vrow = &v.row(j)[off..off + dh];
                let mut acc = 0.0;
                for (a, b) in dorow.iter().zip(vrow) {
                    acc += a * b;
                }
                dp[j] = acc;
                if pj != 0.0 {
                    let dvrow = &mut d_v.row_mut(j)[off..off + dh];
                    for (o, g) in dvrow.iter_mut().zip(dorow) {
                        *o += pj * g;
                    }
                }
            }
            // softmax backward
            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
            // d_q[i] += sum_j ds[j] * k[j] * scale; d_k[j] += ds[j] * q[i] * scale
            let qrow: Vec<f64> = q.row(i)[off..off + dh].to_vec();
            let dqrow = &mut d_q.row_mut(i)[off..off + dh];
            for j in 0..nk {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let krow = &k.row(j)[off..off + dh];
                for (o, kv) in dqrow.iter_mut().zip(krow) {
                    *o += ds * kv;
                }
                let dkrow = &mut d_k.row_mut(j)[off..off + dh];
                for (o, qv) in dkrow.iter_mut().zip(&qrow) {
                    *o += ds * qv;
                }
            }
        }
    }
}

fn silu_backward(d_out: &Tensor2D, u: &Tensor2D) -> Tensor2D {
    let mut dx = d_out.clone();
    for (g, uv) in dx.data_mut().iter_mut().zip(u.data()) {
        let s = 1.0 / (1.0 + (-*uv).exp());
        *g *= s * (1.0 + *uv * (1.0 - s));
    }
    dx
}

/// Backward pass for one element. `d_y` is the loss gradient w.r.t. the
/// model output; rows at or beyond the active prefix are ignored.
/// Parameter gradients accumulate into `grads`.
pub fn backward_one(model: &DitModel, tape: &Tape, d_y: &Tensor2D, grads: &mut Params) -> Result<()> {
    let cfg = model.config();
    let p = &model.params;
    let frames = tape.x.rows();
    if d_y.rows() != frames || d_y.cols() != cfg.latent_channels {
        return Err(Error::shape(format!(
            "d_y {}x{} vs output {}x{}",
            d_y.rows(),
            d_y.cols(),
            frames,
            cfg.latent_channels
        )));
    }
    // Padded rows were zeroed in the forward; they carry no gradient.
    let mut d_y = d_y.clone();
    for r in tape.active..frames {
        for v in d_y.row_mut(r) {
            *v = 0.0;
        }
    }

    let mut d_cond = Tensor2D::zeros(1, cfg.dim);

    // Final projection.
    matmul_tn_acc(&tape.y_pre, &d_y, &mut grads.w_out);
    colsum_acc(&d_y, &mut grads.b_out);
    let d_ypre = matmul_nt(&d_y, &p.w_out)?;

    // Final modulation + layer norm.
    let mut d_modf = Tensor2D::zeros(1, 2 * cfg.dim);
    let d_lnf = modulate_backward(&d_ypre, &tape.ln_f, &tape.modf, 0, &mut d_modf);
    matmul_tn_acc(&tape.cond_vec, &d_modf, &mut grads.w_modf);
    colsum_acc(&d_modf, &mut grads.b_modf);
    add_assign(&mut d_cond, &matmul_nt(&d_modf, &p.w_modf)?);
    let mut d_h = ln_backward(&d_lnf, &tape.ln_f, &tape.inv_f);

    let mut d_text = Tensor2D::zeros(tape.text.embeddings.rows(), cfg.text_dim);

    for (l, lt) in tape.layers.iter().enumerate().rev() {
        let lp = &p.layers[l];
        let gl = &mut grads.layers[l];
        let mut d_mods = Tensor2D::zeros(1, 9 * cfg.dim);

        // MLP sub-block.
        let d_mlp = gate_backward(&d_h, &lt.mlp, &lt.mods, 8, &mut d_mods);
        matmul_tn_acc(&lt.act, &d_mlp, &mut gl.w_down);
        colsum_acc(&d_mlp, &mut gl.b_down);
        let d_act = matmul_nt(&d_mlp, &lp.w_down)?;
        let d_u = silu_backward(&d_act, &lt.u);
        matmul_tn_acc(&lt.hmod3, &d_u, &mut gl.w_up);
        colsum_acc(&d_u, &mut gl.b_up);
        let d_hmod3 = matmul_nt(&d_u, &lp.w_up)?;
        let d_ln3 = modulate_backward(&d_hmod3, &lt.ln3, &lt.mods, 6, &mut d_mods);
        add_assign(&mut d_h, &ln_backward(&d_ln3, &lt.ln3, &lt.inv3));

        // Cross-attention sub-block.
        let d_o2 = gate_backward(&d_h, &lt.o2, &lt.mods, 5, &mut d_mods);
        matmul_tn_acc(&lt.attn2, &d_o2, &mut gl.w_o2);
        colsum_acc(&d_o2, &mut gl.b_o2);
        let d_attn2 = matmul_nt(&d_o2, &lp.w_o2)?;
        let mut d_q2 = Tensor2D::zeros(frames, cfg.dim);
        let mut d_k2 = Tensor2D::zeros(lt.k2.rows(), cfg.dim);
        let mut d_v2 = Tensor2D::zeros(lt.v2.rows(), cfg.dim);
        mha_backward(
            &d_attn2, &lt.q2, &lt.k2, &lt.v2, &lt.probs2, cfg.heads, &mut d_q2, &mut d_k2,
            &mut d_v2,
        );
        matmul_tn_acc(&lt.hmod2, &d_q2, &mut gl.w_q2);
        colsum_acc(&d_q2, &mut gl.b_q2);
        matmul_tn_acc(&tape.text.embeddings, &d_k2, &mut gl.w_k2);
        colsum_acc(&d_k2, &mut gl.b_k2);
        matmul_tn_acc(&tape.text.embeddings, &d_v2, &mut gl.w_v2);
        colsum_acc(&d_v2, &mut gl.b_v2);
        add_assign(&mut d_text, &matmul_nt(&d_k2, &lp.w_k2)?);
        add_assign(&mut d_text, &matmul_nt(&d_v2, &lp.w_v2)?);
        let d_hmod2 = matmul_nt(&d_q2, &lp.w_q2)?;
        let d_ln2 = modulate_backward(&d_hmod2, &lt.ln2, &lt.mods, 3, &mut d_mods);
        add_assign(&mut d_h, &ln_backward(&d_ln2, &lt.ln2, &lt.inv2));

        // Self-attention sub-block.
        let d_o1 = gate_backward(&d_h, &lt.o1, &lt.mods, 2, &mut d_mods);
        matmul_tn_acc(&lt.attn1, &d_o1, &mut gl.w_o);
        colsum_acc(&d_o1, &mut gl.b_o);
        let d_attn1 = matmul_nt(&d_o1, &lp.w_o)?;
        let k1sub = lt.k1.slice_rows(0..tape.active);
        let v1sub = lt.v1.slice_rows(0..tape.active);
        let mut d_q1 = Tensor2D::zeros(frames, cfg.dim);
        let mut d_k1sub = Tensor2D::zeros(tape.active, cfg.dim);
        let mut d_v1sub = Tensor2D::zeros(tape.active, cfg.dim);
        mha_backward(
            &d_attn1, &lt.q1, &k1sub, &v1sub, &lt.probs1, cfg.heads, &mut d_q1, &mut d_k1sub,
            &mut d_v1sub,
        );
        // Expand key/value grads back to full frame count.
        let mut d_k1 = Tensor2D::zeros(frames, cfg.dim);
        let mut d_v1 = Tensor2D::zeros(frames, cfg.dim);
        for r in 0..tape.active {
            d_k1.row_mut(r).copy_from_slice(d_k1sub.row(r));
            d_v1.row_mut(r).copy_from_slice(d_v1sub.row(r));
        }
        matmul_tn_acc(&lt.hmod1, &d_q1, &mut gl.w_q);
        colsum_acc(&d_q1, &mut gl.b_q);
        matmul_tn_acc(&lt.hmod1, &d_k1, &mut gl.w_k);
        colsum_acc(&d_k1, &mut gl.b_k);
        matmul_tn_acc(&lt.hmod1, &d_v1, &mut gl.w_v);
        colsum_acc(&d_v1, &mut gl.b_v);
        let mut d_hmod1 = matmul_nt(&d_q1, &lp.w_q)?;
        add_assign(&mut d_hmod1, &matmul_nt(&d_k1, &lp.w_k)?);
        add_assign(&mut d_hmod1, &matmul_nt(&d_v1, &lp.w_v)?);
        let d_ln1 = modulate_backward(&d_hmod1, &lt.ln1, &lt.mods, 0, &mut d_mods);
        add_assign(&mut d_h, &ln_backward(&d_ln1, &lt.ln1, &lt.inv1));

        // Modulation projection for this layer.
        matmul_tn_acc(&tape.cond_vec, &d_mods, &mut gl.w_mod);
        colsum_acc(&d_mods, &mut gl.b_mod);
        add_assign(&mut d_cond, &matmul_nt(&d_mods, &lp.w_mod)?);
    }

    // Input embedding.
    let d_h_active = d_h.slice_rows(0..tape.active);
    let x_active = tape.x.slice_rows(0..tape.active);
    matmul_tn_acc(&x_active, &d_h_active, &mut grads.w_in);
    colsum_acc(&d_h_active, &mut grads.b_in);
    if tape.active < frames {
        let d_h_pad = d_h.slice_rows(tape.active..frames);
        colsum_acc(&d_h_pad, &mut grads.pad_embed);
    }

    // Conditioning path.
    let d_z = silu_backward(&d_cond, &tape.z_cond);
    matmul_tn_acc(&tape.sin_t, &d_z, &mut grads.w_step);
    matmul_tn_acc(&tape.sin_dur, &d_z, &mut grads.w_dur);
    colsum_acc(&d_z, &mut grads.b_cond);

    // Text embedding scatter.
    for (row, &token) in tape.text.tokens.iter().enumerate() {
        for c in 0..cfg.text_dim {
            let acc = grads.text_embed.get(token, c) + d_text.get(row, c);
            grads.text_embed.set(token, c, acc);
        }
    }
    Ok(())
}

/// Convenience wrapper so tests can import a free function.
pub fn forward_one_train(
    model: &DitModel,
    latent: &Tensor2D,
    step: usize,
    cond: &TextCondition,
    duration_s: f64,
) -> Result<(Tensor2D, Tape)> {
    model.forward_one_train(latent, step, cond, duration_s)
}
