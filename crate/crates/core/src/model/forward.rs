//! Full-sequence forward pass with an activation tape, and reverse-mode
//! gradients of the sequence log-likelihood.

use std::ops::Range;

use super::ops::{
    affine, affine_backward, attend, axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_in_place,
};
use super::{ModelError, Parameters};
use crate::corpus::TokenId;

struct LayerTape {
    x_in: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    ln1_out: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att_out: Vec<f64>,
    x_mid: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    ln2_out: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

/// Activations of one forward pass over `context ++ target[..n-1]`, with
/// output distributions at the positions that predict target tokens.
pub struct Tape {
    inputs: Vec<TokenId>,
    targets: Vec<TokenId>,
    out_start: usize,
    layers: Vec<LayerTape>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    lnf_out: Vec<f64>,
    probs: Vec<f64>,
    log_prob: f64,
}

#[inline]
fn row(buf: &[f64], t: usize, w: usize) -> &[f64] {
    &buf[t * w..(t + 1) * w]
}

#[inline]
fn row_mut(buf: &mut [f64], t: usize, w: usize) -> &mut [f64] {
    &mut buf[t * w..(t + 1) * w]
}

/// Start offset of position `t`'s attention weights (triangular storage).
#[inline]
fn tri(t: usize, n_heads: usize) -> usize {
    n_heads * t * (t + 1) / 2
}

fn two_mut(buf: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

/// Runs the model on `context ++ target` and records everything needed to
/// back-propagate through `ln p(target | context)`.
pub fn forward_tape(params: &Parameters, context: &[TokenId], target: &[TokenId]) -> Result<Tape, ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let full: Vec<TokenId> = context.iter().chain(target).copied().collect();
    params.check_tokens(&full)?;
    let cfg = params.config();
    let (d, f, v, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let p = params.as_slice();
    let o = &params.offsets;

    let n_in = full.len() - 1;
    let inputs = full[..n_in].to_vec();
    let out_start = context.len() - 1;

    let mut x = vec![0.0; n_in * d];
    for (t, &tok) in inputs.iter().enumerate() {
        let xr = row_mut(&mut x, t, d);
        xr.copy_from_slice(&p[o.wte.start + tok as usize * d..][..d]);
        axpy(1.0, &p[o.wpe.start + t * d..][..d], xr);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut tmp = vec![0.0; d];
    for lo in &o.layers {
        let mut lt = LayerTape {
            x_in: x.clone(),
            ln1_xhat: vec![0.0; n_in * d],
            ln1_rstd: vec![0.0; n_in],
            ln1_out: vec![0.0; n_in * d],
            qkv: vec![0.0; n_in * 3 * d],
            probs: vec![0.0; tri(n_in, nh)],
            att_out: vec![0.0; n_in * d],
            x_mid: vec![0.0; n_in * d],
            ln2_xhat: vec![0.0; n_in * d],
            ln2_rstd: vec![0.0; n_in],
            ln2_out: vec![0.0; n_in * d],
            fc_pre: vec![0.0; n_in * f],
            fc_act: vec![0.0; n_in * f],
        };
        for t in 0..n_in {
            lt.ln1_rstd[t] = layer_norm(
                row(&lt.x_in, t, d),
                &p[lo.ln1_g.clone()],
                &p[lo.ln1_b.clone()],
                row_mut(&mut lt.ln1_xhat, t, d),
                row_mut(&mut lt.ln1_out, t, d),
            );
            affine(
                row(&lt.ln1_out, t, d),
                &p[lo.w_qkv.clone()],
                Some(&p[lo.b_qkv.clone()]),
                row_mut(&mut lt.qkv, t, 3 * d),
            );
        }
        for t in 0..n_in {
            let q = &lt.qkv[t * 3 * d..t * 3 * d + d];
            let pr = &mut lt.probs[tri(t, nh)..tri(t + 1, nh)];
            attend(q, &lt.qkv[d..], &lt.qkv[2 * d..], 3 * d, t + 1, nh, pr, row_mut(&mut lt.att_out, t, d));
            affine(row(&lt.att_out, t, d), &p[lo.w_o.clone()], Some(&p[lo.b_o.clone()]), &mut tmp);
            let xm = row_mut(&mut lt.x_mid, t, d);
            xm.copy_from_slice(row(&lt.x_in, t, d));
            axpy(1.0, &tmp, xm);
            lt.ln2_rstd[t] = layer_norm(
                row(&lt.x_mid, t, d),
                &p[lo.ln2_g.clone()],
                &p[lo.ln2_b.clone()],
                row_mut(&mut lt.ln2_xhat, t, d),
                row_mut(&mut lt.ln2_out, t, d),
            );
            affine(
                row(&lt.ln2_out, t, d),
                &p[lo.w_fc.clone()],
                Some(&p[lo.b_fc.clone()]),
                row_mut(&mut lt.fc_pre, t, f),
            );
            for (a, &z) in row_mut(&mut lt.fc_act, t, f).iter_mut().zip(row(&lt.fc_pre, t, f)) {
                *a = gelu(z);
            }
            affine(row(&lt.fc_act, t, f), &p[lo.w_proj.clone()], Some(&p[lo.b_proj.clone()]), &mut tmp);
            let xr = row_mut(&mut x, t, d);
            xr.copy_from_slice(row(&lt.x_mid, t, d));
            axpy(1.0, &tmp, xr);
        }
        layers.push(lt);
    }

    let n_out = target.len();
    let mut lnf_xhat = vec![0.0; n_out * d];
    let mut lnf_rstd = vec![0.0; n_out];
    let mut lnf_out = vec![0.0; n_out * d];
    let mut probs = vec![0.0; n_out * v];
    let mut log_prob = 0.0;
    for k in 0..n_out {
        let t = out_start + k;
        lnf_rstd[k] = layer_norm(
            row(&x, t, d),
            &p[o.lnf_g.clone()],
            &p[o.lnf_b.clone()],
            row_mut(&mut lnf_xhat, k, d),
            row_mut(&mut lnf_out, k, d),
        );
        let pr = row_mut(&mut probs, k, v);
        affine(row(&lnf_out, k, d), &p[o.w_out.clone()], None, pr);
        let y = target[k] as usize;
        let logit_y = pr[y];
        let (lse, max) = softmax_in_place(pr);
        log_prob += logit_y - max - lse;
    }

    Ok(Tape { inputs, targets: target.to_vec(), out_start, layers, lnf_xhat, lnf_rstd, lnf_out, probs, log_prob })
}

impl Tape {
    /// `ln p(target | context)`.
    pub fn log_prob(&self) -> f64 {
        self.log_prob
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    /// Next-token distribution at output slot `k`, i.e. the distribution of
    /// `target[k]` given `context ++ target[..k]`.
    pub fn distribution_at(&self, k: usize) -> Vec<f64> {
        let v = self.probs.len() / self.targets.len().max(1);
        row(&self.probs, k, v).to_vec()
    }

    /// Accumulates `coef * d ln p(target | context) / d params` into `grad`.
    pub fn backward(&self, params: &Parameters, coef: f64, grad: &mut [f64]) {
        let n_out = self.targets.len();
        if n_out == 0 || coef == 0.0 {
            return;
        }
        let cfg = params.config();
        let (d, f, v, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = params.as_slice();
        let o = &params.offsets;
        let n_in = self.inputs.len();

        let mut dx = vec![0.0; n_in * d];
        let mut dlogits = vec![0.0; v];
        let mut dlnf = vec![0.0; d];
        for k in 0..n_out {
            for (g, &q) in dlogits.iter_mut().zip(row(&self.probs, k, v)) {
                *g = -coef * q;
            }
            dlogits[self.targets[k] as usize] += coef;
            dlnf.fill(0.0);
            affine_backward(
                row(&self.lnf_out, k, d),
                &p[o.w_out.clone()],
                &dlogits,
                &mut grad[o.w_out.clone()],
                None,
                Some(&mut dlnf),
            );
            let (dg, db) = two_mut(grad, o.lnf_g.clone(), o.lnf_b.clone());
            let t = self.out_start + k;
            layer_norm_backward(
                row(&self.lnf_xhat, k, d),
                self.lnf_rstd[k],
                &p[o.lnf_g.clone()],
                &dlnf,
                dg,
                db,
                row_mut(&mut dx, t, d),
            );
        }

        let mut dfc = vec![0.0; f];
        let mut dln = vec![0.0; d];
        let mut datt = vec![0.0; n_in * d];
        let mut dqkv = vec![0.0; n_in * 3 * d];
        let mut dp = vec![0.0; n_in];
        for (lo, lt) in o.layers.iter().zip(&self.layers).rev() {
            // Feed-forward sublayer; dx currently holds d loss / d x_out.
            let mut dx_mid = dx.clone();
            for t in 0..n_in {
                let dxt = row(&dx, t, d);
                dfc.fill(0.0);
                {
                    let (dw, db) = two_mut(grad, lo.w_proj.clone(), lo.b_proj.clone());
                    affine_backward(row(&lt.fc_act, t, f), &p[lo.w_proj.clone()], dxt, dw, Some(db), Some(&mut dfc));
                }
                for (g, &z) in dfc.iter_mut().zip(row(&lt.fc_pre, t, f)) {
                    *g *= gelu_grad(z);
                }
                dln.fill(0.0);
                {
                    let (dw, db) = two_mut(grad, lo.w_fc.clone(), lo.b_fc.clone());
                    affine_backward(row(&lt.ln2_out, t, d), &p[lo.w_fc.clone()], &dfc, dw, Some(db), Some(&mut dln));
                }
                let (dg, db) = two_mut(grad, lo.ln2_g.clone(), lo.ln2_b.clone());
                layer_norm_backward(
                    row(&lt.ln2_xhat, t, d),
                    lt.ln2_rstd[t],
                    &p[lo.ln2_g.clone()],
                    &dln,
                    dg,
                    db,
                    row_mut(&mut dx_mid, t, d),
                );
            }

            // Attention sublayer.
            let mut dx_in = dx_mid.clone();
            datt.fill(0.0);
            for t in 0..n_in {
                let (dw, db) = two_mut(grad, lo.w_o.clone(), lo.b_o.clone());
                affine_backward(
                    row(&lt.att_out, t, d),
                    &p[lo.w_o.clone()],
                    row(&dx_mid, t, d),
                    dw,
                    Some(db),
                    Some(row_mut(&mut datt, t, d)),
                );
            }
            dqkv.fill(0.0);
            for t in 0..n_in {
                let probs_t = &lt.probs[tri(t, nh)..tri(t + 1, nh)];
                for h in 0..nh {
                    let pr = &probs_t[h * (t + 1)..(h + 1) * (t + 1)];
                    let dout = &datt[t * d + h * hd..t * d + (h + 1) * hd];
                    let mut s = 0.0;
                    for j in 0..=t {
                        let vj = &lt.qkv[j * 3 * d + 2 * d + h * hd..][..hd];
                        dp[j] = dot(dout, vj);
                        s += pr[j] * dp[j];
                    }
                    let q_off = t * 3 * d + h * hd;
                    for j in 0..=t {
                        let ds = pr[j] * (dp[j] - s) * scale;
                        let k_off = j * 3 * d + d + h * hd;
                        let v_off = j * 3 * d + 2 * d + h * hd;
                        for c in 0..hd {
                            dqkv[q_off + c] += ds * lt.qkv[k_off + c];
                            dqkv[k_off + c] += ds * lt.qkv[q_off + c];
                            dqkv[v_off + c] += pr[j] * dout[c];
                        }
                    }
                }
            }
            for t in 0..n_in {
                dln.fill(0.0);
                {
                    let (dw, db) = two_mut(grad, lo.w_qkv.clone(), lo.b_qkv.clone());
                    affine_backward(
                        row(&lt.ln1_out, t, d),
                        &p[lo.w_qkv.clone()],
                        row(&dqkv, t, 3 * d),
                        dw,
                        Some(db),
                        Some(&mut dln),
                    );
                }
                let (dg, db) = two_mut(grad, lo.ln1_g.clone(), lo.ln1_b.clone());
                layer_norm_backward(
                    row(&lt.ln1_xhat, t, d),
                    lt.ln1_rstd[t],
                    &p[lo.ln1_g.clone()],
                    &dln,
                    dg,
                    db,
                    row_mut(&mut dx_in, t, d),
                );
            }
            dx = dx_in;
        }

        for (t, &tok) in self.inputs.iter().enumerate() {
            let dxt = row(&dx, t, d);
            axpy(1.0, dxt, &mut grad[o.wte.start + tok as usize * d..][..d]);
            axpy(1.0, dxt, &mut grad[o.wpe.start + t * d..][..d]);
        }
    }
}

/// `ln p(target | context)`; adds `coef` times its gradient into `grad`.
pub fn sequence_log_prob_and_grad(
    params: &Parameters,
    context: &[TokenId],
    target: &[TokenId],
    coef: f64,
    grad: &mut [f64],
) -> Result<f64, ModelError> {
    if target.is_empty() {
        return Ok(0.0);
    }
    let tape = forward_tape(params, context, target)?;
    tape.backward(params, coef, grad);
    Ok(tape.log_prob())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 9, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq_len: 10, seed: 11 }
    }

    #[test]
    fn gradient_matches_central_differences_everywhere() {
        // Larger-than-default weights so every tensor carries signal.
        let mut params = init_params(&cfg()).unwrap();
        for (i, v) in params.as_mut_slice().iter_mut().enumerate() {
            *v = *v * 10.0 + 0.05 * ((i * 7919 % 13) as f64 / 13.0 - 0.5);
        }
        let ctx = [1u32, 5, 3];
        let tgt = [4u32, 7, 2];
        let mut grad = params.zeros_like();
        sequence_log_prob_and_grad(&params, &ctx, &tgt, 1.0, &mut grad).unwrap();
        let h = 1e-5;
        for spec in params.specs().to_vec() {
            for i in spec.range().step_by(5) {
                let mut pp = params.clone();
                pp.as_mut_slice()[i] += h;
                let up = forward_tape(&pp, &ctx, &tgt).unwrap().log_prob();
                pp.as_mut_slice()[i] -= 2.0 * h;
                let down = forward_tape(&pp, &ctx, &tgt).unwrap().log_prob();
                let fd = (up - down) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(
                    err < 1e-4 || (fd - grad[i]).abs() < 1e-9,
                    "{} [{}]: fd {fd} analytic {}",
                    spec.name,
                    i,
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn coefficient_scales_gradient() {
        let params = init_params(&cfg()).unwrap();
        let mut g1 = params.zeros_like();
        let mut g2 = params.zeros_like();
        sequence_log_prob_and_grad(&params, &[1, 2], &[3, 4], 1.0, &mut g1).unwrap();
        sequence_log_prob_and_grad(&params, &[1, 2], &[3, 4], -2.5, &mut g2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a * -2.5 - b).abs() < 1e-14);
        }
    }
}
