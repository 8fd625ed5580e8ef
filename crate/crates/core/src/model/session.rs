use super::ops::{affine, attend, axpy, gelu, layer_norm};
use super::{ModelError, Parameters};
use crate::corpus::TokenId;

/// Incremental decoder with a per-layer key/value cache.
///
/// Feeding tokens one at a time through [`Session::push`] yields exactly the
/// logits the full forward pass computes at the same positions.
#[derive(Clone)]
pub struct Session<'a> {
    params: &'a Parameters,
    /// Per layer, the `[t, 3d]` rows of query/key/value projections seen so far.
    qkv: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a Parameters) -> Self {
        let n = params.config().n_layers;
        Session { params, qkv: vec![Vec::new(); n], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn params(&self) -> &'a Parameters {
        self.params
    }

    /// Appends `token` and returns the logits for the following position.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<f64>, ModelError> {
        let cfg = self.params.config();
        let (d, f, v, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        if self.len + 1 > cfg.max_seq_len {
            return Err(ModelError::TooLong { len: self.len + 1, max: cfg.max_seq_len });
        }
        if token as usize >= v {
            return Err(ModelError::OutOfVocab { token, vocab: v });
        }
        let p = self.params.as_slice();
        let o = &self.params.offsets;
        let t = self.len;

        let mut x = p[o.wte.start + token as usize * d..][..d].to_vec();
        axpy(1.0, &p[o.wpe.start + t * d..][..d], &mut x);
        let mut xhat = vec![0.0; d];
        let mut ln = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut fc = vec![0.0; f];
        let mut probs = vec![0.0; nh * (t + 1)];
        for (lo, cache) in o.layers.iter().zip(self.qkv.iter_mut()) {
            layer_norm(&x, &p[lo.ln1_g.clone()], &p[lo.ln1_b.clone()], &mut xhat, &mut ln);
            let start = cache.len();
            cache.resize(start + 3 * d, 0.0);
            affine(&ln, &p[lo.w_qkv.clone()], Some(&p[lo.b_qkv.clone()]), &mut cache[start..]);
            let q = cache[start..start + d].to_vec();
            attend(&q, &cache[d..], &cache[2 * d..], 3 * d, t + 1, nh, &mut probs, &mut att);
            affine(&att, &p[lo.w_o.clone()], Some(&p[lo.b_o.clone()]), &mut tmp);
            axpy(1.0, &tmp, &mut x);
            layer_norm(&x, &p[lo.ln2_g.clone()], &p[lo.ln2_b.clone()], &mut xhat, &mut ln);
            affine(&ln, &p[lo.w_fc.clone()], Some(&p[lo.b_fc.clone()]), &mut fc);
            for z in fc.iter_mut() {
                *z = gelu(*z);
            }
            affine(&fc, &p[lo.w_proj.clone()], Some(&p[lo.b_proj.clone()]), &mut tmp);
            axpy(1.0, &tmp, &mut x);
        }
        layer_norm(&x, &p[o.lnf_g.clone()], &p[o.lnf_b.clone()], &mut xhat, &mut ln);
        let mut logits = vec![0.0; v];
        affine(&ln, &p[o.w_out.clone()], None, &mut logits);
        self.len += 1;
        Ok(logits)
    }
}
