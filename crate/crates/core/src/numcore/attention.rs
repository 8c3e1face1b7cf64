use std::ops::Range;

use crate::error::{Error, Result};
use crate::numcore::layers::{softmax_backward, softmax_unchecked, Linear};
use crate::numcore::{ParamStore, Tensor};
use crate::rng::SplitMix64;

/// Multi-head scaled dot-product attention with output projection and an
/// optional residual connection from the queries.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q_in: Tensor,
    kv_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head attention weights, each `[L_q × L_k]` row-major.
    probs: Vec<Vec<f64>>,
    concat: Tensor,
    segments: Vec<Range<usize>>,
}

impl AttentionCache {
    /// Attention weights of head `h`, concatenated over queries; `[L_q × L_k]`
    /// row-major for unsegmented attention.
    pub fn weights(&self, h: usize) -> &[f64] {
        &self.probs[h]
    }

    /// Key range seen by each query.
    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "width {dim} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            // A key bias shifts every logit of a query equally and cancels in softmax.
            wk: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
            residual: true,
        })
    }

    fn check(&self, queries: &Tensor, keys_values: &Tensor, allow_empty_keys: bool) -> Result<()> {
        let ok = |t: &Tensor, min_rows: usize| t.shape().len() == 2 && t.cols() == self.dim && t.rows() >= min_rows;
        if !ok(queries, 1) || !ok(keys_values, usize::from(!allow_empty_keys)) {
            return Err(Error::shape(
                "attention",
                format!(
                    "model width {}: queries {:?}, keys/values {:?}",
                    self.dim,
                    queries.shape(),
                    keys_values.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        keys_values: &Tensor,
    ) -> Result<(Tensor, AttentionCache)> {
        self.check(queries, keys_values, false)?;
        let segments = vec![0..keys_values.rows(); queries.rows()];
        self.forward_impl(store, queries, keys_values, segments, None)
    }

    /// Attention with a constant additive logit bias `[L_q × L_k]` shared by
    /// all heads.
    pub fn forward_biased(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        keys_values: &Tensor,
        bias: &Tensor,
    ) -> Result<(Tensor, AttentionCache)> {
        self.check(queries, keys_values, false)?;
        if bias.shape() != [queries.rows(), keys_values.rows()] {
            return Err(Error::shape(
                "attention",
                format!("bias {:?} for {} queries over {} keys", bias.shape(), queries.rows(), keys_values.rows()),
            ));
        }
        let segments = vec![0..keys_values.rows(); queries.rows()];
        self.forward_impl(store, queries, keys_values, segments, Some(bias))
    }

    /// Attention where query `i` only sees key rows `segments[i]`.
    ///
    /// A query with an empty segment produces a zero output row (no residual)
    /// and receives no gradient.
    pub fn forward_segmented(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        keys_values: &Tensor,
        segments: &[Range<usize>],
    ) -> Result<(Tensor, AttentionCache)> {
        self.check(queries, keys_values, true)?;
        if segments.len() != queries.rows() || segments.iter().any(|s| s.end > keys_values.rows() || s.start > s.end) {
            return Err(Error::shape(
                "attention",
                format!("{} segments for {} queries over {} keys", segments.len(), queries.rows(), keys_values.rows()),
            ));
        }
        self.forward_impl(store, queries, keys_values, segments.to_vec(), None)
    }

    fn forward_impl(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        keys_values: &Tensor,
        segments: Vec<Range<usize>>,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, AttentionCache)> {
        let q = self.wq.forward(store, queries)?;
        let k = self.wk.forward(store, keys_values)?;
        let v = self.wv.forward(store, keys_values)?;
        let lq = q.rows();
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Tensor::zeros(&[lq, self.dim]);
        let total: usize = segments.iter().map(|s| s.len()).sum();
        let mut probs = Vec::with_capacity(self.heads);
        let mut logits = Vec::new();
        for h in 0..self.heads {
            let off = h * dh;
            let mut ph = Vec::with_capacity(total);
            for (i, seg) in segments.iter().enumerate() {
                if seg.is_empty() {
                    continue;
                }
                let qi = &q.row(i)[off..off + dh];
                logits.clear();
                for j in seg.clone() {
                    let kj = &k.row(j)[off..off + dh];
                    let b = bias.map_or(0.0, |t| t.row(i)[j]);
                    logits.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + b);
                }
                let p = softmax_unchecked(&logits);
                let out = &mut concat.row_mut(i)[off..off + dh];
                for (j, &pj) in seg.clone().zip(&p) {
                    let vj = &v.row(j)[off..off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
                ph.extend_from_slice(&p);
            }
            probs.push(ph);
        }
        let mut out = self.wo.forward(store, &concat)?;
        if self.residual {
            out.add_assign(queries)?;
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                out.row_mut(i).fill(0.0);
            }
        }
        Ok((
            out,
            AttentionCache {
                q_in: queries.clone(),
                kv_in: keys_values.clone(),
                q,
                k,
                v,
                probs,
                concat,
                segments,
            },
        ))
    }

    /// Returns `(dL/dqueries, dL/dkeys_values)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AttentionCache,
        dout: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.backward_with_weight_grad(store, cache, dout, None)
    }

    /// [`Self::backward`] when the loss also depends on the attention weights
    /// directly; `dweights[h]` is laid out like [`AttentionCache::weights`].
    pub fn backward_with_weight_grad(
        &self,
        store: &mut ParamStore,
        cache: &AttentionCache,
        dout: &Tensor,
        dweights: Option<&[Vec<f64>]>,
    ) -> Result<(Tensor, Tensor)> {
        if let Some(dw) = dweights {
            if dw.len() != self.heads || dw.iter().zip(&cache.probs).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::shape("attention", "weight gradient layout differs from weights"));
            }
        }
        let (lq, lk) = (cache.q.rows(), cache.k.rows());
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dout = dout.clone();
        for (i, seg) in cache.segments.iter().enumerate() {
            if seg.is_empty() {
                dout.row_mut(i).fill(0.0);
            }
        }
        let dconcat = self.wo.backward(store, &cache.concat, &dout)?;
        let mut dq = Tensor::zeros(&[lq, self.dim]);
        let mut dk = Tensor::zeros(&[lk, self.dim]);
        let mut dv = Tensor::zeros(&[lk, self.dim]);
        let mut dp = Vec::new();
        for h in 0..self.heads {
            let off = h * dh;
            let ph = &cache.probs[h];
            let mut cursor = 0;
            for (i, seg) in cache.segments.iter().enumerate() {
                if seg.is_empty() {
                    continue;
                }
                let p = &ph[cursor..cursor + seg.len()];
                let extra = dweights.map(|dw| &dw[h][cursor..cursor + seg.len()]);
                cursor += seg.len();
                let dor = &dconcat.row(i)[off..off + dh];
                dp.clear();
                for (j, &pj) in seg.clone().zip(p) {
                    let vj = &cache.v.row(j)[off..off + dh];
                    dp.push(dor.iter().zip(vj).map(|(a, b)| a * b).sum());
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for (d, g) in dvj.iter_mut().zip(dor) {
                        *d += pj * g;
                    }
                }
                if let Some(extra) = extra {
                    dp.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
                let ds = softmax_backward(p, &dp);
                let qi: Vec<f64> = cache.q.row(i)[off..off + dh].to_vec();
                for (j, &dsj) in seg.clone().zip(&ds) {
                    let g = dsj * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let kj = &cache.k.row(j)[off..off + dh];
                    let dqi = &mut dq.row_mut(i)[off..off + dh];
                    for (d, kk) in dqi.iter_mut().zip(kj) {
                        *d += g * kk;
                    }
                    let dkj = &mut dk.row_mut(j)[off..off + dh];
                    for (d, qq) in dkj.iter_mut().zip(&qi) {
                        *d += g * qq;
                    }
                }
            }
        }
        let mut dq_in = self.wq.backward(store, &cache.q_in, &dq)?;
        if self.residual {
            dq_in.add_assign(&dout)?;
        }
        let mut dkv = self.wk.backward(store, &cache.kv_in, &dk)?;
        dkv.add_assign(&self.wv.backward(store, &cache.kv_in, &dv)?)?;
        Ok((dq_in, dkv))
    }
}
