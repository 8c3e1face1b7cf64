use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tensor};
use crate::rng::SplitMix64;

const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: [d_in × d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.register_uniform(&format!("{name}.w"), &[d_in, d_out], bound, rng)?;
        let b = store.register_uniform(&format!("{name}.b"), &[d_out], bound, rng)?;
        Ok(Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        })
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.register_uniform(&format!("{name}.w"), &[d_in, d_out], bound, rng)?;
        Ok(Self {
            w,
            b: None,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.d_in {
            return Err(Error::shape(
                "Linear::forward",
                format!("expected width {}, got {:?}", self.d_in, x.shape()),
            ));
        }
        let mut y = x.matmul(store.value(self.w))?;
        if let Some(b) = self.b {
            let b = store.value(b).data();
            for i in 0..y.rows() {
                for (v, bb) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let dx = dy.matmul_t(store.value(self.w))?;
        self.backward_params(store, x, dy)?;
        Ok(dx)
    }

    pub fn backward_params(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<()> {
        let dw = x.t_matmul(dy)?;
        store.accumulate(self.w, dw.data());
        if let Some(b) = self.b {
            store.accumulate(b, &dy.sum_rows());
        }
        Ok(())
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?;
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        x.ensure_cols(self.dim, "LayerNorm::forward")?;
        let n = self.dim as f64;
        let gamma = store.value(self.gamma).data();
        let beta = store.value(self.beta).data();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(i);
            for v in xr.iter_mut() {
                *v = (*v - mean) * is;
            }
            let yr = y.row_mut(i);
            for (j, v) in yr.iter_mut().enumerate() {
                *v = gamma[j] * xhat.row(i)[j] + beta[j];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor,
    ) -> Result<Tensor> {
        let n = self.dim as f64;
        let gamma = store.value(self.gamma).data().to_vec();
        let mut dx = dy.clone();
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        for i in 0..dy.rows() {
            let g = dy.row(i);
            let xh = cache.xhat.row(i);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in 0..self.dim {
                dgamma[j] += g[j] * xh[j];
                dbeta[j] += g[j];
                let d = g[j] * gamma[j];
                sum_d += d;
                sum_dx += d * xh[j];
            }
            let is = cache.inv_std[i];
            let out = dx.row_mut(i);
            for j in 0..self.dim {
                let d = g[j] * gamma[j];
                out[j] = is / n * (n * d - sum_d - xh[j] * sum_dx);
            }
        }
        store.accumulate(self.gamma, &dgamma);
        store.accumulate(self.beta, &dbeta);
        Ok(dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Two-layer perceptron `Linear → GELU → Linear`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let pre = self.l1.forward(store, x)?;
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.l2.forward(store, &act)?;
        Ok((
            y,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &FfnCache, dy: &Tensor) -> Result<Tensor> {
        let mut dact = self.l2.backward(store, &cache.act, dy)?;
        for (d, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(p);
        }
        self.l1.backward(store, &cache.x, &dact)
    }
}

/// Numerically stable softmax over a finite, non-empty slice.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax over zero logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    Ok(softmax_unchecked(logits))
}

/// Softmax that tolerates `-inf` entries (masked logits get probability 0).
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Gradient of a row-softmax: `dz = p ⊙ (dp − ⟨dp, p⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let a = softmax(&[0.3, -1.2, 2.0]).unwrap();
        let b = softmax(&[100.3, 98.8, 102.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(softmax(&[f64::NAN]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let ffn = Ffn::new(&mut store, "f", 4, 8, 1, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let (y, _) = ffn.forward(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // Identity first layer, zero second-layer weights, bias b -> constant b.
        let mut eye = Tensor::zeros(&[4, 8]);
        for i in 0..4 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        *store.value_mut(ffn.l1.w) = eye;
        store.value_mut(ffn.l2.b.unwrap()).fill(0.7);
        let (y, _) = ffn.forward(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let l = Linear::new(&mut store, "l", 3, 2, &mut rng).unwrap();
        assert!(l.forward(&store, &Tensor::zeros(&[2, 4])).is_err());
    }
}
