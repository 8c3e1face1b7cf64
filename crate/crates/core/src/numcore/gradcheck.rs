//! Central-difference verification of hand-written gradients.

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tensor};
use crate::rng::SplitMix64;

/// A scalar-valued computation whose coordinates can be perturbed.
pub trait Differentiable {
    fn num_coords(&self) -> usize;
    fn coord(&self, i: usize) -> f64;
    fn set_coord(&mut self, i: usize, value: f64);
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient over all coordinates.
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn finite_diff_check(block: &mut dyn Differentiable, h: f64) -> Result<GradCheckReport> {
    let all: Vec<usize> = (0..block.num_coords()).collect();
    finite_diff_check_coords(block, h, &all)
}

/// Checks a subset of coordinates against central differences.
pub fn finite_diff_check_coords(
    block: &mut dyn Differentiable,
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let analytic = block.gradient()?;
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        let x0 = block.coord(i);
        block.set_coord(i, x0 + h);
        let up = block.loss()?;
        block.set_coord(i, x0 - h);
        let down = block.loss()?;
        block.set_coord(i, x0);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_coord = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

type ForwardFn = Box<dyn Fn(&ParamStore, &[Tensor]) -> Result<Tensor> + Send + Sync>;
type BackwardFn =
    Box<dyn Fn(&mut ParamStore, &[Tensor], &Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

/// Adapts a forward/backward pair over a [`ParamStore`] plus input tensors to
/// [`Differentiable`].
///
/// The scalar loss is `Σ rᵢ·yᵢ` with fixed pseudo-random `r ∈ [-1, 1]`, which
/// avoids the structural zeros a plain sum has after normalization layers.
/// Coordinates enumerate the inputs first, then the listed parameters.
pub struct BlockProbe {
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub params: Vec<ParamId>,
    /// Which inputs participate in the check (others are held constant).
    pub differentiable_inputs: Vec<bool>,
    /// Multiplies the analytic gradient; `1.0` unless injecting a fault.
    pub gradient_scale: f64,
    forward: ForwardFn,
    backward: BackwardFn,
    seed: u64,
    weights: Option<Vec<f64>>,
}

impl BlockProbe {
    pub fn new(
        store: ParamStore,
        inputs: Vec<Tensor>,
        params: Vec<ParamId>,
        seed: u64,
        forward: ForwardFn,
        backward: BackwardFn,
    ) -> Self {
        let n = inputs.len();
        Self {
            store,
            inputs,
            params,
            differentiable_inputs: vec![true; n],
            gradient_scale: 1.0,
            forward,
            backward,
            seed,
            weights: None,
        }
    }

    fn weights_for(&mut self, n: usize) -> &[f64] {
        if self.weights.as_ref().map(Vec::len) != Some(n) {
            let mut rng = SplitMix64::derive(self.seed, 0x5eed);
            let w = if n == 1 {
                vec![1.0]
            } else {
                (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
            };
            self.weights = Some(w);
        }
        self.weights.as_deref().expect("just set")
    }

    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        let inputs = self
            .inputs
            .iter()
            .zip(&self.differentiable_inputs)
            .map(|(t, &d)| if d { t.len() } else { 0 });
        let params = self.params.iter().map(|&id| self.store.value(id).len());
        inputs.chain(params)
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (slot, len) in self.slots().enumerate() {
            if i < len {
                return (slot, i);
            }
            i -= len;
        }
        panic!("coordinate out of range");
    }

    fn value_at(&self, slot: usize, off: usize) -> f64 {
        if slot < self.inputs.len() {
            self.inputs[slot].data()[off]
        } else {
            self.store.value(self.params[slot - self.inputs.len()]).data()[off]
        }
    }
}

impl Differentiable for BlockProbe {
    fn num_coords(&self) -> usize {
        self.slots().sum()
    }

    fn coord(&self, i: usize) -> f64 {
        let (slot, off) = self.locate(i);
        self.value_at(slot, off)
    }

    fn set_coord(&mut self, i: usize, value: f64) {
        let (slot, off) = self.locate(i);
        if slot < self.inputs.len() {
            self.inputs[slot].data_mut()[off] = value;
        } else {
            let id = self.params[slot - self.inputs.len()];
            self.store.value_mut(id).data_mut()[off] = value;
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let y = (self.forward)(&self.store, &self.inputs)?;
        y.ensure_finite("probe forward")?;
        let w = self.weights_for(y.len()).to_vec();
        Ok(y.data().iter().zip(&w).map(|(a, b)| a * b).sum())
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        let y = (self.forward)(&self.store, &self.inputs)?;
        let w = self.weights_for(y.len()).to_vec();
        let dout = Tensor::from_vec(y.shape(), w)?;
        self.store.zero_grads();
        let dinputs = (self.backward)(&mut self.store, &self.inputs, &dout)?;
        let mut out = Vec::with_capacity(self.num_coords());
        for (k, t) in self.inputs.iter().enumerate() {
            if !self.differentiable_inputs[k] {
                continue;
            }
            match dinputs.get(k) {
                Some(d) if d.len() == t.len() => out.extend_from_slice(d.data()),
                _ => {
                    return Err(Error::shape(
                        "BlockProbe::gradient",
                        format!("missing gradient for input {k}"),
                    ))
                }
            }
        }
        for &id in &self.params {
            let g = self
                .store
                .grad(id)
                .ok_or_else(|| Error::MissingGradient(self.store.name(id).to_string()))?;
            out.extend_from_slice(g.data());
        }
        out.iter_mut().for_each(|g| *g *= self.gradient_scale);
        Ok(out)
    }
}
