//! Feed-forward network shared by the experts and the router.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PiernError, Result};
use crate::numerics::ops::{gelu, gelu_grad, linear, linear_backward, silu, silu_grad};
use crate::numerics::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    /// `x^2`; spans every quadratic form of the inputs with one hidden layer.
    Square,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
            Activation::Gelu => gelu(x),
            Activation::Square => x * x,
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Gelu => gelu_grad(x),
            Activation::Square => 2.0 * x,
        }
    }
}

/// Dense network `dims[0] -> dims[1] -> ... -> dims[last]` with the
/// activation applied after every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub activation: Activation,
    /// Interleaved `[w0, b0, w1, b1, ...]`; `w_l` is `dims[l] x dims[l+1]`.
    pub params: Vec<Parameter>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    rows: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let std = (1.0 / w[0] as f64).sqrt();
            params.push(Parameter::randn(&[w[0], w[1]], std, rng));
            params.push(Parameter::zeros(&[w[1]]));
        }
        Self {
            dims: dims.to_vec(),
            activation,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Multiply-accumulates per input row.
    pub fn macs_per_row(&self) -> u64 {
        self.dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }

    /// Batched forward over `rows` inputs laid out row-major.
    pub fn forward(&self, x: &[f64], rows: usize) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != rows * self.input_dim() {
            return Err(PiernError::Shape(format!(
                "mlp input {} values for {rows} rows of {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut cache = MlpCache {
            rows,
            inputs: Vec::with_capacity(self.n_layers()),
            pre: Vec::with_capacity(self.n_layers()),
        };
        let mut h = x.to_vec();
        for l in 0..self.n_layers() {
            let (fi, fo) = (self.dims[l], self.dims[l + 1]);
            let z = linear(&h, self.params[2 * l].w(), Some(self.params[2 * l + 1].w()), rows, fi, fo);
            cache.inputs.push(std::mem::take(&mut h));
            if l + 1 < self.n_layers() {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, cache))
    }

    pub fn predict(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        Ok(self.forward(x, rows)?.0)
    }

    /// Accumulates parameter gradients for `dy` and returns the input gradient.
    pub fn backward(&mut self, cache: &MlpCache, dy: &[f64], need_dx: bool) -> Option<Vec<f64>> {
        let rows = cache.rows;
        let mut g = dy.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (fi, fo) = (self.dims[l], self.dims[l + 1]);
            let mut dw = std::mem::take(&mut self.params[2 * l].grad);
            let mut db = std::mem::take(&mut self.params[2 * l + 1].grad);
            let dx = linear_backward(
                &cache.inputs[l],
                self.params[2 * l].w(),
                &g,
                dw.data_mut(),
                Some(db.data_mut()),
                rows,
                fi,
                fo,
                l > 0 || need_dx,
            );
            self.params[2 * l].grad = dw;
            self.params[2 * l + 1].grad = db;
            match dx {
                Some(mut dx) if l > 0 => {
                    for (d, &z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                        *d *= self.activation.grad(z);
                    }
                    g = dx;
                }
                other => return other,
            }
        }
        None
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for act in [Activation::Silu, Activation::Gelu, Activation::Square] {
            let mlp = Mlp::new(&[3, 5, 4, 2], act, &mut rng);
            let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
            let target: Vec<f64> = (0..8).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut params = mlp.params.clone();
            let report = grad_check(
                |ps| {
                    let mut m = mlp.clone();
                    m.params = ps.to_vec();
                    m.zero_grad();
                    let (y, cache) = m.forward(&x, 4)?;
                    let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
                    let loss = 0.5 * dy.iter().map(|d| d * d).sum::<f64>();
                    m.backward(&cache, &dy, false);
                    for (p, q) in ps.iter_mut().zip(&m.params) {
                        p.grad = q.grad.clone();
                    }
                    Ok(loss)
                },
                &mut params,
                DEFAULT_TOLERANCE,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}
