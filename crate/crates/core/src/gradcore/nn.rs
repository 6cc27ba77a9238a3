//! Dense layers and initializers shared by NeuMF and the expert networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{axpy, dot, Grads, ParamStore, TensorId, Values};
use crate::error::Result;

/// Gaussian initialization, mean 0.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// `y = W x + b` with `W` stored row-major as `[out, in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: TensorId,
    pub bias: TensorId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            xavier_uniform(rng, in_dim, out_dim, in_dim * out_dim),
        )?;
        let bias = params.add(format!("{name}.bias"), &[out_dim], vec![0.0; out_dim])?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn tensors(&self) -> [TensorId; 2] {
        [self.weight, self.bias]
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, v: &Values<'_>, x: &[f64], out: &mut [f64]) {
        let b = v.get(self.bias);
        for (o, y) in out.iter_mut().enumerate() {
            *y = dot(v.row(self.weight, o), x) + b[o];
        }
    }

    /// Accumulate parameter gradients for upstream `dout`; if `dx` is given,
    /// add `Wᵀ dout` into it.
    pub fn backward(&self, v: &Values<'_>, g: &mut Grads<'_>, x: &[f64], dout: &[f64], dx: Option<&mut [f64]>) {
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, x, g.row_mut(self.weight, o));
            g.get_mut(self.bias)[o] += d;
        }
        if let Some(dx) = dx {
            for (o, &d) in dout.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, v.row(self.weight, o), dx);
                }
            }
        }
    }
}

pub fn relu_in_place(xs: &mut [f64]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}
