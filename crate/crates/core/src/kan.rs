//! KAN linear layer: a learnable spline plus a weighted SiLU on every edge.
//!
//! Edge `(j, i)` (input `i` to output `j`) computes
//!
//! ```text
//! phi_ji(x) = base[j, i] * silu(x) + sum_m spline[j, i, m] * B_m(clamp(x))
//! ```
//!
//! and output `j` is the plain sum of its incoming edges. The spline scale
//! and the basis coefficients are folded into one coefficient array per
//! edge, so an edge carries `1 + G + k` parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{entropy_value, Tape, Tensor, Var};
use crate::bspline::{basis_row, make_knots, KnotVector, SplineConfig};
use crate::error::{Error, Result};

/// Per-edge mean absolute activation over the last recorded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    /// `[n_out, n_in]`, entry `(j, i)` is `|phi_ji|_1`.
    pub edge_norms: Tensor,
    /// Number of samples the means were taken over.
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
pub struct KanLayer {
    n_in: usize,
    n_out: usize,
    spline: SplineConfig,
    knots: KnotVector,
    /// `[n_out, n_in]`
    pub base_weight: Tensor,
    /// `[n_out, n_in, G + k]`
    pub spline_weight: Tensor,
    stats: Option<ActivationStats>,
}

/// Tape handles for a layer's two weight tensors.
#[derive(Clone, Copy, Debug)]
pub struct KanVars {
    pub base: Var,
    pub spline: Var,
}

/// Result of [`KanLayer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct KanOutput {
    pub out: Var,
    /// `[n_out, n_in]` edge norms, present when statistics were requested.
    pub edge_norms: Option<Var>,
    pub n_samples: usize,
}

impl KanLayer {
    /// Randomly initialised layer: base weights uniform in `±1/sqrt(n_in)`,
    /// spline coefficients normal with std `0.1/sqrt(n_in)`.
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, spline: SplineConfig, rng: &mut R) -> Result<Self> {
        let mut layer = Self::zeros(n_in, n_out, spline)?;
        let bound = 1.0 / (n_in as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound);
        layer.base_weight.data_mut().iter_mut().for_each(|w| *w = uni.sample(rng));
        let normal = Normal::new(0.0, 0.1 * bound).expect("positive std");
        layer.spline_weight.data_mut().iter_mut().for_each(|w| *w = normal.sample(rng));
        Ok(layer)
    }

    pub fn zeros(n_in: usize, n_out: usize, spline: SplineConfig) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::config("KAN layer extents must be positive"));
        }
        let knots = make_knots(&spline)?;
        Ok(Self {
            n_in,
            n_out,
            spline,
            base_weight: Tensor::zeros([n_out, n_in]),
            spline_weight: Tensor::zeros([n_out, n_in, spline.num_basis()]),
            knots,
            stats: None,
        })
    }

    pub fn from_weights(spline: SplineConfig, base_weight: Tensor, spline_weight: Tensor) -> Result<Self> {
        let bs = base_weight.shape();
        if bs.len() != 2 {
            return Err(Error::shape("KanLayer base_weight", "[n_out, n_in]", bs));
        }
        let want = [bs[0], bs[1], spline.num_basis()];
        if spline_weight.shape() != want {
            return Err(Error::shape("KanLayer spline_weight", want, spline_weight.shape()));
        }
        let mut layer = Self::zeros(bs[1], bs[0], spline)?;
        layer.base_weight = base_weight;
        layer.spline_weight = spline_weight;
        Ok(layer)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn spline_config(&self) -> &SplineConfig {
        &self.spline
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn num_params(&self) -> usize {
        self.n_in * self.n_out * (1 + self.spline.num_basis())
    }

    pub fn stats(&self) -> Option<&ActivationStats> {
        self.stats.as_ref()
    }

    pub fn set_stats(&mut self, stats: Option<ActivationStats>) {
        self.stats = stats;
    }

    /// Scalar evaluation of edge `(j, i)`, input `i` to output `j`.
    pub fn edge_activation(&self, x: f64, j: usize, i: usize) -> f64 {
        let nb = self.spline.num_basis();
        let base = self.base_weight.get(&[j, i]) * silu(x);
        let coef = &self.spline_weight.data()[(j * self.n_in + i) * nb..(j * self.n_in + i + 1) * nb];
        let spline: f64 = basis_row(x, &self.knots).iter().zip(coef).map(|(b, c)| b * c).sum();
        base + spline
    }

    pub fn bind(&self, tape: &mut Tape) -> KanVars {
        KanVars {
            base: tape.param(self.base_weight.clone()),
            spline: tape.param(self.spline_weight.clone()),
        }
    }

    /// `x: [N, n_in] -> [N, n_out]`, optionally recording edge norms.
    pub fn forward(&self, tape: &mut Tape, vars: KanVars, x: Var, collect_stats: bool) -> Result<KanOutput> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.n_in {
            return Err(Error::shape("kan_forward", [0, self.n_in], s));
        }
        let n = s[0];
        let nb = self.spline.num_basis();
        let act = tape.silu(x);
        let base_out = tape.matmul_nt(act, vars.base)?;
        let basis = tape.spline_basis(x, &self.knots)?;
        let flat = tape.reshape(vars.spline, &[self.n_out, self.n_in * nb])?;
        let spline_out = tape.matmul_nt(basis, flat)?;
        let out = tape.add(base_out, spline_out)?;
        let edge_norms = if collect_stats {
            Some(tape.edge_l1(act, basis, vars.base, vars.spline)?)
        } else {
            None
        };
        Ok(KanOutput {
            out,
            edge_norms,
            n_samples: n,
        })
    }

    /// Tape-free forward returning the output and the batch statistics.
    pub fn forward_values(&self, x: &Tensor) -> Result<(Tensor, ActivationStats)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let o = self.forward(&mut tape, vars, xv, true)?;
        let norms = o.edge_norms.expect("requested");
        Ok((
            tape.value(o.out).clone(),
            ActivationStats {
                edge_norms: tape.value(norms).clone(),
                n_samples: o.n_samples,
            },
        ))
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `|Phi|_1`: sum of the per-edge mean absolute activations.
pub fn layer_l1(stats: Option<&ActivationStats>) -> Result<f64> {
    let stats = stats.ok_or_else(|| Error::MissingStats("layer_l1".into()))?;
    Ok(stats.edge_norms.data().iter().sum())
}

/// Entropy of the edge-norm distribution (natural log); 0 when all norms
/// vanish.
pub fn layer_entropy(stats: Option<&ActivationStats>) -> Result<f64> {
    let stats = stats.ok_or_else(|| Error::MissingStats("layer_entropy".into()))?;
    Ok(entropy_value(stats.edge_norms.data()))
}
