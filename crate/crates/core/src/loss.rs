//! Training objective: mean absolute reconstruction error plus the spline
//! sparsity regulariser
//!
//! ```text
//! lambda * (mu1 * sum_l |Phi_l|_1 + mu2 * sum_l S(Phi_l))
//! ```
//!
//! summed over every KAN layer of the network (fusion and attention layers;
//! convolutions are not KAN layers and carry no penalty).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kan::{layer_entropy, layer_l1, ActivationStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu1: 1.0,
            mu2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu1", self.mu1), ("mu2", self.mu2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar handles of the loss decomposition.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    /// `lambda * mu1 * sum |Phi|_1`
    pub sparse_l1: Option<Var>,
    /// `lambda * mu2 * sum S(Phi)`
    pub sparse_entropy: Option<Var>,
}

/// Mean absolute error between prediction and target.
pub fn l1_recon(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

fn sum_scalars(tape: &mut Tape, vals: &[Var]) -> Result<Var> {
    let mut it = vals.iter();
    let mut acc = *it.next().ok_or_else(|| Error::MissingStats("sparse_loss".into()))?;
    for &v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Weighted sparsity terms `(l1_term, entropy_term)` from per-layer edge
/// norms (each `[n_out, n_in]`).
pub fn sparse_loss(tape: &mut Tape, edge_norms: &[Var], cfg: &LossConfig) -> Result<(Var, Var)> {
    if edge_norms.is_empty() {
        return Err(Error::MissingStats("sparse_loss".into()));
    }
    let l1s: Vec<Var> = edge_norms.iter().map(|&n| tape.sum(n)).collect();
    let ents: Vec<Var> = edge_norms.iter().map(|&n| tape.entropy(n)).collect();
    let l1 = sum_scalars(tape, &l1s)?;
    let ent = sum_scalars(tape, &ents)?;
    Ok((
        tape.scale(l1, cfg.lambda * cfg.mu1),
        tape.scale(ent, cfg.lambda * cfg.mu2),
    ))
}

/// Reconstruction loss plus, when `edge_norms` is given, the sparsity terms.
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    edge_norms: Option<&[Var]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let l1 = l1_recon(tape, pred, target)?;
    match edge_norms {
        None => Ok(LossTerms {
            total: l1,
            l1,
            sparse_l1: None,
            sparse_entropy: None,
        }),
        Some(norms) => {
            let (sl1, sent) = sparse_loss(tape, norms, cfg)?;
            let reg = tape.add(sl1, sent)?;
            let total = tape.add(l1, reg)?;
            Ok(LossTerms {
                total,
                l1,
                sparse_l1: Some(sl1),
                sparse_entropy: Some(sent),
            })
        }
    }
}

/// Mean absolute error on plain tensors.
pub fn l1_recon_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_recon", pred.shape(), target.shape()));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Sparsity loss from stored per-layer statistics.
pub fn sparse_loss_value(stats: &[Option<&ActivationStats>], cfg: &LossConfig) -> Result<f64> {
    let mut l1 = 0.0;
    let mut ent = 0.0;
    for s in stats {
        l1 += layer_l1(*s)?;
        ent += layer_entropy(*s)?;
    }
    Ok(cfg.lambda * (cfg.mu1 * l1 + cfg.mu2 * ent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(norms: Vec<f64>, shape: [usize; 2]) -> ActivationStats {
        ActivationStats {
            edge_norms: Tensor::new(shape, norms).unwrap(),
            n_samples: 4,
        }
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::from_fn([2, 3], |i| i as f64 * 0.1);
        assert_eq!(l1_recon_value(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((l1_recon_value(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(l1_recon_value(&a, &b).unwrap(), l1_recon_value(&b, &a).unwrap());
        assert!(l1_recon_value(&a, &Tensor::zeros([3, 2])).is_err());
    }

    #[test]
    fn sparse_examples() {
        let s = st(vec![1.0, 3.0], [1, 2]);
        let v = sparse_loss_value(&[Some(&s)], &LossConfig::default()).unwrap();
        let ent = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((v - (4.0 + ent)).abs() < 1e-12);
        assert!((v - 4.5623).abs() < 1e-4);
        let zero = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(sparse_loss_value(&[Some(&s)], &zero).unwrap(), 0.0);
        let z = st(vec![0.0; 4], [2, 2]);
        assert_eq!(sparse_loss_value(&[Some(&z)], &LossConfig::default()).unwrap(), 0.0);
        assert!(sparse_loss_value(&[None], &LossConfig::default()).is_err());
    }

    #[test]
    fn tape_and_value_paths_agree() {
        let mut tape = Tape::new();
        let n1 = tape.param(Tensor::new([1, 2], vec![1.0, 3.0]).unwrap());
        let n2 = tape.param(Tensor::new([2, 2], vec![0.5, 0.1, 0.0, 0.2]).unwrap());
        let p = tape.param(Tensor::full([4], 0.3));
        let t = tape.constant(Tensor::full([4], 0.1));
        let cfg = LossConfig { lambda: 0.5, mu1: 2.0, mu2: 0.7 };
        let terms = total_loss(&mut tape, p, t, Some(&[n1, n2]), &cfg).unwrap();
        let s1 = st(vec![1.0, 3.0], [1, 2]);
        let s2 = st(vec![0.5, 0.1, 0.0, 0.2], [2, 2]);
        let want = 0.2 + sparse_loss_value(&[Some(&s1), Some(&s2)], &cfg).unwrap();
        assert!((tape.value(terms.total).item() - want).abs() < 1e-12);
        assert!(sparse_loss(&mut tape, &[], &cfg).is_err());
    }

    #[test]
    fn invalid_coefficients() {
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { mu2: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
