//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each check compares analytic gradients against
//! `(f(x + eps) - f(x - eps)) / (2 eps)` element by element. The relative
//! error is `|a - n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps entries
//! whose true gradient is zero from dividing rounding noise by zero.
//! Parallelism is switched off while checking.
//!
//! The network loss is only piecewise smooth (`abs`, `relu`, spline
//! clamping). The model check therefore draws its random batch until every
//! kink is at least `KINK_MARGIN_FACTOR * eps` away from the evaluation
//! point, so no probe straddles a kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Interpolation, Tape, Tensor, Var};
use crate::bspline::{make_knots, SplineConfig};
use crate::error::{Error, Result};
use crate::kan::KanLayer;
use crate::loss::{total_loss, LossConfig};
use crate::model::{HsrKanModel, ModelConfig};
use crate::parallel;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-3;
pub const KINK_MARGIN_FACTOR: f64 = 10.0;
const MAX_DRAWS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Op,
    Layer,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "layer" => Ok(Scope::Layer),
            "model" => Ok(Scope::Model),
            _ => Err(Error::config(format!("unknown gradcheck scope {s:?}"))),
        }
    }
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Input tensor and flat element index of the worst entry.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Distance of the evaluation point to the nearest kink of the graph.
    pub kink_margin: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<6} {:<28} max_rel_err={:.3e} worst=input{}[{}] analytic={:.10e} numeric={:.10e} kink_margin={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.worst_input,
            self.worst_index,
            self.analytic,
            self.numeric,
            self.kink_margin
        )
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic[k][i]` with central differences of `eval`, which
/// returns the loss with element `i` of input `k` shifted by `delta`.
pub fn compare(
    name: &str,
    analytic: &[Vec<f64>],
    eps: f64,
    tol: f64,
    mut eval: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<CheckResult> {
    let mut res = CheckResult {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kink_margin: f64::INFINITY,
        passed: true,
    };
    for (k, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let n = (eval(k, i, eps)? - eval(k, i, -eps)?) / (2.0 * eps);
            let e = rel_err(a, n);
            res.checked += 1;
            if e > res.max_rel_err || !e.is_finite() {
                res.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
                res.worst_input = k;
                res.worst_index = i;
                res.analytic = a;
                res.numeric = n;
            }
        }
    }
    res.passed = res.max_rel_err <= tol;
    Ok(res)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Checks a scalar function of tensors built on a fresh tape.
pub fn check_fn(name: &str, inputs: &[Tensor], build: &Build<'_>, eps: f64, tol: f64) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::shape("gradcheck", [1], tape.shape(loss)));
    }
    let margin = tape.kink_margin();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let mut work = inputs.to_vec();
    let res = compare(name, &analytic, eps, tol, |k, i, d| {
        let orig = work[k].data()[i];
        work[k].data_mut()[i] = orig + d;
        let mut t = Tape::new();
        let vs: Vec<Var> = work.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vs).map(|l| t.value(l).item());
        work[k].data_mut()[i] = orig;
        out
    })?;
    Ok(CheckResult { kink_margin: margin, ..res })
}

/// `sum(out * w)` with a fixed random weight, so every output entry
/// contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let wv = tape.constant(w);
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every primitive of the tape, each behind a weighted-sum loss.
pub fn check_ops(seed: u64, eps: f64, tol: f64) -> Result<Vec<CheckResult>> {
    parallel::sequential(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut run = |name: &str, inputs: Vec<Tensor>, f: &Build<'_>| -> Result<()> {
            let wrapped = |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let o = f(t, v)?;
                if t.value(o).len() == 1 {
                    Ok(o)
                } else {
                    weighted_sum(t, o, seed ^ 0x5eed)
                }
            };
            out.push(check_fn(name, &inputs, &wrapped, eps, tol)?);
            Ok(())
        };
        let r = &mut rng;
        run("matmul", vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)], &|t, v| {
            t.matmul(v[0], v[1])
        })?;
        run("matmul_nt", vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[2, 4], -1.0, 1.0)], &|t, v| {
            t.matmul_nt(v[0], v[1])
        })?;
        run(
            "conv2d",
            vec![
                rand_tensor(r, &[2, 3, 5, 4], -1.0, 1.0),
                rand_tensor(r, &[2, 3, 3, 3], -1.0, 1.0),
                rand_tensor(r, &[2], -1.0, 1.0),
            ],
            &|t, v| t.conv2d(v[0], v[1], Some(v[2])),
        )?;
        run("silu", vec![rand_tensor(r, &[4, 5], -3.0, 3.0)], &|t, v| Ok(t.silu(v[0])))?;
        run("relu", vec![rand_away_from_zero(r, &[4, 5])], &|t, v| Ok(t.relu(v[0])))?;
        run("abs", vec![rand_away_from_zero(r, &[4, 5])], &|t, v| Ok(t.abs(v[0])))?;
        run("global_avg_pool", vec![rand_tensor(r, &[2, 3, 4, 5], -1.0, 1.0)], &|t, v| t.global_avg_pool(v[0]))?;
        run("upsample_bicubic", vec![rand_tensor(r, &[1, 2, 3, 4], 0.0, 1.0)], &|t, v| {
            t.upsample(v[0], 2, Interpolation::Bicubic)
        })?;
        run("upsample_bilinear", vec![rand_tensor(r, &[1, 2, 3, 4], 0.0, 1.0)], &|t, v| {
            t.upsample(v[0], 4, Interpolation::Bilinear)
        })?;
        run("reshape", vec![rand_tensor(r, &[2, 6], -1.0, 1.0)], &|t, v| t.reshape(v[0], &[3, 4]))?;
        run("permute", vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], &|t, v| t.permute(v[0], &[2, 0, 1]))?;
        run(
            "concat",
            vec![rand_tensor(r, &[2, 3, 2], -1.0, 1.0), rand_tensor(r, &[2, 1, 2], -1.0, 1.0)],
            &|t, v| t.concat(&[v[0], v[1]], 1),
        )?;
        let pair = |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)];
        run("add", pair(r), &|t, v| t.add(v[0], v[1]))?;
        run("sub", pair(r), &|t, v| t.sub(v[0], v[1]))?;
        run("mul", pair(r), &|t, v| t.mul(v[0], v[1]))?;
        run("scale", vec![rand_tensor(r, &[3, 4], -1.0, 1.0)], &|t, v| Ok(t.scale(v[0], -1.7)))?;
        run(
            "mul_channel",
            vec![rand_tensor(r, &[2, 3, 2, 2], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)],
            &|t, v| t.mul_channel(v[0], v[1]),
        )?;
        for (g, k) in [(5, 3), (3, 1), (4, 2)] {
            let knots = make_knots(&SplineConfig::new(g, k, [-1.0, 1.0])?)?;
            run(
                &format!("spline_basis_g{g}_k{k}"),
                vec![rand_tensor(r, &[6, 2], -0.98, 0.98)],
                &|t, v| t.spline_basis(v[0], &knots),
            )?;
        }
        let knots = make_knots(&SplineConfig::default())?;
        let nb = knots.num_basis();
        run(
            "edge_l1",
            vec![
                rand_tensor(r, &[5, 3], -0.9, 0.9),
                rand_tensor(r, &[2, 3], -1.0, 1.0),
                rand_tensor(r, &[2, 3, nb], -1.0, 1.0),
            ],
            &|t, v| {
                let act = t.silu(v[0]);
                let basis = t.spline_basis(v[0], &knots)?;
                t.edge_l1(act, basis, v[1], v[2])
            },
        )?;
        run("sum", vec![rand_tensor(r, &[3, 4], -1.0, 1.0)], &|t, v| Ok(t.sum(v[0])))?;
        run("mean", vec![rand_tensor(r, &[3, 4], -1.0, 1.0)], &|t, v| Ok(t.mean(v[0])))?;
        run("entropy", vec![rand_tensor(r, &[3, 4], 0.05, 1.0)], &|t, v| Ok(t.entropy(v[0])))?;
        Ok(out)
    })
}

/// A KAN layer with its sparsity terms, checked against weights and input.
pub fn check_layer(seed: u64, eps: f64, tol: f64) -> Result<Vec<CheckResult>> {
    parallel::sequential(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (g, k) in [(5, 3), (3, 2)] {
            let spline = SplineConfig::new(g, k, [-1.0, 1.0])?;
            let layer = KanLayer::new(3, 4, spline, &mut rng)?;
            let x = rand_tensor(&mut rng, &[6, 3], -0.95, 0.95);
            let inputs = vec![layer.base_weight.clone(), layer.spline_weight.clone(), x];
            let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let lyr = KanLayer::from_weights(spline, t.value(v[0]).clone(), t.value(v[1]).clone())?;
                let o = lyr.forward(t, crate::kan::KanVars { base: v[0], spline: v[1] }, v[2], true)?;
                let rec = weighted_sum(t, o.out, seed)?;
                let norms = o.edge_norms.expect("requested");
                let l1 = t.sum(norms);
                let ent = t.entropy(norms);
                let s = t.add(rec, l1)?;
                t.add(s, ent)
            };
            out.push(check_fn(&format!("kan_layer_g{g}_k{k}"), &inputs, &build, eps, tol)?);
        }
        Ok(out)
    })
}

/// Full model loss (reconstruction plus sparsity) against every parameter.
pub fn check_model(cfg: &ModelConfig, seed: u64, eps: f64, tol: f64) -> Result<Vec<CheckResult>> {
    parallel::sequential(|| {
        let mut model = HsrKanModel::new(ModelConfig { seed, ..cfg.clone() })?;
        let (h, w) = (4 * cfg.scale, 4 * cfg.scale);
        let loss_cfg = LossConfig::default();
        let draw = |d: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a ^ (d << 32));
            let x = rand_tensor(&mut rng, &[1, cfg.msi_bands, h, w], 0.0, 1.0);
            let y = rand_tensor(&mut rng, &[1, cfg.hsi_bands, h / cfg.scale, w / cfg.scale], 0.0, 1.0);
            let z = rand_tensor(&mut rng, &[1, cfg.hsi_bands, h, w], 0.0, 1.0);
            (x, y, z)
        };
        let loss_at = |m: &HsrKanModel, (x, y, z): &(Tensor, Tensor, Tensor)| -> Result<(Tape, Var, Vec<Var>)> {
            let mut t = Tape::new();
            let (xv, yv, zv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(z.clone()));
            let pass = m.forward(&mut t, xv, yv, true)?;
            let norms: Vec<Var> = pass.edge_norms.iter().map(|l| l.norms).collect();
            let terms = total_loss(&mut t, pass.output, zv, Some(&norms), &loss_cfg)?;
            Ok((t, terms.total, pass.params.all()))
        };
        let mut batch = draw(0);
        for d in 0..MAX_DRAWS {
            batch = draw(d);
            if loss_at(&model, &batch)?.0.kink_margin() > KINK_MARGIN_FACTOR * eps {
                break;
            }
        }
        let loss_of = |m: &HsrKanModel| loss_at(m, &batch);
        let (mut tape, loss, vars) = loss_of(&model)?;
        let margin = tape.kink_margin();
        let grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(model.named_parameters())
            .map(|(&v, (_, t))| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
        let mut results = Vec::new();
        for (k, name) in names.iter().enumerate() {
            let res = compare(&format!("model.{name}"), &analytic[k..k + 1], eps, tol, |_, i, d| {
                let orig = model.parameters_mut()[k].data()[i];
                model.parameters_mut()[k].data_mut()[i] = orig + d;
                let v = loss_of(&model).map(|(t, l, _)| t.value(l).item());
                model.parameters_mut()[k].data_mut()[i] = orig;
                v
            })?;
            results.push(CheckResult {
                worst_input: k,
                kink_margin: margin,
                ..res
            });
        }
        Ok(results)
    })
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Op => check_ops(seed, DEFAULT_EPS, DEFAULT_TOL),
        Scope::Layer => check_layer(seed, DEFAULT_EPS, DEFAULT_TOL),
        Scope::Model => check_model(&ModelConfig::toy(), seed, DEFAULT_EPS, DEFAULT_TOL),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let res = check_ops(1, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(res.len() >= 20);
        for r in &res {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn layer_passes() {
        for r in check_layer(2, DEFAULT_EPS, DEFAULT_TOL).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let analytic = vec![vec![1.0, 2.0, 5.0]];
        let r = compare("square", &analytic, 1e-6, 1e-4, |_, i, d| {
            let x = i as f64 + d;
            Ok(x * x)
        })
        .unwrap();
        assert!(!r.passed);
        assert_eq!((r.worst_input, r.worst_index), (0, 0));
        assert!((r.numeric - 0.0).abs() < 1e-6 && r.analytic == 1.0);
        assert!(r.to_string().starts_with("FAIL   square"));
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("model".parse::<Scope>().unwrap(), Scope::Model);
        assert!("net".parse::<Scope>().is_err());
    }
}
