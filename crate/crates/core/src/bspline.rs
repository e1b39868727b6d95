//! Uniform B-spline bases via the Cox-de Boor recursion.
//!
//! Knot indices follow the usual extended-grid convention: for grid size `G`
//! and order `k` the knots are `t_{-k}, ..., t_0, ..., t_{G+k}` with
//! `t_0`/`t_G` the domain ends. Internally `t_j` lives at array slot `j + k`.
//!
//! The `G + k` basis functions of an edge are `B_{-k}^k, ..., B_{G-1}^k`
//! (knot-indexed); position `m` in a [`basis_row`] holds `B_{m-k}^k`, so the
//! row's first entry is the function whose support starts at `t_{-k}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid size, order and domain of a spline family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub grid_size: usize,
    pub order: usize,
    pub domain: [f64; 2],
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            grid_size: 5,
            order: 3,
            domain: [-1.0, 1.0],
        }
    }
}

impl SplineConfig {
    pub fn new(grid_size: usize, order: usize, domain: [f64; 2]) -> Result<Self> {
        let cfg = Self {
            grid_size,
            order,
            domain,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::config("spline grid size must be at least 1"));
        }
        let [lo, hi] = self.domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!(
                "spline domain must satisfy t0 < tG, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Number of basis functions per edge, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }
}

/// Extended equidistant knot sequence `t_{-k} .. t_{G+k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    grid_size: usize,
    order: usize,
    spacing: f64,
    /// Largest value strictly below `t_G`; clamping target for inputs.
    upper: f64,
}

pub fn make_knots(cfg: &SplineConfig) -> Result<KnotVector> {
    cfg.validate()?;
    let (g, k) = (cfg.grid_size as isize, cfg.order as isize);
    let [lo, hi] = cfg.domain;
    let span = hi - lo;
    let knots: Vec<f64> = (-k..=g + k)
        .map(|j| lo + span * (j as f64) / (g as f64))
        .collect();
    let t_g = knots[(g + k) as usize];
    Ok(KnotVector {
        knots,
        grid_size: cfg.grid_size,
        order: cfg.order,
        spacing: span / g as f64,
        upper: t_g.next_down(),
    })
}

impl KnotVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    /// Knot `t_i` for `i` in `-k ..= G + k`.
    pub fn t(&self, i: isize) -> Option<f64> {
        let slot = i + self.order as isize;
        usize::try_from(slot).ok().and_then(|s| self.knots.get(s).copied())
    }

    /// Domain `[t_0, t_G]`.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.order], self.knots[self.order + self.grid_size])
    }

    /// Clamps `x` into `[t_0, t_G)`; the flag is false when `x` was moved.
    pub fn clamp(&self, x: f64) -> (f64, bool) {
        let lo = self.knots[self.order];
        if x < lo {
            (lo, false)
        } else if x > self.upper {
            (self.upper, false)
        } else {
            (x, true)
        }
    }
}

/// Literal Cox-de Boor recursion for `B_i^degree(x)`, with `i` a knot index.
///
/// Needs knots `t_i .. t_{i+degree+1}` to exist in `knots`.
pub fn basis(i: isize, degree: usize, x: f64, knots: &KnotVector) -> Result<f64> {
    let last = i + degree as isize + 1;
    if knots.t(i).is_none() || knots.t(last).is_none() {
        return Err(Error::IndexOutOfRange {
            what: "B-spline basis index",
            index: i,
        });
    }
    Ok(cox_de_boor(i, degree, x, knots))
}

fn cox_de_boor(i: isize, degree: usize, x: f64, knots: &KnotVector) -> f64 {
    let t = |j: isize| knots.t(j).expect("index checked by caller");
    if degree == 0 {
        return if t(i) <= x && x < t(i + 1) { 1.0 } else { 0.0 };
    }
    let d = degree as isize;
    let left = (x - t(i)) / (t(i + d) - t(i)) * cox_de_boor(i, degree - 1, x, knots);
    let right =
        (t(i + d + 1) - x) / (t(i + d + 1) - t(i + 1)) * cox_de_boor(i + 1, degree - 1, x, knots);
    left + right
}

/// The `G + k` basis values at `x` (clamped into the domain first).
pub fn basis_row(x: f64, knots: &KnotVector) -> Vec<f64> {
    let mut values = vec![0.0; knots.num_basis()];
    basis_row_into(x, knots, &mut values, None);
    values
}

/// Fills `values` (and `derivs`, if given) with the basis row at `x` and its
/// derivative with respect to `x`. Inputs outside the domain are clamped and
/// get a zero derivative. Returns whether `x` was inside the domain.
///
/// Evaluates the whole Cox-de Boor triangle in place: the degree-0
/// indicators over all `G + 2k` knot intervals, then one sweep per degree.
pub fn basis_row_into(
    x: f64,
    knots: &KnotVector,
    values: &mut [f64],
    derivs: Option<&mut [f64]>,
) -> bool {
    let k = knots.order;
    let nb = knots.num_basis();
    debug_assert_eq!(values.len(), nb);
    let t = &knots.knots;
    let (x, inside) = knots.clamp(x);

    let intervals = t.len() - 1;
    let mut tri = [0.0f64; 64];
    let tri: &mut [f64] = if intervals <= tri.len() {
        &mut tri[..intervals]
    } else {
        return basis_row_into_alloc(x, inside, knots, values, derivs);
    };
    cox_de_boor_table(x, t, k, tri, values, derivs, inside);
    inside
}

fn basis_row_into_alloc(
    x: f64,
    inside: bool,
    knots: &KnotVector,
    values: &mut [f64],
    derivs: Option<&mut [f64]>,
) -> bool {
    let t = &knots.knots;
    let mut tri = vec![0.0; t.len() - 1];
    cox_de_boor_table(x, t, knots.order, &mut tri, values, derivs, inside);
    inside
}

fn cox_de_boor_table(
    x: f64,
    t: &[f64],
    k: usize,
    tri: &mut [f64],
    values: &mut [f64],
    derivs: Option<&mut [f64]>,
    inside: bool,
) {
    // Only the k + 1 functions supported on the knot span holding `x` are
    // non-zero, so the triangle is evaluated on that window alone.
    tri.iter_mut().for_each(|v| *v = 0.0);
    values.iter_mut().for_each(|v| *v = 0.0);
    let mu = t.partition_point(|&v| v <= x).saturating_sub(1).min(tri.len() - 1);
    tri[mu] = 1.0;
    if k == 0 {
        if mu < values.len() {
            values[mu] = 1.0;
        }
        if let Some(der) = derivs {
            der.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // Raise in place up to degree k - 1; at degree d only q in mu-d..=mu
    // can be non-zero.
    for d in 1..k {
        for q in mu.saturating_sub(d)..=mu.min(tri.len() - d - 1) {
            tri[q] = (x - t[q]) / (t[q + d] - t[q]) * tri[q]
                + (t[q + d + 1] - x) / (t[q + d + 1] - t[q + 1]) * tri[q + 1];
        }
    }
    let window = mu.saturating_sub(k)..=mu.min(values.len() - 1);
    if let Some(der) = derivs {
        der.iter_mut().for_each(|v| *v = 0.0);
        if inside {
            let kf = k as f64;
            for q in window.clone() {
                der[q] = kf / (t[q + k] - t[q]) * tri[q] - kf / (t[q + k + 1] - t[q + 1]) * tri[q + 1];
            }
        }
    }
    for q in window {
        values[q] = (x - t[q]) / (t[q + k] - t[q]) * tri[q]
            + (t[q + k + 1] - x) / (t[q + k + 1] - t[q + 1]) * tri[q + 1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn knots(g: usize, k: usize, lo: f64, hi: f64) -> KnotVector {
        make_knots(&SplineConfig::new(g, k, [lo, hi]).unwrap()).unwrap()
    }

    /// Cardinal B-splines on unit spacing, coded from their closed forms.
    fn closed_form(k: usize, u: f64) -> f64 {
        match k {
            0 => (0.0..1.0).contains(&u) as u8 as f64,
            1 => {
                if (0.0..1.0).contains(&u) {
                    u
                } else if (1.0..2.0).contains(&u) {
                    2.0 - u
                } else {
                    0.0
                }
            }
            2 => {
                if (0.0..1.0).contains(&u) {
                    u * u / 2.0
                } else if (1.0..2.0).contains(&u) {
                    (-2.0 * u * u + 6.0 * u - 3.0) / 2.0
                } else if (2.0..3.0).contains(&u) {
                    (3.0 - u) * (3.0 - u) / 2.0
                } else {
                    0.0
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn knot_examples() {
        assert_eq!(knots(1, 0, 0.0, 1.0).as_slice(), &[0.0, 1.0]);
        assert_eq!(knots(2, 1, 0.0, 2.0).as_slice(), &[-1.0, 0.0, 1.0, 2.0, 3.0]);
        let kv = knots(5, 3, -1.0, 1.0);
        assert_eq!(kv.len(), 12);
        assert!((kv.spacing() - 0.4).abs() < 1e-15);
        let want = [-2.2, -1.8, -1.4, -1.0, -0.6, -0.2, 0.2, 0.6, 1.0, 1.4, 1.8, 2.2];
        for (a, b) in kv.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for w in kv.as_slice().windows(2) {
            assert!(((w[1] - w[0]) - 0.4).abs() <= 1e-12 * 0.4 * 10.0);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SplineConfig::new(0, 3, [-1.0, 1.0]).is_err());
        assert!(SplineConfig::new(5, 3, [1.0, 1.0]).is_err());
        assert!(SplineConfig::new(5, 3, [2.0, -1.0]).is_err());
    }

    #[test]
    fn degree_zero_indicator() {
        let kv = knots(1, 0, 0.0, 1.0);
        assert_eq!(basis(0, 0, 0.5, &kv).unwrap(), 1.0);
        assert_eq!(basis(0, 0, 1.0, &kv).unwrap(), 0.0);
        assert_eq!(basis(0, 0, 0.0, &kv).unwrap(), 1.0);
        assert!(basis(1, 0, 0.5, &kv).is_err());
        assert!(basis(-1, 0, 0.5, &kv).is_err());
        assert_eq!(basis_row(0.3, &kv), vec![1.0]);
    }

    #[test]
    fn hat_function() {
        let kv = knots(2, 1, 0.0, 2.0);
        // Hat B_0^1 peaks at t_1 = 1 and rises from t_0 = 0.
        assert!((basis(0, 1, 0.5, &kv).unwrap() - 0.5).abs() < 1e-15);
        assert!((basis(-1, 1, 0.5, &kv).unwrap() - 0.5).abs() < 1e-15);
        let row = basis_row(0.5, &kv);
        assert_eq!(row.len(), 3);
        assert!((row[0] - 0.5).abs() < 1e-15);
        assert!((row[1] - 0.5).abs() < 1e-15);
        assert_eq!(row[2], 0.0);
    }

    #[test]
    fn table_matches_literal_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in 1..=6 {
            for k in 0..=4 {
                let kv = knots(g, k, -1.0, 1.0);
                for _ in 0..50 {
                    let x = rng.gen_range(-1.0..1.0);
                    let row = basis_row(x, &kv);
                    for (m, v) in row.iter().enumerate() {
                        let lit = basis(m as isize - k as isize, k, x, &kv).unwrap();
                        assert!((v - lit).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn closed_form_oracle_low_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..=2 {
            let kv = knots(7, k, -1.5, 2.0);
            for _ in 0..500 {
                let x = rng.gen_range(-1.5..2.0);
                for i in -(k as isize)..7 {
                    let u = (x - kv.t(i).unwrap()) / kv.spacing();
                    let got = basis(i, k, x, &kv).unwrap();
                    assert!((got - closed_form(k, u)).abs() < 1e-12, "k={k} i={i} x={x}");
                }
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let kv = knots(5, 3, -1.0, 1.0);
        let mut vals = vec![0.0; 8];
        let mut ders = vec![0.0; 8];
        for &x in &[-0.93, -0.41, 0.05, 0.37, 0.88] {
            basis_row_into(x, &kv, &mut vals, Some(&mut ders));
            let h = 1e-6;
            let hi = basis_row(x + h, &kv);
            let lo = basis_row(x - h, &kv);
            for m in 0..8 {
                let fd = (hi[m] - lo[m]) / (2.0 * h);
                assert!((fd - ders[m]).abs() < 1e-6, "m={m} x={x}");
            }
        }
    }

    #[test]
    fn clamped_inputs_have_zero_derivative() {
        let kv = knots(5, 3, -1.0, 1.0);
        let mut vals = vec![0.0; 8];
        let mut ders = vec![1.0; 8];
        assert!(!basis_row_into(3.0, &kv, &mut vals, Some(&mut ders)));
        assert!(ders.iter().all(|&d| d == 0.0));
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // t_G itself is clamped just below so a degree-0 basis stays active.
        let kv0 = knots(3, 0, 0.0, 1.0);
        assert_eq!(basis_row(1.0, &kv0), vec![0.0, 0.0, 1.0]);
    }
}
