//! Separable spatial upsampling with half-pixel centres.

use serde::{Deserialize, Serialize};

use crate::parallel;

/// Interpolation kernel for spatial upsampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bicubic,
    Bilinear,
}

/// Keys cubic-convolution parameter. `-0.5` is the only choice that
/// reproduces linear (and quadratic) signals exactly.
const CUBIC_A: f64 = -0.5;

fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Per-output-sample taps along one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub(crate) taps: Vec<Vec<(usize, f64)>>,
}

impl AxisTaps {
    pub(crate) fn new(input_len: usize, scale: usize, kind: Interpolation) -> Self {
        let out_len = input_len * scale;
        let clamp = |i: isize| i.clamp(0, input_len as isize - 1) as usize;
        let taps = (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) / scale as f64 - 0.5;
                let base = src.floor();
                let t = src - base;
                let i0 = base as isize;
                match kind {
                    Interpolation::Bilinear => vec![(clamp(i0), 1.0 - t), (clamp(i0 + 1), t)],
                    Interpolation::Bicubic => (-1..=2)
                        .map(|d| (clamp(i0 + d), cubic_weight(t - d as f64)))
                        .collect(),
                }
            })
            .collect();
        Self { taps }
    }
}

/// Upsampling plan for an `h x w` plane to `h*s x w*s`.
#[derive(Clone, Debug)]
pub(crate) struct UpsamplePlan {
    pub(crate) in_h: usize,
    pub(crate) in_w: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl UpsamplePlan {
    pub(crate) fn new(in_h: usize, in_w: usize, scale: usize, kind: Interpolation) -> Self {
        Self {
            in_h,
            in_w,
            rows: AxisTaps::new(in_h, scale, kind),
            cols: AxisTaps::new(in_w, scale, kind),
        }
    }

    pub(crate) fn out_h(&self) -> usize {
        self.rows.taps.len()
    }

    pub(crate) fn out_w(&self) -> usize {
        self.cols.taps.len()
    }

    /// `input` holds `planes` consecutive `in_h x in_w` planes.
    pub(crate) fn forward(&self, input: &[f64], planes: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h(), self.out_w());
        let mut out = vec![0.0; planes * oh * ow];
        parallel::for_each_chunk_mut(&mut out, oh * ow, |p, dst| {
            let src = &input[p * ih * iw..(p + 1) * ih * iw];
            let mut tmp = vec![0.0; ih * ow];
            for r in 0..ih {
                for (ox, taps) in self.cols.taps.iter().enumerate() {
                    tmp[r * ow + ox] = taps.iter().map(|&(i, w)| w * src[r * iw + i]).sum();
                }
            }
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                let row = &mut dst[oy * ow..(oy + 1) * ow];
                for &(i, w) in taps {
                    for (d, s) in row.iter_mut().zip(&tmp[i * ow..(i + 1) * ow]) {
                        *d += w * s;
                    }
                }
            }
        });
        out
    }

    /// Adjoint of [`forward`](Self::forward).
    pub(crate) fn backward(&self, grad_out: &[f64], planes: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h(), self.out_w());
        let mut grad_in = vec![0.0; planes * ih * iw];
        parallel::for_each_chunk_mut(&mut grad_in, ih * iw, |p, dst| {
            let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
            let mut tmp = vec![0.0; ih * ow];
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                for &(i, w) in taps {
                    for (t, s) in tmp[i * ow..(i + 1) * ow].iter_mut().zip(&g[oy * ow..(oy + 1) * ow]) {
                        *t += w * s;
                    }
                }
            }
            for r in 0..ih {
                for (ox, taps) in self.cols.taps.iter().enumerate() {
                    let gv = tmp[r * ow + ox];
                    for &(i, w) in taps {
                        dst[r * iw + i] += w * gv;
                    }
                }
            }
        });
        grad_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_sum_to_one() {
        for kind in [Interpolation::Bicubic, Interpolation::Bilinear] {
            for s in [1, 2, 4, 8] {
                for t in &AxisTaps::new(5, s, kind).taps {
                    let sum: f64 = t.iter().map(|p| p.1).sum();
                    assert!((sum - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn scale_one_is_identity() {
        let plan = UpsamplePlan::new(3, 4, 1, Interpolation::Bicubic);
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        let y = plan.forward(&x, 1);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let plan = UpsamplePlan::new(3, 5, 2, Interpolation::Bicubic);
        let x: Vec<f64> = (0..30).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let g: Vec<f64> = (0..2 * 6 * 10).map(|i| ((i * 3) % 11) as f64 * 0.1).collect();
        let y = plan.forward(&x, 2);
        let xt = plan.backward(&g, 2);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
