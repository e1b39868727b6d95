//! Image-quality metrics for reconstructed cubes.
//!
//! All functions take `(estimate, reference)` as band-major `[C, H, W]`
//! cubes.
//!
//! - PSNR over the whole cube, `10 log10(peak^2 / MSE)`.
//! - SAM: mean per-pixel spectral angle in degrees. Pixels where either
//!   spectrum has zero norm are skipped.
//! - ERGAS: `100 / s * sqrt(mean_b RMSE_b^2 / mean_b^2)`, band means taken
//!   from the reference.
//! - SSIM: 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`,
//!   dynamic range 1, averaged over valid window positions and bands.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::degradation::HsiCube;
use crate::error::{Error, Result};
use crate::parallel;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `+inf` for identical cubes; serialised as `"inf"`.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub ergas: f64,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value {t:?}"))),
    }
}

impl MetricReport {
    /// Computes all four metrics; `scale` is the resolution ratio for ERGAS.
    pub fn compute(estimate: &HsiCube, reference: &HsiCube, scale: usize) -> Result<Self> {
        Ok(Self {
            psnr: psnr(estimate, reference, 1.0)?,
            ssim: ssim(estimate, reference)?,
            sam: sam(estimate, reference)?.degrees,
            ergas: ergas(estimate, reference, scale)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric report serialises")
    }
}

fn same_shape(op: &'static str, a: &HsiCube, b: &HsiCube) -> Result<()> {
    let sa = [a.bands(), a.height(), a.width()];
    let sb = [b.bands(), b.height(), b.width()];
    if sa != sb {
        return Err(Error::shape(op, sb, sa));
    }
    Ok(())
}

pub fn mse(a: &HsiCube, b: &HsiCube) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

pub fn psnr(estimate: &HsiCube, reference: &HsiCube, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::config("psnr peak must be positive"));
    }
    let m = mse(estimate, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamResult {
    pub degrees: f64,
    /// Pixels excluded because a spectrum had zero norm.
    pub skipped: usize,
}

pub fn sam(estimate: &HsiCube, reference: &HsiCube) -> Result<SamResult> {
    same_shape("sam", estimate, reference)?;
    let n = estimate.height() * estimate.width();
    let (mut total, mut counted) = (0.0, 0usize);
    for p in 0..n {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for b in 0..estimate.bands() {
            let x = estimate.data()[b * n + p];
            let y = reference.data()[b * n + p];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        // `sqrt(na * nb)` is exact for identical spectra, giving an angle of 0.
        let cos = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
        total += cos.acos();
        counted += 1;
    }
    let degrees = if counted == 0 { 0.0 } else { (total / counted as f64).to_degrees() };
    Ok(SamResult {
        degrees,
        skipped: n - counted,
    })
}

pub fn ergas(estimate: &HsiCube, reference: &HsiCube, scale: usize) -> Result<f64> {
    same_shape("ergas", estimate, reference)?;
    if scale == 0 {
        return Err(Error::config("ergas scale must be positive"));
    }
    let mut acc = 0.0;
    for b in 0..reference.bands() {
        let (e, r) = (estimate.band(b), reference.band(b));
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        if mean == 0.0 {
            return Err(Error::config(format!("ergas: band {b} of the reference has zero mean")));
        }
        let mse = e.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / r.len() as f64;
        acc += mse / (mean * mean);
    }
    Ok(100.0 / scale as f64 * (acc / reference.bands() as f64).sqrt())
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// SSIM of one window anchored at `(y0, x0)`, evaluated directly.
pub fn ssim_window(a: &[f64], b: &[f64], width: usize, y0: usize, x0: usize) -> f64 {
    let g = ssim_taps();
    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..SSIM_WINDOW {
        for dx in 0..SSIM_WINDOW {
            let w = g[dy] * g[dx];
            let i = (y0 + dy) * width + x0 + dx;
            ma += w * a[i];
            mb += w * b[i];
            aa += w * a[i] * a[i];
            bb += w * b[i] * b[i];
            ab += w * a[i] * b[i];
        }
    }
    ssim_formula(ma, mb, aa - ma * ma, bb - mb * mb, ab - ma * mb)
}

fn ssim_formula(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean SSIM of one band over all valid window positions, using separable
/// filtering of the five local moments.
pub fn ssim_band(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {height}x{width}"
        )));
    }
    let g = ssim_taps();
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let filter = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; height * ow];
        for y in 0..height {
            for x in 0..ow {
                rows[y * ow + x] = (0..SSIM_WINDOW).map(|d| g[d] * f(y * width + x + d)).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WINDOW).map(|d| g[d] * rows[(y + d) * ow + x]).sum();
            }
        }
        out
    };
    let ma = filter(&|i| a[i]);
    let mb = filter(&|i| b[i]);
    let aa = filter(&|i| a[i] * a[i]);
    let bb = filter(&|i| b[i] * b[i]);
    let ab = filter(&|i| a[i] * b[i]);
    let total: f64 = (0..oh * ow)
        .map(|i| ssim_formula(ma[i], mb[i], aa[i] - ma[i] * ma[i], bb[i] - mb[i] * mb[i], ab[i] - ma[i] * mb[i]))
        .sum();
    Ok(total / (oh * ow) as f64)
}

pub fn ssim(estimate: &HsiCube, reference: &HsiCube) -> Result<f64> {
    same_shape("ssim", estimate, reference)?;
    let (h, w) = (estimate.height(), estimate.width());
    let per_band = parallel::map_range(estimate.bands(), |b| ssim_band(estimate.band(b), reference.band(b), h, w));
    let mut acc = 0.0;
    for v in per_band {
        acc += v?;
    }
    Ok(acc / estimate.bands() as f64)
}

/// Per-pixel squared error averaged over bands, `[H * W]`.
pub fn squared_error_map(estimate: &HsiCube, reference: &HsiCube) -> Result<Vec<f64>> {
    same_shape("squared_error_map", estimate, reference)?;
    let n = estimate.height() * estimate.width();
    let mut out = vec![0.0; n];
    for b in 0..estimate.bands() {
        for (o, (x, y)) in out.iter_mut().zip(estimate.band(b).iter().zip(reference.band(b))) {
            *o += (x - y) * (x - y);
        }
    }
    out.iter_mut().for_each(|v| *v /= estimate.bands() as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::synth_hsi;

    fn cube(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> HsiCube {
        HsiCube::new(c, h, w, (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let z = synth_hsi(1, 4, 12, 12, 3).unwrap();
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), f64::INFINITY);
        let a = cube(2, 3, 3, |_| 0.5);
        let b = cube(2, 3, 3, |_| 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let half = |c: &HsiCube| cube(c.bands(), c.height(), c.width(), |i| c.data()[i] * 0.5);
        let z2 = z.data().iter().map(|v| (v + 0.03).min(1.0)).collect();
        let z2 = HsiCube::new(4, 12, 12, z2).unwrap();
        let p = psnr(&z2, &z, 1.0).unwrap();
        assert!((psnr(&half(&z2), &half(&z), 0.5).unwrap() - p).abs() < 1e-9);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn sam_examples() {
        let a = cube(2, 2, 2, |i| if i < 4 { 1.0 } else { 0.0 });
        let b = cube(2, 2, 2, |i| if i < 4 { 0.0 } else { 1.0 });
        assert!((sam(&a, &b).unwrap().degrees - 90.0).abs() < 1e-9);
        assert_eq!(sam(&a, &a).unwrap().degrees, 0.0);
        let z = synth_hsi(2, 5, 6, 6, 3).unwrap();
        let z2 = cube(5, 6, 6, |i| 2.0 * z.data()[i]);
        assert!(sam(&z2, &z).unwrap().degrees < 1e-6);
        let zero = cube(2, 2, 2, |_| 0.0);
        assert_eq!(sam(&zero, &a).unwrap(), SamResult { degrees: 0.0, skipped: 4 });
    }

    #[test]
    fn ergas_examples() {
        let r = cube(1, 4, 4, |_| 0.5);
        let e = cube(1, 4, 4, |_| 0.55);
        assert!((ergas(&e, &r, 4).unwrap() - 2.5).abs() < 1e-9);
        assert_eq!(ergas(&r, &r, 4).unwrap(), 0.0);
        let e2 = cube(1, 4, 4, |_| 1.1);
        let r2 = cube(1, 4, 4, |_| 1.0);
        assert!((ergas(&e2, &r2, 4).unwrap() - 2.5).abs() < 1e-9);
        assert!(ergas(&e, &cube(1, 4, 4, |_| 0.0), 4).is_err());
    }

    #[test]
    fn ssim_examples() {
        let z = synth_hsi(4, 3, 16, 16, 3).unwrap();
        assert!((ssim(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        let inv = cube(3, 16, 16, |i| 1.0 - z.data()[i]);
        assert!(ssim(&inv, &z).unwrap() < 1.0);
        assert!(ssim(&synth_hsi(4, 3, 8, 8, 2).unwrap(), &synth_hsi(5, 3, 8, 8, 2).unwrap()).is_err());
    }

    #[test]
    fn ssim_single_window_matches_direct_sum() {
        let a = synth_hsi(8, 1, 11, 11, 3).unwrap();
        let b = synth_hsi(9, 1, 11, 11, 3).unwrap();
        let fast = ssim_band(a.band(0), b.band(0), 11, 11).unwrap();
        let direct = ssim_window(a.band(0), b.band(0), 11, 0, 0);
        assert!((fast - direct).abs() < 1e-12);
    }

    #[test]
    fn report_serialises_infinity() {
        let z = synth_hsi(1, 3, 12, 12, 2).unwrap();
        let r = MetricReport::compute(&z, &z, 4).unwrap();
        assert_eq!((r.psnr, r.sam, r.ergas, r.ssim), (f64::INFINITY, 0.0, 0.0, 1.0));
        let json = r.to_json();
        assert!(json.contains("\"psnr\":\"inf\""));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
