//! Synthetic scenes and the observation model `X = R Z`, `Y = Z D`.
//!
//! Ground-truth cubes are linear mixtures of a few smooth endmember spectra
//! with spatially smooth, simplex-normalised abundances. The multispectral
//! view applies a row-stochastic spectral response; the low-resolution view
//! blurs each band with a 3x3 Gaussian (sigma 0.5, reflect padding) and
//! keeps every `s`-th sample starting at offset `s / 2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::parallel;

/// Provenance recorded alongside a cube.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CubeMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source: String,
}

/// Band-major image cube `[bands, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub meta: CubeMeta,
}

impl HsiCube {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::config("cube dimensions must be positive"));
        }
        if data.len() != bands * height * width {
            return Err(Error::shape("HsiCube", bands * height * width, data.len()));
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
            meta: CubeMeta::default(),
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            [1, c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::shape("HsiCube::from_tensor", "[C, H, W]", t.shape())),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.bands, self.height, self.width], self.data.clone()).expect("consistent cube")
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> f64 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn with_meta(mut self, meta: CubeMeta) -> Self {
        self.meta = meta;
        self
    }
}

/// Row-stochastic `c x C` spectral response.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralResponse {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SpectralResponse {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape("SpectralResponse", [rows, cols], data.len()));
        }
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            if row.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(Error::config(format!("response row {r} has negative or non-finite entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("response row {r} sums to {s}, not 1")));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Normalises each row of a non-negative matrix to sum to one.
    pub fn from_unnormalized(rows: usize, cols: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("SpectralResponse", [rows, cols], data.len()));
        }
        for row in data.chunks_mut(cols.max(1)) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(Error::config("response row with zero sum"));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Self::new(rows, cols, data)
    }

    /// Three Gaussian sensitivity bumps centred at 1/6, 1/2 and 5/6 of the
    /// band axis with standard deviation `C/6` bands.
    pub fn default_rgb(hsi_bands: usize) -> Result<Self> {
        let sigma = hsi_bands as f64 / 6.0;
        let span = (hsi_bands.max(2) - 1) as f64;
        let data = [1.0 / 6.0, 0.5, 5.0 / 6.0]
            .iter()
            .flat_map(|frac| {
                let centre = frac * span;
                (0..hsi_bands).map(move |b| {
                    let d = (b as f64 - centre) / sigma;
                    (-0.5 * d * d).exp()
                })
            })
            .collect();
        Self::from_unnormalized(3, hsi_bands, data)
    }

    pub fn identity(bands: usize) -> Self {
        let data = (0..bands * bands).map(|i| if i / bands == i % bands { 1.0 } else { 0.0 }).collect();
        Self { rows: bands, cols: bands, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Gaussian blur followed by decimation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDegradation {
    /// Row-major 3x3 kernel.
    pub kernel: [f64; 9],
    pub scale: usize,
}

/// Normalised separable 3x3 Gaussian.
pub fn gaussian_kernel_3x3(sigma: f64) -> [f64; 9] {
    let g: Vec<f64> = [-1.0f64, 0.0, 1.0].iter().map(|d| (-d * d / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut k = [0.0; 9];
    for y in 0..3 {
        for x in 0..3 {
            k[y * 3 + x] = g[y] * g[x];
        }
    }
    k
}

impl SpatialDegradation {
    /// 3x3 kernel with sigma 0.5.
    pub fn new(scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::config("decimation factor must be positive"));
        }
        Ok(Self {
            kernel: gaussian_kernel_3x3(0.5),
            scale,
        })
    }
}

/// Geometry and content parameters for synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub hsi_bands: usize,
    pub size: usize,
    pub scale: usize,
    pub endmembers: usize,
}

impl Default for DatasetConfig {
    /// 31 bands, 64x64 patches, x4.
    fn default() -> Self {
        Self {
            hsi_bands: 31,
            size: 64,
            scale: 4,
            endmembers: 4,
        }
    }
}

/// One `(X, Y, Z)` training triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: HsiCube,
    pub y: HsiCube,
    pub z: HsiCube,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of patch `index` in `split`. Train patches use even and validation
/// patches odd pre-images of a bijection, so the two never share a seed.
pub fn patch_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    splitmix(splitmix(seed) ^ (2 * index as u64 + tag))
}

const FIELD_RADIUS: usize = 2;
const FIELD_PASSES: usize = 3;
const ABUNDANCE_SHARPNESS: f64 = 3.0;

/// Smooth random cube made of `n_endmembers` mixed spectra.
pub fn synth_hsi(seed: u64, bands: usize, height: usize, width: usize, n_endmembers: usize) -> Result<HsiCube> {
    if bands == 0 || height == 0 || width == 0 {
        return Err(Error::config("synthetic cube dimensions must be positive"));
    }
    if n_endmembers == 0 {
        return Err(Error::config("need at least one endmember"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let endmembers: Vec<Vec<f64>> = (0..n_endmembers).map(|_| random_spectrum(&mut rng, bands)).collect();
    let abund = abundances(&mut rng, n_endmembers, height, width);
    let n = height * width;
    let mut data = vec![0.0; bands * n];
    for (b, plane) in data.chunks_mut(n).enumerate() {
        for (p, v) in plane.iter_mut().enumerate() {
            let mix: f64 = (0..n_endmembers).map(|e| abund[e * n + p] * endmembers[e][b]).sum();
            // Stored as f32 on disk; keep values on the f32 grid so files
            // round-trip exactly.
            *v = mix.clamp(0.0, 1.0) as f32 as f64;
        }
    }
    Ok(HsiCube::new(bands, height, width, data)?.with_meta(CubeMeta {
        seed: Some(seed),
        source: format!("synth endmembers={n_endmembers}"),
    }))
}

fn random_spectrum<R: Rng>(rng: &mut R, bands: usize) -> Vec<f64> {
    let base = rng.gen_range(0.05..0.3);
    let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(2..=3))
        .map(|_| {
            let c = rng.gen_range(0.0..bands as f64);
            let w = rng.gen_range(bands as f64 / 8.0..bands as f64 / 3.0).max(0.5);
            let a = rng.gen_range(0.2..0.7);
            (c, w, a)
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            base + bumps
                .iter()
                .map(|&(c, w, a)| a * (-0.5 * ((b as f64 - c) / w).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let peak = rng.gen_range(0.6..0.95);
    let max = raw.iter().cloned().fold(f64::MIN, f64::max);
    raw.iter().map(|v| v / max * peak).collect()
}

/// Softmax of smoothed Gaussian noise fields; `[n, H*W]`.
fn abundances<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize) -> Vec<f64> {
    let px = h * w;
    let mut fields: Vec<f64> = Vec::with_capacity(n * px);
    for _ in 0..n {
        let noise: Vec<f64> = (0..px).map(|_| StandardNormal.sample(rng)).collect();
        let mut f = smooth_field(noise, h, w);
        let mean = f.iter().sum::<f64>() / px as f64;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / px as f64;
        let sd = var.sqrt().max(1e-12);
        f.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        fields.extend(f);
    }
    let mut out = vec![0.0; n * px];
    for p in 0..px {
        let m = (0..n).map(|e| fields[e * px + p]).fold(f64::MIN, f64::max);
        let ex: Vec<f64> = (0..n).map(|e| (ABUNDANCE_SHARPNESS * (fields[e * px + p] - m)).exp()).collect();
        let s: f64 = ex.iter().sum();
        for e in 0..n {
            out[e * px + p] = ex[e] / s;
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn smooth_field(mut f: Vec<f64>, h: usize, w: usize) -> Vec<f64> {
    let r = FIELD_RADIUS as isize;
    let norm = (2 * r + 1) as f64;
    for _ in 0..FIELD_PASSES {
        let mut tmp = vec![0.0; f.len()];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r).map(|d| f[y * w + reflect(x as isize + d, w)]).sum::<f64>() / norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                f[y * w + x] = (-r..=r).map(|d| tmp[reflect(y as isize + d, h) * w + x]).sum::<f64>() / norm;
            }
        }
    }
    f
}

/// `X = R Z`: per-pixel spectral projection.
pub fn degrade_spectral(z: &HsiCube, r: &SpectralResponse) -> Result<HsiCube> {
    if r.cols != z.bands {
        return Err(Error::shape("degrade_spectral", r.cols, z.bands));
    }
    let n = z.height * z.width;
    let mut data = vec![0.0; r.rows * n];
    for (o, plane) in data.chunks_mut(n).enumerate() {
        let row = &r.data[o * r.cols..(o + 1) * r.cols];
        for (p, v) in plane.iter_mut().enumerate() {
            *v = row.iter().enumerate().map(|(b, w)| w * z.data[b * n + p]).sum();
        }
    }
    HsiCube::new(r.rows, z.height, z.width, data)
}

/// 3x3 blur of one plane with reflect padding.
pub fn blur_plane(src: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..3 {
                let sy = reflect(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = reflect(x as isize + kx as isize - 1, w);
                    acc += kernel[ky * 3 + kx] * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// `Y = Z D`: blur every band, then keep samples `(i*s + s/2, j*s + s/2)`.
pub fn degrade_spatial(z: &HsiCube, deg: &SpatialDegradation) -> Result<HsiCube> {
    let s = deg.scale;
    if s == 0 || !z.height.is_multiple_of(s) || !z.width.is_multiple_of(s) {
        return Err(Error::config(format!(
            "spatial size {}x{} not divisible by scale {s}",
            z.height, z.width
        )));
    }
    let (h, w) = (z.height, z.width);
    let (lh, lw) = (h / s, w / s);
    let off = s / 2;
    let mut data = vec![0.0; z.bands * lh * lw];
    parallel::for_each_chunk_mut(&mut data, lh * lw, |b, dst| {
        let blurred = blur_plane(z.band(b), h, w, &deg.kernel);
        for i in 0..lh {
            for j in 0..lw {
                dst[i * lw + j] = blurred[(i * s + off) * w + j * s + off];
            }
        }
    });
    HsiCube::new(z.bands, lh, lw, data)
}

/// Builds the `(X, Y, Z)` triple for one ground-truth cube.
pub fn make_sample(z: HsiCube, r: &SpectralResponse, deg: &SpatialDegradation) -> Result<Sample> {
    let x = degrade_spectral(&z, r)?;
    let y = degrade_spatial(&z, deg)?;
    Ok(Sample { x, y, z })
}

/// Deterministic synthetic dataset of `n_patches` triples from one split.
pub fn make_dataset(
    seed: u64,
    n_patches: usize,
    cfg: &DatasetConfig,
    response: &SpectralResponse,
    split: Split,
) -> Result<Vec<Sample>> {
    if cfg.scale == 0 || !cfg.size.is_multiple_of(cfg.scale) {
        return Err(Error::config(format!("patch size {} not divisible by scale {}", cfg.size, cfg.scale)));
    }
    let deg = SpatialDegradation::new(cfg.scale)?;
    parallel::map_range(n_patches, |i| {
        let z = synth_hsi(patch_seed(seed, split, i), cfg.hsi_bands, cfg.size, cfg.size, cfg.endmembers)?;
        make_sample(z, response, &deg)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_gaussian() {
        let k = gaussian_kernel_3x3(0.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let e = (-2.0f64).exp();
        let g = [e, 1.0, e].map(|v| v / (1.0 + 2.0 * e));
        assert!((k[4] - g[1] * g[1]).abs() < 1e-15);
        assert!((k[0] - g[0] * g[0]).abs() < 1e-15);
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let a = synth_hsi(5, 8, 16, 16, 3).unwrap();
        let b = synth_hsi(5, 8, 16, 16, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(a, synth_hsi(6, 8, 16, 16, 3).unwrap());
        assert!(synth_hsi(5, 0, 16, 16, 3).is_err());
        assert!(synth_hsi(5, 8, 16, 16, 0).is_err());
    }

    #[test]
    fn abundances_lie_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, h, w) = (5, 12, 9);
        let a = abundances(&mut rng, n, h, w);
        for p in 0..h * w {
            let s: f64 = (0..n).map(|e| a[e * h * w + p]).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((0..n).all(|e| a[e * h * w + p] >= 0.0));
        }
    }

    #[test]
    fn single_endmember_is_rank_one() {
        let z = synth_hsi(9, 6, 8, 8, 1).unwrap();
        let first: Vec<f64> = (0..6).map(|b| z.get(b, 0, 0)).collect();
        for y in 0..8 {
            for x in 0..8 {
                for (b, &v) in first.iter().enumerate() {
                    assert_eq!(z.get(b, y, x), v);
                }
            }
        }
    }

    #[test]
    fn spectral_projection_examples() {
        let z = synth_hsi(1, 4, 4, 4, 2).unwrap();
        assert_eq!(degrade_spectral(&z, &SpectralResponse::identity(4)).unwrap().data(), z.data());
        let two = HsiCube::new(2, 1, 2, vec![0.2, 0.4, 0.6, 1.0]).unwrap();
        let mean = SpectralResponse::new(1, 2, vec![0.5, 0.5]).unwrap();
        let x = degrade_spectral(&two, &mean).unwrap();
        assert!((x.data()[0] - 0.4).abs() < 1e-15);
        assert!((x.data()[1] - 0.7).abs() < 1e-15);
        let r = SpectralResponse::default_rgb(4).unwrap();
        let x = degrade_spectral(&z, &r).unwrap();
        let (lo, hi) = z.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(x.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        assert!(degrade_spectral(&z, &SpectralResponse::identity(3)).is_err());
    }

    #[test]
    fn default_response_is_row_stochastic() {
        let r = SpectralResponse::default_rgb(31).unwrap();
        assert_eq!((r.rows(), r.cols()), (3, 31));
        for row in r.data().chunks(31) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(SpectralResponse::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(SpectralResponse::new(1, 2, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn spatial_degradation_examples() {
        let c = HsiCube::new(2, 8, 8, vec![0.3; 128]).unwrap();
        let y = degrade_spatial(&c, &SpatialDegradation::new(4).unwrap()).unwrap();
        assert_eq!((y.bands(), y.height(), y.width()), (2, 2, 2));
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!(degrade_spatial(&c, &SpatialDegradation::new(3).unwrap()).is_err());

        let mut delta = vec![0.0; 49];
        delta[3 * 7 + 3] = 1.0;
        let d = HsiCube::new(1, 7, 7, delta).unwrap();
        let deg = SpatialDegradation::new(1).unwrap();
        let out = degrade_spatial(&d, &deg).unwrap();
        for ky in 0..3 {
            for kx in 0..3 {
                assert!((out.get(0, 2 + ky, 2 + kx) - deg.kernel[ky * 3 + kx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let train: Vec<u64> = (0..200).map(|i| patch_seed(42, Split::Train, i)).collect();
        let val: Vec<u64> = (0..200).map(|i| patch_seed(42, Split::Val, i)).collect();
        assert!(train.iter().all(|s| !val.contains(s)));
    }
}
