//! The full network: KAN fusion, stacked KAN channel-attention blocks and
//! the convolutional restructure head with an upsampled-input skip.
//!
//! ```text
//! X [B,c,H,W] --fold--> KAN(c->D) --\
//!                                     concat -> KAN(2D->D) -> unfold -> O_0
//! Y [B,C,h,w] --UP--fold--> KAN(C->D) /
//! O_i+1 = O_i * KAN(KAN(GAP(O_i))) + O_i          (L blocks)
//! Z_hat = Conv(ReLU(Conv(O_L))) + UP(Y)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Interpolation, Tape, Tensor, Var};
use crate::bspline::SplineConfig;
use crate::error::{Error, Result};
use crate::kan::{ActivationStats, KanLayer, KanOutput, KanVars};

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hyperspectral band count `C`.
    pub hsi_bands: usize,
    /// Multispectral band count `c`.
    pub msi_bands: usize,
    /// Hidden width `D`.
    pub hidden: usize,
    /// Number of channel-attention blocks `L`.
    pub blocks: usize,
    pub scale: usize,
    #[serde(default)]
    pub spline: SplineConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub upsample: Interpolation,
    /// `false` replaces each attention block by two per-pixel KAN layers
    /// (the "without CAB" ablation, same parameter count).
    #[serde(default = "default_true")]
    pub channel_attention: bool,
}

impl ModelConfig {
    /// Full-size configuration: 31 bands, RGB guide, D = 256, L = 4, x4.
    pub fn full() -> Self {
        Self {
            hsi_bands: 31,
            msi_bands: 3,
            hidden: 256,
            blocks: 4,
            scale: 4,
            spline: SplineConfig::default(),
            seed: 0,
            upsample: Interpolation::Bicubic,
            channel_attention: true,
        }
    }

    /// Desk-scale default used by the tests: D = 32, L = 2.
    pub fn desk() -> Self {
        Self {
            hidden: 32,
            blocks: 2,
            ..Self::full()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn toy() -> Self {
        Self {
            hsi_bands: 7,
            msi_bands: 3,
            hidden: 8,
            blocks: 2,
            scale: 2,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.msi_bands == 0 || self.hsi_bands <= self.msi_bands {
            return Err(Error::config(format!(
                "need C > c >= 1, got C = {}, c = {}",
                self.hsi_bands, self.msi_bands
            )));
        }
        if self.hidden == 0 || self.blocks == 0 {
            return Err(Error::config("hidden width and block count must be positive"));
        }
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::config(format!("scale must be 2, 4 or 8, got {}", self.scale)));
        }
        self.spline.validate()
    }
}

/// 3x3 convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    /// `[Cout, Cin, 3, 3]`
    pub weight: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
}

impl Conv3x3 {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound);
        Self {
            weight: Tensor::from_fn([cout, cin, 3, 3], |_| uni.sample(rng)),
            bias: Tensor::from_fn([cout], |_| uni.sample(rng)),
        }
    }

    fn num_params(cin: usize, cout: usize) -> usize {
        cout * cin * 9 + cout
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Two KAN layers `D -> D`: the score network of an attention block, or the
/// per-pixel stack of the ablation variant.
#[derive(Clone, Debug)]
pub struct KanBlock {
    pub first: KanLayer,
    pub second: KanLayer,
}

#[derive(Clone, Debug)]
pub struct HsrKanModel {
    config: ModelConfig,
    pub fusion_msi: KanLayer,
    pub fusion_hsi: KanLayer,
    pub fusion_align: KanLayer,
    pub blocks: Vec<KanBlock>,
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

/// Tape handles for all parameters, in [`HsrKanModel::named_parameters`]
/// order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub fusion: [KanVars; 3],
    pub blocks: Vec<[KanVars; 2]>,
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for k in self.fusion.iter().chain(self.blocks.iter().flatten()) {
            v.push(k.base);
            v.push(k.spline);
        }
        v.extend([self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias]);
        v
    }
}

/// Edge statistics of one KAN layer recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerNorms {
    pub layer: String,
    pub norms: Var,
    pub n_samples: usize,
}

/// Everything a training step needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: Var,
    pub params: ModelVars,
    /// Empty unless statistics were requested.
    pub edge_norms: Vec<LayerNorms>,
}

/// Parameter breakdown for a configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub modules: Vec<(String, usize)>,
    /// Number of KAN edges over all KAN layers.
    pub kan_edges: usize,
    /// Parameters added per unit increase of the grid size `G`.
    pub per_grid_unit: usize,
    /// Parameters added per unit increase of the spline order `k`.
    pub per_order_unit: usize,
    /// Multiply-adds of one forward pass at the reported patch size.
    pub forward_macs: u64,
    pub patch: [usize; 2],
}

impl HsrKanModel {
    /// Randomly initialised model, seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, cc, d, sp) = (config.msi_bands, config.hsi_bands, config.hidden, config.spline);
        let fusion_msi = KanLayer::new(c, d, sp, &mut rng)?;
        let fusion_hsi = KanLayer::new(cc, d, sp, &mut rng)?;
        let fusion_align = KanLayer::new(2 * d, d, sp, &mut rng)?;
        let blocks = (0..config.blocks)
            .map(|_| {
                Ok(KanBlock {
                    first: KanLayer::new(d, d, sp, &mut rng)?,
                    second: KanLayer::new(d, d, sp, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let conv1 = Conv3x3::new(d, d, &mut rng);
        let conv2 = Conv3x3::new(d, cc, &mut rng);
        Ok(Self {
            config,
            fusion_msi,
            fusion_hsi,
            fusion_align,
            blocks,
            conv1,
            conv2,
        })
    }

    /// Same architecture with every learned weight set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        for p in m.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kan_layers(&self) -> Vec<(String, &KanLayer)> {
        let mut v = vec![
            ("fusion.msi".to_string(), &self.fusion_msi),
            ("fusion.hsi".to_string(), &self.fusion_hsi),
            ("fusion.align".to_string(), &self.fusion_align),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.kan1"), &b.first));
            v.push((format!("block{i}.kan2"), &b.second));
        }
        v
    }

    fn kan_layers_mut(&mut self) -> Vec<&mut KanLayer> {
        let mut v = vec![&mut self.fusion_msi, &mut self.fusion_hsi, &mut self.fusion_align];
        for b in &mut self.blocks {
            v.push(&mut b.first);
            v.push(&mut b.second);
        }
        v
    }

    /// All parameter tensors in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (name, layer) in self.kan_layers() {
            v.push((format!("{name}.base"), &layer.base_weight));
            v.push((format!("{name}.spline"), &layer.spline_weight));
        }
        v.push(("conv1.weight".into(), &self.conv1.weight));
        v.push(("conv1.bias".into(), &self.conv1.bias));
        v.push(("conv2.weight".into(), &self.conv2.weight));
        v.push(("conv2.bias".into(), &self.conv2.bias));
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            fusion_msi,
            fusion_hsi,
            fusion_align,
            blocks,
            conv1,
            conv2,
            ..
        } = self;
        let mut layers = vec![fusion_msi, fusion_hsi, fusion_align];
        for b in blocks.iter_mut() {
            layers.push(&mut b.first);
            layers.push(&mut b.second);
        }
        let mut v = Vec::new();
        for layer in layers {
            v.push(&mut layer.base_weight);
            v.push(&mut layer.spline_weight);
        }
        v.extend([&mut conv1.weight, &mut conv1.bias, &mut conv2.weight, &mut conv2.bias]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Stores per-layer statistics (in [`kan_layers`](Self::kan_layers)
    /// order) read from a forward pass.
    pub fn record_stats(&mut self, tape: &Tape, pass: &ForwardPass) {
        let stats: Vec<Option<ActivationStats>> = pass
            .edge_norms
            .iter()
            .map(|l| {
                Some(ActivationStats {
                    edge_norms: tape.value(l.norms).clone(),
                    n_samples: l.n_samples,
                })
            })
            .collect();
        for (layer, st) in self.kan_layers_mut().into_iter().zip(stats) {
            layer.set_stats(st);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let fusion = [
            self.fusion_msi.bind(tape),
            self.fusion_hsi.bind(tape),
            self.fusion_align.bind(tape),
        ];
        let blocks = self
            .blocks
            .iter()
            .map(|b| [b.first.bind(tape), b.second.bind(tape)])
            .collect();
        let conv = |tape: &mut Tape, c: &Conv3x3| ConvVars {
            weight: tape.param(c.weight.clone()),
            bias: tape.param(c.bias.clone()),
        };
        ModelVars {
            fusion,
            blocks,
            conv1: conv(tape, &self.conv1),
            conv2: conv(tape, &self.conv2),
        }
    }

    fn check_inputs(&self, tape: &Tape, x: Var, y: Var) -> Result<()> {
        let (sx, sy) = (tape.shape(x), tape.shape(y));
        let cfg = &self.config;
        if sx.len() != 4 || sx[1] != cfg.msi_bands {
            return Err(Error::shape("forward X", format!("[B, {}, H, W]", cfg.msi_bands), sx));
        }
        if sy.len() != 4 || sy[1] != cfg.hsi_bands || sy[0] != sx[0] {
            return Err(Error::shape("forward Y", format!("[{}, {}, h, w]", sx[0], cfg.hsi_bands), sy));
        }
        if sx[2] != cfg.scale * sy[2] || sx[3] != cfg.scale * sy[3] {
            return Err(Error::shape(
                "forward (scale)",
                format!("X spatial = {} x Y spatial", cfg.scale),
                (sx, sy),
            ));
        }
        Ok(())
    }

    /// Upsampled hyperspectral input `UP(Y)`.
    pub fn upsample_input(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        tape.upsample(y, self.config.scale, self.config.upsample)
    }

    /// Fusion of `X` and `UP(Y)` into a `[B, D, H, W]` feature map.
    pub fn kan_fusion(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        up_y: Var,
        stats: &mut Option<&mut Vec<LayerNorms>>,
    ) -> Result<Var> {
        let sx = tape.shape(x).to_vec();
        let su = tape.shape(up_y).to_vec();
        if sx.len() != 4 || su.len() != 4 || sx[0] != su[0] || sx[2..] != su[2..] {
            return Err(Error::shape("kan_fusion", &sx, &su));
        }
        let collect = stats.is_some();
        let x0 = fold(tape, x)?;
        let y0 = fold(tape, up_y)?;
        let fx = self.fusion_msi.forward(tape, vars.fusion[0], x0, collect)?;
        let fy = self.fusion_hsi.forward(tape, vars.fusion[1], y0, collect)?;
        let cat = tape.concat(&[fx.out, fy.out], 1)?;
        let fa = self.fusion_align.forward(tape, vars.fusion[2], cat, collect)?;
        if let Some(s) = stats.as_deref_mut() {
            push_norms(s, "fusion.msi", &fx);
            push_norms(s, "fusion.hsi", &fy);
            push_norms(s, "fusion.align", &fa);
        }
        unfold(tape, fa.out, [sx[0], sx[2], sx[3]])
    }

    /// One channel-attention block: `x * KAN(KAN(GAP(x))) + x`.
    pub fn kan_cab(
        &self,
        tape: &mut Tape,
        block: usize,
        vars: &ModelVars,
        x: Var,
        stats: &mut Option<&mut Vec<LayerNorms>>,
    ) -> Result<Var> {
        let b = &self.blocks[block];
        let [v1, v2] = vars.blocks[block];
        let collect = stats.is_some();
        let sx = tape.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != b.first.n_in() {
            return Err(Error::shape("kan_cab", format!("[B, {}, H, W]", b.first.n_in()), sx));
        }
        let (o1, o2, out) = if self.config.channel_attention {
            let pooled = tape.global_avg_pool(x)?;
            let o1 = b.first.forward(tape, v1, pooled, collect)?;
            let o2 = b.second.forward(tape, v2, o1.out, collect)?;
            let scaled = tape.mul_channel(x, o2.out)?;
            let out = tape.add(scaled, x)?;
            (o1, o2, out)
        } else {
            let rows = fold(tape, x)?;
            let o1 = b.first.forward(tape, v1, rows, collect)?;
            let o2 = b.second.forward(tape, v2, o1.out, collect)?;
            let out = unfold(tape, o2.out, [sx[0], sx[2], sx[3]])?;
            (o1, o2, out)
        };
        if let Some(s) = stats.as_deref_mut() {
            push_norms(s, &format!("block{block}.kan1"), &o1);
            push_norms(s, &format!("block{block}.kan2"), &o2);
        }
        Ok(out)
    }

    /// `Conv(ReLU(Conv(o))) + UP(Y)`.
    pub fn restructure(&self, tape: &mut Tape, vars: &ModelVars, o: Var, up_y: Var) -> Result<Var> {
        let h = tape.conv2d(o, vars.conv1.weight, Some(vars.conv1.bias))?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, vars.conv2.weight, Some(vars.conv2.bias))?;
        tape.add(h, up_y)
    }

    /// Full forward map `(X, Y) -> Z_hat`.
    pub fn forward(&self, tape: &mut Tape, x: Var, y: Var, collect_stats: bool) -> Result<ForwardPass> {
        self.check_inputs(tape, x, y)?;
        let vars = self.bind(tape);
        let mut norms = Vec::new();
        let mut stats = collect_stats.then_some(&mut norms);
        let up_y = self.upsample_input(tape, y)?;
        let mut o = self.kan_fusion(tape, &vars, x, up_y, &mut stats)?;
        for i in 0..self.blocks.len() {
            o = self.kan_cab(tape, i, &vars, o, &mut stats)?;
        }
        let output = self.restructure(tape, &vars, o, up_y)?;
        Ok(ForwardPass {
            output,
            params: vars,
            edge_norms: norms,
        })
    }

    /// Inference on plain tensors `X: [B, c, H, W]`, `Y: [B, C, h, w]`.
    pub fn predict(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pass = self.forward(&mut tape, xv, yv, false)?;
        Ok(tape.value(pass.output).clone())
    }
}

fn push_norms(dst: &mut Vec<LayerNorms>, name: &str, o: &KanOutput) {
    if let Some(norms) = o.edge_norms {
        dst.push(LayerNorms {
            layer: name.to_string(),
            norms,
            n_samples: o.n_samples,
        });
    }
}

/// `[B, C, H, W] -> [B*H*W, C]`.
pub fn fold(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("fold", "[B, C, H, W]", s));
    }
    let p = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(p, &[s[0] * s[2] * s[3], s[1]])
}

/// `[B*H*W, C] -> [B, C, H, W]`.
pub fn unfold(tape: &mut Tape, rows: Var, [b, h, w]: [usize; 3]) -> Result<Var> {
    let s = tape.shape(rows).to_vec();
    if s.len() != 2 || s[0] != b * h * w {
        return Err(Error::shape("unfold", [b * h * w, 0], s));
    }
    let r = tape.reshape(rows, &[b, h, w, s[1]])?;
    tape.permute(r, &[0, 3, 1, 2])
}

/// Parameter count and forward cost for `cfg` at an `h x w` output patch.
pub fn param_count(cfg: &ModelConfig, patch: [usize; 2]) -> Result<ParamReport> {
    cfg.validate()?;
    let (c, cc, d, l) = (cfg.msi_bands, cfg.hsi_bands, cfg.hidden, cfg.blocks);
    let per_edge = 1 + cfg.spline.num_basis();
    let mut modules = vec![
        ("fusion.msi".to_string(), c * d * per_edge),
        ("fusion.hsi".to_string(), cc * d * per_edge),
        ("fusion.align".to_string(), 2 * d * d * per_edge),
    ];
    for i in 0..l {
        modules.push((format!("block{i}"), 2 * d * d * per_edge));
    }
    modules.push(("conv1".into(), Conv3x3::num_params(d, d)));
    modules.push(("conv2".into(), Conv3x3::num_params(d, cc)));
    let total = modules.iter().map(|m| m.1).sum();
    let kan_edges = c * d + cc * d + 2 * d * d + l * 2 * d * d;
    Ok(ParamReport {
        total,
        modules,
        kan_edges,
        per_grid_unit: kan_edges,
        per_order_unit: kan_edges,
        forward_macs: forward_macs(cfg, patch),
        patch,
    })
}

/// Multiply-add count of one forward pass for a single `h x w` patch.
///
/// Spline evaluation is charged honestly: the Cox-de Boor triangle costs
/// about `2 k (G + 2k)` multiply-adds per input value, and every edge pays
/// `1 + G + k` multiply-adds per sample.
fn forward_macs(cfg: &ModelConfig, [h, w]: [usize; 2]) -> u64 {
    let (g, k) = (cfg.spline.grid_size as u64, cfg.spline.order as u64);
    let nb = g + k;
    let px = (h * w) as u64;
    let kan = |rows: u64, n_in: u64, n_out: u64| rows * n_in * (n_out * (1 + nb) + 2 * k * (g + 2 * k) + 4);
    let (c, cc, d) = (cfg.msi_bands as u64, cfg.hsi_bands as u64, cfg.hidden as u64);
    let lr_px = px / (cfg.scale * cfg.scale) as u64;
    let mut macs = 16 * cc * px.max(lr_px);
    macs += kan(px, c, d) + kan(px, cc, d) + kan(px, 2 * d, d);
    for _ in 0..cfg.blocks {
        macs += if cfg.channel_attention {
            d * px + 2 * kan(1, d, d) + d * px
        } else {
            2 * kan(px, d, d)
        };
    }
    macs += px * 9 * d * d + px * d + px * 9 * d * cc + px * cc;
    macs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(cfg: &ModelConfig, b: usize, h: usize) -> (Tensor, Tensor) {
        let lh = h / cfg.scale;
        let x = Tensor::from_fn([b, cfg.msi_bands, h, h], |i| ((i * 31) % 17) as f64 / 17.0);
        let y = Tensor::from_fn([b, cfg.hsi_bands, lh, lh], |i| ((i * 13) % 11) as f64 / 11.0);
        (x, y)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::full().validate().is_ok());
        let bad = [
            ModelConfig { msi_bands: 31, ..ModelConfig::full() },
            ModelConfig { msi_bands: 0, ..ModelConfig::full() },
            ModelConfig { hidden: 0, ..ModelConfig::full() },
            ModelConfig { blocks: 0, ..ModelConfig::full() },
            ModelConfig { scale: 3, ..ModelConfig::full() },
        ];
        for cfg in bad {
            assert!(HsrKanModel::new(cfg).is_err());
        }
    }

    #[test]
    fn fusion_shape_contract() {
        let cfg = ModelConfig { hsi_bands: 31, msi_bands: 3, hidden: 8, blocks: 1, scale: 4, ..ModelConfig::toy() };
        let model = HsrKanModel::new(cfg.clone()).unwrap();
        let (x, y) = inputs(&cfg, 1, 8);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let up = model.upsample_input(&mut tape, yv).unwrap();
        let o = model.kan_fusion(&mut tape, &vars, xv, up, &mut None).unwrap();
        assert_eq!(tape.shape(o), &[1, 8, 8, 8]);
    }

    #[test]
    fn scale_mismatch_is_an_error() {
        let cfg = ModelConfig::toy();
        let model = HsrKanModel::new(cfg.clone()).unwrap();
        let x = Tensor::zeros([1, 3, 8, 8]);
        let y = Tensor::zeros([1, 7, 3, 3]);
        assert!(model.predict(&x, &y).is_err());
        let y = Tensor::zeros([1, 6, 4, 4]);
        assert!(model.predict(&x, &y).is_err());
    }

    #[test]
    fn zero_model_outputs_upsampled_input() {
        let cfg = ModelConfig::toy();
        let model = HsrKanModel::zeroed(cfg.clone()).unwrap();
        let (x, y) = inputs(&cfg, 2, 8);
        let z = model.predict(&x, &y).unwrap();
        let up = crate::autograd::upsample(&y, cfg.scale, cfg.upsample).unwrap();
        assert_eq!(z, up);
        assert_eq!(z.shape(), &[2, 7, 8, 8]);
    }

    #[test]
    fn forward_is_deterministic_and_reaches_every_parameter() {
        let cfg = ModelConfig { hidden: 8, ..ModelConfig::toy() };
        let model = HsrKanModel::new(cfg.clone()).unwrap();
        let (x, y) = inputs(&cfg, 1, 8);
        assert_eq!(model.predict(&x, &y).unwrap(), model.predict(&x, &y).unwrap());

        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let pass = model.forward(&mut tape, xv, yv, true).unwrap();
        assert_eq!(pass.edge_norms.len(), 3 + 2 * cfg.blocks);
        let loss = tape.sum(pass.output);
        let grads = tape.backward(loss).unwrap();
        for (v, (name, t)) in pass.params.all().iter().zip(model.named_parameters()) {
            let g = grads.get(*v).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert_eq!(g.len(), t.len());
        }
    }

    #[test]
    fn param_count_matches_model_and_grows_linearly() {
        for attention in [true, false] {
            let cfg = ModelConfig { channel_attention: attention, ..ModelConfig::toy() };
            let model = HsrKanModel::new(cfg.clone()).unwrap();
            let rep = param_count(&cfg, [8, 8]).unwrap();
            assert_eq!(rep.total, model.num_params());
        }
        let cfg = ModelConfig::toy();
        let base = param_count(&cfg, [8, 8]).unwrap();
        // 3*8 + 7*8 + 2*8*8 + 2 * 2*8*8 = 24 + 56 + 128 + 256 edges.
        assert_eq!(base.kan_edges, 464);
        let conv = (8 * 8 * 9 + 8) + (7 * 8 * 9 + 7);
        assert_eq!(base.total, 464 * 9 + conv);
        let mut g2 = cfg.clone();
        g2.spline.grid_size += 2;
        assert_eq!(param_count(&g2, [8, 8]).unwrap().total - base.total, 2 * 464);
        let mut k2 = cfg.clone();
        k2.spline.order += 2;
        assert_eq!(param_count(&k2, [8, 8]).unwrap().total - base.total, 2 * 464);
    }
}
