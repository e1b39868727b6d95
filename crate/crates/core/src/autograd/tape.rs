use std::sync::Arc;

use super::gemm::{gemm, gemm_strided, Layout, View};
use super::resample::{Interpolation, UpsamplePlan};
use super::tensor::{numel, Tensor};
use crate::bspline::{basis_row_into, KnotVector};
use crate::error::{Error, Result};
use crate::parallel;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SAMPLE_CHUNK: usize = 256;

enum Op {
    Leaf,
    /// `a[m x k] * b[k x n]`
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a[m x k] * b[n x k]^T`
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, bias: Option<Var> },
    Silu(Var),
    Relu(Var),
    Abs(Var),
    GlobalAvgPool(Var),
    Upsample { x: Var, plan: Arc<UpsamplePlan> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulChannel { x: Var, s: Var },
    /// `margin`: distance from the inputs to the nearest point where the
    /// basis is not continuously differentiable.
    SplineBasis { x: Var, derivs: Vec<f64>, margin: f64 },
    /// `margin`: smallest `|phi|` over all samples and edges.
    EdgeL1 { act: Var, basis: Var, base: Var, spline: Var, signs: Vec<i8>, margin: f64 },
    Sum(Var),
    Mean(Var),
    Entropy(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Conv2d { .. } => "conv2d",
            Op::Silu(_) => "silu",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulChannel { .. } => "mul_channel",
            Op::SplineBasis { .. } => "spline_basis",
            Op::EdgeL1 { .. } => "edge_l1",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Entropy(_) => "entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("shape recorded"))
    }
}

/// Linear record of executed operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the "already differentiated" flag so `backward` may run again.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// First node (in execution order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Error> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| Error::NonFinite {
                op: n.op.name(),
                node: i,
            })
        })
    }

    /// Distance from the recorded graph to its nearest non-differentiable
    /// point: the smallest argument of any `abs`, `relu` or edge-norm
    /// absolute value, or the smallest distance of a spline input to a
    /// clamp boundary (or knot, for order <= 1). Finite-difference checks
    /// are only meaningful when perturbations stay below this.
    pub fn kink_margin(&self) -> f64 {
        let min_abs = |v: Var| self.value(v).data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.nodes
            .iter()
            .map(|n| match &n.op {
                &Op::Abs(x) | &Op::Relu(x) => min_abs(x),
                Op::SplineBasis { margin, .. } | Op::EdgeL1 { margin, .. } => *margin,
                _ => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", "[m, n] x [n, p]", (sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a * b^T` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", "[m, k] x [n, k]", (sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Transposed, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[1] {
            return Err(Error::shape("conv2d", "x [B, Cin, H, W], w [Cout, Cin, 3, 3]", (sx, sw)));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape("conv2d bias", [cout], self.shape(bv)));
            }
        }
        let hw = h * wd;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bdat = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; b * cout * hw];
        parallel::for_each_chunk_mut(&mut out, cout * hw, |bi, dst| {
            let cols = im2col(&xd[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd);
            if let Some(bd) = bdat {
                for (co, row) in dst.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = bd[co]);
                }
            }
            let beta = if bdat.is_some() { 1.0 } else { 0.0 };
            gemm(cout, cin * 9, hw, wdat, Layout::Normal, &cols, Layout::Normal, beta, dst);
        });
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(Tensor::new([b, cout, h, wd], out)?, Op::Conv2d { x, w, bias }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", "[B, C, H, W]", s));
        }
        let hw = s[2] * s[3];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([s[0], s[1]], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// `[B, C, h, w] -> [B, C, s*h, s*w]`.
    pub fn upsample(&mut self, x: Var, scale: usize, kind: Interpolation) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample", "[B, C, h, w]", s));
        }
        if scale == 0 {
            return Err(Error::config("upsampling scale must be positive"));
        }
        let plan = Arc::new(UpsamplePlan::new(s[2], s[3], scale, kind));
        let out = plan.forward(self.value(x).data(), s[0] * s[1]);
        let shape = [s[0], s[1], s[2] * scale, s[3] * scale];
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample { x, plan }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("a permutation of 0..{}", s.len()), axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let out = permute_data(self.value(x).data(), &s, axes);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis < {}", first.len()), axis));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|a| a * factor);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// `x[b, c, h, w] * s[b, c]`, the only broadcast the engine supports.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x);
        let ss = self.shape(s);
        if sx.len() != 4 || ss != [sx[0], sx[1]] {
            return Err(Error::shape("mul_channel", [sx.first().copied(), sx.get(1).copied()], ss));
        }
        let hw = sx[2] * sx[3];
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(c, &k)| c.iter().map(move |v| v * k))
            .collect();
        let v = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::MulChannel { x, s }, rg))
    }

    /// Expands `x: [N, n]` into B-spline basis rows `[N, n * (G + k)]`;
    /// inputs are clamped into the spline domain.
    pub fn spline_basis(&mut self, x: Var, knots: &KnotVector) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("spline_basis", "[N, n]", s));
        }
        let nb = knots.num_basis();
        let xd = self.value(x).data();
        let rg = self.rg(x);
        let width = s[1] * nb;
        let mut vals = vec![0.0; s[0] * width];
        let mut ders = if rg { vec![0.0; s[0] * width] } else { Vec::new() };
        let chunk = SAMPLE_CHUNK * width;
        if rg {
            let mut pairs: Vec<(&mut [f64], &mut [f64])> =
                vals.chunks_mut(chunk).zip(ders.chunks_mut(chunk)).collect();
            parallel::for_each_chunk_mut(&mut pairs, 1, |ci, p| {
                let (v, d) = &mut p[0];
                let base = ci * SAMPLE_CHUNK * s[1];
                for (j, (vr, dr)) in v.chunks_mut(nb).zip(d.chunks_mut(nb)).enumerate() {
                    basis_row_into(xd[base + j], knots, vr, Some(dr));
                }
            });
        } else {
            parallel::for_each_chunk_mut(&mut vals, chunk, |ci, v| {
                let base = ci * SAMPLE_CHUNK * s[1];
                for (j, vr) in v.chunks_mut(nb).enumerate() {
                    basis_row_into(xd[base + j], knots, vr, None);
                }
            });
        }
        let (lo, hi) = knots.domain();
        let margin = xd
            .iter()
            .map(|&v| {
                let ends = (v - lo).abs().min((v - hi).abs());
                if knots.order() <= 1 {
                    let g = knots.grid_size() as f64;
                    let u = (v - lo) / (hi - lo) * g;
                    ends.min((u - u.round()).abs() * (hi - lo) / g)
                } else {
                    ends
                }
            })
            .fold(f64::INFINITY, f64::min);
        Ok(self.push(
            Tensor::new([s[0], width], vals)?,
            Op::SplineBasis { x, derivs: ders, margin },
            rg,
        ))
    }

    /// Mean absolute edge activation of a KAN layer over its `N` samples.
    ///
    /// `act: [N, n_in]` is `SiLU(x)`, `basis: [N, n_in * nb]` the spline
    /// rows, `base: [n_out, n_in]`, `spline: [n_out, n_in, nb]`. The result is
    /// `[n_out, n_in]` with entry `(j, i)` equal to
    /// `mean_s |base[j,i] * act[s,i] + sum_m spline[j,i,m] * basis[s,i,m]|`.
    pub fn edge_l1(&mut self, act: Var, basis: Var, base: Var, spline: Var) -> Result<Var> {
        let sa = self.shape(act).to_vec();
        let sw = self.shape(spline).to_vec();
        if sa.len() != 2 || sw.len() != 3 || self.shape(base) != [sw[0], sw[1]] || sw[1] != sa[1] {
            return Err(Error::shape("edge_l1", "act [N, n_in], base [n_out, n_in], spline [n_out, n_in, nb]", (sa, sw)));
        }
        let (n, n_in, n_out, nb) = (sa[0], sa[1], sw[0], sw[2]);
        if self.shape(basis) != [n, n_in * nb] {
            return Err(Error::shape("edge_l1 basis", [n, n_in * nb], self.shape(basis)));
        }
        let (ad, bd) = (self.value(act).data(), self.value(basis).data());
        let (wb, ws) = (self.value(base).data(), self.value(spline).data());
        let edges = n_out * n_in;
        let wbt = transpose(n_out, n_in, wb);
        // Signs are kept sample-major with outputs innermost: `[N, n_in, n_out]`.
        let mut signs = vec![0i8; n * edges];
        let mut sums: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), f64::INFINITY); n.div_ceil(SAMPLE_CHUNK)];
        {
            let mut work: Vec<_> = signs.chunks_mut(SAMPLE_CHUNK * edges).zip(sums.iter_mut()).collect();
            parallel::for_each_chunk_mut(&mut work, 1, |ci, w| {
                let (sg, slot) = &mut w[0];
                let (acc, margin) = &mut **slot;
                let s0 = ci * SAMPLE_CHUNK;
                let rows = sg.len() / edges;
                acc.resize(edges, 0.0);
                let mut phi = vec![0.0; rows * n_out];
                for i in 0..n_in {
                    // Spline part of every (sample, output) pair for input i.
                    let a = View { data: bd, off: s0 * n_in * nb + i * nb, rs: n_in * nb, cs: 1 };
                    let b = View { data: ws, off: i * nb, rs: 1, cs: n_in * nb };
                    gemm_strided(rows, nb, n_out, a, b, 0.0, &mut phi, 0, n_out, 1);
                    let wrow = &wbt[i * n_out..(i + 1) * n_out];
                    let arow = &mut acc[i * n_out..(i + 1) * n_out];
                    for r in 0..rows {
                        let x = ad[(s0 + r) * n_in + i];
                        let prow = &phi[r * n_out..(r + 1) * n_out];
                        let srow = &mut sg[(r * n_in + i) * n_out..(r * n_in + i + 1) * n_out];
                        for j in 0..n_out {
                            let v = prow[j] + wrow[j] * x;
                            arow[j] += v.abs();
                            *margin = margin.min(v.abs());
                            srow[j] = if v > 0.0 {
                                1
                            } else if v < 0.0 {
                                -1
                            } else {
                                0
                            };
                        }
                    }
                }
            });
        }
        let mut total = vec![0.0; edges];
        let mut margin = f64::INFINITY;
        for (p, m) in &sums {
            add_into(&mut total, p);
            margin = margin.min(*m);
        }
        let inv = 1.0 / n as f64;
        let norms: Vec<f64> = transpose(n_in, n_out, &total).into_iter().map(|v| v * inv).collect();
        let rg = self.rg(act) || self.rg(basis) || self.rg(base) || self.rg(spline);
        Ok(self.push(
            Tensor::new([n_out, n_in], norms)?,
            Op::EdgeL1 { act, basis, base, spline, signs, margin },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Shannon entropy (natural log) of the distribution `x / sum(x)` for a
    /// non-negative `x`; zero when `sum(x) == 0`, with `0 log 0 = 0`.
    pub fn entropy(&mut self, x: Var) -> Var {
        let s = entropy_value(self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Entropy(x), rg)
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("tape already differentiated; call reset() first"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        if !self.rg(loss) {
            return Err(Error::Backward("loss does not depend on any tensor that requires grad"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let want = |v: Var| nodes[v.0].requires_grad;
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !want(v) {
                return None;
            }
            let len = nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            Some(v.0)
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ai) = acc(a, grads) {
                    let ga = grads[ai].as_mut().unwrap();
                    gemm(m, n, k, g, Layout::Normal, val(b), Layout::Transposed, 1.0, ga);
                }
                if let Some(bi) = acc(b, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    gemm(k, m, n, val(a), Layout::Transposed, g, Layout::Normal, 1.0, gb);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if let Some(ai) = acc(a, grads) {
                    let ga = grads[ai].as_mut().unwrap();
                    gemm(m, n, k, g, Layout::Normal, val(b), Layout::Normal, 1.0, ga);
                }
                if let Some(bi) = acc(b, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    gemm(n, m, k, g, Layout::Transposed, val(a), Layout::Normal, 1.0, gb);
                }
            }
            &Op::Conv2d { x, w, bias } => {
                let sx = nodes[x.0].value.shape();
                let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let cout = nodes[w.0].value.shape()[0];
                let hw = h * wd;
                if let Some(bv) = bias {
                    if let Some(bi) = acc(bv, grads) {
                        let gb = grads[bi].as_mut().unwrap();
                        for (plane, gv) in g.chunks(hw).enumerate() {
                            gb[plane % cout] += gv.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(wi) = acc(w, grads) {
                    let gw = grads[wi].as_mut().unwrap();
                    let xd = val(x);
                    for bi in 0..bsz {
                        let cols = im2col(&xd[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd);
                        let gout = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        gemm(cout, hw, cin * 9, gout, Layout::Normal, &cols, Layout::Transposed, 1.0, gw);
                    }
                }
                if let Some(xi) = acc(x, grads) {
                    let wdat = val(w);
                    let gx = grads[xi].as_mut().unwrap();
                    parallel::for_each_chunk_mut(gx, cin * hw, |bi, dst| {
                        let gout = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        let mut cols = vec![0.0; cin * 9 * hw];
                        gemm(cin * 9, cout, hw, wdat, Layout::Transposed, gout, Layout::Normal, 0.0, &mut cols);
                        col2im_add(&cols, cin, h, wd, dst);
                    });
                }
            }
            &Op::Silu(x) => {
                if let Some(xi) = acc(x, grads) {
                    let xv = val(x);
                    let gx = grads[xi].as_mut().unwrap();
                    for ((d, &a), &gv) in gx.iter_mut().zip(xv).zip(g) {
                        let s = sigmoid(a);
                        *d += gv * (s + a * s * (1.0 - s));
                    }
                }
            }
            &Op::Relu(x) => {
                if let Some(xi) = acc(x, grads) {
                    let xv = val(x);
                    let gx = grads[xi].as_mut().unwrap();
                    for ((d, &a), &gv) in gx.iter_mut().zip(xv).zip(g) {
                        if a > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Abs(x) => {
                if let Some(xi) = acc(x, grads) {
                    let xv = val(x);
                    let gx = grads[xi].as_mut().unwrap();
                    for ((d, &a), &gv) in gx.iter_mut().zip(xv).zip(g) {
                        if a > 0.0 {
                            *d += gv;
                        } else if a < 0.0 {
                            *d -= gv;
                        }
                    }
                }
            }
            &Op::GlobalAvgPool(x) => {
                if let Some(xi) = acc(x, grads) {
                    let s = nodes[x.0].value.shape();
                    let hw = s[2] * s[3];
                    let gx = grads[xi].as_mut().unwrap();
                    for (plane, &gv) in gx.chunks_mut(hw).zip(g) {
                        let share = gv / hw as f64;
                        plane.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::Upsample { x, plan } => {
                if let Some(xi) = acc(*x, grads) {
                    let s = nodes[x.0].value.shape();
                    let back = plan.backward(g, s[0] * s[1]);
                    add_into(grads[xi].as_mut().unwrap(), &back);
                }
            }
            &Op::Reshape(x) => {
                if let Some(xi) = acc(x, grads) {
                    add_into(grads[xi].as_mut().unwrap(), g);
                }
            }
            Op::Permute { x, axes } => {
                if let Some(xi) = acc(*x, grads) {
                    let out_shape = nodes[idx].value.shape();
                    let mut inverse = vec![0; axes.len()];
                    for (d, &a) in axes.iter().enumerate() {
                        inverse[a] = d;
                    }
                    let back = permute_data(g, out_shape, &inverse);
                    add_into(grads[xi].as_mut().unwrap(), &back);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[idx].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(pi) = acc(p, grads) {
                        let gp = grads[pi].as_mut().unwrap();
                        for o in 0..outer {
                            add_into(&mut gp[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(vi) = acc(v, grads) {
                        add_into(grads[vi].as_mut().unwrap(), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ai) = acc(a, grads) {
                    add_into(grads[ai].as_mut().unwrap(), g);
                }
                if let Some(bi) = acc(b, grads) {
                    grads[bi].as_mut().unwrap().iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if let Some(vi) = acc(v, grads) {
                        let o = val(other);
                        let gv = grads[vi].as_mut().unwrap();
                        for ((d, &gg), &ov) in gv.iter_mut().zip(g).zip(o) {
                            *d += gg * ov;
                        }
                    }
                }
            }
            &Op::Scale(x, f) => {
                if let Some(xi) = acc(x, grads) {
                    grads[xi].as_mut().unwrap().iter_mut().zip(g).for_each(|(d, v)| *d += f * v);
                }
            }
            &Op::MulChannel { x, s } => {
                let sx = nodes[x.0].value.shape();
                let hw = sx[2] * sx[3];
                if let Some(xi) = acc(x, grads) {
                    let sv = val(s);
                    let gx = grads[xi].as_mut().unwrap();
                    for ((dp, gp), &k) in gx.chunks_mut(hw).zip(g.chunks(hw)).zip(sv) {
                        dp.iter_mut().zip(gp).for_each(|(d, v)| *d += k * v);
                    }
                }
                if let Some(si) = acc(s, grads) {
                    let xv = val(x);
                    let gs = grads[si].as_mut().unwrap();
                    for ((d, gp), xp) in gs.iter_mut().zip(g.chunks(hw)).zip(xv.chunks(hw)) {
                        *d += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SplineBasis { x, derivs, .. } => {
                if let Some(xi) = acc(*x, grads) {
                    let n_cols = nodes[x.0].value.shape()[1];
                    let nb = g.len() / nodes[x.0].value.len();
                    let _ = n_cols;
                    let gx = grads[xi].as_mut().unwrap();
                    for ((d, gr), dr) in gx.iter_mut().zip(g.chunks(nb)).zip(derivs.chunks(nb)) {
                        *d += gr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::EdgeL1 { act, basis, base, spline, signs, .. } => {
                self.edge_l1_backward(g, *act, *basis, *base, *spline, signs, grads);
            }
            &Op::Sum(x) => {
                if let Some(xi) = acc(x, grads) {
                    grads[xi].as_mut().unwrap().iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(xi) = acc(x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    let share = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += share);
                }
            }
            &Op::Entropy(x) => {
                if let Some(xi) = acc(x, grads) {
                    let xv = val(x);
                    let total: f64 = xv.iter().sum();
                    if total > 0.0 {
                        let s = nodes[idx].value.item();
                        let gx = grads[xi].as_mut().unwrap();
                        for (d, &a) in gx.iter_mut().zip(xv) {
                            // dS/da_e = -(ln p_e + S) / T; zero entries get the
                            // zero subgradient.
                            if a > 0.0 {
                                *d += g[0] * (-(a / total).ln() - s) / total;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn edge_l1_backward(
        &self,
        g: &[f64],
        act: Var,
        basis: Var,
        base: Var,
        spline: Var,
        signs: &[i8],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let sa = nodes[act.0].value.shape();
        let sw = nodes[spline.0].value.shape();
        let (n, n_in, n_out, nb) = (sa[0], sa[1], sw[0], sw[2]);
        let edges = n_out * n_in;
        let ad = nodes[act.0].value.data();
        let bd = nodes[basis.0].value.data();
        let wbt = transpose(n_out, n_in, nodes[base.0].value.data());
        let ws = nodes[spline.0].value.data();
        let inv = 1.0 / n as f64;
        let coef: Vec<f64> = transpose(n_out, n_in, g).into_iter().map(|v| v * inv).collect();

        let want_w = nodes[base.0].requires_grad || nodes[spline.0].requires_grad;
        let want_act = nodes[act.0].requires_grad;
        let want_basis = nodes[basis.0].requires_grad;
        let chunks = n.div_ceil(SAMPLE_CHUNK);

        // Per-chunk partial weight gradients plus per-sample input gradients.
        struct Part {
            gbase_t: Vec<f64>,
            gspline: Vec<f64>,
            gact: Vec<f64>,
            gbasis: Vec<f64>,
        }
        let parts: Vec<Part> = parallel::map_range(chunks, |ci| {
            let s0 = ci * SAMPLE_CHUNK;
            let rows = (s0 + SAMPLE_CHUNK).min(n) - s0;
            // d loss / d phi for every (sample, input, output).
            let c: Vec<f64> = signs[s0 * edges..(s0 + rows) * edges]
                .chunks(edges)
                .flat_map(|srow| srow.iter().zip(&coef).map(|(&sg, &k)| f64::from(sg) * k))
                .collect();
            let mut p = Part {
                gbase_t: Vec::new(),
                gspline: Vec::new(),
                gact: Vec::new(),
                gbasis: Vec::new(),
            };
            if want_w {
                p.gbase_t = vec![0.0; edges];
                p.gspline = vec![0.0; edges * nb];
                for r in 0..rows {
                    let crow = &c[r * edges..(r + 1) * edges];
                    for i in 0..n_in {
                        let x = ad[(s0 + r) * n_in + i];
                        let dst = &mut p.gbase_t[i * n_out..(i + 1) * n_out];
                        for (d, &cv) in dst.iter_mut().zip(&crow[i * n_out..(i + 1) * n_out]) {
                            *d += cv * x;
                        }
                    }
                }
                for i in 0..n_in {
                    let a = View { data: &c, off: i * n_out, rs: 1, cs: edges };
                    let b = View { data: bd, off: s0 * n_in * nb + i * nb, rs: n_in * nb, cs: 1 };
                    gemm_strided(n_out, rows, nb, a, b, 1.0, &mut p.gspline, i * nb, n_in * nb, 1);
                }
            }
            if want_act {
                p.gact = (0..rows * n_in)
                    .map(|ri| {
                        let i = ri % n_in;
                        let cv = &c[ri * n_out..(ri + 1) * n_out];
                        cv.iter().zip(&wbt[i * n_out..(i + 1) * n_out]).map(|(a, b)| a * b).sum()
                    })
                    .collect();
            }
            if want_basis {
                p.gbasis = vec![0.0; rows * n_in * nb];
                for i in 0..n_in {
                    let a = View { data: &c, off: i * n_out, rs: edges, cs: 1 };
                    let b = View { data: ws, off: i * nb, rs: n_in * nb, cs: 1 };
                    gemm_strided(rows, n_out, nb, a, b, 0.0, &mut p.gbasis, i * nb, n_in * nb, 1);
                }
            }
            p
        });

        if nodes[base.0].requires_grad {
            let mut sum_t = vec![0.0; edges];
            for p in &parts {
                add_into(&mut sum_t, &p.gbase_t);
            }
            let gb = grads[base.0].get_or_insert_with(|| vec![0.0; edges]);
            add_into(gb, &transpose(n_in, n_out, &sum_t));
        }
        if nodes[spline.0].requires_grad {
            let gs = grads[spline.0].get_or_insert_with(|| vec![0.0; edges * nb]);
            for p in &parts {
                add_into(gs, &p.gspline);
            }
        }
        if want_act {
            let ga = grads[act.0].get_or_insert_with(|| vec![0.0; n * n_in]);
            for (ci, p) in parts.iter().enumerate() {
                let off = ci * SAMPLE_CHUNK * n_in;
                add_into(&mut ga[off..off + p.gact.len()], &p.gact);
            }
        }
        if want_basis {
            let gbs = grads[basis.0].get_or_insert_with(|| vec![0.0; n * n_in * nb]);
            for (ci, p) in parts.iter().enumerate() {
                let off = ci * SAMPLE_CHUNK * n_in * nb;
                add_into(&mut gbs[off..off + p.gbasis.len()], &p.gbasis);
            }
        }
    }
}

/// Row-major `rows x cols` to `cols x rows`.
fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Index range `[lo, hi)` of the nonzero entries of a basis row.
pub(crate) fn entropy_value(x: &[f64]) -> f64 {
    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -x.iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            let p = a / total;
            p * p.ln()
        })
        .sum::<f64>()
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// `[Cin, H, W] -> [Cin * 9, H * W]` patch matrix for a padded 3x3 window.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], cin: usize, h: usize, w: usize, dst: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dst[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let tgt = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => add_into(&mut tgt[..w - 1], &src[1..]),
                        1 => add_into(tgt, src),
                        _ => add_into(&mut tgt[1..], &src[..w - 1]),
                    }
                }
            }
        }
    }
}
