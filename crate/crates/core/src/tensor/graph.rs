//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is created per forward pass. Each primitive computes its value
//! eagerly and appends a node; [`Graph::backward`] walks the nodes in exact
//! reverse order, summing adjoints across fan-out. Parameters enter the graph
//! through [`Graph::param`], which binds each [`ParamId`] at most once so
//! shared weights receive one accumulated gradient. Frozen parameters enter as
//! constants and never receive an adjoint.
//!
//! The graph also keeps a per-scope count of arithmetic operations so that the
//! profiler can cross-check analytic cost formulas against what actually ran.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom, MatView};
use super::{split_axis, Element, Tensor};
use crate::error::{HstError, Result};
use crate::param::{ParamId, ParamStore};

/// Arithmetic cost conventions used by the op counter.
pub mod cost {
    pub const ELEMENTWISE: u64 = 1;
    pub const SOFTMAX: u64 = 5;
    pub const LAYER_NORM: u64 = 8;
    pub const GELU: u64 = 8;
    pub const BILINEAR: u64 = 8;
    pub const CROSS_ENTROPY: u64 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong adjoint rules, used to prove that gradient checks
/// detect a broken backward pass.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// GELU adjoint is scaled by one half.
    HalfGeluGradient,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddSuffix(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Bilinear {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    ExpandLeading {
        x: Var,
        n: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    finite: bool,
    op: Op<T>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
    scopes: Vec<&'static str>,
    flops: BTreeMap<&'static str, u64>,
    fault: Option<BackwardFault>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(HstError::Dimension(msg))
}

impl<T: Element> Graph<T> {
    /// A graph that records adjoint information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
            scopes: Vec::new(),
            flops: BTreeMap::new(),
            fault: None,
        }
    }

    /// A graph for evaluation only: nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by every value recorded on the tape.
    pub fn live_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.size_in_bytes()).sum()
    }

    /// Runs `f` with arithmetic attributed to `scope`.
    pub fn scoped<R>(&mut self, scope: &'static str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scopes.push(scope);
        let out = f(self);
        self.scopes.pop();
        out
    }

    /// Operation counts per scope; unscoped work is filed under `""`.
    pub fn flops_by_scope(&self) -> &BTreeMap<&'static str, u64> {
        &self.flops
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.values().sum()
    }

    fn count(&mut self, n: u64) {
        let scope = self.scopes.last().copied().unwrap_or("");
        *self.flops.entry(scope).or_insert(0) += n;
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let finite = if cfg!(debug_assertions) {
            let ok = value.is_finite();
            debug_assert!(
                ok || inputs.iter().any(|v| !self.nodes[v.0].finite),
                "non-finite output from finite inputs (node {})",
                self.nodes.len()
            );
            ok
        } else {
            true
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            finite,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let finite = !cfg!(debug_assertions) || value.is_finite();
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            finite,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A free variable that receives a gradient (used by tests and oracles).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value().clone(), p.trainable());
        self.bound.insert(id, v);
        v
    }

    /// Parameter gradients after `backward`, in id order. Frozen and
    /// unreachable parameters are absent.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ----- elementwise -------------------------------------------------

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.count(out.numel() as u64 * cost::ELEMENTWISE);
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.count(out.numel() as u64 * cost::ELEMENTWISE);
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.count(out.numel() as u64 * cost::ELEMENTWISE);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * s).collect()).expect("same shape");
        self.count(out.numel() as u64 * cost::ELEMENTWISE);
        self.push(out, &[a], Op::Scale(a, s))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s, broadcast over
    /// the leading axes (bias vectors, positional tables).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("add_suffix: {sb:?} is not a suffix of {sa:?}"));
        }
        let inner = self.value(b).numel();
        let x = self.value(a);
        let y = self.value(b).data();
        let mut data = x.data().to_vec();
        if inner > 0 {
            for chunk in data.chunks_mut(inner) {
                for (v, &w) in chunk.iter_mut().zip(y) {
                    *v += w;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.count(out.numel() as u64 * cost::ELEMENTWISE);
        Ok(self.push(out, &[a, b], Op::AddSuffix(a, b)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let half = T::cast(0.5);
        let inv_sqrt2 = T::cast(std::f64::consts::FRAC_1_SQRT_2);
        let data = x
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.count(out.numel() as u64 * cost::GELU);
        self.push(out, &[a], Op::Gelu(a))
    }

    // ----- linear algebra ----------------------------------------------

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]` (or `[..., k, m]` with `ta`); `b` is either a
    /// matrix shared across the batch or has `a`'s batch axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs matrices, got {sa:?} and {sb:?}"));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        let batch_dims = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sb[..sb.len() - 2] != *batch_dims) {
            return shape_err(format!(
                "matmul shape mismatch: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            ));
        }
        let batch: usize = batch_dims.iter().product();
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let xa = self.value(a).data();
            let xb = self.value(b).data();
            if shared_b && !ta {
                // fold the batch into the row dimension
                gemm_into(xa, batch * m, k, ta, xb, n, tb, &mut out, T::zero());
            } else {
                for i in 0..batch {
                    let a_i = &xa[i * m * k..(i + 1) * m * k];
                    let b_i = if shared_b { xb } else { &xb[i * k * n..(i + 1) * k * n] };
                    gemm_into(
                        a_i,
                        m,
                        k,
                        ta,
                        b_i,
                        n,
                        tb,
                        &mut out[i * m * n..(i + 1) * m * n],
                        T::zero(),
                    );
                }
            }
        }
        self.count(2 * (batch * m * n * k) as u64);
        let value = Tensor::new(out_shape, out).expect("matmul shape");
        Ok(self.push(
            value,
            &[a, b],
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        ))
    }

    /// `x W^T + b` with `W: [out, in]` applied to the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false, true)?;
        match b {
            Some(b) => self.add_suffix(y, b),
            None => Ok(y),
        }
    }

    // ----- normalisation -----------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * n * inner];
        kernels::softmax(self.value(x).data(), outer, n, inner, &mut out);
        self.count(out.len() as u64 * cost::SOFTMAX);
        let value = Tensor::new(shape, out).expect("softmax shape");
        Ok(self.push(value, &[x], Op::Softmax { x, axis }))
    }

    /// LayerNorm over the last axis with learnable `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if shape.is_empty() || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layer_norm: input {shape:?} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(HstError::config("layer_norm eps must be positive"));
        }
        let rows = if d == 0 { 0 } else { self.value(x).numel() / d };
        let eps = T::cast(eps);
        let inv_d = T::one() / T::cast(d as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.count(out.len() as u64 * cost::LAYER_NORM);
        let value = Tensor::new(shape, out).expect("layer_norm shape");
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ----- spatial -----------------------------------------------------

    /// 2-D convolution. `x: [B, C, H, W]`, `w: [C_out, C, kh, kw]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err(format!("conv2d: input {sx:?} with kernel {sw:?}"));
        }
        if stride == 0 {
            return Err(HstError::config("conv2d stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return shape_err(format!("conv2d: bias {:?} for {} channels", self.shape(b), sw[0]));
            }
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let (kl, p) = (geom.patch_len(), geom.positions());
        let mut out = vec![T::zero(); batch * c_out * p];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let mut cols = vec![T::zero(); kl * p];
            for s in 0..batch {
                kernels::im2col(&xs[s * c_in * h * wd..(s + 1) * c_in * h * wd], &geom, &mut cols);
                let o = &mut out[s * c_out * p..(s + 1) * c_out * p];
                kernels::gemm(
                    MatView::new(ws, c_out, kl, false),
                    MatView::new(&cols, kl, p, false),
                    T::zero(),
                    o,
                );
                if let Some(b) = b {
                    let bs = self.value(b).data();
                    for (c, row) in o.chunks_mut(p).enumerate() {
                        for v in row {
                            *v += bs[c];
                        }
                    }
                }
            }
        }
        let mut flops = 2 * (batch * c_out * kl * p) as u64;
        if b.is_some() {
            flops += (batch * c_out * p) as u64;
        }
        self.count(flops);
        let value = Tensor::new(vec![batch, c_out, geom.h_out, geom.w_out], out).expect("conv shape");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                c_out,
            },
        ))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return shape_err(format!("mean over axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let inv = T::one() / T::cast(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xs[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        self.count(xs.len() as u64 * cost::ELEMENTWISE);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out).expect("mean shape");
        Ok(self.push(value, &[x], Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.count(self.value(x).numel() as u64 * cost::ELEMENTWISE);
        self.push(Tensor::scalar(s), &[x], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).data().iter().copied().sum::<T>() / T::cast(n.max(1) as f64);
        self.count(n as u64 * cost::ELEMENTWISE);
        self.push(Tensor::scalar(s), &[x], Op::MeanAll(x))
    }

    /// Bilinear resize of `[B, C, H, W]` with half-pixel centres
    /// (`align_corners = false`). Same-size resizes are exact copies.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return shape_err(format!("bilinear_resize expects [B,C,H,W], got {shape:?}"));
        }
        if out_h == 0 || out_w == 0 || shape[2] == 0 || shape[3] == 0 {
            return shape_err(format!("bilinear_resize {shape:?} -> {out_h}x{out_w}"));
        }
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let xs = self.value(x).data();
        let out = if (h, w) == (out_h, out_w) {
            xs.to_vec()
        } else {
            let ty = kernels::bilinear_taps(h, out_h);
            let tx = kernels::bilinear_taps(w, out_w);
            let mut out = vec![T::zero(); planes * out_h * out_w];
            for p in 0..planes {
                let src = &xs[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, a) in ty.iter().enumerate() {
                    let fy = T::cast(a.frac);
                    for (ox, c) in tx.iter().enumerate() {
                        let fx = T::cast(c.frac);
                        let top = src[a.lo * w + c.lo] * (T::one() - fx) + src[a.lo * w + c.hi] * fx;
                        let bot = src[a.hi * w + c.lo] * (T::one() - fx) + src[a.hi * w + c.hi] * fx;
                        dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
            self.count((planes * out_h * out_w) as u64 * cost::BILINEAR);
            out
        };
        let value = Tensor::new(vec![shape[0], shape[1], out_h, out_w], out).expect("resize shape");
        Ok(self.push(value, &[x], Op::Bilinear { x, out_h, out_w }))
    }

    // ----- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return shape_err(format!("permute {axes:?} is not a permutation of {shape:?}"));
        }
        let (out_shape, data) = kernels::permute(self.value(x).data(), &shape, axes);
        let value = Tensor::new(out_shape, data).expect("permute shape");
        Ok(self.push(value, &[x], Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of zero tensors".into());
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (p, q))| i != axis && p != q) {
                return shape_err(format!("concat along {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data).expect("concat shape");
        Ok(self.push(value, xs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xs[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data).expect("slice shape");
        Ok(self.push(value, &[x], Op::Slice { x, axis, start }))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.numel());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::new(shape, data).expect("expand shape");
        self.push(value, &[x], Op::ExpandLeading { x, n })
    }

    // ----- loss --------------------------------------------------------

    /// Mean cross-entropy of `logits: [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return shape_err(format!("cross_entropy: logits {shape:?} with {} labels", labels.len()));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return shape_err(format!("label {bad} out of range for {c} classes"));
        }
        let mut probs = vec![T::zero(); b * c];
        kernels::softmax(self.value(logits).data(), b, c, 1, &mut probs);
        let xs = self.value(logits).data();
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[label];
        }
        loss /= T::cast(b as f64);
        self.count((b * c) as u64 * cost::CROSS_ENTROPY);
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ----- reverse pass ------------------------------------------------

    /// Propagates adjoints from a scalar `loss` back to every node that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(HstError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        for (d, &s) in self.slot(grads, v).iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    for (d, &s) in self.slot(grads, *a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants(*b) {
                    for (d, &s) in self.slot(grads, *b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let other = self.value(b).data();
                    for ((d, &s), &o) in self.slot(grads, a).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
                if self.wants(b) {
                    let other = self.value(a).data();
                    for ((d, &s), &o) in self.slot(grads, b).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    for (d, &v) in self.slot(grads, *a).iter_mut().zip(g) {
                        *d += v * *s;
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if self.wants(*a) {
                    for (d, &s) in self.slot(grads, *a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants(*b) {
                    let inner = self.value(*b).numel();
                    let db = self.slot(grads, *b);
                    if inner > 0 {
                        for chunk in g.chunks(inner) {
                            for (d, &s) in db.iter_mut().zip(chunk) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                shared_b,
            } => self.matmul_backward(*a, *b, *ta, *tb, *batch, *m, *k, *n, *shared_b, g, grads),
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let dx = self.slot(grads, *x);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + j;
                            let dot = (0..len).map(|k| g[at(k)] * y[at(k)]).sum::<T>();
                            for k in 0..len {
                                dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let rows = rstd.len();
                if self.wants(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = self.slot(grads, *beta);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let inv_d = T::one() / T::cast(d as f64);
                    let dx = self.slot(grads, *x);
                    let mut dh = vec![T::zero(); d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dh[j] = g[r * d + j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * h[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let xs = self.value(*a).data();
                    let inv_sqrt2 = T::cast(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi =
                        T::cast(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                    let half = T::cast(0.5);
                    let fault = if self.fault == Some(BackwardFault::HalfGeluGradient) {
                        half
                    } else {
                        T::one()
                    };
                    for ((d, &s), &v) in self.slot(grads, *a).iter_mut().zip(g).zip(xs) {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        *d += s * (cdf + v * pdf) * fault;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                c_out,
            } => {
                let (kl, p) = (geom.patch_len(), geom.positions());
                let in_len = geom.c_in * geom.h * geom.w;
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = self.slot(grads, *b);
                        for s in 0..*batch {
                            for (c, d) in db.iter_mut().enumerate() {
                                let off = (s * c_out + c) * p;
                                *d += g[off..off + p].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let (want_w, want_x) = (self.wants(*w), self.wants(*x));
                if !want_w && !want_x {
                    return;
                }
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut cols = vec![T::zero(); kl * p];
                let mut dcols = vec![T::zero(); kl * p];
                for s in 0..*batch {
                    let gs = &g[s * c_out * p..(s + 1) * c_out * p];
                    if want_w {
                        kernels::im2col(&xs[s * in_len..(s + 1) * in_len], geom, &mut cols);
                        let dw = self.slot(grads, *w);
                        kernels::gemm(
                            MatView::new(gs, *c_out, p, false),
                            MatView::new(&cols, p, kl, true),
                            T::one(),
                            dw,
                        );
                    }
                    if want_x {
                        kernels::gemm(
                            MatView::new(ws, kl, *c_out, true),
                            MatView::new(gs, *c_out, p, false),
                            T::zero(),
                            &mut dcols,
                        );
                        let dx = self.slot(grads, *x);
                        kernels::col2im_add(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.wants(*x) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let inv = T::one() / T::cast(n as f64);
                    let dx = self.slot(grads, *x);
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut dx[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    for d in self.slot(grads, *x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.wants(*x) {
                    let n = T::cast(self.value(*x).numel().max(1) as f64);
                    for d in self.slot(grads, *x).iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Bilinear { x, out_h, out_w } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let dx = self.slot(grads, *x);
                    if (h, w) == (*out_h, *out_w) {
                        for (d, &v) in dx.iter_mut().zip(g) {
                            *d += v;
                        }
                    } else {
                        let ty = kernels::bilinear_taps(h, *out_h);
                        let tx = kernels::bilinear_taps(w, *out_w);
                        for p in 0..planes {
                            let dst = &mut dx[p * h * w..(p + 1) * h * w];
                            let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                            for (oy, a) in ty.iter().enumerate() {
                                let fy = T::cast(a.frac);
                                for (ox, c) in tx.iter().enumerate() {
                                    let fx = T::cast(c.frac);
                                    let v = src[oy * out_w + ox];
                                    let top = v * (T::one() - fy);
                                    let bot = v * fy;
                                    dst[a.lo * w + c.lo] += top * (T::one() - fx);
                                    dst[a.lo * w + c.hi] += top * fx;
                                    dst[a.hi * w + c.lo] += bot * (T::one() - fx);
                                    dst[a.hi * w + c.hi] += bot * fx;
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    for (d, &s) in self.slot(grads, *x).iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let inv = kernels::inverse_permutation(axes);
                    let (_, back) = kernels::permute(g, node.value.shape(), &inv);
                    for (d, s) in self.slot(grads, *x).iter_mut().zip(back) {
                        *d += s;
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let dv = self.slot(grads, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, &s) in dv[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    let dx = self.slot(grads, *x);
                    for o in 0..outer {
                        let dst = &mut dx[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ExpandLeading { x, n } => {
                if self.wants(*x) {
                    let len = self.value(*x).numel();
                    let dx = self.slot(grads, *x);
                    for r in 0..*n {
                        for (d, &s) in dx.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / T::cast(labels.len() as f64);
                    let dl = self.slot(grads, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dl[r * c + j] += (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let fold = shared_b && !ta;
        let (steps, rows) = if fold { (1, batch * m) } else { (batch, m) };
        if self.wants(a) {
            let da = self.slot(grads, a);
            for i in 0..steps {
                let gi = &g[i * rows * n..(i + 1) * rows * n];
                let b_i = if shared_b { xb } else { &xb[i * k * n..(i + 1) * k * n] };
                let da_i = &mut da[i * rows * k..(i + 1) * rows * k];
                let op_b = MatView::new(b_i, k, n, tb);
                let gv = MatView::new(gi, rows, n, false);
                if ta {
                    // da stored as [k, rows] = op(B) · gᵀ
                    kernels::gemm(op_b, gv.t(), T::one(), da_i);
                } else {
                    kernels::gemm(gv, op_b.t(), T::one(), da_i);
                }
            }
        }
        if self.wants(b) {
            let db = self.slot(grads, b);
            for i in 0..steps {
                let gi = &g[i * rows * n..(i + 1) * rows * n];
                let a_i = &xa[i * rows * k..(i + 1) * rows * k];
                let db_i = if shared_b {
                    &mut db[..]
                } else {
                    &mut db[i * k * n..(i + 1) * k * n]
                };
                let op_a = MatView::new(a_i, rows, k, ta);
                let gv = MatView::new(gi, rows, n, false);
                if tb {
                    // db stored as [n, k] = gᵀ · op(A)
                    kernels::gemm(gv.t(), op_a, T::one(), db_i);
                } else {
                    kernels::gemm(op_a.t(), gv, T::one(), db_i);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Element>(a: &[T], m: usize, k: usize, ta: bool, b: &[T], n: usize, tb: bool, out: &mut [T], beta: T) {
    kernels::gemm(MatView::new(a, m, k, ta), MatView::new(b, k, n, tb), beta, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_variable_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let p = g.variable(t(&[2], &[5.0, 6.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(HstError::Contract(_))));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.variable(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.variable(Tensor::full([2], 1.0));
        let s = g.sum(x);
        assert!(!g.requires_grad(s));
        assert!(g.backward(s).unwrap().get(x).is_none());
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4, 2]));
        let err = g.matmul(a, b, false, false).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn shared_parameter_binds_once() {
        use crate::param::{ParamKind, ParamStore};
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[1.0, 1.0]), ParamKind::Weight, true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data(), &[2.0, 2.0]);
    }

    #[test]
    fn scopes_attribute_flops() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 4]));
        g.scoped("mm", |g| g.matmul(a, b, false, false)).unwrap();
        assert_eq!(g.flops_by_scope()["mm"], 2 * 2 * 3 * 4);
    }
}
