//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and the ids of its
//! inputs, so node order is a topological order. [`Tape::backward`] walks the
//! nodes in exact reverse order.

use super::array::Tensor;
use super::kernels::{self, plane, LayerNormCache, Modes, SpectralCache, Stencil};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[c, ...] * m[c]`
    MulChannel(Var, Var),
    /// `x[c, ...] + b[c]`
    AddChannel(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Depthwise {
        x: Var,
        k: Var,
        stencil: Stencil,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stencil: Stencil,
    },
    Spectral {
        x: Var,
        w: Var,
        modes: Modes,
        cache: SpectralCache,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Norm(Var),
    /// Scalar quotient `a / b`.
    Div(Var, Var),
    Detach,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} produced a non-finite value"
        )))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Detach, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    fn binary(&mut self, a: Var, b: Var, kind: &str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ta = self.value(a);
        let tb = self.value(b);
        let out: Vec<f64>;
        let op;
        if sa == sb {
            out = match kind {
                "add" => ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| x + y)
                    .collect(),
                "sub" => ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| x - y)
                    .collect(),
                _ => ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| x * y)
                    .collect(),
            };
            op = match kind {
                "add" => Op::Add(a, b),
                "sub" => Op::Sub(a, b),
                _ => Op::Mul(a, b),
            };
        } else if tb.numel() == sa[0] && kind != "sub" {
            let per = ta.site_count();
            let bd = tb.data();
            out = match kind {
                "add" => ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, x)| x + bd[j / per])
                    .collect(),
                _ => ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, x)| x * bd[j / per])
                    .collect(),
            };
            op = match kind {
                "add" => Op::AddChannel(a, b),
                _ => Op::MulChannel(a, b),
            };
        } else {
            return shape_err(format!("{kind}: incompatible shapes {sa:?} and {sb:?}"));
        }
        let value = Tensor::new(sa, out)?;
        check_finite(&value, kind)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum; `b` may also be a per-channel vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")
    }

    /// Elementwise product; `b` may also be a per-channel mask.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        check_finite(&value, what)?;
        let rg = self.rg(x);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s), "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu(x), "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    /// Pointwise channel mixing, `w: [c_out, c_in]`, optional `b: [c_out]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != xs[0] {
            return shape_err(format!("conv1x1 weights {ws:?} do not match input {xs:?}"));
        }
        let c_out = ws[0];
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return shape_err("conv1x1 bias length mismatch");
            }
        }
        let sites = self.value(x).site_count();
        let y = kernels::conv1x1_forward(
            self.value(x).data(),
            xs[0],
            sites,
            self.value(w).data(),
            c_out,
            b.map(|b| self.value(b).data()),
        );
        let mut shape = xs;
        shape[0] = c_out;
        let value = Tensor::new(&shape, y)?;
        check_finite(&value, "conv1x1")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv1x1 { x, w, b }, rg))
    }

    fn kernel_plane(shape: &[usize], lead: usize) -> Result<(usize, usize)> {
        match shape.len() - lead {
            1 => Ok((1, shape[lead])),
            2 => Ok((shape[lead], shape[lead + 1])),
            _ => shape_err(format!("bad kernel shape {shape:?}")),
        }
    }

    /// Periodic depthwise convolution, `k: [c_out, taps...]` with
    /// `c_out` a multiple of the input channels.
    pub fn depthwise(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (h, w) = plane(&xs)?;
        let (kh, kw) = Self::kernel_plane(&ks, 1)?;
        if ks.len() != xs.len() {
            return shape_err(format!("kernel {ks:?} rank does not match input {xs:?}"));
        }
        let (c_in, c_out) = (xs[0], ks[0]);
        if c_out % c_in != 0 {
            return shape_err(format!(
                "depthwise output channels {c_out} not a multiple of {c_in}"
            ));
        }
        let stencil = Stencil::new(h, w, kh, kw)?;
        let y = kernels::depthwise_forward(
            self.value(x).data(),
            c_in,
            self.value(k).data(),
            c_out,
            stencil,
        );
        let mut shape = xs;
        shape[0] = c_out;
        let value = Tensor::new(&shape, y)?;
        check_finite(&value, "depthwise")?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(value, Op::Depthwise { x, k, stencil }, rg))
    }

    /// Dense periodic convolution, `w: [c_out, c_in, taps...]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (h, wd) = plane(&xs)?;
        if ws.len() != xs.len() + 1 || ws[1] != xs[0] {
            return shape_err(format!("conv weights {ws:?} do not match input {xs:?}"));
        }
        let (kh, kw) = Self::kernel_plane(&ws, 2)?;
        let stencil = Stencil::new(h, wd, kh, kw)?;
        let c_out = ws[0];
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return shape_err("conv bias length mismatch");
            }
        }
        let y = kernels::conv_forward(
            self.value(x).data(),
            xs[0],
            self.value(w).data(),
            c_out,
            b.map(|b| self.value(b).data()),
            stencil,
        );
        let mut shape = xs;
        shape[0] = c_out;
        let value = Tensor::new(&shape, y)?;
        check_finite(&value, "conv")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv { x, w, b, stencil }, rg))
    }

    /// Fourier-space channel mixing on the kept `modes`;
    /// `w: [n_modes, c_out, c_in, 2]`.
    pub fn spectral(&mut self, x: Var, w: Var, modes: Modes) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (h, wd) = plane(&xs)?;
        modes.validate(h, wd)?;
        if ws.len() != 4 || ws[0] != modes.count() || ws[2] != xs[0] || ws[3] != 2 {
            return shape_err(format!(
                "spectral weights {ws:?} do not match input {xs:?} with {} modes",
                modes.count()
            ));
        }
        let c_out = ws[1];
        let (y, cache) = kernels::spectral_forward(
            self.value(x).data(),
            xs[0],
            h,
            wd,
            self.value(w).data(),
            c_out,
            modes,
        )?;
        let mut shape = xs;
        shape[0] = c_out;
        let value = Tensor::new(&shape, y)?;
        check_finite(&value, "spectral")?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Spectral { x, w, modes, cache }, rg))
    }

    /// Normalization over all elements with per-channel affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("layer norm affine terms must have one entry per channel");
        }
        let (y, cache) = kernels::layer_norm_forward(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(&xs, y)?;
        check_finite(&value, "layer_norm")?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).channel_slice(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let value = Tensor::scalar(s);
        check_finite(&value, "sum")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    /// Euclidean norm over all elements.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).norm());
        check_finite(&value, "norm")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Norm(x), rg))
    }

    /// Quotient of two scalars.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return shape_err("div is defined for scalars only");
        }
        let value = Tensor::scalar(self.value(a).item() / self.value(b).item());
        check_finite(&value, "div")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    /// Populate gradients of `loss` with respect to every node that
    /// requires them. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Unsupported(
                "backward already ran on this tape; build a new tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[id].op, Op::Leaf);
            let Some(g) = (if is_leaf { None } else { grads[id].take() }) else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                if rg(*b) {
                    let gb: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::MulChannel(x, m) => {
                let per = self.nodes[x.0].value.site_count();
                let md = val(*m);
                if rg(*x) {
                    let gx: Vec<f64> = g.iter().enumerate().map(|(j, g)| g * md[j / per]).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                if rg(*m) {
                    let xd = val(*x);
                    let mut gm = vec![0.0; md.len()];
                    for (j, gv) in g.iter().enumerate() {
                        gm[j / per] += gv * xd[j];
                    }
                    accumulate(&mut grads[m.0], &gm);
                }
            }
            Op::AddChannel(x, b) => {
                let per = self.nodes[x.0].value.site_count();
                if rg(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; self.nodes[b.0].value.numel()];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j / per] += gv;
                    }
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(x, s) => {
                let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Conv1x1 { x, w, b } => {
                let xt = &self.nodes[x.0].value;
                let c_out = node.value.channels();
                let gr = kernels::conv1x1_backward(
                    g,
                    xt.data(),
                    xt.channels(),
                    xt.site_count(),
                    val(*w),
                    c_out,
                );
                if rg(*x) {
                    accumulate(&mut grads[x.0], &gr.x);
                }
                if rg(*w) {
                    accumulate(&mut grads[w.0], &gr.w);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        accumulate(&mut grads[b.0], &gr.bias);
                    }
                }
            }
            Op::Depthwise { x, k, stencil } => {
                let xt = &self.nodes[x.0].value;
                let (gx, gk) = kernels::depthwise_backward(
                    g,
                    xt.data(),
                    xt.channels(),
                    val(*k),
                    node.value.channels(),
                    *stencil,
                );
                if rg(*x) {
                    accumulate(&mut grads[x.0], &gx);
                }
                if rg(*k) {
                    accumulate(&mut grads[k.0], &gk);
                }
            }
            Op::Conv { x, w, b, stencil } => {
                let xt = &self.nodes[x.0].value;
                let gr = kernels::conv_backward(
                    g,
                    xt.data(),
                    xt.channels(),
                    val(*w),
                    node.value.channels(),
                    *stencil,
                );
                if rg(*x) {
                    accumulate(&mut grads[x.0], &gr.x);
                }
                if rg(*w) {
                    accumulate(&mut grads[w.0], &gr.w);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        accumulate(&mut grads[b.0], &gr.bias);
                    }
                }
            }
            Op::Spectral { x, w, modes, cache } => {
                let xt = &self.nodes[x.0].value;
                let (h, wd) = plane(xt.shape())?;
                let (gx, gw) = kernels::spectral_backward(
                    g,
                    cache,
                    xt.channels(),
                    h,
                    wd,
                    val(*w),
                    node.value.channels(),
                    *modes,
                )?;
                if rg(*x) {
                    accumulate(&mut grads[x.0], &gx);
                }
                if rg(*w) {
                    accumulate(&mut grads[w.0], &gw);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) =
                    kernels::layer_norm_backward(g, cache, node.value.channels(), val(*gamma));
                if rg(*x) {
                    accumulate(&mut grads[x.0], &gx);
                }
                if rg(*gamma) {
                    accumulate(&mut grads[gamma.0], &gg);
                }
                if rg(*beta) {
                    accumulate(&mut grads[beta.0], &gb);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if rg(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                let xt = &self.nodes[x.0].value;
                let per = xt.site_count();
                let mut gx = vec![0.0; xt.numel()];
                gx[start * per..start * per + g.len()].copy_from_slice(g);
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g),
            Op::Sum(x) => {
                let gx = vec![g[0]; self.nodes[x.0].value.numel()];
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Norm(x) => {
                let n = node.value.item();
                let gx: Vec<f64> = if n > 0.0 {
                    val(*x).iter().map(|v| g[0] * v / n).collect()
                } else {
                    vec![0.0; self.nodes[x.0].value.numel()]
                };
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a)[0], val(*b)[0]);
                if rg(*a) {
                    accumulate(&mut grads[a.0], &[g[0] / bv]);
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], &[-g[0] * av / (bv * bv)]);
                }
            }
        }
        Ok(())
    }
}
