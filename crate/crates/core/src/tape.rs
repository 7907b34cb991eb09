//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append
//! nodes in execution order, so node indices are already a topological
//! order and the graph is acyclic by construction. [`Tape::backward`] walks
//! the list in reverse.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{shape_err, Result, TprError};
use crate::kernels::{self, Conv2dGeom, DeformGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    /// `max(0, tanh(v))`: the gate activation. Exact zeros for `v <= 0`.
    GateAct,
    Exp,
    Log,
    Neg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulGate(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        mask: Option<Rc<Vec<bool>>>,
    },
    Deform {
        x: Var,
        off: Var,
        w: Var,
        geom: DeformGeom,
    },
    MaxPool(Var, Vec<usize>),
    AvgPool2(Var),
    UpBilinear(Var),
    UpNearest(Var),
    Sum(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    CropMean {
        x: Var,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    },
    Dot(Var, Var),
    Stack(Vec<Var>),
    LogSoftmax(Var),
    Index(Var, usize),
    Bce {
        logits: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        beta: f64,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recorded op graph of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    no_grad: bool,
    macs: u64,
    masked_macs: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never records gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by convolution-type ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// The part of [`Tape::macs`] executed by masked (gated) convolutions.
    pub fn masked_macs(&self) -> u64 {
        self.masked_macs
    }

    /// Smallest `|v|` over every input of a `relu` or `gate_act` node, i.e.
    /// the distance of the recorded point from the nearest activation kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(a, Unary::Relu | Unary::GateAct) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.leaf(value, true);
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[C,H,W] * g[1,H,W]`, the gate broadcast over channels.
    pub fn mul_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (gc, gh, gw) = self.value(g).dims3()?;
        if gc != 1 || gh != h || gw != w {
            return Err(shape_err(
                "mul_gate",
                format!("gate {:?} does not broadcast over {:?}", self.shape(g), self.shape(x)),
            ));
        }
        let hw = h * w;
        let gd = self.value(g).data();
        let xd = self.value(x).data();
        let data = (0..c * hw).map(|i| xd[i] * gd[i % hw]).collect();
        let t = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(t, Op::MulGate(x, g), &[x, g]))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let t = self.value(a).map(|v| v * f);
        self.push(t, Op::Scale(a, f), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
            Unary::GateAct => gate_act,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Neg => |v| -v,
        };
        let t = self.value(a).map(f);
        self.push(t, Op::Unary(a, kind), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gate_act(&mut self, a: Var) -> Var {
        self.unary(a, Unary::GateAct)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let (_, h, w) = self.value(first).dims3()?;
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pc, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err("concat_channels", format!("spatial {ph}x{pw} vs {h}x{w}")));
            }
            c += pc;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).channels(start, len)?;
        Ok(self.push(t, Op::Slice(a, start), &[a]))
    }

    /// Cross-correlation with optional bias and output mask. Masked-off
    /// positions are exactly zero, cost nothing and pass no gradient.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(shape_err("conv2d", format!("kernel must be rank 4, got {ws:?}")));
        };
        if wcin != cin {
            return Err(shape_err("conv2d", format!("input channels: kernel expects {wcin}, input has {cin}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel spatial size must be odd and square, got {k}x{k2}")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("input {h}x{wd} smaller than kernel {k} with pad {pad}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} output channels", self.shape(b))));
            }
        }
        let geom = Conv2dGeom { cin, cout, h, w: wd, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        if let Some(m) = &mask {
            if m.len() != ho * wo {
                return Err(shape_err("conv2d", format!("mask has {} positions, output is {ho}x{wo}", m.len())));
            }
        }
        let mut out = vec![0.0; cout * ho * wo];
        let macs = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            mask.as_deref().map(|m| m.as_slice()),
            &mut out,
        );
        self.macs += macs;
        if mask.is_some() {
            self.masked_macs += macs;
        }
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv { x, w, b, geom, mask }, &parents))
    }

    /// 3x3 deformable convolution with per-location, per-tap offsets.
    pub fn deform_conv(&mut self, x: Var, off: Var, w: Var) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let (oc, oh, ow) = self.value(off).dims3()?;
        if oc != 2 * kernels::TAPS || (oh, ow) != (h, wd) {
            return Err(shape_err(
                "deform_conv",
                format!("offsets {:?} for input {:?}", self.shape(off), self.shape(x)),
            ));
        }
        let ws = self.shape(w).to_vec();
        let [cout, wcin, 3, 3] = ws[..] else {
            return Err(shape_err("deform_conv", format!("kernel must be (Co,Ci,3,3), got {ws:?}")));
        };
        if wcin != cin {
            return Err(shape_err("deform_conv", format!("input channels {cin} vs kernel {wcin}")));
        }
        let geom = DeformGeom { cin, cout, h, w: wd };
        let mut out = vec![0.0; cout * h * wd];
        self.macs += kernels::deform_forward(
            &geom,
            self.value(x).data(),
            self.value(off).data(),
            self.value(w).data(),
            &mut out,
        );
        let t = Tensor::new(vec![cout, h, wd], out)?;
        Ok(self.push(t, Op::Deform { x, off, w, geom }, &[x, off, w]))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (out, arg, ho, wo) = kernels::maxpool_forward(c, h, w, k, stride, pad, self.value(x).data());
        let t = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool(x, arg), &[x]))
    }

    /// 2x2 stride-2 mean pooling (ceil mode).
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (out, ho, wo) = kernels::avgpool2_forward(c, h, w, self.value(x).data());
        let t = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let out = kernels::upsample_bilinear_forward(c, h, w, ho, wo, self.value(x).data());
        let t = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(t, Op::UpBilinear(x), &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let xd = self.value(x).data();
        let t = Tensor::from_fn3(c, ho, wo, |ci, oy, ox| {
            xd[(ci * h + kernels::nearest_src(oy, h, ho)) * w + kernels::nearest_src(ox, w, wo)]
        });
        Ok(self.push(t, Op::UpNearest(x), &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `w[out,in] @ x[in] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let n_in = self.value(x).len();
        let ws = self.shape(w).to_vec();
        let [n_out, wi] = ws[..] else {
            return Err(shape_err("linear", format!("weight must be rank 2, got {ws:?}")));
        };
        if wi != n_in {
            return Err(shape_err("linear", format!("input features: weight expects {wi}, got {n_in}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(shape_err("linear", format!("bias {:?} for {n_out} outputs", self.shape(b))));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let data = (0..n_out)
            .map(|o| {
                let dot: f64 = wd[o * n_in..(o + 1) * n_in].iter().zip(xd).map(|(a, b)| a * b).sum();
                dot + bd.map_or(0.0, |b| b[o])
            })
            .collect();
        self.macs += (n_in * n_out) as u64;
        let t = Tensor::new(vec![n_out], data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b }, &parents))
    }

    /// Per-channel mean over the window `[y0,y1) x [x0,x1)`.
    pub fn crop_mean(&mut self, x: Var, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if y0 >= y1 || x0 >= x1 || y1 > h || x1 > w {
            return Err(TprError::Invalid(format!(
                "empty or out-of-range crop [{y0},{y1})x[{x0},{x1}) on {h}x{w}"
            )));
        }
        let n = ((y1 - y0) * (x1 - x0)) as f64;
        let xd = self.value(x).data();
        let data = (0..c)
            .map(|ci| {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += xd[(ci * h + y) * w + xx];
                    }
                }
                acc / n
            })
            .collect();
        let t = Tensor::new(vec![c], data)?;
        Ok(self.push(t, Op::CropMean { x, y0, y1, x0, x1 }, &[x]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err("dot", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).len() != 1 {
                return Err(shape_err("stack", format!("expected scalars, got {:?}", self.shape(p))));
            }
            data.push(self.value(p).item());
        }
        let t = Tensor::new(vec![parts.len()], data)?;
        Ok(self.push(t, Op::Stack(parts.to_vec()), parts))
    }

    /// Numerically stable log-softmax of a vector (max-logit subtraction).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let t = self.value(a).map(|v| v - lse);
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        if i >= self.value(a).len() {
            return Err(TprError::Invalid(format!("index {i} out of {}", self.value(a).len())));
        }
        let t = Tensor::scalar(self.value(a).data()[i]);
        Ok(self.push(t, Op::Index(a, i), &[a]))
    }

    /// `sum(weight * bce(sigmoid(logits), target))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        check_same("bce_with_logits", self.value(logits), target)?;
        check_same("bce_with_logits", self.value(logits), weight)?;
        let s = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        let op = Op::Bce {
            logits,
            target: target.data().to_vec(),
            weight: weight.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[logits]))
    }

    /// `sum(weight * smooth_l1(x - target))` with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, target: &Tensor, weight: &Tensor, beta: f64) -> Result<Var> {
        check_same("smooth_l1", self.value(x), target)?;
        check_same("smooth_l1", self.value(x), weight)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&v, &t), &w)| {
                let d = (v - t).abs();
                w * if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta }
            })
            .sum();
        let op = Op::SmoothL1 {
            x,
            target: target.data().to_vec(),
            weight: weight.data().to_vec(),
            beta,
        };
        Ok(self.push(Tensor::scalar(s), op, &[x]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Reverse-mode accumulation from a scalar `loss`. Parameter gradients
    /// are added into `store` (they accumulate across calls until
    /// [`ParamStore::zero_grad`]).
    pub fn backward(&self, loss: Var, store: Option<&mut ParamStore>) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TprError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        if let Some(store) = store {
            for (name, v) in &self.params {
                if let Some(g) = &grads[v.0] {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| (0..g.len()).for_each(|i| d[i] += g[i] * bv[i]));
                acc(*b, &mut |d| (0..g.len()).for_each(|i| d[i] += g[i] * av[i]));
            }
            Op::MulGate(x, gate) => {
                let (xv, gv) = (val(*x), val(*gate));
                let hw = gv.len();
                acc(*x, &mut |d| (0..g.len()).for_each(|i| d[i] += g[i] * gv[i % hw]));
                acc(*gate, &mut |d| (0..g.len()).for_each(|i| d[i % hw] += g[i] * xv[i]));
            }
            Op::Scale(a, f) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let y = node.value.data();
                let deriv: Box<dyn Fn(usize) -> f64> = match kind {
                    Unary::Sigmoid => Box::new(|i| y[i] * (1.0 - y[i])),
                    Unary::Tanh => Box::new(|i| 1.0 - y[i] * y[i]),
                    Unary::Relu => Box::new(|i| if x[i] > 0.0 { 1.0 } else { 0.0 }),
                    Unary::GateAct => Box::new(|i| if x[i] > 0.0 { 1.0 - y[i] * y[i] } else { 0.0 }),
                    Unary::Exp => Box::new(|i| y[i]),
                    Unary::Log => Box::new(|i| 1.0 / x[i]),
                    Unary::Neg => Box::new(|_| -1.0),
                };
                acc(*a, &mut |d| (0..g.len()).for_each(|i| d[i] += g[i] * deriv(i)));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let s = nodes[a.0].value.shape();
                let off = start * s[1] * s[2];
                acc(*a, &mut |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::Conv { x, w, b, geom, mask } => {
                let m = mask.as_deref().map(|m| m.as_slice());
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::conv2d_backward(geom, xv, wv, m, g, Some(d), None, None));
                acc(*w, &mut |d| kernels::conv2d_backward(geom, xv, wv, m, g, None, Some(d), None));
                if let Some(b) = b {
                    acc(*b, &mut |d| kernels::conv2d_backward(geom, xv, wv, m, g, None, None, Some(d)));
                }
            }
            Op::Deform { x, off, w, geom } => {
                let (xv, ov, wv) = (val(*x), val(*off), val(*w));
                acc(*x, &mut |d| kernels::deform_backward(geom, xv, ov, wv, g, Some(d), None, None));
                acc(*off, &mut |d| kernels::deform_backward(geom, xv, ov, wv, g, None, Some(d), None));
                acc(*w, &mut |d| kernels::deform_backward(geom, xv, ov, wv, g, None, None, Some(d)));
            }
            Op::MaxPool(a, arg) => acc(*a, &mut |d| arg.iter().zip(g).for_each(|(&i, g)| d[i] += g)),
            Op::AvgPool2(a) => {
                let s = nodes[a.0].value.shape();
                acc(*a, &mut |d| kernels::avgpool2_backward(s[0], s[1], s[2], g, d));
            }
            Op::UpBilinear(a) => {
                let s = nodes[a.0].value.shape();
                let o = node.value.shape();
                acc(*a, &mut |d| kernels::upsample_bilinear_backward(s[0], s[1], s[2], o[1], o[2], g, d));
            }
            Op::UpNearest(a) => {
                let s = nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let o = node.value.shape();
                let (ho, wo) = (o[1], o[2]);
                acc(*a, &mut |d| {
                    for ci in 0..c {
                        for oy in 0..ho {
                            let sy = kernels::nearest_src(oy, h, ho);
                            for ox in 0..wo {
                                let sx = kernels::nearest_src(ox, w, wo);
                                d[(ci * h + sy) * w + sx] += g[(ci * ho + oy) * wo + ox];
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let n_in = xv.len();
                acc(*x, &mut |d| {
                    for (o, go) in g.iter().enumerate() {
                        for i in 0..n_in {
                            d[i] += wv[o * n_in + i] * go;
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for (o, go) in g.iter().enumerate() {
                        for i in 0..n_in {
                            d[o * n_in + i] += xv[i] * go;
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| add_into(d, g));
                }
            }
            Op::CropMean { x, y0, y1, x0, x1 } => {
                let s = nodes[x.0].value.shape();
                let (h, w) = (s[1], s[2]);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                acc(*x, &mut |d| {
                    for (ci, gc) in g.iter().enumerate() {
                        for y in *y0..*y1 {
                            for xx in *x0..*x1 {
                                d[(ci * h + y) * w + xx] += gc / n;
                            }
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(bv).for_each(|(d, b)| *d += g[0] * b));
                acc(*b, &mut |d| d.iter_mut().zip(av).for_each(|(d, a)| *d += g[0] * a));
            }
            Op::Stack(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    acc(*p, &mut |d| d[0] += g[i]);
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let gs: f64 = g.iter().sum();
                acc(*a, &mut |d| (0..g.len()).for_each(|i| d[i] += g[i] - y[i].exp() * gs));
            }
            Op::Index(a, i) => acc(*a, &mut |d| d[*i] += g[0]),
            Op::Bce { logits, target, weight } => {
                let z = val(*logits);
                acc(*logits, &mut |d| {
                    (0..z.len()).for_each(|i| d[i] += g[0] * weight[i] * (sigmoid(z[i]) - target[i]))
                });
            }
            Op::SmoothL1 { x, target, weight, beta } => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..xv.len() {
                        let diff = xv[i] - target[i];
                        let slope = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        d[i] += g[0] * weight[i] * slope;
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn gate_act(v: f64) -> f64 {
    v.tanh().max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn maxpool_two_by_two() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn upsample_doubles_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 5, 7]));
        let y = tape.upsample_bilinear(x, 10, 14).unwrap();
        assert_eq!(tape.shape(y), &[3, 10, 14]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(x);
        let g = tape.backward(s, None).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(t(&[4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s, None).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x, None), Err(TprError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1, None).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let a = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 4, 5]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn gate_act_has_exact_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 0.5]), true);
        let y = tape.gate_act(x);
        assert_eq!(tape.value(y).data()[..2], [0.0, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s, None).unwrap().get(x).unwrap();
        assert_eq!(g.data()[..2], [0.0, 0.0]);
        assert!((g.data()[2] - (1.0 - 0.5f64.tanh().powi(2))).abs() < 1e-15);
    }

    #[test]
    fn no_grad_tape_records_no_requirements() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(!tape.requires_grad(x));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn3(2, 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f64));
        let b = tape.constant(Tensor::from_fn3(3, 3, 3, |c, y, x| -((c * 9 + y * 3 + x) as f64)));
        let ab = tape.concat_channels(&[a, b]).unwrap();
        let a2 = tape.slice_channels(ab, 0, 2).unwrap();
        let b2 = tape.slice_channels(ab, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }
}
