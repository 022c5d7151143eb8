use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{self, ConvGeometry};
use super::{Gradients, ParamId, ParamStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// How an operand's elements map onto the output of a binary op.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Full,
    Scalar,
    Channel(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Scalar => 0,
            Bcast::Channel(c) => i % c,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Square,
    Powf(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Param(ParamId),
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        ba: Bcast,
        bb: Bcast,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Sum(usize),
    SumPerSample(usize),
    MeanChannels(usize),
    Conv2d {
        x: usize,
        k: usize,
        geom: ConvGeometry,
    },
    WeightNorm {
        v: usize,
        g: usize,
        norms: Vec<f64>,
    },
    Gather {
        a: usize,
        index: Rc<Vec<usize>>,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    SliceChannels {
        a: usize,
        start: usize,
    },
    FlattenConcat(Vec<usize>),
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive ops for reverse-mode differentiation.
///
/// A tape is single-owner and append-only; drop it after `backward` and start
/// a fresh one for the next step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiable leaf; its gradient is available from [`Gradients`].
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        self.push(p.tensor.clone(), Op::Param(id), p.requires_grad)
    }

    /// Concatenate per-sample flattenings of `[N, ...]` tensors into `[N, D]`.
    pub fn flatten_concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "flatten_concat",
            reason: "no inputs".into(),
        })?;
        let n = first.value().batch();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rank() == 0 || v.batch() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "flatten_concat",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let d: usize = values.iter().map(|v| v.per_sample()).sum();
        let mut data = Vec::with_capacity(n * d);
        for s in 0..n {
            for v in &values {
                let k = v.per_sample();
                data.extend_from_slice(&v.data()[s * k..(s + 1) * k]);
            }
        }
        let grad = parts.iter().any(|p| self.grad_of(p.id));
        Ok(self.push(
            Tensor::new(vec![n, d], data)?,
            Op::FlattenConcat(parts.iter().map(|p| p.id).collect()),
            grad,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Nodes are visited in exact reverse recording order. Parameters that the
    /// loss does not depend on receive no entry (read back as zero).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let needs = |j: usize| nodes[j].requires_grad;
            let val = |j: usize| -> &Tensor { &nodes[j].value };
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    out.leaves.insert(id, g);
                }
                Op::Param(pid) => match out.params.get_mut(pid) {
                    Some(acc) => add_into(acc.data_mut(), g.data()),
                    None => {
                        out.params.insert(*pid, g);
                    }
                },
                Op::Binary { kind, a, b, ba, bb } => {
                    let (av, bv) = (val(*a), val(*b));
                    let gd = g.data();
                    if needs(*a) {
                        let mut ga = vec![0.0; av.numel()];
                        for (i, &gi) in gd.iter().enumerate() {
                            ga[ba.index(i)] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => gi,
                                BinaryKind::Mul => gi * bv.data()[bb.index(i)],
                            };
                        }
                        accumulate(&mut grads, *a, av.shape(), ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; bv.numel()];
                        for (i, &gi) in gd.iter().enumerate() {
                            gb[bb.index(i)] += match kind {
                                BinaryKind::Add => gi,
                                BinaryKind::Sub => -gi,
                                BinaryKind::Mul => gi * av.data()[ba.index(i)],
                            };
                        }
                        accumulate(&mut grads, *b, bv.shape(), gb);
                    }
                }
                Op::Unary { kind, a } => {
                    let av = val(*a);
                    let ov = &node.value;
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(ov.data())
                        .map(|((&gi, &x), &y)| match kind {
                            UnaryKind::Neg => -gi,
                            UnaryKind::Exp => gi * y,
                            UnaryKind::Log => gi / x,
                            UnaryKind::Tanh => gi * (1.0 - y * y),
                            UnaryKind::Relu => {
                                if x > 0.0 {
                                    gi
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Square => 2.0 * x * gi,
                            UnaryKind::Powf(p) => gi * p * x.powf(p - 1.0),
                            UnaryKind::Scale(c) => gi * c,
                            UnaryKind::AddScalar(_) => gi,
                        })
                        .collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Sum(a) => {
                    let av = val(*a);
                    let gi = g.data()[0];
                    accumulate(&mut grads, *a, av.shape(), vec![gi; av.numel()]);
                }
                Op::SumPerSample(a) => {
                    let av = val(*a);
                    let k = av.per_sample();
                    let ga = (0..av.numel()).map(|i| g.data()[i / k]).collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::MeanChannels(a) => {
                    let av = val(*a);
                    let c = *av.shape().last().unwrap_or(&1);
                    let count = (av.numel() / c) as f64;
                    let ga = (0..av.numel()).map(|i| g.data()[i % c] / count).collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Conv2d { x, k, geom } => {
                    let (gx, gk) = conv::backward(
                        geom,
                        val(*x).data(),
                        val(*k).data(),
                        g.data(),
                        needs(*x),
                        needs(*k),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, val(*x).shape(), gx);
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut grads, *k, val(*k).shape(), gk);
                    }
                }
                Op::WeightNorm { v, g: gid, norms } => {
                    let vv = val(*v);
                    let gv = val(*gid);
                    let cout = norms.len();
                    let gw = g.data();
                    // per output channel: <dL/dw, v/|v|>
                    let mut proj = vec![0.0; cout];
                    for (i, (&d, &x)) in gw.iter().zip(vv.data()).enumerate() {
                        proj[i % cout] += d * x / norms[i % cout];
                    }
                    if needs(*v) {
                        let gvec = gw
                            .iter()
                            .zip(vv.data())
                            .enumerate()
                            .map(|(i, (&d, &x))| {
                                let c = i % cout;
                                gv.data()[c] / norms[c] * (d - x / norms[c] * proj[c])
                            })
                            .collect();
                        accumulate(&mut grads, *v, vv.shape(), gvec);
                    }
                    if needs(*gid) {
                        accumulate(&mut grads, *gid, gv.shape(), proj);
                    }
                }
                Op::Gather { a, index } => {
                    let av = val(*a);
                    let mut ga = vec![0.0; av.numel()];
                    for (&src, &gi) in index.iter().zip(g.data()) {
                        ga[src] += gi;
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::ConcatChannels { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let ca = *av.shape().last().unwrap();
                    let cb = *bv.shape().last().unwrap();
                    let pixels = av.numel() / ca;
                    let (mut ga, mut gb) = (Vec::with_capacity(av.numel()), Vec::with_capacity(bv.numel()));
                    for p in 0..pixels {
                        let row = &g.data()[p * (ca + cb)..(p + 1) * (ca + cb)];
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, av.shape(), ga);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, bv.shape(), gb);
                    }
                }
                Op::SliceChannels { a, start } => {
                    let av = val(*a);
                    let c = *av.shape().last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let mut ga = vec![0.0; av.numel()];
                    for (p, row) in g.data().chunks(len).enumerate() {
                        ga[p * c + start..p * c + start + len].copy_from_slice(row);
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::FlattenConcat(parts) => {
                    let n = node.value.shape()[0];
                    let d = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let k = pv.per_sample();
                        if needs(p) {
                            let mut gp = Vec::with_capacity(pv.numel());
                            for s in 0..n {
                                gp.extend_from_slice(&g.data()[s * d + offset..s * d + offset + k]);
                            }
                            accumulate(&mut grads, p, pv.shape(), gp);
                        }
                        offset += k;
                    }
                }
                Op::Reshape(a) => {
                    let av = val(*a);
                    accumulate(&mut grads, *a, av.shape(), g.into_data());
                }
            }
        }
        Ok(out)
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => add_into(acc.data_mut(), &g),
        slot => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("adjoint shape matches value"));
        }
    }
}

fn broadcast_plan(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Bcast, Bcast)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok((sa.to_vec(), Bcast::Full, Bcast::Full));
    }
    if b.numel() == 1 {
        return Ok((sa.to_vec(), Bcast::Full, Bcast::Scalar));
    }
    if a.numel() == 1 {
        return Ok((sb.to_vec(), Bcast::Scalar, Bcast::Full));
    }
    if sa.len() >= 2 && sb.len() == 1 && sa.last() == sb.last() {
        return Ok((sa.to_vec(), Bcast::Full, Bcast::Channel(sb[0])));
    }
    if sb.len() >= 2 && sa.len() == 1 && sa.last() == sb.last() {
        return Ok((sb.to_vec(), Bcast::Channel(sa[0]), Bcast::Full));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    })
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_of(self.id)
    }

    /// Gradient of this leaf from a finished backward pass.
    pub fn grad<'g>(&self, grads: &'g Gradients) -> Option<&'g Tensor> {
        grads.leaf(self.id)
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (shape, ba, bb) = broadcast_plan(name, &a, &b)?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = match (ba, bb) {
            (Bcast::Full, Bcast::Full) => match kind {
                BinaryKind::Add => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
                BinaryKind::Sub => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
                BinaryKind::Mul => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
            },
            _ => (0..n)
                .map(|i| {
                    let (x, y) = (ad[ba.index(i)], bd[bb.index(i)]);
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                    }
                })
                .collect(),
        };
        let grad = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                ba,
                bb,
            },
            grad,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let a = self.value();
        let out = a.map(|x| match kind {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Square => x * x,
            UnaryKind::Powf(p) => x.powf(p),
            UnaryKind::Scale(c) => x * c,
            UnaryKind::AddScalar(c) => x + c,
        });
        self.tape
            .push(out, Op::Unary { kind, a: self.id }, self.requires_grad())
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(self) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = a.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::NonPositive { op: "ln", value: bad });
        }
        Ok(self.unary(UnaryKind::Log))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    /// Elementwise power of a strictly positive base.
    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = a.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::NonPositive { op: "powf", value: bad });
        }
        Ok(self.unary(UnaryKind::Powf(p)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(c))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Reduce `[N, ...]` to `[N]` by summing each sample.
    pub fn sum_per_sample(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() == 0 {
            return Err(TensorError::Invalid {
                op: "sum_per_sample",
                reason: "needs a leading batch axis".into(),
            });
        }
        let k = a.per_sample();
        let data = a.data().chunks(k).map(|c| c.iter().sum()).collect();
        Ok(self.tape.push(
            Tensor::new(vec![a.batch()], data)?,
            Op::SumPerSample(self.id),
            self.requires_grad(),
        ))
    }

    /// Mean over every axis but the last, giving a `[C]` vector.
    pub fn mean_channels(self) -> Result<Var<'t>> {
        let a = self.value();
        let c = *a.shape().last().ok_or(TensorError::Invalid {
            op: "mean_channels",
            reason: "scalar input".into(),
        })?;
        let count = (a.numel() / c) as f64;
        let mut acc = vec![0.0; c];
        for row in a.data().chunks(c) {
            add_into(&mut acc, row);
        }
        for v in &mut acc {
            *v /= count;
        }
        Ok(self.tape.push(
            Tensor::new(vec![c], acc)?,
            Op::MeanChannels(self.id),
            self.requires_grad(),
        ))
    }

    /// Stride-1 zero-padded convolution of `[N, H, W, Cin]` with a
    /// `[KH, KW, Cin, Cout]` kernel; kernel extents must be odd.
    pub fn conv2d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernel.value();
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: format!("kernel extent {}x{} must be odd", ks[0], ks[1]),
            });
        }
        let geom = ConvGeometry {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh: ks[0],
            kw: ks[1],
            cout: ks[3],
        };
        let out = conv::forward(&geom, x.data(), k.data());
        let grad = self.requires_grad() || kernel.requires_grad();
        Ok(self.tape.push(
            Tensor::new(vec![geom.n, geom.h, geom.w, geom.cout], out)?,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                geom,
            },
            grad,
        ))
    }

    /// Weight-normalized kernel `g[c] * v[.., c] / |v[.., c]|`, one norm per
    /// output channel (the trailing axis of `self`).
    pub fn weight_norm(self, magnitude: Var<'t>) -> Result<Var<'t>> {
        let v = self.value();
        let g = magnitude.value();
        let cout = *v.shape().last().unwrap_or(&0);
        if g.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "weight_norm",
                lhs: v.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut norms = vec![0.0; cout];
        for (i, x) in v.data().iter().enumerate() {
            norms[i % cout] += x * x;
        }
        for n in &mut norms {
            *n = n.sqrt();
            if !(*n > 0.0) {
                return Err(TensorError::NonPositive {
                    op: "weight_norm",
                    value: *n,
                });
            }
        }
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| g.data()[i % cout] * x / norms[i % cout])
            .collect();
        let grad = self.requires_grad() || magnitude.requires_grad();
        Ok(self.tape.push(
            Tensor::new(v.shape().to_vec(), data)?,
            Op::WeightNorm {
                v: self.id,
                g: magnitude.id,
                norms,
            },
            grad,
        ))
    }

    /// `out[i] = self[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var<'t>> {
        let a = self.value();
        if index.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                shape,
                len: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= a.numel()) {
            return Err(TensorError::Invalid {
                op: "gather",
                reason: format!("index {bad} out of range for {} elements", a.numel()),
            });
        }
        let data = index.iter().map(|&i| a.data()[i]).collect();
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Gather { a: self.id, index },
            self.requires_grad(),
        ))
    }

    /// Concatenate along the trailing (channel) axis.
    pub fn concat_channels(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let grad = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::ConcatChannels {
                a: self.id,
                b: other.id,
            },
            grad,
        ))
    }

    /// Channels `start..start + len` of the trailing axis.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let c = *a.shape().last().unwrap_or(&0);
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_channels",
                reason: format!("range {start}..{} outside {c} channels", start + len),
            });
        }
        let mut data = Vec::with_capacity(a.numel() / c * len);
        for row in a.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::SliceChannels { a: self.id, start },
            self.requires_grad(),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = a.reshape(shape)?;
        Ok(self
            .tape
            .push(out, Op::Reshape(self.id), self.requires_grad()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_scalar_and_channel() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[2, 3], |i| i as f64));
        let c = tape.var(Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap());
        let s = tape.var(Tensor::scalar(2.0));
        let y = x.add(c).unwrap().mul(s).unwrap();
        assert_eq!(y.value().data(), &[20.0, 42.0, 64.0, 26.0, 48.0, 70.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(c.grad(&g).unwrap().data(), &[4.0, 4.0, 4.0]);
        // d/ds sum((x + c) s) = sum(x + c)
        assert_eq!(s.grad(&g).unwrap().data(), &[(20.0 + 42.0 + 64.0 + 26.0 + 48.0 + 70.0) / 2.0]);
    }

    #[test]
    fn rank_changing_broadcast_rejected() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2]));
        let err = a.add(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![2]
            }
        );
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let a = tape.var(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(a.ln(), Err(TensorError::NonPositive { .. })));
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64));
        let b = tape.var(Tensor::from_fn(&[1, 2, 2, 3], |i| -(i as f64)));
        let c = a.concat_channels(b).unwrap();
        assert_eq!(c.shape(), vec![1, 2, 2, 4]);
        assert_eq!(*c.slice_channels(0, 1).unwrap().value(), *a.value());
        assert_eq!(*c.slice_channels(1, 3).unwrap().value(), *b.value());
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(x.grad(&g).unwrap().data(), &[7.0]);
    }
}
