//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! Every forward pass builds a fresh [`Graph`]. Operations are coarse (a whole
//! convolution, a whole loss) and each one carries a hand-written backward
//! rule. Losses are registered through [`Graph::scalar_fn`], which records a
//! value together with its local gradients.

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Geometry of the fused spatio-temporal stem convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemGeom {
    pub frames: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_t: usize,
    pub kernel_s: usize,
    pub stride_s: usize,
}

impl StemGeom {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel_s) / self.stride_s + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kernel_s) / self.stride_s + 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Stem {
        x: usize,
        w: usize,
        b: usize,
        geom: StemGeom,
        pre: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
    },
    Silu(usize),
    Sigmoid(usize),
    Softplus(usize),
    AvgPoolTime {
        x: usize,
        r: usize,
    },
    MeanTime(usize),
    MaxTime {
        x: usize,
        argmax: Vec<usize>,
    },
    RowMatMul {
        x: usize,
        w: usize,
    },
    VecMatMul {
        v: usize,
        w: usize,
    },
    MulRows {
        x: usize,
        v: usize,
    },
    Mul(usize, usize),
    Add(usize, usize),
    Concat(usize, usize),
    WeightedSum(Vec<(usize, f64)>),
    ScalarFn {
        inputs: Vec<usize>,
        grads: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}


impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Fused `conv3d -> SiLU -> global spatial mean`.
    ///
    /// `x` is `[T, Cin, H, W]`, `w` is `[Cout, Cin, kt, ks, ks]`, `b` is `[Cout]`.
    /// Time is padded by edge replication so a static clip produces no
    /// spurious response at its ends. Output is `[T, Cout]`.
    pub fn stem(&mut self, x: Var, w: Var, b: Var, kernel_s: usize, stride_s: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::shape(format!("stem expects rank-4 input and rank-5 weight, got {xs:?} / {ws:?}")));
        }
        let geom = StemGeom {
            frames: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel_t: ws[2],
            kernel_s,
            stride_s,
        };
        if ws[1] != geom.in_channels || ws[3] != kernel_s || ws[4] != kernel_s {
            return Err(Error::shape(format!("stem weight {ws:?} incompatible with input {xs:?}")));
        }
        if geom.height < kernel_s || geom.width < kernel_s || stride_s == 0 {
            return Err(Error::shape("stem kernel larger than frame"));
        }
        if self.shape(b) != [geom.out_channels] {
            return Err(Error::shape("stem bias length"));
        }
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let (t_n, cin, h, wd, cout, kt, ks) = (
            geom.frames,
            geom.in_channels,
            geom.height,
            geom.width,
            geom.out_channels,
            geom.kernel_t,
            kernel_s,
        );
        let pt = kt / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut pre = vec![0.0; t_n * cout * ho * wo];
        let mut out = vec![0.0; t_n * cout];
        let inv_area = 1.0 / (ho * wo) as f64;
        for t in 0..t_n {
            for co in 0..cout {
                let base = (t * cout + co) * ho * wo;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bv[co];
                        for dt in 0..kt {
                            let tt = (t + dt).saturating_sub(pt).min(t_n - 1);
                            for ci in 0..cin {
                                let wbase = ((co * cin + ci) * kt + dt) * ks * ks;
                                let xbase = (tt * cin + ci) * h * wd;
                                for di in 0..ks {
                                    let xrow = xbase + (i * stride_s + di) * wd + j * stride_s;
                                    let wrow = wbase + di * ks;
                                    for dj in 0..ks {
                                        acc += wv[wrow + dj] * xv[xrow + dj];
                                    }
                                }
                            }
                        }
                        pre[base + i * wo + j] = acc;
                        out[t * cout + co] += silu(acc);
                    }
                }
                out[t * cout + co] *= inv_area;
            }
        }
        let value = Tensor::from_parts(vec![t_n, cout], out);
        Ok(self.push(
            value,
            Op::Stem {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                pre,
            },
            &[x.0, w.0, b.0],
        ))
    }

    /// Same-padded temporal convolution. `x: [T, Cin]`, `w: [Cout, Cin, k]`
    /// with odd `k`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[1] || ws[2].is_multiple_of(2) {
            return Err(Error::shape(format!("conv1d input {xs:?} weight {ws:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv1d bias length"));
        }
        let (t_n, cin, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; t_n * cout];
        for t in 0..t_n {
            for co in 0..cout {
                let mut acc = bv[co];
                for dk in 0..k {
                    let tt = t as isize + dk as isize - pad as isize;
                    if tt < 0 || tt >= t_n as isize {
                        continue;
                    }
                    let xrow = &xv[tt as usize * cin..(tt as usize + 1) * cin];
                    for (ci, xval) in xrow.iter().enumerate() {
                        acc += wv[(co * cin + ci) * k + dk] * xval;
                    }
                }
                out[t * cout + co] = acc;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t_n, cout], out),
            Op::Conv1d { x: x.0, w: w.0, b: b.0 },
            &[x.0, w.0, b.0],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu);
        self.push(v, Op::Silu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x.0), &[x.0])
    }

    /// Non-overlapping average pooling along time with stride `r`; trailing
    /// frames that do not fill a window are dropped.
    pub fn avg_pool_time(&mut self, x: Var, r: usize) -> Result<Var> {
        let (t_n, c) = (self.value(x).rows(), self.value(x).cols());
        if r == 0 || t_n < r {
            return Err(Error::shape(format!("cannot pool {t_n} steps by {r}")));
        }
        let t_out = t_n / r;
        let xv = self.value(x).data();
        let mut out = vec![0.0; t_out * c];
        for to in 0..t_out {
            for k in 0..r {
                let row = &xv[(to * r + k) * c..(to * r + k + 1) * c];
                for (o, v) in out[to * c..(to + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(
            Tensor::from_parts(vec![t_out, c], out),
            Op::AvgPoolTime { x: x.0, r },
            &[x.0],
        ))
    }

    /// `[T, D] -> [D]` mean over time.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (t_n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for t in 0..t_n {
            for (o, v) in out.iter_mut().zip(xv.row(t)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= t_n as f64);
        self.push(Tensor::from_parts(vec![c], out), Op::MeanTime(x.0), &[x.0])
    }

    /// `[T, D] -> [D]` max over time (first maximiser wins ties).
    pub fn max_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (t_n, c) = (xv.rows(), xv.cols());
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0; c];
        for t in 0..t_n {
            for (d, v) in xv.row(t).iter().enumerate() {
                if *v > out[d] {
                    out[d] = *v;
                    argmax[d] = t;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![c], out),
            Op::MaxTime { x: x.0, argmax },
            &[x.0],
        )
    }

    /// `[T, D] x [D, E] -> [T, E]`, i.e. `W^T x_t` for every row.
    pub fn row_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(format!("row_matmul {xs:?} x {ws:?}")));
        }
        let (t_n, d, e) = (xs[0], xs[1], ws[1]);
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; t_n * e];
        for t in 0..t_n {
            for k in 0..d {
                let a = xv[t * d + k];
                for j in 0..e {
                    out[t * e + j] += a * wv[k * e + j];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t_n, e], out),
            Op::RowMatMul { x: x.0, w: w.0 },
            &[x.0, w.0],
        ))
    }

    /// `[D] x [D, E] -> [E]`, i.e. `W^T v`.
    pub fn vec_matmul(&mut self, v: Var, w: Var) -> Result<Var> {
        let (vs, ws) = (self.shape(v).to_vec(), self.shape(w).to_vec());
        if vs.len() != 1 || ws.len() != 2 || vs[0] != ws[0] {
            return Err(Error::shape(format!("vec_matmul {vs:?} x {ws:?}")));
        }
        let (d, e) = (ws[0], ws[1]);
        let (vv, wv) = (self.value(v).data(), self.value(w).data());
        let mut out = vec![0.0; e];
        for k in 0..d {
            for j in 0..e {
                out[j] += vv[k] * wv[k * e + j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![e], out),
            Op::VecMatMul { v: v.0, w: w.0 },
            &[v.0, w.0],
        ))
    }

    /// Broadcast multiply every row of `x: [T, D]` by `v: [D]`.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if xs.len() != 2 || vs != [xs[1]] {
            return Err(Error::shape(format!("mul_rows {xs:?} by {vs:?}")));
        }
        let d = xs[1];
        let vv = self.value(v).data().to_vec();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * vv[i % d])
            .collect();
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::MulRows { x: x.0, v: v.0 },
            &[x.0, v.0],
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("mul {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Channel concatenation of two `[T, *]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (t_n, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(t_n * (ca + cb));
        for t in 0..t_n {
            out.extend_from_slice(self.value(a).row(t));
            out.extend_from_slice(self.value(b).row(t));
        }
        Ok(self.push(
            Tensor::from_parts(vec![t_n, ca + cb], out),
            Op::Concat(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    /// `Σ c_i · x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum operands differ in shape"));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let ids: Vec<usize> = terms.iter().map(|(v, _)| v.0).collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedSum(terms.iter().map(|(v, c)| (v.0, *c)).collect()),
            &ids,
        ))
    }

    /// Registers a scalar function whose value and per-input gradients were
    /// computed analytically by the caller.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Var {
        debug_assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            debug_assert_eq!(self.value(*v).len(), g.len());
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: ids.clone(),
                grads,
            },
            &ids,
        )
    }

    /// Backpropagates from the scalar `root`. Returns per-node gradients;
    /// nodes outside the root's trainable ancestry keep `None`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let n = self.nodes[id].value.len();
        Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Stem { x, w, b, geom, pre } => self.stem_backward(*x, *w, *b, geom, pre, g, grads),
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (t_n, cin) = (xv.rows(), xv.cols());
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let pad = k / 2;
                if let Some(gb) = self.acc(grads, *b) {
                    for t in 0..t_n {
                        for co in 0..cout {
                            gb[co] += g[t * cout + co];
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for t in 0..t_n {
                        for dk in 0..k {
                            let tt = t as isize + dk as isize - pad as isize;
                            if tt < 0 || tt >= t_n as isize {
                                continue;
                            }
                            let xrow = xv.row(tt as usize);
                            for co in 0..cout {
                                let go = g[t * cout + co];
                                for (ci, xval) in xrow.iter().enumerate() {
                                    gw[(co * cin + ci) * k + dk] += go * xval;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let wd = wv.data();
                    for t in 0..t_n {
                        for dk in 0..k {
                            let tt = t as isize + dk as isize - pad as isize;
                            if tt < 0 || tt >= t_n as isize {
                                continue;
                            }
                            let tt = tt as usize;
                            for co in 0..cout {
                                let go = g[t * cout + co];
                                for ci in 0..cin {
                                    gx[tt * cin + ci] += go * wd[(co * cin + ci) * k + dk];
                                }
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.nodes[*x].value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * silu_grad(xv[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[id].value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.nodes[*x].value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                }
            }
            Op::AvgPoolTime { x, r } => {
                let c = self.nodes[*x].value.cols();
                let t_out = self.nodes[id].value.rows();
                let inv = 1.0 / *r as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for to in 0..t_out {
                        for k in 0..*r {
                            for ch in 0..c {
                                gx[(to * r + k) * c + ch] += g[to * c + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::MeanTime(x) => {
                let (t_n, c) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                let inv = 1.0 / t_n as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for t in 0..t_n {
                        for d in 0..c {
                            gx[t * c + d] += g[d] * inv;
                        }
                    }
                }
            }
            Op::MaxTime { x, argmax } => {
                let c = self.nodes[*x].value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &t) in argmax.iter().enumerate() {
                        gx[t * c + d] += g[d];
                    }
                }
            }
            Op::RowMatMul { x, w } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (t_n, d) = (xv.rows(), xv.cols());
                let e = wv.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for t in 0..t_n {
                        for k in 0..d {
                            let mut s = 0.0;
                            for j in 0..e {
                                s += g[t * e + j] * wv.data()[k * e + j];
                            }
                            gx[t * d + k] += s;
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for t in 0..t_n {
                        for k in 0..d {
                            let a = xv.data()[t * d + k];
                            for j in 0..e {
                                gw[k * e + j] += a * g[t * e + j];
                            }
                        }
                    }
                }
            }
            Op::VecMatMul { v, w } => {
                let (vv, wv) = (&self.nodes[*v].value, &self.nodes[*w].value);
                let (d, e) = (wv.rows(), wv.cols());
                if let Some(gv) = self.acc(grads, *v) {
                    for k in 0..d {
                        for j in 0..e {
                            gv[k] += g[j] * wv.data()[k * e + j];
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for k in 0..d {
                        for j in 0..e {
                            gw[k * e + j] += vv.data()[k] * g[j];
                        }
                    }
                }
            }
            Op::MulRows { x, v } => {
                let (xv, vv) = (&self.nodes[*x].value, &self.nodes[*v].value);
                let d = vv.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * vv.data()[i % d];
                    }
                }
                if let Some(gv) = self.acc(grads, *v) {
                    for i in 0..g.len() {
                        gv[i % d] += g[i] * xv.data()[i];
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Add(a, b) => {
                for src in [*a, *b] {
                    if let Some(gs) = self.acc(grads, src) {
                        for i in 0..g.len() {
                            gs[i] += g[i];
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                let t_n = self.nodes[*a].value.rows();
                if let Some(ga) = self.acc(grads, *a) {
                    for t in 0..t_n {
                        for c in 0..ca {
                            ga[t * ca + c] += g[t * (ca + cb) + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for t in 0..t_n {
                        for c in 0..cb {
                            gb[t * cb + c] += g[t * (ca + cb) + ca + c];
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(src, c) in terms {
                    if let Some(gs) = self.acc(grads, src) {
                        for i in 0..g.len() {
                            gs[i] += c * g[i];
                        }
                    }
                }
            }
            Op::ScalarFn { inputs, grads: local } => {
                for (&src, lg) in inputs.iter().zip(local) {
                    if let Some(gs) = self.acc(grads, src) {
                        for i in 0..lg.len() {
                            gs[i] += g[0] * lg[i];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn stem_backward(
        &self,
        x: usize,
        w: usize,
        b: usize,
        geom: &StemGeom,
        pre: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let (t_n, cin, h, wd, cout, kt, ks, st) = (
            geom.frames,
            geom.in_channels,
            geom.height,
            geom.width,
            geom.out_channels,
            geom.kernel_t,
            geom.kernel_s,
            geom.stride_s,
        );
        let pt = kt / 2;
        let inv_area = 1.0 / (ho * wo) as f64;
        // dL/dpre
        let mut gpre = vec![0.0; pre.len()];
        for t in 0..t_n {
            for co in 0..cout {
                let go = g[t * cout + co] * inv_area;
                let base = (t * cout + co) * ho * wo;
                for p in 0..ho * wo {
                    gpre[base + p] = go * silu_grad(pre[base + p]);
                }
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for t in 0..t_n {
                for co in 0..cout {
                    let base = (t * cout + co) * ho * wo;
                    gb[co] += gpre[base..base + ho * wo].iter().sum::<f64>();
                }
            }
        }
        let xv = self.nodes[x].value.data();
        if let Some(gw) = self.acc(grads, w) {
            for t in 0..t_n {
                for co in 0..cout {
                    let base = (t * cout + co) * ho * wo;
                    for dt in 0..kt {
                        let tt = (t + dt).saturating_sub(pt).min(t_n - 1);
                        for ci in 0..cin {
                            let wbase = ((co * cin + ci) * kt + dt) * ks * ks;
                            let xbase = (tt * cin + ci) * h * wd;
                            for i in 0..ho {
                                for j in 0..wo {
                                    let gp = gpre[base + i * wo + j];
                                    for di in 0..ks {
                                        let xrow = xbase + (i * st + di) * wd + j * st;
                                        let wrow = wbase + di * ks;
                                        for dj in 0..ks {
                                            gw[wrow + dj] += gp * xv[xrow + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let wv = self.nodes[w].value.data();
        if let Some(gx) = self.acc(grads, x) {
            for t in 0..t_n {
                for co in 0..cout {
                    let base = (t * cout + co) * ho * wo;
                    for dt in 0..kt {
                        let tt = (t + dt).saturating_sub(pt).min(t_n - 1);
                        for ci in 0..cin {
                            let wbase = ((co * cin + ci) * kt + dt) * ks * ks;
                            let xbase = (tt * cin + ci) * h * wd;
                            for i in 0..ho {
                                for j in 0..wo {
                                    let gp = gpre[base + i * wo + j];
                                    for di in 0..ks {
                                        let xrow = xbase + (i * st + di) * wd + j * st;
                                        let wrow = wbase + di * ks;
                                        for dj in 0..ks {
                                            gx[xrow + dj] += gp * wv[wrow + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when no path exists.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn has_path(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
