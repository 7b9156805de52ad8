use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom, DeconvGeom};
use super::{axis_split, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl From<&Var> for Var {
    fn from(v: &Var) -> Self {
        *v
    }
}

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBroadcast { x: Var, b: Var, axis: usize },
    MulBroadcast { x: Var, b: Var, axis: usize },
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    Normalize { x: Var, inv_std: Vec<T> },
    Sum(Var),
    Mean { x: Var, axes: Vec<usize> },
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    Deconv1d { x: Var, w: Var, geom: DeconvGeom },
    Window { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
}

#[derive(Debug, Clone)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of differentiable operations.
///
/// Nodes are stored in creation order, which is a valid topological order;
/// backward walks it in reverse. Every op validates shapes and, while the
/// finiteness guard is on (the default), rejects NaN/Inf outputs.
#[derive(Debug)]
pub struct Graph<T: Element = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
    guard: bool,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// The seed drives every random leaf created through this graph.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            guard: true,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_guard(&mut self, on: bool) {
        self.guard = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
    ) -> Result<Var> {
        if self.guard && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that participates in differentiation.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable leaf tagged with the caller's parameter key; its gradient
    /// is reported by [`Gradients::params`].
    pub fn param(&mut self, key: usize, t: &Tensor<T>) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((key, v));
        v
    }

    /// Uniform leaf in `[-bound, bound]` drawn from the graph's seeded stream.
    pub fn random_uniform(&mut self, shape: &[usize], bound: f64, requires_grad: bool) -> Var {
        let t = Tensor::uniform(shape, bound, &mut self.rng);
        self.push(t, Op::Leaf, requires_grad)
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            p,
            n,
            T::one(),
            self.vals(a),
            p as isize,
            1,
            self.vals(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push_op("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push_op("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push_op("sub", self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push_op("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.vals(x).iter().map(|&v| v * s).collect();
        self.push_op("scale", self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.vals(x).iter().map(|&v| v + s).collect();
        self.push_op("add_scalar", self.shape(x).to_vec(), out, Op::AddScalar(x))
    }

    fn broadcast(
        &self,
        name: &'static str,
        x: Var,
        b: Var,
        axis: usize,
        f: impl Fn(T, T) -> T,
    ) -> Result<Vec<T>> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(Error::shape(name, sx, sb));
        }
        let (outer, n, inner) = axis_split(sx, axis);
        let (xv, bv) = (self.vals(x), self.vals(b));
        let mut out = Vec::with_capacity(xv.len());
        for o in 0..outer {
            for (j, &bj) in bv.iter().enumerate() {
                let base = (o * n + j) * inner;
                out.extend(xv[base..base + inner].iter().map(|&v| f(v, bj)));
            }
        }
        Ok(out)
    }

    /// `x + b` with 1-D `b` broadcast along `axis` of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let out = self.broadcast("add_broadcast", x, b, axis, |v, c| v + c)?;
        self.push_op(
            "add_broadcast",
            self.shape(x).to_vec(),
            out,
            Op::AddBroadcast { x, b, axis },
        )
    }

    /// `x · b` with 1-D `b` broadcast along `axis` of `x`.
    pub fn mul_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let out = self.broadcast("mul_broadcast", x, b, axis, |v, c| v * c)?;
        self.push_op(
            "mul_broadcast",
            self.shape(x).to_vec(),
            out,
            Op::MulBroadcast { x, b, axis },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::arg(
                "transpose",
                format!("expected 2-D tensor, got {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose2(self.vals(x), r, c);
        self.push_op("transpose", vec![c, r], out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let requires_grad = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape(x), requires_grad))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::arg(
                "softmax",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let xv = self.vals(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        self.push_op("softmax", s, out, Op::Softmax { x, axis })
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF via `erf`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.vals(x).iter().map(|&v| gelu(v)).collect();
        self.push_op("gelu", self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Zero-mean, unit-variance normalization over the last axis
    /// (`eps` added to the biased variance).
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("tensors have at least one axis");
        let eps = T::c(eps);
        let dn = T::c(d as f64);
        let xv = self.vals(x);
        let rows = xv.len() / d;
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        self.push_op("normalize", s, out, Op::Normalize { x, inv_std })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.vals(x).iter().copied().sum();
        self.push_op("sum", vec![1], vec![total], Op::Sum(x))
    }

    /// Arithmetic mean over the listed axes; the reduced axes are removed
    /// (a full reduction yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::arg("mean", "empty reduction set"));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || *sorted.last().unwrap() >= s.len() {
            return Err(Error::arg(
                "mean",
                format!("invalid axes {axes:?} for shape {s:?}"),
            ));
        }
        let count: usize = sorted.iter().map(|&a| s[a]).product();
        let out_shape = reduced_shape(&s, &sorted);
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_len];
        let map = ReduceMap::new(&s, &sorted);
        for (i, &v) in self.vals(x).iter().enumerate() {
            let o = map.out_index(i);
            out[o] = out[o] + v;
        }
        let c = T::c(count as f64);
        out.iter_mut().for_each(|v| *v = *v / c);
        self.push_op("mean", out_shape, out, Op::Mean { x, axes: sorted })
    }

    /// Valid or padded grouped 1-D convolution.
    /// `x: [in_ch × L]`, `w: [out_ch × in_ch/groups × kernel]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || groups == 0 || stride == 0 {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let (cin, len) = (sx[0], sx[1]);
        let (cout, cin_g, kernel) = (sw[0], sw[1], sw[2]);
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let padded = len + pad.0 + pad.1;
        if padded < kernel {
            return Err(Error::TooShort {
                op: "conv1d",
                len,
                min: kernel.saturating_sub(pad.0 + pad.1),
            });
        }
        let geom = ConvGeom {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad_left: pad.0,
            pad_right: pad.1,
            groups,
            in_len: len,
        };
        let out = kernels::conv1d_forward(&geom, self.vals(x), self.vals(w));
        self.push_op(
            "conv1d",
            vec![cout, geom.out_len()],
            out,
            Op::Conv1d { x, w, geom },
        )
    }

    /// Transposed 1-D convolution, `x: [in_ch × L]`, `w: [in_ch × out_ch × kernel]`,
    /// output length `(L − 1)·stride + kernel`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[0] || stride == 0 {
            return Err(Error::shape("conv_transpose1d", sx, sw));
        }
        let geom = DeconvGeom {
            in_channels: sx[0],
            out_channels: sw[1],
            kernel: sw[2],
            stride,
            in_len: sx[1],
        };
        let out = kernels::deconv1d_forward(&geom, self.vals(x), self.vals(w));
        self.push_op(
            "conv_transpose1d",
            vec![geom.out_channels, geom.out_len()],
            out,
            Op::Deconv1d { x, w, geom },
        )
    }

    /// Window `[start, start + len)` along `axis`; positions past the end of
    /// the input read as zero (so this both slices and right-pads).
    pub fn window(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 {
            return Err(Error::arg(
                "window",
                format!("axis {axis}, len {len} for shape {s:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let xv = self.vals(x);
        let mut out = vec![T::zero(); outer * len * inner];
        let avail = n.saturating_sub(start).min(len);
        for o in (0..outer).filter(|_| avail > 0) {
            let src = (o * n + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + avail * inner].copy_from_slice(&xv[src..src + avail * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push_op("window", shape, out, Op::Window { x, axis, start })
    }

    /// Truncates or right-zero-pads `axis` to exactly `len`.
    pub fn resize(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        if self.shape(x).get(axis) == Some(&len) {
            return Ok(x);
        }
        self.window(x, axis, 0, len)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::arg("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::arg(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.vals(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push_op(
            "concat",
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let axes: Vec<usize> = (0..self.shape(sq).len()).collect();
        self.mean(sq, &axes)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lnode.value.shape()
            )));
        }
        if !lnode.requires_grad {
            return Err(Error::Backward(
                "loss is detached: no gradient-requiring input reaches it".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            grads,
            params: self
                .params
                .iter()
                .filter(|(_, v)| v.0 <= loss.0)
                .copied()
                .collect(),
        })
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        // Lazily zero-initialized accumulator for an input node.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = Var::from($v);
                grads[v.0].get_or_insert_with(|| vec![T::zero(); numel(v)])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, p, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    // dA += dY · Bᵀ
                    T::gemm(
                        m,
                        n,
                        p,
                        T::one(),
                        dy,
                        n as isize,
                        1,
                        self.vals(*b),
                        1,
                        n as isize,
                        T::one(),
                        acc!(a),
                        p as isize,
                        1,
                    );
                }
                if wants(*b) {
                    // dB += Aᵀ · dY
                    T::gemm(
                        p,
                        m,
                        n,
                        T::one(),
                        self.vals(*a),
                        1,
                        p as isize,
                        dy,
                        n as isize,
                        1,
                        T::one(),
                        acc!(b),
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(acc!(v), dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(acc!(a), dy);
                }
                if wants(*b) {
                    acc!(b).iter_mut().zip(dy).for_each(|(g, &d)| *g = *g - d);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.vals(*b);
                    acc!(a)
                        .iter_mut()
                        .zip(dy.iter().zip(bv))
                        .for_each(|(g, (&d, &y))| *g = *g + d * y);
                }
                if wants(*b) {
                    let av = self.vals(*a);
                    acc!(b)
                        .iter_mut()
                        .zip(dy.iter().zip(av))
                        .for_each(|(g, (&d, &x))| *g = *g + d * x);
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    acc!(x)
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, &d)| *g = *g + d * *s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(*x) {
                    add_into(acc!(x), dy);
                }
            }
            Op::AddBroadcast { x, b, axis } => {
                if wants(*x) {
                    add_into(acc!(x), dy);
                }
                if wants(*b) {
                    let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                    let gb = acc!(b);
                    for o in 0..outer {
                        for (j, g) in gb.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *g = *g + dy[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MulBroadcast { x, b, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                if wants(*x) {
                    let bv = self.vals(*b);
                    let gx = acc!(x);
                    for o in 0..outer {
                        for (j, &bj) in bv.iter().enumerate() {
                            let base = (o * n + j) * inner;
                            for t in base..base + inner {
                                gx[t] = gx[t] + dy[t] * bj;
                            }
                        }
                    }
                }
                if wants(*b) {
                    let xv = self.vals(*x);
                    let gb = acc!(b);
                    for o in 0..outer {
                        for (j, g) in gb.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            let s: T = (base..base + inner).map(|t| dy[t] * xv[t]).sum();
                            *g = *g + s;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let s = self.shape(*x);
                    let dt = transpose2(dy, s[1], s[0]);
                    add_into(acc!(x), &dt);
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = node.value.data();
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let gx = acc!(x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                let k = at(j);
                                gx[k] = gx[k] + y[k] * (dy[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = self.vals(*x);
                    acc!(x)
                        .iter_mut()
                        .zip(dy.iter().zip(xv))
                        .for_each(|(g, (&d, &v))| *g = *g + d * gelu_grad(v));
                }
            }
            Op::Normalize { x, inv_std } => {
                if wants(*x) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let dn = T::c(d as f64);
                    let gx = acc!(x);
                    for (r, &rs) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (dyr, yr) = (&dy[span.clone()], &y[span.clone()]);
                        let mean_dy = dyr.iter().copied().sum::<T>() / dn;
                        let mean_dyy = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for ((g, &dv), &yv) in gx[span].iter_mut().zip(dyr).zip(yr) {
                            *g = *g + rs * (dv - mean_dy - yv * mean_dyy);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc!(x).iter_mut().for_each(|g| *g = *g + dy[0]);
                }
            }
            Op::Mean { x, axes } => {
                if wants(*x) {
                    let s = self.shape(*x);
                    let count: usize = axes.iter().map(|&a| s[a]).product();
                    let c = T::c(count as f64);
                    let map = ReduceMap::new(s, axes);
                    for (i, g) in acc!(x).iter_mut().enumerate() {
                        *g = *g + dy[map.out_index(i)] / c;
                    }
                }
            }
            Op::Conv1d { x, w, geom } => {
                let (xv, wv) = (self.vals(*x), self.vals(*w));
                let mut gx = wants(*x).then(|| {
                    grads[x.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); numel(*x)])
                });
                let mut gw = wants(*w).then(|| {
                    grads[w.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); numel(*w)])
                });
                kernels::conv1d_backward(geom, xv, wv, dy, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w.0] = Some(g);
                }
            }
            Op::Deconv1d { x, w, geom } => {
                let (xv, wv) = (self.vals(*x), self.vals(*w));
                let mut gx = wants(*x).then(|| {
                    grads[x.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); numel(*x)])
                });
                let mut gw = wants(*w).then(|| {
                    grads[w.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); numel(*w)])
                });
                kernels::deconv1d_backward(geom, xv, wv, dy, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w.0] = Some(g);
                }
            }
            Op::Window { x, axis, start } => {
                if wants(*x) {
                    let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    let avail = n.saturating_sub(*start).min(len);
                    let gx = acc!(x);
                    for o in (0..outer).filter(|_| avail > 0) {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        add_into(
                            &mut gx[dst..dst + avail * inner],
                            &dy[src..src + avail * inner],
                        );
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if wants(v) {
                        let gv = acc!(v);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut gv[o * n * inner..(o + 1) * n * inner],
                                &dy[src..src + n * inner],
                            );
                        }
                    }
                    offset += n;
                }
            }
        }
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f64> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to `v`, if `v` lies on a differentiable path
    /// to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(parameter key, gradient)` for every parameter leaf reached.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(key, v)| self.get(v).map(|g| (key, g)))
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddBroadcast { x, b, .. } | Op::MulBroadcast { x, b, .. } => vec![*x, *b],
        Op::Conv1d { x, w, .. } | Op::Deconv1d { x, w, .. } => vec![*x, *w],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Transpose(x)
        | Op::Reshape(x)
        | Op::Gelu(x)
        | Op::Sum(x)
        | Op::Softmax { x, .. }
        | Op::Normalize { x, .. }
        | Op::Mean { x, .. }
        | Op::Window { x, .. } => vec![*x],
        Op::Concat { xs, .. } => xs.clone(),
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn transpose2<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn std_normal_cdf<T: Element>(x: T) -> T {
    T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    x * std_normal_cdf(x)
}

fn gelu_grad<T: Element>(x: T) -> T {
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    std_normal_cdf(x) + x * pdf
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if kept.is_empty() {
        vec![1]
    } else {
        kept
    }
}

/// Maps flat input indices to flat indices of the reduced output.
struct ReduceMap {
    /// Per input axis: (input stride, output stride or 0 when reduced, size).
    axes: Vec<(usize, usize, usize)>,
}

impl ReduceMap {
    fn new(shape: &[usize], reduced: &[usize]) -> Self {
        let n = shape.len();
        let mut in_stride = vec![1; n];
        for i in (0..n.saturating_sub(1)).rev() {
            in_stride[i] = in_stride[i + 1] * shape[i + 1];
        }
        let mut out_stride = vec![0; n];
        let mut acc = 1;
        for i in (0..n).rev() {
            if !reduced.contains(&i) {
                out_stride[i] = acc;
                acc *= shape[i];
            }
        }
        Self {
            axes: (0..n)
                .map(|i| (in_stride[i], out_stride[i], shape[i]))
                .collect(),
        }
    }

    fn out_index(&self, flat: usize) -> usize {
        self.axes
            .iter()
            .map(|&(is, os, size)| (flat / is) % size * os)
            .sum()
    }
}
