use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{conv2d_backward, conv2d_forward, dense_forward, maxpool2_forward, relu_forward};
use super::{shape_err, NumericsError, Result, Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, dims: [usize; 5], cols: Vec<T> },
    MaxPool2 { x: usize, arg: Vec<usize> },
    Dense { x: usize, w: usize, b: usize, n: usize, inputs: usize, outputs: usize },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    AddScalar { x: usize },
    Sqrt { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumRows { x: usize, cols: usize },
    GatherRows { x: usize, rows: Vec<usize>, cols: usize },
    Reshape { x: usize },
    L2NormRows { x: usize, cols: usize, norms: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of the differentiable ops executed in one step.
///
/// Nodes are appended as ops run, so inputs always precede their consumers.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, v: Vec<T>) -> Result<Vec<T>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(NumericsError::NonFinite(op))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Record a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("node shapes are consistent")
    }

    /// `x: [c_in, h, w]` or `[n, c_in, h, w]`, `w: [c_out, c_in, 3, 3]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].shape.clone();
        let (batched, n, cin, h, wd) = match xs.as_slice() {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => return Err(shape_err("conv2d", format!("input must be 3-D or 4-D, got {xs:?}"))),
        };
        let ws = &self.nodes[wi].shape;
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv2d", format!("kernel must be [c_out, c_in, 3, 3], got {ws:?}")));
        }
        if ws[1] != cin {
            return Err(shape_err("conv2d", format!("channel mismatch: input {cin}, kernel {}", ws[1])));
        }
        let cout = ws[0];
        if self.nodes[bi].shape != [cout] {
            return Err(shape_err("conv2d", format!("bias must be [{cout}]")));
        }
        let mut cols = Vec::new();
        let out = conv2d_forward(
            &self.nodes[xi].value,
            n,
            cin,
            h,
            wd,
            &self.nodes[wi].value,
            cout,
            &self.nodes[bi].value,
            Some(&mut cols),
        );
        let out = check_finite("conv2d", out)?;
        let shape = if batched { vec![n, cout, h, wd] } else { vec![cout, h, wd] };
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        if !rg {
            cols = Vec::new();
        }
        Ok(self.push(shape, out, Op::Conv2d { x: xi, w: wi, b: bi, dims: [n, cin, h, wd, cout], cols }, rg))
    }

    /// 2x2 max pooling over the trailing two axes.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].shape.clone();
        if xs.len() < 2 {
            return Err(shape_err("maxpool2", format!("need at least 2 axes, got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let (out, arg) = maxpool2_forward(&self.nodes[xi].value, planes, h, w);
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.extend([h.div_ceil(2), w.div_ceil(2)]);
        let rg = self.rg(xi);
        Ok(self.push(shape, out, Op::MaxPool2 { x: xi, arg }, rg))
    }

    /// `x: [n_in]` or `[batch, n_in]`, `w: [m, n_in]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].shape.clone();
        let (batched, n, inputs) = match xs.as_slice() {
            [k] => (false, 1, *k),
            [n, k] => (true, *n, *k),
            _ => return Err(shape_err("dense", format!("input must be 1-D or 2-D, got {xs:?}"))),
        };
        let ws = &self.nodes[wi].shape;
        if ws.len() != 2 || ws[1] != inputs {
            return Err(shape_err("dense", format!("weight {ws:?} incompatible with {inputs} inputs")));
        }
        let outputs = ws[0];
        if self.nodes[bi].shape != [outputs] {
            return Err(shape_err("dense", format!("bias must be [{outputs}]")));
        }
        let out = dense_forward(&self.nodes[xi].value, n, inputs, &self.nodes[wi].value, outputs, &self.nodes[bi].value);
        let out = check_finite("dense", out)?;
        let shape = if batched { vec![n, outputs] } else { vec![outputs] };
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        Ok(self.push(shape, out, Op::Dense { x: xi, w: wi, b: bi, n, inputs, outputs }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = relu_forward(&self.nodes[xi].value);
        let (shape, rg) = (self.nodes[xi].shape.clone(), self.rg(xi));
        Ok(self.push(shape, out, Op::Relu { x: xi }, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Vec<T>)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.nodes[ai].shape, self.nodes[bi].shape)));
        }
        let out: Vec<T> = self.nodes[ai].value.iter().zip(&self.nodes[bi].value).map(|(x, y)| f(*x, *y)).collect();
        Ok((ai, bi, check_finite(name, out)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Sub { a: ai, b: bi }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = check_finite("scale", self.nodes[xi].value.iter().map(|v| *v * c).collect())?;
        let (shape, rg) = (self.nodes[xi].shape.clone(), self.rg(xi));
        Ok(self.push(shape, out, Op::Scale { x: xi, c }, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = check_finite("add_scalar", self.nodes[xi].value.iter().map(|v| *v + c).collect())?;
        let (shape, rg) = (self.nodes[xi].shape.clone(), self.rg(xi));
        Ok(self.push(shape, out, Op::AddScalar { x: xi }, rg))
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        if self.nodes[xi].value.iter().any(|v| *v <= T::zero()) {
            return Err(NumericsError::NonFinite("sqrt"));
        }
        let out = check_finite("sqrt", self.nodes[xi].value.iter().map(|v| v.sqrt()).collect())?;
        let (shape, rg) = (self.nodes[xi].shape.clone(), self.rg(xi));
        Ok(self.push(shape, out, Op::Sqrt { x: xi }, rg))
    }

    /// Sum of all elements, accumulated in double precision.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: f64 = self.nodes[xi].value.iter().map(|v| v.as_f64()).sum();
        let out = check_finite("sum", vec![T::from_f64(s)])?;
        let rg = self.rg(xi);
        Ok(self.push(Vec::new(), out, Op::Sum { x: xi }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.nodes[xi].value.len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: f64 = self.nodes[xi].value.iter().map(|v| v.as_f64()).sum();
        let out = check_finite("mean", vec![T::from_f64(s / n as f64)])?;
        let rg = self.rg(xi);
        Ok(self.push(Vec::new(), out, Op::Mean { x: xi }, rg))
    }

    /// Sum over the last axis: `[.., d] -> [..]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].shape.clone();
        let Some((&cols, lead)) = xs.split_last() else {
            return Err(shape_err("sum_rows", "scalar input"));
        };
        if cols == 0 {
            return Err(shape_err("sum_rows", "empty rows"));
        }
        let out: Vec<T> = self.nodes[xi]
            .value
            .chunks_exact(cols)
            .map(|r| T::from_f64(r.iter().map(|v| v.as_f64()).sum()))
            .collect();
        let out = check_finite("sum_rows", out)?;
        let rg = self.rg(xi);
        Ok(self.push(lead.to_vec(), out, Op::SumRows { x: xi, cols }, rg))
    }

    /// Select rows of a `[n, d]` matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].shape.clone();
        let [n, d] = xs[..] else {
            return Err(shape_err("gather_rows", format!("need 2-D input, got {xs:?}")));
        };
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let v = &self.nodes[xi].value;
        let out: Vec<T> = rows.iter().flat_map(|&r| v[r * d..(r + 1) * d].iter().copied()).collect();
        let rg = self.rg(xi);
        Ok(self.push(vec![rows.len(), d], out, Op::GatherRows { x: xi, rows: rows.to_vec(), cols: d }, rg))
    }

    /// Scale each row of the last axis to unit length: `y = x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].shape.clone();
        let Some(&cols) = xs.last() else {
            return Err(shape_err("l2_normalize_rows", "scalar input"));
        };
        if cols == 0 {
            return Err(shape_err("l2_normalize_rows", "empty rows"));
        }
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.nodes[xi].value.len());
        for row in self.nodes[xi].value.chunks_exact(cols) {
            let ss: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            let n = T::from_f64((ss + eps.as_f64()).sqrt());
            norms.push(n);
            out.extend(row.iter().map(|v| *v / n));
        }
        let out = check_finite("l2_normalize_rows", out)?;
        let rg = self.rg(xi);
        Ok(self.push(xs, out, Op::L2NormRows { x: xi, cols, norms }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.idx(x)?;
        if shape.iter().product::<usize>() != self.nodes[xi].value.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.nodes[xi].shape)));
        }
        let (value, rg) = (self.nodes[xi].value.clone(), self.rg(xi));
        Ok(self.push(shape, value, Op::Reshape { x: xi }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(NumericsError::NotScalar(self.nodes[li].shape.clone()));
        }
        if !self.nodes[li].requires_grad {
            return Err(NumericsError::Detached);
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize, g: impl FnOnce(&mut [T])) {
            if !nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]);
            g(slot);
        }

        for i in (0..=li).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, dims: [n, cin, h, wd, cout], cols } => {
                    let need_dx = nodes[*x].requires_grad;
                    let (dx, dw, db) =
                        conv2d_backward(&g, cols, *n, *cin, *h, *wd, &nodes[*w].value, *cout, need_dx);
                    if let Some(dx) = dx {
                        acc(&mut grads, &nodes, *x, |s| add_into(s, &dx));
                    }
                    acc(&mut grads, &nodes, *w, |s| add_into(s, &dw));
                    acc(&mut grads, &nodes, *b, |s| add_into(s, &db));
                }
                Op::MaxPool2 { x, arg } => acc(&mut grads, &nodes, *x, |s| {
                    for (gi, &src) in g.iter().zip(arg) {
                        s[src] = s[src] + *gi;
                    }
                }),
                Op::Dense { x, w, b, n, inputs, outputs } => {
                    let (n, k, m) = (*n, *inputs, *outputs);
                    acc(&mut grads, &nodes, *x, |s| {
                        // dx[n, k] += g[n, m] * W[m, k]
                        T::gemm(n, m, k, T::one(), &g, (m as isize, 1), &nodes[*w].value, (k as isize, 1), T::one(), s, (k as isize, 1));
                    });
                    acc(&mut grads, &nodes, *w, |s| {
                        // dW[m, k] += g^T[m, n] * x[n, k]
                        T::gemm(m, n, k, T::one(), &g, (1, m as isize), &nodes[*x].value, (k as isize, 1), T::one(), s, (k as isize, 1));
                    });
                    acc(&mut grads, &nodes, *b, |s| {
                        for row in g.chunks_exact(m) {
                            add_into(s, row);
                        }
                    });
                }
                Op::Relu { x } => acc(&mut grads, &nodes, *x, |s| {
                    for ((si, gi), xv) in s.iter_mut().zip(&g).zip(&nodes[*x].value) {
                        if *xv > T::zero() {
                            *si = *si + *gi;
                        }
                    }
                }),
                Op::Add { a, b } => {
                    acc(&mut grads, &nodes, *a, |s| add_into(s, &g));
                    acc(&mut grads, &nodes, *b, |s| add_into(s, &g));
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, &nodes, *a, |s| add_into(s, &g));
                    acc(&mut grads, &nodes, *b, |s| s.iter_mut().zip(&g).for_each(|(d, v)| *d = *d - *v));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, &nodes, *a, |s| {
                        for ((d, gi), o) in s.iter_mut().zip(&g).zip(bv) {
                            *d = *d + *gi * *o;
                        }
                    });
                    acc(&mut grads, &nodes, *b, |s| {
                        for ((d, gi), o) in s.iter_mut().zip(&g).zip(av) {
                            *d = *d + *gi * *o;
                        }
                    });
                }
                Op::Scale { x, c } => {
                    acc(&mut grads, &nodes, *x, |s| s.iter_mut().zip(&g).for_each(|(d, v)| *d = *d + *v * *c))
                }
                Op::AddScalar { x } => acc(&mut grads, &nodes, *x, |s| add_into(s, &g)),
                Op::Sqrt { x } => {
                    let y = &node.value;
                    let half = T::from_f64(0.5);
                    acc(&mut grads, &nodes, *x, |s| {
                        for ((d, gi), yi) in s.iter_mut().zip(&g).zip(y) {
                            *d = *d + *gi * half / *yi;
                        }
                    });
                }
                Op::Sum { x } => acc(&mut grads, &nodes, *x, |s| s.iter_mut().for_each(|d| *d = *d + g[0])),
                Op::Mean { x } => {
                    let n = T::from_f64(nodes[*x].value.len() as f64);
                    acc(&mut grads, &nodes, *x, |s| s.iter_mut().for_each(|d| *d = *d + g[0] / n));
                }
                Op::SumRows { x, cols } => acc(&mut grads, &nodes, *x, |s| {
                    for (row, gi) in s.chunks_exact_mut(*cols).zip(&g) {
                        row.iter_mut().for_each(|d| *d = *d + *gi);
                    }
                }),
                Op::GatherRows { x, rows, cols } => acc(&mut grads, &nodes, *x, |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                }),
                Op::Reshape { x } => acc(&mut grads, &nodes, *x, |s| add_into(s, &g)),
                Op::L2NormRows { x, cols, norms } => {
                    let y = &node.value;
                    acc(&mut grads, &nodes, *x, |s| {
                        // dx = (g - y (y . g)) / n
                        for (((srow, grow), yrow), n) in
                            s.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)).zip(y.chunks_exact(*cols)).zip(norms)
                        {
                            let dot = T::from_f64(grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
                            for ((d, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + (*gi - *yi * dot) / *n;
                            }
                        }
                    });
                }
            }
        }
        // Only leaf gradients are reported.
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Fold the gradient of `v` into `t`; leaves that received none add zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        if v.tape != self.tape {
            return Err(NumericsError::ForeignVar);
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![T::zero(); t.len()]),
        }
    }
}
