use crate::tensor::{matmul_raw, transpose_raw, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Append-only record of one forward pass. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type Result<T> = std::result::Result<T, TensorError>;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a differentiable leaf (a parameter or input needing gradients).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None, true)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node { value, parents, backward, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let parents = parents.into_iter().map(|p| p.0).collect();
        if needs {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, parents, None, false)
        }
    }

    fn shape_err(op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch { op, detail }
    }

    // ── elementwise binary ──────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(|g, inp, _| {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(inp[1].data()).map(|(gv, y)| gv * y).collect(),
                )
                .unwrap();
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(inp[0].data()).map(|(gv, x)| gv * x).collect(),
                )
                .unwrap();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x / y)
                .collect(),
        )?;
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(|g, inp, _| {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(inp[1].data()).map(|(gv, y)| gv / y).collect(),
                )
                .unwrap();
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inp[0].data().iter().zip(inp[1].data()))
                        .map(|(gv, (x, y))| -gv * x / (y * y))
                        .collect(),
                )
                .unwrap();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// `x + b` where `x` is `[N, C]` and `b` is `[C]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape().to_vec(), self.value(b).shape().to_vec());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Self::shape_err("add_bias", format!("{:?} + {:?}", xs, bs)));
        }
        let c = xs[1];
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(b).data();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(bd) {
                *v += *bv;
            }
        }
        Ok(self.record(
            Tensor::new(xs, data)?,
            vec![x, b],
            Box::new(move |g, _, _| {
                let mut db = vec![0.0f32; c];
                for row in g.data().chunks(c) {
                    for (s, v) in db.iter_mut().zip(row) {
                        *s += *v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(db))]
            }),
        ))
    }

    /// `x * s` columnwise: `x` is `[N, C]`, `s` is `[C]`.
    pub fn mul_bias(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x).shape().to_vec(), self.value(s).shape().to_vec());
        if xs.len() != 2 || ss.len() != 1 || xs[1] != ss[0] {
            return Err(Self::shape_err("mul_bias", format!("{:?} * {:?}", xs, ss)));
        }
        let c = xs[1];
        let sd = self.value(s).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, sv) in row.iter_mut().zip(&sd) {
                *v *= *sv;
            }
        }
        Ok(self.record(
            Tensor::new(xs, data)?,
            vec![x, s],
            Box::new(move |g, inp, _| {
                let mut dx = g.clone();
                for row in dx.data_mut().chunks_mut(c) {
                    for (v, sv) in row.iter_mut().zip(inp[1].data()) {
                        *v *= *sv;
                    }
                }
                let mut ds = vec![0.0f32; c];
                for (grow, xrow) in g.data().chunks(c).zip(inp[0].data().chunks(c)) {
                    for j in 0..c {
                        ds[j] += grow[j] * xrow[j];
                    }
                }
                vec![Some(dx), Some(Tensor::from_vec(ds))]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.record(out, vec![x], Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.record(out, vec![x], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Multiply every element of `x` by a scalar-tensor variable `s`.
    pub fn scale_by_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Self::shape_err(
                "scale_by_var",
                format!("scale must be scalar, got {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.record(
            out,
            vec![x, s],
            Box::new(|g, inp, _| {
                let sv = inp[1].item();
                let dx = g.map(|v| v * sv);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(inp[0].data())
                    .map(|(gv, xv)| *gv as f64 * *xv as f64)
                    .sum();
                vec![Some(dx), Some(Tensor::scalar(ds as f32))]
            }),
        ))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asp, bsp) = (self.value(a).shape(), self.value(b).shape());
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(Self::shape_err("matmul", format!("{:?} x {:?}", asp, bsp)));
        }
        let out = matmul_raw(self.value(a), self.value(b));
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(|g, inp, _| {
                let da = matmul_raw(g, &transpose_raw(inp[1]));
                let db = matmul_raw(&transpose_raw(inp[0]), g);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(Self::shape_err(
                "transpose",
                format!("need 2-D, got {:?}", self.value(a).shape()),
            ));
        }
        let out = transpose_raw(self.value(a));
        Ok(self.record(out, vec![a], Box::new(|g, _, _| vec![Some(transpose_raw(g))])))
    }

    // ── elementwise unary ──────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(
            out,
            vec![x],
            Box::new(|g, inp, _| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inp[0].data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.record(
            out,
            vec![x],
            Box::new(|g, _, y| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus_scalar);
        self.record(
            out,
            vec![x],
            Box::new(|g, inp, _| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inp[0].data())
                        .map(|(gv, xv)| gv * sigmoid_scalar(*xv))
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::sqrt);
        self.record(
            out,
            vec![x],
            Box::new(|g, _, y| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * 0.5 / yv)
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::ln);
        self.record(
            out,
            vec![x],
            Box::new(|g, inp, _| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inp[0].data())
                        .map(|(gv, xv)| gv / xv)
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::abs);
        self.record(
            out,
            vec![x],
            Box::new(|g, inp, _| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inp[0].data())
                        .map(|(gv, xv)| {
                            if *xv > 0.0 {
                                *gv
                            } else if *xv < 0.0 {
                                -*gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    pub fn pow_const(&mut self, x: Var, p: f32) -> Var {
        let out = self.value(x).map(|v| v.powf(p));
        self.record(
            out,
            vec![x],
            Box::new(move |g, inp, _| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inp[0].data())
                        .map(|(gv, xv)| gv * p * xv.powf(p - 1.0))
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.record(
            out,
            vec![x],
            Box::new(move |g, inp, _| {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inp[0].data())
                        .map(|(gv, xv)| if *xv >= lo && *xv <= hi { *gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                vec![Some(dx)]
            }),
        )
    }

    /// `[.., D]` -> `[.., 2D]`: first half `sin(x)`, second half `cos(x)`,
    /// along the last axis.
    pub fn sin_cos(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            return Err(Self::shape_err("sin_cos", "0-d tensor".into()));
        }
        let d = *shape.last().unwrap();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 2 * d;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len() * 2);
        for row in xd.chunks(d) {
            data.extend(row.iter().map(|v| v.sin()));
            data.extend(row.iter().map(|v| v.cos()));
        }
        Ok(self.record(
            Tensor::new(out_shape, data)?,
            vec![x],
            Box::new(move |g, inp, _| {
                let mut dx = vec![0.0f32; inp[0].numel()];
                for (i, (grow, xrow)) in
                    g.data().chunks(2 * d).zip(inp[0].data().chunks(d)).enumerate()
                {
                    for j in 0..d {
                        dx[i * d + j] =
                            grow[j] * xrow[j].cos() - grow[d + j] * xrow[j].sin();
                    }
                }
                vec![Some(Tensor::new(inp[0].shape().to_vec(), dx).unwrap())]
            }),
        ))
    }

    // ── normalization / reductions ─────────────────────────────────────

    /// Numerically stable softmax along `axis`. Entries equal to `-inf`
    /// get weight exactly zero. NaN inputs propagate.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Self::shape_err(
                "softmax",
                format!("axis {} out of range for {:?}", axis, shape),
            ));
        }
        let k = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![0.0f32; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * k * inner + j * inner + i;
                let mut mx = f32::NEG_INFINITY;
                for j in 0..k {
                    mx = mx.max(xd[idx(j)]);
                }
                let mut sum = 0.0f64;
                for j in 0..k {
                    let e = (xd[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    sum += e as f64;
                }
                for j in 0..k {
                    data[idx(j)] = (data[idx(j)] as f64 / sum) as f32;
                }
            }
        }
        Ok(self.record(
            Tensor::new(shape, data)?,
            vec![x],
            Box::new(move |g, _, y| {
                let mut dx = vec![0.0f32; y.numel()];
                let (gd, yd) = (g.data(), y.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * k * inner + j * inner + i;
                        let mut dot = 0.0f64;
                        for j in 0..k {
                            dot += gd[idx(j)] as f64 * yd[idx(j)] as f64;
                        }
                        for j in 0..k {
                            dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot as f32);
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx).unwrap())]
            }),
        ))
    }

    /// Normalize the last axis to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Self::shape_err("layer_norm", "0-d tensor".into()))?;
        let xd = self.value(x).data();
        let mut data = vec![0.0f32; xd.len()];
        for (orow, xrow) in data.chunks_mut(c).zip(xd.chunks(c)) {
            let mean = xrow.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = xrow.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = ((v as f64 - mean) * inv) as f32;
            }
        }
        Ok(self.record(
            Tensor::new(shape, data)?,
            vec![x],
            Box::new(move |g, inp, y| {
                let mut dx = vec![0.0f32; y.numel()];
                for ((drow, grow), (yrow, xrow)) in dx
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(y.data().chunks(c).zip(inp[0].data().chunks(c)))
                {
                    let mean = xrow.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                    let var =
                        xrow.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps as f64).sqrt();
                    let gmean = grow.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                    let gydot = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&gv, &yv)| gv as f64 * yv as f64)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        drow[j] =
                            (inv * (grow[j] as f64 - gmean - yrow[j] as f64 * gydot)) as f32;
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx).unwrap())]
            }),
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(
            Tensor::scalar(s as f32),
            vec![x],
            Box::new(|g, inp, _| {
                let gv = g.item();
                vec![Some(Tensor::full(inp[0].shape(), gv))]
            }),
        )
    }

    // ── shape ops ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let orig = self.value(x).shape().to_vec();
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                vec![Some(g.clone().reshaped(orig.clone()).unwrap())]
            }),
        ))
    }

    /// Concatenate 2-D tensors along rows (all must share the column count).
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Self::shape_err("concat_rows", "no inputs".into()));
        }
        let c = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = self.value(v);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(Self::shape_err(
                    "concat_rows",
                    format!("expected [*, {}], got {:?}", c, t.shape()),
                ));
            }
            rows += t.rows();
            row_counts.push(t.rows());
            data.extend_from_slice(t.data());
        }
        Ok(self.record(
            Tensor::new(vec![rows, c], data)?,
            xs.to_vec(),
            Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(row_counts.len());
                let mut offset = 0;
                for &n in &row_counts {
                    let chunk = g.data()[offset * c..(offset + n) * c].to_vec();
                    out.push(Some(Tensor::new(vec![n, c], chunk).unwrap()));
                    offset += n;
                }
                out
            }),
        ))
    }

    /// Concatenate 2-D tensors along columns (all must share the row count).
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Self::shape_err("concat_cols", "no inputs".into()));
        }
        let n = self.value(xs[0]).rows();
        let mut col_counts = Vec::with_capacity(xs.len());
        let mut total_c = 0;
        for &v in xs {
            let t = self.value(v);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("expected [{}, *], got {:?}", n, t.shape()),
                ));
            }
            col_counts.push(t.cols());
            total_c += t.cols();
        }
        let mut data = Vec::with_capacity(n * total_c);
        for i in 0..n {
            for (&v, &cc) in xs.iter().zip(&col_counts) {
                let t = self.value(v);
                data.extend_from_slice(&t.data()[i * cc..(i + 1) * cc]);
            }
        }
        Ok(self.record(
            Tensor::new(vec![n, total_c], data)?,
            xs.to_vec(),
            Box::new(move |g, _, _| {
                let mut out: Vec<Option<Tensor>> = col_counts
                    .iter()
                    .map(|&cc| Some(Tensor::zeros(&[n, cc])))
                    .collect();
                for i in 0..n {
                    let grow = &g.data()[i * total_c..(i + 1) * total_c];
                    let mut off = 0;
                    for (t, &cc) in out.iter_mut().zip(&col_counts) {
                        let td = t.as_mut().unwrap().data_mut();
                        td[i * cc..(i + 1) * cc].copy_from_slice(&grow[off..off + cc]);
                        off += cc;
                    }
                }
                out
            }),
        ))
    }

    /// Gather rows of a 2-D tensor; indices may repeat (backward scatter-adds).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Self::shape_err("select_rows", format!("need 2-D, got {:?}", t.shape())));
        }
        let (n, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "select_rows",
                detail: format!("index {} out of {} rows", bad, n),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        Ok(self.record(
            Tensor::new(vec![idx.len(), c], data)?,
            vec![x],
            Box::new(move |g, inp, _| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for (d, gv) in dst.iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *d += *gv;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Columns `range` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || range.end > t.cols() || range.start > range.end {
            return Err(Self::shape_err(
                "slice_cols",
                format!("{:?} of {:?}", range, t.shape()),
            ));
        }
        let (n, c) = (t.rows(), t.cols());
        let w = range.end - range.start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&t.data()[i * c + range.start..i * c + range.end]);
        }
        let start = range.start;
        Ok(self.record(
            Tensor::new(vec![n, w], data)?,
            vec![x],
            Box::new(move |g, inp, _| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for i in 0..n {
                    dx.data_mut()[i * c + start..i * c + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `out[n] = sum_k weights[n,k] * values[n*K + k]`; `values` is
    /// `[N*K, C]`, `weights` is `[N, K]`, output `[N, C]`.
    pub fn weighted_row_sum(&mut self, values: Var, weights: Var) -> Result<Var> {
        let (vs, ws) = (self.value(values).shape().to_vec(), self.value(weights).shape().to_vec());
        if vs.len() != 2 || ws.len() != 2 || vs[0] != ws[0] * ws[1] {
            return Err(Self::shape_err(
                "weighted_row_sum",
                format!("values {:?} vs weights {:?}", vs, ws),
            ));
        }
        let (n, k, c) = (ws[0], ws[1], vs[1]);
        let vd = self.value(values).data();
        let wd = self.value(weights).data();
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            for j in 0..k {
                let w = wd[i * k + j];
                let vrow = &vd[(i * k + j) * c..(i * k + j + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for q in 0..c {
                    orow[q] += w * vrow[q];
                }
            }
        }
        Ok(self.record(
            Tensor::new(vec![n, c], out)?,
            vec![values, weights],
            Box::new(move |g, inp, _| {
                let (vd, wd) = (inp[0].data(), inp[1].data());
                let mut dv = vec![0.0f32; vd.len()];
                let mut dw = vec![0.0f32; wd.len()];
                for i in 0..n {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    for j in 0..k {
                        let w = wd[i * k + j];
                        let base = (i * k + j) * c;
                        let mut dot = 0.0f64;
                        for q in 0..c {
                            dv[base + q] += w * grow[q];
                            dot += grow[q] as f64 * vd[base + q] as f64;
                        }
                        dw[i * k + j] = dot as f32;
                    }
                }
                vec![
                    Some(Tensor::new(vec![n * k, c], dv).unwrap()),
                    Some(Tensor::new(vec![n, k], dw).unwrap()),
                ]
            }),
        ))
    }

    // ── sampling / image ops ───────────────────────────────────────────

    /// Bilinear sampling of `map` `[C, H, W]` at `locs` `[N, 2]` holding
    /// normalized `(u, v)` pairs. Align-corners: `(u, v)` maps to pixel
    /// `(u*(W-1), v*(H-1))`. Locations outside `[0, 1]^2` yield zeros.
    /// Differentiable in both the map and the locations.
    pub fn bilinear_sample(&mut self, map: Var, locs: Var) -> Result<Var> {
        let ms = self.value(map).shape().to_vec();
        let ls = self.value(locs).shape().to_vec();
        if ms.len() != 3 || ls.len() != 2 || ls[1] != 2 {
            return Err(Self::shape_err(
                "bilinear_sample",
                format!("map {:?}, locs {:?}", ms, ls),
            ));
        }
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let n = ls[0];
        let md = self.value(map).data();
        let ld = self.value(locs).data();
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            let px = ld[i * 2] * (w as f32 - 1.0);
            let py = ld[i * 2 + 1] * (h as f32 - 1.0);
            if !in_range(px, w) || !in_range(py, h) {
                continue;
            }
            let (x0, x1, fx) = split_pixel(px, w);
            let (y0, y1, fy) = split_pixel(py, h);
            for ch in 0..c {
                let base = ch * h * w;
                let v = (1.0 - fy)
                    * ((1.0 - fx) * md[base + y0 * w + x0] + fx * md[base + y0 * w + x1])
                    + fy * ((1.0 - fx) * md[base + y1 * w + x0] + fx * md[base + y1 * w + x1]);
                out[i * c + ch] = v;
            }
        }
        Ok(self.record(
            Tensor::new(vec![n, c], out)?,
            vec![map, locs],
            Box::new(move |g, inp, _| {
                let (md, ld) = (inp[0].data(), inp[1].data());
                let mut dmap = vec![0.0f32; md.len()];
                let mut dloc = vec![0.0f32; ld.len()];
                for i in 0..n {
                    let px = ld[i * 2] * (w as f32 - 1.0);
                    let py = ld[i * 2 + 1] * (h as f32 - 1.0);
                    if !in_range(px, w) || !in_range(py, h) {
                        continue;
                    }
                    let (x0, x1, fx) = split_pixel(px, w);
                    let (y0, y1, fy) = split_pixel(py, h);
                    let mut du = 0.0f64;
                    let mut dv = 0.0f64;
                    for ch in 0..c {
                        let gv = g.data()[i * c + ch];
                        let base = ch * h * w;
                        dmap[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dmap[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dmap[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                        dmap[base + y1 * w + x1] += gv * fy * fx;
                        let dpx = (1.0 - fy) * (md[base + y0 * w + x1] - md[base + y0 * w + x0])
                            + fy * (md[base + y1 * w + x1] - md[base + y1 * w + x0]);
                        let dpy = (1.0 - fx) * (md[base + y1 * w + x0] - md[base + y0 * w + x0])
                            + fx * (md[base + y1 * w + x1] - md[base + y0 * w + x1]);
                        du += gv as f64 * dpx as f64;
                        dv += gv as f64 * dpy as f64;
                    }
                    dloc[i * 2] = (du * (w as f64 - 1.0)) as f32;
                    dloc[i * 2 + 1] = (dv * (h as f64 - 1.0)) as f32;
                }
                vec![
                    Some(Tensor::new(inp[0].shape().to_vec(), dmap).unwrap()),
                    Some(Tensor::new(inp[1].shape().to_vec(), dloc).unwrap()),
                ]
            }),
        ))
    }

    /// 3x3 convolution, padding 1, stride 1 or 2. Input `[Cin, H, W]`,
    /// weight `[Cout, Cin, 3, 3]`, bias `[Cout]`. Output spatial dims are
    /// `ceil(H/stride) x ceil(W/stride)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[0] {
            return Err(Self::shape_err("conv2d", format!("x {:?}, w {:?}", xs, ws)));
        }
        if bs != vec![ws[0]] {
            return Err(Self::shape_err("conv2d", format!("bias {:?} vs Cout {}", bs, ws[0])));
        }
        if stride == 0 || stride > 2 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: format!("unsupported stride {}", stride),
            });
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0f32; cout * oh * ow];
        for co in 0..cout {
            let obase = co * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[co];
                    let iy0 = (oy * stride) as isize - 1;
                    let ix0 = (ox * stride) as isize - 1;
                    for ci in 0..cin {
                        let xb = ci * h * w;
                        let wb = (co * cin + ci) * 9;
                        for ky in 0..3usize {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[xb + iy as usize * w + ix as usize]
                                    * wd[wb + ky * 3 + kx];
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = acc;
                }
            }
        }
        Ok(self.record(
            Tensor::new(vec![cout, oh, ow], out)?,
            vec![x, weight, bias],
            Box::new(move |g, inp, _| {
                let (xd, wd) = (inp[0].data(), inp[1].data());
                let mut dx = vec![0.0f32; xd.len()];
                let mut dw = vec![0.0f32; wd.len()];
                let mut db = vec![0.0f32; cout];
                let gd = g.data();
                for co in 0..cout {
                    let obase = co * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[obase + oy * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            let iy0 = (oy * stride) as isize - 1;
                            let ix0 = (ox * stride) as isize - 1;
                            for ci in 0..cin {
                                let xb = ci * h * w;
                                let wb = (co * cin + ci) * 9;
                                for ky in 0..3usize {
                                    let iy = iy0 + ky as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = ix0 + kx as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = xb + iy as usize * w + ix as usize;
                                        let wi = wb + ky * 3 + kx;
                                        dx[xi] += gv * wd[wi];
                                        dw[wi] += gv * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(inp[0].shape().to_vec(), dx).unwrap()),
                    Some(Tensor::new(inp[1].shape().to_vec(), dw).unwrap()),
                    Some(Tensor::from_vec(db)),
                ]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, h, w]` to `[C, out_h, out_w]`
    /// where `h == ceil(out_h/2)` and `w == ceil(out_w/2)`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || xs[1] != out_h.div_ceil(2) || xs[2] != out_w.div_ceil(2) {
            return Err(Self::shape_err(
                "upsample_nearest",
                format!("{:?} -> ({}, {})", xs, out_h, out_w),
            ));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; c * out_h * out_w];
        for ch in 0..c {
            for y in 0..out_h {
                for xc in 0..out_w {
                    out[ch * out_h * out_w + y * out_w + xc] =
                        xd[ch * h * w + (y / 2) * w + xc / 2];
                }
            }
        }
        Ok(self.record(
            Tensor::new(vec![c, out_h, out_w], out)?,
            vec![x],
            Box::new(move |g, inp, _| {
                let mut dx = vec![0.0f32; inp[0].numel()];
                for ch in 0..c {
                    for y in 0..out_h {
                        for xc in 0..out_w {
                            dx[ch * h * w + (y / 2) * w + xc / 2] +=
                                g.data()[ch * out_h * out_w + y * out_w + xc];
                        }
                    }
                }
                vec![Some(Tensor::new(inp[0].shape().to_vec(), dx).unwrap())]
            }),
        ))
    }

    /// Column-wise max over rows: `[P, C] -> [C]`. Gradient routes to the
    /// first argmax row per column.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.rows() == 0 {
            return Err(Self::shape_err("max_rows", format!("{:?}", t.shape())));
        }
        let (p, c) = (t.rows(), t.cols());
        let xd = t.data();
        let mut out = xd[..c].to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..p {
            for j in 0..c {
                if xd[i * c + j] > out[j] {
                    out[j] = xd[i * c + j];
                    arg[j] = i;
                }
            }
        }
        Ok(self.record(
            Tensor::from_vec(out),
            vec![x],
            Box::new(move |g, inp, _| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for j in 0..c {
                    dx.data_mut()[arg[j] * c + j] = g.data()[j];
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Scatter feature rows `[P, C]` into a dense map `[C, H, W]` at the
    /// given `(row, col)` cells. Cells must be distinct and in range.
    pub fn scatter_rows(
        &mut self,
        feats: Var,
        cells: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let t = self.value(feats);
        if t.shape().len() != 2 || t.rows() != cells.len() {
            return Err(Self::shape_err(
                "scatter_rows",
                format!("{:?} vs {} cells", t.shape(), cells.len()),
            ));
        }
        let c = t.cols();
        let mut seen = vec![false; h * w];
        for &(iy, ix) in cells {
            if iy >= h || ix >= w {
                return Err(TensorError::Invalid {
                    op: "scatter_rows",
                    detail: format!("cell ({}, {}) outside {}x{}", iy, ix, h, w),
                });
            }
            if std::mem::replace(&mut seen[iy * w + ix], true) {
                return Err(TensorError::Invalid {
                    op: "scatter_rows",
                    detail: format!("duplicate cell ({}, {})", iy, ix),
                });
            }
        }
        let mut out = vec![0.0f32; c * h * w];
        for (i, &(iy, ix)) in cells.iter().enumerate() {
            for ch in 0..c {
                out[ch * h * w + iy * w + ix] = t.data()[i * c + ch];
            }
        }
        let cells = cells.to_vec();
        Ok(self.record(
            Tensor::new(vec![c, h, w], out)?,
            vec![feats],
            Box::new(move |g, inp, _| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for (i, &(iy, ix)) in cells.iter().enumerate() {
                    for ch in 0..c {
                        dx.data_mut()[i * c + ch] = g.data()[ch * h * w + iy * w + ix];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Gradients add over fan-out; leaves that did not ask for gradients
    /// get none.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let inputs: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = back(&g, &inputs, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.clone().into_iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.needs_grad && node.backward.is_none() {
                // leaf: keep its gradient
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn in_range(p: f32, extent: usize) -> bool {
    p.is_finite() && p >= 0.0 && p <= extent as f32 - 1.0
}

fn split_pixel(p: f32, extent: usize) -> (usize, usize, f32) {
    let p0 = p.floor();
    let i0 = p0 as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, p - p0)
}
