//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The tape records every primitive application during the forward pass;
//! [`Tape::backward`] replays it in reverse, accumulating gradients for
//! every registered parameter leaf. The primitive set is exactly what an
//! attentional encoder-decoder with softmax/embedding losses needs:
//! matmul (plain and transposed-rhs), elementwise arithmetic, broadcast
//! helpers, tanh/sigmoid/log, concat/slice, row-wise softmax, reductions,
//! dropout, embedding lookup and per-row gather.
//!
//! Shape mismatches are programming errors and panic with both shapes in
//! the message. All math is in `f64`.

use std::collections::BTreeMap;

/// Identifies a trainable parameter across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Dense row-major tensor of rank 0, 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            len,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform random entries in `[lo, hi)`, filled in row-major order.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "expected scalar, got shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
        assert_eq!(
            a.shape, b.shape,
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        );
    }
}

/// `a (m×k) · b (k×n)` with a plain ikj loop.
pub fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(
        k, k2,
        "matmul: inner dims differ, {:?} vs {:?}",
        a.shape, b.shape
    );
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a (m×k) · bᵀ` for `b (n×k)`.
pub fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(
        k, k2,
        "matmul_nt: inner dims differ, {:?} vs {:?}",
        a.shape, b.shape
    );
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ (k×m) · b (k×n)` for `a (k×m)`.
pub fn matmul_tn_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(
        k, k2,
        "matmul_tn: inner dims differ, {:?} vs {:?}",
        a.shape, b.shape
    );
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    // None for leaves and constants.
    grad_fn: Option<GradFn>,
}

/// Append-only record of primitive applications.
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(usize, ParamId)>,
    checked: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that panics when any primitive produces a non-finite value.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: Vec::new(),
            checked: true,
            backward_done: false,
        }
    }

    /// Tape without per-primitive finiteness checks; callers validate the
    /// loss and gradients themselves (the trainer does).
    pub fn unchecked() -> Self {
        Tape {
            checked: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, grad_fn: Option<GradFn>) -> Var {
        if self.checked {
            assert!(
                value.all_finite(),
                "non-finite value produced on checked tape (shape {:?})",
                value.shape()
            );
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            grad_fn,
        });
        Var(idx)
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Trainable leaf; gradients are reported under `id` after backward.
    pub fn param(&mut self, value: Tensor, id: ParamId) -> Var {
        let v = self.push(value, vec![], None);
        self.leaves.push((v.0, id));
        v
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Tensor::same_shape(av, bv, "add");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape.clone(), data);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Tensor::same_shape(av, bv, "sub");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape.clone(), data);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| {
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|x| -x).collect());
                vec![g.clone(), neg]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Tensor::same_shape(av, bv, "mul");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape.clone(), data);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, inp, _| {
                let (a, b) = (inp[0], inp[1]);
                let ga = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&b.data).map(|(g, y)| g * y).collect(),
                );
                let gb = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&a.data).map(|(g, x)| g * x).collect(),
                );
                vec![ga, gb]
            })),
        )
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Tensor::new(av.shape.clone(), av.data.iter().map(|x| x * k).collect());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data.iter().map(|x| x * k).collect(),
                )]
            })),
        )
    }

    /// Broadcast-add a length-`c` bias row to every row of `a (r×c)`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (r, c) = (av.rows(), av.cols());
        assert_eq!(
            bv.len(),
            c,
            "add_row: bias length {} vs {} columns ({:?} and {:?})",
            bv.len(),
            c,
            av.shape,
            bv.shape
        );
        let mut data = av.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv.data[j];
            }
        }
        let out = Tensor::new(vec![r, c], data);
        self.push(
            out,
            vec![a.0, bias.0],
            Some(Box::new(move |g, inp, _| {
                let bshape = inp[1].shape.clone();
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g.data[i * c + j];
                    }
                }
                vec![g.clone(), Tensor::new(bshape, gb)]
            })),
        )
    }

    /// Scale row `i` of `m (r×c)` by `col[i]`; `col` has shape `[r]` or `[r,1]`.
    pub fn scale_rows(&mut self, m: Var, col: Var) -> Var {
        let (mv, cv) = (&self.nodes[m.0].value, &self.nodes[col.0].value);
        let (r, c) = (mv.rows(), mv.cols());
        assert_eq!(
            cv.len(),
            r,
            "scale_rows: column length {} vs {} rows",
            cv.len(),
            r
        );
        let mut data = mv.data.clone();
        for i in 0..r {
            let s = cv.data[i];
            for j in 0..c {
                data[i * c + j] *= s;
            }
        }
        let out = Tensor::new(vec![r, c], data);
        self.push(
            out,
            vec![m.0, col.0],
            Some(Box::new(move |g, inp, _| {
                let (m, col) = (inp[0], inp[1]);
                let mut gm = vec![0.0; r * c];
                let mut gcol = vec![0.0; r];
                for i in 0..r {
                    let s = col.data[i];
                    for j in 0..c {
                        gm[i * c + j] = g.data[i * c + j] * s;
                        gcol[i] += g.data[i * c + j] * m.data[i * c + j];
                    }
                }
                vec![
                    Tensor::new(vec![r, c], gm),
                    Tensor::new(col.shape.clone(), gcol),
                ]
            })),
        )
    }

    // ---- matrix ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, inp, _| {
                vec![matmul_nt_raw(g, inp[1]), matmul_tn_raw(inp[0], g)]
            })),
        )
    }

    /// `a · bᵀ`: the natural orientation for `[out_dim × in_dim]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt_raw(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, inp, _| {
                vec![matmul_raw(g, inp[1]), matmul_tn_raw(g, inp[0])]
            })),
        )
    }

    // ---- nonlinearities ----

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Tensor::new(av.shape.clone(), av.data.iter().map(|x| x.tanh()).collect());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|g, _, out| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&out.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Tensor::new(
            av.shape.clone(),
            av.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        );
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|g, _, out| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&out.data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                )]
            })),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Tensor::new(av.shape.clone(), av.data.iter().map(|x| x.ln()).collect());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|g, inp, _| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&inp[0].data)
                        .map(|(g, x)| g / x)
                        .collect(),
                )]
            })),
        )
    }

    /// `max(a, lo)` elementwise; gradient passes only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Tensor::new(av.shape.clone(), av.data.iter().map(|x| x.max(lo)).collect());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, inp, _| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&inp[0].data)
                        .map(|(g, x)| if *x > lo { *g } else { 0.0 })
                        .collect(),
                )]
            })),
        )
    }

    // ---- structure ----

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let r = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let t = &self.nodes[p.0].value;
                assert_eq!(
                    t.rows(),
                    r,
                    "concat_cols: row mismatch {:?} vs {} rows",
                    t.shape,
                    r
                );
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![r, total], data);
        let widths_cl = widths.clone();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, _, _| {
                let mut grads = Vec::with_capacity(widths_cl.len());
                let mut off = 0;
                for &w in &widths_cl {
                    let mut part = vec![0.0; r * w];
                    for i in 0..r {
                        part[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data[i * total + off..i * total + off + w]);
                    }
                    grads.push(Tensor::new(vec![r, w], part));
                    off += w;
                }
                grads
            })),
        )
    }

    /// Columns `lo..hi` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        assert!(
            lo < hi && hi <= c,
            "slice_cols: range {lo}..{hi} out of {:?}",
            av.shape
        );
        let w = hi - lo;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&av.data[i * c + lo..i * c + hi]);
        }
        let out = Tensor::new(vec![r, w], data);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, inp, _| {
                let mut full = Tensor::zeros(inp[0].shape());
                for i in 0..r {
                    full.data[i * c + lo..i * c + hi].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                }
                vec![full]
            })),
        )
    }

    /// Numerically stable row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &av.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let out = Tensor::new(vec![r, c], data);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _, out| {
                let mut gz = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        gz[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![Tensor::new(vec![r, c], gz)]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Tensor::scalar(av.data.iter().sum());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|g, inp, _| {
                vec![Tensor::full(inp[0].shape(), g.scalar_value())]
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.len() as f64;
        let out = Tensor::scalar(av.data.iter().sum::<f64>() / n);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, inp, _| {
                vec![Tensor::full(inp[0].shape(), g.scalar_value() / n)]
            })),
        )
    }

    /// Sum each row of `m (r×c)` into a `[r,1]` column.
    pub fn row_sum(&mut self, m: Var) -> Var {
        let mv = &self.nodes[m.0].value;
        let (r, c) = (mv.rows(), mv.cols());
        let data = (0..r)
            .map(|i| mv.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        let out = Tensor::new(vec![r, 1], data);
        self.push(
            out,
            vec![m.0],
            Some(Box::new(move |g, _, _| {
                let mut gm = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gm[i * c + j] = g.data[i];
                    }
                }
                vec![Tensor::new(vec![r, c], gm)]
            })),
        )
    }

    // ---- NN-specific ----

    /// Inverted dropout: `a ⊙ mask / (1−p)` with a binary mask supplied by
    /// the caller. Identity when `p == 0` and the mask is all ones.
    pub fn dropout(&mut self, a: Var, mask: &Tensor, p: f64) -> Var {
        let av = &self.nodes[a.0].value;
        Tensor::same_shape(av, mask, "dropout");
        assert!((0.0..1.0).contains(&p), "dropout: p {p} outside [0,1)");
        let keep = 1.0 / (1.0 - p);
        let scaled: Vec<f64> = mask.data.iter().map(|m| m * keep).collect();
        let data = av
            .data
            .iter()
            .zip(&scaled)
            .map(|(x, m)| x * m)
            .collect();
        let out = Tensor::new(av.shape.clone(), data);
        let shape = av.shape.clone();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                vec![Tensor::new(
                    shape.clone(),
                    g.data.iter().zip(&scaled).map(|(g, m)| g * m).collect(),
                )]
            })),
        )
    }

    /// Rows `ids` of an embedding matrix `(V×d)`, stacked to `(n×d)`.
    /// The gradient scatter-adds into the looked-up rows.
    pub fn embedding_lookup(&mut self, matrix: Var, ids: &[u32]) -> Var {
        let mv = &self.nodes[matrix.0].value;
        let (v, d) = (mv.rows(), mv.cols());
        let n = ids.len();
        let mut data = vec![0.0; n * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < v, "embedding_lookup: id {id} out of range {v}");
            data[i * d..(i + 1) * d].copy_from_slice(&mv.data[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![n, d], data);
        let ids = ids.to_vec();
        self.push(
            out,
            vec![matrix.0],
            Some(Box::new(move |g, inp, _| {
                let mut gm = Tensor::zeros(inp[0].shape());
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for j in 0..d {
                        gm.data[id * d + j] += g.data[i * d + j];
                    }
                }
                vec![gm]
            })),
        )
    }

    /// Entry `m[i, ids[i]]` for each row, as a `[r,1]` column.
    pub fn gather_per_row(&mut self, m: Var, ids: &[u32]) -> Var {
        let mv = &self.nodes[m.0].value;
        let (r, c) = (mv.rows(), mv.cols());
        assert_eq!(ids.len(), r, "gather_per_row: {} ids for {} rows", ids.len(), r);
        let data = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let id = id as usize;
                assert!(id < c, "gather_per_row: id {id} out of range {c}");
                mv.data[i * c + id]
            })
            .collect();
        let out = Tensor::new(vec![r, 1], data);
        let ids = ids.to_vec();
        self.push(
            out,
            vec![m.0],
            Some(Box::new(move |g, inp, _| {
                let mut gm = Tensor::zeros(inp[0].shape());
                for (i, &id) in ids.iter().enumerate() {
                    gm.data[i * c + id as usize] = g.data[i];
                }
                vec![gm]
            })),
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Panics if the loss is not scalar
    /// or if backward already ran on this tape.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        assert!(
            !self.backward_done,
            "backward: tape already consumed; re-record the forward pass first"
        );
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(grad_fn) = &node.grad_fn {
                let inputs: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = grad_fn(&g, &inputs, &node.value);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&pg.data) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            if self.leaves.iter().any(|&(n, _)| n == i) {
                grads[i] = Some(g);
            }
        }

        let mut by_param = BTreeMap::new();
        for &(node, id) in &self.leaves {
            if let Some(g) = grads[node].take() {
                by_param.insert(id, g);
            }
        }
        Gradients { by_param }
    }
}

/// Parameter gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for `id`, if the parameter was reached from the loss.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Dense gradient vector over `n` parameters with the given shapes;
    /// unreached parameters get zero tensors.
    pub fn dense(mut self, shapes: &[Vec<usize>]) -> Vec<Tensor> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self.by_param
                    .remove(&ParamId(i))
                    .unwrap_or_else(|| Tensor::zeros(s))
            })
            .collect()
    }
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` around `point`:
/// `max_i |analytic_i − (f(x+εe_i) − f(x−εe_i))/2ε| / max(1, |analytic_i|)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, analytic: &Tensor, epsilon: f64) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    assert_eq!(
        point.shape(),
        analytic.shape(),
        "finite_difference_check: point {:?} vs analytic {:?}",
        point.shape(),
        analytic.shape()
    );
    let mut max_err: f64 = 0.0;
    let mut x = point.clone();
    for i in 0..x.len() {
        let orig = x.data[i];
        x.data[i] = orig + epsilon;
        let up = f(&x);
        x.data[i] = orig - epsilon;
        let down = f(&x);
        x.data[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic.data[i] - numeric).abs() / analytic.data[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}

/// Same check on a deterministic subsample of coordinates, for large
/// parameter tensors where the exhaustive scan is too slow.
pub fn finite_difference_check_sampled<F>(
    f: F,
    point: &Tensor,
    analytic: &Tensor,
    epsilon: f64,
    max_coords: usize,
    rng: &mut impl rand::Rng,
) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    let n = point.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, max_coords).into_vec()
    };
    let mut max_err: f64 = 0.0;
    let mut x = point.clone();
    for i in coords {
        let orig = x.data[i];
        x.data[i] = orig + epsilon;
        let up = f(&x);
        x.data[i] = orig - epsilon;
        let down = f(&x);
        x.data[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic.data[i] - numeric).abs() / analytic.data[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = t.softmax_rows(z);
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert_eq!(t.value(th).scalar_value(), 0.0);
        assert_eq!(t.value(sg).scalar_value(), 0.5);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut r = rng(1);
        let a = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[3, 1], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb);
        assert_eq!(t.value(c).shape(), &[2, 1]);
        // independent naive oracle
        for i in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a.at(i, k) * b.at(k, 0);
            }
            assert!((t.value(c).at(i, 0) - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0), ParamId(0));
        let y = t.mul(x, x);
        let loss = t.sum(y);
        let grads = t.backward(loss);
        assert_eq!(grads.get(ParamId(0)).unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut t = Tape::new();
        let z = t.param(Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.0]), ParamId(0));
        let y = t.softmax_rows(z);
        let loss = t.sum(y);
        let grads = t.backward(loss);
        for g in grads.get(ParamId(0)).unwrap().data() {
            assert!(g.abs() < 1e-12, "softmax sums to 1 identically, grad {g}");
        }
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.zeros(&[2, 3]);
        let b = t.zeros(&[3, 2]);
        t.add(a, b);
    }

    #[test]
    #[should_panic(expected = "already consumed")]
    fn double_backward_panics() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0), ParamId(0));
        let loss = t.sum(x);
        let _ = t.backward(loss);
        let _ = t.backward(loss);
    }

    #[test]
    #[should_panic(expected = "must be scalar")]
    fn non_scalar_loss_panics() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]), ParamId(0));
        let _ = t.backward(x);
    }

    #[test]
    fn unreached_leaf_reports_no_gradient_and_dense_fills_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0), ParamId(0));
        let _unused = t.param(Tensor::new(vec![2, 2], vec![1.0; 4]), ParamId(1));
        let loss = t.sum(x);
        let grads = t.backward(loss);
        assert!(grads.get(ParamId(1)).is_none());
        let dense = grads.dense(&[vec![], vec![2, 2]]);
        assert_eq!(dense[1], Tensor::zeros(&[2, 2]));
        assert_eq!(dense[0].scalar_value(), 1.0);
    }

    // Every primitive against central finite differences. Each case builds
    // a scalar loss through the primitive and perturbs one input.
    fn fd_on_primitive<F>(name: &str, shape: &[usize], build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut r = rng(42);
        let point = Tensor::rand_uniform(shape, 0.1, 1.5, &mut r);
        let mut t = Tape::new();
        let x = t.param(point.clone(), ParamId(0));
        let y = build(&mut t, x);
        let loss = t.sum(y);
        let grads = t.backward(loss);
        let analytic = grads.get(ParamId(0)).unwrap().clone();
        let err = finite_difference_check(
            |p| {
                let mut t = Tape::new();
                let x = t.constant(p.clone());
                let y = build(&mut t, x);
                let loss = t.sum(y);
                t.value(loss).scalar_value()
            },
            &point,
            &analytic,
            1e-5,
        );
        assert!(err < 1e-7, "{name}: finite-difference error {err}");
    }

    #[test]
    fn primitives_match_finite_differences() {
        fd_on_primitive("tanh", &[2, 3], |t, x| t.tanh(x));
        fd_on_primitive("sigmoid", &[2, 3], |t, x| t.sigmoid(x));
        fd_on_primitive("log", &[2, 3], |t, x| t.log(x));
        fd_on_primitive("softmax", &[2, 4], |t, x| t.softmax_rows(x));
        fd_on_primitive("mean", &[3, 2], |t, x| t.mean(x));
        fd_on_primitive("row_sum", &[3, 4], |t, x| t.row_sum(x));
        fd_on_primitive("scale", &[2, 2], |t, x| t.scale(x, -1.7));
        fd_on_primitive("slice", &[2, 5], |t, x| t.slice_cols(x, 1, 4));
        fd_on_primitive("clamp_min", &[2, 3], |t, x| t.clamp_min(x, 0.7));
        fd_on_primitive("mul_self", &[2, 3], |t, x| t.mul(x, x));
        fd_on_primitive("add_self", &[2, 3], |t, x| t.add(x, x));
        fd_on_primitive("sub_const", &[2, 3], |t, x| {
            let c = t.constant(Tensor::full(&[2, 3], 0.4));
            t.sub(x, c)
        });
        fd_on_primitive("matmul", &[2, 3], |t, x| {
            let w = t.constant(Tensor::new(vec![3, 2], vec![0.3, -0.1, 0.5, 0.9, -0.7, 0.2]));
            t.matmul(x, w)
        });
        fd_on_primitive("matmul_nt", &[2, 3], |t, x| {
            let w = t.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()));
            t.matmul_nt(x, w)
        });
        fd_on_primitive("add_row", &[3, 4], |t, x| {
            let b = t.constant(Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, 0.4]));
            t.add_row(x, b)
        });
        fd_on_primitive("scale_rows", &[3, 4], |t, x| {
            let c = t.constant(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]));
            t.scale_rows(x, c)
        });
        fd_on_primitive("concat", &[2, 3], |t, x| {
            let other = t.constant(Tensor::full(&[2, 2], 0.25));
            let cat = t.concat_cols(&[x, other, x]);
            t.tanh(cat)
        });
        fd_on_primitive("gather", &[3, 4], |t, x| t.gather_per_row(x, &[2, 0, 3]));
        // dropout with a frozen mask
        fd_on_primitive("dropout", &[2, 4], |t, x| {
            let mask = Tensor::new(vec![2, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
            t.dropout(x, &mask, 0.3)
        });
        fd_on_primitive("embedding", &[4, 3], |t, x| {
            t.embedding_lookup(x, &[1, 3, 1, 0])
        });
    }

    #[test]
    fn three_layer_tanh_network_matches_finite_differences() {
        let mut r = rng(7);
        let w1 = Tensor::rand_uniform(&[4, 5], -0.5, 0.5, &mut r);
        let w2 = Tensor::rand_uniform(&[5, 3], -0.5, 0.5, &mut r);
        let w3 = Tensor::rand_uniform(&[3, 1], -0.5, 0.5, &mut r);
        let x0 = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut r);

        let run = |w1: &Tensor, w2: &Tensor, w3: &Tensor, want_grads: bool| {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let (v1, v2, v3) = (
                t.param(w1.clone(), ParamId(0)),
                t.param(w2.clone(), ParamId(1)),
                t.param(w3.clone(), ParamId(2)),
            );
            let h1 = t.matmul(x, v1);
            let h1 = t.tanh(h1);
            let h2 = t.matmul(h1, v2);
            let h2 = t.tanh(h2);
            let h3 = t.matmul(h2, v3);
            let h3 = t.tanh(h3);
            let loss = t.sum(h3);
            let val = t.value(loss).scalar_value();
            if want_grads {
                (val, Some(t.backward(loss)))
            } else {
                (val, None)
            }
        };

        let (_, grads) = run(&w1, &w2, &w3, true);
        let grads = grads.unwrap();
        for (i, w) in [&w1, &w2, &w3].into_iter().enumerate() {
            let analytic = grads.get(ParamId(i)).unwrap().clone();
            let f = |p: &Tensor| {
                let ws = [&w1, &w2, &w3];
                let mut clones: Vec<Tensor> = ws.iter().map(|w| (*w).clone()).collect();
                clones[i] = p.clone();
                run(&clones[0], &clones[1], &clones[2], false).0
            };
            let err = finite_difference_check(f, w, &analytic, 1e-5);
            assert!(err < 1e-8, "layer {i}: fd error {err}");
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a·f + b·g) = a·grad(f) + b·grad(g) on a sampled function pair
        let mut r = rng(11);
        let point = Tensor::rand_uniform(&[2, 3], 0.2, 1.0, &mut r);
        let (a, b) = (1.7, -0.6);

        let grad_of = |mode: u8| -> Tensor {
            let mut t = Tape::new();
            let x = t.param(point.clone(), ParamId(0));
            let f = {
                let y = t.tanh(x);
                t.sum(y)
            };
            let g = {
                let y = t.mul(x, x);
                t.mean(y)
            };
            let loss = match mode {
                0 => f,
                1 => g,
                _ => {
                    let fa = t.scale(f, a);
                    let gb = t.scale(g, b);
                    t.add(fa, gb)
                }
            };
            t.backward(loss).get(ParamId(0)).unwrap().clone()
        };

        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..point.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_check_on_linear_function_is_exact() {
        let point = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]);
        let analytic = Tensor::new(vec![1, 3], vec![2.0, 2.0, 2.0]);
        let err = finite_difference_check(
            |x| x.data().iter().map(|v| 2.0 * v).sum(),
            &point,
            &analytic,
            1e-4,
        );
        assert!(err < 1e-10, "linear f: error at rounding level, got {err}");
    }

    #[test]
    fn fd_check_quadratic_closed_form() {
        // f(x)=x² at 3: analytic gradient 2x = 6
        let point = Tensor::scalar(3.0);
        let analytic = Tensor::scalar(6.0);
        let err = finite_difference_check(|x| x.scalar_value().powi(2), &point, &analytic, 1e-5);
        assert!(err < 1e-8, "x² fd error {err}");
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_form_a_simplex(seed in 0u64..500) {
            let mut r = rng(seed);
            let rows = (seed % 4 + 1) as usize;
            let cols = (seed % 7 + 2) as usize;
            // spread kept below ~34 nats so the smallest exp term stays
            // above f64 epsilon and strict openness is representable
            let z = Tensor::rand_uniform(&[rows, cols], -15.0, 15.0, &mut r);
            let mut t = Tape::new();
            let zv = t.constant(z);
            let y = t.softmax_rows(zv);
            let yv = t.value(y);
            for i in 0..rows {
                let row = &yv.data()[i * cols..(i + 1) * cols];
                let sum: f64 = row.iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
                for &p in row {
                    proptest::prop_assert!(p > 0.0 && p < 1.0);
                }
            }
        }
    }
}
