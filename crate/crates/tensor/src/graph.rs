use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{dot, mm_acc, mm_nt_acc, mm_tn_acc, sigmoid};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    MulRow {
        a: Var,
        row: Var,
    },
    Sigmoid {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Transpose {
        a: Var,
        m: usize,
        n: usize,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    SliceRows {
        a: Var,
        offset: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SoftmaxRows {
        a: Var,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        width: usize,
    },
    RmsNorm {
        a: Var,
        cols: usize,
        inv_rms: Vec<f64>,
    },
    Attention(Box<AttentionRecord>),
    NormalizeColumns {
        z: Var,
        cols: usize,
        denom: Vec<Option<f64>>,
    },
    Mix {
        weights: Var,
        items: Vec<Var>,
    },
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    nq: usize,
    nk: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so every parent
/// precedes its children; backward walks the tape once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Receives a gradient contribution for `Var` by running the writer on its
/// accumulator.
type GradSink<'a> = dyn FnMut(Var, &dyn Fn(&mut [f64])) + 'a;

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        dim_err(op, format!("cannot broadcast {a:?} with {b:?}"))
    }
}

fn at(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        node_op: Op,
    ) -> Result<Var> {
        check_finite(op, &value)?;
        let needs_grad = match &node_op {
            Op::Leaf => false,
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::AddRow { a, row: b }
            | Op::MulRow { a, row: b } => self.needs(*a) || self.needs(*b),
            Op::Scale { a, .. }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::Transpose { a, .. }
            | Op::Reshape { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::SliceRows { a, .. }
            | Op::SoftmaxRows { a, .. }
            | Op::RmsNorm { a, .. } => self.needs(*a),
            Op::ConcatRows { parts } => parts.iter().any(|p| self.needs(*p)),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
            Op::Gather { table, .. } => self.needs(*table),
            Op::Attention(r) => self.needs(r.q) || self.needs(r.k) || self.needs(r.v),
            Op::NormalizeColumns { z, .. } => self.needs(*z),
            Op::Mix { weights, items } => {
                self.needs(*weights) || items.iter().any(|p| self.needs(*p))
            }
        };
        self.nodes.push(Node {
            shape,
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<f64>, needs_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor; gradients are tracked iff `t.requires_grad`.
    pub fn tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad)
    }

    /// Records a tensor whose gradient is always tracked.
    pub fn variable(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.data().to_vec(), true)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.data().to_vec(), false)
    }

    pub fn constant_from(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        Tensor::from_vec(shape, value.clone())?;
        self.leaf(shape, value, false)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => dim_err(op, format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return dim_err("matmul", format!("inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(&mut out, self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let n: usize = shape.iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..n).map(|i| f(at(va, i), at(vb, i))).collect();
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", shape, out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", shape, out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", shape, out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, c })
    }

    fn row_dims(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = self.matrix_dims(op, a)?;
        let rn: usize = self.shape(row).iter().product();
        if rn != n {
            return dim_err(
                op,
                format!("row vector has {rn} entries, matrix has {n} columns"),
            );
        }
        Ok((m, n))
    }

    /// `a[i, j] + row[j]`
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_dims("add_row", a, row)?;
        let (va, vr) = (self.value(a), self.value(row));
        let out = (0..m * n).map(|i| va[i] + vr[i % n]).collect();
        self.push("add_row", vec![m, n], out, Op::AddRow { a, row })
    }

    /// `a[i, j] * row[j]`
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_dims("mul_row", a, row)?;
        let (va, vr) = (self.value(a), self.value(row));
        let out = (0..m * n).map(|i| va[i] * vr[i % n]).collect();
        self.push("mul_row", vec![m, n], out, Op::MulRow { a, row })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, out, Op::Relu { a })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let va = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose { a, m, n })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != self.value(a).len() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean { a })
    }

    /// Rows `[k·d/h, (k+1)·d/h)` of a tensor whose leading extent is `d`.
    pub fn slice_rows(&mut self, a: Var, k: usize, h: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = shape[0];
        if h == 0 || !d.is_multiple_of(h) {
            return Err(TensorError::Config(format!(
                "head count {h} does not divide leading extent {d}"
            )));
        }
        if k >= h {
            return Err(TensorError::Config(format!(
                "head index {k} out of range for {h} heads"
            )));
        }
        let width: usize = shape[1..].iter().product();
        let rows = d / h;
        let offset = k * rows * width;
        let out = self.value(a)[offset..offset + rows * width].to_vec();
        let mut out_shape = shape;
        out_shape[0] = rows;
        self.push("slice_rows", out_shape, out, Op::SliceRows { a, offset })
    }

    /// Stacks parts along the leading dimension, in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_rows of no parts".into()))?;
        let trailing = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != trailing[..] {
                return dim_err(
                    "concat_rows",
                    format!("trailing dims {:?} vs {:?}", &s[1..], trailing),
                );
            }
            rows += s[0];
            out.extend_from_slice(self.value(*p));
        }
        let mut shape = vec![rows];
        shape.extend(trailing);
        self.push(
            "concat_rows",
            shape,
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", a)?;
        let va = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&va[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        self.push(
            "softmax_rows",
            vec![m, n],
            out,
            Op::SoftmaxRows { a, cols: n },
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.masked_softmax_cross_entropy(logits, &t)
    }

    /// As [`Graph::softmax_cross_entropy`], skipping rows whose target is `None`.
    pub fn masked_softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var> {
        let (n, v) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if targets.len() != n {
            return dim_err(
                "softmax_cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            );
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(TensorError::Data(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Data("no target tokens".into()));
        }
        let vl = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = &vl[i * v..(i + 1) * v];
            let p = &mut probs[i * v..(i + 1) * v];
            softmax_into(row, p);
            if let Some(t) = t {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[*t];
            }
        }
        let loss = total / count as f64;
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Row lookup into a `[V × w]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, w) = self.matrix_dims("gather_rows", table)?;
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Data(format!(
                    "row id {id} out of range for {v} rows"
                )));
            }
            out.extend_from_slice(&vt[id * w..(id + 1) * w]);
        }
        if ids.is_empty() {
            return dim_err("gather_rows", "no ids");
        }
        self.push(
            "gather_rows",
            vec![ids.len(), w],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                width: w,
            },
        )
    }

    /// Parameter-free RMS normalization of each row.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims("rms_norm_rows", a)?;
        let va = self.value(a);
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &va[i * n..(i + 1) * n];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..n {
                out[i * n + j] = row[j] * r;
            }
        }
        self.push(
            "rms_norm_rows",
            vec![m, n],
            out,
            Op::RmsNorm {
                a,
                cols: n,
                inv_rms,
            },
        )
    }

    /// Scaled dot-product attention applied independently to `batch` stacked
    /// sequences. `q` is `[batch·nq × dk]`, `k` is `[batch·nk × dk]` and `v` is
    /// `[batch·nk × dv]`. `key_keep[b·nk + j] == false` masks key `j` of
    /// sequence `b`; `causal` restricts query `i` to keys `j ≤ i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        causal: bool,
        key_keep: Option<&[bool]>,
    ) -> Result<Var> {
        let (bq, dk) = self.matrix_dims("attention", q)?;
        let (bk, dk2) = self.matrix_dims("attention", k)?;
        let (bv, dv) = self.matrix_dims("attention", v)?;
        if batch == 0 || bq % batch != 0 || bk % batch != 0 || bk != bv || dk != dk2 {
            return dim_err(
                "attention",
                format!("q {bq}×{dk}, k {bk}×{dk2}, v {bv}×{dv}, batch {batch}"),
            );
        }
        if let Some(mask) = key_keep {
            if mask.len() != bk {
                return dim_err(
                    "attention",
                    format!("key mask of {} for {bk} keys", mask.len()),
                );
            }
        }
        let nq = bq / batch;
        let nk = bk / batch;
        let scale = 1.0 / (dk as f64).sqrt();
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * nq * nk];
        let mut out = vec![0.0; bq * dv];
        let mut scores = vec![0.0; nk];
        for b in 0..batch {
            for i in 0..nq {
                let qrow = &vq[(b * nq + i) * dk..(b * nq + i + 1) * dk];
                let mut max = f64::NEG_INFINITY;
                let mut allowed = vec![false; nk];
                for j in 0..nk {
                    let keep = key_keep.is_none_or(|m| m[b * nk + j]) && (!causal || j <= i);
                    allowed[j] = keep;
                    if keep {
                        let s = dot(qrow, &vk[(b * nk + j) * dk..(b * nk + j + 1) * dk]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let p = &mut probs[(b * nq + i) * nk..(b * nq + i + 1) * nk];
                let mut z = 0.0;
                for j in 0..nk {
                    if allowed[j] {
                        p[j] = (scores[j] - max).exp();
                        z += p[j];
                    }
                }
                if z > 0.0 {
                    p.iter_mut().for_each(|x| *x /= z);
                }
                let orow = &mut out[(b * nq + i) * dv..(b * nq + i + 1) * dv];
                for j in 0..nk {
                    if p[j] != 0.0 {
                        let vrow = &vv[(b * nk + j) * dv..(b * nk + j + 1) * dv];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        let record = AttentionRecord {
            q,
            k,
            v,
            batch,
            nq,
            nk,
            dk,
            dv,
            scale,
            probs,
        };
        self.push(
            "attention",
            vec![bq, dv],
            out,
            Op::Attention(Box::new(record)),
        )
    }

    /// Divides each column of a nonnegative `[S × h]` matrix by its sum plus
    /// `eps`. A column that sums to exactly zero becomes uniform `1/S`.
    pub fn normalize_columns(&mut self, z: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        let (s, h) = match shape[..] {
            [s] => (s, 1),
            [s, h] => (s, h),
            _ => {
                return dim_err(
                    "normalize_columns",
                    format!("expected [S×h], got {shape:?}"),
                )
            }
        };
        let vz = self.value(z);
        if vz.iter().any(|&x| x < 0.0) {
            return Err(TensorError::Data(
                "normalize_columns expects nonnegative entries".into(),
            ));
        }
        let mut out = vec![0.0; s * h];
        let mut denom = Vec::with_capacity(h);
        for c in 0..h {
            let total: f64 = (0..s).map(|i| vz[i * h + c]).sum();
            if total == 0.0 {
                for i in 0..s {
                    out[i * h + c] = 1.0 / s as f64;
                }
                denom.push(None);
            } else {
                let dn = total + eps;
                for i in 0..s {
                    out[i * h + c] = vz[i * h + c] / dn;
                }
                denom.push(Some(dn));
            }
        }
        self.push(
            "normalize_columns",
            shape,
            out,
            Op::NormalizeColumns { z, cols: h, denom },
        )
    }

    /// `Σᵢ weights[i] · items[i]` over same-shaped items.
    pub fn mix(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let nw = self.value(weights).len();
        if nw != items.len() || items.is_empty() {
            return dim_err("mix", format!("{nw} weights for {} items", items.len()));
        }
        let shape = self.shape(items[0]).to_vec();
        let mut out = vec![0.0; self.value(items[0]).len()];
        for (i, it) in items.iter().enumerate() {
            if self.shape(*it) != &shape[..] {
                return dim_err("mix", format!("{:?} vs {shape:?}", self.shape(*it)));
            }
            let w = self.value(weights)[i];
            out.iter_mut()
                .zip(self.value(*it))
                .for_each(|(o, x)| *o += w * x);
        }
        self.push(
            "mix",
            shape,
            out,
            Op::Mix {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return dim_err(
                "backward",
                format!("loss has shape {:?}", self.nodes[loss.0].shape),
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &|ga| mm_nt_acc(ga, g, vb, *m, *n, *k));
                acc(*b, &|gb| mm_tn_acc(gb, va, g, *m, *k, *n));
            }
            Op::Add { a, b } => {
                acc(*a, &|ga| reduce_into(ga, g, |_| 1.0));
                acc(*b, &|gb| reduce_into(gb, g, |_| 1.0));
            }
            Op::Sub { a, b } => {
                acc(*a, &|ga| reduce_into(ga, g, |_| 1.0));
                acc(*b, &|gb| reduce_into(gb, g, |_| -1.0));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &|ga| reduce_into(ga, g, |i| at(vb, i)));
                acc(*b, &|gb| reduce_into(gb, g, |i| at(va, i)));
            }
            Op::Scale { a, c } => acc(*a, &|ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::AddRow { a, row } => {
                let n = self.value(*row).len();
                acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*row, &|gr| {
                    g.iter().enumerate().for_each(|(i, y)| gr[i % n] += y)
                });
            }
            Op::MulRow { a, row } => {
                let (va, vr) = (self.value(*a), self.value(*row));
                let n = vr.len();
                acc(*a, &|ga| {
                    g.iter()
                        .enumerate()
                        .for_each(|(i, y)| ga[i] += y * vr[i % n])
                });
                acc(*row, &|gr| {
                    g.iter()
                        .enumerate()
                        .for_each(|(i, y)| gr[i % n] += y * va[i])
                });
            }
            Op::Sigmoid { a } => {
                let out = &node.value;
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Transpose { a, m, n } => acc(*a, &|ga| {
                for i in 0..*m {
                    for j in 0..*n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }),
            Op::Reshape { a } => acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Sum { a } => acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean { a } => acc(*a, &|ga| {
                let c = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += c)
            }),
            Op::SliceRows { a, offset } => acc(*a, &|ga| {
                ga[*offset..*offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y)
            }),
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let o = off;
                    acc(*p, &|gp| {
                        gp.iter_mut().zip(&g[o..o + n]).for_each(|(x, y)| *x += y)
                    });
                    off += n;
                }
            }
            Op::SoftmaxRows { a, cols } => {
                let out = &node.value;
                acc(*a, &|ga| {
                    for (r, grow) in g.chunks(*cols).enumerate() {
                        let prow = &out[r * cols..(r + 1) * cols];
                        let s = dot(grow, prow);
                        for j in 0..*cols {
                            ga[r * cols + j] += prow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let c = g[0] / *count as f64;
                acc(*logits, &|gl| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..v {
                                gl[i * v + j] += c * probs[i * v + j];
                            }
                            gl[i * v + t] -= c;
                        }
                    }
                });
            }
            Op::Gather { table, ids, width } => acc(*table, &|gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..*width {
                        gt[id * width + j] += g[r * width + j];
                    }
                }
            }),
            Op::RmsNorm { a, cols, inv_rms } => {
                let out = &node.value;
                acc(*a, &|ga| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let yrow = &out[r * cols..(r + 1) * cols];
                        let m = dot(grow, yrow) / *cols as f64;
                        for j in 0..*cols {
                            ga[r * cols + j] += (grow[j] - yrow[j] * m) * ir;
                        }
                    }
                });
            }
            Op::Attention(rec) => self.attention_backward(rec, g, &mut acc),
            Op::NormalizeColumns { z, cols, denom } => {
                let vz = self.value(*z);
                let h = *cols;
                let s = vz.len() / h;
                acc(*z, &|gz| {
                    for (c, dn) in denom.iter().enumerate() {
                        let Some(dn) = dn else { continue };
                        let weighted: f64 = (0..s).map(|i| g[i * h + c] * vz[i * h + c]).sum();
                        for j in 0..s {
                            gz[j * h + c] += g[j * h + c] / dn - weighted / (dn * dn);
                        }
                    }
                });
            }
            Op::Mix { weights, items } => {
                acc(*weights, &|gw| {
                    for (i, it) in items.iter().enumerate() {
                        gw[i] += dot(g, self.value(*it));
                    }
                });
                let vw = self.value(*weights);
                for (i, it) in items.iter().enumerate() {
                    let w = vw[i];
                    acc(*it, &|gi| {
                        gi.iter_mut().zip(g).for_each(|(x, y)| *x += w * y)
                    });
                }
            }
        }
    }

    fn attention_backward(&self, r: &AttentionRecord, g: &[f64], acc: &mut GradSink<'_>) {
        let (vq, vk, vv) = (self.value(r.q), self.value(r.k), self.value(r.v));
        let (nq, nk, dk, dv) = (r.nq, r.nk, r.dk, r.dv);
        // dS for every (b, i, j), already scaled by 1/√dk
        let mut ds = vec![0.0; r.batch * nq * nk];
        for b in 0..r.batch {
            for i in 0..nq {
                let grow = &g[(b * nq + i) * dv..(b * nq + i + 1) * dv];
                let p = &r.probs[(b * nq + i) * nk..(b * nq + i + 1) * nk];
                let mut dp = vec![0.0; nk];
                for j in 0..nk {
                    if p[j] != 0.0 {
                        dp[j] = dot(grow, &vv[(b * nk + j) * dv..(b * nk + j + 1) * dv]);
                    }
                }
                let s = dot(&dp, p);
                let row = &mut ds[(b * nq + i) * nk..(b * nq + i + 1) * nk];
                for j in 0..nk {
                    row[j] = p[j] * (dp[j] - s) * r.scale;
                }
            }
        }
        acc(r.v, &|gv| {
            for b in 0..r.batch {
                for i in 0..nq {
                    let grow = &g[(b * nq + i) * dv..(b * nq + i + 1) * dv];
                    let p = &r.probs[(b * nq + i) * nk..(b * nq + i + 1) * nk];
                    for j in 0..nk {
                        if p[j] != 0.0 {
                            let dst = &mut gv[(b * nk + j) * dv..(b * nk + j + 1) * dv];
                            dst.iter_mut().zip(grow).for_each(|(x, y)| *x += p[j] * y);
                        }
                    }
                }
            }
        });
        acc(r.q, &|gq| {
            for b in 0..r.batch {
                for i in 0..nq {
                    let row = &ds[(b * nq + i) * nk..(b * nq + i + 1) * nk];
                    let dst = &mut gq[(b * nq + i) * dk..(b * nq + i + 1) * dk];
                    for j in 0..nk {
                        if row[j] != 0.0 {
                            let krow = &vk[(b * nk + j) * dk..(b * nk + j + 1) * dk];
                            dst.iter_mut().zip(krow).for_each(|(x, y)| *x += row[j] * y);
                        }
                    }
                }
            }
        });
        acc(r.k, &|gk| {
            for b in 0..r.batch {
                for i in 0..nq {
                    let row = &ds[(b * nq + i) * nk..(b * nq + i + 1) * nk];
                    let qrow = &vq[(b * nq + i) * dk..(b * nq + i + 1) * dk];
                    for j in 0..nk {
                        if row[j] != 0.0 {
                            let dst = &mut gk[(b * nk + j) * dk..(b * nk + j + 1) * dk];
                            dst.iter_mut().zip(qrow).for_each(|(x, y)| *x += row[j] * y);
                        }
                    }
                }
            }
        });
    }
}

/// Accumulates `g[i] * factor(i)` into `dst`, summing when `dst` was broadcast.
fn reduce_into(dst: &mut [f64], g: &[f64], factor: impl Fn(usize) -> f64) {
    if dst.len() == 1 && g.len() != 1 {
        dst[0] += g
            .iter()
            .enumerate()
            .map(|(i, y)| y * factor(i))
            .sum::<f64>();
    } else {
        for (i, x) in dst.iter_mut().enumerate() {
            *x += g[i] * factor(i);
        }
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
