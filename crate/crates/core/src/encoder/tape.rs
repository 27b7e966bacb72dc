//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Only the operations the encoder and the objective need are provided. Each
//! node stores its forward value plus whatever it must keep for the backward
//! pass; gradients are accumulated into a parallel vector in reverse order.

use ndarray::{s, Array2, ArrayView2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Array2<f64>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    StackRows(Vec<Var>),
    /// Scalar whose local gradients were computed in the forward pass.
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Array2<f64>>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by variable.
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0[v.0].take()
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Add a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let out = self.value(a) * &mask;
        self.push(out, Op::MulConst(a, mask))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (xhat, inv_std) = normalize_rows(xv.view());
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    /// Copy of `base` with `rows[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: Vec<usize>) -> Var {
        let mut out = self.value(base).clone();
        let sv = self.value(src);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).assign(&sv.row(i));
        }
        self.push(out, Op::ScatterRows { base, src, rows })
    }

    /// Multi-head causal self-attention over already-projected q, k, v.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        let dh = d / heads;
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = causal_softmax(qv.slice(cols), kv.slice(cols));
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((1, xv.ncols()));
        for &r in &rows {
            out.row_mut(0).scaled_add(1.0, &xv.row(r));
        }
        out /= rows.len().max(1) as f64;
        self.push(out, Op::MeanRows { x, rows })
    }

    pub fn stack_rows(&mut self, xs: Vec<Var>) -> Var {
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|&x| self.value(x).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("rows share a width");
        self.push(out, Op::StackRows(xs))
    }

    /// Record a scalar computed outside the tape along with its gradients
    /// with respect to `inputs`.
    pub fn scalar_fn(&mut self, value: f64, inputs: Vec<Var>, grads: Vec<Array2<f64>>) -> Var {
        debug_assert_eq!(inputs.len(), grads.len());
        self.push(Array2::from_elem((1, 1), value), Op::Scalar { inputs, grads })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut out = self.value(terms[0].0) * terms[0].1;
        for &(v, w) in &terms[1..] {
            out.scaled_add(w, self.value(v));
        }
        self.push(out, Op::WeightedSum(terms))
    }

    /// Backpropagate from `root` with unit seed gradient.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.value(*b).t()));
                acc(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                acc(grads, *a, g.dot(self.value(*b)));
                acc(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::MulConst(a, mask) => acc(grads, *a, g * mask),
            Op::Gelu(a) => {
                let dx = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * gelu_grad(x));
                acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gam;
                let n = xhat.ncols() as f64;
                let mut dx = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_dh = dh.sum();
                    let sum_dh_xh = dh.dot(&xh);
                    let k = inv_std[r] / n;
                    let mut out = dx.row_mut(r);
                    for c in 0..xhat.ncols() {
                        out[c] = k * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                let mut dt = Array2::zeros(self.value(*table).dim());
                for (r, &id) in ids.iter().enumerate() {
                    dt.row_mut(id).scaled_add(1.0, &g.row(r));
                }
                acc(grads, *table, dt);
            }
            Op::ScatterRows { base, src, rows } => {
                let mut db = g.clone();
                let mut ds = Array2::zeros(self.value(*src).dim());
                for (i, &r) in rows.iter().enumerate() {
                    ds.row_mut(i).assign(&g.row(r));
                    db.row_mut(r).fill(0.0);
                }
                acc(grads, *base, db);
                acc(grads, *src, ds);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let dp = go.dot(&vv.slice(cols).t());
                    // softmax backward, row-wise
                    let mut ds = &dp * p;
                    for r in 0..ds.nrows() {
                        let row_sum = ds.row(r).sum();
                        let pr = p.row(r);
                        ds.row_mut(r).zip_mut_with(&pr, |x, &pv| *x -= pv * row_sum);
                    }
                    ds *= scale;
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::MeanRows { x, rows } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                let w = 1.0 / rows.len().max(1) as f64;
                for &r in rows {
                    dx.row_mut(r).scaled_add(w, &g.row(0));
                }
                acc(grads, *x, dx);
            }
            Op::StackRows(xs) => {
                let mut start = 0;
                for &x in xs {
                    let n = self.value(x).nrows();
                    acc(grads, x, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::Scalar { inputs, grads: local } => {
                let up = g[[0, 0]];
                for (&x, lg) in inputs.iter().zip(local) {
                    acc(grads, x, lg * up);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, g * w);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise standardization; returns normalized rows and 1/std per row.
pub fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv.push(is);
    }
    (xhat, inv)
}

/// Softmax of q·kᵀ/√d with entries above the diagonal masked out.
pub fn causal_softmax(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut sc = q.dot(&k.t());
    for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
        let valid = row.slice(s![..=i]);
        let max = valid.fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v * scale - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    sc
}
