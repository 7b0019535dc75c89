//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records one forward pass as a list of nodes; [`Tape::backward`]
//! replays it in reverse and accumulates gradients. Every op stores a closure
//! that maps the upstream gradient to per-input contributions, so the forward
//! code reads like plain math and the backward pass stays out of sight.

use crate::tensor::Mat;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

type Backward = Box<dyn Fn(&[Mat], &Mat) -> Vec<(usize, Mat)>>;

struct Step {
    out: usize,
    backward: Backward,
}

/// One forward pass worth of computation graph.
#[derive(Default)]
pub struct Tape {
    values: Vec<Mat>,
    steps: Vec<Step>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            values: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Insert a node with no inputs (model input or parameter).
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.values.push(value);
        NodeId(self.values.len() - 1)
    }

    fn push(&mut self, value: Mat, backward: Backward) -> NodeId {
        self.values.push(value);
        let out = self.values.len() - 1;
        self.steps.push(Step { out, backward });
        NodeId(out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        self.push(
            value,
            Box::new(move |vals, g| {
                vec![
                    (a.0, g.matmul_nt(&vals[b.0])),
                    (b.0, vals[a.0].matmul_tn(g)),
                ]
            }),
        )
    }

    /// `a * b^T`, used for attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.values[a.0].matmul_nt(&self.values[b.0]);
        self.push(
            value,
            Box::new(move |vals, g| {
                vec![(a.0, g.matmul(&vals[b.0])), (b.0, g.matmul_tn(&vals[a.0]))]
            }),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.values[a.0]
            .add(&self.values[b.0])
            .expect("tape add: shapes must match");
        self.push(
            value,
            Box::new(move |_, g| vec![(a.0, g.clone()), (b.0, g.clone())]),
        )
    }

    /// `x + row` with `row` broadcast over the rows of `x` (bias add).
    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let rv = &self.values[row.0];
        assert_eq!(rv.rows, 1, "broadcast row must be 1xC");
        assert_eq!(xv.cols, rv.cols, "broadcast width mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * value.cols + c] += rv.data[c];
            }
        }
        self.push(
            value,
            Box::new(move |_, g| {
                let mut drow = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        drow.data[c] += g.data[r * g.cols + c];
                    }
                }
                vec![(x.0, g.clone()), (row.0, drow)]
            }),
        )
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let value = self.values[x.0].scale(s);
        self.push(value, Box::new(move |_, g| vec![(x.0, g.scale(s))]))
    }

    /// Multiply a matrix node by a 1x1 scalar node; both sides get gradients.
    /// This is the op behind the branch-attention weighting.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.values[s.0].data[0];
        assert!(self.values[s.0].is_scalar(), "mul_scalar needs 1x1 rhs");
        let value = self.values[x.0].scale(sv);
        self.push(
            value,
            Box::new(move |vals, g| {
                let sv = vals[s.0].data[0];
                let mut ds = 0.0;
                for (gi, xi) in g.data.iter().zip(&vals[x.0].data) {
                    ds += gi * xi;
                }
                vec![(x.0, g.scale(sv)), (s.0, Mat::scalar(ds))]
            }),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.values[x.0].map(|v| v.max(0.0));
        self.push(
            value,
            Box::new(move |vals, g| {
                let mut dx = g.clone();
                for (d, &v) in dx.data.iter_mut().zip(&vals[x.0].data) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(x.0, dx)]
            }),
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.values[x.0].map(gelu_tanh);
        self.push(
            value,
            Box::new(move |vals, g| {
                let mut dx = g.clone();
                for (d, &v) in dx.data.iter_mut().zip(&vals[x.0].data) {
                    *d *= gelu_tanh_grad(v);
                }
                vec![(x.0, dx)]
            }),
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.values[x.0].map(f64::tanh);
        let out = self.values.len();
        self.push(
            value,
            Box::new(move |vals, g| {
                let mut dx = g.clone();
                for (d, &y) in dx.data.iter_mut().zip(&vals[out].data) {
                    *d *= 1.0 - y * y;
                }
                vec![(x.0, dx)]
            }),
        )
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let xv = &self.values[x.0];
        let gv = &self.values[gain.0];
        let bv = &self.values[bias.0];
        assert_eq!(gv.cols, xv.cols);
        assert_eq!(bv.cols, xv.cols);
        let cols = xv.cols;
        let mut value = Mat::zeros(xv.rows, cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for c in 0..cols {
                value.data[r * cols + c] = (row[c] - mean) * inv * gv.data[c] + bv.data[c];
            }
        }
        self.push(
            value,
            Box::new(move |vals, g| {
                let xv = &vals[x.0];
                let gv = &vals[gain.0];
                let cols = xv.cols;
                let n = cols as f64;
                let mut dx = Mat::zeros(xv.rows, cols);
                let mut dgain = Mat::zeros(1, cols);
                let mut dbias = Mat::zeros(1, cols);
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let grow = g.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(gv.data.iter())
                        .map(|(gr, gm)| gr * gm)
                        .collect();
                    for c in 0..cols {
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                        dgain.data[c] += grow[c] * xhat[c];
                        dbias.data[c] += grow[c];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for c in 0..cols {
                        dx.data[r * cols + c] =
                            inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                vec![(x.0, dx), (gain.0, dgain), (bias.0, dbias)]
            }),
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let mut value = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            softmax_into(xv.row(r), value.row_mut(r));
        }
        let out = self.values.len();
        self.push(
            value,
            Box::new(move |vals, g| {
                let y = &vals[out];
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(x.0, dx)]
            }),
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xv = &self.values[x.0];
        assert!(from < to && to <= xv.cols, "slice_cols out of range");
        let (rows, cols_in) = (xv.rows, xv.cols);
        let mut value = Mat::zeros(rows, to - from);
        for r in 0..rows {
            value.row_mut(r).copy_from_slice(&xv.row(r)[from..to]);
        }
        self.push(
            value,
            Box::new(move |_, g| {
                let mut dx = Mat::zeros(rows, cols_in);
                for r in 0..rows {
                    dx.row_mut(r)[from..to].copy_from_slice(g.row(r));
                }
                vec![(x.0, dx)]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows;
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].cols).collect();
        let total: usize = widths.iter().sum();
        let mut value = Mat::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                value.row_mut(r)[off..off + w].copy_from_slice(self.values[p.0].row(r));
                off += w;
            }
        }
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            Box::new(move |vals, g| {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in &parts {
                    let w = vals[p].cols;
                    let mut dp = Mat::zeros(g.rows, w);
                    for r in 0..g.rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    out.push((p, dp));
                    off += w;
                }
                out
            }),
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xv = &self.values[x.0];
        assert!(from < to && to <= xv.rows, "slice_rows out of range");
        let (rows_in, cols) = (xv.rows, xv.cols);
        let value = Mat::from_vec(to - from, cols, xv.data[from * cols..to * cols].to_vec());
        self.push(
            value,
            Box::new(move |_, g| {
                let mut dx = Mat::zeros(rows_in, cols);
                dx.data[from * cols..to * cols].copy_from_slice(&g.data);
                vec![(x.0, dx)]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = &self.values[p.0];
            assert_eq!(pv.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            Mat::from_vec(rows, cols, data),
            Box::new(move |vals, g| {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in &parts {
                    let r = vals[p].rows;
                    let dp = Mat::from_vec(r, cols, g.data[off * cols..(off + r) * cols].to_vec());
                    out.push((p, dp));
                    off += r;
                }
                out
            }),
        )
    }

    /// Column means: `n x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let (rows, cols) = (xv.rows, xv.cols);
        let mut value = Mat::zeros(1, cols);
        for r in 0..rows {
            for c in 0..cols {
                value.data[c] += xv.data[r * cols + c];
            }
        }
        for v in &mut value.data {
            *v /= rows as f64;
        }
        self.push(
            value,
            Box::new(move |_, g| {
                let mut dx = Mat::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dx.data[r * cols + c] = g.data[c] / rows as f64;
                    }
                }
                vec![(x.0, dx)]
            }),
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Mat::scalar(self.values[x.0].sum());
        self.push(
            value,
            Box::new(move |vals, g| {
                let xv = &vals[x.0];
                vec![(x.0, Mat::filled(xv.rows, xv.cols, g.data[0]))]
            }),
        )
    }

    /// Softmax cross-entropy of a single-label logit row against a class index.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> NodeId {
        let z = &self.values[logits.0];
        assert_eq!(z.rows, 1, "logits must be a single row");
        assert!(target < z.cols, "target class out of range");
        let max = z.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = Mat::scalar(lse - z.data[target]);
        self.push(
            value,
            Box::new(move |vals, g| {
                let z = &vals[logits.0];
                let mut dz = Mat::zeros(1, z.cols);
                softmax_into(z.row(0), dz.row_mut(0));
                dz.data[target] -= 1.0;
                vec![(logits.0, dz.scale(g.data[0]))]
            }),
        )
    }

    /// Summed binary cross-entropy with logits against a 0/1 target row.
    pub fn bce_with_logits_sum(&mut self, logits: NodeId, targets: Vec<f64>) -> NodeId {
        let z = &self.values[logits.0];
        assert_eq!(z.rows, 1, "logits must be a single row");
        assert_eq!(z.cols, targets.len(), "target width mismatch");
        let mut loss = 0.0;
        for (&zv, &t) in z.data.iter().zip(&targets) {
            loss += zv.max(0.0) - zv * t + (1.0 + (-zv.abs()).exp()).ln();
        }
        self.push(
            Mat::scalar(loss),
            Box::new(move |vals, g| {
                let z = &vals[logits.0];
                let mut dz = Mat::zeros(1, z.cols);
                for c in 0..z.cols {
                    let sig = 1.0 / (1.0 + (-z.data[c]).exp());
                    dz.data[c] = (sig - targets[c]) * g.data[0];
                }
                vec![(logits.0, dz)]
            }),
        )
    }

    /// Sum of absolute differences against a constant target.
    pub fn l1_sum(&mut self, pred: NodeId, target: Vec<f64>) -> NodeId {
        let p = &self.values[pred.0];
        assert_eq!(p.data.len(), target.len(), "l1 target length mismatch");
        let loss: f64 = p.data.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
        self.push(
            Mat::scalar(loss),
            Box::new(move |vals, g| {
                let p = &vals[pred.0];
                let mut dp = p.clone();
                for (d, (&pv, &tv)) in dp.data.iter_mut().zip(p.data.iter().zip(&target)) {
                    *d = (pv - tv).signum() * g.data[0];
                    if pv == tv {
                        *d = 0.0;
                    }
                }
                vec![(pred.0, dp)]
            }),
        )
    }

    /// Backpropagate from `loss` (must be 1x1); returns one gradient slot per node.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Mat>> {
        assert!(self.values[loss.0].is_scalar(), "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for step in self.steps.iter().rev() {
            let Some(g) = grads[step.out].clone() else {
                continue;
            };
            for (input, contrib) in (step.backward)(&self.values, &g) {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        grads
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}
