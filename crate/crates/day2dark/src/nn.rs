//! Neural-network building blocks on top of the autodiff tape: a named
//! parameter store, linear / layer-norm / multi-head-attention layers, the
//! pre-norm transformer encoder stack, and SGD with momentum.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::rng::normal;
use crate::tensor::Mat;

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat store of named parameter tensors. Registration order is the canonical
/// order used by checkpoints and the optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mat: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.mats.len());
        self.names.push(name);
        self.mats.push(mat);
        ParamId(self.mats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.mats)
            .enumerate()
            .map(|(i, (n, m))| (ParamId(i), n.as_str(), m))
    }

    /// Combined bit hash over a subset of parameters (all when `pred` is
    /// always true). Position sensitive.
    pub fn subset_hash(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for (_, name, mat) in self.iter() {
            if pred(name) {
                h ^= mat.bit_hash().rotate_left(17);
                h = h.wrapping_mul(0x2545_f491_4f6c_dd1d);
            }
        }
        h
    }
}

/// Per-forward-pass cache binding parameters to tape leaves, so each parameter
/// appears exactly once per graph even when several layers share it.
pub struct Bound {
    nodes: Vec<Option<NodeId>>,
}

impl Bound {
    pub fn new(store: &ParamStore) -> Bound {
        Bound {
            nodes: vec![None; store.len()],
        }
    }

    pub fn node(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let n = tape.leaf(store.get(id).clone());
        self.nodes[id.0] = Some(n);
        n
    }

    /// Collect per-parameter gradients out of a finished backward pass.
    pub fn extract_grads(&self, grads: &[Option<Mat>]) -> GradAccum {
        let mut out = GradAccum::new(self.nodes.len());
        for (pid, node) in self.nodes.iter().enumerate() {
            if let Some(n) = node {
                if let Some(g) = &grads[n.0] {
                    out.add(ParamId(pid), g);
                }
            }
        }
        out
    }
}

/// Gradient accumulator indexed by parameter id.
#[derive(Debug, Clone)]
pub struct GradAccum {
    slots: Vec<Option<Mat>>,
}

impl GradAccum {
    pub fn new(n_params: usize) -> GradAccum {
        GradAccum {
            slots: vec![None; n_params],
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Mat) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradAccum) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }
}

/// Plain SGD with momentum: `v = m*v + g; p -= lr*v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Option<Mat>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, n_params: usize) -> SgdMomentum {
        SgdMomentum {
            momentum,
            velocity: vec![None; n_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr: f64, trainable: &[bool]) {
        assert_eq!(trainable.len(), store.len());
        for i in 0..store.len() {
            if !trainable[i] {
                continue;
            }
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let v = self.velocity[i].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            for (vv, gv) in v.data.iter_mut().zip(&g.data) {
                *vv = self.momentum * *vv + gv;
            }
            let p = store.get_mut(ParamId(i));
            p.add_assign_scaled(v, -lr);
        }
    }

    pub fn velocity_tensors(&self) -> impl Iterator<Item = (usize, &Mat)> {
        self.velocity
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|m| (i, m)))
    }

    pub fn set_velocity(&mut self, idx: usize, v: Mat) {
        self.velocity[idx] = Some(v);
    }
}

fn init_mat(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| normal(rng) * std).collect(),
    )
}

/// Fully connected layer `y = x W + b`, weights `in_dim x out_dim`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let std = (1.0 / in_dim as f64).sqrt();
        Linear {
            w: store.register(format!("{prefix}.w"), init_mat(in_dim, out_dim, std, rng)),
            b: store.register(format!("{prefix}.b"), Mat::zeros(1, out_dim)),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let w = bound.node(tape, store, self.w);
        let b = bound.node(tape, store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row_broadcast(y, b)
    }
}

/// Learned per-feature gain/bias pair for layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: store.register(format!("{prefix}.gain"), Mat::filled(1, dim, 1.0)),
            bias: store.register(format!("{prefix}.bias"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let g = bound.node(tape, store, self.gain);
        let b = bound.node(tape, store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Standard multi-head self-attention over a token sequence.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> MultiHeadAttention {
        assert!(
            dim.is_multiple_of(heads),
            "attention dim {dim} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{prefix}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let q = self.wq.forward(tape, bound, store, x);
        let k = self.wk.forward(tape, bound, store, x);
        let v = self.wv.forward(tape, bound, store, x);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let from = h * head_dim;
            let to = from + head_dim;
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores);
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&heads);
        self.wo.forward(tape, bound, store, ctx)
    }
}

/// Pre-norm transformer encoder layer with a GELU MLP.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> EncoderLayer {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), dim * mlp_ratio, dim, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        x: NodeId,
    ) -> NodeId {
        let normed = self.ln1.forward(tape, bound, store, x);
        let attended = self.attn.forward(tape, bound, store, normed);
        let x = tape.add(x, attended);
        let normed = self.ln2.forward(tape, bound, store, x);
        let hidden = self.fc1.forward(tape, bound, store, normed);
        let hidden = tape.gelu(hidden);
        let mlp = self.fc2.forward(tape, bound, store, hidden);
        tape.add(x, mlp)
    }
}

/// A stack of encoder layers followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl TransformerStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> TransformerStack {
        let layers = (0..depth)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("{prefix}.layer{i}"),
                    dim,
                    heads,
                    mlp_ratio,
                    rng,
                )
            })
            .collect();
        TransformerStack {
            layers,
            final_ln: LayerNorm::new(store, &format!("{prefix}.final_ln"), dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        mut x: NodeId,
    ) -> NodeId {
        for layer in &self.layers {
            x = layer.forward(tape, bound, store, x);
        }
        self.final_ln.forward(tape, bound, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn linear_forward_matches_manual_product() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let lin = Linear::new(&mut store, "t", 3, 2, &mut rng);
        store.get_mut(lin.b).data = vec![0.5, -0.5];
        let mut tape = Tape::new();
        let mut bound = Bound::new(&store);
        let x = tape.leaf(Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let y = lin.forward(&mut tape, &mut bound, &store, x);
        let w = store.get(lin.w);
        let want0 = w.at(0, 0) + 2.0 * w.at(1, 0) + 3.0 * w.at(2, 0) + 0.5;
        let want1 = w.at(0, 1) + 2.0 * w.at(1, 1) + 3.0 * w.at(2, 1) - 0.5;
        assert!((tape.value(y).data[0] - want0).abs() < 1e-12);
        assert!((tape.value(y).data[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled_update() {
        let mut store = ParamStore::new();
        let p = store.register("p", Mat::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = SgdMomentum::new(0.9, store.len());
        let mut grads = GradAccum::new(store.len());
        grads.add(p, &Mat::from_vec(1, 2, vec![0.5, 0.25]));
        opt.step(&mut store, &grads, 0.1, &[true]);
        // v = g; p = p - 0.1*v
        assert_eq!(store.get(p).data, vec![1.0 - 0.05, -1.0 - 0.025]);
        opt.step(&mut store, &grads, 0.1, &[true]);
        // v = 0.9*g + g = 0.95, 0.475; p -= 0.1*v
        assert!((store.get(p).data[0] - (0.95 - 0.095)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.register("a", Mat::from_vec(1, 1, vec![1.0]));
        let b = store.register("b", Mat::from_vec(1, 1, vec![2.0]));
        let mut opt = SgdMomentum::new(0.9, store.len());
        let mut grads = GradAccum::new(store.len());
        grads.add(a, &Mat::scalar(1.0));
        grads.add(b, &Mat::scalar(1.0));
        opt.step(&mut store, &grads, 0.5, &[true, false]);
        assert_eq!(store.get(a).data[0], 0.5);
        assert_eq!(store.get(b).data[0], 2.0);
    }

    #[test]
    fn transformer_stack_is_deterministic_and_finite() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(5);
        let stack = TransformerStack::new(&mut store, "enc", 2, 8, 2, 2, &mut rng);
        let x0 = Mat::from_vec(3, 8, (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect());
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mut bound = Bound::new(store);
            let x = tape.leaf(x0.clone());
            let y = stack.forward(&mut tape, &mut bound, store, x);
            tape.value(y).clone()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b);
        assert!(a.all_finite());
        assert_eq!(a.rows, 3);
        assert_eq!(a.cols, 8);
    }

    #[test]
    fn shared_parameter_gradients_accumulate_across_uses() {
        // Apply the same linear layer twice; its gradient must be the sum of
        // both applications' contributions.
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(7);
        let lin = Linear::new(&mut store, "shared", 2, 2, &mut rng);
        let mut tape = Tape::new();
        let mut bound = Bound::new(&store);
        let x = tape.leaf(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let y1 = lin.forward(&mut tape, &mut bound, &store, x);
        let y2 = lin.forward(&mut tape, &mut bound, &store, y1);
        let loss = tape.sum_all(y2);
        let grads = tape.backward(loss);
        let accum = bound.extract_grads(&grads);
        let gw = accum.get(lin.w).expect("weight grad");
        assert!(gw.max_abs() > 0.0);

        // Finite-difference spot check on one weight entry.
        let h = 1e-6;
        let eval = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mut bound = Bound::new(store);
            let x = tape.leaf(Mat::from_vec(1, 2, vec![1.0, 2.0]));
            let y1 = lin.forward(&mut tape, &mut bound, store, x);
            let y2 = lin.forward(&mut tape, &mut bound, store, y1);
            let loss = tape.sum_all(y2);
            tape.value(loss).data[0]
        };
        let mut plus = store.clone();
        plus.get_mut(lin.w).data[1] += h;
        let mut minus = store.clone();
        minus.get_mut(lin.w).data[1] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        assert!(
            (gw.data[1] - numeric).abs() / numeric.abs().max(1e-8) < 1e-5,
            "shared-weight grad {} vs fd {}",
            gw.data[1],
            numeric
        );
    }
}
