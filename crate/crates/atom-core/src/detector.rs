//! Sequential detector internals: per-query embeddings scaled by k-core
//! position, and the recurrent cell that folds a query stream into a hidden
//! state.
//!
//! The cell is a GRU with two modifications. A fusion gate mixes each
//! embedding with its first difference before the GRU sees it, and the new
//! hidden state is modulated elementwise by a mapping of the previous policy
//! output, so the recurrence can condition on what the detector last
//! believed. Both modifications can be disabled independently for ablations.
//!
//! Every forward here exists twice: a plain f64 path (canonical, used for
//! rollouts and evaluation) and a tape path used only to backpropagate during
//! training. A unit test pins them together.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::graph::AttributedGraph;
use crate::linalg::{self, Mat};
use crate::tape::{Tape, Var};

/// Detector GRU width. The input width always equals the victim's hidden
/// layer width.
pub const HIDDEN_DIM: usize = 32;

/// Structural scaling factor S(x) = 1 + 2λ(σ(λx) − 0.5).
///
/// Smooth, S(0) = 1, bounded to (1−λ, 1+λ), increasing in x, and λ = 0
/// collapses it to the constant 1 (which disables structural scaling).
pub fn scale_factor(x: f64, lambda: f64) -> f64 {
    1.0 + 2.0 * lambda * (linalg::sigmoid(lambda * x) - 0.5)
}

/// Per-node embedding table: mean victim hidden state over the closed 1-hop
/// neighborhood, scaled by S(ln k_v / ln k_max) where k_v is the node's core
/// number.
///
/// Cores are clamped to ≥ 1 before the log; if the graph's maximum core is 1
/// the ratio is defined as 1 so degenerate graphs still embed.
pub fn embed_all(graph: &AttributedGraph, hidden: &Mat, lambda: f64) -> Vec<Vec<f64>> {
    let cores = graph.core_numbers();
    let k_max = cores.iter().copied().max().unwrap_or(1).max(1);
    let dim = hidden.cols();
    (0..graph.node_count())
        .map(|v| {
            let members = graph.closed_neighborhood(v);
            let mut mean = vec![0.0; dim];
            for &u in &members {
                for (m, &h) in mean.iter_mut().zip(hidden.row(u)) {
                    *m += h;
                }
            }
            let inv = 1.0 / members.len() as f64;
            let k_v = cores[v].max(1);
            let ratio = if k_max == 1 {
                1.0
            } else {
                (k_v as f64).ln() / (k_max as f64).ln()
            };
            let s = scale_factor(ratio, lambda);
            for m in mean.iter_mut() {
                *m *= inv * s;
            }
            mean
        })
        .collect()
}

/// Which pieces of the cell are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorVariant {
    Full,
    /// Feed the raw embedding to the GRU instead of the fusion-gate mix.
    StandardGru,
    /// Skip the policy-conditioned modulation (m ≡ 1).
    NoMappingMatrix,
}

/// Recurrent-cell weights, in serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub w_g: Mat,
    pub b_g: Vec<f64>,
    pub w_z: Mat,
    pub u_z: Mat,
    pub b_z: Vec<f64>,
    pub w_r: Mat,
    pub u_r: Mat,
    pub b_r: Vec<f64>,
    pub w_h: Mat,
    pub u_h: Mat,
    pub b_h: Vec<f64>,
    /// hidden×2 map from previous action probabilities to the modulation.
    pub w_a: Mat,
    pub b_a: Vec<f64>,
}

impl DetectorParams {
    /// Glorot-uniform weights, zero biases — except the modulation, which
    /// starts as the identity (w_a = 0, b_a = 1) so early training behaves
    /// like an unmodulated GRU until the policy earns influence.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let glorot = |rows: usize, cols: usize, rng: &mut ChaCha20Rng| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
        };
        DetectorParams {
            w_g: glorot(input_dim, 2 * input_dim, rng),
            b_g: vec![0.0; input_dim],
            w_z: glorot(hidden_dim, input_dim, rng),
            u_z: glorot(hidden_dim, hidden_dim, rng),
            b_z: vec![0.0; hidden_dim],
            w_r: glorot(hidden_dim, input_dim, rng),
            u_r: glorot(hidden_dim, hidden_dim, rng),
            b_r: vec![0.0; hidden_dim],
            w_h: glorot(hidden_dim, input_dim, rng),
            u_h: glorot(hidden_dim, hidden_dim, rng),
            b_h: vec![0.0; hidden_dim],
            w_a: Mat::zeros(hidden_dim, 2),
            b_a: vec![1.0; hidden_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_g.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    /// Tensors in declaration order; the trainer and the checkpoint format
    /// both rely on this order.
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        vec![
            self.w_g.data(),
            &self.b_g,
            self.w_z.data(),
            self.u_z.data(),
            &self.b_z,
            self.w_r.data(),
            self.u_r.data(),
            &self.b_r,
            self.w_h.data(),
            self.u_h.data(),
            &self.b_h,
            self.w_a.data(),
            &self.b_a,
        ]
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_g.data_mut(),
            &mut self.b_g,
            self.w_z.data_mut(),
            self.u_z.data_mut(),
            &mut self.b_z,
            self.w_r.data_mut(),
            self.u_r.data_mut(),
            &mut self.b_r,
            self.w_h.data_mut(),
            self.u_h.data_mut(),
            &mut self.b_h,
            self.w_a.data_mut(),
            &mut self.b_a,
        ]
    }
}

/// Per-user recurrent state threaded across a query sequence.
#[derive(Debug, Clone)]
pub struct DetectorState {
    pub hidden: Vec<f64>,
    pub prev_embedding: Vec<f64>,
    /// p_{T−1}: starts at the uninformative (0.5, 0.5).
    pub prev_action_probs: [f64; 2],
}

impl DetectorState {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        DetectorState {
            hidden: vec![0.0; hidden_dim],
            prev_embedding: vec![0.0; input_dim],
            prev_action_probs: [0.5, 0.5],
        }
    }
}

fn add3(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    a.iter().zip(b).zip(c).map(|((&x, &y), &z)| x + y + z).collect()
}

/// One recurrence step on the plain f64 path. Updates `hidden` and
/// `prev_embedding`; the caller stores the new policy output into
/// `prev_action_probs` after running the heads.
pub fn fused_step(
    params: &DetectorParams,
    variant: DetectorVariant,
    state: &mut DetectorState,
    embedding: &[f64],
) {
    let i_dim = params.input_dim();
    debug_assert_eq!(embedding.len(), i_dim);

    let delta: Vec<f64> =
        embedding.iter().zip(&state.prev_embedding).map(|(&h, &p)| h - p).collect();

    let x: Vec<f64> = match variant {
        DetectorVariant::StandardGru => embedding.to_vec(),
        _ => {
            let mut cat = delta.clone();
            cat.extend_from_slice(embedding);
            let pre = linalg::matvec(&params.w_g, &cat);
            let g: Vec<f64> =
                pre.iter().zip(&params.b_g).map(|(&p, &b)| linalg::sigmoid(p + b)).collect();
            g.iter()
                .zip(&delta)
                .zip(embedding)
                .map(|((&gi, &di), &hi)| gi * di + (1.0 - gi) * hi)
                .collect()
        }
    };

    let z: Vec<f64> = add3(
        &linalg::matvec(&params.w_z, &x),
        &linalg::matvec(&params.u_z, &state.hidden),
        &params.b_z,
    )
    .into_iter()
    .map(linalg::sigmoid)
    .collect();
    let r: Vec<f64> = add3(
        &linalg::matvec(&params.w_r, &x),
        &linalg::matvec(&params.u_r, &state.hidden),
        &params.b_r,
    )
    .into_iter()
    .map(linalg::sigmoid)
    .collect();
    let rh: Vec<f64> = r.iter().zip(&state.hidden).map(|(&ri, &hi)| ri * hi).collect();
    let htilde: Vec<f64> =
        add3(&linalg::matvec(&params.w_h, &x), &linalg::matvec(&params.u_h, &rh), &params.b_h)
            .into_iter()
            .map(f64::tanh)
            .collect();

    let mut new_hidden: Vec<f64> = z
        .iter()
        .zip(&htilde)
        .zip(&state.hidden)
        .map(|((&zi, &hti), &hi)| (1.0 - zi) * hi + zi * hti)
        .collect();

    if variant != DetectorVariant::NoMappingMatrix {
        let p = state.prev_action_probs;
        for (k, nh) in new_hidden.iter_mut().enumerate() {
            let m = params.w_a.get(k, 0) * p[0] + params.w_a.get(k, 1) * p[1] + params.b_a[k];
            *nh *= m;
        }
    }

    state.hidden = new_hidden;
    state.prev_embedding = embedding.to_vec();
}

/// The cell parameters as tape leaves, in the same order as
/// [`DetectorParams::tensor_slices`].
#[derive(Debug, Clone, Copy)]
pub struct TapeDetectorParams {
    pub w_g: Var,
    pub b_g: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
    pub w_a: Var,
    pub b_a: Var,
}

impl DetectorParams {
    pub fn leaves(&self, tape: &mut Tape) -> TapeDetectorParams {
        TapeDetectorParams {
            w_g: tape.leaf(self.w_g.data().to_vec()),
            b_g: tape.leaf(self.b_g.clone()),
            w_z: tape.leaf(self.w_z.data().to_vec()),
            u_z: tape.leaf(self.u_z.data().to_vec()),
            b_z: tape.leaf(self.b_z.clone()),
            w_r: tape.leaf(self.w_r.data().to_vec()),
            u_r: tape.leaf(self.u_r.data().to_vec()),
            b_r: tape.leaf(self.b_r.clone()),
            w_h: tape.leaf(self.w_h.data().to_vec()),
            u_h: tape.leaf(self.u_h.data().to_vec()),
            b_h: tape.leaf(self.b_h.clone()),
            w_a: tape.leaf(self.w_a.data().to_vec()),
            b_a: tape.leaf(self.b_a.clone()),
        }
    }

    pub fn leaf_vars(tp: &TapeDetectorParams) -> Vec<Var> {
        vec![
            tp.w_g, tp.b_g, tp.w_z, tp.u_z, tp.b_z, tp.w_r, tp.u_r, tp.b_r, tp.w_h, tp.u_h,
            tp.b_h, tp.w_a, tp.b_a,
        ]
    }
}

/// Tape mirror of [`fused_step`]. `prev_probs` is whatever the policy emitted
/// at the previous step (a leaf at T=1, a softmax node afterwards) so
/// gradients flow through the modulation path end to end.
#[allow(clippy::too_many_arguments)]
pub fn tape_fused_step(
    tape: &mut Tape,
    tp: &TapeDetectorParams,
    variant: DetectorVariant,
    input_dim: usize,
    hidden_dim: usize,
    hidden: Var,
    prev_embedding: Var,
    prev_probs: Var,
    embedding: Var,
) -> Var {
    let delta = tape.sub(embedding, prev_embedding);

    let x = match variant {
        DetectorVariant::StandardGru => embedding,
        _ => {
            let cat = tape.concat(delta, embedding);
            let lin = tape.matvec(tp.w_g, cat, input_dim, 2 * input_dim);
            let pre = tape.add(lin, tp.b_g);
            let g = tape.sigmoid(pre);
            let gd = tape.hadamard(g, delta);
            let one_minus_g = tape.affine(g, -1.0, 1.0);
            let gh = tape.hadamard(one_minus_g, embedding);
            tape.add(gd, gh)
        }
    };

    let gate = |tape: &mut Tape, w: Var, u: Var| {
        let wx = tape.matvec(w, x, hidden_dim, input_dim);
        let uh = tape.matvec(u, hidden, hidden_dim, hidden_dim);
        tape.add(wx, uh)
    };
    let z_pre = gate(tape, tp.w_z, tp.u_z);
    let z_pre = tape.add(z_pre, tp.b_z);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, tp.w_r, tp.u_r);
    let r_pre = tape.add(r_pre, tp.b_r);
    let r = tape.sigmoid(r_pre);

    let rh = tape.hadamard(r, hidden);
    let wx = tape.matvec(tp.w_h, x, hidden_dim, input_dim);
    let urh = tape.matvec(tp.u_h, rh, hidden_dim, hidden_dim);
    let h_pre = tape.add(wx, urh);
    let h_pre = tape.add(h_pre, tp.b_h);
    let htilde = tape.tanh(h_pre);

    let one_minus_z = tape.affine(z, -1.0, 1.0);
    let keep = tape.hadamard(one_minus_z, hidden);
    let write = tape.hadamard(z, htilde);
    let blended = tape.add(keep, write);

    if variant == DetectorVariant::NoMappingMatrix {
        blended
    } else {
        let map = tape.matvec(tp.w_a, prev_probs, hidden_dim, 2);
        let map = tape.add(map, tp.b_a);
        tape.hadamard(blended, map)
    }
}
