//! The served model: a two-layer graph convolutional network trained on a
//! labeled node mask, exposed to clients only through per-node prediction
//! queries. The detector additionally reads its hidden layer.
//!
//! Propagation uses the symmetric-normalized adjacency with self-loops,
//! Â = D̃^{-1/2}(A+I)D̃^{-1/2}, kept dense: graphs here are desk-scale.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::graph::AttributedGraph;
use crate::linalg::{self, Adam, Mat};

#[derive(Debug, Error)]
pub enum VictimError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("training mask is empty")]
    EmptyMask,
    #[error("mask node {0} out of range")]
    MaskOutOfRange(usize),
}

#[derive(Debug, Clone)]
pub struct VictimConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig { hidden: 16, lr: 0.01, weight_decay: 5e-4, epochs: 200 }
    }
}

/// Bare GCN weights: input→hidden and hidden→class.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub w1: Mat,
    pub w2: Mat,
}

/// Everything forward-pass derived, cached once after training: the victim
/// never changes while it is being queried.
#[derive(Debug, Clone)]
pub struct TrainedVictim {
    pub model: GcnModel,
    /// Symmetric-normalized adjacency with self-loops, dense n×n.
    pub a_hat: Mat,
    /// First-layer hidden activations H₁ = relu(ÂX·W₁), one row per node.
    pub hidden: Mat,
    /// Softmax class probabilities, one row per node.
    pub probs: Mat,
}

impl GcnModel {
    /// Glorot-uniform initialization, seeded; row-major fill order.
    pub fn init(d: usize, hidden: usize, c: usize, rng: &mut ChaCha20Rng) -> Self {
        let glorot = |rows: usize, cols: usize, rng: &mut ChaCha20Rng| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
        };
        GcnModel { w1: glorot(d, hidden, rng), w2: glorot(hidden, c, rng) }
    }
}

/// Â = D̃^{-1/2}(A+I)D̃^{-1/2} with D̃ the degree matrix after self-loops.
pub fn normalized_adjacency(graph: &AttributedGraph) -> Mat {
    let n = graph.node_count();
    let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / ((graph.degree(v) + 1) as f64).sqrt()).collect();
    let mut a = Mat::zeros(n, n);
    for v in 0..n {
        a.set(v, v, inv_sqrt[v] * inv_sqrt[v]);
        for &u in graph.neighbors(v) {
            a.set(v, u, inv_sqrt[v] * inv_sqrt[u]);
        }
    }
    a
}

fn row_softmax(z: &Mat) -> Mat {
    let rows: Vec<Vec<f64>> = (0..z.rows()).map(|r| linalg::softmax(z.row(r))).collect();
    Mat::from_rows(rows)
}

struct Activations {
    h1: Mat,
    h1p: Mat,
    probs: Mat,
}

/// Forward pass from the cached propagated features px = ÂX.
fn forward(model: &GcnModel, a_hat: &Mat, px: &Mat) -> Activations {
    let z1 = px.matmul(&model.w1);
    let mut h1 = z1;
    for v in h1.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let h1p = a_hat.matmul(&h1);
    let z2 = h1p.matmul(&model.w2);
    let probs = row_softmax(&z2);
    Activations { h1, h1p, probs }
}

/// Masked cross-entropy plus the L2 term that the weight-decay gradient
/// integrates; used directly only by gradient checks.
pub fn regularized_loss(
    model: &GcnModel,
    a_hat: &Mat,
    px: &Mat,
    labels: &[usize],
    mask: &[usize],
    weight_decay: f64,
) -> f64 {
    let act = forward(model, a_hat, px);
    let mut ce = 0.0;
    for &v in mask {
        ce -= act.probs.get(v, labels[v]).ln();
    }
    ce /= mask.len() as f64;
    let l2: f64 = model.w1.data().iter().chain(model.w2.data()).map(|w| w * w).sum();
    ce + 0.5 * weight_decay * l2
}

/// Analytic gradients of [`regularized_loss`] w.r.t. both weight matrices.
fn gradients(
    model: &GcnModel,
    a_hat: &Mat,
    px: &Mat,
    labels: &[usize],
    mask: &[usize],
    weight_decay: f64,
) -> (Mat, Mat, f64) {
    let n = px.rows();
    let c = model.w2.cols();
    let act = forward(model, a_hat, px);

    let mut loss = 0.0;
    let inv_m = 1.0 / mask.len() as f64;
    let mut dz2 = Mat::zeros(n, c);
    for &v in mask {
        loss -= act.probs.get(v, labels[v]).ln();
        for j in 0..c {
            let delta = act.probs.get(v, j) - if j == labels[v] { 1.0 } else { 0.0 };
            dz2.set(v, j, delta * inv_m);
        }
    }
    loss *= inv_m;

    let mut dw2 = act.h1p.transpose().matmul(&dz2);
    // dH1 = Â(dZ2 W2ᵀ): Â is symmetric so no transpose needed
    let dh1p = dz2.matmul(&model.w2.transpose());
    let mut dz1 = a_hat.matmul(&dh1p);
    for (g, &h) in dz1.data_mut().iter_mut().zip(act.h1.data()) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    let mut dw1 = px.transpose().matmul(&dz1);

    dw1.add_scaled(&model.w1, weight_decay);
    dw2.add_scaled(&model.w2, weight_decay);
    (dw1, dw2, loss)
}

/// Core GCN trainer with explicit targets and class count, so callers can
/// train on labels that are not the graph's own (e.g. a surrogate fitting
/// another model's predictions).
pub fn train_gcn(
    graph: &AttributedGraph,
    labels: &[usize],
    class_count: usize,
    mask: &[usize],
    config: &VictimConfig,
    seed: u64,
) -> Result<GcnModel, VictimError> {
    if mask.is_empty() {
        return Err(VictimError::EmptyMask);
    }
    if let Some(&bad) = mask.iter().find(|&&v| v >= graph.node_count()) {
        return Err(VictimError::MaskOutOfRange(bad));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut model = GcnModel::init(graph.feature_dim(), config.hidden, class_count, &mut rng);
    let a_hat = normalized_adjacency(graph);
    let px = a_hat.matmul(graph.features());

    let mut opt1 = Adam::new(model.w1.data().len(), config.lr);
    let mut opt2 = Adam::new(model.w2.data().len(), config.lr);
    for _ in 0..config.epochs {
        let (dw1, dw2, _) = gradients(&model, &a_hat, &px, labels, mask, config.weight_decay);
        opt1.step(model.w1.data_mut(), dw1.data());
        opt2.step(model.w2.data_mut(), dw2.data());
    }
    Ok(model)
}

/// Train the victim on `mask` and freeze it, caching the activations the
/// simulator and detector read.
pub fn train_victim(
    graph: &AttributedGraph,
    mask: &[usize],
    config: &VictimConfig,
    seed: u64,
) -> Result<TrainedVictim, VictimError> {
    let model = train_gcn(graph, graph.labels(), graph.class_count(), mask, config, seed)?;
    Ok(TrainedVictim::from_model(graph, model))
}

impl TrainedVictim {
    /// Rebuild the cached activations for `model` on `graph` (e.g. after
    /// loading a checkpoint).
    pub fn from_model(graph: &AttributedGraph, model: GcnModel) -> TrainedVictim {
        let a_hat = normalized_adjacency(graph);
        let px = a_hat.matmul(graph.features());
        let act = forward(&model, &a_hat, &px);
        TrainedVictim { model, a_hat, hidden: act.h1, probs: act.probs }
    }

    /// The prediction API: hard label plus the class distribution for a node.
    pub fn respond(&self, node: usize) -> (usize, Vec<f64>) {
        let row = self.probs.row(node);
        (linalg::argmax(row), row.to_vec())
    }

    pub fn predicted_labels(&self) -> Vec<usize> {
        (0..self.probs.rows()).map(|v| linalg::argmax(self.probs.row(v))).collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self
            .predicted_labels()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

const CHECKPOINT_MAGIC: &str = "ATOMv1";

fn write_mat(out: &mut String, m: &Mat) {
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn parse_mat(
    lines: &mut std::str::Lines,
    rows: usize,
    cols: usize,
    path: &str,
) -> Result<Mat, VictimError> {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        let line = lines.next().ok_or_else(|| VictimError::Format {
            path: path.to_string(),
            msg: format!("truncated: expected {rows} matrix rows"),
        })?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != cols {
            return Err(VictimError::Format {
                path: path.to_string(),
                msg: format!("row {r}: expected {cols} values, found {}", vals.len()),
            });
        }
        for (c, tok) in vals.iter().enumerate() {
            let v = tok.parse::<f64>().map_err(|_| VictimError::Format {
                path: path.to_string(),
                msg: format!("row {r}: invalid float {tok:?}"),
            })?;
            m.set(r, c, v);
        }
    }
    Ok(m)
}

/// Serialize weights as decimal text; values round-trip exactly because the
/// formatter emits shortest-exact representations.
pub fn save_victim(path: &Path, model: &GcnModel) -> Result<(), VictimError> {
    let d = model.w1.rows();
    let hidden = model.w1.cols();
    let c = model.w2.cols();
    let mut out = format!("{CHECKPOINT_MAGIC}\n{d} {hidden} {c}\n");
    write_mat(&mut out, &model.w1);
    write_mat(&mut out, &model.w2);
    let mut f = std::fs::File::create(path)
        .map_err(|source| VictimError::Io { path: path.display().to_string(), source })?;
    f.write_all(out.as_bytes())
        .map_err(|source| VictimError::Io { path: path.display().to_string(), source })
}

pub fn load_victim(path: &Path) -> Result<GcnModel, VictimError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| VictimError::Io { path: path.display().to_string(), source })?;
    let pstr = path.display().to_string();
    let mut lines = text.lines();
    match lines.next() {
        Some(CHECKPOINT_MAGIC) => {}
        other => {
            return Err(VictimError::Format {
                path: pstr,
                msg: format!("bad magic {other:?}, expected {CHECKPOINT_MAGIC:?}"),
            })
        }
    }
    let dims_line = lines.next().ok_or_else(|| VictimError::Format {
        path: pstr.clone(),
        msg: "missing dimension line".into(),
    })?;
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| VictimError::Format {
            path: pstr.clone(),
            msg: format!("invalid dimension line {dims_line:?}"),
        })?;
    let [d, hidden, c] = dims[..] else {
        return Err(VictimError::Format {
            path: pstr,
            msg: format!("expected 3 dimensions, found {}", dims.len()),
        });
    };
    let w1 = parse_mat(&mut lines, d, hidden, &pstr)?;
    let w2 = parse_mat(&mut lines, hidden, c, &pstr)?;
    Ok(GcnModel { w1, w2 })
}

/// Two 10-node communities, indicator features with mild noise, bridged by a
/// single edge; linearly separable so a GCN must fit it. Shared test fixture.
#[cfg(test)]
pub(crate) fn two_community_graph() -> AttributedGraph {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let n = 20;
    let mut edges = Vec::new();
    for block in 0..2 {
        let base = block * 10;
        for i in 0..10 {
            edges.push((base + i, base + (i + 1) % 10));
        }
        // chords for density
        for i in 0..5 {
            edges.push((base + i, base + i + 5));
        }
    }
    edges.push((0, 10));
    let features = Mat::from_fn(n, 4, |r, c| {
        let community = (r >= 10) as usize;
        let indicator = if c == community { 1.0 } else { 0.0 };
        indicator + 0.05 * rng.gen_range(-1.0..1.0)
    });
    let labels: Vec<usize> = (0..n).map(|v| (v >= 10) as usize).collect();
    AttributedGraph::new(n, &edges, features, labels).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AttributedGraph;

    use super::two_community_graph;

    #[test]
    fn normalized_adjacency_rows() {
        // path 0-1-2: check Â entries against hand computation
        let g = AttributedGraph::unlabeled(3, &[(0, 1), (1, 2)]).unwrap();
        let a = normalized_adjacency(&g);
        let s0 = 1.0 / 2.0_f64.sqrt(); // deg+1 = 2
        let s1 = 1.0 / 3.0_f64.sqrt();
        assert!((a.get(0, 0) - s0 * s0).abs() < 1e-15);
        assert!((a.get(0, 1) - s0 * s1).abs() < 1e-15);
        assert!((a.get(0, 2)).abs() < 1e-15);
        assert!((a.get(1, 1) - s1 * s1).abs() < 1e-15);
        // symmetry
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let g = two_community_graph();
        let mask: Vec<usize> = vec![0, 2, 4, 11, 13, 15];
        let a_hat = normalized_adjacency(&g);
        let px = a_hat.matmul(g.features());
        let wd = 5e-4;
        // seed picked so no hidden pre-activation sits near the ReLU kink
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model = GcnModel::init(g.feature_dim(), 5, g.class_count(), &mut rng);
        {
            let z1 = px.matmul(&model.w1);
            let near_kink = z1.data().iter().filter(|v| v.abs() < 1e-4).count();
            assert_eq!(near_kink, 0, "reseed: pre-activation at kink");
        }

        let (dw1, dw2, _) = gradients(&model, &a_hat, &px, g.labels(), &mask, wd);
        let eps = 1e-5;
        let check = |which: usize, analytic: &Mat| {
            for idx in 0..analytic.data().len() {
                let mut perturbed = model.clone();
                let target = if which == 0 { &mut perturbed.w1 } else { &mut perturbed.w2 };
                target.data_mut()[idx] += eps;
                let up = regularized_loss(&perturbed, &a_hat, &px, g.labels(), &mask, wd);
                let target = if which == 0 { &mut perturbed.w1 } else { &mut perturbed.w2 };
                target.data_mut()[idx] -= 2.0 * eps;
                let dn = regularized_loss(&perturbed, &a_hat, &px, g.labels(), &mask, wd);
                let fd = (up - dn) / (2.0 * eps);
                let a = analytic.data()[idx];
                let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
                assert!(rel < 1e-4, "w{} idx {idx}: analytic {a} vs fd {fd}", which + 1);
            }
        };
        check(0, &dw1);
        check(1, &dw2);
    }

    #[test]
    fn training_fits_separable_communities() {
        let g = two_community_graph();
        let mask: Vec<usize> = vec![0, 1, 2, 3, 10, 11, 12, 13];
        let victim = train_victim(&g, &mask, &VictimConfig::default(), 7).unwrap();
        assert!(victim.accuracy(g.labels()) >= 0.9, "accuracy {}", victim.accuracy(g.labels()));
        // responses are proper distributions
        for v in 0..g.node_count() {
            let (label, probs) = victim.respond(v);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(label, linalg::argmax(&probs));
        }
    }

    #[test]
    fn training_loss_decreases() {
        let g = two_community_graph();
        let mask: Vec<usize> = (0..20).collect();
        let a_hat = normalized_adjacency(&g);
        let px = a_hat.matmul(g.features());
        let cfg = VictimConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut model = GcnModel::init(g.feature_dim(), cfg.hidden, g.class_count(), &mut rng);
        let first = regularized_loss(&model, &a_hat, &px, g.labels(), &mask, cfg.weight_decay);
        let mut opt1 = Adam::new(model.w1.data().len(), cfg.lr);
        let mut opt2 = Adam::new(model.w2.data().len(), cfg.lr);
        for _ in 0..cfg.epochs {
            let (dw1, dw2, _) =
                gradients(&model, &a_hat, &px, g.labels(), &mask, cfg.weight_decay);
            opt1.step(model.w1.data_mut(), dw1.data());
            opt2.step(model.w2.data_mut(), dw2.data());
        }
        let last = regularized_loss(&model, &a_hat, &px, g.labels(), &mask, cfg.weight_decay);
        assert!(last < first * 0.5, "first {first} last {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let g = two_community_graph();
        let mask: Vec<usize> = vec![0, 1, 2, 10, 11, 12];
        let a = train_victim(&g, &mask, &VictimConfig::default(), 5).unwrap();
        let b = train_victim(&g, &mask, &VictimConfig::default(), 5).unwrap();
        assert_eq!(a.model.w1, b.model.w1);
        assert_eq!(a.model.w2, b.model.w2);
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let g = two_community_graph();
        let mask: Vec<usize> = vec![0, 1, 10, 11];
        let victim = train_victim(&g, &mask, &VictimConfig::default(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.ckpt");
        save_victim(&path, &victim.model).unwrap();
        let loaded = load_victim(&path).unwrap();
        assert_eq!(loaded, victim.model);
        // rebuilt activations identical too
        let rebuilt = TrainedVictim::from_model(&g, loaded);
        assert_eq!(rebuilt.hidden, victim.hidden);
        assert_eq!(rebuilt.probs, victim.probs);
    }

    #[test]
    fn load_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "NOTAMAGIC\n1 1 1\n0\n0\n").unwrap();
        assert!(matches!(load_victim(&path), Err(VictimError::Format { .. })));
        std::fs::write(&path, "ATOMv1\n2 3 2\n0 0 0\n").unwrap();
        let err = load_victim(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn empty_mask_rejected() {
        let g = two_community_graph();
        assert!(matches!(
            train_victim(&g, &[], &VictimConfig::default(), 1),
            Err(VictimError::EmptyMask)
        ));
        assert!(matches!(
            train_victim(&g, &[99], &VictimConfig::default(), 1),
            Err(VictimError::MaskOutOfRange(99))
        ));
    }
}
