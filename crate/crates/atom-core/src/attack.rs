//! Query-stream simulation: three extraction strategies, two benign client
//! styles, and the surrogate-training pipeline that grades how much of the
//! victim each query trace actually stole.
//!
//! Strategies only ever see the candidate mask they were given — the
//! attacker-visible slice of the graph — and interact with the victim through
//! its prediction API plus whatever static structure the mask reveals.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::graph::AttributedGraph;
use crate::linalg::{self, Mat};
use crate::victim::{self, GcnModel, TrainedVictim, VictimConfig};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("candidate mask is empty")]
    EmptyMask,
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Victim(#[from] victim::VictimError),
}

/// Who produced a query trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Age,
    Grain,
    Igp,
    Normal,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Age => "AGE",
            Origin::Grain => "GRAIN",
            Origin::Igp => "IGP",
            Origin::Normal => "NORMAL",
        }
    }

    pub fn parse(s: &str) -> Option<Origin> {
        match s {
            "AGE" => Some(Origin::Age),
            "GRAIN" => Some(Origin::Grain),
            "IGP" => Some(Origin::Igp),
            "NORMAL" => Some(Origin::Normal),
            _ => None,
        }
    }
}

/// One API interaction; `step` is 1-based within the user's trace.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub user_id: usize,
    pub step: usize,
    pub node: usize,
    pub response_label: usize,
    pub response_probs: Vec<f64>,
}

/// A complete user trace with its ground-truth detection label.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTrace {
    pub user_id: usize,
    pub origin: Origin,
    pub label: u8,
    /// Surrogate agreement for attack traces; benign traces have none.
    pub fidelity: Option<f64>,
    pub nodes: Vec<usize>,
}

/// Replay a node sequence against the victim's API.
pub fn replay(victim: &TrainedVictim, user_id: usize, nodes: &[usize]) -> Vec<QueryRecord> {
    nodes
        .iter()
        .enumerate()
        .map(|(i, &node)| {
            let (response_label, response_probs) = victim.respond(node);
            QueryRecord { user_id, step: i + 1, node, response_label, response_probs }
        })
        .collect()
}

/// Percentile rank of each score within its population: the fraction of
/// *other* entries strictly below, ties sharing a rank. A singleton scores 0.
pub fn percentile_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let denom = 1.0_f64.max((n - 1) as f64);
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            out[k] = i as f64 / denom;
        }
        i = j + 1;
    }
    out
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Lloyd's algorithm, fixed iteration count. Empty clusters keep their old
/// centroid; k is clamped to the population size.
fn kmeans_centroids(
    points: &[&[f64]],
    k: usize,
    iters: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<Vec<f64>> {
    let k = k.clamp(1, points.len());
    let picks = rand::seq::index::sample(rng, points.len(), k);
    let mut centroids: Vec<Vec<f64>> = picks.iter().map(|i| points[i].to_vec()).collect();
    let dim = points[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = euclidean(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            counts[best] += 1;
            for (s, &x) in sums[best].iter_mut().zip(*p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    centroids
}

/// AGE: rank candidates once by the mean of three percentile scores —
/// response entropy, embedding-space density (negative mean distance to
/// k-means centroids of the candidates' hidden states), and degree — then
/// smooth each score over in-mask neighbors and emit the top of the list.
/// The RNG seed only affects centroid initialization.
pub fn age_sequence(
    graph: &AttributedGraph,
    victim: &TrainedVictim,
    mask: &[usize],
    budget: usize,
    seed: u64,
) -> Result<Vec<usize>, AttackError> {
    if mask.is_empty() {
        return Err(AttackError::EmptyMask);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let entropies: Vec<f64> = mask.iter().map(|&v| linalg::entropy(victim.probs.row(v))).collect();
    let points: Vec<&[f64]> = mask.iter().map(|&v| victim.hidden.row(v)).collect();
    let centroids = kmeans_centroids(&points, graph.class_count(), 10, &mut rng);
    let densities: Vec<f64> = points
        .iter()
        .map(|p| {
            let mean_d: f64 =
                centroids.iter().map(|c| euclidean(p, c)).sum::<f64>() / centroids.len() as f64;
            -mean_d
        })
        .collect();
    let degrees: Vec<f64> = mask.iter().map(|&v| graph.degree(v) as f64).collect();

    let pe = percentile_ranks(&entropies);
    let pd = percentile_ranks(&densities);
    let pg = percentile_ranks(&degrees);
    // base score per mask position
    let base: Vec<f64> = (0..mask.len()).map(|i| (pe[i] + pd[i] + pg[i]) / 3.0).collect();
    let score_of = |node: usize| -> Option<f64> {
        mask.iter().position(|&m| m == node).map(|i| base[i])
    };

    // neighborhood smoothing over in-mask neighbors, center included
    let mut ranked: Vec<(usize, f64)> = mask
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut acc = base[i];
            let mut count = 1usize;
            for &u in graph.neighbors(v) {
                if let Some(s) = score_of(u) {
                    acc += s;
                    count += 1;
                }
            }
            (v, acc / count as f64)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(budget.min(mask.len())).map(|(v, _)| v).collect())
}

/// GRAIN: greedy set selection maximizing closed-neighborhood coverage plus a
/// γ-weighted mean pairwise distance term, both computed on the full graph
/// and normalized. Deterministic; the victim is part of the strategy
/// signature but this selector never queries it for scoring.
pub fn grain_sequence(
    graph: &AttributedGraph,
    _victim: &TrainedVictim,
    mask: &[usize],
    budget: usize,
    gamma: f64,
) -> Result<Vec<usize>, AttackError> {
    if mask.is_empty() {
        return Err(AttackError::EmptyMask);
    }
    let n = graph.node_count() as f64;

    // pairwise BFS rows restricted to mask members
    let dist_rows: Vec<Vec<Option<usize>>> =
        mask.iter().map(|&v| graph.bfs_distances(v)).collect();
    let mut d_hat = 0usize;
    for (i, row) in dist_rows.iter().enumerate() {
        for &m in &mask[i + 1..] {
            if let Some(d) = row[m] {
                d_hat = d_hat.max(d);
            }
        }
    }
    let d_hat = d_hat.max(1) as f64;

    let mut covered = vec![false; graph.node_count()];
    let mut covered_count = 0usize;
    let mut selected: Vec<usize> = Vec::new();
    let mut selected_pos: Vec<usize> = Vec::new(); // positions within mask
    let mut finite_sum = 0.0;
    let mut finite_pairs = 0usize;
    let mut remaining: Vec<usize> = (0..mask.len()).collect();

    let steps = budget.min(mask.len());
    for _ in 0..steps {
        let mut best: Option<(f64, usize, usize)> = None; // (objective, node, remaining-index)
        for (ri, &mi) in remaining.iter().enumerate() {
            let v = mask[mi];
            let mut new_cov = covered_count;
            for &u in graph.closed_neighborhood(v).iter() {
                if !covered[u] {
                    new_cov += 1;
                }
            }
            let mut fs = finite_sum;
            let mut fp = finite_pairs;
            for &sp in &selected_pos {
                if let Some(d) = dist_rows[mi][mask[sp]] {
                    fs += d as f64;
                    fp += 1;
                }
            }
            let dist_term = if fp == 0 { 0.0 } else { fs / fp as f64 };
            let objective = new_cov as f64 / n + gamma * dist_term / d_hat;
            let better = match best {
                None => true,
                Some((bo, bn, _)) => {
                    objective > bo || (objective == bo && v < bn)
                }
            };
            if better {
                best = Some((objective, v, ri));
            }
        }
        let (_, v, ri) = best.expect("remaining nonempty");
        let mi = remaining.swap_remove(ri);
        for &u in graph.closed_neighborhood(v).iter() {
            if !covered[u] {
                covered[u] = true;
                covered_count += 1;
            }
        }
        for &sp in &selected_pos {
            if let Some(d) = dist_rows[mi][mask[sp]] {
                finite_sum += d as f64;
                finite_pairs += 1;
            }
        }
        selected.push(v);
        selected_pos.push(mi);
    }
    Ok(selected)
}

/// IGP: a static degree/entropy percentile score prefilters candidates; each
/// step then greedily maximizes the simulated perturbation — the entropy
/// swing a one-step pseudo-label push would cause in the neighborhood, plus
/// the candidate's own current entropy — and commits that push.
pub fn igp_sequence(
    graph: &AttributedGraph,
    victim: &TrainedVictim,
    mask: &[usize],
    budget: usize,
    alpha: f64,
    prefilter_k: usize,
) -> Result<Vec<usize>, AttackError> {
    if mask.is_empty() {
        return Err(AttackError::EmptyMask);
    }
    let degrees: Vec<f64> = mask.iter().map(|&v| graph.degree(v) as f64).collect();
    let entropies: Vec<f64> = mask.iter().map(|&v| linalg::entropy(victim.probs.row(v))).collect();
    let pd = percentile_ranks(&degrees);
    let pe = percentile_ranks(&entropies);
    let static_score: Vec<f64> =
        (0..mask.len()).map(|i| alpha * pd[i] + (1.0 - alpha) * pe[i]).collect();

    let c = victim.probs.cols();
    let mut current: Vec<Vec<f64>> =
        (0..graph.node_count()).map(|v| victim.probs.row(v).to_vec()).collect();
    let mut remaining: Vec<usize> = (0..mask.len()).collect();
    let mut out = Vec::new();

    let steps = budget.min(mask.len());
    for _ in 0..steps {
        // static prefilter: best prefilter_k remaining, score desc then id asc
        let mut order: Vec<usize> = remaining.clone();
        order.sort_by(|&a, &b| {
            static_score[b].total_cmp(&static_score[a]).then(mask[a].cmp(&mask[b]))
        });
        order.truncate(prefilter_k.max(1));

        let mut best: Option<(f64, usize)> = None; // (delta, mask index)
        for &mi in &order {
            let v = mask[mi];
            let label = linalg::argmax(&current[v]);
            let mut delta = linalg::entropy(&current[v]);
            for &u in graph.neighbors(v) {
                let before = linalg::entropy(&current[u]);
                let mut pushed = current[u].clone();
                pushed[label] += 1.0;
                let total: f64 = pushed.iter().sum();
                for p in pushed.iter_mut() {
                    *p /= total;
                }
                delta += (linalg::entropy(&pushed) - before).abs();
            }
            let better = match best {
                None => true,
                Some((bd, bmi)) => delta > bd || (delta == bd && mask[mi] < mask[bmi]),
            };
            if better {
                best = Some((delta, mi));
            }
        }
        let (_, mi) = best.expect("prefilter nonempty");
        let v = mask[mi];
        let label = linalg::argmax(&current[v]);
        let mut onehot = vec![0.0; c];
        onehot[label] = 1.0;
        for &u in graph.neighbors(v) {
            let mut pushed = current[u].clone();
            pushed[label] += 1.0;
            let total: f64 = pushed.iter().sum();
            for p in pushed.iter_mut() {
                *p /= total;
            }
            current[u] = pushed;
        }
        current[v] = onehot;
        remaining.retain(|&r| r != mi);
        out.push(v);
    }
    Ok(out)
}

/// How a benign client browses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalStyle {
    /// Distinct uniform nodes, no structure.
    RandomNodes,
    /// A uniform random walk; revisits happen naturally.
    RandomWalk,
}

/// A benign query trace with length drawn uniformly from [min_len, max_len].
pub fn normal_sequence(
    graph: &AttributedGraph,
    style: NormalStyle,
    min_len: usize,
    max_len: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<usize> {
    let n = graph.node_count();
    let len = rng.gen_range(min_len..=max_len);
    match style {
        NormalStyle::RandomNodes => {
            let len = len.min(n);
            let mut nodes: Vec<usize> = (0..n).collect();
            nodes.shuffle(rng);
            nodes.truncate(len);
            nodes
        }
        NormalStyle::RandomWalk => {
            let mut start = rng.gen_range(0..n);
            while graph.degree(start) == 0 {
                start = rng.gen_range(0..n);
            }
            let mut walk = vec![start];
            let mut here = start;
            while walk.len() < len {
                let nbrs = graph.neighbors(here);
                here = nbrs[rng.gen_range(0..nbrs.len())];
                walk.push(here);
            }
            walk
        }
    }
}

/// Surrogate trained from one trace's worth of stolen knowledge.
#[derive(Debug, Clone)]
pub struct SurrogateResult {
    pub model: GcnModel,
    /// Agreement with the victim's predicted labels over every node.
    pub fidelity: f64,
    /// Training produced non-finite weights; fidelity is pinned to 0.
    pub diverged: bool,
}

/// What the attacker can reconstruct from its queries: the union of closed
/// 1-hop neighborhoods, with an edge visible only when some single query
/// exposed both endpoints.
pub fn visible_subgraph(
    graph: &AttributedGraph,
    queried: &[usize],
) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut distinct: Vec<usize> = queried.to_vec();
    distinct.sort_unstable();
    distinct.dedup();

    let mut members: Vec<usize> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for &q in &distinct {
        let ego = graph.ego_subgraph(q).expect("queried node in range");
        members.extend_from_slice(&ego.members);
        edges.extend_from_slice(&ego.edges);
    }
    members.sort_unstable();
    members.dedup();
    edges.sort_unstable();
    edges.dedup();
    (members, edges)
}

/// Train a same-architecture surrogate on the victim's responses at the
/// queried nodes, propagate it over the full graph, and measure label
/// agreement everywhere.
pub fn surrogate_fidelity(
    graph: &AttributedGraph,
    victim: &TrainedVictim,
    queried: &[usize],
    config: &VictimConfig,
    seed: u64,
) -> Result<SurrogateResult, AttackError> {
    if queried.is_empty() {
        return Err(AttackError::EmptyQuerySet);
    }
    let (members, vis_edges) = visible_subgraph(graph, queried);
    let local_of = |v: usize| members.binary_search(&v).expect("member");

    let victim_labels = victim.predicted_labels();
    let local_edges: Vec<(usize, usize)> =
        vis_edges.iter().map(|&(a, b)| (local_of(a), local_of(b))).collect();
    let local_features = Mat::from_fn(members.len(), graph.feature_dim(), |r, c| {
        graph.features().get(members[r], c)
    });
    let local_labels: Vec<usize> = members.iter().map(|&v| victim_labels[v]).collect();
    let sub = AttributedGraph::new(members.len(), &local_edges, local_features, local_labels.clone())
        .expect("visible subgraph is valid");

    let mut distinct: Vec<usize> = queried.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let local_mask: Vec<usize> = distinct.iter().map(|&q| local_of(q)).collect();

    let model =
        victim::train_gcn(&sub, &local_labels, victim.probs.cols(), &local_mask, config, seed)?;

    let diverged = model.w1.data().iter().chain(model.w2.data()).any(|v| !v.is_finite());
    if diverged {
        return Ok(SurrogateResult { model, fidelity: 0.0, diverged: true });
    }
    let applied = TrainedVictim::from_model(graph, model);
    let agree = applied
        .predicted_labels()
        .iter()
        .zip(&victim_labels)
        .filter(|(a, b)| a == b)
        .count();
    let fidelity = agree as f64 / graph.node_count() as f64;
    Ok(SurrogateResult { model: applied.model, fidelity, diverged: false })
}

/// Ground-truth labeling rule for simulated traces. High-fidelity long traces
/// are extractions, low-fidelity or short ones are not, and the ambiguous
/// middle is discarded rather than mislabeled.
pub fn label_trace(fidelity: f64, len: usize) -> Option<u8> {
    if fidelity > 0.65 && len > 20 {
        Some(1)
    } else if fidelity < 0.2 || len <= 20 {
        Some(0)
    } else {
        None
    }
}

/// Pool file: one user per line, `user_id,label,origin,fidelity,node;node;…`
/// with an empty fidelity field for benign users.
pub fn save_pool(path: &Path, pool: &[UserTrace]) -> Result<(), AttackError> {
    let mut out = String::new();
    for t in pool {
        let fid = t.fidelity.map(|f| format!("{f}")).unwrap_or_default();
        let nodes: Vec<String> = t.nodes.iter().map(|n| n.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.user_id,
            t.label,
            t.origin.as_str(),
            fid,
            nodes.join(";")
        ));
    }
    let mut f = std::fs::File::create(path)
        .map_err(|source| AttackError::Io { path: path.display().to_string(), source })?;
    f.write_all(out.as_bytes())
        .map_err(|source| AttackError::Io { path: path.display().to_string(), source })
}

pub fn load_pool(path: &Path) -> Result<Vec<UserTrace>, AttackError> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| AttackError::Io { path: pstr.clone(), source })?;
    let mut pool = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| AttackError::Parse { path: pstr.clone(), line, msg };
        let fields: Vec<&str> = raw.splitn(5, ',').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 comma fields, found {}", fields.len())));
        }
        let user_id =
            fields[0].parse::<usize>().map_err(|_| err(format!("bad user id {:?}", fields[0])))?;
        let label =
            fields[1].parse::<u8>().map_err(|_| err(format!("bad label {:?}", fields[1])))?;
        if label > 1 {
            return Err(err(format!("label must be 0 or 1, found {label}")));
        }
        let origin =
            Origin::parse(fields[2]).ok_or_else(|| err(format!("bad origin {:?}", fields[2])))?;
        let fidelity = if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].parse::<f64>().map_err(|_| err(format!("bad fidelity {:?}", fields[3])))?)
        };
        let nodes: Vec<usize> = fields[4]
            .split(';')
            .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad node {t:?}"))))
            .collect::<Result<_, _>>()?;
        pool.push(UserTrace { user_id, origin, label, fidelity, nodes });
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{train_victim, VictimConfig};
    use rand::SeedableRng;

    fn test_setup() -> (AttributedGraph, TrainedVictim) {
        let graph = crate::victim::two_community_graph();
        let mask: Vec<usize> = vec![0, 1, 2, 3, 10, 11, 12, 13];
        let victim = train_victim(&graph, &mask, &VictimConfig::default(), 7).unwrap();
        (graph, victim)
    }

    #[test]
    fn percentile_ranks_hand_case() {
        assert_eq!(percentile_ranks(&[10.0, 20.0, 20.0, 30.0]), vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]);
        assert_eq!(percentile_ranks(&[5.0]), vec![0.0]);
        assert_eq!(percentile_ranks(&[2.0, 1.0]), vec![1.0, 0.0]);
        let all_same = percentile_ranks(&[3.0, 3.0, 3.0]);
        assert_eq!(all_same, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn age_emits_distinct_in_mask_nodes_within_budget() {
        let (graph, victim) = test_setup();
        let mask: Vec<usize> = (0..20).step_by(2).collect();
        let seq = age_sequence(&graph, &victim, &mask, 6, 3).unwrap();
        assert_eq!(seq.len(), 6);
        let mut sorted = seq.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6, "duplicates in {seq:?}");
        assert!(seq.iter().all(|v| mask.contains(v)));
        // budget larger than mask truncates to mask
        let all = age_sequence(&graph, &victim, &mask, 100, 3).unwrap();
        assert_eq!(all.len(), mask.len());
    }

    #[test]
    fn age_matches_score_oracle_ordering() {
        // recompute the smoothed scores independently and check the emitted
        // order is exactly score-desc with id tiebreak
        let (graph, victim) = test_setup();
        let mask: Vec<usize> = (0..20).collect();
        let seed = 11;
        let seq = age_sequence(&graph, &victim, &mask, mask.len(), seed).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let entropies: Vec<f64> =
            mask.iter().map(|&v| linalg::entropy(victim.probs.row(v))).collect();
        let points: Vec<&[f64]> = mask.iter().map(|&v| victim.hidden.row(v)).collect();
        let centroids = kmeans_centroids(&points, graph.class_count(), 10, &mut rng);
        let densities: Vec<f64> = points
            .iter()
            .map(|p| {
                -centroids.iter().map(|c| euclidean(p, c)).sum::<f64>() / centroids.len() as f64
            })
            .collect();
        let degrees: Vec<f64> = mask.iter().map(|&v| graph.degree(v) as f64).collect();
        let pe = percentile_ranks(&entropies);
        let pd = percentile_ranks(&densities);
        let pg = percentile_ranks(&degrees);
        let base: Vec<f64> = (0..20).map(|i| (pe[i] + pd[i] + pg[i]) / 3.0).collect();
        let smoothed: Vec<f64> = (0..20)
            .map(|v| {
                let nbrs: Vec<usize> =
                    graph.neighbors(v).iter().copied().filter(|u| mask.contains(u)).collect();
                let total: f64 = base[v] + nbrs.iter().map(|&u| base[u]).sum::<f64>();
                total / (nbrs.len() + 1) as f64
            })
            .collect();
        for w in seq.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(
                smoothed[a] > smoothed[b] || (smoothed[a] == smoothed[b] && a < b),
                "order violated at {a} vs {b}"
            );
        }
    }

    #[test]
    fn age_is_deterministic_given_seed() {
        let (graph, victim) = test_setup();
        let mask: Vec<usize> = (0..20).collect();
        let a = age_sequence(&graph, &victim, &mask, 10, 5).unwrap();
        let b = age_sequence(&graph, &victim, &mask, 10, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grain_matches_greedy_oracle() {
        let (graph, victim) = test_setup();
        let mask: Vec<usize> = vec![0, 3, 5, 8, 11, 14, 17, 19];
        let gamma = 1.0;
        let budget = 5;
        let seq = grain_sequence(&graph, &victim, &mask, budget, gamma).unwrap();

        // oracle: recompute everything from scratch at each step
        let n = graph.node_count() as f64;
        let mut d_hat = 0usize;
        for (i, &a) in mask.iter().enumerate() {
            let d = graph.bfs_distances(a);
            for &b in &mask[i + 1..] {
                if let Some(x) = d[b] {
                    d_hat = d_hat.max(x);
                }
            }
        }
        let d_hat = d_hat.max(1) as f64;
        let objective = |sel: &[usize]| -> f64 {
            let mut covered = std::collections::BTreeSet::new();
            for &v in sel {
                for u in graph.closed_neighborhood(v) {
                    covered.insert(u);
                }
            }
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for (i, &a) in sel.iter().enumerate() {
                let d = graph.bfs_distances(a);
                for &b in &sel[i + 1..] {
                    if let Some(x) = d[b] {
                        sum += x as f64;
                        pairs += 1;
                    }
                }
            }
            let dist = if pairs == 0 { 0.0 } else { sum / pairs as f64 };
            covered.len() as f64 / n + gamma * dist / d_hat
        };

        let mut sel: Vec<usize> = Vec::new();
        let mut remaining: Vec<usize> = mask.clone();
        for step in 0..budget {
            let mut best: Option<(f64, usize)> = None;
            for &c in &remaining {
                let mut trial = sel.clone();
                trial.push(c);
                let o = objective(&trial);
                let better = match best {
                    None => true,
                    Some((bo, bn)) => o > bo || (o == bo && c < bn),
                };
                if better {
                    best = Some((o, c));
                }
            }
            let (_, pick) = best.unwrap();
            assert_eq!(seq[step], pick, "step {step}: {seq:?}");
            sel.push(pick);
            remaining.retain(|&r| r != pick);
        }
    }

    #[test]
    fn grain_first_pick_maximizes_coverage() {
        let (graph, victim) = test_setup();
        let mask: Vec<usize> = (0..20).collect();
        let seq = grain_sequence(&graph, &victim, &mask, 1, 1.0).unwrap();
        let best_cov = mask
            .iter()
            .map(|&v| graph.closed_neighborhood(v).len())
            .max()
            .unwrap();
        assert_eq!(graph.closed_neighborhood(seq[0]).len(), best_cov);
    }

    #[test]
    fn igp_matches_perturbation_oracle() {
        let (graph, victim) = test_setup();
        let mask: Vec<usize> = (0..20).collect();
        let budget = 6;
        let alpha = 0.5;
        let k = 10;
        let seq = igp_sequence(&graph, &victim, &mask, budget, alpha, k).unwrap();

        // oracle: replay with an independent implementation
        let degrees: Vec<f64> = mask.iter().map(|&v| graph.degree(v) as f64).collect();
        let ents: Vec<f64> =
            mask.iter().map(|&v| linalg::entropy(victim.probs.row(v))).collect();
        let pd = percentile_ranks(&degrees);
        let pe = percentile_ranks(&ents);
        let stat: Vec<f64> = (0..20).map(|i| alpha * pd[i] + (1.0 - alpha) * pe[i]).collect();
        let mut current: Vec<Vec<f64>> =
            (0..20).map(|v| victim.probs.row(v).to_vec()).collect();
        let mut remaining: Vec<usize> = (0..20).collect();
        for (step, &expect) in seq.iter().enumerate() {
            let mut order = remaining.clone();
            order.sort_by(|&a, &b| stat[b].total_cmp(&stat[a]).then(a.cmp(&b)));
            order.truncate(k);
            let mut best: Option<(f64, usize)> = None;
            for &v in &order {
                let label = linalg::argmax(&current[v]);
                let mut delta = linalg::entropy(&current[v]);
                for &u in graph.neighbors(v) {
                    let mut pushed = current[u].clone();
                    pushed[label] += 1.0;
                    let tot: f64 = pushed.iter().sum();
                    for p in pushed.iter_mut() {
                        *p /= tot;
                    }
                    delta += (linalg::entropy(&pushed) - linalg::entropy(&current[u])).abs();
                }
                let better = match best {
                    None => true,
                    Some((bd, bv)) => delta > bd || (delta == bd && v < bv),
                };
                if better {
                    best = Some((delta, v));
                }
            }
            let (_, pick) = best.unwrap();
            assert_eq!(expect, pick, "step {step}");
            let label = linalg::argmax(&current[pick]);
            for &u in graph.neighbors(pick) {
                let mut pushed = current[u].clone();
                pushed[label] += 1.0;
                let tot: f64 = pushed.iter().sum();
                for p in pushed.iter_mut() {
                    *p /= tot;
                }
                current[u] = pushed;
            }
            let mut onehot = vec![0.0; victim.probs.cols()];
            onehot[label] = 1.0;
            current[pick] = onehot;
            remaining.retain(|&r| r != pick);
        }
    }

    #[test]
    fn normal_sequences_respect_structure() {
        let (graph, _) = test_setup();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let nodes = normal_sequence(&graph, NormalStyle::RandomNodes, 5, 15, &mut rng);
            assert!(nodes.len() >= 5 && nodes.len() <= 15);
            let mut sorted = nodes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), nodes.len(), "random nodes must be distinct");

            let walk = normal_sequence(&graph, NormalStyle::RandomWalk, 5, 15, &mut rng);
            assert!(walk.len() >= 5 && walk.len() <= 15);
            for w in walk.windows(2) {
                assert!(graph.has_edge(w[0], w[1]), "walk broke an edge: {w:?}");
            }
        }
    }

    #[test]
    fn visible_subgraph_matches_definition() {
        let (graph, _) = test_setup();
        let queried = vec![0, 7, 15];
        let (members, edges) = visible_subgraph(&graph, &queried);
        // membership: exactly the union of closed neighborhoods
        let mut expect_members: Vec<usize> = Vec::new();
        for &q in &queried {
            expect_members.extend(graph.closed_neighborhood(q));
        }
        expect_members.sort_unstable();
        expect_members.dedup();
        assert_eq!(members, expect_members);
        // edges: present iff some query exposes both endpoints
        for &(a, b) in &edges {
            assert!(graph.has_edge(a, b));
            assert!(queried.iter().any(|&q| {
                let nb = graph.closed_neighborhood(q);
                nb.contains(&a) && nb.contains(&b)
            }));
        }
        for (a, b) in graph.edges() {
            let exposed = queried.iter().any(|&q| {
                let nb = graph.closed_neighborhood(q);
                nb.contains(&a) && nb.contains(&b)
            });
            assert_eq!(edges.contains(&(a, b)), exposed, "edge ({a},{b})");
        }
    }

    #[test]
    fn surrogate_on_everything_is_high_fidelity() {
        let (graph, victim) = test_setup();
        let queried: Vec<usize> = (0..20).collect();
        let res =
            surrogate_fidelity(&graph, &victim, &queried, &VictimConfig::default(), 21).unwrap();
        assert!(!res.diverged);
        assert!(res.fidelity >= 0.9, "fidelity {}", res.fidelity);
    }

    #[test]
    fn surrogate_fidelity_bounded_and_deterministic() {
        let (graph, victim) = test_setup();
        let queried = vec![0, 1, 5];
        let a = surrogate_fidelity(&graph, &victim, &queried, &VictimConfig::default(), 4).unwrap();
        let b = surrogate_fidelity(&graph, &victim, &queried, &VictimConfig::default(), 4).unwrap();
        assert!(a.fidelity >= 0.0 && a.fidelity <= 1.0);
        assert_eq!(a.fidelity, b.fidelity);
        assert_eq!(a.model.w1, b.model.w1);
    }

    #[test]
    fn label_rule_boundaries() {
        assert_eq!(label_trace(0.7, 30), Some(1));
        assert_eq!(label_trace(0.66, 21), Some(1));
        assert_eq!(label_trace(0.65, 30), None); // needs strict >
        assert_eq!(label_trace(0.7, 20), Some(0)); // too short
        assert_eq!(label_trace(0.19, 30), Some(0));
        assert_eq!(label_trace(0.2, 30), None); // ambiguous band
        assert_eq!(label_trace(0.5, 10), Some(0));
    }

    #[test]
    fn pool_round_trips() {
        let pool = vec![
            UserTrace {
                user_id: 0,
                origin: Origin::Age,
                label: 1,
                fidelity: Some(0.8125),
                nodes: vec![3, 1, 4, 1, 5],
            },
            UserTrace {
                user_id: 1,
                origin: Origin::Normal,
                label: 0,
                fidelity: None,
                nodes: vec![9, 2, 6],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        save_pool(&path, &pool).unwrap();
        let loaded = load_pool(&path).unwrap();
        assert_eq!(loaded, pool);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("0,1,AGE,0.8125,3;1;4;1;5\n"));
        assert!(text.contains("1,0,NORMAL,,9;2;6\n"));
    }

    #[test]
    fn pool_load_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        std::fs::write(&path, "0,3,AGE,0.5,1;2\n").unwrap();
        assert!(load_pool(&path).is_err());
        std::fs::write(&path, "0,1,WHO,0.5,1;2\n").unwrap();
        let err = load_pool(&path).unwrap_err();
        assert!(err.to_string().contains("origin"));
    }
}
