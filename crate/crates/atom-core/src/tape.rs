//! Minimal reverse-mode autodiff over vector nodes.
//!
//! Every node is a `Vec<f64>`; scalars are length-1 vectors. Matrices enter
//! as flattened row-major leaves so parameter gradients come back in the same
//! layout the optimizer stores. The tape grows append-only; `backward` walks
//! it once in reverse.

use crate::linalg;

/// Handle into a [`Tape`]. Cheap to copy; only valid for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = W x, with W a (rows × cols) matrix stored flattened row-major.
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// y_i = a + k * x_i; only the slope matters on the way back
    Affine { x: Var, k: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Concat(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// scalar y = x[idx]
    Pick { x: Var, idx: usize },
    Sum(Var),
    Dot(Var, Var),
    Exp(Var),
    /// y = ln(x) elementwise; caller guarantees positivity.
    Ln(Var),
    /// scalar y = min(x, y) of two scalars
    MinPair(Var, Var),
    /// y_i = clamp(x_i, lo, hi); gradient passes only inside the interval.
    Clamp { x: Var, lo: f64, hi: f64 },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Append-only computation tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![value])
    }

    /// y = W x with `w` flattened row-major (rows × cols).
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(wv.len(), rows * cols);
        debug_assert_eq!(xv.len(), cols);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            let base = r * cols;
            for c in 0..cols {
                acc += wv[base + c] * xv[c];
            }
            out[r] = acc;
        }
        self.push(Op::MatVec { w, x, rows, cols }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(Op::Hadamard(a, b), out)
    }

    /// Elementwise a + k·x.
    pub fn affine(&mut self, x: Var, k: f64, a: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| a + k * v).collect();
        self.push(Op::Affine { x, k }, out)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| linalg::sigmoid(v)).collect();
        self.push(Op::Sigmoid(x), out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect();
        self.push(Op::Tanh(x), out)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.extend_from_slice(&self.nodes[b.0].value);
        self.push(Op::Concat(a, b), out)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = linalg::softmax(&self.nodes[x.0].value);
        self.push(Op::Softmax(x), out)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = linalg::log_softmax(&self.nodes[x.0].value);
        self.push(Op::LogSoftmax(x), out)
    }

    pub fn pick(&mut self, x: Var, idx: usize) -> Var {
        let v = self.nodes[x.0].value[idx];
        self.push(Op::Pick { x, idx }, vec![v])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(Op::Sum(x), vec![s])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = linalg::dot(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(Op::Dot(a, b), vec![s])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v.exp()).collect();
        self.push(Op::Exp(x), out)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v.ln()).collect();
        self.push(Op::Ln(x), out)
    }

    pub fn min_pair(&mut self, a: Var, b: Var) -> Var {
        let av = self.scalar(a);
        let bv = self.scalar(b);
        self.push(Op::MinPair(a, b), vec![av.min(bv)])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp { x, lo, hi }, out)
    }

    /// Gradient of the scalar at `root` with respect to every node, as one
    /// adjoint vector per node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&v| v == 0.0) {
                grads[i] = g;
                continue;
            }
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::MatVec { w, x, rows, cols } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let base = r * cols;
                        for c in 0..cols {
                            grads[w.0][base + c] += gr * xv[c];
                            grads[x.0][c] += gr * wv[base + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    for (dst, &s) in grads[b.0].iter_mut().zip(&g) {
                        *dst -= s;
                    }
                }
                Op::Hadamard(a, b) => {
                    let bv = self.nodes[b.0].value.clone();
                    let av = &self.nodes[a.0].value;
                    for k in 0..g.len() {
                        grads[a.0][k] += g[k] * bv[k];
                        grads[b.0][k] += g[k] * av[k];
                    }
                }
                Op::Affine { x, k } => {
                    for (dst, &s) in grads[x.0].iter_mut().zip(&g) {
                        *dst += k * s;
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = &self.nodes[i].value;
                    for k in 0..g.len() {
                        grads[x.0][k] += g[k] * yv[k] * (1.0 - yv[k]);
                    }
                }
                Op::Tanh(x) => {
                    let yv = &self.nodes[i].value;
                    for k in 0..g.len() {
                        grads[x.0][k] += g[k] * (1.0 - yv[k] * yv[k]);
                    }
                }
                Op::Concat(a, b) => {
                    let la = self.nodes[a.0].value.len();
                    accumulate(&mut grads[a.0], &g[..la]);
                    accumulate(&mut grads[b.0], &g[la..]);
                }
                Op::Softmax(x) => {
                    // dL/dx = p ⊙ (g − (g·p))
                    let p = &self.nodes[i].value;
                    let gp = linalg::dot(&g, p);
                    for k in 0..g.len() {
                        grads[x.0][k] += p[k] * (g[k] - gp);
                    }
                }
                Op::LogSoftmax(x) => {
                    // dL/dx = g − p · Σg, with p = exp(log_softmax)
                    let lp = &self.nodes[i].value;
                    let gs: f64 = g.iter().sum();
                    for k in 0..g.len() {
                        grads[x.0][k] += g[k] - lp[k].exp() * gs;
                    }
                }
                Op::Pick { x, idx } => {
                    grads[x.0][idx] += g[0];
                }
                Op::Sum(x) => {
                    for dst in grads[x.0].iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let bv = self.nodes[b.0].value.clone();
                    let av = &self.nodes[a.0].value;
                    for k in 0..bv.len() {
                        grads[a.0][k] += g[0] * bv[k];
                        grads[b.0][k] += g[0] * av[k];
                    }
                }
                Op::Exp(x) => {
                    let yv = &self.nodes[i].value;
                    for k in 0..g.len() {
                        grads[x.0][k] += g[k] * yv[k];
                    }
                }
                Op::Ln(x) => {
                    let xv = &self.nodes[x.0].value;
                    for k in 0..g.len() {
                        grads[x.0][k] += g[k] / xv[k];
                    }
                }
                Op::MinPair(a, b) => {
                    // ties route to the first argument
                    if self.nodes[a.0].value[0] <= self.nodes[b.0].value[0] {
                        grads[a.0][0] += g[0];
                    } else {
                        grads[b.0][0] += g[0];
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    for k in 0..g.len() {
                        if xv[k] > lo && xv[k] < hi {
                            grads[x.0][k] += g[k];
                        }
                    }
                }
            }
            grads[i] = g;
        }
        Gradients(grads)
    }
}

/// Adjoint vectors from [`Tape::backward`], indexed by the original handles.
pub struct Gradients(Vec<Vec<f64>>);

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.0[v.0]
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    /// Central finite difference on a scalar function of a flat input vector.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let up = f(&xp);
            xp[i] = x[i] - eps;
            let dn = f(&xp);
            xp[i] = x[i];
            g[i] = (up - dn) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let denom = 1.0_f64.max(x.abs()).max(y.abs());
            assert!(
                ((x - y) / denom).abs() < tol,
                "component {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn matvec_forward_and_grad() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]); // 2x3
        let x = t.leaf(vec![1.0, -1.0, 2.0]);
        let y = t.matvec(w, x, 2, 3);
        assert_eq!(t.value(y), &[5.0, 11.0]);
        let s = t.sum(y);
        let g = t.backward(s);
        // d(sum Wx)/dW = [x; x], d/dx = column sums of W
        assert_eq!(g.get(w), vec![1.0, -1.0, 2.0, 1.0, -1.0, 2.0]);
        assert_eq!(g.get(x), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn softmax_pick_matches_fd() {
        let x0 = [0.3, -1.2, 0.8, 0.1];
        let run = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(x.to_vec());
            let p = t.softmax(v);
            let y = t.pick(p, 2);
            t.scalar(y)
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.to_vec());
        let p = t.softmax(v);
        let y = t.pick(p, 2);
        let g = t.backward(y);
        assert_close(&g.get(v), &fd_grad(run, &x0, 1e-6), 1e-6);
    }

    #[test]
    fn log_softmax_grad_matches_fd() {
        let x0 = [0.5, 1.5, -0.7];
        let run = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(x.to_vec());
            let lp = t.log_softmax(v);
            // weighted sum exercises the full Jacobian, not just one row
            let w = t.leaf(vec![0.2, -1.0, 0.7]);
            let d = t.dot(lp, w);
            t.scalar(d)
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.to_vec());
        let lp = t.log_softmax(v);
        let w = t.leaf(vec![0.2, -1.0, 0.7]);
        let d = t.dot(lp, w);
        let g = t.backward(d);
        assert_close(&g.get(v), &fd_grad(run, &x0, 1e-6), 1e-6);
    }

    #[test]
    fn gru_style_composite_matches_fd() {
        // one fused-gate step built from the same ops the detector uses
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let dim = 3;
        let w0: Vec<f64> = (0..2 * dim * dim).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let h0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let d0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let run = |w: &[f64], h: &[f64], d: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut t = Tape::new();
            let wv = t.leaf(w.to_vec());
            let hv = t.leaf(h.to_vec());
            let dv = t.leaf(d.to_vec());
            let cat = t.concat(dv, hv);
            let lin = t.matvec(wv, cat, dim, 2 * dim);
            let gate = t.sigmoid(lin);
            let gd = t.hadamard(gate, dv);
            let ones = t.affine(gate, -1.0, 1.0);
            let gh = t.hadamard(ones, hv);
            let x = t.add(gd, gh);
            let tx = t.tanh(x);
            let s = t.sum(tx);
            let grads = t.backward(s);
            (t.scalar(s), grads.get(wv).to_vec(), grads.get(hv).to_vec(), grads.get(dv).to_vec())
        };

        let (_, gw, gh, gd) = run(&w0, &h0, &d0);
        let fd_w = fd_grad(|w| run(w, &h0, &d0).0, &w0, 1e-6);
        let fd_h = fd_grad(|h| run(&w0, h, &d0).0, &h0, 1e-6);
        let fd_d = fd_grad(|d| run(&w0, &h0, d).0, &d0, 1e-6);
        assert_close(&gw, &fd_w, 1e-6);
        assert_close(&gh, &fd_h, 1e-6);
        assert_close(&gd, &fd_d, 1e-6);
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut t = Tape::new();
        let x = t.leaf(vec![-2.0, 0.5, 3.0]);
        let c = t.clamp(x, 0.0, 1.0);
        let s = t.sum(c);
        let g = t.backward(s);
        assert_eq!(g.get(x), vec![0.0, 1.0, 0.0]);
        assert_eq!(t.value(c), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn min_pair_routes_to_smaller() {
        let mut t = Tape::new();
        let a = t.scalar_leaf(2.0);
        let b = t.scalar_leaf(1.0);
        let m = t.min_pair(a, b);
        assert_eq!(t.scalar(m), 1.0);
        let g = t.backward(m);
        assert_eq!(g.get(a), vec![0.0]);
        assert_eq!(g.get(b), vec![1.0]);
    }

    #[test]
    fn exp_ln_and_affine_chain() {
        let x0 = [0.4, 1.3];
        let run = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(x.to_vec());
            let e = t.exp(v);
            let a = t.affine(e, 2.0, 0.5);
            let l = t.ln(a);
            let s = t.sum(l);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.to_vec());
        let e = t.exp(v);
        let a = t.affine(e, 2.0, 0.5);
        let l = t.ln(a);
        let s = t.sum(l);
        let g = t.backward(s);
        assert_close(&g.get(v), &fd_grad(run, &x0, 1e-6), 1e-6);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x·x (same var twice) → dy/dx = 2x
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, -2.0]);
        let d = t.dot(x, x);
        let g = t.backward(d);
        assert_eq!(g.get(x), vec![6.0, -4.0]);
    }
}
