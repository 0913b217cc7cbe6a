//! Trace relation modeling: a two-layer GCN over the cells of the
//! downsampled latent grid, with every cell connected to every other.
//!
//! With self-loops added the graph is complete, every degree is N and the
//! symmetric normalization collapses to `Â = J/N`. Multiplying by `Â`
//! therefore replaces each node's features by the mean over all nodes,
//! which [`gcn_forward_fast`] exploits in O(N·C). The dense path
//! [`gcn_forward`] keeps `Â` explicit and serves as its oracle.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Dense graph matrices for N nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    /// 0/1 adjacency without self-loops.
    pub a: Tensor,
    /// `A + I`.
    pub a_tilde: Tensor,
    /// Diagonal degree matrix of `A + I`.
    pub degree: Tensor,
    /// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub a_hat: Tensor,
}

/// Builds the complete-graph matrices, evaluating the normalization
/// from the degrees rather than assuming its closed form.
pub fn build_adjacency(n: usize) -> Result<Adjacency> {
    if n < 1 {
        return Err(invalid("adjacency needs at least one node"));
    }
    let a = Tensor::from_fn([n, n], |i| if i / n == i % n { 0.0 } else { 1.0 });
    let a_tilde = Tensor::from_fn([n, n], |i| a.data()[i] + if i / n == i % n { 1.0 } else { 0.0 });
    let degrees: Vec<f64> = a_tilde.data().chunks(n).map(|r| r.iter().sum()).collect();
    let degree = Tensor::from_fn([n, n], |i| if i / n == i % n { degrees[i / n] } else { 0.0 });
    let a_hat = Tensor::from_fn([n, n], |i| {
        let (r, c) = (i / n, i % n);
        a_tilde.data()[i] / (degrees[r] * degrees[c]).sqrt()
    });
    Ok(Adjacency {
        a,
        a_tilde,
        degree,
        a_hat,
    })
}

/// GCN weights plus the cached normalized adjacency for the dense path.
#[derive(Clone, Debug)]
pub struct TrmState {
    pub nodes: usize,
    pub a_hat: Tensor,
}

impl TrmState {
    pub fn new(grid_h: usize, grid_w: usize) -> Result<Self> {
        let nodes = grid_h * grid_w;
        Ok(Self {
            nodes,
            a_hat: build_adjacency(nodes)?.a_hat,
        })
    }
}

/// How `Â` is applied inside the GCN.
#[derive(Clone, Copy, Debug)]
pub enum Propagation {
    /// Explicit N×N product with the given `Â` on the tape.
    Dense(Var),
    /// Broadcast node mean (the closed form of `Â`).
    Fast,
}

/// B×C×h×w latent grid → B×N×C node matrix.
fn to_nodes(tape: &mut Tape, x: Var) -> Result<(Var, [usize; 4])> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(invalid(format!("TRM input must be B×C×h×w, got {s:?}")));
    }
    let dims = [s[0], s[1], s[2], s[3]];
    let flat = tape.reshape(x, &[dims[0], dims[1], dims[2] * dims[3]])?;
    Ok((tape.permute(flat, &[0, 2, 1])?, dims))
}

fn propagate(tape: &mut Tape, x: Var, how: Propagation) -> Result<Var> {
    match how {
        Propagation::Dense(a_hat) => tape.adj_matmul(a_hat, x),
        Propagation::Fast => tape.node_mean(x),
    }
}

/// Per-node feature transform `X·M` for a B×N×F node tensor.
fn node_linear(tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let ms = tape.shape(m).to_vec();
    if ms.len() != 2 || ms[0] != s[2] {
        return Err(shape_err("gcn weight", &s, &ms));
    }
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = tape.matmul(flat, m)?;
    tape.reshape(y, &[s[0], s[1], ms[1]])
}

/// `T(softmax(Â · relu(Â · L' · M0) · M1))` with softmax over channels per
/// node; T maps the node matrix back to B×C×h×w.
pub fn gcn(tape: &mut Tape, l_prime: Var, m0: Var, m1: Var, how: Propagation) -> Result<Var> {
    let (x, [b, c, h, w]) = to_nodes(tape, l_prime)?;
    if let Propagation::Dense(a_hat) = how {
        let n = tape.shape(a_hat)[0];
        if n != h * w {
            return Err(shape_err("gcn adjacency", tape.shape(a_hat), &[b, c, h, w]));
        }
    }
    let xm = node_linear(tape, x, m0)?;
    let h1 = propagate(tape, xm, how)?;
    let h1 = tape.relu(h1);
    let hm = node_linear(tape, h1, m1)?;
    let h2 = propagate(tape, hm, how)?;
    let out_c = tape.shape(h2)[2];
    let s = tape.softmax(h2, 2)?;
    let t = tape.permute(s, &[0, 2, 1])?;
    tape.reshape(t, &[b, out_c, h, w])
}

/// Dense-adjacency GCN forward.
pub fn gcn_forward(tape: &mut Tape, l_prime: Var, a_hat: Var, m0: Var, m1: Var) -> Result<Var> {
    gcn(tape, l_prime, m0, m1, Propagation::Dense(a_hat))
}

/// Closed-form GCN forward; never materializes `Â`.
pub fn gcn_forward_fast(tape: &mut Tape, l_prime: Var, m0: Var, m1: Var) -> Result<Var> {
    gcn(tape, l_prime, m0, m1, Propagation::Fast)
}

/// 2×2 average pooling of the trace relations.
pub fn pool_traces(tape: &mut Tape, f_g: Var) -> Result<Var> {
    let s = tape.shape(f_g);
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(invalid(format!("pool_traces needs h,w >= 2, got {s:?}")));
    }
    tape.avg_pool2d(f_g, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::testutil::{check_gradients, random_tensor};

    #[test]
    fn two_nodes_by_hand() {
        let adj = build_adjacency(2).unwrap();
        assert_eq!(adj.a.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(adj.a_hat.data(), &[0.5; 4]);
    }

    #[test]
    fn single_node() {
        let adj = build_adjacency(1).unwrap();
        assert_eq!(adj.a.data(), &[0.0]);
        assert_eq!(adj.a_tilde.data(), &[1.0]);
        assert_eq!(adj.a_hat.data(), &[1.0]);
        assert!(build_adjacency(0).is_err());
    }

    #[test]
    fn a_hat_is_uniform_and_symmetric() {
        for n in [3, 16, 64] {
            let adj = build_adjacency(n).unwrap();
            let target = 1.0 / n as f64;
            for r in 0..n {
                let row_sum: f64 = adj.a_hat.data()[r * n..(r + 1) * n].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
                assert_eq!(adj.a.at(&[r, r]), 0.0);
                for c in 0..n {
                    assert!((adj.a_hat.at(&[r, c]) - target).abs() < 1e-12);
                    assert_eq!(adj.a_hat.at(&[r, c]), adj.a_hat.at(&[c, r]));
                }
            }
        }
    }

    #[test]
    fn uniform_averaging_of_two_nodes() {
        // rows (1,3) and (3,1) both become (2,2)
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, 2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap());
        let a = t.constant(build_adjacency(2).unwrap().a_hat);
        let y = t.adj_matmul(a, x).unwrap();
        assert_eq!(t.value(y).data(), &[2.0; 4]);
        let y = t.node_mean(x).unwrap();
        assert_eq!(t.value(y).data(), &[2.0; 4]);
    }

    #[test]
    fn softmax_stage_normalizes_channels() {
        let mut rng = Rng::new(5);
        let mut t = Tape::new();
        let l = t.constant(random_tensor(&mut rng, &[2, 6, 2, 2]));
        let m0 = t.constant(random_tensor(&mut rng, &[6, 3]));
        let m1 = t.constant(random_tensor(&mut rng, &[3, 6]));
        let f = gcn_forward_fast(&mut t, l, m0, m1).unwrap();
        let v = t.value(f);
        assert_eq!(v.shape(), &[2, 6, 2, 2]);
        for b in 0..2 {
            for cell in 0..4 {
                let s: f64 = (0..6).map(|c| v.at(&[b, c, cell / 2, cell % 2])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_matches_fast_with_gradients() {
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let l = random_tensor(&mut rng, &[2, 4, 2, 3]);
            let m0 = random_tensor(&mut rng, &[4, 2]);
            let m1 = random_tensor(&mut rng, &[2, 4]);
            let probe = random_tensor(&mut rng, &[2, 4, 2, 3]);
            let a_hat = build_adjacency(6).unwrap().a_hat;
            let mut t = Tape::new();
            let (lv, m0v, m1v) = (t.constant(l.clone()), t.constant(m0.clone()), t.constant(m1.clone()));
            let av = t.constant(a_hat.clone());
            let dense = gcn_forward(&mut t, lv, av, m0v, m1v).unwrap();
            let fast = gcn_forward_fast(&mut t, lv, m0v, m1v).unwrap();
            assert!(t.value(dense).max_abs_diff(t.value(fast)) < 1e-10);

            check_gradients(&[l.clone(), m0.clone(), m1.clone(), probe.clone()], |t, v| {
                let f = gcn_forward_fast(t, v[0], v[1], v[2])?;
                let p = t.mul(f, v[3])?;
                Ok(t.sum(p))
            });
            check_gradients(&[l, m0, m1, probe, a_hat], |t, v| {
                let f = gcn_forward(t, v[0], v[4], v[1], v[2])?;
                let p = t.mul(f, v[3])?;
                Ok(t.sum(p))
            });
        }
    }

    #[test]
    fn single_node_fast_path_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, 1, 3], vec![0.2, -1.0, 4.0]).unwrap());
        let y = t.node_mean(x).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn dense_path_rejects_wrong_node_count() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros([1, 2, 2, 2]));
        let a = t.constant(build_adjacency(3).unwrap().a_hat);
        let m0 = t.constant(Tensor::zeros([2, 1]));
        let m1 = t.constant(Tensor::zeros([1, 2]));
        assert!(gcn_forward(&mut t, l, a, m0, m1).is_err());
        let bad_m0 = t.constant(Tensor::zeros([3, 1]));
        assert!(gcn_forward_fast(&mut t, l, bad_m0, m1).is_err());
    }

    #[test]
    fn pool_traces_examples() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full([1, 2, 4, 4], 0.7));
        let p = pool_traces(&mut t, c).unwrap();
        assert!(t.value(p).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = t.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = pool_traces(&mut t, x).unwrap();
        assert_eq!(t.value(p).data(), &[4.0]);
        let small = t.constant(Tensor::zeros([1, 1, 1, 4]));
        assert!(pool_traces(&mut t, small).is_err());

        let mut rng = Rng::new(3);
        let x = random_tensor(&mut rng, &[2, 3, 4, 4]);
        let probe = random_tensor(&mut rng, &[2, 3, 2, 2]);
        check_gradients(&[x, probe], |t, v| {
            let p = pool_traces(t, v[0])?;
            let q = t.mul(p, v[1])?;
            Ok(t.sum(q))
        });
    }
}
