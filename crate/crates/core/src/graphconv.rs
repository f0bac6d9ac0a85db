//! User-aware item graph and shared-weight graph convolution.
//!
//! For one user the valid items of the history form a fully connected graph
//! whose edge weights come from the item embeddings gated by the user
//! embedding, `A[i][j] = sigmoid((x_i ⊙ x_j) · x_u)`. Each layer computes
//! `H' = LeakyReLU((I + D^{-1/2} A D^{-1/2}) H W)` with one `W` shared by
//! every layer. Level 0 is the raw embedding matrix.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UserGraph {
    /// `m × m`, symmetric, zero on padded rows and columns.
    pub adjacency: Tensor,
    /// `m`, zero at padded positions.
    pub degree_inv_sqrt: Tensor,
    /// `m × m` self-loop plus normalised adjacency, zero on padded rows.
    pub propagation: Tensor,
}

/// Item representations after `0..=L` rounds of convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRepresentations {
    pub levels: Vec<Tensor>,
}

/// Tape handles for a recorded graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub adjacency: Var,
    pub propagation: Var,
}

fn check_mask(mask: &[bool], rows: usize) -> Result<()> {
    if mask.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "graph mask",
            lhs: vec![rows],
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::InvalidArgument(
            "every position of the sequence is padding".into(),
        ));
    }
    Ok(())
}

pub fn record_graph(tape: &mut Tape, items: Var, user: Var, mask: &[bool]) -> Result<GraphVars> {
    check_mask(mask, tape.value(items).rows())?;
    let adjacency = tape.user_adjacency(items, user, mask)?;
    let propagation = tape.propagation(adjacency, mask)?;
    Ok(GraphVars {
        adjacency,
        propagation,
    })
}

/// One convolution layer. The aggregation over neighbours uses
/// order-independent sums.
pub fn record_convolve(
    tape: &mut Tape,
    propagation: Var,
    h_prev: Var,
    shared_weight: Var,
    slope: f64,
) -> Result<Var> {
    let transformed = tape.matmul(h_prev, shared_weight)?;
    let aggregated = tape.matmul_canonical(propagation, transformed)?;
    let out = tape.leaky_relu(aggregated, slope);
    tape.value(out).ensure_finite("graph convolution")?;
    Ok(out)
}

/// Records the graph and `layers` convolutions; returns `layers + 1` level
/// handles (level 0 is `items` itself) and the graph handles.
pub fn record_levels(
    tape: &mut Tape,
    items: Var,
    user: Var,
    mask: &[bool],
    shared_weight: Var,
    layers: usize,
    slope: f64,
) -> Result<(Vec<Var>, GraphVars)> {
    let graph = record_graph(tape, items, user, mask)?;
    let mut levels = Vec::with_capacity(layers + 1);
    levels.push(items);
    for _ in 0..layers {
        let prev = *levels.last().expect("level 0 present");
        levels.push(record_convolve(tape, graph.propagation, prev, shared_weight, slope)?);
    }
    Ok((levels, graph))
}

pub fn build_user_graph(item_embs: &Tensor, user_emb: &Tensor, valid_mask: &[bool]) -> Result<UserGraph> {
    let mut tape = Tape::new();
    let items = tape.leaf(item_embs.clone());
    let user = tape.leaf(user_emb.clone());
    let vars = record_graph(&mut tape, items, user, valid_mask)?;
    let adjacency = tape.value(vars.adjacency).clone();
    let (inv_sqrt, _) = kernels::degree_inv_sqrt(&adjacency, valid_mask);
    Ok(UserGraph {
        propagation: tape.value(vars.propagation).clone(),
        degree_inv_sqrt: Tensor::vector(inv_sqrt),
        adjacency,
    })
}

pub fn convolve(graph: &UserGraph, h_prev: &Tensor, shared_weight: &Tensor, slope: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.leaf(graph.propagation.clone());
    let h = tape.leaf(h_prev.clone());
    let w = tape.leaf(shared_weight.clone());
    let out = record_convolve(&mut tape, p, h, w, slope)?;
    Ok(tape.value(out).clone())
}

pub fn multi_level_forward(
    item_embs: &Tensor,
    user_emb: &Tensor,
    valid_mask: &[bool],
    shared_weight: &Tensor,
    layers: usize,
    slope: f64,
) -> Result<LevelRepresentations> {
    let mut tape = Tape::new();
    let items = tape.leaf(item_embs.clone());
    let user = tape.leaf(user_emb.clone());
    let w = tape.leaf(shared_weight.clone());
    let (levels, _) = record_levels(&mut tape, items, user, valid_mask, w, layers, slope)?;
    Ok(LevelRepresentations {
        levels: levels.into_iter().map(|v| tape.value(v).clone()).collect(),
    })
}

/// Mean of `|A[i][j]|` over valid pairs.
pub fn adjacency_l1(graph: &UserGraph, valid_mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(graph.adjacency.clone());
    let l1 = tape.l1_mean(a, valid_mask)?;
    Ok(tape.value(l1).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SLOPE: f64 = 0.01;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mask(valid: usize, m: usize) -> Vec<bool> {
        (0..m).map(|i| i < valid).collect()
    }

    /// Straight-line evaluation of the adjacency formula.
    fn adjacency_oracle(x: &Tensor, u: &Tensor, i: usize, j: usize) -> f64 {
        let s: f64 = (0..u.len()).map(|k| x.at(i, k) * x.at(j, k) * u.data()[k]).sum();
        1.0 / (1.0 + (-s).exp())
    }

    #[test]
    fn zero_embeddings_give_half() {
        let g = build_user_graph(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[4]), &mask(3, 3)).unwrap();
        assert!(g.adjacency.data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn adjacency_matches_formula_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 4]);
        let u = random(&mut rng, &[4]);
        let g = build_user_graph(&x, &u, &mask(4, 5)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let a = g.adjacency.at(i, j);
                assert_eq!(a.to_bits(), g.adjacency.at(j, i).to_bits());
                if i < 4 && j < 4 {
                    assert!((a - adjacency_oracle(&x, &u, i, j)).abs() < 1e-12);
                } else {
                    assert_eq!(a, 0.0);
                    assert_eq!(g.propagation.at(i, j), 0.0);
                }
            }
        }
        assert_eq!(g.degree_inv_sqrt.data()[4], 0.0);
    }

    #[test]
    fn user_embedding_changes_relatedness() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random(&mut rng, &[2, 4]);
            let u1 = random(&mut rng, &[4]);
            let u2 = random(&mut rng, &[4]);
            let a1 = build_user_graph(&x, &u1, &mask(2, 2)).unwrap().adjacency.at(0, 1);
            let a2 = build_user_graph(&x, &u2, &mask(2, 2)).unwrap().adjacency.at(0, 1);
            assert_ne!(a1, a2);
        }
    }

    #[test]
    fn all_padding_is_rejected() {
        let r = build_user_graph(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]), &[false, false]);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_adjacency_keeps_only_self_loop() {
        let graph = UserGraph {
            adjacency: Tensor::zeros(&[3, 3]),
            degree_inv_sqrt: Tensor::zeros(&[3]),
            propagation: Tensor::identity(3),
        };
        let h = Tensor::matrix(3, 2, vec![0.5, 1.0, 0.0, 2.0, 3.0, 0.25]).unwrap();
        let out = convolve(&graph, &h, &Tensor::identity(2), SLOPE).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn single_valid_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random(&mut rng, &[3, 4]);
        x.row_mut(1).fill(0.0);
        x.row_mut(2).fill(0.0);
        let u = random(&mut rng, &[4]);
        let w = random(&mut rng, &[4, 4]);
        let m = mask(1, 3);
        let g = build_user_graph(&x, &u, &m).unwrap();
        let out = convolve(&g, &x, &w, SLOPE).unwrap();
        // With one node, P = 1 + A/deg = 2 at (0,0).
        assert!((g.propagation.at(0, 0) - 2.0).abs() < 1e-15);
        let xw = kernels::matmul(&Tensor::vector(x.row(0).to_vec()), &w).unwrap();
        let expected = kernels::leaky_relu(&xw.map(|v| 2.0 * v), SLOPE);
        for k in 0..4 {
            assert!((out.at(0, k) - expected.data()[k]).abs() < 1e-12);
            assert_eq!(out.at(1, k), 0.0);
        }
    }

    #[test]
    fn three_item_convolution_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[3, 4]);
        let u = random(&mut rng, &[4]);
        let w = random(&mut rng, &[4, 4]);
        let m = mask(3, 3);
        let g = build_user_graph(&x, &u, &m).unwrap();
        let out = convolve(&g, &x, &w, SLOPE).unwrap();

        let a: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| adjacency_oracle(&x, &u, i, j)).collect()).collect();
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        for i in 0..3 {
            for k in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    let p = if i == j { 1.0 } else { 0.0 } + a[i][j] / (deg[i].sqrt() * deg[j].sqrt());
                    let hw: f64 = (0..4).map(|q| x.at(j, q) * w.at(q, k)).sum();
                    acc += p * hw;
                }
                let expected = if acc >= 0.0 { acc } else { SLOPE * acc };
                assert!((out.at(i, k) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn level_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[4, 4]);
        let u = random(&mut rng, &[4]);
        let w = random(&mut rng, &[4, 4]);
        let zero = multi_level_forward(&x, &u, &mask(4, 4), &w, 0, SLOPE).unwrap();
        assert_eq!(zero.levels, vec![x.clone()]);
        let three = multi_level_forward(&x, &u, &mask(4, 4), &w, 3, SLOPE).unwrap();
        assert_eq!(three.levels.len(), 4);
        assert_eq!(three.levels[0], x);
        assert!(three.levels.iter().all(|l| l.shape() == [4, 4]));
    }

    #[test]
    fn permuting_items_permutes_levels_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = random(&mut rng, &[5, 4]);
            let u = random(&mut rng, &[4]);
            let w = random(&mut rng, &[4, 4]);
            let perm = [3, 0, 4, 1, 2];
            let mut px = Tensor::zeros(&[5, 4]);
            for (dst, &src) in perm.iter().enumerate() {
                px.row_mut(dst).copy_from_slice(x.row(src));
            }
            let m = mask(5, 5);
            let a = multi_level_forward(&x, &u, &m, &w, 3, SLOPE).unwrap();
            let b = multi_level_forward(&px, &u, &m, &w, 3, SLOPE).unwrap();
            for (la, lb) in a.levels.iter().zip(&b.levels) {
                for (dst, &src) in perm.iter().enumerate() {
                    assert_eq!(lb.row(dst), la.row(src));
                }
            }
            let ga = build_user_graph(&x, &u, &m).unwrap();
            let gb = build_user_graph(&px, &u, &m).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(gb.adjacency.at(i, j).to_bits(), ga.adjacency.at(perm[i], perm[j]).to_bits());
                }
            }
        }
    }

    #[test]
    fn l1_cases() {
        let m = mask(3, 4);
        let half = UserGraph {
            adjacency: Tensor::filled(&[4, 4], 0.5),
            degree_inv_sqrt: Tensor::zeros(&[4]),
            propagation: Tensor::zeros(&[4, 4]),
        };
        assert_eq!(adjacency_l1(&half, &m).unwrap(), 0.5);
        let zero = UserGraph {
            adjacency: Tensor::zeros(&[4, 4]),
            ..half.clone()
        };
        assert_eq!(adjacency_l1(&zero, &m).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[4, 3]);
        let u = random(&mut rng, &[3]);
        let g = build_user_graph(&x, &u, &m).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                total += g.adjacency.at(i, j).abs();
            }
        }
        assert!((adjacency_l1(&g, &m).unwrap() - total / 9.0).abs() < 1e-15);
    }

    #[test]
    fn l1_and_convolution_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let x = random(&mut rng, &[4, 3]);
            let u = random(&mut rng, &[3]);
            let w = random(&mut rng, &[3, 3]);
            let m = mask(3, 4);
            let r = grad_check("graph chain", &[x, u, w], 1e-4, |t, v| {
                let (levels, g) = record_levels(t, v[0], v[1], &m, v[2], 2, SLOPE)?;
                let l1 = t.l1_mean(g.adjacency, &m)?;
                let summed = t.row_dots(levels[2], v[1])?;
                let total = t.matmul(summed, summed)?;
                t.sum(&[total, l1])
            })
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
