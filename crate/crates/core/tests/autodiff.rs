use std::rc::Rc;

use fairaug::graph::{build_candidate_space, normalized_adjacency, normalized_adjacency_on_tape, BipartiteGraph};
use fairaug::tensor::{finite_difference_check, SymmetricPattern, Tape, Tensor};

fn points(n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .map(|j| ((j as u64 * 7919 + seed * 104729) % 1000) as f64 / 250.0 - 2.0)
        .collect()
}

#[test]
fn elementwise_chain_matches_differences() {
    let x = Tensor::vector(points(12, 1));
    let err = finite_difference_check(
        |t, v| {
            let s = t.sigmoid(v);
            let b = t.soft_bound(t.square(v));
            let r = t.rsqrt(t.add(t.square(v), t.leaf(Tensor::filled(12, 1, 1.0)))?);
            let prod = t.mul(t.mul(s, b)?, r)?;
            Ok(t.sum(t.sub(prod, t.scale(v, 0.3))?))
        },
        &x,
        1e-6,
        &(0..12).collect::<Vec<_>>(),
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn gather_scatter_concat_match_differences() {
    let x = Tensor::vector(points(6, 2));
    let err = finite_difference_check(
        |t, v| {
            let g = t.gather(v, &[0, 2, 2, 5])?;
            let s = t.scatter_add(g, &[1, 1, 0, 3], 4)?;
            let c = t.concat(s, v)?;
            Ok(t.sum(t.square(t.sigmoid(c))))
        },
        &x,
        1e-6,
        &(0..6).collect::<Vec<_>>(),
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn sparse_product_is_differentiable_in_values_and_input() {
    let pattern = Rc::new(SymmetricPattern::new(4, vec![(0, 2), (0, 3), (1, 3)]).unwrap());
    let dense = Tensor::from_vec(4, 2, points(8, 3)).unwrap();
    let values = Tensor::vector(points(3, 4));
    let coords: Vec<usize> = (0..3).collect();
    let err = finite_difference_check(
        |t, v| {
            let y = t.sym_spmm(&pattern, v, t.leaf(dense.clone()))?;
            Ok(t.sum(t.square(y)))
        },
        &values,
        1e-6,
        &coords,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
    let err = finite_difference_check(
        |t, x| {
            let y = t.sym_spmm(&pattern, t.leaf(values.clone()), x)?;
            let z = t.matmul_t(y, x)?;
            Ok(t.mean(t.sigmoid(z)))
        },
        &dense,
        1e-6,
        &(0..8).collect::<Vec<_>>(),
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn taped_operator_agrees_with_plain_operator() {
    let g = BipartiteGraph::from_pairs(vec![(0, 0), (1, 1), (2, 0), (2, 2)], 3, 4).unwrap();
    let space = build_candidate_space(&g, &[0, 2], &[0, 1, 2, 3], &[0, 2]).unwrap();
    let w: Vec<f64> = (0..space.len()).map(|j| (j as f64 + 1.0) / (space.len() as f64 + 1.0)).collect();
    let tape = Tape::new();
    let (pattern, values) =
        normalized_adjacency_on_tape(&tape, &g, &space, tape.leaf(Tensor::vector(w.clone()))).unwrap();
    let extra: Vec<(usize, usize, f64)> = space.pairs().iter().zip(&w).map(|(&(u, i), &w)| (u, i, w)).collect();
    let plain = normalized_adjacency(&g, &extra).unwrap();
    assert_eq!(pattern.entries(), plain.pattern().entries());
    for (a, b) in values.value().data().iter().zip(plain.values()) {
        assert!((a - b).abs() < 1e-15);
    }
}
