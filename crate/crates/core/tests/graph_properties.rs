use fairaug::graph::{build_candidate_space, normalized_adjacency, BipartiteGraph};
use fairaug::lightgcn::{propagate, ModelParams};
use fairaug::tensor::Tensor;
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = BipartiteGraph> {
    (2usize..8, 2usize..8)
        .prop_flat_map(|(nu, ni)| {
            (
                Just(nu),
                Just(ni),
                proptest::collection::vec(proptest::bool::weighted(0.35), nu * ni),
            )
        })
        .prop_map(|(nu, ni, bits)| {
            let pairs: Vec<(usize, usize)> = (0..nu * ni)
                .filter(|&j| j == 0 || bits[j])
                .map(|j| (j / ni, j % ni))
                .collect();
            BipartiteGraph::from_pairs(pairs, nu, ni).unwrap()
        })
}

/// Dense `D^-1/2 A D^-1/2` with fractional extras, computed the slow way.
fn dense_oracle(g: &BipartiteGraph, extra: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let n = g.num_nodes();
    let mut a = vec![vec![0.0; n]; n];
    for &(u, i) in g.edges() {
        a[u][g.item_node(i)] = 1.0;
        a[g.item_node(i)][u] = 1.0;
    }
    for &(u, i, w) in extra {
        a[u][g.item_node(i)] = w;
        a[g.item_node(i)][u] = w;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    (0..n)
        .map(|r| {
            (0..n)
                .map(|c| {
                    if a[r][c] == 0.0 {
                        0.0
                    } else {
                        a[r][c] / (deg[r] * deg[c]).sqrt()
                    }
                })
                .collect()
        })
        .collect()
}

fn params(nu: usize, ni: usize, d: usize, seed: u64, layers: usize) -> ModelParams {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let u = (0..nu * d).map(|_| next()).collect();
    let i = (0..ni * d).map(|_| next()).collect();
    ModelParams {
        user_embeddings: Tensor::from_vec(nu, d, u).unwrap(),
        item_embeddings: Tensor::from_vec(ni, d, i).unwrap(),
        num_layers: layers,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn candidate_index_is_a_bijection(g in graph_strategy(), umask in 0u32..256, imask in 0u32..256) {
        let users: Vec<usize> = (0..g.num_users()).filter(|u| umask & (1 << u) != 0).collect();
        let items: Vec<usize> = (0..g.num_items()).filter(|i| imask & (1 << i) != 0).collect();
        prop_assume!(!users.is_empty() && !items.is_empty());
        let Ok(space) = build_candidate_space(&g, &users, &items, &users) else {
            // every pair already present
            return Ok(());
        };
        let expected = users.len() * items.len()
            - users.iter().flat_map(|&u| items.iter().map(move |&i| (u, i))).filter(|&(u, i)| g.has_edge(u, i)).count();
        prop_assert_eq!(space.len(), expected);
        for j in 0..space.len() {
            let (u, i) = space.pair_at(j).unwrap();
            prop_assert!(!g.has_edge(u, i));
            prop_assert_eq!(space.index_of(u, i).unwrap(), j);
        }
        let pairs = space.pairs().to_vec();
        let mut sorted = pairs.clone();
        sorted.sort_unstable();
        prop_assert_eq!(pairs, sorted);
    }

    #[test]
    fn normalization_matches_dense_oracle(g in graph_strategy(), w in proptest::collection::vec(0.0f64..=1.0, 64)) {
        let extra: Vec<(usize, usize, f64)> = (0..g.num_users())
            .flat_map(|u| (0..g.num_items()).map(move |i| (u, i)))
            .filter(|&(u, i)| !g.has_edge(u, i))
            .zip(&w)
            .map(|((u, i), &w)| (u, i, w))
            .collect();
        let op = normalized_adjacency(&g, &extra).unwrap();
        let dense = op.to_dense();
        let oracle = dense_oracle(&g, &extra);
        let n = g.num_nodes();
        for r in 0..n {
            for c in 0..n {
                prop_assert!((dense.get(r, c) - oracle[r][c]).abs() < 1e-12);
                prop_assert_eq!(dense.get(r, c), dense.get(c, r));
            }
        }
    }

    #[test]
    fn propagation_is_linear_in_embeddings(g in graph_strategy(), seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let (nu, ni) = (g.num_users(), g.num_items());
        let op = normalized_adjacency(&g, &[]).unwrap();
        let a = params(nu, ni, 4, seed, 3);
        let b = params(nu, ni, 4, seed + 1, 3);
        let mix = |x: &Tensor, y: &Tensor| {
            Tensor::from_vec(x.rows(), x.cols(), x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + q).collect()).unwrap()
        };
        let combined = ModelParams {
            user_embeddings: mix(&a.user_embeddings, &b.user_embeddings),
            item_embeddings: mix(&a.item_embeddings, &b.item_embeddings),
            num_layers: 3,
        };
        let ea = propagate(&a, &op).unwrap();
        let eb = propagate(&b, &op).unwrap();
        let ec = propagate(&combined, &op).unwrap();
        for j in 0..ec.len() {
            prop_assert!((ec.data()[j] - (alpha * ea.data()[j] + eb.data()[j])).abs() < 1e-10);
        }
    }
}

#[test]
fn propagation_is_the_layer_mean() {
    let g = BipartiteGraph::from_pairs(vec![(0, 0), (0, 1), (1, 1), (2, 2), (2, 0)], 3, 3).unwrap();
    let p = params(3, 3, 2, 42, 2);
    let op = normalized_adjacency(&g, &[]).unwrap();
    let s = op.to_dense();
    let e0 = p.stacked();
    let e1 = s.matmul(&e0).unwrap();
    let e2 = s.matmul(&e1).unwrap();
    let got = propagate(&p, &op).unwrap();
    for j in 0..got.len() {
        let want = (e0.data()[j] + e1.data()[j] + e2.data()[j]) / 3.0;
        assert!((got.data()[j] - want).abs() < 1e-12);
    }
}
