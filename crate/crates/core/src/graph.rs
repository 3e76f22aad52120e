//! The bipartite train graph, its symmetric normalization and the candidate
//! edge space explored by the augmentation.
//!
//! Nodes are laid out users first: user `u` is node `u`, item `i` is node
//! `num_users + i`.
//!
//! The normalized operator has entry `w / sqrt(deg(u) · deg(i))` for every
//! user–item pair with weight `w` (1 for train edges). Degrees include the
//! fractional weights of candidate edges, so a candidate at weight 0 leaves
//! the operator untouched and a candidate at weight 1 behaves exactly like a
//! train edge.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::rc::Rc;

use thiserror::Error;

use crate::dataset::Interaction;
use crate::tensor::{self, SymmetricPattern, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("cannot build a graph from an empty edge list")]
    Empty,
    #[error("edge ({user}, {item}) out of range for {num_users} users / {num_items} items")]
    OutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("extra edge ({user}, {item}) has weight {weight} outside [0, 1]")]
    BadWeight { user: usize, item: usize, weight: f64 },
    #[error("extra edge ({user}, {item}) duplicates a train edge")]
    ExtraOverlapsEdge { user: usize, item: usize },
    #[error("user {user} is not in the disadvantaged group; edges may only be added to disadvantaged users")]
    NotDisadvantaged { user: usize },
    #[error("candidate edge space is empty")]
    EmptyCandidateSpace,
    #[error("pair ({user}, {item}) is not in the candidate space")]
    PairNotInSpace { user: usize, item: usize },
    #[error("candidate index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    /// Unique `(user, item)` pairs, sorted.
    edges: Vec<(usize, usize)>,
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
}

/// Builds the train graph; duplicate pairs are kept once.
pub fn build_graph(
    train: &[Interaction],
    num_users: usize,
    num_items: usize,
) -> Result<BipartiteGraph, GraphError> {
    BipartiteGraph::from_pairs(train.iter().map(|x| (x.user, x.item)), num_users, num_items)
}

impl BipartiteGraph {
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        num_users: usize,
        num_items: usize,
    ) -> Result<Self, GraphError> {
        let mut set = BTreeSet::new();
        for (user, item) in pairs {
            if user >= num_users || item >= num_items {
                return Err(GraphError::OutOfRange {
                    user,
                    item,
                    num_users,
                    num_items,
                });
            }
            set.insert((user, item));
        }
        if set.is_empty() {
            return Err(GraphError::Empty);
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut user_items = vec![Vec::new(); num_users];
        let mut item_users = vec![Vec::new(); num_items];
        for &(u, i) in &edges {
            user_items[u].push(i);
            item_users[i].push(u);
        }
        // edges are sorted by (u, i), so user_items rows are sorted; item_users
        // rows are filled in ascending u as well.
        Ok(Self {
            num_users,
            num_items,
            edges,
            user_items,
            item_users,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_items[user].len()
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_users[item].len()
    }

    /// Sorted train items of `user`.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    /// Sorted train users of `item`.
    pub fn users_of(&self, item: usize) -> &[usize] {
        &self.item_users[item]
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        user < self.num_users && self.user_items[user].binary_search(&item).is_ok()
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users + item
    }

    /// Train degree of every node, users first.
    pub fn node_degrees(&self) -> Vec<f64> {
        self.user_items
            .iter()
            .chain(&self.item_users)
            .map(|n| n.len() as f64)
            .collect()
    }
}

/// Sparse symmetric normalized adjacency over the `num_users + num_items`
/// nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    pattern: Rc<SymmetricPattern>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn pattern(&self) -> &Rc<SymmetricPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `operator · x` for an `n x d` matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        tensor::sym_spmm(&self.pattern, &self.values, x)
    }

    /// Operator entry at `(user, item)`; equal to the `(item, user)` entry.
    pub fn entry(&self, user: usize, item: usize) -> f64 {
        let target = (user, self.num_users + item);
        self.pattern
            .entries()
            .iter()
            .zip(&self.values)
            .filter(|(e, _)| **e == target)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.dim();
        let mut out = Tensor::zeros(n, n);
        for (&(r, c), &v) in self.pattern.entries().iter().zip(&self.values) {
            out.set(r, c, out.get(r, c) + v);
            out.set(c, r, out.get(c, r) + v);
        }
        out
    }
}

/// Symmetric normalization of the train graph plus optional weighted extras.
///
/// `extra` holds `(user, item, weight)` with `weight ∈ [0, 1]` and pairs
/// disjoint from the train edges. Zero-weight extras contribute nothing and
/// are left out of the operator.
pub fn normalized_adjacency(
    graph: &BipartiteGraph,
    extra: &[(usize, usize, f64)],
) -> Result<NormalizedAdjacency, GraphError> {
    let nu = graph.num_users;
    let mut extra_sum = vec![0.0; graph.num_nodes()];
    for &(user, item, weight) in extra {
        if user >= nu || item >= graph.num_items {
            return Err(GraphError::OutOfRange {
                user,
                item,
                num_users: nu,
                num_items: graph.num_items,
            });
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(GraphError::BadWeight { user, item, weight });
        }
        if graph.has_edge(user, item) {
            return Err(GraphError::ExtraOverlapsEdge { user, item });
        }
        extra_sum[user] += weight;
        extra_sum[nu + item] += weight;
    }
    let degrees: Vec<f64> = graph
        .node_degrees()
        .into_iter()
        .zip(&extra_sum)
        .map(|(d, e)| d + e)
        .collect();
    let rs: Vec<f64> = degrees.iter().map(|&d| tensor::rsqrt(d)).collect();

    let kept = extra.iter().filter(|(_, _, w)| *w != 0.0);
    let mut entries = Vec::with_capacity(graph.edges.len() + extra.len());
    let mut values = Vec::with_capacity(graph.edges.len() + extra.len());
    for (u, i, w) in graph
        .edges
        .iter()
        .map(|&(u, i)| (u, i, 1.0))
        .chain(kept.copied())
    {
        let (r, c) = (u, nu + i);
        entries.push((r, c));
        values.push(w * (rs[r] * rs[c]));
    }
    Ok(NormalizedAdjacency {
        num_users: nu,
        num_items: graph.num_items,
        pattern: Rc::new(SymmetricPattern::new(graph.num_nodes(), entries)?),
        values,
    })
}

/// The augmented operator recorded on a tape, differentiable in the
/// candidate weights (a `B x 1` node).
///
/// Pattern entries are the train edges followed by every candidate pair in
/// space order. Returns the pattern and the `(|E| + B) x 1` values node.
pub fn normalized_adjacency_on_tape<'t>(
    tape: &'t Tape,
    graph: &BipartiteGraph,
    space: &CandidateEdgeSpace,
    weights: Var<'t>,
) -> Result<(Rc<SymmetricPattern>, Var<'t>), GraphError> {
    let nu = graph.num_users;
    let n = graph.num_nodes();
    if weights.shape() != (space.len(), 1) {
        return Err(TensorError::ShapeMismatch {
            op: "normalized_adjacency_on_tape",
            left: (space.len(), 1),
            right: weights.shape(),
        }
        .into());
    }
    let mut entries: Vec<(usize, usize)> =
        graph.edges.iter().map(|&(u, i)| (u, nu + i)).collect();
    entries.extend(space.pairs.iter().map(|&(u, i)| (u, nu + i)));
    let pattern = Rc::new(SymmetricPattern::new(n, entries)?);

    let user_nodes: Vec<usize> = space.pairs.iter().map(|&(u, _)| u).collect();
    let item_nodes: Vec<usize> = space.pairs.iter().map(|&(_, i)| nu + i).collect();
    let rows: Vec<usize> = pattern.entries().iter().map(|&(r, _)| r).collect();
    let cols: Vec<usize> = pattern.entries().iter().map(|&(_, c)| c).collect();

    let base = tape.leaf(Tensor::vector(graph.node_degrees()));
    let extra = tape.add(
        tape.scatter_add(weights, &user_nodes, n)?,
        tape.scatter_add(weights, &item_nodes, n)?,
    )?;
    let degrees = tape.add(base, extra)?;
    let rs = tape.rsqrt(degrees);
    let scale = tape.mul(tape.gather(rs, &rows)?, tape.gather(rs, &cols)?)?;
    let ones = tape.leaf(Tensor::filled(graph.edges.len(), 1, 1.0));
    let all_weights = tape.concat(ones, weights)?;
    let values = tape.mul(all_weights, scale)?;
    Ok((pattern, values))
}

/// The `B` candidate user–item pairs that the augmentation may add, with the
/// index map between pairs and positions in the perturbation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEdgeSpace {
    users: Vec<usize>,
    items: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
}

/// Enumerates `users × items` row-major (ascending ids), skipping train
/// edges. Every user must belong to `disadvantaged`.
pub fn build_candidate_space(
    graph: &BipartiteGraph,
    users: &[usize],
    items: &[usize],
    disadvantaged: &[usize],
) -> Result<CandidateEdgeSpace, GraphError> {
    let allowed: BTreeSet<usize> = disadvantaged.iter().copied().collect();
    let users: Vec<usize> = users.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let items: Vec<usize> = items.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    for &user in &users {
        if !allowed.contains(&user) {
            return Err(GraphError::NotDisadvantaged { user });
        }
        if user >= graph.num_users {
            return Err(GraphError::OutOfRange {
                user,
                item: 0,
                num_users: graph.num_users,
                num_items: graph.num_items,
            });
        }
    }
    if let Some(&item) = items.iter().find(|&&i| i >= graph.num_items) {
        return Err(GraphError::OutOfRange {
            user: 0,
            item,
            num_users: graph.num_users,
            num_items: graph.num_items,
        });
    }
    let mut pairs = Vec::new();
    for &u in &users {
        for &i in &items {
            if !graph.has_edge(u, i) {
                pairs.push((u, i));
            }
        }
    }
    if pairs.is_empty() {
        return Err(GraphError::EmptyCandidateSpace);
    }
    let index = pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
    Ok(CandidateEdgeSpace {
        users,
        items,
        pairs,
        index,
    })
}

impl CandidateEdgeSpace {
    pub fn users(&self) -> &[usize] {
        &self.users
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `B`, the number of candidate pairs.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Position of `(user, item)` in the perturbation vector.
    pub fn index_of(&self, user: usize, item: usize) -> Result<usize, GraphError> {
        self.index
            .get(&(user, item))
            .copied()
            .ok_or(GraphError::PairNotInSpace { user, item })
    }

    /// Inverse of [`CandidateEdgeSpace::index_of`].
    pub fn pair_at(&self, index: usize) -> Result<(usize, usize), GraphError> {
        self.pairs
            .get(index)
            .copied()
            .ok_or(GraphError::IndexOutOfRange {
                index,
                len: self.pairs.len(),
            })
    }
}

/// Breadth-first hop counts from `source` (a user) to every node, users
/// first then items. `None` marks unreachable nodes.
pub fn shortest_path_lengths(graph: &BipartiteGraph, source: usize) -> Vec<Option<usize>> {
    let nu = graph.num_users;
    let mut dist = vec![None; graph.num_nodes()];
    if source >= nu {
        return dist;
    }
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(node) = queue.pop_front() {
        let d = dist[node].expect("queued nodes have a distance");
        let neighbours: Box<dyn Iterator<Item = usize>> = if node < nu {
            Box::new(graph.user_items[node].iter().map(|&i| nu + i))
        } else {
            Box::new(graph.item_users[node - nu].iter().copied())
        };
        for next in neighbours {
            if dist[next].is_none() {
                dist[next] = Some(d + 1);
                queue.push_back(next);
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(pairs: &[(usize, usize)], nu: usize, ni: usize) -> BipartiteGraph {
        BipartiteGraph::from_pairs(pairs.iter().copied(), nu, ni).unwrap()
    }

    #[test]
    fn degrees_count_incident_edges() {
        let g = graph(&[(0, 0), (0, 1), (1, 0)], 2, 2);
        assert_eq!((g.user_degree(0), g.user_degree(1)), (2, 1));
        assert_eq!((g.item_degree(0), g.item_degree(1)), (2, 1));

        let g = graph(&[(0, 0)], 1, 1);
        assert_eq!((g.user_degree(0), g.item_degree(0)), (1, 1));

        let g = graph(&[(0, 0), (0, 0)], 1, 1);
        assert_eq!(g.edges(), &[(0, 0)]);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(BipartiteGraph::from_pairs([], 1, 1), Err(GraphError::Empty));
        assert!(matches!(
            BipartiteGraph::from_pairs([(2, 0)], 2, 1),
            Err(GraphError::OutOfRange { .. })
        ));
    }

    #[test]
    fn lone_edge_normalizes_to_one() {
        let g = graph(&[(0, 0)], 1, 1);
        let a = normalized_adjacency(&g, &[]).unwrap();
        assert_eq!(a.entry(0, 0), 1.0);
    }

    #[test]
    fn degree_four_to_degree_one_is_half() {
        let g = graph(&[(0, 0), (0, 1), (0, 2), (0, 3)], 1, 4);
        let a = normalized_adjacency(&g, &[]).unwrap();
        assert_eq!(a.entry(0, 2), 0.5);
    }

    #[test]
    fn extra_edge_shares_user_degree() {
        // edge (0,0) plus extra (0,1) at weight 1: deg(u)=2, deg(i)=deg(j)=1
        let g = graph(&[(0, 0)], 1, 2);
        let a = normalized_adjacency(&g, &[(0, 1, 1.0)]).unwrap();
        let want = 1.0 / 2f64.sqrt();
        assert!((a.entry(0, 0) - want).abs() < 1e-15);
        assert!((a.entry(0, 1) - want).abs() < 1e-15);
        let dense = a.to_dense();
        assert_eq!(dense.get(0, 1), dense.get(1, 0));
        assert_eq!(dense.get(0, 2), dense.get(2, 0));
    }

    #[test]
    fn fractional_extra_enters_degrees() {
        // user 0 has one train edge to item 0 (deg 1) and a half-weight extra
        // to item 1 (train degree 2 via user 1).
        let g = graph(&[(0, 0), (1, 1), (2, 1)], 3, 2);
        let a = normalized_adjacency(&g, &[(0, 1, 0.5)]).unwrap();
        let want = 0.5 / (1.5f64 * 2.5).sqrt();
        assert!((a.entry(0, 1) - want).abs() < 1e-15);
        let want_edge = 1.0 / (1.5f64 * 1.0).sqrt();
        assert!((a.entry(0, 0) - want_edge).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_extras_leave_operator_unchanged() {
        let g = graph(&[(0, 0), (1, 0), (1, 1)], 2, 3);
        let base = normalized_adjacency(&g, &[]).unwrap();
        let aug = normalized_adjacency(&g, &[(0, 1, 0.0), (0, 2, 0.0)]).unwrap();
        assert_eq!(base, aug);
    }

    #[test]
    fn bad_extras_are_rejected() {
        let g = graph(&[(0, 0)], 1, 2);
        assert!(matches!(
            normalized_adjacency(&g, &[(0, 1, 1.5)]),
            Err(GraphError::BadWeight { .. })
        ));
        assert!(matches!(
            normalized_adjacency(&g, &[(0, 0, 0.5)]),
            Err(GraphError::ExtraOverlapsEdge { .. })
        ));
    }

    #[test]
    fn isolated_node_has_zero_row() {
        let g = graph(&[(0, 0)], 2, 2);
        let a = normalized_adjacency(&g, &[]).unwrap();
        let dense = a.to_dense();
        assert!(dense.row(1).iter().all(|&v| v == 0.0));
    }

    fn ten_by_ten() -> BipartiteGraph {
        graph(&[(0, 0)], 10, 10)
    }

    #[test]
    fn candidate_space_is_row_major() {
        let g = ten_by_ten();
        let s = build_candidate_space(&g, &[3, 7], &[5, 9], &[3, 7]).unwrap();
        assert_eq!(s.pairs(), &[(3, 5), (3, 9), (7, 5), (7, 9)]);
        assert_eq!(s.len(), 4);
        assert_eq!(s.index_of(7, 5), Ok(2));
        assert_eq!(s.pair_at(0), Ok((3, 5)));
        assert_eq!(
            s.index_of(1, 1),
            Err(GraphError::PairNotInSpace { user: 1, item: 1 })
        );
        assert!(s.pair_at(4).is_err());
    }

    #[test]
    fn candidate_space_skips_existing_edges() {
        let g = graph(&[(3, 9)], 10, 10);
        let s = build_candidate_space(&g, &[3, 7], &[5, 9], &[3, 7]).unwrap();
        assert_eq!(s.pairs(), &[(3, 5), (7, 5), (7, 9)]);
    }

    #[test]
    fn candidate_users_must_be_disadvantaged() {
        let g = ten_by_ten();
        assert_eq!(
            build_candidate_space(&g, &[1, 2], &[5], &[3, 7]),
            Err(GraphError::NotDisadvantaged { user: 1 })
        );
        let g = graph(&[(3, 5)], 10, 10);
        assert_eq!(
            build_candidate_space(&g, &[3], &[5], &[3]),
            Err(GraphError::EmptyCandidateSpace)
        );
    }

    #[test]
    fn hop_distances() {
        // users 0 (D) and 1 (A) share item 0; user 2 is disconnected.
        let g = graph(&[(0, 0), (1, 0), (2, 1)], 3, 2);
        let d = shortest_path_lengths(&g, 0);
        assert_eq!(d[1], Some(2));
        assert_eq!(d[g.item_node(0)], Some(1));
        assert_eq!(d[2], None);
    }

    #[test]
    fn tape_operator_matches_plain_operator() {
        let g = graph(&[(0, 0), (1, 0), (1, 1), (2, 2)], 3, 3);
        let space = build_candidate_space(&g, &[0, 2], &[0, 1, 2], &[0, 2]).unwrap();
        let w: Vec<f64> = (0..space.len()).map(|k| 0.1 * k as f64).collect();
        let tape = Tape::new();
        let wv = tape.leaf(Tensor::vector(w.clone()));
        let (pattern, values) = normalized_adjacency_on_tape(&tape, &g, &space, wv).unwrap();
        let extras: Vec<(usize, usize, f64)> =
            space.pairs().iter().zip(&w).map(|(&(u, i), &w)| (u, i, w)).collect();
        let plain = normalized_adjacency(&g, &extras).unwrap();
        let x = Tensor::from_vec(6, 2, (0..12).map(|k| k as f64 * 0.3 - 1.0).collect()).unwrap();
        let a = tensor::sym_spmm(&pattern, values.value().data(), &x).unwrap();
        let b = plain.apply(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }
}
