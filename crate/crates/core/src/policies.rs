//! Sampling policies that narrow the candidate users (always inside U_D) and
//! items before augmentation.
//!
//! User policies: `bm` (no sampling), `zn` (zero NDCG@k on the perturbation
//! set), `ld` (lowest train degree), `sp` (lowest mean item popularity),
//! `fr` (furthest from U_A on average). Item policy: `ip` (most preferred by
//! U_D). A user policy may be combined with `ip`; quotas use
//! `ceil(psi · size)` and ties break by ascending id.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{shortest_path_lengths, BipartiteGraph};
use crate::metrics::ndcg_at_k;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy {0:?}; expected one of {ALL_POLICIES:?}")]
    Unknown(String),
    #[error("policy {0:?} combines two policies of the same type")]
    IntraGroupCombination(String),
    #[error("sampling fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("policy {0} selected no users")]
    EmptySelection(&'static str),
    #[error("{0} group is empty")]
    EmptyGroup(&'static str),
}

/// Every policy name accepted on the command line.
pub const ALL_POLICIES: [&str; 10] = [
    "bm", "zn", "ld", "sp", "fr", "ip", "zn+ip", "ld+ip", "sp+ip", "fr+ip",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserPolicy {
    Base,
    ZeroNdcg,
    LowDegree,
    Sparse,
    Furthest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemPolicy {
    None,
    ItemPreference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySpec {
    pub user: UserPolicy,
    pub item: ItemPolicy,
    pub psi_u: f64,
    pub psi_i: f64,
}

impl PolicySpec {
    pub fn new(user: UserPolicy, item: ItemPolicy) -> Self {
        Self {
            user,
            item,
            psi_u: 0.35,
            psi_i: 0.20,
        }
    }

    pub fn with_fractions(mut self, psi_u: f64, psi_i: f64) -> Result<Self, PolicyError> {
        for psi in [psi_u, psi_i] {
            if !(psi > 0.0 && psi <= 1.0) {
                return Err(PolicyError::InvalidFraction(psi));
            }
        }
        self.psi_u = psi_u;
        self.psi_i = psi_i;
        Ok(self)
    }

    pub fn name(&self) -> String {
        let user = match self.user {
            UserPolicy::Base => "bm",
            UserPolicy::ZeroNdcg => "zn",
            UserPolicy::LowDegree => "ld",
            UserPolicy::Sparse => "sp",
            UserPolicy::Furthest => "fr",
        };
        match (self.user, self.item) {
            (UserPolicy::Base, ItemPolicy::ItemPreference) => "ip".to_string(),
            (_, ItemPolicy::ItemPreference) => format!("{user}+ip"),
            (_, ItemPolicy::None) => user.to_string(),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for PolicySpec {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let name = s.trim().to_ascii_lowercase();
        let parts: Vec<&str> = name.split('+').collect();
        let user_of = |p: &str| match p {
            "zn" => Some(UserPolicy::ZeroNdcg),
            "ld" => Some(UserPolicy::LowDegree),
            "sp" => Some(UserPolicy::Sparse),
            "fr" => Some(UserPolicy::Furthest),
            _ => None,
        };
        match parts.as_slice() {
            ["bm"] => Ok(Self::new(UserPolicy::Base, ItemPolicy::None)),
            ["ip"] => Ok(Self::new(UserPolicy::Base, ItemPolicy::ItemPreference)),
            [u] => user_of(u)
                .map(|u| Self::new(u, ItemPolicy::None))
                .ok_or_else(|| PolicyError::Unknown(s.to_string())),
            [a, b] => {
                let (ua, ub) = (user_of(a), user_of(b));
                match (ua, ub, *a == "ip", *b == "ip") {
                    (Some(u), None, false, true) | (None, Some(u), true, false) => {
                        Ok(Self::new(u, ItemPolicy::ItemPreference))
                    }
                    (Some(_), Some(_), _, _) | (None, None, true, true) => {
                        Err(PolicyError::IntraGroupCombination(s.to_string()))
                    }
                    _ => Err(PolicyError::Unknown(s.to_string())),
                }
            }
            _ => Err(PolicyError::Unknown(s.to_string())),
        }
    }
}

/// `ceil(psi · n)`, robust to representation error in `psi`.
pub fn quota(psi: f64, n: usize) -> usize {
    ((psi * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Users of U_D whose baseline top-k list holds none of their perturbation
/// items (NDCG@k = 0). Users without perturbation items are not measured
/// and therefore not selected.
pub fn sample_zn(
    lists: &[Vec<usize>],
    relevant: &[Vec<usize>],
    disadvantaged: &[usize],
    k: usize,
) -> Result<Vec<usize>, PolicyError> {
    let users: Vec<usize> = disadvantaged
        .iter()
        .copied()
        .filter(|&u| !relevant[u].is_empty() && ndcg_at_k(&lists[u], &relevant[u], k) == 0.0)
        .collect();
    if users.is_empty() {
        return Err(PolicyError::EmptySelection("zn"));
    }
    Ok(sorted(users))
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Takes the `count` best ids by `key` (ascending key, then id).
fn lowest_by(ids: &[usize], count: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = ids.iter().map(|&u| (key(u), u)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    sorted(ranked.into_iter().take(count).map(|(_, u)| u).collect())
}

/// The `ceil(psi · |U_D|)` users of U_D with the fewest train interactions.
pub fn sample_ld(graph: &BipartiteGraph, disadvantaged: &[usize], psi_u: f64) -> Vec<usize> {
    lowest_by(disadvantaged, quota(psi_u, disadvantaged.len()), |u| {
        graph.user_degree(u) as f64
    })
}

/// Mean train popularity of a user's train items.
pub fn density(graph: &BipartiteGraph, user: usize) -> f64 {
    let items = graph.items_of(user);
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|&i| graph.item_degree(i) as f64).sum::<f64>() / items.len() as f64
}

/// The `ceil(psi · |U_D|)` users of U_D with the lowest density.
pub fn sample_sp(graph: &BipartiteGraph, disadvantaged: &[usize], psi_u: f64) -> Vec<usize> {
    lowest_by(disadvantaged, quota(psi_u, disadvantaged.len()), |u| density(graph, u))
}

/// Mean hop distance from `user` to every member of `advantaged`;
/// unreachable pairs count as `|U| + |I| + 1`.
pub fn mean_distance(graph: &BipartiteGraph, user: usize, advantaged: &[usize]) -> f64 {
    let sentinel = (graph.num_nodes() + 1) as f64;
    let dist = shortest_path_lengths(graph, user);
    let total: f64 = advantaged
        .iter()
        .map(|&a| dist[a].map_or(sentinel, |d| d as f64))
        .sum();
    total / advantaged.len().max(1) as f64
}

/// The `ceil(psi · |U_D|)` users of U_D furthest (on average) from U_A.
pub fn sample_fr(
    graph: &BipartiteGraph,
    disadvantaged: &[usize],
    advantaged: &[usize],
    psi_u: f64,
) -> Result<Vec<usize>, PolicyError> {
    if disadvantaged.is_empty() {
        return Err(PolicyError::EmptyGroup("disadvantaged"));
    }
    if advantaged.is_empty() {
        return Err(PolicyError::EmptyGroup("advantaged"));
    }
    Ok(lowest_by(disadvantaged, quota(psi_u, disadvantaged.len()), |u| {
        -mean_distance(graph, u, advantaged)
    }))
}

/// Share of U_D users that interacted with `item` in train.
pub fn preference(graph: &BipartiteGraph, item: usize, disadvantaged: &[usize]) -> f64 {
    if disadvantaged.is_empty() {
        return 0.0;
    }
    let hits = graph
        .users_of(item)
        .iter()
        .filter(|u| disadvantaged.binary_search(u).is_ok())
        .count();
    hits as f64 / disadvantaged.len() as f64
}

/// The `ceil(psi · |I|)` items most preferred by U_D.
pub fn sample_ip(graph: &BipartiteGraph, disadvantaged: &[usize], psi_i: f64) -> Vec<usize> {
    let ud = sorted(disadvantaged.to_vec());
    let items: Vec<usize> = (0..graph.num_items()).collect();
    lowest_by(&items, quota(psi_i, items.len()), |i| -preference(graph, i, &ud))
}

/// Everything a policy may look at.
pub struct PolicyContext<'a> {
    pub graph: &'a BipartiteGraph,
    pub disadvantaged: &'a [usize],
    pub advantaged: &'a [usize],
    /// Baseline top-k lists indexed by user.
    pub lists: &'a [Vec<usize>],
    /// Perturbation-set items indexed by user.
    pub relevant: &'a [Vec<usize>],
    pub k: usize,
}

/// Candidate users (⊆ U_D) and items selected by `spec`.
pub fn apply_policy(
    spec: &PolicySpec,
    ctx: &PolicyContext<'_>,
) -> Result<(Vec<usize>, Vec<usize>), PolicyError> {
    if ctx.disadvantaged.is_empty() {
        return Err(PolicyError::EmptyGroup("disadvantaged"));
    }
    let ud = ctx.disadvantaged;
    let users = match spec.user {
        UserPolicy::Base => sorted(ud.to_vec()),
        UserPolicy::ZeroNdcg => sample_zn(ctx.lists, ctx.relevant, ud, ctx.k)?,
        UserPolicy::LowDegree => sample_ld(ctx.graph, ud, spec.psi_u),
        UserPolicy::Sparse => sample_sp(ctx.graph, ud, spec.psi_u),
        UserPolicy::Furthest => sample_fr(ctx.graph, ud, ctx.advantaged, spec.psi_u)?,
    };
    let items = match spec.item {
        ItemPolicy::None => (0..ctx.graph.num_items()).collect(),
        ItemPolicy::ItemPreference => sample_ip(ctx.graph, ud, spec.psi_i),
    };
    Ok((users, items))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_cli_name() {
        for name in ALL_POLICIES {
            let spec: PolicySpec = name.parse().unwrap();
            assert_eq!(spec.name(), name);
        }
        assert_eq!("IP+ZN".parse::<PolicySpec>().unwrap().name(), "zn+ip");
        assert!(matches!(
            "ld+ld".parse::<PolicySpec>(),
            Err(PolicyError::IntraGroupCombination(_))
        ));
        assert!(matches!(
            "ld+sp".parse::<PolicySpec>(),
            Err(PolicyError::IntraGroupCombination(_))
        ));
        assert!(matches!("bm+ip".parse::<PolicySpec>(), Err(PolicyError::Unknown(_))));
        assert!(matches!("xx".parse::<PolicySpec>(), Err(PolicyError::Unknown(_))));
    }

    #[test]
    fn quotas_use_ceiling() {
        assert_eq!(quota(0.35, 10), 4);
        assert_eq!(quota(0.35, 3), 2);
        assert_eq!(quota(0.35, 20), 7);
        assert_eq!(quota(0.2, 20), 4);
        assert_eq!(quota(1.0, 7), 7);
    }

    #[test]
    fn fractions_are_validated() {
        let spec = PolicySpec::new(UserPolicy::LowDegree, ItemPolicy::None);
        assert!(spec.with_fractions(0.0, 0.2).is_err());
        assert!(spec.with_fractions(0.5, 1.5).is_err());
        assert!(spec.with_fractions(1.0, 1.0).is_ok());
    }

    #[test]
    fn zn_selects_users_without_hits() {
        let lists = vec![vec![1, 2], vec![3, 4], vec![5, 6]];
        let relevant = vec![vec![9], vec![3], vec![]];
        assert_eq!(sample_zn(&lists, &relevant, &[0, 1, 2], 2).unwrap(), vec![0]);
        assert_eq!(
            sample_zn(&lists, &relevant, &[1], 2),
            Err(PolicyError::EmptySelection("zn"))
        );
    }

    #[test]
    fn ld_picks_lowest_degree_with_id_ties() {
        // degrees: user0=1, user1=1, user2=5
        let mut pairs = vec![(0, 0), (1, 1)];
        pairs.extend((0..5).map(|i| (2, i)));
        let g = BipartiteGraph::from_pairs(pairs, 3, 5).unwrap();
        assert_eq!(sample_ld(&g, &[0, 1, 2], 0.3), vec![0]);
        assert_eq!(sample_ld(&g, &[0, 1, 2], 1.0), vec![0, 1, 2]);

        let pairs: Vec<_> = (0..10).map(|u| (u, 0)).collect();
        let g = BipartiteGraph::from_pairs(pairs, 10, 1).unwrap();
        let ud: Vec<usize> = (0..10).collect();
        assert_eq!(sample_ld(&g, &ud, 0.35).len(), 4);
    }

    #[test]
    fn sp_density() {
        // item0 degree 1 (user0 only); item1 degree 2; item2 degree 4
        let pairs = vec![(0, 0), (1, 1), (2, 1), (1, 2), (2, 2), (3, 2), (4, 2)];
        let g = BipartiteGraph::from_pairs(pairs, 5, 3).unwrap();
        assert_eq!(density(&g, 0), 1.0);
        assert_eq!(density(&g, 1), 3.0);
        assert_eq!(sample_sp(&g, &[0, 1], 0.5), vec![0]);
        // users 1 and 2 both have density 3
        assert_eq!(sample_sp(&g, &[2, 1], 0.5), vec![1]);
    }

    #[test]
    fn fr_prefers_disconnected_users() {
        // U_D = {0, 1, 2}; U_A = {3, 4}. user0 shares item0 with both
        // advantaged users, user1 reaches them in 4 hops, user2 is isolated.
        let pairs = vec![(0, 0), (3, 0), (4, 0), (1, 1), (0, 1), (2, 2)];
        let g = BipartiteGraph::from_pairs(pairs, 5, 3).unwrap();
        assert_eq!(mean_distance(&g, 0, &[3, 4]), 2.0);
        assert_eq!(mean_distance(&g, 2, &[3, 4]), 9.0);
        let picked = sample_fr(&g, &[0, 1, 2], &[3, 4], 0.35).unwrap();
        assert_eq!(picked, vec![1, 2]);
        assert_eq!(sample_fr(&g, &[0, 1, 2], &[3, 4], 0.3).unwrap(), vec![2]);
    }

    #[test]
    fn ip_preference() {
        // 10 U_D users; item 0 touched by 3 of them, item 1 by none.
        let mut pairs: Vec<(usize, usize)> = (0..3).map(|u| (u, 0)).collect();
        pairs.push((10, 1));
        pairs.extend((0..10).map(|u| (u, 2 + u)));
        let g = BipartiteGraph::from_pairs(pairs, 11, 20).unwrap();
        let ud: Vec<usize> = (0..10).collect();
        assert!((preference(&g, 0, &ud) - 0.3).abs() < 1e-15);
        assert_eq!(preference(&g, 1, &ud), 0.0);
        let items = sample_ip(&g, &ud, 0.2);
        assert_eq!(items.len(), 4);
        assert!(items.contains(&0));
        assert!(!items.contains(&1));
    }

    #[test]
    fn apply_combines_user_and_item_sets() {
        let pairs = vec![(0, 0), (1, 1), (2, 2), (3, 3), (0, 4)];
        let g = BipartiteGraph::from_pairs(pairs, 4, 5).unwrap();
        let lists = vec![vec![1], vec![0], vec![1], vec![0]];
        let relevant = vec![vec![3], vec![1], vec![4], vec![2]];
        let ctx = PolicyContext {
            graph: &g,
            disadvantaged: &[0, 1],
            advantaged: &[2, 3],
            lists: &lists,
            relevant: &relevant,
            k: 1,
        };
        let bm: PolicySpec = "bm".parse().unwrap();
        assert_eq!(apply_policy(&bm, &ctx).unwrap(), (vec![0, 1], vec![0, 1, 2, 3, 4]));
        let zn_ip: PolicySpec = "zn+ip".parse().unwrap();
        let (users, items) = apply_policy(&zn_ip, &ctx).unwrap();
        assert_eq!(users, vec![0, 1]);
        assert_eq!(items, vec![0]);
    }
}
