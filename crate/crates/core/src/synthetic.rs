//! Seeded synthetic datasets with a built-in utility gap.
//!
//! Items fall into clusters; each user prefers one cluster and draws most
//! interactions from it. Users alternate between two groups. A group can
//! then be made disadvantaged by thinning its train interactions
//! ([`subsample_group_train`]) or its overall activity
//! ([`thin_group_activity`]).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetError, InteractionDataset, SplitDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction comes from the user's cluster.
    pub affinity: f64,
    pub labels: [String; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 300,
            num_clusters: 10,
            min_interactions: 20,
            max_interactions: 40,
            affinity: 0.8,
            labels: ["a".into(), "b".into()],
            seed: 7,
        }
    }
}

/// User `u` belongs to `labels[u % 2]` and prefers cluster
/// `(u / 2) % num_clusters`; item `i` belongs to cluster `i % num_clusters`.
/// Timestamps are `1, 2, …` per user in draw order.
pub fn generate(config: &SyntheticConfig) -> Result<InteractionDataset, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.num_clusters.max(1);
    let clusters: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..config.num_items).filter(|i| i % c == k).collect())
        .collect();
    let mut records = Vec::new();
    let mut attributes = Vec::new();
    for u in 0..config.num_users {
        attributes.push((format!("u{u}"), config.labels[u % 2].clone()));
        let home = &clusters[(u / 2) % c];
        let n = rng
            .gen_range(config.min_interactions..=config.max_interactions)
            .min(config.num_items);
        let mut seen = BTreeSet::new();
        let mut t = 0i64;
        while seen.len() < n {
            let item = if rng.gen_bool(config.affinity) && !home.is_empty() {
                *home.choose(&mut rng).expect("non-empty cluster")
            } else {
                rng.gen_range(0..config.num_items)
            };
            if seen.insert(item) {
                t += 1;
                records.push((format!("u{u}"), format!("i{item}"), t));
            }
        }
    }
    InteractionDataset::from_records(records, attributes)
}

/// Keeps a seeded `fraction` of each listed user's train interactions (at
/// least one per user). Validation and test are untouched.
pub fn subsample_group_train(
    splits: &SplitDataset,
    users: &[usize],
    fraction: f64,
    seed: u64,
) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: BTreeSet<usize> = users.iter().copied().collect();
    let mut out = splits.clone();
    out.train.clear();
    let mut start = 0;
    while start < splits.train.len() {
        let user = splits.train[start].user;
        let end = start
            + splits.train[start..]
                .iter()
                .take_while(|x| x.user == user)
                .count();
        let rows = &splits.train[start..end];
        if targets.contains(&user) {
            let keep = ((rows.len() as f64 * fraction).round() as usize).clamp(1, rows.len());
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.shuffle(&mut rng);
            let mut chosen: Vec<usize> = idx[..keep].to_vec();
            chosen.sort_unstable();
            out.train.extend(chosen.into_iter().map(|j| rows[j]));
        } else {
            out.train.extend_from_slice(rows);
        }
        start = end;
    }
    out
}

/// Drops a seeded `1 − fraction` share of every interaction of the users
/// labelled `label`, keeping at least three per user.
pub fn thin_group_activity(
    ds: &InteractionDataset,
    label: &str,
    fraction: f64,
    seed: u64,
) -> Result<InteractionDataset, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut start = 0;
    let rows = &ds.interactions;
    while start < rows.len() {
        let user = rows[start].user;
        let end = start + rows[start..].iter().take_while(|x| x.user == user).count();
        let mine = &rows[start..end];
        let keep: Vec<usize> = if ds.group_of[user] == label {
            let n = ((mine.len() as f64 * fraction).round() as usize).clamp(3.min(mine.len()), mine.len());
            let mut idx: Vec<usize> = (0..mine.len()).collect();
            idx.shuffle(&mut rng);
            let mut idx = idx[..n].to_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..mine.len()).collect()
        };
        for j in keep {
            let x = mine[j];
            records.push((
                ds.user_ids[x.user].clone(),
                ds.item_ids[x.item].clone(),
                x.timestamp,
            ));
        }
        start = end;
    }
    let attributes = ds
        .user_ids
        .iter()
        .cloned()
        .zip(ds.group_of.iter().cloned());
    InteractionDataset::from_records(records, attributes)
}
