//! Interaction logs, demographic labels and temporal splits.
//!
//! Raw ids are arbitrary strings; they are remapped to dense 0-based indices
//! in order of first appearance in the interactions file. The original ids
//! are kept on the dataset for reporting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no interactions")]
    NoInteractions,
    #[error("user {user:?} has interactions but no group label")]
    MissingAttribute { user: String },
    #[error("user {user:?} has conflicting group labels {first:?} and {second:?}")]
    ConflictingAttribute {
        user: String,
        first: String,
        second: String,
    },
    #[error("attribute column must be binary, found labels {labels:?}")]
    UnsupportedAttribute { labels: Vec<String> },
    #[error("expected exactly two groups, found {} ({labels:?})", labels.len())]
    UnsupportedGrouping { labels: Vec<String> },
    #[error("interaction ({user}, {item}) out of range for {num_users} users / {num_items} items")]
    OutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
}

/// One implicit-feedback event, in dense id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: usize, item: usize, timestamp: i64) -> Self {
        Self {
            user,
            item,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted by `(user, timestamp, item)`; `(user, item)` pairs are unique.
    pub interactions: Vec<Interaction>,
    /// Group label per dense user id.
    pub group_of: Vec<String>,
    /// Original id per dense user id.
    pub user_ids: Vec<String>,
    /// Original id per dense item id.
    pub item_ids: Vec<String>,
}

impl InteractionDataset {
    /// Builds a dataset from raw `(user, item, timestamp)` records and
    /// `(user, label)` attributes.
    ///
    /// Duplicate `(user, item)` records collapse to the latest timestamp.
    /// Attribute rows for users without interactions are ignored.
    pub fn from_records<I, A>(records: I, attributes: A) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (String, String, i64)>,
        A: IntoIterator<Item = (String, String)>,
    {
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut latest: HashMap<(usize, usize), i64> = HashMap::new();

        for (u, i, t) in records {
            let user = *user_index.entry(u.clone()).or_insert_with(|| {
                user_ids.push(u);
                user_ids.len() - 1
            });
            let item = *item_index.entry(i.clone()).or_insert_with(|| {
                item_ids.push(i);
                item_ids.len() - 1
            });
            latest
                .entry((user, item))
                .and_modify(|ts| *ts = (*ts).max(t))
                .or_insert(t);
        }
        if latest.is_empty() {
            return Err(DatasetError::NoInteractions);
        }

        let mut labels: BTreeSet<String> = BTreeSet::new();
        let mut group_of: Vec<Option<String>> = vec![None; user_ids.len()];
        for (u, label) in attributes {
            labels.insert(label.clone());
            let Some(&user) = user_index.get(&u) else {
                continue;
            };
            match &group_of[user] {
                Some(existing) if *existing != label => {
                    return Err(DatasetError::ConflictingAttribute {
                        user: u,
                        first: existing.clone(),
                        second: label,
                    })
                }
                _ => group_of[user] = Some(label),
            }
        }
        if labels.len() > 2 {
            return Err(DatasetError::UnsupportedAttribute {
                labels: labels.into_iter().collect(),
            });
        }
        let group_of = group_of
            .into_iter()
            .enumerate()
            .map(|(user, g)| {
                g.ok_or_else(|| DatasetError::MissingAttribute {
                    user: user_ids[user].clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut interactions: Vec<Interaction> = latest
            .into_iter()
            .map(|((user, item), timestamp)| Interaction::new(user, item, timestamp))
            .collect();
        interactions.sort_by_key(|x| (x.user, x.timestamp, x.item));

        Ok(Self {
            num_users: user_ids.len(),
            num_items: item_ids.len(),
            interactions,
            group_of,
            user_ids,
            item_ids,
        })
    }
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_interaction_lines(path: &Path) -> Result<Vec<(String, String, i64)>, DatasetError> {
    let text = read_to_string(path)?;
    let mut records = Vec::new();
    for (line, content) in data_lines(&text) {
        let fields: Vec<&str> = content.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_error(
                path,
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let ts = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_error(path, line, format!("bad timestamp {:?}: {e}", fields[2])))?;
        records.push((fields[0].trim().to_string(), fields[1].trim().to_string(), ts));
    }
    Ok(records)
}

/// Reads the interactions TSV (`user<TAB>item<TAB>timestamp`) and the
/// attributes TSV (`user<TAB>label`). Lines starting with `#` are skipped.
pub fn load_interactions(
    path: impl AsRef<Path>,
    attr_path: impl AsRef<Path>,
) -> Result<InteractionDataset, DatasetError> {
    let path = path.as_ref();
    let attr_path = attr_path.as_ref();
    let records = parse_interaction_lines(path)?;

    let text = read_to_string(attr_path)?;
    let mut attributes = Vec::new();
    for (line, content) in data_lines(&text) {
        let fields: Vec<&str> = content.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_error(
                attr_path,
                line,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        attributes.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
    }
    InteractionDataset::from_records(records, attributes)
}

/// Train / validation / test partition of a dataset's interactions.
///
/// The validation split doubles as the perturbation set of the augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Users excluded for having fewer than three interactions.
    pub dropped_users: Vec<usize>,
}

impl SplitDataset {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Users that kept at least one train interaction.
    pub fn retained_users(&self) -> BTreeSet<usize> {
        self.train.iter().map(|x| x.user).collect()
    }

    pub fn write_tsv(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_interactions(dir.join("train.tsv"), &self.train)?;
        write_interactions(dir.join("validation.tsv"), &self.validation)?;
        write_interactions(dir.join("test.tsv"), &self.test)?;
        Ok(())
    }

    /// Reads `train.tsv`, `validation.tsv` and `test.tsv` written by
    /// [`SplitDataset::write_tsv`] (dense ids).
    pub fn read_tsv(
        dir: impl AsRef<Path>,
        num_users: usize,
        num_items: usize,
    ) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let read = |name: &str| read_dense_interactions(dir.join(name), num_users, num_items);
        let train = read("train.tsv")?;
        let validation = read("validation.tsv")?;
        let test = read("test.tsv")?;
        let present: BTreeSet<usize> = train
            .iter()
            .chain(&validation)
            .chain(&test)
            .map(|x| x.user)
            .collect();
        Ok(Self {
            num_users,
            num_items,
            train,
            validation,
            test,
            dropped_users: (0..num_users).filter(|u| !present.contains(u)).collect(),
        })
    }
}

pub fn write_interactions(path: impl AsRef<Path>, rows: &[Interaction]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for x in rows {
        writeln!(w, "{}\t{}\t{}", x.user, x.item, x.timestamp).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an interactions TSV whose ids are already dense integers.
pub fn read_dense_interactions(
    path: impl AsRef<Path>,
    num_users: usize,
    num_items: usize,
) -> Result<Vec<Interaction>, DatasetError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (n, (u, i, t)) in parse_interaction_lines(path)?.into_iter().enumerate() {
        let user = u
            .parse::<usize>()
            .map_err(|e| parse_error(path, n + 1, format!("bad user id {u:?}: {e}")))?;
        let item = i
            .parse::<usize>()
            .map_err(|e| parse_error(path, n + 1, format!("bad item id {i:?}: {e}")))?;
        if user >= num_users || item >= num_items {
            return Err(DatasetError::OutOfRange {
                user,
                item,
                num_users,
                num_items,
            });
        }
        out.push(Interaction::new(user, item, t));
    }
    Ok(out)
}

/// Per-user chronological 7:1:2 split.
///
/// For a user with `n >= 3` interactions sorted by `(timestamp, item)`, the
/// first `floor(0.7 n)` go to train, the next `floor(0.8 n) - floor(0.7 n)` to
/// validation and the rest to test. Users with fewer than three interactions
/// are dropped and listed in [`SplitDataset::dropped_users`].
pub fn temporal_split(ds: &InteractionDataset) -> SplitDataset {
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); ds.num_users];
    for x in &ds.interactions {
        per_user[x.user].push(*x);
    }
    let mut split = SplitDataset {
        num_users: ds.num_users,
        num_items: ds.num_items,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        dropped_users: Vec::new(),
    };
    for (user, mut rows) in per_user.into_iter().enumerate() {
        let n = rows.len();
        if n < 3 {
            log::warn!(
                "dropping user {} ({} interactions, need at least 3)",
                ds.user_ids.get(user).map(String::as_str).unwrap_or("?"),
                n
            );
            split.dropped_users.push(user);
            continue;
        }
        rows.sort_by_key(|x| (x.timestamp, x.item));
        let (train_end, val_end) = split_points(n);
        split.train.extend_from_slice(&rows[..train_end]);
        split.validation.extend_from_slice(&rows[train_end..val_end]);
        split.test.extend_from_slice(&rows[val_end..]);
    }
    split
}

/// `(floor(0.7 n), floor(0.8 n))`, computed in integer arithmetic.
pub fn split_points(n: usize) -> (usize, usize) {
    (7 * n / 10, 8 * n / 10)
}

/// The two demographic groups of a dataset, ordered by label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub labels: [String; 2],
    pub members: [Vec<usize>; 2],
}

impl GroupPartition {
    pub fn sizes(&self) -> [usize; 2] {
        [self.members[0].len(), self.members[1].len()]
    }

    /// Index (0 or 1) of the group containing `user`.
    pub fn group_of(&self, user: usize) -> Option<usize> {
        self.members
            .iter()
            .position(|m| m.binary_search(&user).is_ok())
    }

    /// Keeps only the users accepted by `keep`.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> GroupPartition {
        GroupPartition {
            labels: self.labels.clone(),
            members: [
                self.members[0].iter().copied().filter(|&u| keep(u)).collect(),
                self.members[1].iter().copied().filter(|&u| keep(u)).collect(),
            ],
        }
    }
}

/// Splits users by their binary group label.
pub fn group_partition(ds: &InteractionDataset) -> Result<GroupPartition, DatasetError> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (user, label) in ds.group_of.iter().enumerate() {
        by_label.entry(label.as_str()).or_default().push(user);
    }
    if by_label.len() != 2 {
        return Err(DatasetError::UnsupportedGrouping {
            labels: by_label.keys().map(|s| s.to_string()).collect(),
        });
    }
    let mut it = by_label.into_iter();
    let (l0, m0) = it.next().expect("two labels");
    let (l1, m1) = it.next().expect("two labels");
    Ok(GroupPartition {
        labels: [l0.to_string(), l1.to_string()],
        members: [m0, m1],
    })
}

/// Sorted item lists per user.
pub fn items_by_user(rows: &[Interaction], num_users: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for x in rows {
        out[x.user].push(x.item);
    }
    for items in &mut out {
        items.sort_unstable();
        items.dedup();
    }
    out
}
