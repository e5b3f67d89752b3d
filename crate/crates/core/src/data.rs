//! Dataset loading, chronological leave-one-out splitting and negative
//! sampling.
//!
//! Item id 0 is reserved for sequence padding; real items live in
//! `1..=num_items`. Users are addressed by a dense index (`0..num_users`,
//! ascending original user id) once a dataset is split.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of sampled negatives per evaluation list.
pub const EVAL_NEGATIVES: usize = 99;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u32,
    pub attributes: Vec<(String, String)>,
}

impl UserProfile {
    pub fn new(user_id: u32, attributes: Vec<(String, String)>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Integrity(format!("user {user_id} has an empty profile")));
        }
        Ok(UserProfile { user_id, attributes })
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub weight: f64,
    pub timestamp: i64,
}

/// Per-user chronological item sequences plus profiles, before splitting.
#[derive(Debug, Clone)]
pub struct RawDataset {
    num_items: usize,
    num_records: usize,
    sequences: BTreeMap<u32, Vec<u32>>,
    profiles: BTreeMap<u32, UserProfile>,
}

impl RawDataset {
    /// Groups interactions by user and orders each user's records by
    /// timestamp. Equal timestamps keep their input order.
    ///
    /// Users without a supplied profile get `[("user_id", id)]`.
    pub fn from_interactions(
        interactions: &[Interaction],
        num_items: usize,
        mut profiles: BTreeMap<u32, UserProfile>,
    ) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::Integrity("no interaction records (zero users)".into()));
        }
        let mut grouped: BTreeMap<u32, Vec<(i64, u32)>> = BTreeMap::new();
        for rec in interactions {
            if rec.item == 0 || rec.item as usize > num_items {
                return Err(Error::ItemId {
                    item: rec.item,
                    num_items,
                });
            }
            grouped.entry(rec.user).or_default().push((rec.timestamp, rec.item));
        }
        let mut sequences = BTreeMap::new();
        for (user, mut recs) in grouped {
            recs.sort_by_key(|&(ts, _)| ts);
            sequences.insert(user, recs.into_iter().map(|(_, item)| item).collect());
        }
        profiles.retain(|id, _| sequences.contains_key(id));
        for &user in sequences.keys() {
            profiles
                .entry(user)
                .or_insert_with(|| UserProfile {
                    user_id: user,
                    attributes: vec![("user_id".into(), user.to_string())],
                });
        }
        Ok(RawDataset {
            num_items,
            num_records: interactions.len(),
            sequences,
            profiles,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_records(&self) -> usize {
        self.num_records
    }

    /// `1 − records / (users · items)`
    pub fn sparsity(&self) -> f64 {
        1.0 - self.num_records as f64 / (self.num_users() as f64 * self.num_items as f64)
    }

    pub fn sequences(&self) -> &BTreeMap<u32, Vec<u32>> {
        &self.sequences
    }

    pub fn profile(&self, user: u32) -> Option<&UserProfile> {
        self.profiles.get(&user)
    }

    /// Keeps the `n` users with the smallest ids. The item catalog is left
    /// untouched.
    pub fn take_first_users(mut self, n: usize) -> Self {
        let keep: HashSet<u32> = self.sequences.keys().take(n).copied().collect();
        self.sequences.retain(|id, _| keep.contains(id));
        self.profiles.retain(|id, _| keep.contains(id));
        self.num_records = self.sequences.values().map(Vec::len).sum();
        self
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid {name} `{raw}`"),
    })
}

/// Loads MovieLens-100K from `u.data` (tab-separated `user item rating
/// timestamp`) and `u.user` (pipe-separated `user|age|gender|occupation|zip`).
pub fn load_movielens_100k(data_path: &Path, user_path: &Path) -> Result<RawDataset> {
    let mut profiles = BTreeMap::new();
    for (idx, line) in read(user_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: user_path.to_path_buf(),
                line: lineno,
                msg: format!("expected 5 pipe-separated fields, found {}", fields.len()),
            });
        }
        let user: u32 = parse_field(user_path, lineno, "user id", fields[0])?;
        let attributes = ["age", "gender", "occupation", "zip"]
            .iter()
            .zip(&fields[1..])
            .map(|(k, v)| (k.to_string(), v.trim().to_string()))
            .collect();
        if profiles.insert(user, UserProfile::new(user, attributes)?).is_some() {
            return Err(Error::Integrity(format!("duplicate user {user} in {}", user_path.display())));
        }
    }

    let mut records = Vec::new();
    let mut max_item = 0u32;
    for (idx, line) in read(data_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: data_path.to_path_buf(),
                line: lineno,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let rec = Interaction {
            user: parse_field(data_path, lineno, "user id", fields[0])?,
            item: parse_field(data_path, lineno, "item id", fields[1])?,
            weight: parse_field(data_path, lineno, "rating", fields[2])?,
            timestamp: parse_field(data_path, lineno, "timestamp", fields[3])?,
        };
        if !profiles.contains_key(&rec.user) {
            return Err(Error::Integrity(format!(
                "{}:{lineno}: user {} has no entry in {}",
                data_path.display(),
                rec.user,
                user_path.display()
            )));
        }
        max_item = max_item.max(rec.item);
        records.push(rec);
    }
    RawDataset::from_interactions(&records, max_item as usize, profiles)
}

/// Minimum number of records a user needs to survive [`load_generic_tsv`].
pub const MIN_USER_RECORDS: usize = 5;

/// Loads a tab-separated `user item weight timestamp` file. The timestamp
/// column may be omitted, in which case file order decides.
///
/// Users with fewer than [`MIN_USER_RECORDS`] records are dropped. Raw item
/// ids are remapped to `1..=n` in ascending order; profiles are synthesized
/// from the user id and the interaction count.
pub fn load_generic_tsv(data_path: &Path) -> Result<RawDataset> {
    let mut records = Vec::new();
    for (idx, line) in read(data_path)?.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() || (lineno == 1 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::Parse {
                path: data_path.to_path_buf(),
                line: lineno,
                msg: format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let user: u32 = parse_field(data_path, lineno, "user id", fields[0])?;
        let item: u64 = parse_field(data_path, lineno, "item id", fields[1])?;
        let weight: f64 = parse_field(data_path, lineno, "weight", fields[2])?;
        let timestamp: i64 = match fields.get(3) {
            Some(raw) => parse_field(data_path, lineno, "timestamp", raw)?,
            None => 0,
        };
        records.push((user, item, weight, timestamp));
    }

    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &(user, ..) in &records {
        *counts.entry(user).or_default() += 1;
    }
    records.retain(|(user, ..)| counts[user] >= MIN_USER_RECORDS);

    let mut raw_items: Vec<u64> = records.iter().map(|r| r.1).collect();
    raw_items.sort_unstable();
    raw_items.dedup();
    let remap: BTreeMap<u64, u32> = raw_items
        .iter()
        .enumerate()
        .map(|(i, &raw)| (raw, i as u32 + 1))
        .collect();

    let interactions: Vec<Interaction> = records
        .iter()
        .map(|&(user, item, weight, timestamp)| Interaction {
            user,
            item: remap[&item],
            weight,
            timestamp,
        })
        .collect();
    let profiles = counts
        .iter()
        .filter(|(_, &n)| n >= MIN_USER_RECORDS)
        .map(|(&user, &n)| {
            let attrs = vec![
                ("user_id".to_string(), user.to_string()),
                ("interaction_count".to_string(), n.to_string()),
            ];
            (user, UserProfile { user_id: user, attributes: attrs })
        })
        .collect();
    RawDataset::from_interactions(&interactions, raw_items.len(), profiles)
}

/// Which chronological records are held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// First record → test, second → validation, remainder → train.
    #[default]
    First,
    /// Last record → test, second-to-last → validation.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub user_id: u32,
    /// Chronological training items.
    pub train: Vec<u32>,
    pub validation: u32,
    pub test: u32,
    /// Sorted train ∪ {validation} ∪ {test}.
    interacted: Vec<u32>,
}

impl UserSplit {
    pub fn has_interacted(&self, item: u32) -> bool {
        self.interacted.binary_search(&item).is_ok()
    }

    pub fn interacted(&self) -> &[u32] {
        &self.interacted
    }
}

#[derive(Debug, Clone)]
pub struct InteractionDataset {
    num_items: usize,
    users: Vec<UserSplit>,
    profiles: Vec<UserProfile>,
}

/// Splits every user's chronological records into train / validation /
/// test. Repeated interactions with the same item keep only the earliest.
pub fn leave_one_out_split(raw: &RawDataset, mode: SplitMode) -> Result<InteractionDataset> {
    let mut users = Vec::with_capacity(raw.num_users());
    let mut profiles = Vec::with_capacity(raw.num_users());
    for (&user_id, seq) in raw.sequences() {
        let mut seen = HashSet::new();
        let mut items: Vec<u32> = seq.iter().copied().filter(|i| seen.insert(*i)).collect();
        if items.len() < 3 {
            return Err(Error::Split {
                user: user_id,
                msg: format!("needs at least 3 distinct records, has {}", items.len()),
            });
        }
        let (test, validation) = match mode {
            SplitMode::First => {
                let test = items.remove(0);
                (test, items.remove(0))
            }
            SplitMode::Last => {
                let test = items.pop().unwrap_or_default();
                (test, items.pop().unwrap_or_default())
            }
        };
        let mut interacted = items.clone();
        interacted.extend([validation, test]);
        interacted.sort_unstable();
        users.push(UserSplit {
            user_id,
            train: items,
            validation,
            test,
            interacted,
        });
        let profile = raw
            .profile(user_id)
            .cloned()
            .ok_or_else(|| Error::Integrity(format!("user {user_id} has no profile")))?;
        profiles.push(profile);
    }
    Ok(InteractionDataset {
        num_items: raw.num_items(),
        users,
        profiles,
    })
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn users(&self) -> &[UserSplit] {
        &self.users
    }

    pub fn user(&self, idx: usize) -> &UserSplit {
        &self.users[idx]
    }

    pub fn profiles(&self) -> &[UserProfile] {
        &self.profiles
    }

    pub fn profile(&self, idx: usize) -> &UserProfile {
        &self.profiles[idx]
    }

    /// Replaces one user's profile (e.g. when their attributes change).
    pub fn set_profile(&mut self, idx: usize, profile: UserProfile) {
        self.profiles[idx] = profile;
    }

    fn non_interacted_count(&self, user: usize) -> usize {
        self.num_items - self.users[user].interacted.len()
    }
}

/// Draws `count` distinct items the user never interacted with.
pub fn sample_train_negatives<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    user: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let split = dataset
        .users
        .get(user)
        .ok_or_else(|| Error::Parameter(format!("user index {user} out of range")))?;
    let available = dataset.non_interacted_count(user);
    if count == 0 {
        return Err(Error::Parameter("negative count must be at least 1".into()));
    }
    if available < count {
        return Err(Error::Sampling {
            user: split.user_id,
            msg: format!("requested {count} negatives but only {available} non-interacted items exist"),
        });
    }
    Ok(sample_excluding(split, dataset.num_items, count, available, rng))
}

fn sample_excluding<R: Rng + ?Sized>(
    split: &UserSplit,
    num_items: usize,
    count: usize,
    available: usize,
    rng: &mut R,
) -> Vec<u32> {
    // Dense enough for rejection sampling to terminate quickly.
    if available * 2 >= num_items {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let item = rng.gen_range(1..=num_items as u32);
            if !split.has_interacted(item) && !out.contains(&item) {
                out.push(item);
            }
        }
        return out;
    }
    let pool: Vec<u32> = (1..=num_items as u32).filter(|&i| !split.has_interacted(i)).collect();
    index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCandidates {
    pub user_id: u32,
    pub positive: u32,
    pub negatives: Vec<u32>,
    /// Set when fewer than [`EVAL_NEGATIVES`] non-interacted items existed
    /// and every one of them was used.
    pub truncated: bool,
}

impl EvalCandidates {
    /// Positive first, then negatives in sampled order.
    pub fn items(&self) -> Vec<u32> {
        let mut all = Vec::with_capacity(self.negatives.len() + 1);
        all.push(self.positive);
        all.extend_from_slice(&self.negatives);
        all
    }
}

/// Builds the 1 + 99 candidate list for a user's test item.
pub fn build_eval_candidates<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    user: usize,
    rng: &mut R,
) -> Result<EvalCandidates> {
    let split = dataset
        .users
        .get(user)
        .ok_or_else(|| Error::Parameter(format!("user index {user} out of range")))?;
    let available = dataset.non_interacted_count(user);
    let (negatives, truncated) = if available < EVAL_NEGATIVES {
        let all = (1..=dataset.num_items as u32)
            .filter(|&i| !split.has_interacted(i))
            .collect();
        (all, true)
    } else {
        (
            sample_excluding(split, dataset.num_items, EVAL_NEGATIVES, available, rng),
            false,
        )
    };
    Ok(EvalCandidates {
        user_id: split.user_id,
        positive: split.test,
        negatives,
        truncated,
    })
}

/// Standard file locations inside an extracted MovieLens-100K directory.
pub fn movielens_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("u.data"), dir.join("u.user"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use rand::SeedableRng;
    use std::io::Write;

    fn rec(user: u32, item: u32, timestamp: i64) -> Interaction {
        Interaction {
            user,
            item,
            weight: 1.0,
            timestamp,
        }
    }

    fn toy(num_items: usize, per_user: &[&[u32]]) -> InteractionDataset {
        let mut recs = Vec::new();
        for (u, items) in per_user.iter().enumerate() {
            for (t, &i) in items.iter().enumerate() {
                recs.push(rec(u as u32 + 1, i, t as i64));
            }
        }
        let raw = RawDataset::from_interactions(&recs, num_items, BTreeMap::new()).unwrap();
        leave_one_out_split(&raw, SplitMode::First).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn movielens_toy_sorted_by_time() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "u.data", "1\t3\t5\t300\n1\t1\t4\t100\n1\t2\t4\t200\n");
        let users = write(dir.path(), "u.user", "1|25|M|engineer|55414\n");
        let raw = load_movielens_100k(&data, &users).unwrap();
        assert_eq!(raw.num_users(), 1);
        assert_eq!(raw.num_items(), 3);
        assert_eq!(raw.sequences()[&1], vec![1, 2, 3]);
        assert_eq!(raw.profile(1).unwrap().get("occupation"), Some("engineer"));
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let raw = RawDataset::from_interactions(
            &[rec(1, 5, 10), rec(1, 2, 10), rec(1, 9, 5)],
            9,
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(raw.sequences()[&1], vec![9, 5, 2]);
    }

    #[test]
    fn movielens_errors() {
        let dir = tempfile::tempdir().unwrap();
        let users = write(dir.path(), "u.user", "1|25|M|engineer|55414\n");
        let empty = write(dir.path(), "empty", "");
        assert!(matches!(load_movielens_100k(&empty, &users), Err(Error::Integrity(_))));

        let bad = write(dir.path(), "bad", "1\t1\t5\t1\n1\tx\t5\t2\n");
        match load_movielens_100k(&bad, &users) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let unknown = write(dir.path(), "unknown", "2\t1\t5\t1\n");
        assert!(matches!(load_movielens_100k(&unknown, &users), Err(Error::Integrity(_))));
    }

    #[test]
    fn generic_tsv_filters_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 0..4 {
            body += &format!("1\t{}\t1\t{i}\n", 100 + i);
        }
        for i in 0..5 {
            body += &format!("2\t{}\t1\t{i}\n", 200 + i);
        }
        for i in 0..7 {
            body += &format!("3\t{}\t1\t{i}\n", 300 + i);
        }
        let path = write(dir.path(), "data.tsv", &body);
        let raw = load_generic_tsv(&path).unwrap();
        assert_eq!(raw.sequences().keys().copied().collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(raw.num_items(), 12);
        assert_eq!(raw.profile(2).unwrap().get("interaction_count"), Some("5"));
        assert_eq!(raw.profile(3).unwrap().get("interaction_count"), Some("7"));
        assert_eq!(raw.profile(3).unwrap().get("user_id"), Some("3"));
        // Remapped ids are dense and start at 1.
        assert_eq!(raw.sequences()[&2], vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn split_modes() {
        let raw = RawDataset::from_interactions(
            &[rec(1, 1, 0), rec(1, 2, 1), rec(1, 3, 2), rec(1, 4, 3)],
            4,
            BTreeMap::new(),
        )
        .unwrap();
        let first = leave_one_out_split(&raw, SplitMode::First).unwrap();
        let u = first.user(0);
        assert_eq!((u.test, u.validation, u.train.clone()), (1, 2, vec![3, 4]));
        let last = leave_one_out_split(&raw, SplitMode::Last).unwrap();
        let u = last.user(0);
        assert_eq!((u.test, u.validation, u.train.clone()), (4, 3, vec![1, 2]));

        let short = RawDataset::from_interactions(&[rec(7, 1, 0), rec(7, 2, 1)], 4, BTreeMap::new()).unwrap();
        assert!(matches!(
            leave_one_out_split(&short, SplitMode::First),
            Err(Error::Split { user: 7, .. })
        ));
    }

    #[test]
    fn forced_negative() {
        let all_but_7: Vec<u32> = (1..=10).filter(|&i| i != 7).collect();
        let ds = toy(10, &[&all_but_7]);
        let mut rng = SimRng::seed_from_u64(0);
        assert_eq!(sample_train_negatives(&ds, 0, 1, &mut rng).unwrap(), vec![7]);
        assert!(matches!(
            sample_train_negatives(&ds, 0, 2, &mut rng),
            Err(Error::Sampling { .. })
        ));
        let everything: Vec<u32> = (1..=10).collect();
        let full = toy(10, &[&everything]);
        assert!(sample_train_negatives(&full, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn negatives_are_distinct_and_unseen() {
        let ds = toy(20, &[&[1, 2, 3, 4, 5, 6]]);
        let seen: HashSet<u32> = [1, 2, 3, 4, 5, 6].into_iter().collect();
        for seed in 0..50 {
            let mut rng = SimRng::seed_from_u64(seed);
            let neg = sample_train_negatives(&ds, 0, 4, &mut rng).unwrap();
            let distinct: HashSet<u32> = neg.iter().copied().collect();
            assert_eq!(distinct.len(), 4);
            assert!(neg.iter().all(|i| !seen.contains(i) && (1..=20).contains(i)));
        }
        let a = sample_train_negatives(&ds, 0, 4, &mut SimRng::seed_from_u64(9)).unwrap();
        let b = sample_train_negatives(&ds, 0, 4, &mut SimRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_candidates_full_and_truncated() {
        let ds = toy(150, &[&[1, 2, 3, 4, 5]]);
        let c = build_eval_candidates(&ds, 0, &mut SimRng::seed_from_u64(1)).unwrap();
        assert_eq!(c.negatives.len(), 99);
        assert!(!c.truncated);
        assert_eq!(c.positive, 1);
        let distinct: HashSet<u32> = c.negatives.iter().copied().collect();
        assert_eq!(distinct.len(), 99);
        assert!(c.negatives.iter().all(|&i| i > 5 && i <= 150));
        let again = build_eval_candidates(&ds, 0, &mut SimRng::seed_from_u64(1)).unwrap();
        assert_eq!(c, again);

        let small = toy(60, &[&[1, 2, 3, 4, 5]]);
        let c = build_eval_candidates(&small, 0, &mut SimRng::seed_from_u64(1)).unwrap();
        assert!(c.truncated);
        assert_eq!(c.negatives, (6..=60).collect::<Vec<_>>());
    }

    proptest::proptest! {
        #[test]
        fn split_partitions_records(items in proptest::collection::hash_set(1u32..200, 3..40), seed in 0u64..1000) {
            let mut items: Vec<u32> = items.into_iter().collect();
            let mut rng = SimRng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            items.shuffle(&mut rng);
            let ds = toy(200, &[&items]);
            let u = ds.user(0);
            let mut parts = u.train.clone();
            parts.push(u.validation);
            parts.push(u.test);
            let union: HashSet<u32> = parts.iter().copied().collect();
            proptest::prop_assert_eq!(union.len(), parts.len());
            proptest::prop_assert_eq!(union, items.iter().copied().collect::<HashSet<u32>>());
        }
    }
}
