//! Item embeddings and interaction data: ingestion, k-core filtering,
//! leave-one-out splitting and a synthetic corpus generator.

mod ingest;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};

pub use ingest::{ingest_interactions, ingest_items, write_interactions, write_items, ItemEmbeddings};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec, TruthRecord};

use crate::error::{Error, Result};

/// Minimum interactions per user and per item after filtering.
pub const CORE: usize = 5;

/// Chronologically ordered item sequences per user.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionDataset {
    pub users: BTreeMap<String, Vec<String>>,
}

impl InteractionDataset {
    pub fn new(users: BTreeMap<String, Vec<String>>) -> Self {
        InteractionDataset { users }
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.users.values().flatten().map(String::as_str).collect()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }
}

/// Iterated k-core with k = 5: alternately drops items and users with fewer
/// than five interactions until nothing changes.
pub fn filter_5core(data: &InteractionDataset) -> Result<InteractionDataset> {
    let mut users = data.users.clone();
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for item in users.values().flatten() {
            *counts.entry(item.as_str()).or_default() += 1;
        }
        let rare: BTreeSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < CORE)
            .map(|(i, _)| i.to_string())
            .collect();
        let before = users.len();
        if !rare.is_empty() {
            for seq in users.values_mut() {
                seq.retain(|i| !rare.contains(i));
            }
        }
        users.retain(|_, seq| seq.len() >= CORE);
        if rare.is_empty() && users.len() == before {
            break;
        }
    }
    if users.is_empty() {
        return Err(Error::Data("5-core filtering left no interactions".into()));
    }
    Ok(InteractionDataset { users })
}

/// One next-item prediction: `history` (chronological) → `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: String,
    pub history: Vec<String>,
    pub target: String,
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Last item → test, second-last → validation, every earlier position
/// (except the first, which has no history) → a training example.
pub fn leave_one_out_split(data: &InteractionDataset) -> Result<Splits> {
    let mut out = Splits::default();
    for (user, seq) in &data.users {
        let n = seq.len();
        if n < 3 {
            return Err(Error::Data(format!(
                "user {user} has {n} interactions; leave-one-out needs at least 3"
            )));
        }
        let example = |t: usize| Example {
            user: user.clone(),
            history: seq[..t].to_vec(),
            target: seq[t].clone(),
        };
        out.train.extend((1..n - 2).map(example));
        out.valid.push(example(n - 2));
        out.test.push(example(n - 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ds(rows: &[(&str, &[&str])]) -> InteractionDataset {
        InteractionDataset::new(
            rows.iter()
                .map(|(u, s)| (u.to_string(), s.iter().map(|x| x.to_string()).collect()))
                .collect(),
        )
    }

    /// Independent fixpoint: repeatedly delete the single worst offender.
    fn core_oracle(data: &InteractionDataset) -> BTreeMap<String, Vec<String>> {
        let mut users = data.users.clone();
        loop {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for i in users.values().flatten() {
                *counts.entry(i.clone()).or_default() += 1;
            }
            if let Some((item, _)) = counts.iter().find(|(_, &c)| c < CORE) {
                let item = item.clone();
                for s in users.values_mut() {
                    s.retain(|x| *x != item);
                }
                continue;
            }
            if let Some(u) = users.iter().find(|(_, s)| s.len() < CORE).map(|(u, _)| u.clone()) {
                users.remove(&u);
                continue;
            }
            return users;
        }
    }

    #[test]
    fn already_core_is_unchanged() {
        let items: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let refs: Vec<&str> = items.iter().map(String::as_str).collect();
        let rows: Vec<(&str, &[&str])> = ["a", "b", "c", "d", "e"].iter().map(|u| (*u, &refs[..])).collect();
        let d = ds(&rows);
        assert_eq!(filter_5core(&d).unwrap(), d);
    }

    #[test]
    fn cascading_removal_matches_oracle() {
        // Item z appears 5 times, once in the short user; dropping that user
        // drops z below 5, which in turn shortens user e below 5.
        let full = ["p", "q", "r", "s", "t"];
        let d = ds(&[
            ("a", &["p", "q", "r", "s", "t", "z"]),
            ("b", &["p", "q", "r", "s", "t", "z"]),
            ("c", &["p", "q", "r", "s", "t", "z"]),
            ("d", &["p", "q", "r", "s", "t"]),
            ("e", &["p", "q", "r", "z"]),
            ("short", &["z", "w"]),
            ("f", &full),
        ]);
        let got = filter_5core(&d).unwrap();
        assert_eq!(got.users, core_oracle(&d));
        assert!(!got.users.contains_key("e"));
        assert!(got.items().iter().all(|&i| i != "z"));
    }

    #[test]
    fn nothing_survives() {
        let d = ds(&[("a", &["x", "y"]), ("b", &["x"])]);
        assert!(filter_5core(&d).is_err());
    }

    #[test]
    fn split_rule() {
        let d = ds(&[("u", &["a", "b", "c", "d", "e"])]);
        let s = leave_one_out_split(&d).unwrap();
        assert_eq!(s.test[0].target, "e");
        assert_eq!(s.test[0].history, vec!["a", "b", "c", "d"]);
        assert_eq!(s.valid[0].target, "d");
        assert_eq!(s.valid[0].history, vec!["a", "b", "c"]);
        let targets: Vec<&str> = s.train.iter().map(|e| e.target.as_str()).collect();
        assert_eq!(targets, vec!["b", "c"]);
        assert!(leave_one_out_split(&ds(&[("u", &["a", "b"])])).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = InteractionDataset> {
        prop::collection::btree_map(
            "u[0-9]{1,2}",
            prop::collection::vec(0u8..12, 0..14).prop_map(|v| v.into_iter().map(|i| format!("i{i}")).collect()),
            1..25,
        )
        .prop_map(InteractionDataset::new)
    }

    proptest! {
        #[test]
        fn five_core_is_idempotent_and_matches_oracle(d in arb_dataset()) {
            match filter_5core(&d) {
                Ok(once) => {
                    prop_assert_eq!(&once.users, &core_oracle(&d));
                    prop_assert_eq!(filter_5core(&once).unwrap(), once);
                }
                Err(_) => prop_assert!(core_oracle(&d).is_empty()),
            }
        }

        #[test]
        fn split_partitions_targets(d in arb_dataset()) {
            let mut d = d;
            d.users.retain(|_, s| s.len() >= 3);
            prop_assume!(!d.users.is_empty());
            let s = leave_one_out_split(&d).unwrap();
            prop_assert_eq!(s.test.len(), d.users.len());
            prop_assert_eq!(s.valid.len(), d.users.len());
            for (u, seq) in &d.users {
                let mut positions: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test)
                    .filter(|e| &e.user == u)
                    .map(|e| e.history.len())
                    .collect();
                positions.sort();
                prop_assert_eq!(positions, (1..seq.len()).collect::<Vec<_>>());
            }
        }
    }
}
