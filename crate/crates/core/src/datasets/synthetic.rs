//! Synthetic corpus with a known category → subcategory → item hierarchy
//! and sticky category sessions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{InteractionDataset, ItemEmbeddings};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub n_subcategories_per_cat: usize,
    pub n_items: usize,
    pub embed_dim: usize,
    pub n_users: usize,
    /// Inclusive `[min, max]` sequence length.
    pub seq_len_range: [usize; 2],
    /// Probability of staying in the current category at each step.
    pub category_markov_stickiness: f64,
    /// Per-item Gaussian noise around its subcategory centre.
    pub noise_scale: f64,
    /// Spread of category centres.
    pub category_scale: f64,
    /// Spread of subcategory offsets around their category centre.
    pub subcategory_scale: f64,
    /// Zipf exponent of within-category item popularity.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_categories: 8,
            n_subcategories_per_cat: 8,
            n_items: 2048,
            embed_dim: 64,
            n_users: 5000,
            seq_len_range: [10, 20],
            category_markov_stickiness: 0.8,
            noise_scale: 0.1,
            category_scale: 1.0,
            subcategory_scale: 0.4,
            popularity_exponent: 0.8,
            seed: 2025,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let leaves = self.n_categories * self.n_subcategories_per_cat;
        if self.n_categories == 0 || self.n_subcategories_per_cat == 0 {
            return bad("need at least one category and subcategory".into());
        }
        if self.n_items < leaves {
            return bad(format!(
                "n_items {} < n_categories x n_subcategories_per_cat = {leaves}",
                self.n_items
            ));
        }
        if self.embed_dim == 0 || self.n_users == 0 {
            return bad("embed_dim and n_users must be positive".into());
        }
        let [lo, hi] = self.seq_len_range;
        if lo == 0 || lo > hi {
            return bad(format!("invalid seq_len_range [{lo}, {hi}]"));
        }
        if !(0.0..=1.0).contains(&self.category_markov_stickiness) {
            return bad("category_markov_stickiness must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("category_scale", self.category_scale),
            ("subcategory_scale", self.subcategory_scale),
            ("popularity_exponent", self.popularity_exponent),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub item_id: String,
    pub category: usize,
    pub subcategory: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub items: ItemEmbeddings,
    pub interactions: InteractionDataset,
    pub truth: Vec<TruthRecord>,
}

impl SyntheticCorpus {
    /// Writes `items.jsonl`, `interactions.jsonl` and `truth.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        super::write_items(&dir.join("items.jsonl"), &self.items)?;
        super::write_interactions(&dir.join("interactions.jsonl"), &self.interactions)?;
        let mut w = BufWriter::new(File::create(dir.join("truth.jsonl"))?);
        for t in &self.truth {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    let n = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| n.sample(rng)).collect()
}

/// Item `i` belongs to leaf `i mod (cats * subcats)`; its embedding is the
/// category centre plus the subcategory offset plus noise. Each user walks
/// a Markov chain over categories (stay with probability `stickiness`,
/// otherwise jump uniformly to another category) and draws items within
/// the current category by Zipf popularity.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (nc, ns, d) = (spec.n_categories, spec.n_subcategories_per_cat, spec.embed_dim);

    let cat_centres: Vec<Vec<f64>> = (0..nc)
        .map(|_| gaussian_vec(&mut rng, d, spec.category_scale))
        .collect();
    let sub_offsets: Vec<Vec<f64>> = (0..nc * ns)
        .map(|_| gaussian_vec(&mut rng, d, spec.subcategory_scale))
        .collect();

    let width = (spec.n_items - 1).to_string().len().max(4);
    let mut ids = Vec::with_capacity(spec.n_items);
    let mut values = Vec::with_capacity(spec.n_items * d);
    let mut truth = Vec::with_capacity(spec.n_items);
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for i in 0..spec.n_items {
        let leaf = i % (nc * ns);
        let (cat, sub) = (leaf / ns, leaf % ns);
        let noise = gaussian_vec(&mut rng, d, spec.noise_scale);
        for k in 0..d {
            values.push((cat_centres[cat][k] + sub_offsets[leaf][k] + noise[k]) as f32);
        }
        let id = format!("i{i:0width$}");
        truth.push(TruthRecord {
            item_id: id.clone(),
            category: cat,
            subcategory: sub,
        });
        ids.push(id);
        by_category[cat].push(i);
    }

    // Random popularity ranks per category.
    let samplers: Vec<(Vec<usize>, WeightedIndex<f64>)> = by_category
        .into_iter()
        .map(|mut members| {
            members.shuffle(&mut rng);
            let w: Vec<f64> = (0..members.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(spec.popularity_exponent))
                .collect();
            (members, WeightedIndex::new(w).expect("positive weights"))
        })
        .collect();

    let uwidth = (spec.n_users - 1).to_string().len().max(5);
    let [lo, hi] = spec.seq_len_range;
    let mut users = BTreeMap::new();
    for u in 0..spec.n_users {
        let len = rng.random_range(lo..=hi);
        let mut cat = rng.random_range(0..nc);
        let mut seq = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 && nc > 1 && rng.random::<f64>() >= spec.category_markov_stickiness {
                let jump = rng.random_range(0..nc - 1);
                cat = if jump >= cat { jump + 1 } else { jump };
            }
            let (members, sampler) = &samplers[cat];
            seq.push(ids[members[sampler.sample(&mut rng)]].clone());
        }
        users.insert(format!("u{u:0uwidth$}"), seq);
    }

    Ok(SyntheticCorpus {
        items: ItemEmbeddings::new(ids, d, values)?,
        interactions: InteractionDataset::new(users),
        truth,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_categories: 3,
            n_subcategories_per_cat: 2,
            n_items: 30,
            embed_dim: 4,
            n_users: 40,
            seq_len_range: [5, 8],
            ..Default::default()
        }
    }

    #[test]
    fn full_stickiness_keeps_one_category() {
        let spec = SyntheticSpec {
            category_markov_stickiness: 1.0,
            ..small()
        };
        let c = generate_synthetic(&spec).unwrap();
        let cat: HashMap<&str, usize> = c.truth.iter().map(|t| (t.item_id.as_str(), t.category)).collect();
        for seq in c.interactions.users.values() {
            assert!(seq.iter().all(|i| cat[i.as_str()] == cat[seq[0].as_str()]));
        }
    }

    #[test]
    fn zero_noise_makes_subcategory_twins() {
        let spec = SyntheticSpec {
            noise_scale: 0.0,
            ..small()
        };
        let c = generate_synthetic(&spec).unwrap();
        // items 0 and 6 share leaf 0
        assert_eq!(c.items.row(0), c.items.row(6));
        assert_ne!(c.items.row(0), c.items.row(1));
    }

    #[test]
    fn reproducible_and_validated() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.interactions, b.interactions);
        let bad = SyntheticSpec { n_items: 5, ..small() };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn lengths_and_counts() {
        let c = generate_synthetic(&small()).unwrap();
        assert_eq!(c.items.len(), 30);
        assert_eq!(c.interactions.users.len(), 40);
        assert!(c.interactions.users.values().all(|s| (5..=8).contains(&s.len())));
    }
}
