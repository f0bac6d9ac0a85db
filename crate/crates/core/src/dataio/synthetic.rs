//! Planted-interest corpus for desk-scale experiments.
//!
//! Items are partitioned into equal clusters, and consecutive clusters form
//! coarse groups. Each user is assigned `interests_per_user` clusters and
//! emits a sequence in bursts: the active interest persists and switches to
//! another of the user's interests with probability `switch_prob` per step.
//! An interaction draws from the active cluster, or with probability
//! `coarse_rate` from the whole group around it. Within the training part of
//! each sequence a fraction `noise_rate` of interactions are uniform over
//! all items; validation and test targets always come from the user's
//! interests.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{push_user, DatasetSplit, Vocabulary};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub interests_per_user: usize,
    pub seq_len: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub num_clusters: usize,
    /// Clusters per coarse group; 1 disables grouping.
    pub group_size: usize,
    pub coarse_rate: f64,
    pub switch_prob: f64,
    /// Chance that, while the active cluster is unchanged, the next item is
    /// the cyclic successor of the previous one inside the cluster. This
    /// plants an order pattern that a set-based aggregator cannot see.
    pub successor_rate: f64,
    pub capacity: usize,
}

impl SyntheticConfig {
    /// Defaults around the four required knobs: clusters of ten items, no
    /// grouping, switching every few steps, capacity equal to the sequence.
    pub fn new(
        num_users: usize,
        num_items: usize,
        interests_per_user: usize,
        seq_len: usize,
        noise_rate: f64,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            num_users,
            num_items,
            interests_per_user,
            seq_len,
            noise_rate,
            seed,
            num_clusters: (num_items / 10).max(1),
            group_size: 1,
            coarse_rate: 0.0,
            switch_prob: 0.3,
            successor_rate: 0.0,
            capacity: seq_len,
        }
    }
}

/// Ground truth behind a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedStructure {
    /// Cluster of each item index; entry 0 belongs to padding and is unused.
    pub item_cluster: Vec<usize>,
    pub cluster_group: Vec<usize>,
    /// Clusters assigned to each user.
    pub user_clusters: Vec<Vec<usize>>,
    /// Cluster each interaction was drawn from (`None` for noise), per user.
    pub sources: Vec<Vec<Option<usize>>>,
}

fn cluster_items(c: usize, clusters: usize, items: usize) -> std::ops::Range<u32> {
    let lo = c * items / clusters;
    let hi = (c + 1) * items / clusters;
    (lo as u32 + 1)..(hi as u32 + 1)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetSplit> {
    let SyntheticConfig {
        num_users,
        num_items,
        interests_per_user,
        seq_len,
        noise_rate,
        seed,
        num_clusters,
        group_size,
        coarse_rate,
        switch_prob,
        successor_rate,
        capacity,
    } = *cfg;
    if num_clusters == 0 || num_clusters > num_items {
        return Err(Error::InvalidArgument(format!(
            "{num_clusters} clusters cannot partition {num_items} items"
        )));
    }
    if interests_per_user == 0 || interests_per_user > num_clusters {
        return Err(Error::InvalidArgument(format!(
            "cannot assign {interests_per_user} of {num_clusters} clusters per user"
        )));
    }
    if !(0.0..1.0).contains(&noise_rate) || !(0.0..=1.0).contains(&coarse_rate) || !(0.0..=1.0).contains(&switch_prob)
        || !(0.0..=1.0).contains(&successor_rate)
    {
        return Err(Error::InvalidArgument("rates must lie in [0, 1) for noise and [0, 1] otherwise".into()));
    }
    if num_users == 0 || seq_len < 2 || capacity == 0 || group_size == 0 {
        return Err(Error::InvalidArgument(
            "need users, sequences of at least two items, capacity and group size".into(),
        ));
    }
    let ratios = (7, 1, 2);
    let train_end = seq_len * 7 / 10;

    let item_cluster: Vec<usize> = std::iter::once(usize::MAX)
        .chain((0..num_items).map(|i| i * num_clusters / num_items))
        .collect();
    let cluster_group: Vec<usize> = (0..num_clusters).map(|c| c / group_size).collect();
    let group_members = |g: usize| -> Vec<usize> { (0..num_clusters).filter(|&c| cluster_group[c] == g).collect() };

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        vocab: Vocabulary {
            users: (0..num_users).map(|u| format!("u{u}")).collect(),
            items: (1..=num_items).map(|i| format!("i{i}")).collect(),
        },
        capacity,
        padding_index: crate::model::PADDING,
        planted: None,
    };
    let mut user_clusters = Vec::with_capacity(num_users);
    let mut sources = Vec::with_capacity(num_users);
    let all: Vec<usize> = (0..num_clusters).collect();
    for u in 0..num_users {
        let mut rng = seeding::rng(seed, &[0x5e9, u as u64]);
        let mine: Vec<usize> = all.choose_multiple(&mut rng, interests_per_user).copied().collect();
        let mut active = rng.gen_range(0..interests_per_user);
        let mut items = Vec::with_capacity(seq_len);
        let mut src = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            if t > 0 && interests_per_user > 1 && rng.gen_bool(switch_prob) {
                let step = rng.gen_range(1..interests_per_user);
                active = (active + step) % interests_per_user;
            }
            if t < train_end && rng.gen_bool(noise_rate) {
                items.push(rng.gen_range(1..=num_items as u32));
                src.push(None);
                continue;
            }
            let mut cluster = mine[active];
            if group_size > 1 && rng.gen_bool(coarse_rate) {
                cluster = *group_members(cluster_group[cluster]).choose(&mut rng).expect("non-empty group");
            }
            let range = cluster_items(cluster, num_clusters, num_items);
            let item = match (items.last(), src.last()) {
                (Some(&prev), Some(&Some(c))) if c == cluster && successor_rate > 0.0 && rng.gen_bool(successor_rate) => {
                    if prev + 1 < range.end {
                        prev + 1
                    } else {
                        range.start
                    }
                }
                _ => rng.gen_range(range),
            };
            items.push(item);
            src.push(Some(cluster));
        }
        let stamps: Vec<i64> = (0..seq_len as i64).collect();
        push_user(&mut split, u as u32, &items, Some(&stamps), ratios, 10);
        user_clusters.push(mine);
        sources.push(src);
    }
    split.planted = Some(PlantedStructure {
        item_cluster,
        cluster_group,
        user_clusters,
        sources,
    });
    Ok(split)
}
