//! Ranking metrics over sampled negatives.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_negatives, DatasetSplit, InteractionSequence};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::predictor::{activated_level, Pooling};
use crate::seeding;

/// The positive's score and its negatives' scores for one test instance.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedInstance {
    pub user_index: u32,
    pub positive_score: f64,
    pub negative_scores: Vec<f64>,
}

impl RankedInstance {
    /// 1-based rank of the positive; it loses every tie.
    pub fn rank(&self) -> usize {
        1 + self
            .negative_scores
            .iter()
            .filter(|&&s| s >= self.positive_score)
            .count()
    }
}

/// `(ndcg, hit, mrr)` at cutoff `k`.
pub fn rank_metrics(instance: &RankedInstance, k: usize) -> (f64, f64, f64) {
    let r = instance.rank();
    if r > k {
        return (0.0, 0.0, 0.0);
    }
    (1.0 / ((r + 1) as f64).log2(), 1.0, 1.0 / r as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaucWeighting {
    /// Users weighted by their number of instances.
    #[default]
    Instances,
    Uniform,
}

impl FromStr for GaucWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instances" => Ok(GaucWeighting::Instances),
            "uniform" => Ok(GaucWeighting::Uniform),
            other => Err(Error::Config(format!("unknown GAUC weighting `{other}`"))),
        }
    }
}

impl fmt::Display for GaucWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GaucWeighting::Instances => "instances",
            GaucWeighting::Uniform => "uniform",
        })
    }
}

/// Pairwise counts `(wins + ties / 2, pairs)` of one instance.
fn pair_counts(inst: &RankedInstance) -> (f64, usize) {
    let wins: f64 = inst
        .negative_scores
        .iter()
        .map(|&n| match inst.positive_score.partial_cmp(&n) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    (wins, inst.negative_scores.len())
}

/// Per-user AUC over all of the user's (positive, negative) pairs.
fn user_aucs(instances: &[RankedInstance]) -> Result<BTreeMap<u32, (f64, usize)>> {
    let mut acc: BTreeMap<u32, (f64, usize, usize)> = BTreeMap::new();
    for inst in instances {
        let (w, p) = pair_counts(inst);
        let e = acc.entry(inst.user_index).or_default();
        e.0 += w;
        e.1 += p;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(u, (w, p, n))| {
            if p == 0 {
                Err(Error::InvalidArgument(format!("user {u} has no negatives")))
            } else {
                Ok((u, (w / p as f64, n)))
            }
        })
        .collect()
}

pub fn gauc(instances: &[RankedInstance], weighting: GaucWeighting) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("no instances to evaluate".into()));
    }
    let per_user = user_aucs(instances)?;
    let (num, den) = per_user.values().fold((0.0, 0.0), |(num, den), &(auc, n)| {
        let w = match weighting {
            GaucWeighting::Instances => n as f64,
            GaucWeighting::Uniform => 1.0,
        };
        (num + w * auc, den + w)
    });
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub instances: usize,
    pub auc: f64,
    pub ndcg: f64,
    pub hit: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gauc: f64,
    pub ndcg_at_k: f64,
    pub hit_at_k: f64,
    pub mrr_at_k: f64,
    pub k: usize,
    pub num_instances: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_user: Option<Vec<UserMetrics>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Writes the per-user table, if present, as TSV.
    pub fn write_per_user_tsv(&self, path: &Path) -> Result<()> {
        let Some(rows) = &self.per_user else {
            return Ok(());
        };
        let mut out = String::from("user\tinstances\tauc\tndcg\thit\tmrr\n");
        for r in rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.user, r.instances, r.auc, r.ndcg, r.hit, r.mrr
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Aggregates instances into a report; metrics are means over instances.
pub fn summarize(instances: &[RankedInstance], k: usize, weighting: GaucWeighting, per_user: bool) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let g = gauc(instances, weighting)?;
    let n = instances.len() as f64;
    let (mut ndcg, mut hit, mut mrr) = (0.0, 0.0, 0.0);
    let mut users: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for inst in instances {
        let (a, b, c) = rank_metrics(inst, k);
        ndcg += a;
        hit += b;
        mrr += c;
        let e = users.entry(inst.user_index).or_default();
        e.0 += a;
        e.1 += b;
        e.2 += c;
    }
    let per_user = per_user.then(|| {
        let aucs = user_aucs(instances).expect("checked by gauc");
        users
            .iter()
            .map(|(&u, &(a, b, c))| {
                let (auc, cnt) = aucs[&u];
                let m = cnt as f64;
                UserMetrics {
                    user: u,
                    instances: cnt,
                    auc,
                    ndcg: a / m,
                    hit: b / m,
                    mrr: c / m,
                }
            })
            .collect()
    });
    Ok(MetricsReport {
        gauc: g,
        ndcg_at_k: ndcg / n,
        hit_at_k: hit / n,
        mrr_at_k: mrr / n,
        k,
        num_instances: instances.len(),
        per_user,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Train,
    Validation,
    Test,
}

impl Segment {
    pub fn of(self, split: &DatasetSplit) -> &[InteractionSequence] {
        match self {
            Segment::Train => &split.train,
            Segment::Validation => &split.validation,
            Segment::Test => &split.test,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Segment::Train => 1,
            Segment::Validation => 2,
            Segment::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    /// Sampled negatives per instance; `None` ranks against every item the
    /// user never interacted with.
    pub negatives: Option<usize>,
    pub seed: u64,
    /// Overrides the model's configured pooling.
    pub pooling: Option<Pooling>,
    pub weighting: GaucWeighting,
    pub per_user: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            negatives: Some(1000),
            seed: 0,
            pooling: None,
            weighting: GaucWeighting::Instances,
            per_user: false,
        }
    }
}

/// Candidate lists `[target, negatives..]` for each instance of a segment,
/// drawn from a stream that depends only on the seed and instance position.
pub fn candidate_lists(split: &DatasetSplit, segment: Segment, cfg: &EvalConfig) -> Result<Vec<Vec<u32>>> {
    let history = split.user_items();
    let m = split.vocab.num_items();
    Segment::of(segment, split)
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let exclude = &history[s.user_index as usize];
            let count = cfg.negatives.unwrap_or(m - exclude.len());
            let seed = seeding::derive(cfg.seed, &[segment.tag(), i as u64]);
            let mut c = Vec::with_capacity(count + 1);
            c.push(s.target_item);
            c.extend(sample_negatives(m, count, exclude, seed)?);
            Ok(c)
        })
        .collect()
}

/// Scores segment instances with an arbitrary scorer over candidate lists.
pub fn rank_with<F>(split: &DatasetSplit, segment: Segment, cfg: &EvalConfig, scorer: F) -> Result<Vec<RankedInstance>>
where
    F: Fn(usize, &InteractionSequence, &[u32]) -> Result<Vec<f64>> + Sync,
{
    let seqs = Segment::of(segment, split);
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("segment has no instances".into()));
    }
    let lists = candidate_lists(split, segment, cfg)?;
    seqs.par_iter()
        .zip(lists.par_iter())
        .enumerate()
        .map(|(i, (s, cands))| {
            let scores = scorer(i, s, cands)?;
            if scores.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("ranking score".into()));
            }
            Ok(RankedInstance {
                user_index: s.user_index,
                positive_score: scores[0],
                negative_scores: scores[1..].to_vec(),
            })
        })
        .collect()
}

/// Seed for the agreement scores used at inference.
pub fn inference_agreement_seed(seed: u64) -> u64 {
    seeding::derive(seed, &[0xa9])
}

pub fn model_instances(model: &Model, split: &DatasetSplit, segment: Segment, cfg: &EvalConfig) -> Result<Vec<RankedInstance>> {
    let pooling = cfg.pooling.unwrap_or(model.config.wiring().pooling);
    let agreement = inference_agreement_seed(cfg.seed);
    rank_with(split, segment, cfg, |_, s, cands| {
        let set = model.interests(s.user_index as usize, &s.item_indices, s.valid_length as usize, agreement)?;
        Ok(model
            .score_pooled(&set, cands, pooling)?
            .into_iter()
            .map(|p| p.fused_score)
            .collect())
    })
}

pub fn evaluate(model: &Model, split: &DatasetSplit, segment: Segment, cfg: &EvalConfig) -> Result<MetricsReport> {
    let instances = model_instances(model, split, segment, cfg)?;
    summarize(&instances, cfg.k, cfg.weighting, cfg.per_user)
}

/// Item frequencies over training targets and histories.
pub fn popularity(split: &DatasetSplit) -> Vec<f64> {
    let mut counts = vec![0.0; split.vocab.num_items() + 1];
    let mut seen_history = vec![false; split.vocab.num_users()];
    for s in &split.train {
        counts[s.target_item as usize] += 1.0;
        // Each user's earliest window contributes its history once.
        if !seen_history[s.user_index as usize] {
            seen_history[s.user_index as usize] = true;
            for &i in s.history() {
                counts[i as usize] += 1.0;
            }
        }
    }
    counts
}

pub fn evaluate_popularity(split: &DatasetSplit, segment: Segment, cfg: &EvalConfig) -> Result<MetricsReport> {
    let pop = popularity(split);
    let instances = rank_with(split, segment, cfg, |_, _, cands| Ok(cands.iter().map(|&c| pop[c as usize]).collect()))?;
    summarize(&instances, cfg.k, cfg.weighting, cfg.per_user)
}

pub fn evaluate_random(split: &DatasetSplit, segment: Segment, cfg: &EvalConfig) -> Result<MetricsReport> {
    let instances = rank_with(split, segment, cfg, |i, _, cands| {
        let mut rng = seeding::rng(cfg.seed, &[0x7a4d, i as u64]);
        Ok(cands.iter().map(|_| rng.gen::<f64>()).collect())
    })?;
    summarize(&instances, cfg.k, cfg.weighting, cfg.per_user)
}

/// Activated-level counts for the positive of each instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelHistogram {
    pub levels: usize,
    pub aggregate: Vec<usize>,
    /// `(user, counts)` for users with at least one instance.
    pub per_user: Vec<(u32, Vec<usize>)>,
}

impl LevelHistogram {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("user");
        for l in 0..self.levels {
            out.push_str(&format!("\tlevel{l}"));
        }
        out.push('\n');
        let mut row = |name: String, counts: &[usize]| {
            out.push_str(&name);
            for c in counts {
                out.push_str(&format!("\t{c}"));
            }
            out.push('\n');
        };
        for (u, counts) in &self.per_user {
            row(u.to_string(), counts);
        }
        row("all".into(), &self.aggregate);
        out
    }
}

pub fn level_histogram(model: &Model, split: &DatasetSplit, segment: Segment, seed: u64) -> Result<LevelHistogram> {
    let levels = model.config.layers + 1;
    let agreement = inference_agreement_seed(seed);
    let seqs = Segment::of(segment, split);
    let activated: Vec<(u32, usize)> = seqs
        .par_iter()
        .map(|s| {
            let set = model.interests(s.user_index as usize, &s.item_indices, s.valid_length as usize, agreement)?;
            let out = model.score_pooled(&set, &[s.target_item], Pooling::Max)?;
            Ok((s.user_index, activated_level(&out[0])))
        })
        .collect::<Result<_>>()?;
    let mut per_user: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut aggregate = vec![0; levels];
    for (u, l) in activated {
        per_user.entry(u).or_insert_with(|| vec![0; levels])[l] += 1;
        aggregate[l] += 1;
    }
    Ok(LevelHistogram {
        levels,
        aggregate,
        per_user: per_user.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(user: u32, pos: f64, negs: &[f64]) -> RankedInstance {
        RankedInstance {
            user_index: user,
            positive_score: pos,
            negative_scores: negs.to_vec(),
        }
    }

    #[test]
    fn rank_examples() {
        let negs: Vec<f64> = (0..10).map(|i| i as f64 / 100.0).collect();
        assert_eq!(rank_metrics(&inst(0, 1.0, &negs), 5), (1.0, 1.0, 1.0));
        let mut two_above = negs.clone();
        two_above[0] = 2.0;
        two_above[1] = 3.0;
        let (n, h, m) = rank_metrics(&inst(0, 1.0, &two_above), 5);
        assert_eq!((n, h), (0.5, 1.0));
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        let six_above: Vec<f64> = (0..10).map(|i| if i < 6 { 5.0 } else { 0.0 }).collect();
        assert_eq!(rank_metrics(&inst(0, 1.0, &six_above), 5), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ties_are_pessimistic() {
        let i = inst(0, 0.3, &[0.3; 1000]);
        assert_eq!(i.rank(), 1001);
        assert_eq!(rank_metrics(&i, 5), (0.0, 0.0, 0.0));
        assert_eq!(gauc(&[i], GaucWeighting::Instances).unwrap(), 0.5);
    }

    #[test]
    fn gauc_examples() {
        let all_above = vec![inst(0, 1.0, &[0.0, 0.5]), inst(1, 2.0, &[1.0])];
        assert_eq!(gauc(&all_above, GaucWeighting::Instances).unwrap(), 1.0);
        assert!(gauc(&[inst(0, 1.0, &[])], GaucWeighting::Instances).is_err());
    }

    fn oracle_rank(i: &RankedInstance) -> usize {
        // Sort everything descending, positive placed after equal negatives.
        let mut all: Vec<(f64, bool)> = i.negative_scores.iter().map(|&s| (s, false)).collect();
        all.push((i.positive_score, true));
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        all.iter().position(|x| x.1).unwrap() + 1
    }

    fn oracle_metrics(i: &RankedInstance, k: usize) -> (f64, f64, f64) {
        let r = oracle_rank(i);
        let mut hit = 0.0;
        let mut ndcg = 0.0;
        let mut mrr = 0.0;
        for pos in 1..=k {
            if pos == r {
                hit = 1.0;
                ndcg = 1.0 / ((pos + 1) as f64).log2();
                mrr = 1.0 / pos as f64;
            }
        }
        (ndcg, hit, mrr)
    }

    fn oracle_gauc(instances: &[RankedInstance], weighting: GaucWeighting) -> f64 {
        let mut users: Vec<u32> = instances.iter().map(|i| i.user_index).collect();
        users.sort_unstable();
        users.dedup();
        let mut num = 0.0;
        let mut den = 0.0;
        for u in users {
            let mine: Vec<&RankedInstance> = instances.iter().filter(|i| i.user_index == u).collect();
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in &mine {
                for &n in &i.negative_scores {
                    pairs += 1.0;
                    if i.positive_score > n {
                        wins += 1.0;
                    } else if i.positive_score == n {
                        wins += 0.5;
                    }
                }
            }
            let w = match weighting {
                GaucWeighting::Instances => mine.len() as f64,
                GaucWeighting::Uniform => 1.0,
            };
            num += w * wins / pairs;
            den += w;
        }
        num / den
    }

    fn random_instances(rng: &mut ChaCha8Rng, n: usize, users: u32) -> Vec<RankedInstance> {
        (0..n)
            .map(|_| {
                // Coarse grid so ties occur.
                let pos = rng.gen_range(0..40) as f64 / 8.0;
                let count = rng.gen_range(1..30);
                let negs: Vec<f64> = (0..count).map(|_| rng.gen_range(0..40) as f64 / 8.0).collect();
                inst(rng.gen_range(0..users), pos, &negs)
            })
            .collect()
    }

    #[test]
    fn rank_metrics_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in random_instances(&mut rng, 10_000, 50) {
            for k in [1, 5, 10] {
                assert_eq!(rank_metrics(&i, k), oracle_metrics(&i, k));
            }
        }
    }

    #[test]
    fn gauc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let five_users = random_instances(&mut rng, 40, 5);
        for w in [GaucWeighting::Instances, GaucWeighting::Uniform] {
            assert!((gauc(&five_users, w).unwrap() - oracle_gauc(&five_users, w)).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_instances(&mut rng, 2000, 30);
        let cubic = |x: f64| x * x * x + 2.0 * x - 7.0;
        let mapped: Vec<RankedInstance> = base
            .iter()
            .map(|i| inst(i.user_index, cubic(i.positive_score), &i.negative_scores.iter().map(|&x| cubic(x)).collect::<Vec<_>>()))
            .collect();
        let a = summarize(&base, 5, GaucWeighting::Instances, true).unwrap();
        let b = summarize(&mapped, 5, GaucWeighting::Instances, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_user_shift_leaves_gauc_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_instances(&mut rng, 500, 10);
        let shifted: Vec<RankedInstance> = base
            .iter()
            .map(|i| {
                let s = i.user_index as f64 * 64.0;
                inst(i.user_index, i.positive_score + s, &i.negative_scores.iter().map(|x| x + s).collect::<Vec<_>>())
            })
            .collect();
        assert_eq!(
            gauc(&base, GaucWeighting::Instances).unwrap(),
            gauc(&shifted, GaucWeighting::Instances).unwrap()
        );
    }

    #[test]
    fn report_dominance_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = summarize(&random_instances(&mut rng, 3000, 40), 5, GaucWeighting::Uniform, false).unwrap();
        for v in [r.gauc, r.ndcg_at_k, r.hit_at_k, r.mrr_at_k] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(r.hit_at_k >= r.mrr_at_k && r.ndcg_at_k >= r.mrr_at_k);
        let json = r.to_json();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
