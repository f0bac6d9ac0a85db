//! Model wiring, parameter store and the per-user forward pass.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphconv;
use crate::numerics::{Tape, Tensor, Var};
use crate::predictor::{self, Pooling, PredictionOutput};
use crate::seeding;
use crate::seqcaps::{self, AgreementInit, EncoderKind, EncoderVars, InterestSet};

/// Index of the padding item.
pub const PADDING: u32 = 0;

/// Model variants compared in the ablation grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    Full,
    NoUgcn,
    NoL1,
    NoBilstm,
    NoMaxpool,
    ScnBilstm,
    ScnSumpool,
    ScnSelfatt,
    ScnTransformer,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::Full,
        Ablation::NoUgcn,
        Ablation::NoL1,
        Ablation::NoBilstm,
        Ablation::NoMaxpool,
        Ablation::ScnBilstm,
        Ablation::ScnSumpool,
        Ablation::ScnSelfatt,
        Ablation::ScnTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoUgcn => "no_ugcn",
            Ablation::NoL1 => "no_l1",
            Ablation::NoBilstm => "no_bilstm",
            Ablation::NoMaxpool => "no_maxpool",
            Ablation::ScnBilstm => "scn_bilstm",
            Ablation::ScnSumpool => "scn_sumpool",
            Ablation::ScnSelfatt => "scn_selfatt",
            Ablation::ScnTransformer => "scn_transformer",
        }
    }

    pub fn wiring(self) -> Wiring {
        let full = Wiring {
            graph: true,
            l1: true,
            encoder: EncoderKind::BiLstm,
            aggregator: Aggregator::Capsule,
            pooling: Pooling::Max,
        };
        match self {
            Ablation::Full => full,
            Ablation::NoUgcn => Wiring { graph: false, ..full },
            Ablation::NoL1 => Wiring { l1: false, ..full },
            Ablation::NoBilstm => Wiring {
                encoder: EncoderKind::Disabled,
                ..full
            },
            Ablation::NoMaxpool => Wiring {
                pooling: Pooling::Mean,
                ..full
            },
            Ablation::ScnBilstm => Wiring {
                aggregator: Aggregator::BiLstm,
                ..full
            },
            Ablation::ScnSumpool => Wiring {
                aggregator: Aggregator::SumPool,
                encoder: EncoderKind::Disabled,
                ..full
            },
            Ablation::ScnSelfatt => Wiring {
                aggregator: Aggregator::SelfAttention,
                encoder: EncoderKind::Disabled,
                ..full
            },
            Ablation::ScnTransformer => Wiring {
                encoder: EncoderKind::Transformer,
                ..full
            },
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Per-level interest extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregator {
    /// Sequential capsule routing, `K` interests per level.
    Capsule,
    /// Final states of a bidirectional LSTM, one interest per level.
    BiLstm,
    /// Sum of the level's valid rows, one interest per level.
    SumPool,
    /// The level's rows themselves; the candidate attends over positions.
    SelfAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wiring {
    pub graph: bool,
    pub l1: bool,
    pub encoder: EncoderKind,
    pub aggregator: Aggregator,
    pub pooling: Pooling,
}

/// Parameter initialisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Truncated normal with standard deviation 0.02 for every tensor.
    Normal002,
    /// Truncated normal with standard deviation `1/sqrt(fan_in)`; embeddings
    /// use `1/sqrt(d)` so rows have roughly unit norm.
    #[default]
    FanIn,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal002" => Ok(InitScheme::Normal002),
            "fan_in" => Ok(InitScheme::FanIn),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Normal002 => "normal002",
            InitScheme::FanIn => "fan_in",
        })
    }
}

/// Everything needed to rebuild a model around a parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_users: usize,
    /// Real items; the item table has one extra row for padding.
    pub num_items: usize,
    pub dim: usize,
    pub capacity: usize,
    pub interests: usize,
    pub layers: usize,
    pub tau: usize,
    pub leaky_slope: f64,
    pub ablation: Ablation,
    pub init: InitScheme,
}

impl ModelConfig {
    pub fn wiring(&self) -> Wiring {
        self.ablation.wiring()
    }

    /// Interests per level after the ablation is applied.
    pub fn effective_interests(&self) -> usize {
        match self.wiring().aggregator {
            Aggregator::Capsule => self.interests,
            Aggregator::BiLstm | Aggregator::SumPool => 1,
            Aggregator::SelfAttention => self.capacity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("dim", self.dim),
            ("capacity", self.capacity),
            ("interests", self.interests),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be a non-negative number".into()));
        }
        if self.wiring().encoder == EncoderKind::BiLstm {
            seqcaps::bilstm_hidden(self.dim)?;
        }
        Ok(())
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParameters {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_squares).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EncoderSlots {
    None,
    BiLstm { forward: usize, backward: usize },
    Transformer(usize),
}

/// Positions of each tensor in the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    user: usize,
    item: usize,
    gcn: Option<usize>,
    capsule: Option<(usize, usize)>,
    encoder: EncoderSlots,
}

const LSTM_PARTS: [&str; 3] = ["input", "recurrent", "bias"];
const TRANSFORMER_PARTS: [&str; 5] = ["positions", "query", "key", "value", "output"];

fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| seqcaps::truncated_normal(rng, std)).collect(),
    )
    .expect("shape")
}

/// Tape handles for one user's forward pass.
#[derive(Clone, Debug)]
pub struct UserRecord {
    /// One `K × d` handle per level.
    pub interests: Vec<Var>,
    /// Valid interest rows for the self-attention aggregator.
    pub interest_mask: Option<Vec<bool>>,
    pub levels: Vec<Var>,
    pub adjacency: Option<Var>,
    /// Mean absolute adjacency over valid pairs.
    pub l1: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
    layout: Layout,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let wiring = config.wiring();
        let (n, m, d, k) = (config.num_users, config.num_items, config.dim, config.interests);
        let mut rng = seeding::rng(seed, &[0x1417]);
        let (emb_std, w_std) = match config.init {
            InitScheme::Normal002 => (0.02, 0.02),
            InitScheme::FanIn => (1.0 / (d as f64).sqrt(), 1.0 / (d as f64).sqrt()),
        };
        let mut params = ModelParameters {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let user = params.push("user_table", init_tensor(&mut rng, &[n, d], emb_std));
        let mut items = init_tensor(&mut rng, &[m + 1, d], emb_std);
        items.row_mut(PADDING as usize).fill(0.0);
        let item = params.push("item_table", items);
        let gcn = wiring
            .graph
            .then(|| params.push("gcn_weight", init_tensor(&mut rng, &[d, d], w_std)));
        let capsule = (wiring.aggregator == Aggregator::Capsule).then(|| {
            let a = params.push("capsule_proj", init_tensor(&mut rng, &[k, d, d], w_std));
            let b = params.push("capsule_out_proj", init_tensor(&mut rng, &[k, d, d], w_std));
            (a, b)
        });
        let encoder = match wiring.encoder {
            EncoderKind::Disabled => EncoderSlots::None,
            EncoderKind::BiLstm => {
                let h = seqcaps::bilstm_hidden(d)?;
                let mut dir = |prefix: &str| {
                    let first = params.len();
                    let shapes = [vec![d, 4 * h], vec![h, 4 * h], vec![4 * h]];
                    for (part, shape) in LSTM_PARTS.iter().zip(shapes) {
                        let t = match (config.init, shape.len()) {
                            (InitScheme::Normal002, _) => init_tensor(&mut rng, &shape, 0.02),
                            (InitScheme::FanIn, 1) => Tensor::zeros(&shape),
                            (InitScheme::FanIn, _) => {
                                init_tensor(&mut rng, &shape, 1.0 / (shape[0] as f64).sqrt())
                            }
                        };
                        params.push(&format!("encoder.{prefix}.{part}"), t);
                    }
                    first
                };
                let forward = dir("forward");
                let backward = dir("backward");
                EncoderSlots::BiLstm { forward, backward }
            }
            EncoderKind::Transformer => {
                let first = params.len();
                for part in TRANSFORMER_PARTS {
                    let shape = if part == "positions" {
                        vec![config.capacity, d]
                    } else {
                        vec![d, d]
                    };
                    let std = if part == "positions" { emb_std } else { w_std };
                    params.push(&format!("encoder.{part}"), init_tensor(&mut rng, &shape, std));
                }
                EncoderSlots::Transformer(first)
            }
        };
        let layout = Layout {
            user,
            item,
            gcn,
            capsule,
            encoder,
        };
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameters; names and shapes must match what
    /// [`Model::new`] would allocate for `config`.
    pub fn from_parameters(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        let template = Model::new(config.clone(), 0)?;
        if template.params.names != params.names {
            return Err(Error::Checkpoint(format!(
                "parameter names {:?} do not match the configuration (expected {:?})",
                params.names, template.params.names
            )));
        }
        for ((name, a), b) in template.params.iter().zip(&params.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        if params.tensors[template.layout.item].row(PADDING as usize).iter().any(|&v| v != 0.0) {
            return Err(Error::Checkpoint("padding embedding is not zero".into()));
        }
        Ok(Model {
            layout: template.layout,
            config,
            params,
        })
    }

    pub fn item_table(&self) -> &Tensor {
        &self.params.tensors[self.layout.item]
    }

    pub fn item_param(&self) -> usize {
        self.layout.item
    }

    pub fn item_embedding(&self, item: u32) -> Tensor {
        Tensor::vector(self.item_table().row(item as usize).to_vec())
    }

    fn record_encoder(&self, tape: &mut Tape) -> EncoderVars {
        let p = &self.params.tensors;
        match self.layout.encoder {
            EncoderSlots::None => EncoderVars::Disabled,
            EncoderSlots::BiLstm { forward, backward } => {
                let mut dir = |first: usize| {
                    [
                        tape.param(first, &p[first]),
                        tape.param(first + 1, &p[first + 1]),
                        tape.param(first + 2, &p[first + 2]),
                    ]
                };
                EncoderVars::BiLstm {
                    forward: dir(forward),
                    backward: dir(backward),
                }
            }
            EncoderSlots::Transformer(first) => EncoderVars::Transformer {
                positions: tape.param(first, &p[first]),
                query: tape.param(first + 1, &p[first + 1]),
                key: tape.param(first + 2, &p[first + 2]),
                value: tape.param(first + 3, &p[first + 3]),
                output: tape.param(first + 4, &p[first + 4]),
            },
        }
    }

    /// Records the graph, levels and interests for one history.
    ///
    /// `items` has length `capacity`; entries at and after `valid_len` are
    /// padding. Capsule agreement scores are drawn per item id from
    /// `agreement_seed` and the user.
    pub fn record_user(
        &self,
        tape: &mut Tape,
        user: usize,
        items: &[u32],
        valid_len: usize,
        agreement_seed: u64,
    ) -> Result<UserRecord> {
        let cfg = &self.config;
        let wiring = cfg.wiring();
        if items.len() != cfg.capacity || valid_len == 0 || valid_len > cfg.capacity {
            return Err(Error::InvalidArgument(format!(
                "history of length {} with {valid_len} valid items does not fit capacity {}",
                items.len(),
                cfg.capacity
            )));
        }
        if user >= cfg.num_users {
            return Err(Error::InvalidArgument(format!("user {user} out of range")));
        }
        if let Some(&bad) = items.iter().find(|&&i| i as usize > cfg.num_items) {
            return Err(Error::InvalidArgument(format!("item {bad} out of range")));
        }
        let mask: Vec<bool> = (0..cfg.capacity).map(|i| i < valid_len).collect();
        let p = &self.params.tensors;
        let rows: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let x = tape.param_rows(self.layout.item, &p[self.layout.item], &rows, Some(PADDING as usize))?;

        let (levels, adjacency) = match self.layout.gcn {
            Some(gcn) => {
                let u = tape.param_slice(self.layout.user, &p[self.layout.user], user)?;
                let w = tape.param(gcn, &p[gcn]);
                let (levels, graph) =
                    graphconv::record_levels(tape, x, u, &mask, w, cfg.layers, cfg.leaky_slope)?;
                (levels, Some(graph.adjacency))
            }
            None => (vec![x; cfg.layers + 1], None),
        };
        let l1 = match adjacency {
            Some(a) => Some(tape.l1_mean(a, &mask)?),
            None => None,
        };

        let encoder = self.record_encoder(tape);
        let mut interest_mask = None;
        let interests = match wiring.aggregator {
            Aggregator::Capsule => {
                let (proj, out) = self.layout.capsule.expect("capsule weights allocated");
                let k = cfg.interests;
                let w: Vec<Var> = (0..k)
                    .map(|i| tape.param_slice(proj, &p[proj], i))
                    .collect::<Result<_>>()?;
                let w_out: Vec<Var> = (0..k)
                    .map(|i| tape.param_slice(out, &p[out], i))
                    .collect::<Result<_>>()?;
                let agreement = AgreementInit::Keyed {
                    keys: items.iter().map(|&i| i as u64).collect(),
                    seed: seeding::derive(agreement_seed, &[user as u64]),
                };
                seqcaps::record_interests(tape, &levels, &w, &w_out, &encoder, &mask, cfg.tau, &agreement)?
            }
            Aggregator::BiLstm => {
                let EncoderVars::BiLstm { forward, backward } = encoder else {
                    unreachable!("bidirectional aggregator allocates LSTM weights")
                };
                let mut out = Vec::with_capacity(levels.len());
                for &h in &levels {
                    let f = tape.lstm(h, forward[0], forward[1], forward[2], &mask, false)?;
                    let b = tape.lstm(h, backward[0], backward[1], backward[2], &mask, true)?;
                    let last = tape.row(f, valid_len - 1);
                    let first = tape.row(b, 0);
                    let joined = tape.concat(&[last, first])?;
                    out.push(tape.stack_rows(&[joined])?);
                }
                out
            }
            Aggregator::SumPool => {
                let weights = tape.leaf(Tensor::vector(
                    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                ));
                let mut out = Vec::with_capacity(levels.len());
                for &h in &levels {
                    let pooled = tape.matmul_canonical(weights, h)?;
                    out.push(tape.stack_rows(&[pooled])?);
                }
                out
            }
            Aggregator::SelfAttention => {
                interest_mask = Some(mask.clone());
                levels.clone()
            }
        };
        Ok(UserRecord {
            interests,
            interest_mask,
            levels,
            adjacency,
            l1,
        })
    }

    /// Records the embedding of a candidate item.
    pub fn record_candidate(&self, tape: &mut Tape, item: u32) -> Result<Var> {
        let p = &self.params.tensors;
        tape.param_slice(self.layout.item, &p[self.layout.item], item as usize)
    }

    /// Records per-level scores of `item` against a recorded user.
    pub fn record_scores(&self, tape: &mut Tape, user: &UserRecord, item: u32) -> Result<Vec<Var>> {
        let x = self.record_candidate(tape, item)?;
        user.interests
            .iter()
            .map(|&q| predictor::record_level_score(tape, q, x, user.interest_mask.as_deref()))
            .collect()
    }

    /// Interest set of one history, for inference.
    pub fn interests(&self, user: usize, items: &[u32], valid_len: usize, agreement_seed: u64) -> Result<InterestSet> {
        let mut tape = Tape::new();
        let rec = self.record_user(&mut tape, user, items, valid_len, agreement_seed)?;
        let values: Vec<Tensor> = rec.interests.iter().map(|&v| tape.value(v).clone()).collect();
        InterestSet::from_levels(&values, rec.interest_mask)
    }

    /// Scores candidates against an interest set with the configured pooling.
    pub fn score(&self, interests: &InterestSet, candidates: &[u32]) -> Result<Vec<PredictionOutput>> {
        self.score_pooled(interests, candidates, self.config.wiring().pooling)
    }

    pub fn score_pooled(
        &self,
        interests: &InterestSet,
        candidates: &[u32],
        pooling: Pooling,
    ) -> Result<Vec<PredictionOutput>> {
        candidates
            .iter()
            .map(|&c| predictor::score_candidate_pooled(interests, &self.item_embedding(c), pooling))
            .collect()
    }
}

impl ModelParameters {
    /// Deterministic random parameters with the given seed, for tests.
    pub fn random_like(&self, seed: u64, std: f64) -> ModelParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| init_tensor(&mut rng, t.shape(), std)).collect(),
        }
    }
}
