//! Sequential capsule network.
//!
//! Each capsule projects a level's item representations, then runs dynamic
//! routing: coupling `c = softmax(g)`, `v = Σ c_j z_j`, `o = squash(v)` and
//! agreement update `g_j += o · z_j`. After the first pass the projections get
//! a residual sequence encoding `Z ← Z + Enc(Z)`; the remaining passes reuse
//! the encoded projections. The last output goes through `ReLU(o W')`.

mod encoder;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graphconv::LevelRepresentations;
use crate::numerics::{Tape, Tensor, Var};
use crate::seeding;

pub use encoder::{
    bilstm_hidden, record_encode, EncoderKind, EncoderVars, LstmWeights, SequenceEncoder,
    TransformerWeights,
};

/// Standard deviation of the agreement initialisation; draws are truncated
/// at two standard deviations.
pub const AGREEMENT_STD: f64 = 0.02;

/// Normal draw rejected outside two standard deviations.
pub(crate) fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// `m` agreement scores from a truncated normal, deterministic per seed.
pub fn init_agreement(m: usize, rng_seed: u64) -> Tensor {
    let mut rng = seeding::rng(rng_seed, &[]);
    Tensor::vector((0..m).map(|_| truncated_normal(&mut rng, AGREEMENT_STD)).collect())
}

/// How the agreement scores of a routing run are initialised.
#[derive(Clone, Debug)]
pub enum AgreementInit {
    /// Fresh draw per position.
    Positional { seed: u64 },
    /// One draw per item key, so the value follows the item wherever it sits
    /// in the sequence. Entries for padded positions are ignored.
    Keyed { keys: Vec<u64>, seed: u64 },
    Given(Tensor),
}

impl AgreementInit {
    /// Initial scores for the routing run of `capsule` at `level`.
    pub fn draw(&self, level: usize, capsule: usize, m: usize) -> Tensor {
        match self {
            AgreementInit::Positional { seed } => {
                init_agreement(m, seeding::derive(*seed, &[level as u64, capsule as u64]))
            }
            AgreementInit::Keyed { keys, seed } => {
                let base = seeding::derive(*seed, &[level as u64, capsule as u64]);
                Tensor::vector(
                    keys.iter()
                        .map(|&k| truncated_normal(&mut seeding::rng(base, &[k]), AGREEMENT_STD))
                        .collect(),
                )
            }
            AgreementInit::Given(t) => t.clone(),
        }
    }
}

/// Snapshot of one routing pass.
#[derive(Clone, Debug)]
pub struct CapsuleState {
    /// Projections consumed by this pass (`m × d`).
    pub projected: Tensor,
    /// Agreement scores the coupling was computed from.
    pub agreement: Tensor,
    pub coupling: Tensor,
    pub pre_activation: Tensor,
    pub output: Tensor,
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PassVars {
    pub projected: Var,
    pub agreement: Var,
    pub coupling: Var,
    pub pre_activation: Var,
    pub output: Var,
}

/// Records one capsule's routing. Returns the final squashed output and the
/// per-pass handles.
#[allow(clippy::too_many_arguments)]
pub fn record_route(
    tape: &mut Tape,
    level_repr: Var,
    projection: Var,
    encoder: &EncoderVars,
    mask: &[bool],
    tau: usize,
    initial_agreement: &Tensor,
) -> Result<(Var, Vec<PassVars>)> {
    if tau == 0 {
        return Err(Error::InvalidArgument("routing needs at least one pass".into()));
    }
    let mut z = tape.matmul(level_repr, projection)?;
    let mut g = tape.leaf(initial_agreement.clone());
    let mut passes = Vec::with_capacity(tau);
    for it in 0..tau {
        let c = tape.softmax(g, Some(mask))?;
        let v = tape.matmul_canonical(c, z)?;
        let o = tape.squash(v);
        tape.value(o).ensure_finite("capsule routing")?;
        passes.push(PassVars {
            projected: z,
            agreement: g,
            coupling: c,
            pre_activation: v,
            output: o,
        });
        if it + 1 == tau {
            break;
        }
        let delta = tape.row_dots(z, o)?;
        g = tape.add(g, delta)?;
        if it == 0 {
            if let Some(enc) = record_encode(tape, encoder, z, mask)? {
                z = tape.add(z, enc)?;
            }
        }
    }
    let out = passes.last().expect("tau >= 1").output;
    Ok((out, passes))
}

/// Routes one capsule over a level and returns its output with a per-pass trace.
pub fn route_capsule(
    level_repr: &Tensor,
    projection: &Tensor,
    encoder: &SequenceEncoder,
    mask: &[bool],
    tau: usize,
    initial_agreement: &Tensor,
) -> Result<(Tensor, Vec<CapsuleState>)> {
    let mut tape = Tape::new();
    let enc = encoder.record(&mut tape);
    let h = tape.leaf(level_repr.clone());
    let w = tape.leaf(projection.clone());
    let (out, passes) = record_route(&mut tape, h, w, &enc, mask, tau, initial_agreement)?;
    let states = passes
        .iter()
        .enumerate()
        .map(|(iteration, p)| CapsuleState {
            projected: tape.value(p.projected).clone(),
            agreement: tape.value(p.agreement).clone(),
            coupling: tape.value(p.coupling).clone(),
            pre_activation: tape.value(p.pre_activation).clone(),
            output: tape.value(p.output).clone(),
            iteration,
        })
        .collect();
    Ok((tape.value(out).clone(), states))
}

/// Interest vectors for every level, stored as `(L+1) × K × d`.
///
/// Candidate-conditioned aggregators store one row per sequence position and
/// set `mask` to the valid positions; every other aggregator leaves it `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestSet {
    pub interests: Tensor,
    pub mask: Option<Vec<bool>>,
}

impl InterestSet {
    pub fn from_levels(levels: &[Tensor], mask: Option<Vec<bool>>) -> Result<Self> {
        let k = levels[0].rows();
        let d = levels[0].row_len();
        let mut data = Vec::with_capacity(levels.len() * k * d);
        for l in levels {
            if l.shape() != [k, d] {
                return Err(Error::ShapeMismatch {
                    op: "InterestSet",
                    lhs: vec![k, d],
                    rhs: l.shape().to_vec(),
                });
            }
            data.extend_from_slice(l.data());
        }
        Ok(InterestSet {
            interests: Tensor::new(vec![levels.len(), k, d], data)?,
            mask,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.interests.shape()[0]
    }

    pub fn num_interests(&self) -> usize {
        self.interests.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.interests.shape()[2]
    }

    /// `K × d` interests of one level.
    pub fn level(&self, l: usize) -> Tensor {
        let (k, d) = (self.num_interests(), self.dim());
        Tensor::new(vec![k, d], self.interests.row(l).to_vec()).expect("level slice")
    }

    pub fn vector(&self, l: usize, i: usize) -> &[f64] {
        let d = self.dim();
        &self.interests.row(l)[i * d..(i + 1) * d]
    }
}

/// Records `q_i^(l) = ReLU(route(H^(l), W_i) W'_i)` for every level and
/// capsule. Returns one `K × d` handle per level.
#[allow(clippy::too_many_arguments)]
pub fn record_interests(
    tape: &mut Tape,
    levels: &[Var],
    projections: &[Var],
    out_projections: &[Var],
    encoder: &EncoderVars,
    mask: &[bool],
    tau: usize,
    agreement: &AgreementInit,
) -> Result<Vec<Var>> {
    let m = mask.len();
    let mut out = Vec::with_capacity(levels.len());
    for (l, &level) in levels.iter().enumerate() {
        let mut qs = Vec::with_capacity(projections.len());
        for (i, (&w, &w_out)) in projections.iter().zip(out_projections).enumerate() {
            let g0 = agreement.draw(l, i, m);
            let (o, _) = record_route(tape, level, w, encoder, mask, tau, &g0)?;
            let lin = tape.matmul(o, w_out)?;
            qs.push(tape.relu(lin));
        }
        out.push(tape.stack_rows(&qs)?);
    }
    Ok(out)
}

/// Extracts `(L+1)·K` interests. `projections` and `output_proj` are
/// `K × d × d`, shared across levels.
pub fn extract_interests(
    levels: &LevelRepresentations,
    projections: &Tensor,
    output_proj: &Tensor,
    encoder: &SequenceEncoder,
    mask: &[bool],
    tau: usize,
    agreement: &AgreementInit,
) -> Result<InterestSet> {
    if projections.rank() != 3 || projections.shape() != output_proj.shape() {
        return Err(Error::ShapeMismatch {
            op: "extract_interests",
            lhs: projections.shape().to_vec(),
            rhs: output_proj.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let enc = encoder.record(&mut tape);
    let level_vars: Vec<Var> = levels.levels.iter().map(|h| tape.leaf(h.clone())).collect();
    let k = projections.shape()[0];
    let slice = |t: &Tensor, i: usize| {
        Tensor::new(t.shape()[1..].to_vec(), t.row(i).to_vec()).expect("capsule slice")
    };
    let w: Vec<Var> = (0..k).map(|i| tape.leaf(slice(projections, i))).collect();
    let w_out: Vec<Var> = (0..k).map(|i| tape.leaf(slice(output_proj, i))).collect();
    let per_level = record_interests(&mut tape, &level_vars, &w, &w_out, &enc, mask, tau, agreement)?;
    let values: Vec<Tensor> = per_level.iter().map(|&v| tape.value(v).clone()).collect();
    InterestSet::from_levels(&values, None)
}
