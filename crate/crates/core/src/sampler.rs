//! Subnet sampling: per-stage retained-block distributions and the
//! subnet-in-subnet (SIS) scheduler that groups sampled subnets by generation.
//!
//! Randomness comes from [`ChaCha8Rng`]. Sampling one child consumes exactly
//! one uniform `f64` per stage, stages in order `1..=D`, and picks the
//! retained count by inverse CDF over that stage's distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{count_params, NetworkConfig, SubnetMask};

/// Deterministic generator used for every sampling stream.
pub type SamplerRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SamplerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingRule {
    /// Inheriting exponential decay with base `q ∈ (0, 1)`.
    Edr {
        q: f64,
    },
    Uniform,
    /// Stochastic-depth survival `1 - (i/L)(1 - p_last)` over the global block index.
    LinearDecay {
        p_last: f64,
    },
    /// Same survival law restarted inside each stage.
    LinearDecayStagewise {
        p_last: f64,
    },
}

impl SamplingRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingRule::Edr { q } if !(q > 0.0 && q < 1.0) => Err(Error::InvalidArgument(
                format!("EDR base q must lie in (0, 1), got {q}"),
            )),
            SamplingRule::LinearDecay { p_last }
            | SamplingRule::LinearDecayStagewise { p_last }
                if !(p_last > 0.0 && p_last <= 1.0) =>
            {
                Err(Error::InvalidArgument(format!(
                    "linear-decay terminal survival must lie in (0, 1], got {p_last}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Exponential-decay distribution over retained counts `1..=support` for
/// stage `stage` (1-based) of a `stages`-stage net. With `u = q^(D-d+1)` the
/// weights are `[u^l, u^(l-1), …, u]`, normalized.
pub fn edr_distribution(q: f64, stages: usize, stage: usize, support: usize) -> Result<Vec<f64>> {
    SamplingRule::Edr { q }.validate()?;
    if stage == 0 || stage > stages || support == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= stage <= {stages} and support >= 1 (stage {stage}, support {support})"
        )));
    }
    let u = q.powi((stages - stage + 1) as i32);
    // scaled by u^-1 so the largest weight is exactly 1
    let weights: Vec<f64> = (0..support)
        .map(|i| u.powi((support - 1 - i) as i32))
        .collect();
    Ok(normalize(weights))
}

/// Distribution over retained counts `1..=support` for stage `stage`
/// (1-based) under `rule`. `support` is the parent's retained count, at most
/// the stage's block count in `config`.
pub fn rule_distribution(
    rule: &SamplingRule,
    config: &NetworkConfig,
    stage: usize,
    support: usize,
) -> Result<Vec<f64>> {
    rule.validate()?;
    if stage == 0
        || stage > config.stages()
        || support == 0
        || support > config.stage_blocks[stage - 1]
    {
        return Err(Error::InvalidArgument(format!(
            "stage {stage} with support {support} is outside the network's {:?} blocks",
            config.stage_blocks
        )));
    }
    match *rule {
        SamplingRule::Edr { q } => edr_distribution(q, config.stages(), stage, support),
        SamplingRule::Uniform => Ok(vec![1.0 / support as f64; support]),
        SamplingRule::LinearDecay { p_last } => {
            let offset: usize = config.stage_blocks[..stage - 1].iter().sum();
            let total = config.total_blocks();
            let survival: Vec<f64> = (1..=support)
                .map(|j| 1.0 - ((offset + j) as f64 / total as f64) * (1.0 - p_last))
                .collect();
            Ok(prefix_distribution(&survival))
        }
        SamplingRule::LinearDecayStagewise { p_last } => {
            let blocks = config.stage_blocks[stage - 1];
            let survival: Vec<f64> = (1..=support)
                .map(|j| 1.0 - (j as f64 / blocks as f64) * (1.0 - p_last))
                .collect();
            Ok(prefix_distribution(&survival))
        }
    }
}

/// Independent per-block survival conditioned on the kept blocks forming a
/// non-empty prefix: count `m < n` has weight `∏_{j≤m} s_j · (1 - s_{m+1})`,
/// count `n` has weight `∏ s_j`.
fn prefix_distribution(survival: &[f64]) -> Vec<f64> {
    let n = survival.len();
    let mut weights = Vec::with_capacity(n);
    let mut kept = 1.0;
    for m in 1..=n {
        kept *= survival[m - 1];
        let w = if m < n {
            kept * (1.0 - survival[m])
        } else {
            kept
        };
        weights.push(w);
    }
    normalize(weights)
}

fn normalize(mut weights: Vec<f64>) -> Vec<f64> {
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    weights
}

/// Inverse-CDF draw of an index from `probs` using one uniform `f64`.
fn draw_index(probs: &[f64], rng: &mut SamplerRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples a child of `parent`: each stage keeps between 1 and the parent's
/// retained count of blocks.
pub fn sample_child(
    parent: &SubnetMask,
    rule: &SamplingRule,
    config: &NetworkConfig,
    rng: &mut SamplerRng,
) -> Result<SubnetMask> {
    parent.validate_for(config)?;
    let mut retained = Vec::with_capacity(config.stages());
    for (d, &support) in parent.retained().iter().enumerate() {
        let probs = rule_distribution(rule, config, d + 1, support)?;
        retained.push(draw_index(&probs, rng) + 1);
    }
    Ok(SubnetMask::new(retained))
}

/// Scheduler state: the current loop `r`, the group `t` of the next sample,
/// and the mask the next sample is drawn from when `t > 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SisState {
    pub loop_index: usize,
    pub group: usize,
    pub groups: usize,
    pub parent: SubnetMask,
}

impl SisState {
    pub fn new(config: &NetworkConfig, groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::InvalidArgument(
                "group count must be at least 1".into(),
            ));
        }
        Ok(SisState {
            loop_index: 1,
            group: 1,
            groups,
            parent: config.full_mask(),
        })
    }
}

/// One SIS draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SisDraw {
    pub mask: SubnetMask,
    pub group: usize,
    pub loop_index: usize,
}

/// Draws the subnet for the current group and advances the schedule. Group 1
/// always samples from the main net; later groups sample from the previous
/// draw of the same loop.
pub fn sis_step(
    state: &SisState,
    config: &NetworkConfig,
    rule: &SamplingRule,
    rng: &mut SamplerRng,
) -> Result<(SisDraw, SisState)> {
    let parent = if state.group == 1 {
        config.full_mask()
    } else {
        state.parent.clone()
    };
    let mask = sample_child(&parent, rule, config, rng)?;
    let (group, loop_index) = if state.group >= state.groups {
        (1, state.loop_index + 1)
    } else {
        (state.group + 1, state.loop_index)
    };
    let draw = SisDraw {
        mask: mask.clone(),
        group: state.group,
        loop_index: state.loop_index,
    };
    let next = SisState {
        loop_index,
        group,
        groups: state.groups,
        parent: mask,
    };
    Ok((draw, next))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: usize,
    pub mean_params: f64,
    pub frac_tiny: f64,
    pub frac_medium: f64,
    pub frac_large: f64,
}

/// Runs `loops` complete SIS loops and summarizes each group's sampled
/// parameter counts. The range between the smallest and the full subnet is
/// split linearly into tiny/medium/large thirds; a count on a boundary goes
/// to the larger third.
pub fn group_statistics(
    config: &NetworkConfig,
    rule: &SamplingRule,
    groups: usize,
    loops: usize,
    seed: u64,
) -> Result<Vec<GroupStats>> {
    if loops == 0 {
        return Err(Error::InvalidArgument("need at least one SIS loop".into()));
    }
    let min = count_params(config, &config.smallest_mask())? as f64;
    let max = count_params(config, &config.full_mask())? as f64;
    let third = (max - min) / 3.0;
    let mut sums = vec![0.0; groups];
    let mut bins = vec![[0usize; 3]; groups];
    let mut rng = rng_from_seed(seed);
    let mut state = SisState::new(config, groups)?;
    for _ in 0..loops * groups {
        let (draw, next) = sis_step(&state, config, rule, &mut rng)?;
        let params = count_params(config, &draw.mask)? as f64;
        let g = draw.group - 1;
        sums[g] += params;
        let bin = if params < min + third {
            0
        } else if params < min + 2.0 * third {
            1
        } else {
            2
        };
        // a single-size network has no spread; call everything large
        let bin = if third == 0.0 { 2 } else { bin };
        bins[g][bin] += 1;
        state = next;
    }
    let n = loops as f64;
    Ok((0..groups)
        .map(|g| GroupStats {
            group: g + 1,
            mean_params: sums[g] / n,
            frac_tiny: bins[g][0] as f64 / n,
            frac_medium: bins[g][1] as f64 / n,
            frac_large: bins[g][2] as f64 / n,
        })
        .collect())
}
