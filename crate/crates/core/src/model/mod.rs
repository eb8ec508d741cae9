//! Stage/block residual MLP whose forward pass runs any ordered subnet.
//!
//! Stage `d` holds `l_d` residual blocks of width `w_d`. A [`SubnetMask`]
//! keeps the first `m_d` blocks of each stage; the rest are skipped as exact
//! identities. The stem, the stage entry projections and the head always run.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{add, linear, relu, ParamId, ParamSet, Tape, Tensor, Var};

/// Default upper bound on `∏ l_d` for [`enumerate_masks`].
pub const DEFAULT_MASK_CAP: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub features: usize,
    pub classes: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.features == 0 || self.classes == 0 {
            return bad(format!(
                "features ({}) and classes ({}) must be positive",
                self.features, self.classes
            ));
        }
        if self.stage_widths.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stage_widths.len() != self.stage_blocks.len() {
            return bad(format!(
                "{} stage widths but {} stage block counts",
                self.stage_widths.len(),
                self.stage_blocks.len()
            ));
        }
        if self.stage_widths.contains(&0) || self.stage_blocks.contains(&0) {
            return bad("every stage needs a positive width and at least one block".into());
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    pub fn full_mask(&self) -> SubnetMask {
        SubnetMask {
            retained: self.stage_blocks.clone(),
        }
    }

    /// The mask keeping one block per stage.
    pub fn smallest_mask(&self) -> SubnetMask {
        SubnetMask {
            retained: vec![1; self.stages()],
        }
    }
}

/// Number of leading residual blocks kept in each stage.
#[derive(
    Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(transparent)]
pub struct SubnetMask {
    retained: Vec<usize>,
}

impl SubnetMask {
    pub fn new(retained: Vec<usize>) -> Self {
        SubnetMask { retained }
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn validate_for(&self, config: &NetworkConfig) -> Result<()> {
        let invalid = |reason: String| {
            Err(Error::InvalidMask {
                mask: self.retained.clone(),
                reason,
            })
        };
        if self.retained.len() != config.stages() {
            return invalid(format!("network has {} stages", config.stages()));
        }
        for (d, (&m, &l)) in self.retained.iter().zip(&config.stage_blocks).enumerate() {
            if m == 0 || m > l {
                return invalid(format!("stage {} keeps {m} of {l} blocks", d + 1));
            }
        }
        Ok(())
    }

    pub fn is_full(&self, config: &NetworkConfig) -> bool {
        self.retained == config.stage_blocks
    }

    /// `Σ m_d / Σ l_d`.
    pub fn retained_fraction(&self, config: &NetworkConfig) -> f64 {
        self.retained.iter().sum::<usize>() as f64 / config.total_blocks() as f64
    }

    /// True when every stage of `self` keeps no more blocks than `other`.
    pub fn is_nested_in(&self, other: &SubnetMask) -> bool {
        self.retained.len() == other.retained.len()
            && self
                .retained
                .iter()
                .zip(&other.retained)
                .all(|(a, b)| a <= b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl BlockIds {
    pub fn all(&self) -> [ParamId; 4] {
        [
            self.fc1.weight,
            self.fc1.bias,
            self.fc2.weight,
            self.fc2.bias,
        ]
    }
}

/// Weights of the main net. Every subnet shares them through a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: NetworkConfig,
    params: ParamSet,
    stem: LinearIds,
    entries: Vec<Option<LinearIds>>,
    blocks: Vec<Vec<BlockIds>>,
    head: LinearIds,
}

fn linear_shapes(fan_in: usize, fan_out: usize) -> [Vec<usize>; 2] {
    [vec![fan_out, fan_in], vec![fan_out]]
}

/// Names and shapes of every parameter, in canonical order.
fn layout(config: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push_linear = |prefix: String, fan_in: usize, fan_out: usize| {
        let [w, b] = linear_shapes(fan_in, fan_out);
        out.push((format!("{prefix}.weight"), w));
        out.push((format!("{prefix}.bias"), b));
    };
    push_linear("stem".into(), config.features, config.stage_widths[0]);
    for (d, (&width, &blocks)) in config
        .stage_widths
        .iter()
        .zip(&config.stage_blocks)
        .enumerate()
    {
        let stage = d + 1;
        if d > 0 {
            push_linear(
                format!("stage{stage}.entry"),
                config.stage_widths[d - 1],
                width,
            );
        }
        for j in 1..=blocks {
            push_linear(format!("stage{stage}.block{j}.fc1"), width, width);
            push_linear(format!("stage{stage}.block{j}.fc2"), width, width);
        }
    }
    push_linear(
        "head".into(),
        *config.stage_widths.last().unwrap(),
        config.classes,
    );
    out
}

impl ModelParams {
    /// Fresh weights: each weight matrix uniform in `±√(6/(fan_in+fan_out))`,
    /// biases zero. Values are drawn from a ChaCha8 stream seeded with `seed`,
    /// matrix by matrix in canonical order, row-major within a matrix.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in layout(config) {
            let tensor = if shape.len() == 2 {
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_out * fan_in)
                    .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                    .collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, tensor)?;
        }
        Self::from_params(config.clone(), params)
    }

    /// Wraps an existing parameter set, checking names and shapes against `config`.
    pub fn from_params(config: NetworkConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (_, got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        let ids = |prefix: &str| LinearIds {
            weight: params.id_of(&format!("{prefix}.weight")).unwrap(),
            bias: params.id_of(&format!("{prefix}.bias")).unwrap(),
        };
        let stem = ids("stem");
        let head = ids("head");
        let mut entries = Vec::new();
        let mut blocks = Vec::new();
        for d in 0..config.stages() {
            let stage = d + 1;
            entries.push((d > 0).then(|| ids(&format!("stage{stage}.entry"))));
            blocks.push(
                (1..=config.stage_blocks[d])
                    .map(|j| BlockIds {
                        fc1: ids(&format!("stage{stage}.block{j}.fc1")),
                        fc2: ids(&format!("stage{stage}.block{j}.fc2")),
                    })
                    .collect(),
            );
        }
        Ok(ModelParams {
            config,
            params,
            stem,
            entries,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameter ids of block `block` (0-based) in stage `stage` (0-based).
    pub fn block(&self, stage: usize, block: usize) -> BlockIds {
        self.blocks[stage][block]
    }

    /// Ids of the parameters a subnet with `mask` reads.
    pub fn active_params(&self, mask: &SubnetMask) -> Vec<ParamId> {
        let mut ids = vec![self.stem.weight, self.stem.bias];
        for d in 0..self.config.stages() {
            if let Some(e) = self.entries[d] {
                ids.extend([e.weight, e.bias]);
            }
            for b in &self.blocks[d][..mask.retained[d]] {
                ids.extend(b.all());
            }
        }
        ids.extend([self.head.weight, self.head.bias]);
        ids.sort();
        ids
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, f) = x.expect_matrix("forward")?;
        if f != self.config.features {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {f} features, network expects {}",
                    self.config.features
                ),
            ));
        }
        Ok(())
    }

    fn lin(&self, x: &Tensor, ids: LinearIds) -> Result<Tensor> {
        linear(x, self.params.get(ids.weight), self.params.get(ids.bias))
    }

    fn block_forward(&self, h: &Tensor, b: &BlockIds) -> Result<Tensor> {
        let inner = relu(&self.lin(h, b.fc1)?);
        let branch = self.lin(&inner, b.fc2)?;
        add(h, &branch)
    }

    fn stage_entry(&self, h: Tensor, d: usize) -> Result<Tensor> {
        match self.entries[d] {
            Some(e) => Ok(relu(&self.lin(&h, e)?)),
            None => Ok(h),
        }
    }

    /// Pre-softmax logits of the subnet selected by `mask`.
    pub fn forward(&self, mask: &SubnetMask, x: &Tensor) -> Result<Tensor> {
        mask.validate_for(&self.config)?;
        self.check_input(x)?;
        let mut h = self.lin(x, self.stem)?;
        for d in 0..self.config.stages() {
            h = self.stage_entry(h, d)?;
            for b in &self.blocks[d][..mask.retained[d]] {
                h = self.block_forward(&h, b)?;
            }
        }
        self.lin(&h, self.head)
    }

    /// Main-net logits without any mask bookkeeping.
    pub fn forward_reference(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.lin(x, self.stem)?;
        for (d, stage) in self.blocks.iter().enumerate() {
            h = self.stage_entry(h, d)?;
            for b in stage {
                h = self.block_forward(&h, b)?;
            }
        }
        self.lin(&h, self.head)
    }

    /// Records the masked forward on `tape` and returns the logits variable.
    /// Only parameters of retained blocks are registered.
    pub fn forward_taped<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        mask: &SubnetMask,
        x: Var,
    ) -> Result<Var> {
        mask.validate_for(&self.config)?;
        self.check_input(tape.value(x)?)?;
        let lin = |tape: &mut Tape<'a>, h: Var, ids: LinearIds| -> Result<Var> {
            let w = tape.param(ids.weight, self.params.get(ids.weight));
            let b = tape.param(ids.bias, self.params.get(ids.bias));
            tape.linear(h, w, b)
        };
        let mut h = lin(tape, x, self.stem)?;
        for d in 0..self.config.stages() {
            if let Some(e) = self.entries[d] {
                let z = lin(tape, h, e)?;
                h = tape.relu(z)?;
            }
            for b in &self.blocks[d][..mask.retained[d]] {
                let z = lin(tape, h, b.fc1)?;
                let inner = tape.relu(z)?;
                let branch = lin(tape, inner, b.fc2)?;
                h = tape.add(h, branch)?;
            }
        }
        lin(tape, h, self.head)
    }
}

/// Parameter count of the subnet selected by `mask`: stem, entries and head
/// with biases, plus `2·w_d² + 2·w_d` for each retained block.
pub fn count_params(config: &NetworkConfig, mask: &SubnetMask) -> Result<usize> {
    config.validate()?;
    mask.validate_for(config)?;
    let w = &config.stage_widths;
    let mut fixed = config.features * w[0] + w[0];
    for d in 1..w.len() {
        fixed += w[d - 1] * w[d] + w[d];
    }
    fixed += w[w.len() - 1] * config.classes + config.classes;
    let blocks: usize = mask
        .retained
        .iter()
        .zip(w)
        .map(|(&m, &wd)| m * (2 * wd * wd + 2 * wd))
        .sum();
    Ok(fixed + blocks)
}

/// Every ordered mask, lexicographically. Fails when `∏ l_d` exceeds `cap`.
pub fn enumerate_masks(config: &NetworkConfig, cap: usize) -> Result<Vec<SubnetMask>> {
    config.validate()?;
    let count = config
        .stage_blocks
        .iter()
        .fold(1u128, |acc, &l| acc.saturating_mul(l as u128));
    if count > cap as u128 {
        return Err(Error::EnumerationCap { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = vec![1; config.stages()];
    loop {
        out.push(SubnetMask::new(current.clone()));
        // odometer increment, last stage fastest
        let mut d = config.stages();
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            if current[d] < config.stage_blocks[d] {
                current[d] += 1;
                break;
            }
            current[d] = 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(widths: &[usize], blocks: &[usize]) -> NetworkConfig {
        NetworkConfig {
            features: 3,
            classes: 2,
            stage_widths: widths.to_vec(),
            stage_blocks: blocks.to_vec(),
        }
    }

    fn input(rows: usize, features: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * features)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::new(vec![rows, features], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg(&[4], &[2]).validate().is_ok());
        assert!(cfg(&[], &[]).validate().is_err());
        assert!(cfg(&[4, 4], &[2]).validate().is_err());
        assert!(cfg(&[4], &[0]).validate().is_err());
        assert!(cfg(&[0], &[1]).validate().is_err());
        assert!(ModelParams::build(&cfg(&[4], &[0]), 0).is_err());
    }

    #[test]
    fn mask_validation() {
        let c = cfg(&[4, 4], &[2, 3]);
        assert!(SubnetMask::new(vec![2, 3]).validate_for(&c).is_ok());
        assert!(SubnetMask::new(vec![0, 3]).validate_for(&c).is_err());
        assert!(SubnetMask::new(vec![2, 4]).validate_for(&c).is_err());
        assert!(SubnetMask::new(vec![2]).validate_for(&c).is_err());
        assert!((SubnetMask::new(vec![1, 1]).retained_fraction(&c) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn build_is_deterministic_with_zero_biases() {
        let c = cfg(&[4, 6], &[2, 2]);
        let a = ModelParams::build(&c, 7).unwrap();
        let b = ModelParams::build(&c, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::build(&c, 8).unwrap());
        for (_, name, t) in a.params().iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let (o, i) = (t.shape()[0], t.shape()[1]);
                let bound = (6.0 / (o + i) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn param_count_matches_hand_count() {
        let c = NetworkConfig {
            features: 2,
            classes: 2,
            stage_widths: vec![4],
            stage_blocks: vec![3],
        };
        // stem 2·4+4, head 4·2+2, one block 2·16+2·4
        assert_eq!(count_params(&c, &SubnetMask::new(vec![1])).unwrap(), 62);
        let model = ModelParams::build(&c, 0).unwrap();
        assert_eq!(
            model.params().numel(),
            count_params(&c, &c.full_mask()).unwrap()
        );
        assert_eq!(count_params(&c, &c.full_mask()).unwrap(), 62 + 2 * 40);
    }

    #[test]
    fn param_count_increments_per_block() {
        let c = cfg(&[4, 8, 16], &[3, 3, 3]);
        for mask in enumerate_masks(&c, DEFAULT_MASK_CAP).unwrap() {
            let base = count_params(&c, &mask).unwrap();
            for d in 0..3 {
                if mask.retained()[d] < 3 {
                    let mut bigger = mask.retained().to_vec();
                    bigger[d] += 1;
                    let w = c.stage_widths[d];
                    let next = count_params(&c, &SubnetMask::new(bigger)).unwrap();
                    assert_eq!(next - base, 2 * w * w + 2 * w);
                }
            }
            assert!(base <= count_params(&c, &c.full_mask()).unwrap());
        }
    }

    #[test]
    fn enumeration() {
        let masks = enumerate_masks(&cfg(&[2, 2], &[2, 2]), DEFAULT_MASK_CAP).unwrap();
        let got: Vec<_> = masks.iter().map(|m| m.retained().to_vec()).collect();
        assert_eq!(got, vec![vec![1, 1], vec![1, 2], vec![2, 1], vec![2, 2]]);
        assert_eq!(enumerate_masks(&cfg(&[2], &[1]), 10).unwrap().len(), 1);
        let masks = enumerate_masks(&cfg(&[2, 2, 2], &[4, 4, 4]), DEFAULT_MASK_CAP).unwrap();
        assert_eq!(masks.len(), 64);
        assert!(masks.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            enumerate_masks(&cfg(&[2, 2], &[100, 100]), DEFAULT_MASK_CAP),
            Err(Error::EnumerationCap { count: 10000, .. })
        ));
    }

    #[test]
    fn full_mask_matches_reference_bitwise() {
        let c = cfg(&[5, 7], &[3, 2]);
        let model = ModelParams::build(&c, 3).unwrap();
        let x = input(9, 3, 1);
        let a = model.forward(&c.full_mask(), &x).unwrap();
        let b = model.forward_reference(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let c = cfg(&[5, 7], &[3, 2]);
        let model = ModelParams::build(&c, 3).unwrap();
        let x = input(4, 3, 2);
        let mask = SubnetMask::new(vec![2, 1]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = model.forward_taped(&mut tape, &mask, xv).unwrap();
        assert_eq!(tape.value(out).unwrap(), &model.forward(&mask, &x).unwrap());
    }

    #[test]
    fn zero_residual_branches_leave_only_the_skip_path() {
        let c = cfg(&[5, 7], &[2, 2]);
        let mut model = ModelParams::build(&c, 11).unwrap();
        for d in 0..2 {
            for j in 0..2 {
                for id in model.block(d, j).all() {
                    model.params_mut().get_mut(id).data_mut().fill(0.0);
                }
            }
        }
        let x = input(6, 3, 5);
        let skip = {
            let mut h = model.lin(&x, model.stem).unwrap();
            h = model.stage_entry(h, 0).unwrap();
            h = model.stage_entry(h, 1).unwrap();
            model.lin(&h, model.head).unwrap()
        };
        let small = model.forward(&c.smallest_mask(), &x).unwrap();
        assert_eq!(small, skip);
        assert_eq!(model.forward(&c.full_mask(), &x).unwrap(), skip);
    }

    #[test]
    fn zeroed_block_is_an_identity() {
        let c = cfg(&[5, 7], &[3, 3]);
        let mut model = ModelParams::build(&c, 13).unwrap();
        for id in model.block(1, 2).all() {
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let x = input(6, 3, 9);
        let a = model.forward(&SubnetMask::new(vec![2, 2]), &x).unwrap();
        let b = model.forward(&SubnetMask::new(vec![2, 3]), &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_features_and_masks() {
        let c = cfg(&[4], &[2]);
        let model = ModelParams::build(&c, 0).unwrap();
        assert!(model
            .forward(&c.full_mask(), &Tensor::zeros(&[2, 4]))
            .is_err());
        assert!(model
            .forward(&SubnetMask::new(vec![3]), &Tensor::zeros(&[2, 3]))
            .is_err());
    }

    #[test]
    fn active_params_are_nested() {
        let c = cfg(&[4, 4], &[3, 3]);
        let model = ModelParams::build(&c, 0).unwrap();
        let small = model.active_params(&SubnetMask::new(vec![1, 2]));
        let big = model.active_params(&SubnetMask::new(vec![2, 3]));
        assert!(small.iter().all(|id| big.contains(id)));
        assert_eq!(big.len(), model.params().len() - 4);
    }
}
