//! Training loops: group knowledge based training plus the standard,
//! stochastic-depth and stimulative-training baselines.
//!
//! A GKT step runs, in this order: SIS sampling, subnet forward, CE, group
//! supervision lookup and KL, the EMA update of the current group's
//! knowledge, backward and SGD, then the group index advances. The KL target
//! is therefore always read before the same step's output is written.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::knowledge::GroupKnowledgeStore;
use crate::model::{ModelParams, NetworkConfig, SubnetMask};
use crate::sampler::{sample_child, sis_step, SamplerRng, SamplingRule, SisState};
use crate::tensor::{argmax_rows, cosine_lr, sgd_step, Gradients, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Standard,
    Stodepth,
    St,
    Gkt,
}

/// Which group's knowledge supervises a subnet of group `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupervisionMode {
    /// Neighbouring larger group `t-1`; group 1 reads itself.
    Hg,
    /// Always group 1.
    Lg,
    /// Group `t` itself.
    Sg,
    /// Mean over every initialized group.
    Ag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub supervision: SupervisionMode,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub groups: usize,
    pub rule: SamplingRule,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Also evaluate every ordered subnet at each evaluation.
    pub grid_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Gkt,
            supervision: SupervisionMode::Hg,
            beta: 2.0,
            lambda: 1.0,
            alpha: 0.5,
            groups: 3,
            rule: SamplingRule::Edr { q: 0.2 },
            epochs: 30,
            batch_size: 128,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            eval_every: 1,
            grid_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.rule.validate()?;
        if self.beta.is_nan() || self.beta < 0.0 || self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!(
                "beta ({}) and lambda ({}) must be >= 0",
                self.beta, self.lambda
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.groups == 0 || self.batch_size == 0 {
            return bad("groups and batch_size must be at least 1".into());
        }
        if self.lr0.is_nan()
            || self.lr0 <= 0.0
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return bad(format!(
                "need lr0 > 0, 0 <= momentum < 1, weight_decay >= 0 (got {}, {}, {})",
                self.lr0, self.momentum, self.weight_decay
            ));
        }
        Ok(())
    }
}

/// Per-step record written to the metrics trail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub loop_index: Option<usize>,
    pub group: Option<usize>,
    pub mask: SubnetMask,
    pub ce_loss: f64,
    pub kl_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub retained_fraction: f64,
    pub supervised_sample_fraction: f64,
    /// Group whose knowledge was the KL target (`None` when averaged or unused).
    pub supervision_group: Option<usize>,
    /// Multiply-accumulates spent in forward and backward.
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub main_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subnet_mean_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub large_subnet_mean_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step(StepReport),
    Eval(EvalRecord),
}

/// Position of a step in the run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
}

pub struct Supervision {
    pub targets: Tensor,
    pub valid: Vec<bool>,
    pub source_group: Option<usize>,
}

/// Knowledge rows supervising group `group` for the samples `indices`.
/// Samples without usable knowledge are flagged invalid, never an error.
pub fn supervision_select(
    mode: SupervisionMode,
    group: usize,
    store: &GroupKnowledgeStore,
    indices: &[usize],
) -> Result<Supervision> {
    let single = |g: usize| -> Result<Supervision> {
        let (targets, valid) = store.query(g, indices)?;
        Ok(Supervision {
            targets,
            valid,
            source_group: Some(g),
        })
    };
    match mode {
        SupervisionMode::Hg => single(if group > 1 { group - 1 } else { 1 }),
        SupervisionMode::Lg => single(1),
        SupervisionMode::Sg => single(group),
        SupervisionMode::Ag => {
            let k = store.classes();
            let mut sums = vec![0.0; indices.len() * k];
            let mut counts = vec![0usize; indices.len()];
            for g in 1..=store.groups() {
                let (rows, flags) = store.query(g, indices)?;
                for (r, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
                    counts[r] += 1;
                    for (s, v) in sums[r * k..(r + 1) * k].iter_mut().zip(rows.row(r)) {
                        *s += v;
                    }
                }
            }
            for (r, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
                sums[r * k..(r + 1) * k]
                    .iter_mut()
                    .for_each(|s| *s /= c as f64);
            }
            Ok(Supervision {
                targets: Tensor::new(vec![indices.len(), k], sums)?,
                valid: counts.iter().map(|&c| c > 0).collect(),
                source_group: None,
            })
        }
    }
}

fn apply_update(
    model: &mut ModelParams,
    grads: &Gradients,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    // the final cosine step has lr 0, which plain SGD rejects; nothing moves then
    if lr <= 0.0 {
        return Ok(());
    }
    sgd_step(
        model.params_mut(),
        grads,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    )
}

/// One group knowledge based training step. Advances `state` and updates
/// `store` and `model` in place.
pub fn gkt_step(
    model: &mut ModelParams,
    store: &mut GroupKnowledgeStore,
    state: &mut SisState,
    batch: &Batch,
    cfg: &TrainConfig,
    ctx: &StepContext,
    rng: &mut SamplerRng,
) -> Result<StepReport> {
    let (draw, next) = sis_step(state, model.config(), &cfg.rule, rng)?;
    let (grads, report) = {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let logits = model.forward_taped(&mut tape, &draw.mask, x)?;
        let p = tape.softmax(logits)?;
        let ce = tape.cross_entropy(p, &batch.y)?;
        let sup = supervision_select(cfg.supervision, draw.group, store, &batch.indices)?;
        let kl = tape.kl_divergence(&sup.targets, p, &sup.valid)?;
        let total = tape.combine(ce, kl, cfg.beta)?;

        store.update(draw.group, &batch.indices, tape.value(p)?, cfg.alpha)?;
        let grads = tape.backward(total)?;

        let valid = sup.valid.iter().filter(|&&v| v).count();
        let report = StepReport {
            step: ctx.step,
            epoch: ctx.epoch,
            loop_index: Some(draw.loop_index),
            group: Some(draw.group),
            retained_fraction: draw.mask.retained_fraction(model.config()),
            mask: draw.mask,
            ce_loss: tape.value(ce)?.data()[0],
            kl_loss: tape.value(kl)?.data()[0],
            total_loss: tape.value(total)?.data()[0],
            lr: ctx.lr,
            supervised_sample_fraction: valid as f64 / batch.indices.len() as f64,
            supervision_group: sup.source_group,
            macs: tape.macs(),
        };
        (grads, report)
    };
    apply_update(model, &grads, cfg, ctx.lr)?;
    *state = next;
    Ok(report)
}

/// Cross-entropy training of a single subnet.
fn ce_step(
    model: &mut ModelParams,
    mask: SubnetMask,
    batch: &Batch,
    cfg: &TrainConfig,
    ctx: &StepContext,
) -> Result<StepReport> {
    let (grads, report) = {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let logits = model.forward_taped(&mut tape, &mask, x)?;
        let p = tape.softmax(logits)?;
        let ce = tape.cross_entropy(p, &batch.y)?;
        let grads = tape.backward(ce)?;
        let ce_loss = tape.value(ce)?.data()[0];
        let report = StepReport {
            step: ctx.step,
            epoch: ctx.epoch,
            loop_index: None,
            group: None,
            retained_fraction: mask.retained_fraction(model.config()),
            mask,
            ce_loss,
            kl_loss: 0.0,
            total_loss: ce_loss,
            lr: ctx.lr,
            supervised_sample_fraction: 0.0,
            supervision_group: None,
            macs: tape.macs(),
        };
        (grads, report)
    };
    apply_update(model, &grads, cfg, ctx.lr)?;
    Ok(report)
}

/// Main-net cross-entropy step.
pub fn standard_step(
    model: &mut ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    ctx: &StepContext,
) -> Result<StepReport> {
    let full = model.config().full_mask();
    ce_step(model, full, batch, cfg, ctx)
}

/// Stochastic depth: one subnet drawn from the main net with `cfg.rule`
/// (normally a linear-decay rule), trained on cross-entropy only.
pub fn stodepth_step(
    model: &mut ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    ctx: &StepContext,
    rng: &mut SamplerRng,
) -> Result<StepReport> {
    let config = model.config();
    let mask = sample_child(&config.full_mask(), &cfg.rule, config, rng)?;
    ce_step(model, mask, batch, cfg, ctx)
}

/// Stimulative training: `CE(p_main, y) + λ·KL(p_main, p_sub)` with the main
/// net's output held constant inside the KL term.
pub fn st_step(
    model: &mut ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    ctx: &StepContext,
    rng: &mut SamplerRng,
) -> Result<StepReport> {
    let config = model.config();
    let mask = sample_child(&config.full_mask(), &cfg.rule, config, rng)?;
    let (grads, report) = {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let main_logits = model.forward_taped(&mut tape, &config.full_mask(), x)?;
        let p_main = tape.softmax(main_logits)?;
        let ce = tape.cross_entropy(p_main, &batch.y)?;
        let sub_logits = model.forward_taped(&mut tape, &mask, x)?;
        let p_sub = tape.softmax(sub_logits)?;
        let teacher = tape.value(p_main)?.clone();
        let valid = vec![true; batch.indices.len()];
        let kl = tape.kl_divergence(&teacher, p_sub, &valid)?;
        let total = tape.combine(ce, kl, cfg.lambda)?;
        let grads = tape.backward(total)?;
        let report = StepReport {
            step: ctx.step,
            epoch: ctx.epoch,
            loop_index: None,
            group: None,
            retained_fraction: mask.retained_fraction(config),
            mask,
            ce_loss: tape.value(ce)?.data()[0],
            kl_loss: tape.value(kl)?.data()[0],
            total_loss: tape.value(total)?.data()[0],
            lr: ctx.lr,
            supervised_sample_fraction: 1.0,
            supervision_group: None,
            macs: tape.macs(),
        };
        (grads, report)
    };
    apply_update(model, &grads, cfg, ctx.lr)?;
    Ok(report)
}

/// Top-1 accuracy of the subnet `mask` on `data`.
pub fn evaluate_accuracy(model: &ModelParams, mask: &SubnetMask, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 256;
    let classes = model.config().classes;
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in ids.chunks(CHUNK) {
        let batch = data.batch(chunk, classes)?;
        let logits = model.forward(mask, &batch.x)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Independent ChaCha8 stream `stream` for seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids carved out of the run seed. Model init uses the plain seed.
const SHUFFLE_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

pub struct TrainOutcome {
    pub model: ModelParams,
    pub store: Option<GroupKnowledgeStore>,
    pub metrics: Vec<MetricRecord>,
}

/// Full training run in memory. Batches are reshuffled each epoch; the
/// learning rate follows a cosine decay over all steps.
pub fn train(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    train_data: &Dataset,
    test_data: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    for (name, d) in [("training", train_data), ("test", test_data)] {
        if d.features() != net.features {
            return Err(Error::InvalidArgument(format!(
                "{name} data has {} features, network expects {}",
                d.features(),
                net.features
            )));
        }
        if d.classes() > net.classes {
            return Err(Error::InvalidArgument(format!(
                "{name} data has labels up to {}, network has {} classes",
                d.classes() - 1,
                net.classes
            )));
        }
    }
    let mut model = ModelParams::build(net, cfg.seed)?;
    let mut store = match cfg.method {
        Method::Gkt => Some(GroupKnowledgeStore::new(
            cfg.groups,
            train_data.len(),
            net.classes,
        )?),
        _ => None,
    };
    let mut state = SisState::new(net, cfg.groups)?;
    let mut shuffle_rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut sample_rng = stream_rng(cfg.seed, SAMPLING_STREAM);
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut metrics = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_data.batch(chunk, net.classes)?;
            let ctx = StepContext {
                step,
                epoch,
                lr: cosine_lr(step, total_steps, cfg.lr0)?,
            };
            let report = match cfg.method {
                Method::Standard => standard_step(&mut model, &batch, cfg, &ctx)?,
                Method::Stodepth => stodepth_step(&mut model, &batch, cfg, &ctx, &mut sample_rng)?,
                Method::St => st_step(&mut model, &batch, cfg, &ctx, &mut sample_rng)?,
                Method::Gkt => {
                    let store = store.as_mut().expect("gkt runs carry a store");
                    gkt_step(
                        &mut model,
                        store,
                        &mut state,
                        &batch,
                        cfg,
                        &ctx,
                        &mut sample_rng,
                    )?
                }
            };
            metrics.push(MetricRecord::Step(report));
            step += 1;
        }
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
        if due || epoch == cfg.epochs {
            let main_acc = evaluate_accuracy(&model, &net.full_mask(), test_data)?;
            let (subnet_mean_acc, large_subnet_mean_acc) = if cfg.grid_eval {
                let grid = crate::analysis::subnet_grid_eval(
                    &model,
                    test_data,
                    crate::model::DEFAULT_MASK_CAP,
                )?;
                (Some(grid.mean_all), grid.mean_large)
            } else {
                (None, None)
            };
            metrics.push(MetricRecord::Eval(EvalRecord {
                epoch,
                main_acc,
                subnet_mean_acc,
                large_subnet_mean_acc,
            }));
        }
    }
    Ok(TrainOutcome {
        model,
        store,
        metrics,
    })
}

/// Runs [`train`] and persists `metrics.jsonl`, `model.gktm` and, for GKT
/// runs, `knowledge.gktk` into `out_dir`.
pub fn train_to_dir(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    out_dir: &std::path::Path,
) -> Result<TrainOutcome> {
    let outcome = train(cfg, net, train_data, test_data)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let paths = crate::config::RunPaths::in_dir(out_dir);
    let mut buf = Vec::new();
    crate::analysis::write_metrics(&outcome.metrics, &mut buf)?;
    crate::codec::write_atomic(&paths.metrics, &buf)?;
    crate::model::save_checkpoint(&outcome.model, &paths.checkpoint)?;
    if let Some(store) = &outcome.store {
        store.save(&paths.knowledge)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_data;
    use crate::sampler::rng_from_seed;

    fn net() -> NetworkConfig {
        NetworkConfig {
            features: 4,
            classes: 3,
            stage_widths: vec![6, 8],
            stage_blocks: vec![3, 3],
        }
    }

    fn batch() -> Batch {
        gen_data(3, 4, 4, 0.5, 0)
            .unwrap()
            .batch(&[0, 5, 9, 2, 7], 3)
            .unwrap()
    }

    fn ctx() -> StepContext {
        StepContext {
            step: 0,
            epoch: 1,
            lr: 0.05,
        }
    }

    fn p(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn supervision_routing() {
        let mut store = GroupKnowledgeStore::new(3, 2, 2).unwrap();
        store.update(1, &[0], &p(&[vec![1.0, 0.0]]), 0.5).unwrap();
        store.update(3, &[0], &p(&[vec![0.0, 1.0]]), 0.5).unwrap();
        store.update(2, &[1], &p(&[vec![0.3, 0.7]]), 0.5).unwrap();

        let hg3 = supervision_select(SupervisionMode::Hg, 3, &store, &[0, 1]).unwrap();
        assert_eq!(hg3.source_group, Some(2));
        assert_eq!(hg3.valid, vec![false, true]);
        assert_eq!(
            supervision_select(SupervisionMode::Hg, 1, &store, &[0])
                .unwrap()
                .source_group,
            Some(1)
        );
        assert_eq!(
            supervision_select(SupervisionMode::Lg, 3, &store, &[0])
                .unwrap()
                .source_group,
            Some(1)
        );
        assert_eq!(
            supervision_select(SupervisionMode::Sg, 2, &store, &[0])
                .unwrap()
                .source_group,
            Some(2)
        );

        let ag = supervision_select(SupervisionMode::Ag, 2, &store, &[0, 1]).unwrap();
        assert_eq!(ag.source_group, None);
        assert_eq!(ag.targets.row(0), &[0.5, 0.5]);
        assert_eq!(ag.targets.row(1), &[0.3, 0.7]);
        assert_eq!(ag.valid, vec![true, true]);

        let fresh = GroupKnowledgeStore::new(3, 2, 2).unwrap();
        let ag = supervision_select(SupervisionMode::Ag, 1, &fresh, &[0, 1]).unwrap();
        assert_eq!(ag.valid, vec![false, false]);
    }

    #[test]
    fn first_gkt_step_has_no_kl() {
        let mut model = ModelParams::build(&net(), 1).unwrap();
        let mut store = GroupKnowledgeStore::new(3, 12, 3).unwrap();
        let mut state = SisState::new(&net(), 3).unwrap();
        let cfg = TrainConfig::default();
        let r = gkt_step(
            &mut model,
            &mut store,
            &mut state,
            &batch(),
            &cfg,
            &ctx(),
            &mut rng_from_seed(0),
        )
        .unwrap();
        assert_eq!(r.kl_loss, 0.0);
        assert_eq!(r.total_loss, r.ce_loss);
        assert_eq!(r.supervised_sample_fraction, 0.0);
        assert_eq!(r.group, Some(1));
        assert_eq!(state.group, 2);
        for &i in &batch().indices {
            assert!(store.is_initialized(1, i));
        }
    }

    #[test]
    fn matching_knowledge_gives_zero_kl() {
        let cfg = TrainConfig {
            rule: SamplingRule::LinearDecay { p_last: 1.0 },
            ..TrainConfig::default()
        };
        let mut model = ModelParams::build(&net(), 1).unwrap();
        let b = batch();
        let probs =
            crate::tensor::softmax(&model.forward(&net().full_mask(), &b.x).unwrap()).unwrap();
        let mut store = GroupKnowledgeStore::new(3, 12, 3).unwrap();
        store.update(1, &b.indices, &probs, 0.5).unwrap();
        let mut state = SisState::new(&net(), 3).unwrap();
        let r = gkt_step(
            &mut model,
            &mut store,
            &mut state,
            &b,
            &cfg,
            &ctx(),
            &mut rng_from_seed(0),
        )
        .unwrap();
        assert_eq!(r.kl_loss, 0.0);
        assert_eq!(r.total_loss, r.ce_loss);
        assert_eq!(r.supervised_sample_fraction, 1.0);
    }

    #[test]
    fn loss_decomposition() {
        let cfg = TrainConfig::default();
        let mut model = ModelParams::build(&net(), 2).unwrap();
        let mut store = GroupKnowledgeStore::new(3, 12, 3).unwrap();
        let mut state = SisState::new(&net(), 3).unwrap();
        let mut rng = rng_from_seed(4);
        let b = batch();
        for step in 0..12 {
            let c = StepContext { step, ..ctx() };
            let r = gkt_step(&mut model, &mut store, &mut state, &b, &cfg, &c, &mut rng).unwrap();
            assert!((r.total_loss - (r.ce_loss + cfg.beta * r.kl_loss)).abs() <= 1e-12);
            if step >= 3 {
                assert!(r.kl_loss > 0.0);
            }
        }
        // ce = 1, kl = 0.1, β = 2
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(1.0));
        let kl = tape.constant(Tensor::scalar(0.1));
        let t = tape.combine(ce, kl, 2.0).unwrap();
        assert!((tape.value(t).unwrap().data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn standard_step_perfect_predictions_have_zero_loss() {
        let net = NetworkConfig {
            features: 2,
            classes: 2,
            stage_widths: vec![2],
            stage_blocks: vec![1],
        };
        let mut model = ModelParams::build(&net, 0).unwrap();
        // identity stem, zero block, head scaling class evidence far beyond the clamp
        let set = |m: &mut ModelParams, name: &str, v: &[f64]| {
            let id = m.params().id_of(name).unwrap();
            m.params_mut().get_mut(id).data_mut().copy_from_slice(v);
        };
        set(&mut model, "stem.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut model, "stage1.block1.fc1.weight", &[0.0; 4]);
        set(&mut model, "stage1.block1.fc2.weight", &[0.0; 4]);
        set(&mut model, "head.weight", &[1e4, -1e4, -1e4, 1e4]);
        let d = Dataset::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]).unwrap();
        let b = d.batch(&[0, 1], 2).unwrap();
        let r = standard_step(&mut model, &b, &TrainConfig::default(), &ctx()).unwrap();
        assert_eq!(r.ce_loss, 0.0);
    }

    #[test]
    fn stodepth_with_full_survival_equals_standard() {
        let cfg = TrainConfig {
            method: Method::Stodepth,
            rule: SamplingRule::LinearDecay { p_last: 1.0 },
            ..TrainConfig::default()
        };
        let mut a = ModelParams::build(&net(), 3).unwrap();
        let mut b = a.clone();
        let ra = stodepth_step(&mut a, &batch(), &cfg, &ctx(), &mut rng_from_seed(1)).unwrap();
        let rb = standard_step(&mut b, &batch(), &cfg, &ctx()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.kl_loss, 0.0);
    }

    #[test]
    fn st_reductions() {
        // full-mask subnet: KL(p, p) = 0 and the loss is the main-net CE
        let cfg = TrainConfig {
            method: Method::St,
            rule: SamplingRule::LinearDecay { p_last: 1.0 },
            ..TrainConfig::default()
        };
        let mut model = ModelParams::build(&net(), 5).unwrap();
        let mut reference = model.clone();
        let r = st_step(&mut model, &batch(), &cfg, &ctx(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(r.kl_loss, 0.0);
        assert_eq!(r.total_loss, r.ce_loss);
        let s = standard_step(&mut reference, &batch(), &cfg, &ctx()).unwrap();
        assert_eq!(r.ce_loss, s.ce_loss);
        assert!(r.macs > s.macs);

        // λ = 0 trains only the main net through CE
        let cfg0 = TrainConfig {
            lambda: 0.0,
            rule: SamplingRule::Uniform,
            ..cfg
        };
        let mut a = ModelParams::build(&net(), 6).unwrap();
        let mut b = a.clone();
        st_step(&mut a, &batch(), &cfg0, &ctx(), &mut rng_from_seed(2)).unwrap();
        standard_step(&mut b, &batch(), &cfg0, &ctx()).unwrap();
        for ((_, _, x), (_, _, y)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                alpha: 0.0,
                ..Default::default()
            },
            TrainConfig {
                groups: 0,
                ..Default::default()
            },
            TrainConfig {
                beta: -1.0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                rule: SamplingRule::Edr { q: 1.0 },
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = gen_data(3, 4, 10, 0.5, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&cfg, &net(), &data, &data).unwrap();
        assert_eq!(out.model, ModelParams::build(&net(), cfg.seed).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn metric_records_are_tagged() {
        let rec = MetricRecord::Eval(EvalRecord {
            epoch: 2,
            main_acc: 0.5,
            subnet_mean_acc: None,
            large_subnet_mean_acc: None,
        });
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"kind":"eval","epoch":2,"main_acc":0.5}"#
        );
    }
}
