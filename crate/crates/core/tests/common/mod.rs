//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use gkt_core::data::{gen_data, Dataset};
use gkt_core::model::{ModelParams, NetworkConfig, SubnetMask};
use gkt_core::tensor::Tensor;

pub fn three_stage_net() -> NetworkConfig {
    NetworkConfig {
        features: 16,
        classes: 4,
        stage_widths: vec![16, 32, 64],
        stage_blocks: vec![4, 4, 4],
    }
}

/// Training and held-out splits of the 4-class synthetic corpus.
pub fn synthetic_splits(seed: u64) -> (Dataset, Dataset) {
    (
        gen_data(4, 16, 500, 0.35, seed).unwrap(),
        gen_data(4, 16, 250, 0.35, seed.wrapping_add(1000)).unwrap(),
    )
}

/// EDR weights written out directly: count `j` of `l` gets `u^(l-j+1)`.
pub fn edr_oracle(q: f64, stages: usize, stage: usize, support: usize) -> Vec<f64> {
    let u = q.powf((stages - stage + 1) as f64);
    let w: Vec<f64> = (1..=support)
        .map(|j| u.powf((support - j + 1) as f64))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Closed-form EMA: after touches `p_1..p_n` with rates `α_1..α_n`, the row
/// is `Σ_i c_i p_i` with `c_1 = ∏_{j>1}(1-α_j)` and
/// `c_i = α_i ∏_{j>i}(1-α_j)`.
pub fn ema_oracle(history: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let n = history.len();
    let k = history[0].0.len();
    let mut out = vec![0.0; k];
    for i in 0..n {
        let lead = if i == 0 { 1.0 } else { history[i].1 };
        let tail: f64 = history[i + 1..].iter().map(|(_, a)| 1.0 - a).product();
        for (o, v) in out.iter_mut().zip(&history[i].0) {
            *o += lead * tail * v;
        }
    }
    out
}

/// Tau-a by explicit comparison of every pair.
pub fn kendall_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..n {
        for j in 0..n {
            if i >= j {
                continue;
            }
            let up = (xs[i] < xs[j] && ys[i] < ys[j]) || (xs[i] > xs[j] && ys[i] > ys[j]);
            let down = (xs[i] < xs[j] && ys[i] > ys[j]) || (xs[i] > xs[j] && ys[i] < ys[j]);
            concordant += up as i64;
            discordant += down as i64;
        }
    }
    (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `CE(p, y) + β·KL(target ‖ p)` evaluated without the tape: CE is the batch
/// mean, KL the mean over `valid` rows (zero if none), logs clamped at 1e-12.
pub fn gkt_loss_oracle(
    model: &ModelParams,
    mask: &SubnetMask,
    x: &Tensor,
    labels: &[usize],
    target: &Tensor,
    valid: &[bool],
    beta: f64,
) -> f64 {
    let logits = model.forward(mask, x).unwrap();
    let ln = |v: f64| v.max(1e-12).ln();
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut n_valid = 0;
    for r in 0..logits.rows() {
        let p = softmax_row(logits.row(r));
        ce -= ln(p[labels[r]]);
        if valid[r] {
            n_valid += 1;
            kl += target
                .row(r)
                .iter()
                .zip(&p)
                .map(|(t, q)| t * (ln(*t) - ln(*q)))
                .sum::<f64>();
        }
    }
    ce /= logits.rows() as f64;
    if n_valid > 0 {
        kl /= n_valid as f64;
    }
    ce + beta * kl
}

/// Softmax regression trained for one epoch of per-sample SGD; returns the
/// training accuracy afterwards.
pub fn logistic_probe_accuracy(data: &Dataset, classes: usize, lr: f64) -> f64 {
    let f = data.features();
    let mut w = vec![0.0; classes * (f + 1)];
    let score = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let row = &w[c * (f + 1)..(c + 1) * (f + 1)];
                row[f] + row[..f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    for i in 0..data.len() {
        let x = data.sample(i);
        let p = softmax_row(&score(&w, x));
        for c in 0..classes {
            let g = p[c] - (data.labels()[i] == c) as u8 as f64;
            let row = &mut w[c * (f + 1)..(c + 1) * (f + 1)];
            for (wj, xj) in row[..f].iter_mut().zip(x) {
                *wj -= lr * g * xj;
            }
            row[f] -= lr * g;
        }
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let s = score(&w, data.sample(i));
            let best = (0..classes).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            best == data.labels()[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters of skipped blocks that nonetheless received a gradient.
    pub leaked: usize,
    pub params: usize,
}

/// Compares tape gradients of the GKT loss with central differences on a
/// random two-stage net, a partial mask and half-initialized knowledge.
pub fn gradient_check(seed: u64) -> GradientCheck {
    use gkt_core::tensor::Tape;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let net = NetworkConfig {
        features: 5,
        classes: 3,
        stage_widths: vec![6, 8],
        stage_blocks: vec![3, 3],
    };
    let mut model = ModelParams::build(&net, seed).unwrap();
    // non-zero biases so their gradients are exercised away from init
    let ids: Vec<_> = model.params().iter().map(|(id, _, _)| id).collect();
    for &id in &ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let mask = SubnetMask::new(vec![2, 1]);
    let b = 6;
    let x = Tensor::new(
        vec![b, 5],
        (0..b * 5).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let y = Tensor::one_hot(&labels, 3).unwrap();
    let mut target = Vec::new();
    for _ in 0..b {
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        target.extend(raw.into_iter().map(|v| v / s));
    }
    let target = Tensor::new(vec![b, 3], target).unwrap();
    let valid: Vec<bool> = (0..b).map(|i| i % 2 == 0).collect();
    let beta = 2.0;

    let grads = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = model.forward_taped(&mut tape, &mask, xv).unwrap();
        let p = tape.softmax(logits).unwrap();
        let ce = tape.cross_entropy(p, &y).unwrap();
        let kl = tape.kl_divergence(&target, p, &valid).unwrap();
        let total = tape.combine(ce, kl, beta).unwrap();
        tape.backward(total).unwrap()
    };
    let active = model.active_params(&mask);
    let leaked = ids
        .iter()
        .filter(|id| !active.contains(id) && grads.contains(**id))
        .count();

    let h = 1e-6;
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for &id in &active {
        let analytic = grads
            .get(id)
            .expect("active parameter has a gradient")
            .clone();
        for i in 0..analytic.len() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = gkt_loss_oracle(&model, &mask, &x, &labels, &target, &valid, beta);
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = gkt_loss_oracle(&model, &mask, &x, &labels, &target, &valid, beta);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            max_rel_error = max_rel_error.max(rel);
            checked += 1;
        }
    }
    GradientCheck {
        max_rel_error,
        checked,
        leaked,
        params: model.params().numel(),
    }
}
