//! Loss, optimiser, learning-rate schedule, augmentation and the training loop.

use std::io::Write;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Largest rotation angle per axis in radians; 0 disables augmentation.
    pub max_rotation: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 65,
            warmup_epochs: 5,
            base_lr: 0.1,
            decay_steps: vec![35, 55],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 4e-4,
            batch_size: 64,
            seed: 0,
            max_rotation: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        let mut previous = self.warmup_epochs;
        for &step in &self.decay_steps {
            if step <= previous || step > self.epochs {
                return bad(format!(
                    "decay steps {:?} must increase after warmup {} and not exceed {} epochs",
                    self.decay_steps, self.warmup_epochs, self.epochs
                ));
            }
            previous = step;
        }
        if !(self.base_lr >= 0.0 && self.decay_factor > 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("learning rate, decay factor or momentum out of range".into());
        }
        if !(self.weight_decay >= 0.0 && self.max_rotation >= 0.0) {
            return bad("weight decay and rotation bound must be nonnegative".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then a step decay at every listed epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.warmup_epochs {
        return config.base_lr * (epoch + 1) as f64 / config.warmup_epochs as f64;
    }
    let passed = config.decay_steps.iter().filter(|&&s| s <= epoch).count();
    config.base_lr * config.decay_factor.powi(passed as i32)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = match *tape.shape(logits) {
        [b, k] => (b, k),
        ref other => return Err(Error::shape(format!("cross_entropy: expected (batch, classes), got {other:?}"))),
    };
    if labels.len() != b {
        return Err(Error::shape(format!("cross_entropy: {} labels for a batch of {b}", labels.len())));
    }
    if b == 0 {
        return Err(Error::shape("cross_entropy: empty batch"));
    }
    let mut onehot = vec![T::zero(); b * k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!("label {label} outside 0..{k}")));
        }
        onehot[i * k + label] = T::one();
    }
    let logp = tape.log_softmax(logits)?;
    let target = tape.leaf(Tensor::new(vec![b, k], onehot)?);
    let picked = tape.mul(logp, target)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptimizerState { velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// `g = grad + wd p; v = m v + g; p -= lr (g + m v)`. Weight decay applies
/// where `decay[i]` is set.
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() || params.len() != decay.len() {
        return Err(Error::shape("sgd: parameter, gradient and state counts differ"));
    }
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for (((p, g), v), &d) in params.iter_mut().zip(grads).zip(&mut state.velocity).zip(decay) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!("sgd: gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        let wd = if d { T::lit(weight_decay) } else { T::zero() };
        let pv = p.data_mut();
        let vv = v.data_mut();
        for ((pi, &gi), vi) in pv.iter_mut().zip(g.data()).zip(vv.iter_mut()) {
            let step = gi + wd * *pi;
            *vi = m * *vi + step;
            *pi -= lr * (step + m * *vi);
        }
    }
    Ok(())
}

/// `Rx(a) Ry(b) Rz(c)` as a row-major 3x3 matrix.
pub fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let [(sa, ca), (sb, cb), (sc, cc)] = angles.map(f64::sin_cos);
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    };
    mul(mul(rx, ry), rz)
}

/// Applies `r` to every joint of a `(3, T, N)` sequence.
pub fn rotate<T: Scalar>(seq: &Tensor<T>, r: &[[f64; 3]; 3]) -> Result<Tensor<T>> {
    let plane = match *seq.shape() {
        [3, t, n] => t * n,
        ref other => return Err(Error::shape(format!("rotate: expected (3, T, N), got {other:?}"))),
    };
    let d = seq.data();
    let mut out = vec![T::zero(); d.len()];
    for k in 0..plane {
        let p = [d[k].as_f64(), d[plane + k].as_f64(), d[2 * plane + k].as_f64()];
        for (i, row) in r.iter().enumerate() {
            out[i * plane + k] = T::lit(row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
        }
    }
    Tensor::new(seq.shape().to_vec(), out)
}

/// Rotation with angles drawn uniformly from `[-max_angle, max_angle]` per axis.
pub fn random_rotate<T: Scalar>(seq: &Tensor<T>, max_angle: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if max_angle == 0.0 {
        return rotate(seq, &rotation_matrix([0.0; 3]));
    }
    let angles = [(); 3].map(|_| rng.random_range(-max_angle..=max_angle));
    rotate(seq, &rotation_matrix(angles))
}

/// Model inputs `(3, T, N)` with their labels.
#[derive(Debug, Clone)]
pub struct TrainSet<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> TrainSet<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for item in items {
        if item.shape() != shape.as_slice() {
            return Err(Error::shape(format!("batch mixes shapes {shape:?} and {:?}", item.shape())));
        }
        data.extend_from_slice(item.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    // first maximum wins ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode softmax scores `(samples, K)` in batches.
pub fn predict_scores<T: Scalar>(model: &Model<T>, set: &TrainSet<T>, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut scores = Vec::with_capacity(set.len());
    for chunk in set.inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        let logits = model.predict(&stack(&refs)?)?;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            scores.push(exp.into_iter().map(|e| e / z).collect());
        }
    }
    Ok(scores)
}

pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let correct = scores.iter().zip(labels).filter(|(s, &l)| argmax(s) == l).count();
    correct as f64 / labels.len() as f64
}

pub fn evaluate<T: Scalar>(model: &Model<T>, set: &TrainSet<T>, batch_size: usize) -> Result<f64> {
    Ok(accuracy(&predict_scores(model, set, batch_size)?, &set.labels))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

pub fn write_metrics_csv(w: &mut impl Write, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "epoch,lr,train_loss,train_acc,eval_acc")?;
    for m in metrics {
        let eval = m.eval_acc.map_or_else(|| "nan".to_string(), |a| a.to_string());
        writeln!(w, "{},{},{},{},{}", m.epoch, m.lr, m.train_loss, m.train_acc, eval)?;
    }
    Ok(())
}

/// One optimisation step; returns the summed loss and the number of correct predictions.
fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    config: &TrainConfig,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (loss, correct, grads, updates) = {
        let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Train);
        let x = ctx.constant(batch.clone());
        let logits = model.forward(&mut ctx, x)?;
        let loss = cross_entropy(ctx.tape, logits, labels)?;
        let params = ctx.param_vars().to_vec();
        let updates = std::mem::take(&mut ctx.moment_updates);
        let tape = &*ctx.tape;
        let k = tape.shape(logits)[1];
        let correct =
            tape.value(logits).data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
        let grads = tape.gradients(loss, &params)?;
        let grads: Vec<Tensor<T>> =
            params.iter().map(|&v| grads.get(v).cloned().expect("every parameter gets a gradient")).collect();
        (tape.value(loss).item().as_f64(), correct, grads, updates)
    };
    let store = model.store_mut();
    store.apply_moment_updates(updates);
    let decay = store.decay_mask().to_vec();
    sgd_nesterov_step(store.values_mut(), &grads, &decay, state, lr, config.momentum, config.weight_decay)?;
    Ok((loss * labels.len() as f64, correct))
}

/// Trains `model` and reports metrics after every epoch. `on_epoch` may stop
/// training early by returning `ControlFlow::Break`.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    train: &TrainSet<T>,
    eval: Option<&TrainSet<T>>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model<T>) -> ControlFlow<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train.labels.len() != train.len() {
        return Err(Error::Data("training inputs and labels differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(model.store().values());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let augmented = chunk
                .iter()
                .map(|&i| random_rotate(&train.inputs[i], config.max_rotation, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<T>> = augmented.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (l, c) = train_step(model, &mut state, &stack(&refs)?, &labels, lr, config)?;
            loss_sum += l;
            correct += c;
        }
        let eval_acc = match eval {
            Some(set) if !set.is_empty() => Some(evaluate(model, set, config.batch_size)?),
            _ => None,
        };
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc,
        };
        let flow = on_epoch(&row, model);
        metrics.push(row);
        if flow.is_break() {
            break;
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::nn::normal_init;
    use crate::tensor::finite_difference_gradient;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(lr_at(0, &c), 0.02));
        assert!(close(lr_at(4, &c), 0.1));
        assert!(close(lr_at(34, &c), 0.1));
        assert!(close(lr_at(35, &c), 0.01));
        assert!(close(lr_at(55, &c), 0.001));
        for e in 1..c.epochs {
            let (prev, cur) = (lr_at(e - 1, &c), lr_at(e, &c));
            if e < c.warmup_epochs {
                assert!(cur >= prev);
            } else {
                assert!(cur <= prev);
            }
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        for steps in [vec![5, 55], vec![35, 35], vec![35, 70], vec![55, 35]] {
            assert!(TrainConfig { decay_steps: steps, ..TrainConfig::default() }.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.leaf(Tensor::zeros(&[2, 8]));
        let loss = cross_entropy(&mut tape, uniform, &[3, 7]).unwrap();
        assert!((tape.value(loss).item() - 8f64.ln()).abs() < 1e-12);

        let confident = tape.leaf(Tensor::from_f64(&[1, 3], &[0.0, 60.0, 0.0]).unwrap());
        let loss = cross_entropy(&mut tape, confident, &[1]).unwrap();
        assert!(tape.value(loss).item() < 1e-20);

        assert!(cross_entropy(&mut tape, uniform, &[3, 8]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = normal_init::<f64>(&[3, 5], 1.0, &mut rng);
        let labels = [4, 0, 2];
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone());
        let loss = cross_entropy(&mut tape, x, &labels).unwrap();
        let grad = tape.gradients(loss, &[x]).unwrap().get(x).unwrap().clone();
        let fd = finite_difference_gradient(
            |v| {
                let mut t = Tape::new();
                let x = t.leaf(v.clone());
                let l = cross_entropy(&mut t, x, &labels)?;
                Ok(t.value(l).item())
            },
            &logits,
            1e-6,
        )
        .unwrap();
        for (a, b) in grad.data().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3));
        }
    }

    fn scalar_step(p: &mut Tensor<f64>, state: &mut OptimizerState<f64>, g: f64, lr: f64, wd: f64) {
        let grads = [Tensor::from_f64(&[1], &[g]).unwrap()];
        sgd_nesterov_step(std::slice::from_mut(p), &grads, &[true], state, lr, 0.9, wd).unwrap();
    }

    #[test]
    fn nesterov_two_step_trajectory() {
        let mut p = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let mut state = OptimizerState::new(std::slice::from_ref(&p));
        scalar_step(&mut p, &mut state, 1.0, 0.1, 0.0);
        assert!((p.data()[0] + 0.19).abs() < 1e-12);
        let before = p.data()[0];
        scalar_step(&mut p, &mut state, 1.0, 0.1, 0.0);
        // v = 0.9 * 1 + 1 = 1.9; step = 0.1 * (1 + 0.9 * 1.9) = 0.271
        assert!((p.data()[0] - before + 0.271).abs() < 1e-12);
    }

    #[test]
    fn optimizer_degenerate_cases() {
        let mut p = Tensor::from_f64(&[1], &[2.0]).unwrap();
        let mut state = OptimizerState::new(std::slice::from_ref(&p));
        scalar_step(&mut p, &mut state, 0.0, 0.1, 0.0);
        assert_eq!(p.data()[0], 2.0);
        scalar_step(&mut p, &mut state, 5.0, 0.0, 0.1);
        assert_eq!(p.data()[0], 2.0);

        // decay only: v1 = wd p0, p1 = p0 (1 - lr wd (1 + m)); closed form for the first step
        let (lr, wd) = (0.1, 0.5);
        let mut q = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let mut fresh = OptimizerState::new(std::slice::from_ref(&q));
        scalar_step(&mut q, &mut fresh, 0.0, lr, wd);
        assert!((q.data()[0] - (1.0 - lr * wd * 1.9)).abs() < 1e-15);

        let mut r = vec![Tensor::<f64>::zeros(&[2])];
        let mut s = OptimizerState::new(&r);
        assert!(sgd_nesterov_step(&mut r, &[Tensor::zeros(&[3])], &[true], &mut s, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn rotation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = normal_init::<f64>(&[3, 4, 5], 1.0, &mut rng);
        assert!(rotate(&seq, &rotation_matrix([0.0; 3])).unwrap().bit_eq(&seq));
        let rotated = random_rotate(&seq, 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let again = random_rotate(&seq, 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(rotated.bit_eq(&again));
        assert!(!rotated.bit_eq(&seq));
        let norm = |t: &Tensor<f64>, k: usize| (0..3).map(|c| t.data()[c * 20 + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..20 {
            assert!((norm(&seq, k) - norm(&rotated, k)).abs() < 1e-6);
        }
    }

    fn tiny_set(seed: u64) -> TrainSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..4)
            .map(|i| normal_init::<f64>(&[3, 4, 25], 1.0, &mut rng).map(|v| v + if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        TrainSet { inputs, labels: vec![0, 1, 0, 1] }
    }

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig { channels: vec![8, 8, 8], temporal_kernel: 3, classes: 2, frames: 4, ism_width: 4, ..ModelConfig::default() };
        build_model(&cfg, 0).unwrap()
    }

    #[test]
    fn loop_is_deterministic_and_reports_each_epoch() {
        let cfg = TrainConfig { epochs: 3, warmup_epochs: 1, decay_steps: vec![2], batch_size: 2, ..TrainConfig::default() };
        let set = tiny_set(0);
        let run = || {
            let mut model = tiny_model();
            let metrics = train_loop(&mut model, &set, Some(&set), &cfg, |_, _| ControlFlow::Continue(())).unwrap();
            (metrics, model)
        };
        let ((m1, a), (m2, b)) = (run(), run());
        assert_eq!(m1.len(), 3);
        assert_eq!(m1, m2);
        assert!(a.store().values().iter().zip(b.store().values()).all(|(p, q)| p.bit_eq(q)));

        let mut model = tiny_model();
        let stopped = train_loop(&mut model, &set, None, &cfg, |_, _| ControlFlow::Break(())).unwrap();
        assert_eq!(stopped.len(), 1);
        assert_eq!(stopped[0].eval_acc, None);
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &stopped).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,train_acc,eval_acc\n0,"));
        assert!(text.trim_end().ends_with(",nan"));
    }

    #[test]
    fn initial_loss_is_log_k() {
        // the zero-initialised head makes every class equally likely
        let mut model = tiny_model();
        let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, decay_steps: vec![], base_lr: 0.0, ..TrainConfig::default() };
        let metrics = train_loop(&mut model, &tiny_set(1), None, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
        assert!((metrics[0].train_loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut model = tiny_model();
        let empty = TrainSet::<f64> { inputs: vec![], labels: vec![] };
        assert!(train_loop(&mut model, &empty, None, &TrainConfig::default(), |_, _| ControlFlow::Continue(())).is_err());
    }
}
