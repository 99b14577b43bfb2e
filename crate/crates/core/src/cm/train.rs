//! Consistency training with a stop-gradient target on adjacent grid levels.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nn::{Act, Scalar};
use super::optim::{ema_update, RAdam, RAdamSettings};
use super::{discretization_schedule, noise_grid, CmConfig, ConsistencyModel, ParamSet};
use crate::channel::ChannelSample;
use crate::denoiser::complex_to_channels;
use crate::rng::rng_from;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Evaluate the held-out loss every this many steps (0 disables).
    pub eval_every: usize,
    /// Number of held-out samples used per evaluation.
    pub eval_samples: usize,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            eval_every: 500,
            eval_samples: 64,
            log_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// Mean training loss over the first `n` recorded steps.
    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.records.len()).max(1);
        self.records[..n].iter().map(|r| r.train_loss).sum::<f64>() / n as f64
    }

    /// Mean training loss over the last `n` recorded steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.records.len()).max(1);
        let start = self.records.len() - n;
        self.records[start..].iter().map(|r| r.train_loss).sum::<f64>() / n as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let with_test = self.records.iter().any(|r| r.test_loss.is_some());
        let mut out = csv::Writer::from_writer(w);
        if with_test {
            out.write_record(["step", "train_loss", "test_loss"])?;
        } else {
            out.write_record(["step", "train_loss"])?;
        }
        for r in &self.records {
            let mut row = vec![r.step.to_string(), format!("{:e}", r.train_loss)];
            if with_test {
                row.push(r.test_loss.map(|v| format!("{v:e}")).unwrap_or_default());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// One consistency-training minibatch in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub clean: Vec<Vec<f32>>,
    pub noise: Vec<Vec<f32>>,
    pub t_hi: Vec<f64>,
    pub t_lo: Vec<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Draws samples, adjacent level pairs and shared noise for one step.
    pub fn draw<R: Rng + ?Sized>(data: &[Vec<f32>], grid: &[f64], batch: usize, rng: &mut R) -> Self {
        let mut out = Self {
            clean: Vec::with_capacity(batch),
            noise: Vec::with_capacity(batch),
            t_hi: Vec::with_capacity(batch),
            t_lo: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let idx = rng.random_range(0..data.len());
            let level = rng.random_range(0..grid.len() - 1);
            let len = data[idx].len();
            out.clean.push(data[idx].clone());
            out.noise.push((0..len).map(|_| StandardNormal.sample(&mut *rng)).collect());
            out.t_lo.push(grid[level]);
            out.t_hi.push(grid[level + 1]);
        }
        out
    }

    /// Deterministic evaluation batch: level `j mod (k − 1)` for sample `j`
    /// and per-sample seeded noise.
    fn stratified(data: &[Vec<f32>], grid: &[f64], seed: u64) -> Self {
        let mut out = Self {
            clean: data.to_vec(),
            noise: Vec::with_capacity(data.len()),
            t_hi: Vec::with_capacity(data.len()),
            t_lo: Vec::with_capacity(data.len()),
        };
        for (j, x) in data.iter().enumerate() {
            let mut rng = rng_from(seed, &[j as u64]);
            out.noise.push((0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect());
            let level = j % (grid.len() - 1);
            out.t_lo.push(grid[level]);
            out.t_hi.push(grid[level + 1]);
        }
        out
    }
}

/// Converts angular channels to normalized 2-channel training tensors.
pub fn training_tensors(samples: &[ChannelSample], scale: f64) -> Result<Vec<Vec<f32>>> {
    samples
        .iter()
        .map(|s| {
            let (n_r, n_t) = s.angular.shape();
            let t = complex_to_channels(&s.angular_vec(), n_r, n_t)?;
            Ok(t.data.iter().map(|&v| (v * scale) as f32).collect())
        })
        .collect()
}

/// Normalization making the per-entry standard deviation of the real
/// representation equal to `sigma_data`.
pub fn normalization_scale(samples: &[ChannelSample], sigma_data: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for s in samples {
        for v in s.angular.iter() {
            for x in [v.re, v.im] {
                sum += x;
                sum_sq += x * x;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mean = sum / count as f64;
    let var = sum_sq / count as f64 - mean * mean;
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::ZeroSignal);
    }
    Ok(sigma_data / var.sqrt())
}

fn noisy<T: Scalar>(clean: &[f32], noise: &[f32], t: f64) -> Vec<T> {
    clean
        .iter()
        .zip(noise)
        .map(|(&c, &z)| T::lit(c as f64) + T::lit(t) * T::lit(z as f64))
        .collect()
}

fn model_output<T: Scalar>(
    cfg: &CmConfig,
    model: &ConsistencyModel,
    params: &[T],
    x: &[T],
    t: f64,
) -> (Vec<T>, super::unet::Tape<T>) {
    let (n_r, n_t) = model.shape();
    let c_in = T::lit(cfg.c_in(t));
    let xin = Act::from_vec(2, n_r, n_t, x.iter().map(|&v| v * c_in).collect());
    let (f, tape) = model.net().forward(params, xin, cfg.c_noise(t));
    let (skip, out) = (T::lit(cfg.c_skip(t)), T::lit(cfg.c_out(t)));
    let y = x.iter().zip(&f.data).map(|(&a, &b)| skip * a + out * b).collect();
    (y, tape)
}

/// Stop-gradient targets `f(x + t_lo·z, t_lo)` for a batch.
pub fn consistency_targets<T: Scalar>(model: &ConsistencyModel, params: &[T], batch: &TrainingBatch) -> Vec<Vec<T>> {
    let cfg = model.config();
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let x = noisy::<T>(&batch.clean[i], &batch.noise[i], batch.t_lo[i]);
            model_output(cfg, model, params, &x, batch.t_lo[i]).0
        })
        .collect()
}

fn sample_loss<T: Scalar>(
    model: &ConsistencyModel,
    params: &[T],
    batch: &TrainingBatch,
    i: usize,
    target: &[T],
    grad_weight: Option<f64>,
) -> (f64, Option<Vec<T>>) {
    let cfg = model.config();
    let t = batch.t_hi[i];
    let x = noisy::<T>(&batch.clean[i], &batch.noise[i], t);
    let (y, tape) = model_output(cfg, model, params, &x, t);
    let diff: Vec<T> = y.iter().zip(target).map(|(&a, &b)| a - b).collect();
    let d2: f64 = diff.iter().map(|d| d.to_f64().unwrap_or(f64::NAN).powi(2)).sum();
    let c = cfg.huber_c;
    let root = (d2 + c * c).sqrt();
    let loss = root - c;
    let grads = grad_weight.map(|w| {
        let coef = T::lit(cfg.c_out(t) * w / root);
        let (n_r, n_t) = model.shape();
        let dout = Act::from_vec(2, n_r, n_t, diff.iter().map(|&d| d * coef).collect());
        let mut g = vec![T::zero(); params.len()];
        model.net().backward(params, &mut g, &tape, &dout);
        g
    });
    (loss, grads)
}

/// Mean Pseudo-Huber loss against fixed targets and, optionally, its
/// parameter gradient. Per-sample work runs in parallel; gradients are
/// reduced in sample order so the result is independent of thread count.
pub fn batch_loss_fixed_target<T: Scalar>(
    model: &ConsistencyModel,
    params: &[T],
    batch: &TrainingBatch,
    targets: &[Vec<T>],
    with_grad: bool,
) -> (f64, Option<Vec<T>>) {
    let n = batch.len();
    let weight = with_grad.then_some(1.0 / n as f64);
    let chunk = rayon::current_num_threads().max(1);
    let mut total = 0.0;
    let mut grads = with_grad.then(|| vec![T::zero(); params.len()]);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let parts: Vec<(f64, Option<Vec<T>>)> = (start..end)
            .into_par_iter()
            .map(|i| sample_loss(model, params, batch, i, &targets[i], weight))
            .collect();
        for (loss, g) in parts {
            total += loss;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }
    (total / n as f64, grads)
}

/// Mean consistency loss on `data` at discretization size `k` with
/// stratified levels and seeded noise.
pub fn evaluate_loss(model: &ConsistencyModel, set: ParamSet, data: &[Vec<f32>], k: usize, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let grid = noise_grid(model.config(), k);
    let batch = TrainingBatch::stratified(data, &grid, seed);
    let params = model.params(set);
    let targets = consistency_targets(model, params, &batch);
    Ok(batch_loss_fixed_target(model, params, &batch, &targets, false).0)
}

/// Per-entry denoising MSE of the model and of the identity map at level `t`
/// on normalized tensors.
pub fn denoising_mse(model: &ConsistencyModel, set: ParamSet, data: &[Vec<f32>], t: f64, seed: u64) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let (n_r, n_t) = model.shape();
    let results: Vec<Result<(f64, f64)>> = data
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let mut rng = rng_from(seed, &[j as u64]);
            let noisy: Vec<f64> = x
                .iter()
                .map(|&c| { let z: f64 = StandardNormal.sample(&mut rng); c as f64 + t * z })
                .collect();
            let out = model.forward_with(set, &Act::from_vec(2, n_r, n_t, noisy.clone()), t)?;
            let m: f64 = out.data.iter().zip(x).map(|(o, &c)| (o - c as f64).powi(2)).sum();
            let id: f64 = noisy.iter().zip(x).map(|(o, &c)| (o - c as f64).powi(2)).sum();
            Ok((m, id))
        })
        .collect();
    let mut acc = (0.0, 0.0);
    let mut entries = 0usize;
    for (r, x) in results.into_iter().zip(data) {
        let (m, id) = r?;
        acc.0 += m;
        acc.1 += id;
        entries += x.len();
    }
    Ok((acc.0 / entries as f64, acc.1 / entries as f64))
}

/// Mean `‖f(x + t z, t) − f(x + t' z, t')‖` with shared noise.
pub fn self_consistency_gap(
    model: &ConsistencyModel,
    set: ParamSet,
    data: &[Vec<f32>],
    t: f64,
    t_prime: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let (n_r, n_t) = model.shape();
    let gaps: Vec<Result<f64>> = data
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let mut rng = rng_from(seed, &[j as u64]);
            let z: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let at = |level: f64| -> Result<Act<f64>> {
                let v = x.iter().zip(&z).map(|(&c, &n)| c as f64 + level * n).collect();
                model.forward_with(set, &Act::from_vec(2, n_r, n_t, v), level)
            };
            let (a, b) = (at(t)?, at(t_prime)?);
            Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        })
        .collect();
    let mut sum = 0.0;
    for g in gaps {
        sum += g?;
    }
    Ok(sum / data.len() as f64)
}

fn finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Consistency training on the angular channels of `train_set`.
///
/// The normalization scale is estimated from the training set. Per-step
/// randomness is drawn sequentially from `rng`, so a fixed seed reproduces
/// the loss trace regardless of the worker count.
pub fn train<R: Rng + ?Sized>(
    train_set: &[ChannelSample],
    test_set: Option<&[ChannelSample]>,
    config: &CmConfig,
    options: &TrainOptions,
    rng: &mut R,
) -> Result<(ConsistencyModel, LossTrace)> {
    config.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidConfig("training set is empty".into()))?;
    let (n_r, n_t) = first.angular.shape();
    if let Some(bad) = train_set.iter().find(|s| s.angular.shape() != (n_r, n_t)) {
        return Err(Error::ShapeMismatch {
            expected: format!("{n_r}x{n_t}"),
            found: format!("{}x{}", bad.angular.nrows(), bad.angular.ncols()),
        });
    }
    let scale = normalization_scale(train_set, config.sigma_data)?;
    let data = training_tensors(train_set, scale)?;
    let test_data = match test_set {
        Some(t) if !t.is_empty() && options.eval_every > 0 => {
            let take = options.eval_samples.max(1).min(t.len());
            Some(training_tensors(&t[..take], scale)?)
        }
        _ => None,
    };

    let mut model = ConsistencyModel::new(config, n_r, n_t, scale, rng)?;
    let mut opt = RAdam::new(RAdamSettings::with_lr(config.lr), model.net().param_count());
    let mut trace = LossTrace::default();
    let started = Instant::now();
    log::info!(
        "training {} params on {} samples, scale {scale:.6}",
        model.net().param_count(),
        data.len()
    );

    for step in 0..config.steps {
        let k = discretization_schedule(config, step, config.steps);
        let grid = noise_grid(config, k);
        let batch = TrainingBatch::draw(&data, &grid, config.batch, rng);
        let params = model.params(ParamSet::Online);
        let targets = consistency_targets(&model, params, &batch);
        let (loss, grads) = batch_loss_fixed_target(&model, params, &batch, &targets, true);
        let grads = grads.expect("gradient requested");
        if !loss.is_finite() || !finite(&grads) {
            let max_param = params.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: format!("loss={loss}, k={k}, lr={}, max|theta|={max_param}", config.lr),
            });
        }
        let (online, ema) = model.params_mut();
        opt.step(online, &grads);
        ema_update(ema, online, config.ema_decay);

        let test_loss = match &test_data {
            Some(td) if (step + 1) % options.eval_every == 0 || step + 1 == config.steps => {
                Some(evaluate_loss(&model, ParamSet::Online, td, k, 0x7e57)?)
            }
            _ => None,
        };
        trace.records.push(LossRecord {
            step,
            train_loss: loss,
            test_loss,
        });
        if options.log_every > 0 && (step % options.log_every == 0 || step + 1 == config.steps) {
            log::info!(
                "step {step} k {k} loss {loss:.6e}{} ({:.1}s)",
                test_loss.map(|t| format!(" test {t:.6e}")).unwrap_or_default(),
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ArrayGeometry, ChannelDataset, PathSamplerConfig};
    use crate::cm::BackboneConfig;
    use crate::rng::seeded;

    fn tiny_config(steps: usize) -> CmConfig {
        CmConfig {
            batch: 4,
            steps,
            backbone: BackboneConfig {
                base_channels: 4,
                channel_mults: vec![1, 2],
                res_blocks: 1,
                emb_dim: 8,
            },
            ..CmConfig::desk()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Vec<ChannelSample> {
        ChannelDataset::synthetic(
            &mut seeded(seed),
            ArrayGeometry::new(2, 2),
            ArrayGeometry::new(2, 2),
            &PathSamplerConfig::default(),
            n,
            "s",
        )
        .unwrap()
        .samples
    }

    #[test]
    fn scale_normalizes_std() {
        let data = tiny_data(50, 1);
        let s = normalization_scale(&data, 0.02228).unwrap();
        let t: Vec<f32> = training_tensors(&data, s).unwrap().concat();
        let n = t.len() as f64;
        let mean = t.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.02228).abs() < 1e-6);
    }

    #[test]
    fn training_is_reproducible() {
        let data = tiny_data(20, 2);
        let opts = TrainOptions {
            eval_every: 0,
            ..TrainOptions::default()
        };
        let (_, a) = train(&data, None, &tiny_config(6), &opts, &mut seeded(9)).unwrap();
        let (_, b) = train(&data, None, &tiny_config(6), &opts, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 6);
    }

    #[test]
    fn test_loss_recorded_on_schedule() {
        let data = tiny_data(20, 3);
        let opts = TrainOptions {
            eval_every: 2,
            eval_samples: 4,
            log_every: 0,
        };
        let (_, trace) = train(&data[..16], Some(&data[16..]), &tiny_config(5), &opts, &mut seeded(1)).unwrap();
        let evaluated: Vec<usize> = trace.records.iter().filter(|r| r.test_loss.is_some()).map(|r| r.step).collect();
        assert_eq!(evaluated, vec![1, 3, 4]);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,train_loss,test_loss\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn empty_training_set_rejected() {
        let opts = TrainOptions::default();
        assert!(train(&[], None, &tiny_config(2), &opts, &mut seeded(1)).is_err());
    }
}
