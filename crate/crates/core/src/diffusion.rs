//! DDPM noise schedule, the training loop and the deterministic DDIM
//! sampler.
//!
//! The sampler's per-step callback receives the full predicted-clean batch
//! and may rewrite it; the next step is derived from the (possibly
//! modified) prediction. That callback is the seam where attention control
//! and long-form composition plug in.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dit::{DitModel, Params, TextCondition};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor2D};

/// Linear-beta DDPM schedule with cached cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        for pair in alpha_bars.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::config("alpha-bar must be strictly decreasing"));
            }
        }
        if *alpha_bars.last().unwrap() >= 1e-2 {
            return Err(Error::config(format!(
                "terminal alpha-bar {} too large; endpoint is not noise-like",
                alpha_bars.last().unwrap()
            )));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// The default training schedule: 1000 linear steps, 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative product of alphas at `t`; index -1 is treated as 1.
    pub fn alpha_bar(&self, t: isize) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bars[t as usize]
        }
    }

    /// Closed-form forward process: `sqrt(abar) x0 + sqrt(1-abar) eps`.
    pub fn q_sample(&self, x0: &Tensor2D, eps: &Tensor2D, t: usize) -> Result<Tensor2D> {
        let ab = self.alpha_bar(t as isize);
        Ok(x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?)
    }

    /// Exact inversion of [`NoiseSchedule::q_sample`] given the noise.
    pub fn recover_x0(&self, xt: &Tensor2D, eps: &Tensor2D, t: usize) -> Result<Tensor2D> {
        let ab = self.alpha_bar(t as isize);
        Ok(xt.sub(&eps.scale((1.0 - ab).sqrt()))?.scale(1.0 / ab.sqrt()))
    }
}

/// Trainer hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub inv_gamma: f64,
    pub power: f64,
    pub warmup: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub seed: u64,
    /// Emit a log line every this many steps (0 = silent).
    pub log_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            ema_decay: 0.999,
            inv_gamma: 1e6,
            power: 0.5,
            warmup: 0.99,
            steps: 2000,
            batch_size: 8,
            cond_dropout: 0.1,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.inv_gamma > 0.0 && self.power > 0.0) {
            return Err(Error::config("lr, inv_gamma and power must be positive"));
        }
        if !(self.warmup > 0.0 && self.warmup < 1.0) {
            return Err(Error::config("warmup must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Inverse-decay learning rate. The decay exponent ramps in with the
/// exponential warmup factor, so early steps hold the base rate:
/// `lr(0) = lr`, and past warmup `lr(t) = lr * (1 + t/gamma)^(-power)`.
pub fn inverse_lr(cfg: &TrainerConfig, step: usize) -> f64 {
    let ramp = 1.0 - cfg.warmup.powf(step as f64 + 1.0);
    cfg.lr * (1.0 + step as f64 / cfg.inv_gamma).powf(-cfg.power * ramp)
}

/// One training example: model-space latent tokens, caption, duration.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub tokens: Tensor2D,
    pub caption: String,
    pub duration_s: f64,
}

/// Loss trace and EMA weights from a training run.
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub ema: Params,
}

fn params_to_map(p: &Params) -> BTreeMap<String, Tensor2D> {
    let mut map = BTreeMap::new();
    p.for_each(|n, t| {
        map.insert(n.to_string(), t.clone());
    });
    map
}

/// Epsilon-prediction training with AdamW, decoupled weight decay, EMA and
/// the inverse-decay schedule. The loss is masked to active-prefix frames.
pub fn train(
    model: &mut DitModel,
    dataset: &[TrainSample],
    cfg: &TrainerConfig,
    schedule: &NoiseSchedule,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("empty training dataset"));
    }
    let frames_max = dataset.iter().map(|s| s.tokens.rows()).max().unwrap();
    let channels = model.config().latent_channels;
    for (i, s) in dataset.iter().enumerate() {
        if s.tokens.cols() != channels {
            return Err(Error::shape(format!(
                "sample {i}: {} channels, model wants {channels}",
                s.tokens.cols()
            )));
        }
        if s.tokens.rows() != frames_max {
            return Err(Error::shape(format!(
                "sample {i}: {} frames, dataset max {frames_max}; pad samples to a shared length",
                s.tokens.rows()
            )));
        }
    }

    // Tokenized captions are fixed; embeddings are re-gathered every step
    // because the embedding table trains.
    let token_ids: Vec<Vec<usize>> = dataset
        .iter()
        .map(|s| model.embed_text(&s.caption).map(|c| c.tokens))
        .collect::<Result<_>>()?;

    let mut m = params_to_map(&Params::zeros(model.config()));
    let mut v = m.clone();
    let mut ema = params_to_map(&model.params);
    let mut rng = SeededRng::new(cfg.seed).derive("trainer");
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let eps_adam = 1e-8;

    for step in 0..cfg.steps {
        // Draw a batch, reshuffling the dataset as it is consumed.
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = rng.permutation(dataset.len());
            }
            batch_idx.push(order.pop().unwrap());
        }

        // Per-element (t, noise, condition) draws happen on one stream in
        // batch order so runs are reproducible.
        struct Item {
            sample_idx: usize,
            t: usize,
            noisy: Tensor2D,
            eps: Tensor2D,
            cond: TextCondition,
        }
        let mut items = Vec::with_capacity(cfg.batch_size);
        for &si in &batch_idx {
            let s = &dataset[si];
            let t = rng.uniform_usize(schedule.steps());
            let eps = rng.normal_tensor(s.tokens.rows(), channels);
            let noisy = schedule.q_sample(&s.tokens, &eps, t)?;
            let cond = if rng.uniform() < cfg.cond_dropout {
                model.null_condition()
            } else {
                model.condition_from_tokens(token_ids[si].clone())
            };
            items.push(Item {
                sample_idx: si,
                t,
                noisy,
                eps,
                cond,
            });
        }

        // Forward/backward per element in parallel, reduced in batch order.
        let results: Vec<(f64, Params)> = items
            .par_iter()
            .map(|item| {
                let s = &dataset[item.sample_idx];
                let (y, tape) = model.forward_one_train(&item.noisy, item.t, &item.cond, s.duration_s)?;
                let active = tape_active(&tape);
                let count = (active * channels) as f64;
                let mut loss = 0.0;
                let mut d_y = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..active {
                    for c in 0..channels {
                        let diff = y.get(r, c) - item.eps.get(r, c);
                        loss += diff * diff / count;
                        d_y.set(r, c, 2.0 * diff / count);
                    }
                }
                let mut grads = Params::zeros(model.config());
                crate::dit::backward_one(model, &tape, &d_y, &mut grads)?;
                Ok((loss, grads))
            })
            .collect::<Result<_>>()?;

        let mut loss_sum = 0.0;
        let mut grad_acc = Params::zeros(model.config());
        for (loss, grads) in &results {
            loss_sum += loss;
            grad_acc.axpy(1.0, grads, 1.0 / cfg.batch_size as f64);
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Model(format!(
                "training diverged at step {step}: loss {loss}, lr {}",
                inverse_lr(cfg, step)
            )));
        }
        losses.push(loss);

        // AdamW with decoupled weight decay.
        let lr = inverse_lr(cfg, step);
        let gmap = params_to_map(&grad_acc);
        let bc1 = 1.0 - cfg.beta1.powi(step as i32 + 1);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32 + 1);
        model.params.for_each_mut(|name, w| {
            let g = &gmap[name];
            let mt = m.get_mut(name).unwrap();
            let vt = v.get_mut(name).unwrap();
            for i in 0..w.data().len() {
                let gi = g.data()[i];
                mt.data_mut()[i] = cfg.beta1 * mt.data()[i] + (1.0 - cfg.beta1) * gi;
                vt.data_mut()[i] = cfg.beta2 * vt.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = mt.data()[i] / bc1;
                let vhat = vt.data()[i] / bc2;
                let wi = w.data()[i];
                w.data_mut()[i] =
                    wi - lr * (mhat / (vhat.sqrt() + eps_adam) + cfg.weight_decay * wi);
            }
        });

        // EMA tracks the raw weights.
        model.params.for_each(|name, w| {
            let e = ema.get_mut(name).unwrap();
            for i in 0..w.data().len() {
                e.data_mut()[i] =
                    cfg.ema_decay * e.data()[i] + (1.0 - cfg.ema_decay) * w.data()[i];
            }
        });

        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!("train step {step}: loss {loss:.6}, lr {lr:.3e}");
        }
    }

    let mut ema_params = Params::zeros(model.config());
    ema_params.for_each_mut(|name, t| {
        *t = ema[name].clone();
    });
    Ok(TrainReport {
        losses,
        ema: ema_params,
    })
}

fn tape_active(tape: &crate::dit::Tape) -> usize {
    tape.active()
}

/// Sampler settings. `guidance_scale == 1` disables classifier-free
/// guidance (a single conditional pass per step).
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            seed: 0,
            guidance_scale: 3.0,
        }
    }
}

/// Batched deterministic DDIM sampling.
///
/// `predict` maps (noisy batch, t) to predicted noise. After each model
/// call the predicted-clean batch is handed to `callback`; its modified
/// contents drive the next step. Identical seeds give identical outputs.
pub fn sample(
    schedule: &NoiseSchedule,
    batch: usize,
    frames: usize,
    channels: usize,
    cfg: &SamplerConfig,
    predict: &mut dyn FnMut(&[Tensor2D], usize) -> Result<Vec<Tensor2D>>,
    callback: &mut dyn FnMut(usize, usize, &mut Vec<Tensor2D>) -> Result<()>,
) -> Result<Vec<Tensor2D>> {
    let t_train = schedule.steps();
    if cfg.steps == 0 || cfg.steps > t_train {
        return Err(Error::config(format!(
            "inference steps {} must lie in [1, {t_train}]",
            cfg.steps
        )));
    }
    let mut rng = SeededRng::new(cfg.seed).derive("sampler-init");
    let mut xs: Vec<Tensor2D> = (0..batch)
        .map(|_| rng.normal_tensor(frames, channels))
        .collect();

    for i in (0..cfg.steps).rev() {
        let t = ((i + 1) * t_train) / cfg.steps - 1;
        let t_prev = (i * t_train) as isize / cfg.steps as isize - 1;
        let ab_t = schedule.alpha_bar(t as isize);
        let ab_prev = schedule.alpha_bar(t_prev);

        let eps = predict(&xs, t)?;
        if eps.len() != batch {
            return Err(Error::shape(format!(
                "predictor returned {} tensors for batch {batch}",
                eps.len()
            )));
        }
        let mut pred_x0: Vec<Tensor2D> = (0..batch)
            .map(|b| {
                xs[b]
                    .sub(&eps[b].scale((1.0 - ab_t).sqrt()))
                    .map(|d| d.scale(1.0 / ab_t.sqrt()))
            })
            .collect::<Result<_>>()?;

        let step_index = cfg.steps - 1 - i;
        callback(step_index, t, &mut pred_x0)?;

        for b in 0..batch {
            // Re-derive the noise direction from the (possibly modified)
            // clean prediction, then take the deterministic DDIM step.
            let eps_b = xs[b]
                .sub(&pred_x0[b].scale(ab_t.sqrt()))?
                .scale(1.0 / (1.0 - ab_t).sqrt());
            xs[b] = pred_x0[b]
                .scale(ab_prev.sqrt())
                .add(&eps_b.scale((1.0 - ab_prev).sqrt()))?;
        }
    }
    Ok(xs)
}

/// Hook-free convenience wrapper: sample from a model with fixed conditions.
pub fn sample_model(
    model: &DitModel,
    schedule: &NoiseSchedule,
    conds: &[TextCondition],
    durations: &[f64],
    frames: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor2D>> {
    let channels = model.config().latent_channels;
    let batch = conds.len();
    let conds = conds.to_vec();
    let durations = durations.to_vec();
    let mut predict = move |xs: &[Tensor2D], t: usize| -> Result<Vec<Tensor2D>> {
        model.forward_no_hooks(xs, t, &conds, &durations)
    };
    sample(
        schedule,
        batch,
        frames,
        channels,
        cfg,
        &mut predict,
        &mut |_, _, _| Ok(()),
    )
}
