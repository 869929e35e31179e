//! Training loop: ties data, schedule, denoiser, and losses together.
//!
//! Every stochastic choice (context length, context indices, timestep,
//! noise, dropout, batch shuffle) derives from the run seed and the global
//! step or epoch index alone, so two runs with equal seeds produce identical
//! trajectories and a resumed run continues the uninterrupted one exactly.
//! Checkpoints quantize live state to f32 storage precision at save time,
//! which makes the checkpoint the canonical state.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::ChunkId;
use crate::data::{sample_context, MotionSequence};
use crate::denoiser::checkpoint::{Checkpoint, CheckpointHeader, OptimizerBlobs, TrainState};
use crate::denoiser::DenoiserModel;
use crate::losses::{total_loss_graph, LossBreakdown, LossWeights};
use crate::schedule::{DiffusionSchedule, SamplerMode, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use crate::tensor::{standard_normal, ParamStore, Real, Tape, Tensor};
use crate::{CoreError, Result};

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub timesteps: usize,
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epochs: usize,
    pub seed: u64,
    /// Context length is drawn uniformly from this inclusive range; the
    /// upper bound is capped at half the block size.
    pub context_min: usize,
    pub context_max: usize,
    pub grad_clip: Real,
    pub beta_min: Real,
    pub beta_max: Real,
    /// Stop after this many epochs without validation improvement; zero
    /// disables early stopping.
    pub early_stop_patience: usize,
    pub eval_seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            timesteps: 300,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 100,
            seed: 0,
            context_min: 1,
            context_max: 0, // 0 = half the block
            grad_clip: 1.0,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            early_stop_patience: 0,
            eval_seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    fn context_bounds(&self, block: usize) -> Result<(usize, usize)> {
        let cap = block / 2;
        let hi = if self.context_max == 0 { cap } else { self.context_max };
        if self.context_min < 1 || hi > cap || self.context_min > hi {
            return Err(CoreError::Config(format!(
                "context bounds [{}, {hi}] outside [1, {cap}]",
                self.context_min
            )));
        }
        Ok((self.context_min, hi))
    }

    pub fn validate(&self, block: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        self.context_bounds(block)?;
        Ok(())
    }
}

/// First/second-moment adaptive gradient optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    step: u64,
    first: BTreeMap<String, Vec<Real>>,
    second: BTreeMap<String, Vec<Real>>,
}

impl Adam {
    pub fn new(learning_rate: Real, beta1: Real, beta2: Real) -> Self {
        Self { learning_rate, beta1, beta2, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in the store; clears them.
    pub fn apply(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad().map(<[Real]>::to_vec) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
            p.update_data(|i, w| {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        params.zero_grads();
    }

    /// Round moments to f32 storage precision (checkpoint canonical state).
    pub fn quantize_to_storage(&mut self) {
        for buf in self.first.values_mut().chain(self.second.values_mut()) {
            for v in buf.iter_mut() {
                *v = *v as f32 as Real;
            }
        }
    }

    pub fn to_blobs(&self, params: &ParamStore) -> Result<OptimizerBlobs> {
        let mut blobs = OptimizerBlobs { step: self.step, ..Default::default() };
        for (name, p) in params.iter() {
            let zero = vec![0.0; p.numel()];
            let m = self.first.get(name).unwrap_or(&zero);
            let v = self.second.get(name).unwrap_or(&zero);
            blobs.first.insert(name.clone(), Tensor::new(p.shape().to_vec(), m.clone())?);
            blobs.second.insert(name.clone(), Tensor::new(p.shape().to_vec(), v.clone())?);
        }
        Ok(blobs)
    }

    pub fn from_blobs(learning_rate: Real, beta1: Real, beta2: Real, blobs: &OptimizerBlobs) -> Self {
        let mut adam = Self::new(learning_rate, beta1, beta2);
        adam.step = blobs.step;
        for (name, t) in &blobs.first {
            adam.first.insert(name.clone(), t.data().to_vec());
        }
        for (name, t) in &blobs.second {
            adam.second.insert(name.clone(), t.data().to_vec());
        }
        adam
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream of randomness fully determined by (seed, stream tag, index).
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index))
}

const STREAM_STEP: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// One record per training step in the structured log.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub t_mean: Real,
    pub loss: LossBreakdown,
    pub grad_norm: Real,
    pub clipped: bool,
}

impl StepRecord {
    pub fn csv_header() -> &'static str {
        "step,t_mean,l_g,l_r,l_c,l_r_vel,l_p_vel,total,grad_norm,clipped"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.t_mean,
            self.loss.l_g,
            self.loss.l_r,
            self.loss.l_c,
            self.loss.l_r_vel,
            self.loss.l_p_vel,
            self.loss.total,
            self.grad_norm,
            self.clipped as u8
        )
    }
}

/// Owns the model and optimizer state for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    model: DenoiserModel,
    sched: DiffusionSchedule,
    adam: Adam,
    next_step: u64,
    fps: Real,
}

impl Trainer {
    pub fn new(model: DenoiserModel, config: TrainConfig, fps: Real) -> Result<Self> {
        config.validate(model.config().block)?;
        if model.config().timesteps != config.timesteps {
            return Err(CoreError::Config(format!(
                "model timesteps {} differ from training timesteps {}",
                model.config().timesteps, config.timesteps
            )));
        }
        let sched = DiffusionSchedule::linear(config.timesteps, config.beta_min, config.beta_max)?;
        let adam = Adam::new(config.learning_rate, config.beta1, config.beta2);
        Ok(Self { config, model, sched, adam, next_step: 0, fps })
    }

    /// Continue from a checkpoint written by [`Trainer::to_checkpoint`].
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        let header = checkpoint.header.clone();
        let sched = checkpoint.schedule()?;
        let model = DenoiserModel::from_parts(header.config.clone(), checkpoint.params)?;
        let adam = match &checkpoint.optimizer {
            Some(blobs) => Adam::from_blobs(config.learning_rate, config.beta1, config.beta2, blobs),
            None => Adam::new(config.learning_rate, config.beta1, config.beta2),
        };
        let next_step = header.train.as_ref().map_or(0, |t| t.next_step);
        let mut cfg = config;
        if let Some(train) = &header.train {
            cfg.seed = train.seed;
        }
        cfg.validate(model.config().block)?;
        Ok(Self { config: cfg, model, sched, adam, next_step, fps: header.fps })
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn next_step(&self) -> u64 {
        self.next_step
    }

    pub fn fps(&self) -> Real {
        self.fps
    }

    /// Quantizes live state to storage precision and packages it. The
    /// running trainer continues from exactly what the checkpoint holds.
    pub fn to_checkpoint(&mut self) -> Result<Checkpoint> {
        self.model.quantize_to_storage();
        self.adam.quantize_to_storage();
        Ok(Checkpoint {
            header: CheckpointHeader {
                config: self.model.config().clone(),
                beta_min: self.config.beta_min,
                beta_max: self.config.beta_max,
                fps: self.fps,
                sampler_mode: SamplerMode::Direct,
                train: Some(TrainState { seed: self.config.seed, next_step: self.next_step }),
            },
            params: self.model.params().clone(),
            optimizer: Some(self.adam.to_blobs(self.model.params())?),
        })
    }

    /// One optimizer step over a batch of clean chunks. Per sample: draw a
    /// context length and context, draw a timestep, noise the chunk, run
    /// both encoder stacks, and accumulate the composite loss gradient.
    /// Returns the pre-update batch loss.
    pub fn train_step(&mut self, batch: &[(ChunkId, &MotionSequence)]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(CoreError::Training("empty batch".into()));
        }
        let step = self.next_step;
        let mut rng = derive_rng(self.config.seed, STREAM_STEP, step);
        let (lo, hi) = self.config.context_bounds(self.model.config().block)?;
        let inv_batch = 1.0 / batch.len() as Real;

        let mut breakdowns = Vec::with_capacity(batch.len());
        let mut t_sum = 0.0;
        for (id, seq) in batch {
            let l = rng.gen_range(lo..=hi);
            let ctx = sample_context(seq, l, &mut rng)?;
            let t = rng.gen_range(1..=self.sched.timesteps());
            t_sum += t as Real;
            let x0 = seq.to_tensor();
            let eps = standard_normal(x0.shape(), &mut rng);
            let x_t = self.sched.add_noise(&x0, t, &eps)?;

            let mut tape = Tape::training();
            let masked = self.model.build_masked_input(&mut tape, &ctx, t)?;
            let memory = self.model.encode_context(&mut tape, masked, &mut rng)?;
            let xt_var = tape.constant(&x_t);
            let x0_hat = self.model.denoise(&mut tape, xt_var, memory, t, &mut rng)?;
            let graph = total_loss_graph(
                &mut tape,
                x0_hat,
                &x0,
                &ctx.indices,
                seq.skeleton(),
                &self.config.loss_weights,
            )?;
            let breakdown = graph.breakdown(&tape);
            if !breakdown.all_finite() {
                return Err(CoreError::Training(format!(
                    "non-finite loss at step {step}; batch ids: {}",
                    batch.iter().map(|(id, _)| id.to_string()).collect::<Vec<_>>().join(", ")
                )));
            }
            let _ = id;
            let scaled = tape.mul_scalar(graph.total, inv_batch);
            let grads = tape.backward(scaled)?;
            self.model.params_mut().accumulate(&grads)?;
            breakdowns.push(breakdown);
        }

        let mut grad_norm = self.model.params_mut().grad_norm();
        let mut clipped = false;
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            let scale = self.config.grad_clip / grad_norm;
            for (_, p) in self.model.params_mut().iter_mut() {
                if let Some(g) = p.grad().map(<[Real]>::to_vec) {
                    p.zero_grad();
                    let scaled: Vec<Real> = g.iter().map(|v| v * scale).collect();
                    p.accumulate_grad(&scaled)?;
                }
            }
            clipped = true;
            grad_norm = self.config.grad_clip;
        }
        self.adam.apply(self.model.params_mut());
        self.next_step += 1;

        Ok(StepRecord {
            step,
            t_mean: t_sum / batch.len() as Real,
            loss: LossBreakdown::mean(&breakdowns),
            grad_norm,
            clipped,
        })
    }

    /// Deterministic held-out evaluation in eval mode; no parameter
    /// mutation. All stochastic draws derive from the eval seed and the
    /// chunk index.
    pub fn evaluate_epoch(&self, chunks: &[(ChunkId, &MotionSequence)]) -> Result<LossBreakdown> {
        evaluate_epoch(&self.model, &self.sched, &self.config, chunks)
    }

    /// Epoch-driven training with shuffled batches, per-step logging, and
    /// optional early stopping on validation loss. When a checkpoint path is
    /// given, state is saved after every epoch (quantizing live state, so an
    /// interrupted run resumes onto the exact same trajectory). Returns
    /// per-epoch validation losses.
    pub fn run_epochs(
        &mut self,
        train: &[(ChunkId, &MotionSequence)],
        val: &[(ChunkId, &MotionSequence)],
        epochs: usize,
        log: &mut dyn Write,
        checkpoint_path: Option<&std::path::Path>,
    ) -> Result<Vec<LossBreakdown>> {
        if train.is_empty() {
            return Err(CoreError::Training("empty training split".into()));
        }
        let steps_per_epoch = train.len().div_ceil(self.config.batch_size);
        let start_step = self.next_step;
        let mut val_history = Vec::new();
        let mut best = Real::INFINITY;
        let mut since_best = 0usize;
        if start_step == 0 {
            writeln!(log, "{}", StepRecord::csv_header())?;
        }
        let first_epoch = (start_step as usize) / steps_per_epoch;
        for epoch in first_epoch..first_epoch + epochs {
            let order = shuffled_order(train.len(), self.config.seed, epoch as u64);
            for (bi, chunk_ids) in order.chunks(self.config.batch_size).enumerate() {
                // a resumed run skips the batches its checkpoint already consumed
                let global = (epoch * steps_per_epoch + bi) as u64;
                if global < self.next_step {
                    continue;
                }
                let batch: Vec<(ChunkId, &MotionSequence)> =
                    chunk_ids.iter().map(|&i| (train[i].0.clone(), train[i].1)).collect();
                let record = self.train_step(&batch)?;
                writeln!(log, "{}", record.to_csv())?;
            }
            if let Some(path) = checkpoint_path {
                self.to_checkpoint()?.save(path)?;
            }
            if !val.is_empty() {
                let v = self.evaluate_epoch(val)?;
                let improved = v.total < best;
                if improved {
                    best = v.total;
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                val_history.push(v);
                if self.config.early_stop_patience > 0 && since_best >= self.config.early_stop_patience {
                    break;
                }
            }
        }
        Ok(val_history)
    }
}

/// Deterministic per-epoch shuffle of chunk indices.
fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, STREAM_SHUFFLE, epoch);
    order.shuffle(&mut rng);
    order
}

/// Free-function evaluation shared by the trainer and the CLI.
pub fn evaluate_epoch(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    config: &TrainConfig,
    chunks: &[(ChunkId, &MotionSequence)],
) -> Result<LossBreakdown> {
    if chunks.is_empty() {
        return Err(CoreError::Training("empty evaluation split".into()));
    }
    let (lo, hi) = config.context_bounds(model.config().block)?;
    let mut breakdowns = Vec::with_capacity(chunks.len());
    for (index, (_, seq)) in chunks.iter().enumerate() {
        let mut rng = derive_rng(config.eval_seed, STREAM_EVAL, index as u64);
        let l = rng.gen_range(lo..=hi);
        let ctx = sample_context(seq, l, &mut rng)?;
        let t = rng.gen_range(1..=sched.timesteps());
        let x0 = seq.to_tensor();
        let eps = standard_normal(x0.shape(), &mut rng);
        let x_t = sched.add_noise(&x0, t, &eps)?;
        let (x0_hat, _) = model.predict_x0(&x_t, &ctx, t, None, &mut rng)?;
        let breakdown = crate::losses::total_loss(&x0_hat, &x0, &ctx.indices, seq.skeleton())?;
        breakdowns.push(breakdown);
    }
    Ok(LossBreakdown::mean(&breakdowns))
}
