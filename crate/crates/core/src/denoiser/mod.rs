//! Two-encoder transformer denoiser.
//!
//! A context encoder reads a masked token sequence built from the input
//! poses and their frame indices; a denoising encoder reads the noisy
//! motion tokens concatenated with the context memory along the sequence
//! axis and predicts clean motion. Both stacks are plain transformer
//! encoders with full self-attention.

pub mod checkpoint;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Context, MotionSequence};
use crate::kinematics::Skeleton;
use crate::rotation::{matrix_to_sixd, sixd_to_matrix, SixD};
use crate::schedule::{DiffusionSchedule, SamplerMode};
use crate::tensor::{standard_normal, Axis, ParamStore, Real, Tape, Tensor, Var};
use crate::{CoreError, Result};

const LN_EPS: Real = 1e-5;

/// Network shape is a pure function of these fields.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub layers_per_stack: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: Real,
    pub block: usize,
    pub feature_dim: usize,
    pub timesteps: usize,
    /// Encode the context once per sampling run instead of once per step.
    #[serde(default)]
    pub cache_context: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers_per_stack: 6,
            model_dim: 512,
            ff_dim: 2048,
            heads: 8,
            dropout: 0.1,
            block: 75,
            feature_dim: 0,
            timesteps: 300,
            cache_context: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layers_per_stack == 0 || self.block == 0 || self.feature_dim == 0 || self.timesteps == 0 {
            return Err(CoreError::Config(
                "layers_per_stack, block, feature_dim and timesteps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Closed-form parameter count; asserted against the store at build time.
    pub fn param_count(&self) -> usize {
        let (d, ff, f) = (self.model_dim, self.ff_dim, self.feature_dim);
        let per_layer = 4 * d * d + 4 * d   // attention projections + biases
            + 2 * d                          // first layer norm
            + 2 * d * ff + ff + d            // feed-forward
            + 2 * d;                         // second layer norm
        2 * (f * d + d)                      // two input projections
            + d                              // mask token
            + 2 * d * d + 2 * d              // timestep embedding MLP
            + 2 * self.layers_per_stack * per_layer
            + d * f + f                      // output projection
    }
}

/// Denoiser parameters plus the fixed sinusoidal frame encoding.
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamStore,
    positional: Tensor,
}

impl DenoiserModel {
    /// Fresh model with seeded scaled-uniform fan-in initialization.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xa076_1d64_78bd_642f));
        let mut params = ParamStore::new();
        let (d, ff, f) = (config.model_dim, config.ff_dim, config.feature_dim);
        // attention output projections start smaller so deep residual
        // stacks begin near identity
        let wo_scale = 1.0 / ((2 * config.layers_per_stack) as Real).sqrt();

        let linear = |params: &mut ParamStore,
                          rng: &mut ChaCha8Rng,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize,
                          scale: Real| {
            let bound = scale / (fan_in as Real).sqrt();
            let data: Vec<Real> =
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], data).unwrap());
            params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };

        linear(&mut params, &mut rng, "ctx.in_proj", f, d, 1.0);
        linear(&mut params, &mut rng, "dn.in_proj", f, d, 1.0);
        let mask: Vec<Real> = (0..d).map(|_| rng.gen_range(-0.02..0.02)).collect();
        params.insert("mask_token", Tensor::new(vec![d], mask)?);
        linear(&mut params, &mut rng, "time.l1", d, d, 1.0);
        linear(&mut params, &mut rng, "time.l2", d, d, 1.0);
        for stack in ["ctx", "dn"] {
            for l in 0..config.layers_per_stack {
                let p = format!("{stack}.l{l}");
                linear(&mut params, &mut rng, &format!("{p}.attn.q"), d, d, 1.0);
                linear(&mut params, &mut rng, &format!("{p}.attn.k"), d, d, 1.0);
                linear(&mut params, &mut rng, &format!("{p}.attn.v"), d, d, 1.0);
                linear(&mut params, &mut rng, &format!("{p}.attn.o"), d, d, wo_scale);
                params.insert(format!("{p}.ln1.g"), Tensor::filled(&[d], 1.0));
                params.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]));
                linear(&mut params, &mut rng, &format!("{p}.ff.l1"), d, ff, 1.0);
                linear(&mut params, &mut rng, &format!("{p}.ff.l2"), ff, d, 1.0);
                params.insert(format!("{p}.ln2.g"), Tensor::filled(&[d], 1.0));
                params.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]));
            }
        }
        linear(&mut params, &mut rng, "out_proj", d, f, 1.0);

        assert_eq!(params.total_values(), config.param_count(), "parameter count formula");
        let positional = sinusoidal_rows(config.block, d);
        Ok(Self { config, params, positional })
    }

    pub fn from_parts(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if params.total_values() != config.param_count() {
            return Err(CoreError::Checkpoint(format!(
                "parameter blob count {} does not match config ({})",
                params.total_values(),
                config.param_count()
            )));
        }
        let positional = sinusoidal_rows(config.block, config.model_dim);
        Ok(Self { config, params, positional })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Round every parameter to f32 storage precision, so live state equals
    /// what a checkpoint written now would load back.
    pub fn quantize_to_storage(&mut self) {
        for (_, t) in self.params.iter_mut() {
            let data: Vec<Real> = t.data().iter().map(|v| *v as f32 as Real).collect();
            *t = t.with_data(data).expect("same shape");
        }
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(
            name,
            self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}")),
        )
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w"));
        let b = self.p(tape, &format!("{name}.b"));
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Additive timestep vector shared by every token slot.
    fn timestep_embedding(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let sin = sinusoidal_value(t as Real, self.config.model_dim);
        let row = tape.constant(&Tensor::new(vec![1, self.config.model_dim], sin)?);
        let h = self.linear(tape, row, "time.l1")?;
        let h = tape.relu(h);
        let out = self.linear(tape, h, "time.l2")?;
        tape.reshape(out, vec![self.config.model_dim])
    }

    /// Token sequence for the context encoder: projected poses at their
    /// frame slots, the learned mask token everywhere else, plus frame
    /// positional encodings and the timestep embedding.
    pub fn build_masked_input(&self, tape: &mut Tape, ctx: &Context, t: usize) -> Result<Var> {
        let b = self.config.block;
        if ctx.feature_dim != self.config.feature_dim {
            return Err(CoreError::Dimension {
                op: "build_masked_input",
                detail: format!(
                    "context feature width {} does not match model {}",
                    ctx.feature_dim, self.config.feature_dim
                ),
            });
        }
        if let Some(&bad) = ctx.indices.iter().find(|&&i| i >= b) {
            return Err(CoreError::Dimension {
                op: "build_masked_input",
                detail: format!("context index {bad} outside block of {b} frames"),
            });
        }
        let mask = self.p(tape, "mask_token");
        let base = tape.broadcast_row(mask, b)?;
        let poses = tape.constant(&ctx.poses_tensor());
        let projected = self.linear(tape, poses, "ctx.in_proj")?;
        let slots = tape.scatter_rows(base, projected, &ctx.indices)?;
        let pos = tape.constant(&self.positional);
        let with_pos = tape.add(slots, pos)?;
        let time = self.timestep_embedding(tape, t)?;
        let time_rows = tape.broadcast_row(time, b)?;
        tape.add(with_pos, time_rows)
    }

    fn attention(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as Real).sqrt();
        let q = self.linear(tape, x, &format!("{prefix}.attn.q"))?;
        let k = self.linear(tape, x, &format!("{prefix}.attn.k"))?;
        let v = self.linear(tape, x, &format!("{prefix}.attn.v"))?;
        let mut merged: Option<Var> = None;
        for h in 0..self.config.heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = tape.slice_cols(q, cols.clone())?;
            let kh = tape.slice_cols(k, cols.clone())?;
            let vh = tape.slice_cols(v, cols)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.mul_scalar(scores, scale);
            let weights = tape.softmax(scaled, Axis::Cols)?;
            let out = tape.matmul(weights, vh)?;
            merged = Some(match merged {
                None => out,
                Some(m) => tape.concat_cols(m, out)?,
            });
        }
        self.linear(tape, merged.expect("at least one head"), &format!("{prefix}.attn.o"))
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let attn = self.attention(tape, x, prefix)?;
        let attn = tape.dropout(attn, self.config.dropout, rng);
        let sum = tape.add(x, attn)?;
        let g1 = self.p(tape, &format!("{prefix}.ln1.g"));
        let b1 = self.p(tape, &format!("{prefix}.ln1.b"));
        let x = tape.layer_norm(sum, g1, b1, LN_EPS)?;

        let h = self.linear(tape, x, &format!("{prefix}.ff.l1"))?;
        let h = tape.relu(h);
        let h = self.linear(tape, h, &format!("{prefix}.ff.l2"))?;
        let h = tape.dropout(h, self.config.dropout, rng);
        let sum = tape.add(x, h)?;
        let g2 = self.p(tape, &format!("{prefix}.ln2.g"));
        let b2 = self.p(tape, &format!("{prefix}.ln2.b"));
        tape.layer_norm(sum, g2, b2, LN_EPS)
    }

    fn run_stack(
        &self,
        tape: &mut Tape,
        mut x: Var,
        stack: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        for l in 0..self.config.layers_per_stack {
            x = self.encoder_layer(tape, x, &format!("{stack}.l{l}"), rng)?;
        }
        Ok(x)
    }

    /// Context memory: full self-attention over the masked token sequence.
    pub fn encode_context(&self, tape: &mut Tape, masked: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let shape = tape.value(masked).shape();
        if shape != [self.config.block, self.config.model_dim] {
            return Err(CoreError::Dimension {
                op: "encode_context",
                detail: format!("masked input shape {shape:?}"),
            });
        }
        self.run_stack(tape, masked, "ctx", rng)
    }

    /// Predict clean motion from noisy motion tokens and context memory.
    /// The two token sets are concatenated along the sequence axis; only the
    /// motion-token outputs are projected back to features.
    pub fn denoise(
        &self,
        tape: &mut Tape,
        x_t: Var,
        memory: Var,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let b = self.config.block;
        if tape.value(x_t).shape() != [b, self.config.feature_dim] {
            return Err(CoreError::Dimension {
                op: "denoise",
                detail: format!("x_t shape {:?}", tape.value(x_t).shape()),
            });
        }
        if tape.value(memory).shape() != [b, self.config.model_dim] {
            return Err(CoreError::Dimension {
                op: "denoise",
                detail: format!("memory shape {:?}", tape.value(memory).shape()),
            });
        }
        let tokens = self.linear(tape, x_t, "dn.in_proj")?;
        let pos = tape.constant(&self.positional);
        let tokens = tape.add(tokens, pos)?;
        let time = self.timestep_embedding(tape, t)?;
        let time_rows = tape.broadcast_row(time, b)?;
        let tokens = tape.add(tokens, time_rows)?;
        let joined = tape.concat_rows(tokens, memory)?;
        let encoded = self.run_stack(tape, joined, "dn", rng)?;
        let motion_tokens = tape.slice_rows(encoded, 0..b)?;
        self.linear(tape, motion_tokens, "out_proj")
    }

    /// One full forward pass on a fresh eval-mode tape. Returns the
    /// predicted clean motion and the context memory (for optional caching).
    pub fn predict_x0(
        &self,
        x_t: &Tensor,
        ctx: &Context,
        t: usize,
        memory_cache: Option<&Tensor>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let memory = match memory_cache {
            Some(m) => tape.constant(m),
            None => {
                let masked = self.build_masked_input(&mut tape, ctx, t)?;
                self.encode_context(&mut tape, masked, rng)?
            }
        };
        let xt = tape.constant(x_t);
        let x0 = self.denoise(&mut tape, xt, memory, t, rng)?;
        Ok((tape.value(x0).clone(), tape.value(memory).clone()))
    }

    /// Reverse-diffusion sampling: start from standard normal noise, predict
    /// clean motion at each step, and re-noise for the next step until t = 1.
    /// The final prediction is decoded with every 6D group re-orthonormalized.
    pub fn sample(
        &self,
        ctx: &Context,
        sched: &DiffusionSchedule,
        skeleton: &Arc<Skeleton>,
        fps: Real,
        mode: SamplerMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<MotionSequence> {
        let x0 = self.sample_tensor(ctx, sched, mode, rng)?;
        decode_sequence(&x0, skeleton, fps)
    }

    /// Sampling loop without the final decode; the raw clean prediction.
    pub fn sample_tensor(
        &self,
        ctx: &Context,
        sched: &DiffusionSchedule,
        mode: SamplerMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let t_max = sched.timesteps();
        let b = self.config.block;
        let f = self.config.feature_dim;
        let mut x_t = standard_normal(&[b, f], rng);
        let mut cache: Option<Tensor> = None;
        let mut x0 = Tensor::zeros(&[b, f]);
        for t in (1..=t_max).rev() {
            let (pred, memory) = self.predict_x0(&x_t, ctx, t, cache.as_ref(), rng)?;
            if !pred.all_finite() {
                return Err(CoreError::NonFinite(format!("sampling step {t}")));
            }
            if self.config.cache_context {
                cache = Some(memory);
            }
            x0 = pred;
            if t > 1 {
                x_t = match mode {
                    SamplerMode::Direct => sched.reverse_step(&x0, t, rng)?,
                    SamplerMode::DdpmPosterior => sched.reverse_step_posterior(&x0, &x_t, t, rng)?,
                };
            }
        }
        Ok(x0)
    }
}

/// Decode a `[block, feature_dim]` prediction into a motion sequence,
/// re-orthonormalizing each 6D rotation group.
pub fn decode_sequence(x0: &Tensor, skeleton: &Arc<Skeleton>, fps: Real) -> Result<MotionSequence> {
    let j = skeleton.joint_count();
    let f = crate::data::feature_dim(j);
    if x0.shape().len() != 2 || x0.shape()[1] != f {
        return Err(CoreError::Dimension {
            op: "decode_sequence",
            detail: format!("prediction shape {:?} for {} joints", x0.shape(), j),
        });
    }
    let b = x0.shape()[0];
    let mut frames = Vec::with_capacity(b * f);
    for i in 0..b {
        let row = x0.row(i);
        frames.extend_from_slice(&row[0..3]);
        for joint in 0..j {
            let g = &row[3 + 6 * joint..3 + 6 * joint + 6];
            let m = sixd_to_matrix(&SixD([g[0], g[1], g[2], g[3], g[4], g[5]]))?;
            frames.extend_from_slice(matrix_to_sixd(&m).as_slice());
        }
    }
    MotionSequence::new(skeleton.clone(), frames, b, fps)
}

/// Fixed sinusoidal encodings for frame positions 0..rows.
fn sinusoidal_rows(rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for pos in 0..rows {
        data.extend_from_slice(&sinusoidal_value(pos as Real, dim));
    }
    Tensor::new(vec![rows, dim], data).expect("consistent layout")
}

fn sinusoidal_value(pos: Real, dim: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        let pair = (i / 2) as Real;
        let freq = (10000.0 as Real).powf(-2.0 * pair / dim as Real);
        let angle = pos * freq;
        out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    out
}
