//! Feature autoencoder for the quality metrics.
//!
//! Temporal-convolution encoder pooling the motion block to a 256-value
//! embedding, mirror decoder used only during its own training. Trained with
//! plain reconstruction MSE on the train split, then frozen and shipped as a
//! versioned artifact so metric numbers stay comparable across runs.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::MotionSequence;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::training::Adam;
use crate::{CoreError, Result};

pub const EXTRACTOR_MAGIC: &[u8; 7] = b"MSFEX01";

/// Embedding width fixed by the metric definitions.
pub const EMBED_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExtractorConfig {
    pub block: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Two mean-pool stages; their product must divide the block length.
    pub pool1: usize,
    pub pool2: usize,
}

impl ExtractorConfig {
    pub fn for_block(block: usize, feature_dim: usize) -> Result<Self> {
        let (pool1, pool2) = match block {
            75 => (3, 5),
            b if b % 4 == 0 => (2, 2),
            b if b % 9 == 0 => (3, 3),
            _ => {
                return Err(CoreError::Config(format!(
                    "no pooling factorization for block {block}"
                )))
            }
        };
        Ok(Self { block, feature_dim, hidden: 64, kernel: 5, pool1, pool2 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(CoreError::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.pool1 == 0 || self.pool2 == 0 || self.block % (self.pool1 * self.pool2) != 0 {
            return Err(CoreError::Config(format!(
                "pool stages {}x{} must divide block {}",
                self.pool1, self.pool2, self.block
            )));
        }
        if self.hidden == 0 || self.feature_dim == 0 {
            return Err(CoreError::Config("hidden and feature_dim must be positive".into()));
        }
        Ok(())
    }

    fn pooled_len(&self) -> usize {
        self.block / (self.pool1 * self.pool2)
    }
}

/// Encoder (and training-only decoder) parameters.
pub struct FeatureExtractor {
    config: ExtractorConfig,
    params: ParamStore,
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd6e8_feb8_6659_fd93));
        let mut params = ParamStore::new();
        let (f, h, k) = (config.feature_dim, config.hidden, config.kernel);
        let m = config.pooled_len();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            use rand::Rng;
            let bound = 1.0 / (fan_in as Real).sqrt();
            let data: Vec<Real> =
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], data).unwrap());
            params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };
        linear("enc.c1", k * f, h, &mut rng);
        linear("enc.c2", k * h, h, &mut rng);
        linear("enc.out", m * h, EMBED_DIM, &mut rng);
        linear("dec.in", EMBED_DIM, m * h, &mut rng);
        linear("dec.c1", k * h, h, &mut rng);
        linear("dec.c2", k * h, f, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ExtractorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(
            name,
            self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}")),
        )
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let u = tape.unfold_rows(x, self.config.kernel)?;
        let w = self.p(tape, &format!("{name}.w"));
        let b = self.p(tape, &format!("{name}.b"));
        let y = tape.matmul(u, w)?;
        tape.add_row(y, b)
    }

    /// Encoder graph: conv, pool, conv, pool, flatten, project to 256.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape != [self.config.block, self.config.feature_dim] {
            return Err(CoreError::Dimension {
                op: "extract_features",
                detail: format!(
                    "sequence shape {:?}, extractor wants [{}, {}]",
                    shape, self.config.block, self.config.feature_dim
                ),
            });
        }
        let h1 = self.conv(tape, x, "enc.c1")?;
        let h1 = tape.relu(h1);
        let h1 = tape.pool_rows(h1, self.config.pool1)?;
        let h2 = self.conv(tape, h1, "enc.c2")?;
        let h2 = tape.relu(h2);
        let h2 = tape.pool_rows(h2, self.config.pool2)?;
        let m = self.config.pooled_len();
        let flat = tape.reshape(h2, vec![1, m * self.config.hidden])?;
        let w = self.p(tape, "enc.out.w");
        let b = self.p(tape, "enc.out.b");
        let y = tape.matmul(flat, w)?;
        tape.add_row(y, b)
    }

    /// Decoder graph (training only): mirror of the encoder.
    pub fn decode(&self, tape: &mut Tape, embedding: Var) -> Result<Var> {
        let m = self.config.pooled_len();
        let w = self.p(tape, "dec.in.w");
        let b = self.p(tape, "dec.in.b");
        let x = tape.matmul(embedding, w)?;
        let x = tape.add_row(x, b)?;
        let x = tape.relu(x);
        let x = tape.reshape(x, vec![m, self.config.hidden])?;
        let x = tape.repeat_rows(x, self.config.pool2)?;
        let x = self.conv(tape, x, "dec.c1")?;
        let x = tape.relu(x);
        let x = tape.repeat_rows(x, self.config.pool1)?;
        self.conv(tape, x, "dec.c2")
    }

    /// Deterministic 256-value embedding of one sequence.
    pub fn extract(&self, seq: &MotionSequence) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let x = tape.constant(&seq.to_tensor());
        let e = self.encode(&mut tape, x)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Embeddings for many sequences as an `[n, 256]` matrix.
    pub fn extract_features(&self, seqs: &[&MotionSequence]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(seqs.len() * EMBED_DIM);
        for s in seqs {
            data.extend(self.extract(s)?);
        }
        Tensor::new(vec![seqs.len(), EMBED_DIM], data)
    }

    /// Reconstruction MSE of one sequence through the autoencoder.
    pub fn reconstruction_mse(&self, seq: &MotionSequence) -> Result<Real> {
        let mut tape = Tape::new();
        let x = tape.constant(&seq.to_tensor());
        let e = self.encode(&mut tape, x)?;
        let y = self.decode(&mut tape, e)?;
        let d = tape.sub(y, x)?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean_all(sq);
        tape.value(m).item()
    }

    /// Plain reconstruction-MSE training on the given chunks. Returns the
    /// final epoch's mean MSE.
    pub fn train(&mut self, chunks: &[&MotionSequence], epochs: usize, learning_rate: Real) -> Result<Real> {
        if chunks.is_empty() {
            return Err(CoreError::Evaluation("no sequences to train the extractor on".into()));
        }
        let mut adam = Adam::new(learning_rate, 0.9, 0.999);
        let mut last = Real::INFINITY;
        for _ in 0..epochs {
            let mut epoch_mse = 0.0;
            for seq in chunks {
                let mut tape = Tape::new();
                let x = tape.constant(&seq.to_tensor());
                let e = self.encode(&mut tape, x)?;
                let y = self.decode(&mut tape, e)?;
                let d = tape.sub(y, x)?;
                let sq = tape.mul(d, d)?;
                let loss = tape.mean_all(sq);
                epoch_mse += tape.value(loss).item()?;
                let grads = tape.backward(loss)?;
                self.params.accumulate(&grads)?;
                adam.apply(&mut self.params);
            }
            last = epoch_mse / chunks.len() as Real;
            if !last.is_finite() {
                return Err(CoreError::Evaluation("extractor training diverged".into()));
            }
        }
        Ok(last)
    }

    /// Persist as a versioned artifact (f32 values, little-endian).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = toml::to_string(&self.config)
            .map_err(|e| CoreError::Evaluation(format!("extractor header: {e}")))?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(EXTRACTOR_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(t.shape().len() as u8);
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(CoreError::Evaluation("extractor file truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 7)? != EXTRACTOR_MAGIC {
            return Err(CoreError::Evaluation("bad extractor magic".into()));
        }
        let hl = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header = String::from_utf8(take(&mut pos, hl)?.to_vec())
            .map_err(|e| CoreError::Evaluation(format!("extractor header utf-8: {e}")))?;
        let config: ExtractorConfig = toml::from_str(&header)
            .map_err(|e| CoreError::Evaluation(format!("extractor header parse: {e}")))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nl = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nl)?.to_vec())
                .map_err(|e| CoreError::Evaluation(format!("extractor name utf-8: {e}")))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as Real);
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_parts(config, params)
    }
}
