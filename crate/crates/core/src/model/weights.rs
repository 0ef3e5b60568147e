//! Model configuration, seeded weight construction and the binary weight file.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;
use crate::vocab::{self, TokenId};

/// Magic header of the weight file.
pub const MAGIC: &[u8; 8] = b"TOYMLLM1";

/// Output head scale applied to the tied embedding.
///
/// Keeps raw logits in the same range as the fusion thresholds.
pub const OUTPUT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_visual_tokens: usize,
    /// Longest sequence (visual + text) a session accepts.
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    pub seed: u64,
}

fn default_max_context() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 32,
            vocab_size: 64,
            max_visual_tokens: 16,
            max_context: default_max_context(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Checks the config, returning `(field, message)` on the first violation.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("max_visual_tokens", self.max_visual_tokens),
            ("max_context", self.max_context),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err((field, "must be at least 1".into()));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err((
                "model_dim",
                format!("{} is not divisible by num_heads = {}", self.model_dim, self.num_heads),
            ));
        }
        if self.vocab_size < vocab::MIN_VOCAB_SIZE {
            return Err(("vocab_size", format!("must be at least {}", vocab::MIN_VOCAB_SIZE)));
        }
        if self.max_context <= self.max_visual_tokens {
            return Err((
                "max_context",
                "must exceed max_visual_tokens to leave room for text".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| invalid(format!("model.{field}: {msg}")))
    }
}

/// One transformer layer. Per-head projections are column blocks of the
/// query/key/value matrices: head `h` owns columns `h*d_k .. (h+1)*d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// Output projection applied to the concatenated head outputs.
    pub wo: Matrix,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Vec<f64>,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Vec<f64>,
}

impl LayerWeights {
    /// `FFN(x) = relu(x·W1 + b1)·W2 + b2`.
    pub fn ffn(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = self.ffn_in.left_mul(x);
        for (h, b) in hidden.iter_mut().zip(&self.ffn_in_bias) {
            *h = (*h + b).max(0.0);
        }
        let mut out = self.ffn_out.left_mul(&hidden);
        for (o, b) in out.iter_mut().zip(&self.ffn_out_bias) {
            *o += b;
        }
        out
    }

    fn matrices(&self) -> [&Matrix; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.ffn_in, &self.ffn_out]
    }
}

/// Immutable model parameters, fully determined by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    /// `vocab_size × d` token embedding table.
    pub(crate) embedding: Matrix,
    /// `d × d` alignment projection applied to raw visual features.
    pub(crate) visual_projection: Matrix,
    pub(crate) layers: Vec<LayerWeights>,
    /// `d × vocab_size` output head.
    pub(crate) w_out: Matrix,
    pub(crate) b_out: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Builds seeded weights for `config`.
pub fn build_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.model_dim;
    let f = config.ffn_dim();
    let std = 1.0 / (d as f64).sqrt();
    // residual-branch projections shrink with depth so the residual stream stays bounded
    let branch = 1.0 / ((2 * config.num_layers) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let embedding = gaussian(&mut rng, config.vocab_size, d, std);
    let noise = gaussian(&mut rng, d, d, 0.1 * std);
    let visual_projection = Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 } + noise.get(r, c));
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: gaussian(&mut rng, d, d, std),
            wk: gaussian(&mut rng, d, d, std),
            wv: gaussian(&mut rng, d, d, std),
            wo: gaussian(&mut rng, d, d, branch * std),
            ffn_in: gaussian(&mut rng, d, f, std),
            ffn_in_bias: vec![0.0; f],
            ffn_out: gaussian(&mut rng, f, d, branch / (f as f64).sqrt()),
            ffn_out_bias: vec![0.0; d],
        })
        .collect();
    // tied output head: a hidden state aligned with a token's embedding scores that token
    let w_out = Matrix::from_fn(d, config.vocab_size, |r, c| OUTPUT_SCALE * embedding.get(c, r));
    let b_out = vec![0.0; config.vocab_size];

    Ok(ModelWeights {
        config: config.clone(),
        embedding,
        visual_projection,
        layers,
        w_out,
        b_out,
    })
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Mutable layer access for test fixtures (e.g. silencing attention).
    pub fn layers_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.layers
    }

    pub fn embedding(&self, token: TokenId) -> &[f64] {
        self.embedding.row(token as usize)
    }

    pub fn visual_projection(&self) -> &Matrix {
        &self.visual_projection
    }

    pub fn output_head(&self) -> (&Matrix, &[f64]) {
        (&self.w_out, &self.b_out)
    }

    /// Zeroes the output head and bias.
    pub fn zero_output_head(&mut self) {
        self.w_out.as_mut_slice().fill(0.0);
        self.b_out.fill(0.0);
    }

    /// Adds `offset` to the output bias of `token`. Used to build biased
    /// fixtures that over-assert particular symbols.
    pub fn add_logit_bias(&mut self, token: TokenId, offset: f64) {
        self.b_out[token as usize] += offset;
    }

    /// `φ(h) = h·W_out + b`.
    pub fn project(&self, hidden: &[f64]) -> Vec<f64> {
        let mut logits = self.w_out.left_mul(hidden);
        for (l, b) in logits.iter_mut().zip(&self.b_out) {
            *l += b;
        }
        logits
    }

    pub fn is_finite(&self) -> bool {
        self.all_matrices().all(Matrix::is_finite)
            && self.b_out.iter().all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.ffn_in_bias.iter().chain(&l.ffn_out_bias).all(|v| v.is_finite()))
    }

    fn all_matrices(&self) -> impl Iterator<Item = &Matrix> {
        [&self.embedding, &self.visual_projection]
            .into_iter()
            .chain(self.layers.iter().flat_map(|l| l.matrices()))
            .chain(std::iter::once(&self.w_out))
    }

    fn all_vectors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.ffn_in_bias, &l.ffn_out_bias])
            .chain(std::iter::once(&self.b_out))
    }

    /// Writes the versioned binary format: magic, little-endian `u64`
    /// dimensions, then every parameter as row-major little-endian `f64`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let c = &self.config;
        for dim in [
            c.num_layers,
            c.num_heads,
            c.model_dim,
            c.vocab_size,
            c.max_visual_tokens,
            c.max_context,
        ] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        for m in self.all_matrices() {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for vec in self.all_vectors() {
            for v in vec {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic header".into()));
        }
        let read_u64 = |r: &mut dyn Read| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("truncated dimensions".into()))?;
            Ok(u64::from_le_bytes(b))
        };
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = usize::try_from(read_u64(&mut r)?).map_err(|_| Error::Format("dimension overflow".into()))?;
        }
        let seed = read_u64(&mut r)?;
        let config = ModelConfig {
            num_layers: dims[0],
            num_heads: dims[1],
            model_dim: dims[2],
            vocab_size: dims[3],
            max_visual_tokens: dims[4],
            max_context: dims[5],
            seed,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("invalid dimensions: {e}")))?;

        // build a correctly shaped skeleton, then overwrite every parameter
        let mut weights = build_model(&config)?;
        let mut fill = |slot: &mut [f64]| -> Result<()> {
            let mut b = [0u8; 8];
            for v in slot {
                r.read_exact(&mut b)
                    .map_err(|_| Error::Format("truncated parameters".into()))?;
                *v = f64::from_le_bytes(b);
            }
            Ok(())
        };
        fill(weights.embedding.as_mut_slice())?;
        fill(weights.visual_projection.as_mut_slice())?;
        for l in &mut weights.layers {
            for m in [
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_in,
                &mut l.ffn_out,
            ] {
                fill(m.as_mut_slice())?;
            }
        }
        fill(weights.w_out.as_mut_slice())?;
        for l in &mut weights.layers {
            fill(&mut l.ffn_in_bias)?;
            fill(&mut l.ffn_out_bias)?;
        }
        fill(&mut weights.b_out)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        if !weights.is_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(weights)
    }

    /// Hex SHA-256 of the binary serialization.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
