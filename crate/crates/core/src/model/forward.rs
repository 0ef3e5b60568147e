//! Input encoding, the cached causal forward pass, and greedy decoding.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::weights::{LayerWeights, ModelWeights};
use crate::error::{invalid, Error, Result};
use crate::numerics::{self, add, LogitsVector, Matrix, ProbVector};
use crate::scene::{AttrSlot, Scene, SceneObject};
use crate::vocab::{self, TokenId};

/// The model input: a visual prefix followed by text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    visual: Vec<Vec<f64>>,
    text: Vec<TokenId>,
    embeddings: Matrix,
}

impl TokenStream {
    pub fn visual_tokens(&self) -> &[Vec<f64>] {
        &self.visual
    }

    pub fn text_tokens(&self) -> &[TokenId] {
        &self.text
    }

    /// `seq_len × d` input embeddings, visual rows first.
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.visual.len() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual_indices(&self) -> Range<usize> {
        0..self.visual.len()
    }

    pub fn textual_indices(&self) -> Range<usize> {
        self.visual.len()..self.len()
    }

    /// Returns a copy with `extra` text tokens appended.
    pub fn with_text(&self, extra: &[TokenId], weights: &ModelWeights) -> Result<Self> {
        let mut text = self.text.clone();
        text.extend_from_slice(extra);
        assemble(self.visual.clone(), text, weights)
    }
}

fn position_code(seed: u64, pos: [i32; 2], d: usize) -> Vec<f64> {
    let cell = (pos[0] as u64) * 64 + pos[1] as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(cell + 1));
    let normal = Normal::new(0.0, 0.05 / (d as f64).sqrt()).expect("positive std");
    (0..d).map(|_| normal.sample(&mut rng)).collect()
}

/// Visual feature of one object: hashed symbol embeddings passed through the
/// alignment projection.
pub fn visual_token(object: &SceneObject, weights: &ModelWeights) -> Vec<f64> {
    let cfg = weights.config();
    let cat = vocab::category_token(&object.category).expect("scene categories are validated");
    let mut raw = weights.embedding(cat).to_vec();
    for (slot, value) in &object.attributes {
        let tok = match slot {
            AttrSlot::Color => vocab::color_token(value),
            AttrSlot::Action => vocab::action_token(value),
        }
        .expect("scene attributes are validated");
        for (r, e) in raw.iter_mut().zip(weights.embedding(tok)) {
            *r += 0.5 * e;
        }
    }
    let pos = position_code(cfg.seed, object.pos, cfg.model_dim);
    numerics::add_assign(&mut raw, &pos);
    weights.visual_projection().left_mul(&raw)
}

fn assemble(visual: Vec<Vec<f64>>, text: Vec<TokenId>, weights: &ModelWeights) -> Result<TokenStream> {
    let cfg = weights.config();
    if let Some(&bad) = text.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(invalid(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let d = cfg.model_dim;
    let mut data = Vec::with_capacity((visual.len() + text.len()) * d);
    for z in &visual {
        data.extend_from_slice(z);
    }
    for &t in &text {
        data.extend_from_slice(weights.embedding(t));
    }
    let embeddings = Matrix::from_vec(visual.len() + text.len(), d, data)?;
    Ok(TokenStream {
        visual,
        text,
        embeddings,
    })
}

/// Encodes a scene (one visual token per object) followed by the query.
pub fn encode_inputs(scene: &Scene, query: &[TokenId], weights: &ModelWeights) -> Result<TokenStream> {
    let cap = weights.config().max_visual_tokens;
    if scene.len() > cap {
        return Err(Error::Capacity(format!(
            "scene has {} objects but the model accepts {cap} visual tokens",
            scene.len()
        )));
    }
    let visual = scene.objects().iter().map(|o| visual_token(o, weights)).collect();
    assemble(visual, query.to_vec(), weights)
}

/// Per-layer record of one position's forward computation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// One attention row per head over all positions up to the current one.
    pub attention: Vec<ProbVector>,
    /// Per-head attention outputs (`d_k` each), before the output projection.
    pub head_outputs: Vec<Vec<f64>>,
    /// Layer input `H^{ℓ-1}`.
    pub input: Vec<f64>,
    /// `H̄^ℓ = MHA(H^{ℓ-1}) + H^{ℓ-1}`.
    pub post_attention: Vec<f64>,
    /// `H^ℓ = FFN(H̄^ℓ) + H̄^ℓ`.
    pub output: Vec<f64>,
}

pub(crate) struct Attended {
    pub rows: Vec<ProbVector>,
    pub heads: Vec<Vec<f64>>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Attention of a single query position over `prev_*` plus itself.
pub(crate) fn attend(
    layer: &LayerWeights,
    num_heads: usize,
    h_in: &[f64],
    prev_keys: &[Vec<f64>],
    prev_values: &[Vec<f64>],
) -> Attended {
    let d = h_in.len();
    let dk = d / num_heads;
    let q = layer.wq.left_mul(h_in);
    let key = layer.wk.left_mul(h_in);
    let value = layer.wv.left_mul(h_in);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut rows = Vec::with_capacity(num_heads);
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols = h * dk..(h + 1) * dk;
        let qh = &q[cols.clone()];
        let scores: Vec<f64> = prev_keys
            .iter()
            .map(|k| k.as_slice())
            .chain(std::iter::once(key.as_slice()))
            .map(|k| numerics::dot(qh, &k[cols.clone()]) * scale)
            .collect();
        let row = numerics::softmax(&scores).expect("finite attention scores");
        let mut out = vec![0.0; dk];
        for (w, v) in row.as_slice().iter().zip(
            prev_values
                .iter()
                .map(|v| v.as_slice())
                .chain(std::iter::once(value.as_slice())),
        ) {
            for (o, vj) in out.iter_mut().zip(&v[cols.clone()]) {
                *o += w * vj;
            }
        }
        rows.push(row);
        heads.push(out);
    }
    Attended {
        rows,
        heads,
        key,
        value,
    }
}

/// `Concat(heads) · W_o`.
pub(crate) fn recombine(heads: &[Vec<f64>], wo: &Matrix) -> Vec<f64> {
    let concat: Vec<f64> = heads.iter().flatten().copied().collect();
    wo.left_mul(&concat)
}

/// One standard layer for a single position attending over a cached context.
pub(crate) fn position_layer(
    layer: &LayerWeights,
    num_heads: usize,
    h_in: &[f64],
    prev_keys: &[Vec<f64>],
    prev_values: &[Vec<f64>],
) -> Vec<f64> {
    let att = attend(layer, num_heads, h_in, prev_keys, prev_values);
    let post_attention = add(&recombine(&att.heads, &layer.wo), h_in);
    add(&layer.ffn(&post_attention), &post_attention)
}

/// Incremental causal forward pass with a per-layer key/value cache.
///
/// Each pushed position is computed exactly as a cache-free pass would
/// compute it, so cached and recomputed results are bit-identical.
#[derive(Debug, Clone)]
pub struct DecodeSession<'w> {
    weights: &'w ModelWeights,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

/// Logits for the next position plus the trace of the position just pushed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: LogitsVector,
    pub traces: Vec<LayerTrace>,
}

impl<'w> DecodeSession<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        let l = weights.config().num_layers;
        Self {
            weights,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    /// Starts a session and feeds every position of `stream`.
    pub fn start(weights: &'w ModelWeights, stream: &TokenStream) -> Result<(Self, StepOutput)> {
        if stream.is_empty() {
            return Err(invalid("empty token stream"));
        }
        let mut session = Self::new(weights);
        let mut last = None;
        for r in 0..stream.len() {
            last = Some(session.push_embedding(stream.embeddings().row(r))?);
        }
        Ok((session, last.expect("non-empty stream")))
    }

    pub fn weights(&self) -> &'w ModelWeights {
        self.weights
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached keys/values of layer `layer` for the first `upto` positions.
    pub(crate) fn context(&self, layer: usize, upto: usize) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.keys[layer][..upto], &self.values[layer][..upto])
    }

    pub fn push_token(&mut self, token: TokenId) -> Result<StepOutput> {
        if token as usize >= self.weights.config().vocab_size {
            return Err(invalid(format!("token {token} outside vocabulary")));
        }
        let e = self.weights.embedding(token).to_vec();
        self.push_embedding(&e)
    }

    pub fn push_embedding(&mut self, x: &[f64]) -> Result<StepOutput> {
        let cfg = self.weights.config();
        if self.len >= cfg.max_context {
            return Err(Error::Capacity(format!(
                "context budget of {} positions exhausted",
                cfg.max_context
            )));
        }
        if x.len() != cfg.model_dim {
            return Err(invalid("embedding dimension mismatch"));
        }
        let mut h = x.to_vec();
        let mut traces = Vec::with_capacity(cfg.num_layers);
        for (l, layer) in self.weights.layers().iter().enumerate() {
            let att = attend(
                layer,
                cfg.num_heads,
                &h,
                &self.keys[l][..self.len],
                &self.values[l][..self.len],
            );
            let mha = recombine(&att.heads, &layer.wo);
            let post_attention = add(&mha, &h);
            let ffn = layer.ffn(&post_attention);
            let output = add(&ffn, &post_attention);
            self.keys[l].push(att.key);
            self.values[l].push(att.value);
            traces.push(LayerTrace {
                attention: att.rows,
                head_outputs: att.heads,
                input: std::mem::replace(&mut h, output.clone()),
                post_attention,
                output,
            });
        }
        self.len += 1;
        let logits = LogitsVector::new(self.weights.project(&h))?;
        Ok(StepOutput { logits, traces })
    }
}

/// Logits for the position after `stream ++ prior_tokens`, plus its traces.
pub fn forward_step(
    stream: &TokenStream,
    prior_tokens: &[TokenId],
    weights: &ModelWeights,
) -> Result<(LogitsVector, Vec<LayerTrace>)> {
    let needed = stream.len() + prior_tokens.len();
    if needed > weights.config().max_context {
        return Err(Error::Capacity(format!(
            "{needed} positions exceed the context budget of {}",
            weights.config().max_context
        )));
    }
    let (mut session, mut out) = DecodeSession::start(weights, stream)?;
    for &t in prior_tokens {
        out = session.push_token(t)?;
    }
    Ok((out.logits, out.traces))
}

/// Baseline decoder: argmax at every step, stopping after `EOS` or
/// `max_tokens` tokens. The `EOS` token, when produced, is included.
pub fn greedy_decode(stream: &TokenStream, weights: &ModelWeights, max_tokens: usize) -> Result<Vec<TokenId>> {
    if max_tokens == 0 {
        return Err(invalid("max_tokens must be at least 1"));
    }
    let (mut session, mut out) = DecodeSession::start(weights, stream)?;
    let mut tokens = Vec::with_capacity(max_tokens);
    loop {
        let token = out.logits.argmax().expect("non-empty vocabulary") as TokenId;
        tokens.push(token);
        if token == vocab::EOS || tokens.len() == max_tokens {
            return Ok(tokens);
        }
        out = session.push_token(token)?;
    }
}
