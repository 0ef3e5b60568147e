//! Text-to-visual entropy ratio (TVER) introspection and fused-logit decoding.
//!
//! For each attention head the current position's attention row is split
//! into its textual and visual parts, each part is turned into a
//! distribution, and the ratio of their entropies is the head's TVER. A head
//! with `TVER ≥ γ_TVER` is masked. The first layer with a masked head
//! triggers an introspective re-run of the current position:
//!
//! 1. at the injection layer the FFN is blended with a similarity-weighted
//!    retrieval over the visual tokens,
//! 2. the final layer adds a vision-enhanced recombination of its heads
//!    (masked heads zeroed) as an extra residual branch,
//! 3. original and enhanced logits are fused in collaborative mode when
//!    their top-k L1 distance is below `γ_d`, contrastive mode otherwise.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, Result};
use crate::model::{
    attend, position_layer, recombine, DecodeSession, LayerTrace, LayerWeights, ModelWeights, StepOutput, TokenStream,
};
use crate::numerics::{
    self, add, entropy_of, manhattan_topk_distance, similarity_weighted_retrieval, Activation, LogitsVector, Matrix,
};
use crate::vocab::{self, TokenId};

/// How each attention partition becomes a distribution before its entropy
/// is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TverPartitionMode {
    /// Divide the partition's weights by their mass.
    #[default]
    Renormalize,
    /// Apply softmax to the partition's raw attention weights.
    Resoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Always inject at this layer once any layer triggers.
    Fixed(usize),
    /// Inject at the earliest triggering layer.
    #[default]
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrospectionConfig {
    /// `"inf"` in JSON disables masking.
    #[serde(with = "inf_as_string")]
    pub gamma_tver: f64,
    pub gamma_d: f64,
    /// Introspection strength: weight of the visual retrieval in the FFN blend.
    pub alpha: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub top_k: usize,
    pub activation: Activation,
    pub layer_selection: LayerSelection,
    pub tver_partition_mode: TverPartitionMode,
}

impl Default for IntrospectionConfig {
    fn default() -> Self {
        Self {
            gamma_tver: 0.55,
            gamma_d: 0.2,
            alpha: 0.5,
            alpha1: 1.0,
            alpha2: 1.0,
            top_k: 20,
            activation: Activation::Relu,
            layer_selection: LayerSelection::Dynamic,
            tver_partition_mode: TverPartitionMode::Renormalize,
        }
    }
}

impl IntrospectionConfig {
    /// A config whose threshold can never be reached: decoding reduces to
    /// the baseline while TVER is still measured.
    pub fn disabled() -> Self {
        Self {
            gamma_tver: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.gamma_tver.is_nan() || self.gamma_tver < 0.0 {
            return Err(("gamma_tver", "must be non-negative".into()));
        }
        if !self.gamma_d.is_finite() || self.gamma_d < 0.0 {
            return Err(("gamma_d", "must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(("alpha", "must lie in [0, 1]".into()));
        }
        if !self.alpha1.is_finite() {
            return Err(("alpha1", "must be finite".into()));
        }
        if !self.alpha2.is_finite() {
            return Err(("alpha2", "must be finite".into()));
        }
        if self.top_k == 0 {
            return Err(("top_k", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| invalid(format!("introspection.{field}: {msg}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTver {
    pub head: usize,
    pub text_entropy: f64,
    pub visual_entropy: f64,
    /// `+∞` when the visual partition has zero entropy and the text does not.
    #[serde(with = "inf_as_string")]
    pub tver: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TverReport {
    pub layer: usize,
    pub per_head: Vec<HeadTver>,
    #[serde(with = "inf_as_string")]
    pub gamma_tver: f64,
}

impl TverReport {
    pub fn mask(&self) -> HeadMask {
        HeadMask(self.per_head.iter().map(|h| h.masked).collect())
    }

    pub fn any_masked(&self) -> bool {
        self.per_head.iter().any(|h| h.masked)
    }

    pub fn max_tver(&self) -> f64 {
        self.per_head.iter().map(|h| h.tver).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// JSON has no infinity; the sentinel is written as the string `"inf"`.
mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s}"))),
        }
    }
}

pub(crate) fn json_number(v: f64) -> serde_json::Value {
    if v == f64::INFINITY {
        json!("inf")
    } else {
        json!(v)
    }
}

/// Per-head boolean mask; `true` zeroes the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask(pub Vec<bool>);

impl HeadMask {
    pub fn none(heads: usize) -> Self {
        Self(vec![false; heads])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, head: usize) -> bool {
        self.0[head]
    }

    pub fn masked_heads(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i)
    }
}

/// Whether a head with `tver` is masked under `gamma`. An infinite threshold
/// disables masking outright.
pub fn masks(tver: f64, gamma: f64) -> bool {
    gamma.is_finite() && tver >= gamma
}

fn check_partition(len: usize, visual: &[usize], textual: &[usize]) -> Result<()> {
    if textual.is_empty() {
        return Err(invalid("textual partition is empty"));
    }
    if visual.len() + textual.len() != len {
        return Err(invalid(format!(
            "partition covers {} of {len} positions",
            visual.len() + textual.len()
        )));
    }
    let mut seen = vec![false; len];
    for &i in visual.iter().chain(textual) {
        if i >= len || std::mem::replace(&mut seen[i], true) {
            return Err(invalid(format!("index {i} out of range or repeated")));
        }
    }
    Ok(())
}

fn partition_entropy(row: &[f64], idx: &[usize], mode: TverPartitionMode) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let part: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
    match mode {
        TverPartitionMode::Renormalize => {
            let mass: f64 = part.iter().sum();
            if mass <= 0.0 {
                return 0.0;
            }
            let p: Vec<f64> = part.iter().map(|a| a / mass).collect();
            entropy_of(&p)
        }
        TverPartitionMode::Resoftmax => {
            let p = numerics::softmax(&part).expect("attention weights are finite");
            entropy_of(p.as_slice())
        }
    }
}

/// Ratio of text to visual entropy with the zero-denominator conventions.
pub fn entropy_ratio(text_entropy: f64, visual_entropy: f64) -> f64 {
    if visual_entropy > 0.0 {
        text_entropy / visual_entropy
    } else if text_entropy > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Computes per-head TVER for one layer's trace.
pub fn compute_tver(
    trace: &LayerTrace,
    layer: usize,
    visual: &[usize],
    textual: &[usize],
    gamma_tver: f64,
    mode: TverPartitionMode,
) -> Result<TverReport> {
    let mut per_head = Vec::with_capacity(trace.attention.len());
    for (head, row) in trace.attention.iter().enumerate() {
        check_partition(row.len(), visual, textual)?;
        let row = row.as_slice();
        let text_entropy = partition_entropy(row, textual, mode);
        let visual_entropy = partition_entropy(row, visual, mode);
        let tver = entropy_ratio(text_entropy, visual_entropy);
        per_head.push(HeadTver {
            head,
            text_entropy,
            visual_entropy,
            tver,
            masked: masks(tver, gamma_tver),
        });
    }
    Ok(TverReport {
        layer,
        per_head,
        gamma_tver,
    })
}

/// Re-thresholds a report.
pub fn mask_heads(report: &TverReport, gamma_tver: f64) -> HeadMask {
    HeadMask(report.per_head.iter().map(|h| masks(h.tver, gamma_tver)).collect())
}

/// `Concat(ã_1·H̄_1, …, ã_H·H̄_H) · W_o` with masked heads replaced by zeros.
pub fn ve_mha(head_outputs: &[Vec<f64>], mask: &HeadMask, wo: &Matrix) -> Result<Vec<f64>> {
    if head_outputs.len() != mask.len() {
        return Err(invalid(format!(
            "{} head outputs but mask has {} entries",
            head_outputs.len(),
            mask.len()
        )));
    }
    let width: usize = head_outputs.iter().map(Vec::len).sum();
    if width != wo.rows() {
        return Err(invalid(format!(
            "concatenated heads have width {width}, output projection expects {}",
            wo.rows()
        )));
    }
    let masked: Vec<Vec<f64>> = head_outputs
        .iter()
        .zip(&mask.0)
        .map(|(h, &m)| if m { vec![0.0; h.len()] } else { h.clone() })
        .collect();
    Ok(recombine(&masked, wo))
}

/// `α·Δ(z | h̄) + (1 − α)·FFN(h̄)`.
pub fn introspective_ffn(
    h_bar: &[f64],
    visual: &[Vec<f64>],
    alpha: f64,
    activation: Activation,
    layer_ffn: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha = {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(layer_ffn(h_bar));
    }
    if visual.is_empty() {
        return Err(invalid("introspection with alpha > 0 needs visual tokens"));
    }
    let retrieved = similarity_weighted_retrieval(h_bar, visual, activation)?;
    if alpha == 1.0 {
        return Ok(retrieved);
    }
    let base = layer_ffn(h_bar);
    Ok(retrieved
        .iter()
        .zip(&base)
        .map(|(r, f)| alpha * r + (1.0 - alpha) * f)
        .collect())
}

/// Keys and values of the positions preceding the current one.
#[derive(Debug, Clone, Copy)]
pub struct AttentionContext<'a> {
    pub keys: &'a [Vec<f64>],
    pub values: &'a [Vec<f64>],
}

impl AttentionContext<'_> {
    pub const EMPTY: AttentionContext<'static> = AttentionContext { keys: &[], values: &[] };
}

/// Intermediate states of the enhanced final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayerStates {
    /// `H̄^L = MHA_L(H^{L-1}) + H^{L-1}`.
    pub post_attention: Vec<f64>,
    /// `H^L = VE-MHA_L(H̄^L) + H̄^L`.
    pub enhanced: Vec<f64>,
    /// `Ĥ^L = FFN_L(H^L) + H^L`.
    pub output: Vec<f64>,
}

/// The final layer with the vision-enhanced residual branch.
pub fn enhanced_final_layer(
    layer: &LayerWeights,
    num_heads: usize,
    h_prev: &[f64],
    context: AttentionContext<'_>,
    mask: &HeadMask,
) -> Result<FinalLayerStates> {
    enhanced_final_layer_with(layer, num_heads, h_prev, context, mask, |x| Ok(layer.ffn(x)))
}

fn enhanced_final_layer_with(
    layer: &LayerWeights,
    num_heads: usize,
    h_prev: &[f64],
    context: AttentionContext<'_>,
    mask: &HeadMask,
    ffn: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<FinalLayerStates> {
    if h_prev.len() != layer.wq.rows() {
        return Err(invalid("hidden state dimension mismatch"));
    }
    if mask.len() != num_heads {
        return Err(invalid(format!(
            "mask has {} entries for {num_heads} heads",
            mask.len()
        )));
    }
    let att = attend(layer, num_heads, h_prev, context.keys, context.values);
    let post_attention = add(&recombine(&att.heads, &layer.wo), h_prev);
    let enhanced = add(&ve_mha(&att.heads, mask, &layer.wo)?, &post_attention);
    let output = add(&ffn(&enhanced)?, &enhanced);
    Ok(FinalLayerStates {
        post_attention,
        enhanced,
        output,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Collaborative,
    Contrastive,
}

/// Fuses original and enhanced logits, returning `(fused, mode, d_t)`.
pub fn fuse_logits(
    original: &LogitsVector,
    enhanced: &LogitsVector,
    cfg: &IntrospectionConfig,
) -> Result<(LogitsVector, FusionMode, f64)> {
    let d_t = manhattan_topk_distance(original, enhanced, cfg.top_k)?;
    let (mode, fused) = if d_t < cfg.gamma_d {
        let f = original
            .as_slice()
            .iter()
            .zip(enhanced.as_slice())
            .map(|(o, e)| o + cfg.alpha1 * e)
            .collect();
        (FusionMode::Collaborative, f)
    } else {
        let f = original
            .as_slice()
            .iter()
            .zip(enhanced.as_slice())
            .map(|(o, e)| (1.0 + cfg.alpha2) * o - cfg.alpha2 * e)
            .collect();
        (FusionMode::Contrastive, f)
    };
    Ok((LogitsVector::new(fused)?, mode, d_t))
}

/// One decoding step with its introspection record.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub original_logits: LogitsVector,
    pub enhanced_logits: LogitsVector,
    pub distance: f64,
    pub mode: FusionMode,
    pub fused_logits: LogitsVector,
    pub token: TokenId,
    pub tver_reports: Vec<TverReport>,
    /// Earliest layer with a masked head, if any.
    pub triggered_layer: Option<usize>,
    /// Layer where the retrieval blend was applied.
    pub injection_layer: Option<usize>,
    /// Final-layer hidden state of the original pass, `H^L`.
    pub original_hidden: Vec<f64>,
    /// Final-layer hidden state of the enhanced pass, `Ĥ^L`.
    pub enhanced_hidden: Vec<f64>,
}

impl DecodeStep {
    /// Largest per-head TVER over all layers.
    pub fn max_tver(&self) -> f64 {
        self.tver_reports
            .iter()
            .map(TverReport::max_tver)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// JSON-lines record used for replay and debugging.
    pub fn to_record(&self, step: usize) -> serde_json::Value {
        let tver: Vec<serde_json::Value> = self
            .tver_reports
            .iter()
            .flat_map(|r| {
                r.per_head
                    .iter()
                    .map(move |h| json!([r.layer, h.head, json_number(h.tver), h.masked]))
            })
            .collect();
        json!({
            "step": step,
            "tver": tver,
            "d_t": self.distance,
            "mode": self.mode,
            "token": self.token,
        })
    }
}

/// Restricts which tokens the decoder may emit.
pub trait TokenConstraint {
    fn allowed(&self, token: TokenId) -> bool;

    /// Called after each emitted token.
    fn observe(&mut self, _token: TokenId) {}
}

/// Every token is allowed.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unconstrained;

impl TokenConstraint for Unconstrained {
    fn allowed(&self, _token: TokenId) -> bool {
        true
    }
}

/// Argmax over allowed tokens, lowest index on ties; `EOS` if nothing is allowed.
pub fn select_token(logits: &LogitsVector, constraint: &dyn TokenConstraint) -> TokenId {
    let mut best: Option<(TokenId, f64)> = None;
    for (i, &v) in logits.as_slice().iter().enumerate() {
        let t = i as TokenId;
        if !constraint.allowed(t) {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((t, v)),
        }
    }
    best.map_or(vocab::EOS, |(t, _)| t)
}

/// Runs introspection for the position most recently pushed into `session`.
pub(crate) fn introspect_position(
    session: &DecodeSession<'_>,
    out: &StepOutput,
    visual: &[Vec<f64>],
    cfg: &IntrospectionConfig,
    constraint: &dyn TokenConstraint,
) -> Result<DecodeStep> {
    let weights = session.weights();
    let mcfg = weights.config();
    let len = session.len();
    let n_visual = visual.len();
    let visual_idx: Vec<usize> = (0..n_visual).collect();
    let text_idx: Vec<usize> = (n_visual..len).collect();

    let reports = out
        .traces
        .iter()
        .enumerate()
        .map(|(l, t)| compute_tver(t, l, &visual_idx, &text_idx, cfg.gamma_tver, cfg.tver_partition_mode))
        .collect::<Result<Vec<_>>>()?;
    let last = mcfg.num_layers - 1;
    let original_hidden = out.traces[last].output.clone();

    // nothing to retrieve from without visual tokens
    let triggered = if n_visual == 0 {
        None
    } else {
        reports.iter().position(TverReport::any_masked)
    };

    let Some(trigger) = triggered else {
        let (fused, mode, distance) = fuse_logits(&out.logits, &out.logits, cfg)?;
        let token = select_token(&fused, constraint);
        return Ok(DecodeStep {
            original_logits: out.logits.clone(),
            enhanced_logits: out.logits.clone(),
            distance,
            mode,
            fused_logits: fused,
            token,
            tver_reports: reports,
            triggered_layer: None,
            injection_layer: None,
            enhanced_hidden: original_hidden.clone(),
            original_hidden,
        });
    };

    let injection = match cfg.layer_selection {
        LayerSelection::Dynamic => trigger,
        LayerSelection::Fixed(i) if i < mcfg.num_layers => i,
        LayerSelection::Fixed(i) => {
            return Err(invalid(format!(
                "fixed injection layer {i} outside a {}-layer model",
                mcfg.num_layers
            )))
        }
    };
    let mask = reports[trigger].mask();
    let layers = weights.layers();
    let ctx = |l: usize| {
        let (keys, values) = session.context(l, len - 1);
        AttentionContext { keys, values }
    };
    let blend = |l: usize, x: &[f64]| introspective_ffn(x, visual, cfg.alpha, cfg.activation, |y| layers[l].ffn(y));

    let final_states = if injection == last {
        enhanced_final_layer_with(
            &layers[last],
            mcfg.num_heads,
            &out.traces[last].input,
            ctx(last),
            &mask,
            |x| blend(last, x),
        )?
    } else {
        let h_bar = &out.traces[injection].post_attention;
        let mut h = add(&blend(injection, h_bar)?, h_bar);
        for (l, layer) in layers.iter().enumerate().take(last).skip(injection + 1) {
            let c = ctx(l);
            h = position_layer(layer, mcfg.num_heads, &h, c.keys, c.values);
        }
        enhanced_final_layer(&layers[last], mcfg.num_heads, &h, ctx(last), &mask)?
    };

    let enhanced_logits = LogitsVector::new(weights.project(&final_states.output))?;
    let (fused, mode, distance) = fuse_logits(&out.logits, &enhanced_logits, cfg)?;
    let token = select_token(&fused, constraint);
    Ok(DecodeStep {
        original_logits: out.logits.clone(),
        enhanced_logits,
        distance,
        mode,
        fused_logits: fused,
        token,
        tver_reports: reports,
        triggered_layer: Some(trigger),
        injection_layer: Some(injection),
        original_hidden,
        enhanced_hidden: final_states.output,
    })
}

/// One introspective decoding step for the position after
/// `stream ++ prior_tokens`, computed without a cache.
pub fn inex_decode_step(
    stream: &TokenStream,
    prior_tokens: &[TokenId],
    weights: &ModelWeights,
    cfg: &IntrospectionConfig,
) -> Result<DecodeStep> {
    cfg.validate()?;
    let (mut session, mut out) = DecodeSession::start(weights, stream)?;
    for &t in prior_tokens {
        out = session.push_token(t)?;
    }
    introspect_position(&session, &out, stream.visual_tokens(), cfg, &Unconstrained)
}

/// Decodes up to `max_tokens` tokens with introspection, stopping after `EOS`.
pub fn inex_decode(
    stream: &TokenStream,
    weights: &ModelWeights,
    cfg: &IntrospectionConfig,
    max_tokens: usize,
    constraint: &mut dyn TokenConstraint,
) -> Result<Vec<DecodeStep>> {
    cfg.validate()?;
    if max_tokens == 0 {
        return Err(invalid("max_tokens must be at least 1"));
    }
    let (mut session, mut out) = DecodeSession::start(weights, stream)?;
    let mut steps = Vec::with_capacity(max_tokens);
    loop {
        let step = introspect_position(&session, &out, stream.visual_tokens(), cfg, constraint)?;
        let token = step.token;
        constraint.observe(token);
        steps.push(step);
        if token == vocab::EOS || steps.len() == max_tokens {
            return Ok(steps);
        }
        out = session.push_token(token)?;
    }
}
