use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::corpus::CorpusItem;
use super::metrics::{binary_metrics, chair_metrics, ece, BinaryMetrics, CalibrationReport, ChairMetrics, EvalRecord};
use crate::agents::{
    Agents, DecisionAgent, ModelDecisionAgent, ReflectionConfig, Response, SceneEditAgent, TextReflector,
    VisionReflector, DEFAULT_MAX_RESPONSE_TOKENS,
};
use crate::error::{invalid, Error, Result};
use crate::introspection::{DecodeStep, IntrospectionConfig};
use crate::model::{build_model, ModelConfig, ModelWeights};
use crate::orchestrator::{run_inex, OrchestratorConfig, Transcript};
use crate::par::{self, Execution};
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Plain greedy decoding; TVER is measured but never acted on.
    Baseline,
    /// Introspective decoding without the verification loop.
    InOnly,
    /// Introspective decoding inside the verification loop.
    FullInex,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::Baseline, Pipeline::InOnly, Pipeline::FullInex];
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Pipeline::Baseline),
            "in_only" => Ok(Pipeline::InOnly),
            "full_inex" => Ok(Pipeline::FullInex),
            other => Err(invalid(format!("unknown pipeline '{other}'"))),
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::Baseline => "baseline",
            Pipeline::InOnly => "in_only",
            Pipeline::FullInex => "full_inex",
        })
    }
}

/// How per-step TVER is reduced to one response-level score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreReduction {
    #[default]
    Max,
    Mean,
    Last,
}

/// Response uncertainty: the reduced per-step maximum TVER mapped through
/// `t / (1 + t)`, so an infinite ratio scores 1 and ordering is kept.
pub fn uncertainty_score(steps: &[DecodeStep], reduction: ScoreReduction) -> f64 {
    let squash = |t: f64| if t.is_infinite() { 1.0 } else { t / (1.0 + t) };
    let per_step: Vec<f64> = steps.iter().map(|s| squash(s.max_tver().max(0.0))).collect();
    if per_step.is_empty() {
        return 0.0;
    }
    match reduction {
        ScoreReduction::Max => per_step.iter().copied().fold(0.0, f64::max),
        ScoreReduction::Mean => per_step.iter().sum::<f64>() / per_step.len() as f64,
        ScoreReduction::Last => *per_step.last().expect("non-empty"),
    }
}

/// Logit offsets that make the toy model over-assert a few categories.
pub const FIXTURE_BIAS: [(&str, f64); 2] = [("cat", 0.03), ("person", 0.02)];

/// The seeded toy model with [`FIXTURE_BIAS`] added to its output head.
pub fn biased_model(config: &ModelConfig) -> Result<ModelWeights> {
    let mut w = build_model(config)?;
    for (category, offset) in FIXTURE_BIAS {
        w.add_logit_bias(vocab::category_token(category).expect("known category"), offset);
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub introspection: IntrospectionConfig,
    pub reflection: ReflectionConfig,
    pub orchestrator: OrchestratorConfig,
    pub num_bins: usize,
    pub score_reduction: ScoreReduction,
    pub max_response_tokens: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            introspection: IntrospectionConfig::default(),
            reflection: ReflectionConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            num_bins: 10,
            score_reduction: ScoreReduction::Max,
            max_response_tokens: DEFAULT_MAX_RESPONSE_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemResult {
    pub id: usize,
    pub response: Response,
    pub hallucinated_facts: usize,
    pub transcript: Option<Transcript>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub pipeline: Pipeline,
    pub items: Vec<ItemResult>,
    pub records: Vec<EvalRecord>,
    pub binary: BinaryMetrics,
    pub chair: ChairMetrics,
    pub calibration: CalibrationReport,
    pub hallucinated_facts: usize,
}

fn run_item(
    item: &CorpusItem,
    pipeline: Pipeline,
    weights: &ModelWeights,
    cfg: &BenchmarkConfig,
) -> Result<ItemResult> {
    let introspection = match pipeline {
        Pipeline::Baseline => IntrospectionConfig {
            gamma_tver: f64::INFINITY,
            ..cfg.introspection.clone()
        },
        _ => cfg.introspection.clone(),
    };
    let decision = ModelDecisionAgent {
        weights,
        introspection,
        max_tokens: cfg.max_response_tokens,
    };
    let (response, transcript) = match pipeline {
        Pipeline::Baseline | Pipeline::InOnly => (decision.generate(&item.scene, &item.query, None)?, None),
        Pipeline::FullInex => {
            let text = TextReflector::new(cfg.reflection.clone());
            let agents = Agents {
                decision: &decision,
                text: &text,
                edit: &SceneEditAgent,
                vision: &VisionReflector,
            };
            let t = run_inex(&item.scene, &item.query, agents, &cfg.orchestrator).map_err(|a| a.error)?;
            let r = t.final_response.clone().expect("completed runs have a response");
            (r, Some(t))
        }
    };
    Ok(ItemResult {
        id: item.id,
        hallucinated_facts: response.hallucinated_facts(&item.scene).count(),
        response,
        transcript,
    })
}

/// Runs `pipeline` over every item and aggregates the metrics.
pub fn run_benchmark(
    items: &[CorpusItem],
    pipeline: Pipeline,
    weights: &ModelWeights,
    cfg: &BenchmarkConfig,
    execution: Execution,
) -> Result<BenchmarkReport> {
    if items.is_empty() {
        return Err(invalid("benchmark needs at least one corpus item"));
    }
    cfg.introspection.validate()?;
    cfg.reflection.validate()?;
    cfg.orchestrator.validate()?;
    if cfg.num_bins == 0 {
        return Err(invalid("num_bins must be at least 1"));
    }
    let mut results = par::try_map(execution, items, |it| run_item(it, pipeline, weights, cfg))?;
    results.sort_by_key(|r| r.id);

    let gold: std::collections::BTreeMap<usize, &CorpusItem> = items.iter().map(|i| (i.id, i)).collect();
    let mut records = Vec::with_capacity(results.len());
    let mut chair_pairs = Vec::with_capacity(results.len());
    for r in &results {
        let item = gold[&r.id];
        records.push(EvalRecord {
            id: r.id,
            predicted: r.response.answer.clone().unwrap_or_else(|| "no".into()),
            gold: item.gold_answer.clone(),
            score: uncertainty_score(&r.response.steps, cfg.score_reduction),
            hallucinated: r.hallucinated_facts > 0,
        });
        let truth: BTreeSet<String> = item.scene.categories();
        chair_pairs.push((r.response.mentioned_categories(), truth));
    }
    Ok(BenchmarkReport {
        pipeline,
        binary: binary_metrics(&records)?,
        chair: chair_metrics(&chair_pairs)?,
        calibration: ece(&records, cfg.num_bins)?,
        hallucinated_facts: results.iter().map(|r| r.hallucinated_facts).sum(),
        items: results,
        records,
    })
}

impl BenchmarkReport {
    /// Scalar metrics as `(name, value)` pairs in a fixed order.
    pub fn scalar_metrics(&self) -> Vec<(&'static str, f64)> {
        scalar_metrics(
            &self.binary,
            &self.chair,
            &self.calibration,
            self.hallucinated_facts,
            self.items.len(),
        )
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.scalar_metrics())
    }

    pub fn calibration_csv(&self) -> String {
        calibration_csv(&self.calibration)
    }
}

/// Scalar metrics as `(name, value)` pairs in a fixed order; AUROC is
/// omitted when undefined.
pub fn scalar_metrics(
    binary: &BinaryMetrics,
    chair: &ChairMetrics,
    calibration: &CalibrationReport,
    hallucinated_facts: usize,
    items: usize,
) -> Vec<(&'static str, f64)> {
    let mut m = vec![
        ("accuracy", binary.accuracy),
        ("precision", binary.precision),
        ("recall", binary.recall),
        ("f1", binary.f1),
        ("chair_s", chair.chair_s),
        ("chair_i", chair.chair_i),
        ("chair_recall", chair.recall),
        ("ece", calibration.ece),
    ];
    if let Some(a) = calibration.auroc {
        m.push(("auroc", a));
    }
    m.push(("hallucinated_facts", hallucinated_facts as f64));
    m.push(("items", items as f64));
    m
}

pub fn metrics_csv(metrics: &[(&str, f64)]) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in metrics {
        writeln!(out, "{name},{value}").expect("write to string");
    }
    out
}

pub fn calibration_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("bin_lower,bin_upper,count,hallucination_rate\n");
    for b in &report.bins {
        writeln!(out, "{},{},{},{}", b.lower, b.upper, b.count, b.hallucination_rate).expect("write to string");
    }
    out
}
