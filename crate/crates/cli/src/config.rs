//! The single JSON run configuration shared by every command.

use std::collections::BTreeMap;
use std::path::PathBuf;

use inex_core::agents::{ReflectionConfig, DEFAULT_MAX_RESPONSE_TOKENS};
use inex_core::diagnostics::DiagnosticConfig;
use inex_core::eval::{BenchmarkConfig, Pipeline, ScoreReduction};
use inex_core::introspection::IntrospectionConfig;
use inex_core::model::{build_model, ModelConfig, ModelWeights};
use inex_core::orchestrator::OrchestratorConfig;
use inex_core::vocab;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// TOYMLLM1 weight file; when absent weights are built from `model`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Per-category offsets added to the output head after loading.
    pub logit_bias: BTreeMap<String, f64>,
    pub introspection: IntrospectionConfig,
    pub reflection: ReflectionConfig,
    pub orchestrator: OrchestratorConfig,
    pub pipeline: Pipeline,
    pub num_bins: usize,
    pub score_reduction: ScoreReduction,
    pub max_response_tokens: usize,
    pub diagnostics: DiagnosticConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    /// Seeds corpus generation and diagnostics, and offsets the reflection seed.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: None,
            logit_bias: BTreeMap::new(),
            introspection: IntrospectionConfig::default(),
            reflection: ReflectionConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            pipeline: Pipeline::FullInex,
            num_bins: 10,
            score_reduction: ScoreReduction::Max,
            max_response_tokens: DEFAULT_MAX_RESPONSE_TOKENS,
            diagnostics: DiagnosticConfig::default(),
            corpus: None,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn field_error(e: inex_core::Error) -> CliError {
    match e {
        inex_core::Error::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Usage(other.to_string()),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Checks every nested section; errors name the offending field path.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(field_error)?;
        self.introspection.validate().map_err(field_error)?;
        self.reflection.validate().map_err(field_error)?;
        self.orchestrator.validate().map_err(field_error)?;
        if let Err((field, msg)) = self.diagnostics.check() {
            return Err(CliError::Usage(format!("diagnostics.{field}: {msg}")));
        }
        self.diagnostics
            .model
            .validate()
            .map_err(|e| field_error(e).nest("diagnostics."))?;
        self.diagnostics
            .introspection
            .validate()
            .map_err(|e| field_error(e).nest("diagnostics."))?;
        for (category, offset) in &self.logit_bias {
            if !vocab::is_category(category) {
                return Err(CliError::Usage(format!("logit_bias.{category}: unknown category")));
            }
            if !offset.is_finite() {
                return Err(CliError::Usage(format!("logit_bias.{category}: must be finite")));
            }
        }
        if self.num_bins == 0 {
            return Err(CliError::Usage("num_bins: must be at least 1".into()));
        }
        if self.max_response_tokens == 0 {
            return Err(CliError::Usage("max_response_tokens: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            introspection: self.introspection.clone(),
            reflection: ReflectionConfig {
                seed: self.reflection.seed.wrapping_add(self.seed),
                ..self.reflection.clone()
            },
            orchestrator: self.orchestrator.clone(),
            num_bins: self.num_bins,
            score_reduction: self.score_reduction,
            max_response_tokens: self.max_response_tokens,
        }
    }

    pub fn load_weights(&self) -> Result<ModelWeights, CliError> {
        let mut w = match &self.weights {
            Some(path) => {
                let file = std::fs::File::open(path)
                    .map_err(|e| CliError::Usage(format!("weights: {}: {e}", path.display())))?;
                let w = ModelWeights::read_from(std::io::BufReader::new(file))
                    .map_err(|e| CliError::Usage(format!("weights: {}: {e}", path.display())))?;
                if w.config() != &self.model {
                    return Err(CliError::Usage(format!(
                        "weights: {} was built for a different model config",
                        path.display()
                    )));
                }
                w
            }
            None => build_model(&self.model)?,
        };
        for (category, offset) in &self.logit_bias {
            w.add_logit_bias(vocab::category_token(category).expect("validated"), *offset);
        }
        Ok(w)
    }
}
