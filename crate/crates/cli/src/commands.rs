use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use inex_core::agents::{Agents, ModelDecisionAgent, Response, SceneEditAgent, TextReflector, VisionReflector};
use inex_core::diagnostics::{run_suite, ConfigurationReport};
use inex_core::eval::{
    binary_metrics, calibration_csv, chair_metrics, ece, generate_corpus, metrics_csv, parse_corpus, run_benchmark,
    scalar_metrics, write_corpus, EvalRecord, Pipeline, Setting,
};
use inex_core::orchestrator::{check_control_flow, replay as replay_transcript, reverify, Transcript};
use inex_core::par::Execution;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{read_input, write_atomic};
use crate::CliError;

/// One line of `responses.jsonl`: everything `eval` and `calibrate` need
/// without re-running the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub pipeline: Pipeline,
    pub record: EvalRecord,
    pub hallucinated_facts: usize,
    pub mentioned: BTreeSet<String>,
    pub truth: BTreeSet<String>,
    pub response: Response,
}

fn item_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("item_{id:05}.jsonl"))
}

pub fn gen_corpus(cfg: &RunConfig, size: usize, setting: Setting) -> Result<(), CliError> {
    if size == 0 {
        return Err(CliError::Usage("--size must be at least 1".into()));
    }
    let items = generate_corpus(size, setting, cfg.seed)?;
    let path = cfg.out.join("corpus.jsonl");
    write_atomic(&path, write_corpus(&items).as_bytes())?;
    eprintln!("wrote {} items to {}", items.len(), path.display());
    Ok(())
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Usage("corpus: required (config field or --corpus)".into()))?;
    let items =
        parse_corpus(&read_input(corpus)?).map_err(|e| CliError::Usage(format!("{}: {e}", corpus.display())))?;
    let weights = cfg.load_weights()?;
    let report = run_benchmark(&items, cfg.pipeline, &weights, &cfg.benchmark(), Execution::Parallel)?;

    // the recorded config points at its own directory so trees compare equal
    let recorded = RunConfig {
        out: PathBuf::from("."),
        ..cfg.clone()
    };
    let mut config_json = serde_json::to_string_pretty(&recorded).expect("config serializes");
    config_json.push('\n');
    write_atomic(&cfg.out.join("config.json"), config_json.as_bytes())?;

    let truth: std::collections::BTreeMap<usize, BTreeSet<String>> =
        items.iter().map(|i| (i.id, i.scene.categories())).collect();
    let mut responses = String::new();
    for (result, record) in report.items.iter().zip(&report.records) {
        let line = ResponseRecord {
            pipeline: cfg.pipeline,
            record: record.clone(),
            hallucinated_facts: result.hallucinated_facts,
            mentioned: result.response.mentioned_categories(),
            truth: truth[&result.id].clone(),
            response: result.response.clone(),
        };
        responses.push_str(&serde_json::to_string(&line).expect("record serializes"));
        responses.push('\n');

        let mut steps = String::new();
        for (i, s) in result.response.steps.iter().enumerate() {
            steps.push_str(&s.to_record(i).to_string());
            steps.push('\n');
        }
        write_atomic(&item_file(&cfg.out.join("steps"), result.id), steps.as_bytes())?;
        if let Some(t) = &result.transcript {
            write_atomic(
                &item_file(&cfg.out.join("transcripts"), result.id),
                t.to_jsonl().as_bytes(),
            )?;
        }
    }
    write_atomic(&cfg.out.join("responses.jsonl"), responses.as_bytes())?;
    eprintln!(
        "{}: {} items, {} hallucinated facts, accuracy {:.3}",
        cfg.pipeline,
        report.items.len(),
        report.hallucinated_facts,
        report.binary.accuracy
    );
    Ok(())
}

fn load_responses(cfg: &RunConfig, run: Option<&Path>) -> Result<Vec<ResponseRecord>, CliError> {
    let path = run.unwrap_or(&cfg.out).join("responses.jsonl");
    let text = read_input(&path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ResponseRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{}: no responses", path.display())));
    }
    Ok(out)
}

fn records(responses: &[ResponseRecord]) -> Vec<EvalRecord> {
    responses.iter().map(|r| r.record.clone()).collect()
}

pub fn eval(cfg: &RunConfig, run: Option<&Path>) -> Result<(), CliError> {
    let responses = load_responses(cfg, run)?;
    let recs = records(&responses);
    let pairs: Vec<_> = responses
        .iter()
        .map(|r| (r.mentioned.clone(), r.truth.clone()))
        .collect();
    let metrics = scalar_metrics(
        &binary_metrics(&recs)?,
        &chair_metrics(&pairs)?,
        &ece(&recs, cfg.num_bins)?,
        responses.iter().map(|r| r.hallucinated_facts).sum(),
        responses.len(),
    );
    let csv = metrics_csv(&metrics);
    write_atomic(&cfg.out.join("metrics.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, run: Option<&Path>) -> Result<(), CliError> {
    let report = ece(&records(&load_responses(cfg, run)?), cfg.num_bins)?;
    let csv = calibration_csv(&report);
    write_atomic(&cfg.out.join("calibration.csv"), csv.as_bytes())?;
    print!("{csv}");
    eprintln!(
        "ece {:.6}{}",
        report.ece,
        if report.degenerate { " (degenerate scores)" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedReport<'a> {
    index: usize,
    seed: u64,
    setting: Setting,
    report: &'a inex_core::diagnostics::MiReport,
}

/// Nonnegativity and the chain identity `H(y) = E(y|h) + I(y;h)`.
fn check_report(c: &ConfigurationReport) -> Result<(), String> {
    let r = &c.report;
    let terms = [
        ("mi_original", r.mi_original),
        ("mi_enhanced", r.mi_enhanced),
        ("cond_entropy_original", r.cond_entropy_original),
        ("cond_entropy_enhanced", r.cond_entropy_enhanced),
    ];
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
    if let Some((name, v)) = terms.iter().find(|(_, v)| !(*v >= -1e-12)) {
        return Err(format!("configuration {} (seed {}): {name} = {v}", c.index, c.seed));
    }
    for (ce, mi) in [
        (r.cond_entropy_original, r.mi_y_original),
        (r.cond_entropy_enhanced, r.mi_y_enhanced),
    ] {
        if (r.entropy_y - ce - mi).abs() > 1e-12 {
            return Err(format!(
                "configuration {} (seed {}): chain identity off by {}",
                c.index,
                c.seed,
                r.entropy_y - ce - mi
            ));
        }
    }
    Ok(())
}

pub fn diagnose(cfg: &RunConfig) -> Result<(), CliError> {
    let (reports, summary) = run_suite(&cfg.diagnostics, cfg.seed, Execution::Parallel)?;
    let dir = cfg.out.join("diagnostics");
    for c in &reports {
        let body = SeedReport {
            index: c.index,
            seed: c.seed,
            setting: c.setting,
            report: &c.report,
        };
        let mut text = serde_json::to_string_pretty(&body).expect("report serializes");
        text.push('\n');
        write_atomic(&dir.join(format!("report_seed_{}.json", c.seed)), text.as_bytes())?;
    }
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write_atomic(&dir.join("summary.json"), text.as_bytes())?;
    print!("{text}");
    for c in &reports {
        check_report(c).map_err(CliError::Invariant)?;
    }
    Ok(())
}

fn transcript_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("{}: no such file or directory", p.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("no transcripts found".into()));
    }
    Ok(files)
}

pub fn replay(cfg: &RunConfig, paths: &[PathBuf]) -> Result<(), CliError> {
    let files = transcript_files(paths)?;
    let weights = cfg.load_weights()?;
    let bench = cfg.benchmark();
    let decision = ModelDecisionAgent {
        weights: &weights,
        introspection: bench.introspection.clone(),
        max_tokens: bench.max_response_tokens,
    };
    let text = TextReflector::new(bench.reflection.clone());
    let agents = Agents {
        decision: &decision,
        text: &text,
        edit: &SceneEditAgent,
        vision: &VisionReflector,
    };
    for f in &files {
        let t =
            Transcript::from_jsonl(&read_input(f)?).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?;
        let fail = |m: String| CliError::Invariant(format!("{}: {m}", f.display()));
        check_control_flow(&t).map_err(fail)?;
        match replay_transcript(&t, agents) {
            Ok(true) => {}
            Ok(false) => return Err(fail("replay diverged from the recorded transcript".into())),
            Err(e) => return Err(fail(e.to_string())),
        }
        if reverify(&t, agents)? == Some(false) {
            return Err(fail("accepted response no longer verifies".into()));
        }
        println!("ok {}", f.display());
    }
    eprintln!("replayed {} transcripts", files.len());
    Ok(())
}
