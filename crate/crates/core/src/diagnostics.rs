//! Information-theoretic diagnostics over discretized hidden states: plug-in
//! mutual information, conditional entropy and the information-bottleneck
//! loss, compared between original and enhanced final-layer states.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agents::{DecisionAgent, ModelDecisionAgent};
use crate::error::{invalid, Result};
use crate::eval::{generate_corpus, CorpusItem, Setting};
use crate::introspection::IntrospectionConfig;
use crate::model::{build_model, encode_inputs, ModelConfig, ModelWeights};
use crate::numerics::Matrix;
use crate::par::{self, Execution};

pub const MAX_BITS: usize = 8;

/// Seeded random projection to `b` dimensions, thresholded at per-dimension
/// medians of a calibration sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationScheme {
    projection: Matrix,
    thresholds: Vec<f64>,
}

impl DiscretizationScheme {
    pub fn new(projection: Matrix, thresholds: Vec<f64>) -> Result<Self> {
        let b = projection.cols();
        if b == 0 || b > MAX_BITS {
            return Err(invalid(format!("bits must be in 1..={MAX_BITS}, got {b}")));
        }
        if thresholds.len() != b {
            return Err(invalid(format!("{} thresholds for {b} bits", thresholds.len())));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(invalid("thresholds must be finite"));
        }
        Ok(Self { projection, thresholds })
    }

    /// Draws a `dim × bits` Gaussian projection from `seed` and sets each
    /// threshold to the median projection of `calibration`.
    pub fn fit(calibration: &[Vec<f64>], dim: usize, bits: usize, seed: u64) -> Result<Self> {
        if calibration.is_empty() {
            return Err(invalid("calibration sample is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Matrix::from_fn(dim, bits, |_, _| StandardNormal.sample(&mut rng));
        let unit = Self::new(projection, vec![0.0; bits])?;
        let mut projected = vec![Vec::with_capacity(calibration.len()); bits];
        for s in calibration {
            for (col, v) in projected.iter_mut().zip(unit.project(s)?) {
                col.push(v);
            }
        }
        let thresholds = projected.into_iter().map(median).collect();
        Self::new(unit.projection, thresholds)
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn bits(&self) -> usize {
        self.projection.cols()
    }

    pub fn alphabet_size(&self) -> usize {
        1 << self.bits()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    fn project(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.dim() {
            return Err(invalid(format!(
                "state has dimension {} but the scheme expects {}",
                state.len(),
                self.dim()
            )));
        }
        Ok(self.projection.left_mul(state))
    }

    /// Bit `i` is set when projection `i` lies strictly above its threshold.
    pub fn code(&self, state: &[f64]) -> Result<u32> {
        let p = self.project(state)?;
        Ok(p.iter()
            .zip(&self.thresholds)
            .enumerate()
            .filter(|(_, (v, t))| v > t)
            .fold(0u32, |acc, (i, _)| acc | (1 << i)))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn discretize(states: &[Vec<f64>], scheme: &DiscretizationScheme) -> Result<Vec<u32>> {
    states.iter().map(|s| scheme.code(s)).collect()
}

fn counts<T: Ord + Clone>(xs: &[T]) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x.clone()).or_insert(0) += 1;
    }
    m
}

/// Plug-in Shannon entropy in nats.
pub fn entropy<T: Ord + Clone>(xs: &[T]) -> Result<f64> {
    if xs.is_empty() {
        return Err(invalid("entropy of an empty sample"));
    }
    let n = xs.len() as f64;
    Ok(counts(xs)
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

fn check_pair<A, B>(xs: &[A], ys: &[B]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.is_empty() {
        return Err(invalid("empty sample"));
    }
    Ok(())
}

/// Plug-in mutual information in nats over empirical joint frequencies.
pub fn plugin_mi<A: Ord + Clone, B: Ord + Clone>(xs: &[A], ys: &[B]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let cx = counts(xs);
    let cy = counts(ys);
    let joint = counts(&xs.iter().cloned().zip(ys.iter().cloned()).collect::<Vec<_>>());
    let mi: f64 = joint
        .iter()
        .map(|((x, y), &c)| {
            let c = c as f64;
            c / n * (c * n / (cx[x] as f64 * cy[y] as f64)).ln()
        })
        .sum();
    Ok(mi.max(0.0))
}

/// `H(y) - I(y; h)`, the entropy of `ys` left after observing `hs`.
pub fn conditional_entropy<A: Ord + Clone, B: Ord + Clone>(ys: &[A], hs: &[B]) -> Result<f64> {
    check_pair(ys, hs)?;
    Ok((entropy(ys)? - plugin_mi(ys, hs)?).max(0.0))
}

/// Paired samples for one configuration: symbols for query `x`, visual
/// context `z` and emitted token `y`, plus the original and enhanced
/// final-layer states.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MiRuns {
    pub x: Vec<u32>,
    pub z: Vec<u32>,
    pub y: Vec<u32>,
    pub h: Vec<Vec<f64>>,
    pub h_enhanced: Vec<Vec<f64>>,
}

impl MiRuns {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let lens = [self.x.len(), self.z.len(), self.h.len(), self.h_enhanced.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(invalid(format!(
                "inconsistent sample lengths: y {n}, x/z/h/h_enhanced {lens:?}"
            )));
        }
        Ok(())
    }
}

/// Sign of `enhanced - original` for each compared quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaSigns {
    pub mi: i8,
    pub cond_entropy: i8,
    pub ib: i8,
}

fn sign(delta: f64) -> i8 {
    if delta > 0.0 {
        1
    } else if delta < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    /// `I(H; z)`
    pub mi_original: f64,
    /// `I(Ĥ; z)`
    pub mi_enhanced: f64,
    /// `E(y | H)`
    pub cond_entropy_original: f64,
    /// `E(y | Ĥ)`
    pub cond_entropy_enhanced: f64,
    /// `I(H; x) - β I(H; y)`
    pub ib_original: f64,
    /// `I(Ĥ; x) - β I(Ĥ; y)`
    pub ib_enhanced: f64,
    pub beta: f64,
    pub entropy_y: f64,
    pub mi_y_original: f64,
    pub mi_y_enhanced: f64,
    pub mi_x_original: f64,
    pub mi_x_enhanced: f64,
    pub signs: DeltaSigns,
    pub samples: usize,
    pub alphabet_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Discretizes both state families with `scheme` and computes every report
/// quantity. Fewer than four samples per symbol attaches a warning.
pub fn ib_diagnostic(runs: &MiRuns, beta: f64, scheme: &DiscretizationScheme) -> Result<MiReport> {
    runs.check()?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("beta must be positive and finite, got {beta}")));
    }
    let h = discretize(&runs.h, scheme)?;
    let he = discretize(&runs.h_enhanced, scheme)?;
    let entropy_y = entropy(&runs.y)?;
    let mi_y_original = plugin_mi(&runs.y, &h)?;
    let mi_y_enhanced = plugin_mi(&runs.y, &he)?;
    let mi_x_original = plugin_mi(&h, &runs.x)?;
    let mi_x_enhanced = plugin_mi(&he, &runs.x)?;
    let mi_original = plugin_mi(&h, &runs.z)?;
    let mi_enhanced = plugin_mi(&he, &runs.z)?;
    let cond_entropy_original = conditional_entropy(&runs.y, &h)?;
    let cond_entropy_enhanced = conditional_entropy(&runs.y, &he)?;
    let ib_original = mi_x_original - beta * mi_y_original;
    let ib_enhanced = mi_x_enhanced - beta * mi_y_enhanced;
    let alphabet_size = scheme.alphabet_size();
    let samples = runs.len();
    let warning = (samples < 4 * alphabet_size)
        .then(|| format!("low sample count: {samples} samples for {alphabet_size} state symbols"));
    Ok(MiReport {
        signs: DeltaSigns {
            mi: sign(mi_enhanced - mi_original),
            cond_entropy: sign(cond_entropy_enhanced - cond_entropy_original),
            ib: sign(ib_enhanced - ib_original),
        },
        mi_original,
        mi_enhanced,
        cond_entropy_original,
        cond_entropy_enhanced,
        ib_original,
        ib_enhanced,
        beta,
        entropy_y,
        mi_y_original,
        mi_y_enhanced,
        mi_x_original,
        mi_x_enhanced,
        samples,
        alphabet_size,
        warning,
    })
}

fn mean(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Runs the decision agent over `items` and records one sample per decode
/// step. Query and visual means are discretized with their own schemes.
pub fn collect_runs(
    items: &[CorpusItem],
    weights: &ModelWeights,
    introspection: &IntrospectionConfig,
    max_tokens: usize,
    bits: usize,
    seed: u64,
) -> Result<MiRuns> {
    let d = weights.config().model_dim;
    let agent = ModelDecisionAgent {
        weights,
        introspection: introspection.clone(),
        max_tokens,
    };
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut runs = MiRuns::default();
    for item in items {
        let stream = encode_inputs(&item.scene, &item.query, weights)?;
        let query: Vec<Vec<f64>> = item.query.iter().map(|&t| weights.embedding(t).to_vec()).collect();
        let x = mean(&query, d);
        let z = mean(stream.visual_tokens(), d);
        for step in agent.generate(&item.scene, &item.query, None)?.steps {
            xs.push(x.clone());
            zs.push(z.clone());
            runs.y.push(step.token);
            runs.h.push(step.original_hidden);
            runs.h_enhanced.push(step.enhanced_hidden);
        }
    }
    if runs.is_empty() {
        return Err(invalid("no decode steps collected"));
    }
    runs.x = discretize(&xs, &DiscretizationScheme::fit(&xs, d, bits, seed ^ 0x78)?)?;
    runs.z = discretize(&zs, &DiscretizationScheme::fit(&zs, d, bits, seed ^ 0x7a)?)?;
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticConfig {
    pub configurations: usize,
    pub items_per_configuration: usize,
    pub bits: usize,
    pub beta: f64,
    /// Slack on `I(Ĥ; z) ≥ I(H; z)` when counting a configuration as agreeing.
    pub tolerance: f64,
    pub max_tokens: usize,
    pub model: ModelConfig,
    pub introspection: IntrospectionConfig,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            configurations: 40,
            items_per_configuration: 48,
            bits: 3,
            beta: 1.0,
            tolerance: 0.02,
            max_tokens: crate::agents::DEFAULT_MAX_RESPONSE_TOKENS,
            model: ModelConfig::default(),
            introspection: IntrospectionConfig::default(),
        }
    }
}

impl DiagnosticConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.configurations == 0 {
            return Err(("configurations", "must be at least 1".into()));
        }
        if self.items_per_configuration == 0 {
            return Err(("items_per_configuration", "must be at least 1".into()));
        }
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(("bits", format!("must be in 1..={MAX_BITS}")));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(("beta", "must be positive and finite".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(("tolerance", "must be non-negative and finite".into()));
        }
        if self.max_tokens == 0 {
            return Err(("max_tokens", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| invalid(format!("diagnostics.{field}: {msg}")))?;
        self.model.validate()?;
        self.introspection.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationReport {
    pub index: usize,
    pub seed: u64,
    pub setting: Setting,
    pub report: MiReport,
    #[serde(skip)]
    pub runs: MiRuns,
    #[serde(skip)]
    pub scheme: Option<DiscretizationScheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub configurations: usize,
    pub tolerance: f64,
    /// Share of configurations with `I(Ĥ; z) ≥ I(H; z) - tolerance`.
    pub mi_direction_rate: f64,
    /// Share with `E(y | Ĥ) ≤ E(y | H)`.
    pub cond_entropy_direction_rate: f64,
    /// Share with `L(Ĥ) ≤ L(H)`.
    pub ib_direction_rate: f64,
    pub low_sample_warnings: usize,
}

/// Seeded configuration `index`: model and corpus seeds derive from `seed`
/// and negatives cycle through the three settings.
fn configuration(cfg: &DiagnosticConfig, seed: u64, index: usize) -> Result<ConfigurationReport> {
    const SETTINGS: [Setting; 3] = [Setting::Random, Setting::Popular, Setting::Adversarial];
    let run_seed = seed.wrapping_mul(1000).wrapping_add(index as u64);
    let setting = SETTINGS[index % SETTINGS.len()];
    let weights = build_model(&ModelConfig {
        seed: run_seed,
        ..cfg.model.clone()
    })?;
    let items = generate_corpus(cfg.items_per_configuration, setting, run_seed)?;
    let runs = collect_runs(&items, &weights, &cfg.introspection, cfg.max_tokens, cfg.bits, run_seed)?;
    // one scheme for both state families so their codes are comparable
    let pooled: Vec<Vec<f64>> = runs.h.iter().chain(&runs.h_enhanced).cloned().collect();
    let scheme = DiscretizationScheme::fit(&pooled, cfg.model.model_dim, cfg.bits, run_seed ^ 0x68)?;
    let report = ib_diagnostic(&runs, cfg.beta, &scheme)?;
    Ok(ConfigurationReport {
        index,
        seed: run_seed,
        setting,
        report,
        runs,
        scheme: Some(scheme),
    })
}

pub fn run_suite(
    cfg: &DiagnosticConfig,
    seed: u64,
    execution: Execution,
) -> Result<(Vec<ConfigurationReport>, SuiteSummary)> {
    cfg.validate()?;
    let indices: Vec<usize> = (0..cfg.configurations).collect();
    let reports = par::try_map(execution, &indices, |&i| configuration(cfg, seed, i))?;
    let n = reports.len() as f64;
    let rate = |f: &dyn Fn(&MiReport) -> bool| reports.iter().filter(|r| f(&r.report)).count() as f64 / n;
    let summary = SuiteSummary {
        configurations: reports.len(),
        tolerance: cfg.tolerance,
        mi_direction_rate: rate(&|r| r.mi_enhanced >= r.mi_original - cfg.tolerance),
        cond_entropy_direction_rate: rate(&|r| r.cond_entropy_enhanced <= r.cond_entropy_original),
        ib_direction_rate: rate(&|r| r.ib_enhanced <= r.ib_original),
        low_sample_warnings: reports.iter().filter(|r| r.report.warning.is_some()).count(),
    };
    Ok((reports, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn brute_mi(xs: &[u32], ys: &[u32]) -> f64 {
        let n = xs.len() as f64;
        let ax: Vec<u32> = counts(xs).into_keys().collect();
        let ay: Vec<u32> = counts(ys).into_keys().collect();
        let mut total = 0.0;
        for &a in &ax {
            for &b in &ay {
                let pxy = xs.iter().zip(ys).filter(|(x, y)| **x == a && **y == b).count() as f64 / n;
                if pxy == 0.0 {
                    continue;
                }
                let px = xs.iter().filter(|x| **x == a).count() as f64 / n;
                let py = ys.iter().filter(|y| **y == b).count() as f64 / n;
                total += pxy * (pxy / (px * py)).ln();
            }
        }
        total
    }

    fn decomposed_cond_entropy(ys: &[u32], hs: &[u32]) -> f64 {
        let n = ys.len() as f64;
        counts(hs)
            .into_iter()
            .map(|(h, c)| {
                let sub: Vec<u32> = ys.iter().zip(hs).filter(|(_, g)| **g == h).map(|(y, _)| *y).collect();
                c as f64 / n * entropy(&sub).unwrap()
            })
            .sum()
    }

    #[test]
    fn boundary_state_codes_to_zero() {
        let p = Matrix::from_fn(3, 2, |r, c| (r + 2 * c) as f64 - 1.0);
        let state = [0.5, -0.25, 1.0];
        let proj = p.left_mul(&state);
        let s = DiscretizationScheme::new(p, proj).unwrap();
        assert_eq!(s.code(&state).unwrap(), 0);
        assert_eq!(s.code(&state).unwrap(), s.code(&state[..]).unwrap());
        assert!(s.code(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn scheme_rejects_bad_shapes() {
        assert!(DiscretizationScheme::new(Matrix::zeros(4, 0), vec![]).is_err());
        assert!(DiscretizationScheme::new(Matrix::zeros(4, 9), vec![0.0; 9]).is_err());
        assert!(DiscretizationScheme::new(Matrix::zeros(4, 2), vec![0.0]).is_err());
        assert!(DiscretizationScheme::new(Matrix::zeros(4, 2), vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn codes_match_scalar_projection_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let s = DiscretizationScheme::fit(&states, 6, 4, 3).unwrap();
        let codes = discretize(&states, &s).unwrap();
        for (state, &code) in states.iter().zip(&codes) {
            assert!(code < 16);
            let mut expect = 0u32;
            for b in 0..4 {
                let mut v = 0.0;
                for (i, x) in state.iter().enumerate() {
                    v += x * s.projection().get(i, b);
                }
                if v > s.thresholds()[b] {
                    expect |= 1 << b;
                }
            }
            assert_eq!(code, expect);
        }
        // median thresholds split every bit roughly in half
        for b in 0..4 {
            let ones = codes.iter().filter(|c| *c & (1 << b) != 0).count();
            assert_eq!(ones, 50);
        }
    }

    #[test]
    fn analytic_mi_and_entropy() {
        let xs: Vec<u32> = (0..400).map(|i| i % 4).collect();
        assert_abs_diff_eq!(plugin_mi(&xs, &xs).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert_eq!(plugin_mi(&vec![7u32; 400], &xs).unwrap(), 0.0);
        let ys: Vec<u32> = xs.iter().map(|x| x % 2).collect();
        assert_abs_diff_eq!(conditional_entropy(&ys, &xs).unwrap(), 0.0, epsilon = 1e-12);
        let indep: Vec<u32> = (0..400).map(|i| (i / 4) % 2).collect();
        assert_abs_diff_eq!(conditional_entropy(&indep, &xs).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(plugin_mi(&xs, &xs[1..]).is_err());
        assert!(conditional_entropy::<u32, u32>(&[], &[]).is_err());
    }

    fn synthetic_runs(n: usize, seed: u64) -> (MiRuns, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut runs = MiRuns::default();
        let mut zs = Vec::new();
        for i in 0..n {
            let z: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let h: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut he = h.clone();
            // the enhanced state carries exact copies of the z features
            he[4..].copy_from_slice(&z);
            runs.x.push((i % 3) as u32);
            runs.y.push((i % 5) as u32);
            runs.h.push(h);
            runs.h_enhanced.push(he);
            zs.push(z);
        }
        (runs, zs)
    }

    #[test]
    fn enhanced_states_carrying_z_gain_information() {
        let (mut runs, zs) = synthetic_runs(512, 1);
        let zscheme = DiscretizationScheme::fit(&zs, 4, 3, 2).unwrap();
        runs.z = discretize(&zs, &zscheme).unwrap();
        // the state scheme reads exactly the z coordinates
        let proj = Matrix::from_fn(8, 3, |r, c| {
            if r >= 4 {
                zscheme.projection().get(r - 4, c)
            } else {
                0.0
            }
        });
        let scheme = DiscretizationScheme::new(proj, zscheme.thresholds().to_vec()).unwrap();
        let r = ib_diagnostic(&runs, 1.0, &scheme).unwrap();
        assert!(r.mi_enhanced >= r.mi_original);
        assert_abs_diff_eq!(r.mi_enhanced, entropy(&runs.z).unwrap(), epsilon = 1e-12);
        assert_eq!(r.signs.mi, 1);
        assert!(r.warning.is_none());
    }

    #[test]
    fn identical_states_give_identical_terms() {
        let (mut runs, _) = synthetic_runs(24, 4);
        runs.h_enhanced = runs.h.clone();
        runs.z = runs.y.iter().map(|y| y % 2).collect();
        let scheme = DiscretizationScheme::fit(&runs.h, 8, 3, 5).unwrap();
        let r = ib_diagnostic(&runs, 1.0, &scheme).unwrap();
        assert_eq!(r.mi_enhanced, r.mi_original);
        assert_eq!(r.cond_entropy_enhanced, r.cond_entropy_original);
        assert_eq!(r.ib_enhanced, r.ib_original);
        assert_eq!(
            r.signs,
            DeltaSigns {
                mi: 0,
                cond_entropy: 0,
                ib: 0
            }
        );
        assert!(r.warning.as_deref().unwrap().contains("low sample"));
    }

    #[test]
    fn diagnostic_rejects_bad_inputs() {
        let (mut runs, _) = synthetic_runs(40, 4);
        runs.z = vec![0; 40];
        let scheme = DiscretizationScheme::fit(&runs.h, 8, 3, 5).unwrap();
        assert!(ib_diagnostic(&runs, 0.0, &scheme).is_err());
        assert!(ib_diagnostic(&runs, f64::INFINITY, &scheme).is_err());
        runs.x.pop();
        assert!(ib_diagnostic(&runs, 1.0, &scheme).is_err());
    }

    #[test]
    fn suite_is_deterministic_and_consistent() {
        let cfg = DiagnosticConfig {
            configurations: 3,
            items_per_configuration: 8,
            ..DiagnosticConfig::default()
        };
        let (a, sa) = run_suite(&cfg, 1, Execution::Sequential).unwrap();
        let (b, sb) = run_suite(&cfg, 1, Execution::Parallel).unwrap();
        assert_eq!(sa, sb);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.report, y.report);
            let r = &x.report;
            assert_abs_diff_eq!(r.entropy_y, r.cond_entropy_original + r.mi_y_original, epsilon = 1e-12);
        }
        assert!(run_suite(&DiagnosticConfig { bits: 0, ..cfg }, 1, Execution::Sequential).is_err());
    }

    proptest! {
        #[test]
        fn mi_matches_joint_table_oracle(pairs in prop::collection::vec((0u32..5, 0u32..4), 1..120)) {
            let (xs, ys): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            let mi = plugin_mi(&xs, &ys).unwrap();
            prop_assert!((mi - brute_mi(&xs, &ys).max(0.0)).abs() < 1e-12);
            prop_assert!((mi - plugin_mi(&ys, &xs).unwrap()).abs() < 1e-12);
            prop_assert!(mi >= -1e-12);
        }

        #[test]
        fn conditional_entropy_matches_decomposition(pairs in prop::collection::vec((0u32..5, 0u32..4), 1..120)) {
            let (ys, hs): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            let ce = conditional_entropy(&ys, &hs).unwrap();
            prop_assert!(ce >= -1e-12);
            prop_assert!((ce - decomposed_cond_entropy(&ys, &hs)).abs() < 1e-12);
            let chain = ce + plugin_mi(&ys, &hs).unwrap();
            prop_assert!((entropy(&ys).unwrap() - chain).abs() < 1e-12);
        }
    }
}
