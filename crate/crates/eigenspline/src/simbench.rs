//! Simulation scenarios and benchmarks: test functions, replicated data
//! generation, method grids with bias/variance/MSE decompositions, and
//! wall-clock timing sweeps.

use std::time::Instant;

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::eigensys::{precompute_cache, EigenSystemCache};
use crate::kernels::{null_matrix, DataSet, Kernel};
use crate::solvers::{
    fit_lowrank, fit_rsr, gml_select, nystrom_features, predict, ExactEngine,
    GramSpec, LambdaGrid,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Test functions
// ---------------------------------------------------------------------------

/// The three simulated truths, ordered by increasing complexity: two
/// bumps, three bumps, and a fast oscillation on a parabola.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunction {
    Case1,
    Case2,
    Case3,
}

impl TestFunction {
    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Case1 => "case1",
            TestFunction::Case2 => "case2",
            TestFunction::Case3 => "case3",
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval_test_function(*self, x)
    }
}

impl std::str::FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case1" => Ok(TestFunction::Case1),
            "case2" => Ok(TestFunction::Case2),
            "case3" => Ok(TestFunction::Case3),
            other => Err(Error::InvalidArgument(format!(
                "unknown test function '{other}' (expected case1, case2, or case3)"
            ))),
        }
    }
}

/// Beta density with the normalizer evaluated through log-gamma, so large
/// shape parameters do not overflow.
pub fn beta_density(p: f64, q: f64, x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    (ln_gamma(p + q) - ln_gamma(p) - ln_gamma(q)
        + (p - 1.0) * x.ln()
        + (q - 1.0) * (1.0 - x).ln())
    .exp()
}

/// Evaluates one of the three simulated truths at x in [0, 1].
pub fn eval_test_function(id: TestFunction, x: f64) -> f64 {
    match id {
        TestFunction::Case1 => {
            0.6 * beta_density(30.0, 17.0, x) + 0.4 * beta_density(3.0, 11.0, x)
        }
        TestFunction::Case2 => {
            (beta_density(20.0, 5.0, x)
                + beta_density(12.0, 12.0, x)
                + beta_density(7.0, 30.0, x))
                / 3.0
        }
        TestFunction::Case3 => {
            (32.0 * std::f64::consts::PI * x).sin() - 8.0 * (x - 0.5) * (x - 0.5)
        }
    }
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

/// One fitting method within a scenario grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodSpec {
    All,
    Rsr { q: usize },
    Eigen { k: usize },
    Nystrom { k: usize },
}

impl MethodSpec {
    /// Row label in the output tables (E10, N30, RSR55, ALL).
    pub fn label(&self) -> String {
        match self {
            MethodSpec::All => "ALL".to_string(),
            MethodSpec::Rsr { q } => format!("RSR{q}"),
            MethodSpec::Eigen { k } => format!("E{k}"),
            MethodSpec::Nystrom { k } => format!("N{k}"),
        }
    }
}

/// Smoothing-parameter rule: GML selection per replicate, or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    Gml,
    Fixed(f64),
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Gml
    }
}

impl Serialize for LambdaRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaRule::Gml => s.serialize_str("gml"),
            LambdaRule::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) if v > 0.0 && v.is_finite() => Ok(LambdaRule::Fixed(v)),
            Raw::Number(v) => Err(DeError::custom(format!(
                "lambda must be positive and finite, got {v}"
            ))),
            Raw::Text(t) if t == "gml" => Ok(LambdaRule::Gml),
            Raw::Text(t) => Err(DeError::custom(format!(
                "lambda must be a positive number or \"gml\", got \"{t}\""
            ))),
        }
    }
}

fn default_kernel() -> Kernel {
    Kernel::cubic()
}

fn default_n_points() -> usize {
    100
}

/// One cell of the simulation protocol: a truth, a sample size, a noise
/// level, a replicate count with its seed, and a method grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub function: TestFunction,
    #[serde(default = "default_kernel")]
    pub kernel: Kernel,
    pub n: usize,
    pub sigma: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Pre-selected point count for the eigensystem cache.
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub lambda: LambdaRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<LambdaGrid>,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.replicates == 0 {
            return Err(Error::InvalidArgument(
                "scenario needs n > 0 and at least one replicate".into(),
            ));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise level must be non-negative and finite, got {}",
                self.sigma
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("scenario has no methods".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: SimScenario = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("scenario parse error: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization")
    }

    fn grid(&self) -> LambdaGrid {
        self.lambda_grid.unwrap_or_default()
    }
}

/// Customary subset size for the random-representer method,
/// max(30, ceil(10 n^{2/9})).
pub fn default_rsr_subset(n: usize) -> usize {
    let q = (10.0 * (n as f64).powf(2.0 / 9.0)).ceil() as usize;
    q.max(30).min(n)
}

/// The shipped desk-scale grid: n = 2000, 20 replicates, the full method
/// ladder with ranks 10..50.
pub fn desk_scale_scenario(function: TestFunction, sigma: f64, seed: u64) -> SimScenario {
    let n = 2000;
    let mut methods = vec![MethodSpec::All, MethodSpec::Rsr {
        q: default_rsr_subset(n),
    }];
    for k in [10usize, 20, 30, 40, 50] {
        methods.push(MethodSpec::Eigen { k });
    }
    for k in [10usize, 20, 30, 40, 50] {
        methods.push(MethodSpec::Nystrom { k });
    }
    SimScenario {
        function,
        kernel: Kernel::cubic(),
        n,
        sigma,
        replicates: 20,
        seed,
        n_points: 100,
        methods,
        lambda: LambdaRule::Gml,
        lambda_grid: None,
    }
}

/// Design points x_i = i / n and noisy responses for one replicate.
///
/// Noise comes from a ChaCha20 stream seeded by the scenario seed with the
/// replicate index as the stream number, so replicates are independent and
/// reproducible in any execution order.
pub fn generate_data(scenario: &SimScenario, replicate: usize) -> Result<DataSet> {
    scenario.validate()?;
    let n = scenario.n;
    let x = Array1::from_shape_fn(n, |i| (i + 1) as f64 / n as f64);
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    rng.set_stream(replicate as u64);
    let normal = Normal::new(0.0, scenario.sigma)
        .map_err(|e| Error::InvalidArgument(format!("bad noise level: {e}")))?;
    let y = Array1::from_shape_fn(n, |i| {
        scenario.function.eval(x[i]) + normal.sample(&mut rng)
    });
    DataSet::new(x, y)
}

/// Derives independent sub-seeds for the randomized methods (SplitMix64
/// over the scenario seed, a method tag, and the replicate).
fn derive_seed(base: u64, tag: u64, replicate: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(replicate.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Metric aggregation
// ---------------------------------------------------------------------------

/// Pointwise bias^2 / variance / MSE across replicates.
pub struct Decomposition {
    pub bias_sq: Array1<f64>,
    pub variance: Array1<f64>,
    pub mse: Array1<f64>,
}

/// Decomposes replicated fitted values (rows) against the truth at the
/// design points. All three quantities share the 1/R normalization, so
/// MSE = bias^2 + variance holds pointwise up to rounding.
pub fn bias_variance_decomposition(fitted: &Array2<f64>, truth: &Array1<f64>) -> Decomposition {
    let (reps, n) = fitted.dim();
    assert_eq!(n, truth.len());
    assert!(reps > 0);
    let r = reps as f64;
    let mut bias_sq = Array1::zeros(n);
    let mut variance = Array1::zeros(n);
    let mut mse = Array1::zeros(n);
    for i in 0..n {
        let mut mean = 0.0;
        for rep in 0..reps {
            mean += fitted[[rep, i]];
        }
        mean /= r;
        let mut var = 0.0;
        let mut err = 0.0;
        for rep in 0..reps {
            let dev = fitted[[rep, i]] - mean;
            var += dev * dev;
            let e = fitted[[rep, i]] - truth[i];
            err += e * e;
        }
        bias_sq[i] = (mean - truth[i]) * (mean - truth[i]);
        variance[i] = var / r;
        mse[i] = err / r;
    }
    Decomposition {
        bias_sq,
        variance,
        mse,
    }
}

/// Aggregated metrics for one method over all replicates (raw units; the
/// CSV emitter scales by 1e4 to match the usual table convention).
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub method: MethodSpec,
    pub label: String,
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    pub mean_seconds: f64,
}

/// A method that failed on some replicate, with the error that stopped it.
#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub label: String,
    pub replicate: usize,
    pub error: String,
}

/// Output of a scenario run: one row per successful method, explicit
/// failure records otherwise, and the (untimed-per-fit) cache build cost.
#[derive(Debug, Serialize)]
pub struct RunOutput {
    pub rows: Vec<MetricRow>,
    pub failures: Vec<CellFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_seconds: Option<f64>,
}

struct ReplicateOutcome {
    /// Per method: fitted values at the design points and the fit seconds.
    results: Vec<std::result::Result<(Array1<f64>, f64), String>>,
}

fn select_lambda(
    rule: LambdaRule,
    grid: &LambdaGrid,
    y: &Array1<f64>,
    qr: &crate::solvers::QrFactors,
    features: &Array2<f64>,
) -> Result<f64> {
    match rule {
        LambdaRule::Fixed(v) => Ok(v),
        LambdaRule::Gml => {
            Ok(gml_select(y, qr, GramSpec::Features(features), grid)?.lambda)
        }
    }
}

fn run_one_method(
    scenario: &SimScenario,
    method: MethodSpec,
    data: &DataSet,
    cache: Option<&EigenSystemCache>,
    replicate: usize,
) -> Result<(Array1<f64>, f64)> {
    let kernel = scenario.kernel;
    let grid = scenario.grid();
    let xs = data.x().as_slice().expect("contiguous");
    let start = Instant::now();
    let fitted = match method {
        MethodSpec::All => {
            let engine = ExactEngine::new(data, &kernel)?;
            let fit = match scenario.lambda {
                LambdaRule::Fixed(v) => engine.fit(v)?,
                LambdaRule::Gml => engine.fit_gml(&grid)?.0,
            };
            predict(&fit, xs)?
        }
        MethodSpec::Eigen { k } => {
            let cache = cache.ok_or_else(|| {
                Error::InvalidArgument("eigen method requires a precomputed cache".into())
            })?;
            let t = null_matrix(&kernel, xs)?;
            let z = cache.features(xs, k)?;
            let qr = crate::solvers::QrFactors::new(&t)?;
            let lambda = select_lambda(scenario.lambda, &grid, data.y(), &qr, &z)?;
            let ridge = fit_lowrank(data.y(), &t, &z, lambda)?;
            t.dot(&ridge.d) + z.dot(&ridge.b)
        }
        MethodSpec::Nystrom { k } => {
            let seed = derive_seed(scenario.seed, 1, replicate as u64);
            let features = nystrom_features(data, &kernel, k, seed)?;
            let t = null_matrix(&kernel, xs)?;
            let qr = crate::solvers::QrFactors::new(&t)?;
            let lambda = select_lambda(scenario.lambda, &grid, data.y(), &qr, &features.z)?;
            let ridge = fit_lowrank(data.y(), &t, &features.z, lambda)?;
            t.dot(&ridge.d) + features.z.dot(&ridge.b)
        }
        MethodSpec::Rsr { q } => {
            let seed = derive_seed(scenario.seed, 2, replicate as u64);
            // The subset features (same index draw as the fit below) give
            // the effective Gram of the representer subspace for GML.
            let features = nystrom_features(data, &kernel, q, seed)?;
            let t = null_matrix(&kernel, xs)?;
            let qr = crate::solvers::QrFactors::new(&t)?;
            let lambda = select_lambda(scenario.lambda, &grid, data.y(), &qr, &features.z)?;
            let fit = fit_rsr(data, &kernel, q, lambda, seed)?;
            predict(&fit, xs)?
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok((fitted, seconds))
}

/// Runs the scenario's method grid over all replicates.
///
/// Replicates execute in parallel with isolated RNG streams; aggregation
/// reduces in replicate order, so the metric values are bit-reproducible
/// for a fixed seed regardless of thread count (timings excluded).
pub fn run_grid(scenario: &SimScenario) -> Result<RunOutput> {
    scenario.validate()?;
    let needs_cache = scenario
        .methods
        .iter()
        .any(|m| matches!(m, MethodSpec::Eigen { .. }));
    let (cache, cache_seconds) = if needs_cache {
        let t0 = Instant::now();
        let cache = precompute_cache(&scenario.kernel, scenario.n_points)?;
        (Some(cache), Some(t0.elapsed().as_secs_f64()))
    } else {
        (None, None)
    };

    let outcomes: Vec<ReplicateOutcome> = (0..scenario.replicates)
        .into_par_iter()
        .map(|rep| {
            let results = match generate_data(scenario, rep) {
                Ok(data) => scenario
                    .methods
                    .iter()
                    .map(|&method| {
                        run_one_method(scenario, method, &data, cache.as_ref(), rep)
                            .map_err(|e| e.to_string())
                    })
                    .collect(),
                Err(e) => scenario
                    .methods
                    .iter()
                    .map(|_| Err(e.to_string()))
                    .collect(),
            };
            ReplicateOutcome { results }
        })
        .collect();

    let truth = Array1::from_shape_fn(scenario.n, |i| {
        scenario.function.eval((i + 1) as f64 / scenario.n as f64)
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (m_idx, &method) in scenario.methods.iter().enumerate() {
        let label = method.label();
        let mut fitted = Array2::zeros((scenario.replicates, scenario.n));
        let mut seconds = 0.0;
        let mut failed = false;
        for (rep, outcome) in outcomes.iter().enumerate() {
            match &outcome.results[m_idx] {
                Ok((values, secs)) => {
                    fitted.row_mut(rep).assign(values);
                    seconds += secs;
                }
                Err(e) => {
                    failures.push(CellFailure {
                        label: label.clone(),
                        replicate: rep,
                        error: e.clone(),
                    });
                    failed = true;
                }
            }
        }
        if failed {
            continue;
        }
        let decomposition = bias_variance_decomposition(&fitted, &truth);
        let n_f = scenario.n as f64;
        rows.push(MetricRow {
            method,
            label,
            bias_sq: decomposition.bias_sq.sum() / n_f,
            variance: decomposition.variance.sum() / n_f,
            mse: decomposition.mse.sum() / n_f,
            mean_seconds: seconds / scenario.replicates as f64,
        });
    }
    Ok(RunOutput {
        rows,
        failures,
        cache_seconds,
    })
}

/// Metrics CSV with bias^2/variance/MSE scaled by 1e4, matching the usual
/// reporting convention for these simulations.
pub fn metrics_csv(scenario: &SimScenario, rows: &[MetricRow]) -> String {
    let mut out = String::from("method,case,sigma,bias2,var,mse,seconds\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            row.label,
            scenario.function.name(),
            scenario.sigma,
            row.bias_sq * 1e4,
            row.variance * 1e4,
            row.mse * 1e4,
            row.mean_seconds,
        ));
    }
    out
}

/// Machine-readable record of a scenario run: configuration hash, crate
/// version, seed, cache cost, and any per-cell failures.
pub fn run_manifest(scenario: &SimScenario, output: &RunOutput) -> String {
    #[derive(Serialize)]
    struct Manifest<'a> {
        config_sha256: String,
        crate_version: &'static str,
        seed: u64,
        replicates: usize,
        scenario: &'a SimScenario,
        #[serde(skip_serializing_if = "Option::is_none")]
        cache_seconds: Option<f64>,
        failures: &'a [CellFailure],
    }
    let config_json = scenario.to_json();
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    let manifest = Manifest {
        config_sha256: format!("{:x}", hasher.finalize()),
        crate_version: env!("CARGO_PKG_VERSION"),
        seed: scenario.seed,
        replicates: scenario.replicates,
        scenario,
        cache_seconds: output.cache_seconds,
        failures: &output.failures,
    };
    serde_json::to_string_pretty(&manifest).expect("manifest serialization")
}

// ---------------------------------------------------------------------------
// Timing sweeps
// ---------------------------------------------------------------------------

/// Configuration of a wall-clock sweep over sample sizes for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSweep {
    pub function: TestFunction,
    #[serde(default = "default_kernel")]
    pub kernel: Kernel,
    pub sigma: f64,
    pub seed: u64,
    pub method: MethodSpec,
    pub n_list: Vec<usize>,
    pub repeats: usize,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    /// Fixed smoothing parameter for the timed fits.
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub n: usize,
    pub seconds: f64,
}

/// Median-of-repeats fit time per sample size, after one untimed warm-up.
/// Cache precomputation is excluded (the cache is reusable across fits)
/// and reported separately by the caller if needed.
pub fn timing_sweep(sweep: &TimingSweep) -> Result<Vec<TimingRow>> {
    if sweep.repeats == 0 || sweep.n_list.is_empty() {
        return Err(Error::InvalidArgument(
            "timing sweep needs repeats > 0 and at least one sample size".into(),
        ));
    }
    let needs_cache = matches!(sweep.method, MethodSpec::Eigen { .. });
    let cache = if needs_cache {
        Some(precompute_cache(&sweep.kernel, sweep.n_points)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(sweep.n_list.len());
    for &n in &sweep.n_list {
        let scenario = SimScenario {
            function: sweep.function,
            kernel: sweep.kernel,
            n,
            sigma: sweep.sigma,
            replicates: 1,
            seed: sweep.seed,
            n_points: sweep.n_points,
            methods: vec![sweep.method],
            lambda: LambdaRule::Fixed(sweep.lambda),
            lambda_grid: None,
        };
        let data = generate_data(&scenario, 0)?;
        // Warm-up, excluded from the medians.
        run_one_method(&scenario, sweep.method, &data, cache.as_ref(), 0)?;
        let mut times = Vec::with_capacity(sweep.repeats);
        for _ in 0..sweep.repeats {
            let (_, secs) = run_one_method(&scenario, sweep.method, &data, cache.as_ref(), 0)?;
            times.push(secs);
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        rows.push(TimingRow {
            n,
            seconds: times[times.len() / 2],
        });
    }
    Ok(rows)
}

/// Timing CSV, one row per sample size.
pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("n,seconds\n");
    for row in rows {
        out.push_str(&format!("{},{:.6}\n", row.n, row.seconds));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{trapezoid_sum, unit_grid};

    #[test]
    fn case3_reference_values() {
        assert!(eval_test_function(TestFunction::Case3, 0.5).abs() < 1e-12);
        assert!((eval_test_function(TestFunction::Case3, 0.25) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn beta_normalizer_and_mass() {
        // Gamma(14) / (Gamma(3) Gamma(11)) = 858, so the density at its
        // polynomial form is 858 x^2 (1 - x)^10.
        let x: f64 = 0.37;
        let direct = 858.0 * x * x * (1.0 - x).powi(10);
        assert!((beta_density(3.0, 11.0, x) - direct).abs() < 1e-10);
        // Unit mass by quadrature.
        let grid = unit_grid(10_001);
        let vals: Vec<f64> = grid.iter().map(|&t| beta_density(3.0, 11.0, t)).collect();
        let mass = trapezoid_sum(&vals, 1.0 / 10_000.0);
        assert!((mass - 1.0).abs() < 1e-8, "mass = {mass}");
    }

    fn tiny_scenario() -> SimScenario {
        SimScenario {
            function: TestFunction::Case1,
            kernel: Kernel::cubic(),
            n: 60,
            sigma: 0.1,
            replicates: 4,
            seed: 99,
            n_points: 40,
            methods: vec![
                MethodSpec::All,
                MethodSpec::Eigen { k: 8 },
                MethodSpec::Nystrom { k: 8 },
                MethodSpec::Rsr { q: 12 },
            ],
            lambda: LambdaRule::Gml,
            lambda_grid: Some(LambdaGrid {
                log10_min: -8.0,
                log10_max: -2.0,
                points: 13,
            }),
        }
    }

    #[test]
    fn data_generation_is_deterministic_and_noise_free_limit() {
        let scenario = tiny_scenario();
        let a = generate_data(&scenario, 2).unwrap();
        let b = generate_data(&scenario, 2).unwrap();
        assert_eq!(a.y(), b.y());
        let c = generate_data(&scenario, 3).unwrap();
        assert_ne!(a.y(), c.y());
        // Replicate index manifests only through the noise stream.
        assert_eq!(a.x(), c.x());
        // With sigma = 0 the responses are exactly the truth.
        let noiseless = SimScenario {
            sigma: 0.0,
            ..tiny_scenario()
        };
        let data = generate_data(&noiseless, 0).unwrap();
        for (&x, &y) in data.x().iter().zip(data.y().iter()) {
            assert_eq!(y, noiseless.function.eval(x));
        }
    }

    #[test]
    fn noiseless_exact_fit_has_negligible_mse() {
        let scenario = SimScenario {
            function: TestFunction::Case1,
            kernel: Kernel::cubic(),
            n: 100,
            sigma: 0.0,
            replicates: 1,
            seed: 1,
            n_points: 30,
            methods: vec![MethodSpec::All],
            lambda: LambdaRule::Fixed(1e-12),
            lambda_grid: None,
        };
        let out = run_grid(&scenario).unwrap();
        assert!(
            out.rows[0].mse <= 1e-8,
            "noiseless near-interpolation MSE {}",
            out.rows[0].mse
        );
    }

    #[test]
    fn noise_scale_matches_sigma() {
        let scenario = SimScenario {
            n: 100_000,
            ..tiny_scenario()
        };
        let data = generate_data(&scenario, 0).unwrap();
        let residuals: Vec<f64> = data
            .x()
            .iter()
            .zip(data.y().iter())
            .map(|(&x, &y)| y - scenario.function.eval(x))
            .collect();
        let mean: f64 = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let var: f64 =
            residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                / residuals.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - 0.1).abs() / 0.1 < 0.01,
            "sample std {std} vs sigma 0.1"
        );
    }

    #[test]
    fn decomposition_identity_holds_pointwise() {
        let scenario = tiny_scenario();
        let truth = Array1::from_shape_fn(scenario.n, |i| {
            scenario.function.eval((i + 1) as f64 / scenario.n as f64)
        });
        let mut fitted = Array2::zeros((scenario.replicates, scenario.n));
        for rep in 0..scenario.replicates {
            let data = generate_data(&scenario, rep).unwrap();
            fitted.row_mut(rep).assign(data.y());
        }
        let d = bias_variance_decomposition(&fitted, &truth);
        for i in 0..scenario.n {
            let gap = (d.mse[i] - (d.bias_sq[i] + d.variance[i])).abs();
            assert!(
                gap <= 1e-12 * d.mse[i] + 1e-15,
                "point {i}: mse {} vs bias+var {}",
                d.mse[i],
                d.bias_sq[i] + d.variance[i]
            );
        }
    }

    #[test]
    fn run_grid_produces_all_rows_and_is_reproducible() {
        let scenario = tiny_scenario();
        let out1 = run_grid(&scenario).unwrap();
        assert_eq!(out1.rows.len(), 4);
        assert!(out1.failures.is_empty());
        assert!(out1.cache_seconds.is_some());
        let out2 = run_grid(&scenario).unwrap();
        for (a, b) in out1.rows.iter().zip(&out2.rows) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.bias_sq, b.bias_sq);
            assert_eq!(a.variance, b.variance);
            assert_eq!(a.mse, b.mse);
        }
        // MSE decomposition survives aggregation.
        for row in &out1.rows {
            assert!(
                (row.mse - (row.bias_sq + row.variance)).abs() <= 1e-12 * row.mse + 1e-15,
                "{}: {} vs {}",
                row.label,
                row.mse,
                row.bias_sq + row.variance
            );
        }
    }

    #[test]
    fn failed_methods_are_recorded_not_fatal() {
        let mut scenario = tiny_scenario();
        // Rank beyond the cache's positive modes fails per replicate.
        scenario.methods = vec![MethodSpec::All, MethodSpec::Eigen { k: 4000 }];
        let out = run_grid(&scenario).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].label, "ALL");
        assert_eq!(out.failures.len(), scenario.replicates);
        assert_eq!(out.failures[0].label, "E4000");
    }

    #[test]
    fn csv_outputs_are_scaled_and_labeled() {
        let scenario = tiny_scenario();
        let rows = vec![MetricRow {
            method: MethodSpec::Eigen { k: 8 },
            label: "E8".into(),
            bias_sq: 1.5e-4,
            variance: 0.5e-4,
            mse: 2.0e-4,
            mean_seconds: 0.25,
        }];
        let csv = metrics_csv(&scenario, &rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("method,case,sigma,bias2,var,mse,seconds"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("E8,case1,0.1,1.5"), "row = {row}");
        assert!(row.contains(",2.0"), "mse scaled: {row}");
    }

    #[test]
    fn scenario_json_round_trip() {
        let scenario = desk_scale_scenario(TestFunction::Case3, 0.1, 42);
        let json = scenario.to_json();
        let parsed = SimScenario::from_json(&json).unwrap();
        assert_eq!(parsed.n, 2000);
        assert_eq!(parsed.methods.len(), scenario.methods.len());
        assert_eq!(parsed.lambda, LambdaRule::Gml);
        // Lambda accepts a positive number too.
        let fixed = json.replace("\"gml\"", "0.001");
        let parsed = SimScenario::from_json(&fixed).unwrap();
        assert_eq!(parsed.lambda, LambdaRule::Fixed(0.001));
        // Rejects a non-positive lambda.
        let bad = json.replace("\"gml\"", "-1.0");
        assert!(SimScenario::from_json(&bad).is_err());
    }

    #[test]
    fn timing_rows_are_positive_and_ordered() {
        let sweep = TimingSweep {
            function: TestFunction::Case1,
            kernel: Kernel::cubic(),
            sigma: 0.1,
            seed: 5,
            method: MethodSpec::Eigen { k: 8 },
            n_list: vec![200, 800],
            repeats: 3,
            n_points: 40,
            lambda: 1e-5,
        };
        let rows = timing_sweep(&sweep).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.seconds > 0.0));
        // Workload grows with n, so the medians are ordered.
        assert!(
            rows[1].seconds >= rows[0].seconds,
            "t(800) = {} < t(200) = {}",
            rows[1].seconds,
            rows[0].seconds
        );
        let csv = timing_csv(&rows);
        assert!(csv.starts_with("n,seconds\n200,"));
    }

    #[test]
    fn rsr_default_subset_follows_the_growth_rule() {
        assert_eq!(default_rsr_subset(100), 30);
        let q = default_rsr_subset(10_000);
        assert_eq!(q, 78);
        assert!(default_rsr_subset(2000) >= 54);
    }
}
