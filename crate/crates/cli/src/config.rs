//! Scenario configuration: one TOML file per run.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use tha_core::grid::GridSpec;
use tha_core::operators::ScaleGrid;

use crate::suite::Generator;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("refusing to run: {0}")]
    TooLarge(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    VerifyKernel,
    VerifyIdentities,
    VerifyGeometry,
    MaximalSuite,
    GoodLambda,
    Separation,
    Covering,
    Reproducing,
    Llogl,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 9] = [
        ScenarioId::VerifyKernel,
        ScenarioId::VerifyIdentities,
        ScenarioId::VerifyGeometry,
        ScenarioId::MaximalSuite,
        ScenarioId::GoodLambda,
        ScenarioId::Separation,
        ScenarioId::Covering,
        ScenarioId::Reproducing,
        ScenarioId::Llogl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::VerifyKernel => "verify-kernel",
            ScenarioId::VerifyIdentities => "verify-identities",
            ScenarioId::VerifyGeometry => "verify-geometry",
            ScenarioId::MaximalSuite => "maximal-suite",
            ScenarioId::GoodLambda => "good-lambda",
            ScenarioId::Separation => "separation",
            ScenarioId::Covering => "covering",
            ScenarioId::Reproducing => "reproducing",
            ScenarioId::Llogl => "llogl",
        }
    }

    fn default_grid(self) -> GridParams {
        let (m, n, period) = match self {
            ScenarioId::VerifyKernel => (1, 256, 16.0),
            ScenarioId::VerifyIdentities => (1, 128, 16.0),
            ScenarioId::VerifyGeometry | ScenarioId::Covering => (1, 64, 64.0),
            ScenarioId::MaximalSuite | ScenarioId::Separation => (1, 32, 8.0),
            ScenarioId::GoodLambda | ScenarioId::Reproducing | ScenarioId::Llogl => (1, 64, 8.0),
        };
        GridParams { m, n, period }
    }

    fn default_ladder(self, grid: &GridParams) -> LadderParams {
        let h = grid.period / grid.n as f64;
        match self {
            ScenarioId::VerifyIdentities => LadderParams {
                r_min: h / 100.0,
                decades: 5.0,
                points_per_decade: 32,
            },
            ScenarioId::Reproducing => LadderParams {
                r_min: h / 100.0,
                decades: 6.0,
                points_per_decade: 64,
            },
            _ => {
                let ppd = 3;
                let decades = ((grid.n as f64).log10() * ppd as f64).round() / ppd as f64;
                LadderParams {
                    r_min: h / 2.0,
                    decades,
                    points_per_decade: ppd,
                }
            }
        }
    }

    fn default_suite(self) -> Vec<SuiteEntry> {
        let e = |generator: &str, count: usize, seed: u64| SuiteEntry {
            generator: generator.to_string(),
            count,
            seed,
            ..SuiteEntry::default()
        };
        match self {
            ScenarioId::VerifyIdentities | ScenarioId::Reproducing => {
                vec![e("random-bandlimited", 3, 7), e("mode", 2, 3)]
            }
            ScenarioId::MaximalSuite => vec![
                e("bump", 20, 1),
                e("mode", 10, 2),
                e("random-bandlimited", 10, 3),
                e("checkerboard", 5, 4),
                e("spike", 5, 5),
            ],
            ScenarioId::GoodLambda => vec![e("bump", 3, 1), e("random-bandlimited", 2, 7)],
            ScenarioId::Separation => vec![e("bump", 3, 1)],
            ScenarioId::Llogl => vec![e("spike", 4, 11)],
            ScenarioId::VerifyKernel | ScenarioId::VerifyGeometry | ScenarioId::Covering => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub m: usize,
    pub n: usize,
    pub period: f64,
}

impl GridParams {
    pub fn spec(&self) -> tha_core::Result<GridSpec> {
        GridSpec::new(self.m, self.n, self.period)
    }

    pub fn refined(&self) -> GridParams {
        GridParams {
            n: 2 * self.n,
            ..*self
        }
    }

    pub fn points(&self) -> u128 {
        (self.n as u128).checked_pow(2 * self.m as u32).unwrap_or(u128::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderParams {
    pub r_min: f64,
    pub decades: f64,
    pub points_per_decade: usize,
}

impl LadderParams {
    pub fn scales(&self) -> tha_core::Result<ScaleGrid> {
        ScaleGrid::new(self.r_min, self.decades, self.points_per_decade)
    }

    pub fn count(&self) -> usize {
        (self.decades * self.points_per_decade as f64).round() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaParams {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Multiply the grid by `sup |f|` of each field.
    #[serde(default = "yes")]
    pub relative: bool,
}

fn yes() -> bool {
    true
}

impl LambdaParams {
    /// Log-spaced values, scaled by `scale`.
    pub fn values(&self, scale: f64) -> Vec<f64> {
        let s = if self.relative { scale } else { 1.0 };
        if self.count == 1 {
            return vec![self.min * s];
        }
        let (lo, hi) = (self.min.ln(), self.max.ln());
        (0..self.count)
            .map(|k| (lo + (hi - lo) * k as f64 / (self.count - 1) as f64).exp() * s)
            .collect()
    }
}

/// One generator invocation in a test-function suite.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub generator: String,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Bump or spike width.
    pub width: Option<f64>,
    /// Largest wave number of band-limited generators.
    pub kmax: Option<i64>,
    /// Spike height.
    pub height: Option<f64>,
    /// Keep band-limited generators off the degenerate frequency set.
    pub admissible: Option<bool>,
}

fn one() -> usize {
    1
}

impl Default for SuiteEntry {
    fn default() -> Self {
        Self {
            generator: String::new(),
            count: 1,
            seed: 0,
            width: None,
            kmax: None,
            height: None,
            admissible: None,
        }
    }
}

/// Scenario-specific knobs; each scenario reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub seed: u64,
    /// Also run at doubled resolution and report drift.
    pub refine: bool,
    /// Radius triples for verify-kernel.
    pub radii: Vec<[f64; 3]>,
    /// Scale and step sizes for the harmonicity residuals.
    pub identity_scale: [f64; 3],
    pub steps: Vec<f64>,
    /// Containment sampling.
    pub tubes: usize,
    pub samples: usize,
    /// Monte Carlo volume checks.
    pub volume_tubes: usize,
    pub volume_samples: usize,
    /// Covering masks.
    pub masks: usize,
    pub max_rects: usize,
    pub kappas: Vec<f64>,
    pub kinds: Vec<String>,
    /// Separation level: `min U_f^* + lambda_fraction (max U_f^* - min U_f^*)`.
    pub lambda_fraction: f64,
    /// Exponent for the operator-norm ratios.
    pub p: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            seed: 1,
            refine: true,
            radii: vec![[0.5, 0.5, 0.5]],
            identity_scale: [0.5, 0.5, 0.5],
            steps: vec![0.1, 0.05, 0.025],
            tubes: 50,
            samples: 100_000,
            volume_tubes: 20,
            volume_samples: 1_000_000,
            masks: 100,
            max_rects: 32,
            kappas: vec![1.0, 2.0],
            kinds: vec!["I".into(), "II".into(), "IV".into()],
            lambda_fraction: 0.5,
            p: 2.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: ScenarioId,
    output: Option<PathBuf>,
    grid: Option<GridParams>,
    ladder: Option<LadderParams>,
    beta: Option<f64>,
    lambda: Option<LambdaParams>,
    suite: Option<Vec<SuiteEntry>>,
    #[serde(default)]
    params: Params,
}

/// A validated scenario with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: ScenarioId,
    pub output: Option<PathBuf>,
    pub grid: GridParams,
    pub ladder: LadderParams,
    pub beta: f64,
    pub lambda: LambdaParams,
    pub suite: Vec<SuiteEntry>,
    pub params: Params,
}

/// Largest grid any scenario accepts.
pub const MAX_POINTS: u128 = 1 << 22;
/// Largest number of ladder triples for pointwise cone operators.
pub const MAX_TRIPLES: usize = 20_000;

impl ScenarioConfig {
    /// Defaults for a scenario.
    pub fn defaults(scenario: ScenarioId) -> ScenarioConfig {
        let grid = scenario.default_grid();
        ScenarioConfig {
            scenario,
            output: None,
            grid,
            ladder: scenario.default_ladder(&grid),
            beta: 16.0,
            lambda: LambdaParams {
                min: 1e-3,
                max: 10.0,
                count: 24,
                relative: true,
            },
            suite: scenario.default_suite(),
            params: Params::default(),
        }
    }

    pub fn parse(text: &str) -> Result<ScenarioConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cfg = ScenarioConfig::defaults(raw.scenario);
        if let Some(grid) = raw.grid {
            cfg.grid = grid;
            cfg.ladder = raw.scenario.default_ladder(&grid);
        }
        if let Some(ladder) = raw.ladder {
            cfg.ladder = ladder;
        }
        if let Some(beta) = raw.beta {
            cfg.beta = beta;
        }
        if let Some(lambda) = raw.lambda {
            cfg.lambda = lambda;
        }
        if let Some(suite) = raw.suite {
            cfg.suite = suite;
        }
        cfg.output = raw.output;
        cfg.params = raw.params;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Grids this scenario will touch.
    fn grids(&self) -> Vec<GridParams> {
        let refines = matches!(
            self.scenario,
            ScenarioId::MaximalSuite | ScenarioId::GoodLambda | ScenarioId::Covering | ScenarioId::Llogl
        );
        if refines && self.params.refine {
            vec![self.grid, self.grid.refined()]
        } else {
            vec![self.grid]
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in self.grids() {
            if g.points() > MAX_POINTS {
                return Err(ConfigError::TooLarge(format!(
                    "grid m = {}, n = {} has {} points; the limit is {MAX_POINTS}",
                    g.m,
                    g.n,
                    g.points()
                )));
            }
            g.spec().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.ladder.scales().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return invalid(format!("beta must be >= 1, got {}", self.beta));
        }
        let l = self.lambda;
        if !(l.min > 0.0 && l.max >= l.min && l.max.is_finite()) || l.count == 0 {
            return invalid("lambda grid needs 0 < min <= max and count >= 1");
        }
        if l.count > 1 && l.max == l.min {
            return invalid("lambda grid with several points needs min < max");
        }
        for entry in &self.suite {
            Generator::parse(&entry.generator).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if entry.count == 0 {
                return invalid(format!("suite entry {} has count 0", entry.generator));
            }
            if let Some(k) = entry.kmax {
                if k < 1 || 2 * k >= self.grid.n as i64 {
                    return invalid(format!("kmax {k} must lie in [1, n/2)"));
                }
            }
        }
        let needs_suite = matches!(
            self.scenario,
            ScenarioId::VerifyIdentities
                | ScenarioId::MaximalSuite
                | ScenarioId::GoodLambda
                | ScenarioId::Separation
                | ScenarioId::Reproducing
                | ScenarioId::Llogl
        );
        if needs_suite && self.suite.is_empty() {
            return invalid(format!("scenario {} needs a test-function suite", self.scenario.name()));
        }
        let p = &self.params;
        match self.scenario {
            ScenarioId::VerifyKernel => {
                if p.radii.is_empty() {
                    return invalid("verify-kernel needs at least one radius triple");
                }
                let cap = self.grid.period / 4.0;
                if let Some(r) = p.radii.iter().find(|r| r.iter().any(|x| !(*x > 0.0 && *x <= cap))) {
                    return invalid(format!("radii {r:?} must lie in (0, L/4]"));
                }
                if self.grid.m == 1 && self.grid.n > 1024 {
                    return Err(ConfigError::TooLarge("verify-kernel supports n <= 1024 for m = 1".into()));
                }
            }
            ScenarioId::VerifyIdentities => {
                if p.steps.len() < 2 || p.steps.windows(2).any(|w| w[1] >= w[0]) {
                    return invalid("steps must be at least two decreasing values");
                }
                if let Some(s) = p.steps.iter().find(|s| p.identity_scale.iter().any(|r| !(**s > 0.0 && **s < r / 4.0))) {
                    return invalid(format!("step {s} must lie in (0, r_j/4)"));
                }
            }
            ScenarioId::VerifyGeometry => {
                if p.tubes == 0 || p.samples == 0 || p.volume_tubes == 0 || p.volume_samples == 0 {
                    return invalid("geometry sample counts must be positive");
                }
            }
            ScenarioId::Covering => {
                if p.masks == 0 || p.max_rects == 0 {
                    return invalid("covering needs masks >= 1 and max_rects >= 1");
                }
                if p.kappas.is_empty() || p.kappas.iter().any(|k| !(*k > 0.0)) {
                    return invalid("kappas must be positive");
                }
                for k in &p.kinds {
                    tha_core::geometry::TubeKind::parse(k).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
                let h = self.grid.period / self.grid.n as f64;
                if (h.log2() - h.log2().round()).abs() > 1e-12 {
                    return invalid("covering needs a power-of-two cell size L/n");
                }
            }
            ScenarioId::Separation => {
                if !(p.lambda_fraction > 0.0 && p.lambda_fraction < 1.0) {
                    return invalid("lambda_fraction must lie in (0, 1)");
                }
                if !(self.beta > 1.0) {
                    return invalid("separation needs beta > 1");
                }
            }
            ScenarioId::MaximalSuite => {
                if !(p.p > 1.0) {
                    return invalid(format!("p must exceed 1, got {}", p.p));
                }
            }
            ScenarioId::GoodLambda => {
                if !(self.beta > 1.0) {
                    return invalid("good-lambda needs beta > 1");
                }
            }
            ScenarioId::Reproducing | ScenarioId::Llogl => {}
        }
        let pointwise = matches!(
            self.scenario,
            ScenarioId::MaximalSuite | ScenarioId::GoodLambda | ScenarioId::Separation | ScenarioId::Llogl
        );
        let mut k = self.ladder.count();
        if self.scenario == ScenarioId::GoodLambda && p.refine {
            k = 2 * k - 1;
        }
        if pointwise && k.pow(3) > MAX_TRIPLES {
            return Err(ConfigError::TooLarge(format!(
                "{} ladder triples exceed the limit of {MAX_TRIPLES}",
                k.pow(3)
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ScenarioConfig::parse("scenario = \"verify-kernel\"\n").unwrap();
        assert_eq!(cfg.grid, GridParams { m: 1, n: 256, period: 16.0 });
        assert_eq!(cfg.params.radii, vec![[0.5, 0.5, 0.5]]);
    }

    #[test]
    fn overrides_apply() {
        let text = r#"
            scenario = "good-lambda"
            beta = 8.0
            [grid]
            m = 1
            n = 32
            period = 4.0
            [lambda]
            min = 0.01
            max = 1.0
            count = 5
            [[suite]]
            generator = "bump"
            count = 2
            seed = 4
            [params]
            refine = false
        "#;
        let cfg = ScenarioConfig::parse(text).unwrap();
        assert_eq!(cfg.beta, 8.0);
        assert_eq!(cfg.grid.n, 32);
        assert_eq!(cfg.ladder.r_min, 4.0 / 32.0 / 2.0);
        assert_eq!(cfg.suite.len(), 1);
        assert!(!cfg.params.refine);
        let l = cfg.lambda.values(2.0);
        assert_eq!(l.len(), 5);
        assert!((l[0] - 0.02).abs() < 1e-15 && (l[4] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            "scenario = \"nope\"",
            "scenario = \"verify-kernel\"\nbogus = 1",
            "scenario = \"verify-kernel\"\n[grid]\nm = 1\nn = 12\nperiod = 1.0",
            "scenario = \"good-lambda\"\n[[suite]]\ngenerator = \"wiggle\"",
            "scenario = \"verify-kernel\"\n[params]\nradii = [[5.0, 0.5, 0.5]]",
            "scenario = \"separation\"\nbeta = 1.0",
            "scenario = \"maximal-suite\"\nsuite = []",
        ];
        for text in bad {
            assert!(ScenarioConfig::parse(text).is_err(), "{text}");
        }
        let huge = "scenario = \"good-lambda\"\n[grid]\nm = 2\nn = 128\nperiod = 8.0";
        assert!(matches!(ScenarioConfig::parse(huge), Err(ConfigError::TooLarge(_))));
    }
}
