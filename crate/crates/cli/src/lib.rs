//! Experiment runner: configuration, test-function suites, scenarios and
//! reports.

pub mod config;
pub mod report;
pub mod scenarios;
pub mod suite;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;

use config::{GridParams, LadderParams, ScenarioConfig, ScenarioId, SuiteEntry};
use report::Report;

/// Runs a validated scenario and writes its outputs into `out`.
pub fn execute(cfg: &ScenarioConfig, out: &Path) -> Result<Report> {
    let start = Instant::now();
    let report = scenarios::run(cfg)?;
    report.write(out, cfg, start.elapsed().as_secs_f64())?;
    Ok(report)
}

/// Output directory: the explicit one, else the config's, else `out/<scenario>`.
pub fn output_dir(cfg: &ScenarioConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.scenario.name()))
}

/// Small configurations of the scenarios with must-pass checks.
pub fn selftest_configs() -> Vec<ScenarioConfig> {
    let mut kernel = ScenarioConfig::defaults(ScenarioId::VerifyKernel);
    kernel.grid = GridParams { m: 1, n: 128, period: 16.0 };

    let mut identities = ScenarioConfig::defaults(ScenarioId::VerifyIdentities);
    identities.grid = GridParams { m: 1, n: 64, period: 16.0 };
    identities.ladder = LadderParams {
        r_min: 16.0 / 64.0 / 100.0,
        decades: 5.0,
        points_per_decade: 32,
    };
    identities.suite = vec![SuiteEntry {
        generator: "random-bandlimited".into(),
        count: 2,
        seed: 7,
        ..SuiteEntry::default()
    }];

    let mut geometry = ScenarioConfig::defaults(ScenarioId::VerifyGeometry);
    geometry.grid = GridParams { m: 1, n: 32, period: 32.0 };
    geometry.params.tubes = 10;
    geometry.params.samples = 10_000;
    geometry.params.volume_tubes = 6;

    let separation = ScenarioConfig::defaults(ScenarioId::Separation);

    let mut reproducing = ScenarioConfig::defaults(ScenarioId::Reproducing);
    reproducing.grid = GridParams { m: 1, n: 32, period: 8.0 };
    reproducing.ladder.r_min = 8.0 / 32.0 / 100.0;

    vec![kernel, identities, geometry, separation, reproducing]
}
