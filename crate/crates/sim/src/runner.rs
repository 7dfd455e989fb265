use crate::scenario::Scenario;
use crate::SimError;
use drift_core::analysis::{compute_metrics, DriftCriteria, MetricSample, RunMetrics};
use drift_core::sim::{run, RunOutcome};

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub no_compensation: bool,
    pub corrected_a: bool,
    pub seed: Option<u64>,
    /// Control steps whose QP problem should be kept for dumping.
    pub dump_qp_steps: Vec<usize>,
}

impl RunOptions {
    /// The scenario the run actually uses, which is also what gets echoed.
    pub fn apply(&self, scenario: &Scenario) -> Scenario {
        let mut s = scenario.clone();
        if self.no_compensation {
            s.controller.compensation = false;
        }
        if self.corrected_a {
            s.controller.corrected_a = true;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub scenario: Scenario,
    pub outcome: RunOutcome,
    pub metrics: RunMetrics,
}

impl RunArtifacts {
    pub fn samples(&self) -> Vec<MetricSample> {
        self.outcome.records.iter().map(MetricSample::from).collect()
    }
}

pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunArtifacts, SimError> {
    let scenario = options.apply(scenario);
    scenario.validate()?;
    let path = scenario.reference_path()?;
    let mut config = scenario.closed_loop_config()?;
    config.capture_qp_steps = options.dump_qp_steps.clone();
    let outcome = run(&config, &path)?;
    let samples: Vec<MetricSample> = outcome.records.iter().map(MetricSample::from).collect();
    let metrics = compute_metrics(&samples, scenario.controller.sample_time, &DriftCriteria::default());
    Ok(RunArtifacts {
        scenario,
        outcome,
        metrics,
    })
}
