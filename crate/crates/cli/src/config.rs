//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use conjoint_core::domain::AttributeScheme;
use conjoint_core::infer::ModelConfig;
use conjoint_core::revenue::BundleScenario;
use conjoint_core::simulate::{GroundTruth, SurveyDesign};
use conjoint_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// The only source of randomness for every stage.
    pub seed: u64,
    pub scheme: AttributeScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    pub simulation: SurveyDesign,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<BundleScenario>,
    /// Not echoed into reports, so identical runs in different directories
    /// produce identical reports.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// The smartphone study: 300 respondents x 20 tasks, default sampler.
    pub fn smartphone(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 20240501,
            scheme: AttributeScheme::smartphone(),
            ground_truth: Some(GroundTruth::smartphone()),
            simulation: SurveyDesign::default(),
            model: ModelConfig::default(),
            scenario: Some(BundleScenario::smartphone()),
            output_dir: output_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
        config.propagate_seed();
        Ok(config)
    }

    /// Copy the top-level seed into the stage configs that carry one.
    pub fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        if let Some(s) = self.scenario.as_mut() {
            s.seed = self.seed;
        }
    }

    /// Field-level checks. `needs_truth` is set when the simulate stage runs.
    pub fn validate(&self, needs_truth: bool) -> Result<()> {
        let fail = |msg: &str| Err(Error::Contract(msg.to_string()));
        let sim = &self.simulation;
        if sim.n_respondents == 0 {
            return fail("simulation.n_respondents must be at least 1");
        }
        if sim.tasks_per_respondent == 0 {
            return fail("simulation.tasks_per_respondent must be at least 1");
        }
        if sim.n_respondents > u32::MAX as usize || sim.tasks_per_respondent > u32::MAX as usize {
            return fail("simulation sizes must fit in 32 bits");
        }
        if sim.price_grid.is_empty() {
            return fail("simulation.price_grid must not be empty");
        }
        if sim.price_grid.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return fail("simulation.price_grid must hold positive prices");
        }
        match &self.ground_truth {
            Some(truth) => truth.validate(&self.scheme)?,
            None if needs_truth => return fail("ground_truth is required to simulate a survey"),
            None => {}
        }
        self.model.validate()?;
        if let Some(s) = &self.scenario {
            s.validate(&self.scheme)?;
        }
        Ok(())
    }
}
