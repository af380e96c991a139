//! The reference synthetic scenario used by the acceptance suite, the
//! benchmarks and the CLI defaults: three 2-D Gaussian classes whose
//! centroids sit 4σ apart, with the target rotated by 15° and shifted by
//! 1.5σ along the first axis.

use crate::data::{generate_pair, Dataset, ShiftSpec};
use crate::engine::{train_source_model, AdaptConfig, ExperimentConfig, SeedPlan};
use crate::error::Result;
use crate::math::Matrix;
use crate::model::{accuracy, MlpModel, ModelConfig, PretrainConfig};

pub fn golden_spec(data_seed: u64) -> ShiftSpec {
    ShiftSpec {
        seed: data_seed,
        ..ShiftSpec::default()
    }
}

/// K=3, M=2, r=0.1, batch 16, 30 epochs on a 64-64-32 extractor.
pub fn golden_experiment() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::new(2, 3),
        pretrain: PretrainConfig {
            epochs: 50,
            ..PretrainConfig::default()
        },
        adapt: AdaptConfig {
            batch_size: 16,
            epochs: 30,
            learning_rate: 1e-2,
            timing: false,
            ..AdaptConfig::default()
        },
    }
}

/// Data and source model for one master seed.
#[derive(Debug, Clone)]
pub struct GoldenRun {
    pub seed: u64,
    pub plan: SeedPlan,
    pub source: Dataset,
    pub target: Dataset,
    pub source_model: MlpModel,
}

impl GoldenRun {
    pub fn new(seed: u64, exp: &ExperimentConfig) -> Result<Self> {
        let plan = SeedPlan::from_master(seed);
        let (source, target) = generate_pair(&golden_spec(plan.data))?;
        let source_model = train_source_model(&source, exp, &plan)?;
        Ok(Self {
            seed,
            plan,
            source,
            target,
            source_model,
        })
    }

    pub fn source_accuracy_on_target(&self) -> Result<f64> {
        self.accuracy_of(&self.source_model)
    }

    pub fn accuracy_of(&self, model: &MlpModel) -> Result<f64> {
        Ok(accuracy(
            &model.predict(&self.target.features)?.probs,
            self.target.labels()?,
        ))
    }

    /// The adaptation config with this run's shuffle seed applied.
    pub fn adapt_config(&self, base: &AdaptConfig) -> AdaptConfig {
        AdaptConfig {
            seed: self.plan.shuffle,
            ..base.clone()
        }
    }

    pub fn target_features(&self) -> &Matrix {
        &self.target.features
    }
}
