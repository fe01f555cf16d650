//! The three trainable parts of the model and the glue between them.

use serde::{Deserialize, Serialize};

use crate::backbone::{AdaptedBaseNet, BackboneConfig, BaseNet, Coefficients, Modulation};
use crate::condition::{ConditionNet, ConditionVector, ConditionWidths};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed::{self, tag};
use crate::tasks::SupportSet;

/// Shapes needed to rebuild a [`ModelState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub support_size: usize,
    pub condition_widths: ConditionWidths,
}

/// ConditionNet (phi), BaseNet (theta), and the modulation maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub condition: ConditionNet,
    pub base: BaseNet,
    pub modulation: Modulation,
}

impl ModelState {
    /// Seeded init; ConditionNet and BaseNet draw from separate streams.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let condition = ConditionNet::new(
            config.support_size,
            config.backbone.image_channels,
            config.condition_widths,
            &mut seed::stream(seed, &[tag::INIT_CONDITION]),
        )?;
        let base = BaseNet::new(config.backbone.clone(), &mut seed::stream(seed, &[tag::INIT_BACKBONE]))?;
        let modulation = Modulation::identity(condition.feature_dim(), &base);
        Ok(Self {
            config,
            condition,
            base,
            modulation,
        })
    }

    pub fn scale(&self) -> usize {
        self.base.scale()
    }

    pub fn condition_vector(&self, support: &SupportSet) -> Result<ConditionVector> {
        if support.len() != self.config.support_size {
            return Err(Error::Shape(format!(
                "support of {} patches, model expects {}",
                support.len(),
                self.config.support_size
            )));
        }
        self.condition.extract(support.stacked())
    }

    pub fn coefficients(&self, f: &ConditionVector) -> Result<Coefficients> {
        self.modulation.coefficients(f)
    }

    /// Task-specific backbone for `support`: one forward adaptation.
    pub fn adapt(&self, support: &SupportSet) -> Result<AdaptedBaseNet> {
        let f = self.condition_vector(support)?;
        self.base.adapt(&self.modulation.coefficients(&f)?)
    }

    /// Super-resolve `lr` with the backbone adapted to `support`.
    pub fn super_resolve_with(&self, support: &SupportSet, lr: &Tensor) -> Result<Tensor> {
        self.adapt(support)?.forward(lr)
    }

    pub fn is_finite(&self) -> bool {
        self.condition.params().is_finite() && self.base.params().is_finite() && self.modulation.params().is_finite()
    }
}
