//! ConditionNet: a shallow CNN that maps a stacked support set to a
//! fixed-length task feature.
//!
//! Topology: `conv-relu, conv-relu, pool, conv-relu, conv-relu, pool`, then a
//! global spatial mean. Convolutions are 3x3 with reflect padding. The output
//! length equals the last conv width and does not depend on the patch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvCache, ConvGeom, Padding, ParamSet, Tensor};
use crate::seed::Rng;

/// Channel widths of the four convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionWidths(pub [usize; 4]);

impl Default for ConditionWidths {
    fn default() -> Self {
        Self([64, 64, 128, 128])
    }
}

/// Task-level feature extracted from one support set.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionNet {
    support_size: usize,
    in_channels: usize,
    widths: ConditionWidths,
    geoms: [ConvGeom; 4],
    params: ParamSet,
}

/// Intermediate activations needed by [`ConditionNet::backward`].
#[derive(Debug)]
pub struct ConditionCache {
    convs: Vec<ConvCache>,
    acts: Vec<Tensor>,
    pool_inputs: [(usize, usize); 2],
    last_hw: (usize, usize),
}

impl ConditionNet {
    /// Kaiming fan-in init, zero biases.
    pub fn new(support_size: usize, in_channels: usize, widths: ConditionWidths, rng: &mut Rng) -> Result<Self> {
        if support_size == 0 || !matches!(in_channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "condition net needs n >= 1 and c_in in {{1,3}}, got n={support_size}, c_in={in_channels}"
            )));
        }
        let w = widths.0;
        let chans = [support_size * in_channels, w[0], w[1], w[2], w[3]];
        let geoms = [0, 1, 2, 3].map(|i| ConvGeom::new(chans[i], chans[i + 1], 3, Padding::Reflect));
        let mut params = ParamSet::new();
        for (i, g) in geoms.iter().enumerate() {
            params.push(
                format!("condition.conv{}.weight", i + 1),
                g.weight_shape(),
                nn::kaiming_normal(g.weight_len(), g.filter_len(), rng),
            );
            params.push(format!("condition.conv{}.bias", i + 1), vec![g.out_channels], vec![0.0; g.out_channels]);
        }
        Ok(Self {
            support_size,
            in_channels,
            widths,
            geoms,
            params,
        })
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn widths(&self) -> ConditionWidths {
        self.widths
    }

    /// Length of the emitted [`ConditionVector`].
    pub fn feature_dim(&self) -> usize {
        self.widths.0[3]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, support: &Tensor) -> Result<()> {
        let want = self.support_size * self.in_channels;
        if support.channels != want {
            return Err(Error::Shape(format!(
                "support has {} channels, condition net expects {want}",
                support.channels
            )));
        }
        if support.height < 4 || support.width < 4 {
            return Err(Error::Shape(format!(
                "support patches of {}x{} are too small for two 2x2 pools",
                support.height, support.width
            )));
        }
        Ok(())
    }

    /// Extract the task feature.
    pub fn extract(&self, support: &Tensor) -> Result<ConditionVector> {
        Ok(self.forward(support)?.0)
    }

    pub fn forward(&self, support: &Tensor) -> Result<(ConditionVector, ConditionCache)> {
        self.check_input(support)?;
        let mut convs = Vec::with_capacity(4);
        let mut acts = Vec::with_capacity(4);
        let mut pool_inputs = [(0, 0); 2];
        let mut x = support.clone();
        for (i, g) in self.geoms.iter().enumerate() {
            let (y, cache) = nn::conv_forward(&x, self.params.get(2 * i), self.params.get(2 * i + 1), g);
            let a = nn::relu(&y);
            convs.push(cache);
            x = if i % 2 == 1 {
                pool_inputs[i / 2] = (a.height, a.width);
                nn::avg_pool2(&a)
            } else {
                a.clone()
            };
            acts.push(a);
        }
        let last_hw = (x.height, x.width);
        let f = nn::global_avg(&x);
        Ok((
            ConditionVector(f),
            ConditionCache {
                convs,
                acts,
                pool_inputs,
                last_hw,
            },
        ))
    }

    /// Accumulate parameter gradients for `d loss / d f` into `grads`; the
    /// support-set gradient is returned when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ConditionCache,
        grad_f: &[f64],
        grads: &mut ParamSet,
        want_input: bool,
    ) -> Option<Tensor> {
        let (h, w) = cache.last_hw;
        let mut g = nn::global_avg_backward(grad_f, h, w);
        for i in (0..4).rev() {
            if i % 2 == 1 {
                let (ph, pw) = cache.pool_inputs[i / 2];
                g = nn::avg_pool2_backward(&g, ph, pw);
            }
            let gy = nn::relu_backward(&cache.acts[i], &g);
            let (wi, bi) = (2 * i, 2 * i + 1);
            let (gw, gb) = grads.pair_mut(wi, bi);
            let need_input = i > 0 || want_input;
            let gx = nn::conv_backward(&cache.convs[i], self.params.get(wi), &gy, &self.geoms[i], gw, gb, need_input);
            match gx {
                Some(gx) => g = gx,
                None => return None,
            }
        }
        Some(g)
    }
}

/// Stack `n` patches of equal size along channels, in order.
pub fn stack_support(patches: &[Tensor]) -> Result<Tensor> {
    Tensor::concat_channels(patches)
}
