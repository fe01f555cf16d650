//! The super-resolution backbone, its FC modulation layers, and depth-wise
//! weight adaptation.
//!
//! Adaptation rescales every output-channel filter of the modulatable convs:
//! `w'[p][q] = w[p][q] * coeff[p][q]`, with the coefficients produced by one
//! affine map per modulated conv from the condition vector. Biases and the
//! entry, upsampler, and exit convs are left alone.

use serde::{Deserialize, Serialize};

use crate::condition::ConditionVector;
use crate::error::{Error, Result};
use crate::nn::{self, ConvCache, ConvGeom, Padding, ParamSet, Tensor};
use crate::seed::Rng;

/// Body layout of a backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Topology {
    /// `blocks` residual blocks `x + res_scale * conv(relu(conv(x)))`; both
    /// convs of every block are modulated.
    Residual { blocks: usize, res_scale: f64 },
    /// A chain of `depth` conv+ReLU layers, all modulated.
    Plain { depth: usize },
}

/// Everything needed to rebuild a backbone's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: String,
    pub topology: Topology,
    pub channels: usize,
    pub scale: usize,
    pub kernel_size: usize,
    pub image_channels: usize,
}

/// Registered backbone ids.
pub const REGISTRY: [&str; 3] = ["srresnet10", "edsr-like", "vdsr-like"];

impl BackboneConfig {
    /// Look up a registered backbone.
    pub fn from_registry(arch: &str, scale: usize) -> Result<Self> {
        let (topology, channels) = match arch {
            "srresnet10" => (Topology::Residual { blocks: 10, res_scale: 1.0 }, 64),
            "edsr-like" => (Topology::Residual { blocks: 16, res_scale: 0.1 }, 64),
            "vdsr-like" => (Topology::Plain { depth: 18 }, 64),
            other => {
                return Err(Error::Unknown {
                    kind: "backbone",
                    name: other.to_string(),
                })
            }
        };
        Self {
            arch: arch.to_string(),
            topology,
            channels,
            scale,
            kernel_size: 3,
            image_channels: 3,
        }
        .validated()
    }

    /// A registered backbone with the body depth and width overridden.
    pub fn with_size(mut self, depth: Option<usize>, channels: Option<usize>) -> Result<Self> {
        if let Some(d) = depth {
            match &mut self.topology {
                Topology::Residual { blocks, .. } => *blocks = d,
                Topology::Plain { depth } => *depth = d,
            }
        }
        if let Some(c) = channels {
            self.channels = c;
        }
        self.validated()
    }

    fn validated(self) -> Result<Self> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::InvalidArgument(format!("scale {} not in {{2,3,4}}", self.scale)));
        }
        if self.channels == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone needs channels > 0 and odd kernel, got {} / {}",
                self.channels, self.kernel_size
            )));
        }
        Ok(self)
    }

    /// Upsampling stages as pixel-shuffle factors.
    pub fn upsample_stages(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvSlot {
    weight: usize,
    bias: usize,
    geom: ConvGeom,
}

/// Backbone parameters plus the layer wiring that indexes into them.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNet {
    config: BackboneConfig,
    params: ParamSet,
    entry: ConvSlot,
    body: Vec<ConvSlot>,
    ups: Vec<(ConvSlot, usize)>,
    exit: ConvSlot,
}

/// A modulatable conv: parameter index of its weight and its output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModulatedConv {
    pub weight: usize,
    pub out_channels: usize,
    pub filter_len: usize,
}

impl BaseNet {
    /// Kaiming fan-in init with zero biases; the second conv of every
    /// residual block starts at zero so each block begins as the identity.
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let config = config.validated()?;
        let (c, k, ic) = (config.channels, config.kernel_size, config.image_channels);
        let mut params = ParamSet::new();
        let add = |params: &mut ParamSet, name: &str, geom: ConvGeom, zero: bool, rng: &mut Rng| {
            let w = if zero {
                vec![0.0; geom.weight_len()]
            } else {
                nn::kaiming_normal(geom.weight_len(), geom.filter_len(), rng)
            };
            let weight = params.push(format!("{name}.weight"), geom.weight_shape(), w);
            let bias = params.push(format!("{name}.bias"), vec![geom.out_channels], vec![0.0; geom.out_channels]);
            ConvSlot { weight, bias, geom }
        };
        let g = |i, o| ConvGeom::new(i, o, k, Padding::Zero);
        let entry = add(&mut params, "base.entry", g(ic, c), false, rng);
        let mut body = Vec::new();
        match config.topology {
            Topology::Residual { blocks, .. } => {
                for b in 0..blocks {
                    body.push(add(&mut params, &format!("base.block{b}.conv1"), g(c, c), false, rng));
                    body.push(add(&mut params, &format!("base.block{b}.conv2"), g(c, c), true, rng));
                }
            }
            Topology::Plain { depth } => {
                for d in 0..depth {
                    body.push(add(&mut params, &format!("base.body{d}"), g(c, c), false, rng));
                }
            }
        }
        let ups = config
            .upsample_stages()
            .into_iter()
            .enumerate()
            .map(|(i, r)| (add(&mut params, &format!("base.up{i}"), g(c, c * r * r), false, rng), r))
            .collect();
        let exit = add(&mut params, "base.exit", g(c, ic), false, rng);
        Ok(Self {
            config,
            params,
            entry,
            body,
            ups,
            exit,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// The convs rescaled by [`BaseNet::adapt`], in modulation-layer order.
    pub fn modulated_convs(&self) -> Vec<ModulatedConv> {
        self.body
            .iter()
            .map(|s| ModulatedConv {
                weight: s.weight,
                out_channels: s.geom.out_channels,
                filter_len: s.geom.filter_len(),
            })
            .collect()
    }

    /// Multiply every output-channel filter of each modulated conv by its
    /// coefficient. `self` is not modified.
    pub fn adapt(&self, coeffs: &Coefficients) -> Result<AdaptedBaseNet> {
        let convs = self.modulated_convs();
        if coeffs.0.len() != convs.len()
            || coeffs.0.iter().zip(&convs).any(|(c, m)| c.len() != m.out_channels)
        {
            return Err(Error::Shape(format!(
                "{} coefficient vectors for {} modulated convs",
                coeffs.0.len(),
                convs.len()
            )));
        }
        let mut net = self.clone();
        for (m, coeff) in convs.iter().zip(&coeffs.0) {
            let w = net.params.get_mut(m.weight);
            for (q, scale) in coeff.iter().enumerate() {
                w[q * m.filter_len..(q + 1) * m.filter_len]
                    .iter_mut()
                    .for_each(|v| *v *= scale);
            }
        }
        Ok(AdaptedBaseNet {
            net,
            coeffs: coeffs.clone(),
        })
    }

    fn conv(&self, x: &Tensor, s: &ConvSlot) -> (Tensor, ConvCache) {
        nn::conv_forward(x, self.params.get(s.weight), self.params.get(s.bias), &s.geom)
    }

    /// Super-resolve one LR tensor.
    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(lr)?.0)
    }

    pub fn forward_cached(&self, lr: &Tensor) -> Result<(Tensor, BaseCache)> {
        if lr.channels != self.config.image_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} channels, got {}",
                self.config.image_channels, lr.channels
            )));
        }
        let (x0, entry) = self.conv(lr, &self.entry);
        let mut body = Vec::with_capacity(self.body.len());
        let plain = matches!(self.config.topology, Topology::Plain { .. });
        let feat = if plain { nn::relu(&x0) } else { x0 };
        let mut h = feat.clone();
        match self.config.topology {
            Topology::Residual { res_scale, .. } => {
                for pair in self.body.chunks(2) {
                    let (t1, c1) = self.conv(&h, &pair[0]);
                    let a1 = nn::relu(&t1);
                    let (mut t2, c2) = self.conv(&a1, &pair[1]);
                    if res_scale != 1.0 {
                        t2.scale(res_scale);
                    }
                    h.add_assign(&t2);
                    body.push(BodyCache { conv: c1, act: a1 });
                    body.push(BodyCache {
                        conv: c2,
                        act: Tensor::zeros(0, 0, 0),
                    });
                }
            }
            Topology::Plain { .. } => {
                for s in &self.body {
                    let (t, c) = self.conv(&h, s);
                    h = nn::relu(&t);
                    body.push(BodyCache { conv: c, act: h.clone() });
                }
            }
        }
        h.add_assign(&feat);
        let mut ups = Vec::with_capacity(self.ups.len());
        for (s, r) in &self.ups {
            let (t, c) = self.conv(&h, s);
            h = nn::pixel_shuffle(&t, *r);
            ups.push(c);
        }
        let (y, exit) = self.conv(&h, &self.exit);
        Ok((
            y,
            BaseCache {
                entry,
                entry_act: if plain { Some(feat) } else { None },
                body,
                ups,
                exit,
            },
        ))
    }

    /// Accumulate parameter gradients of `<grad_out, forward(lr)>` into
    /// `grads`.
    pub fn backward(&self, cache: &BaseCache, grad_out: &Tensor, grads: &mut ParamSet) {
        let back = |s: &ConvSlot, c: &ConvCache, gy: &Tensor, grads: &mut ParamSet, want: bool| {
            let (gw, gb) = grads.pair_mut(s.weight, s.bias);
            nn::conv_backward(c, self.params.get(s.weight), gy, &s.geom, gw, gb, want)
        };
        let mut g = back(&self.exit, &cache.exit, grad_out, grads, true).expect("input grad requested");
        for ((s, r), c) in self.ups.iter().zip(&cache.ups).rev() {
            let gt = nn::pixel_unshuffle(&g, *r);
            g = back(s, c, &gt, grads, true).expect("input grad requested");
        }
        // g is now d/d(body + feat)
        let mut g_feat = g.clone();
        let mut g_h = g;
        match self.config.topology {
            Topology::Residual { res_scale, .. } => {
                for (pair, bc) in self.body.chunks(2).zip(cache.body.chunks(2)).rev() {
                    let mut g_t2 = g_h.clone();
                    if res_scale != 1.0 {
                        g_t2.scale(res_scale);
                    }
                    let g_a1 = back(&pair[1], &bc[1].conv, &g_t2, grads, true).expect("input grad requested");
                    let g_t1 = nn::relu_backward(&bc[0].act, &g_a1);
                    let g_in = back(&pair[0], &bc[0].conv, &g_t1, grads, true).expect("input grad requested");
                    g_h.add_assign(&g_in);
                }
            }
            Topology::Plain { .. } => {
                for (s, bc) in self.body.iter().zip(&cache.body).rev() {
                    let g_t = nn::relu_backward(&bc.act, &g_h);
                    g_h = back(s, &bc.conv, &g_t, grads, true).expect("input grad requested");
                }
            }
        }
        g_feat.add_assign(&g_h);
        let g_x0 = match &cache.entry_act {
            Some(a) => nn::relu_backward(a, &g_feat),
            None => g_feat,
        };
        back(&self.entry, &cache.entry, &g_x0, grads, false);
    }
}

#[derive(Debug)]
struct BodyCache {
    conv: ConvCache,
    act: Tensor,
}

/// Activations saved by [`BaseNet::forward_cached`].
#[derive(Debug)]
pub struct BaseCache {
    entry: ConvCache,
    entry_act: Option<Tensor>,
    body: Vec<BodyCache>,
    ups: Vec<ConvCache>,
    exit: ConvCache,
}

/// Per-layer, per-output-channel filter scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients(pub Vec<Vec<f64>>);

impl Coefficients {
    pub fn ones(base: &BaseNet) -> Self {
        Self(base.modulated_convs().iter().map(|m| vec![1.0; m.out_channels]).collect())
    }

    pub fn layers(&self) -> usize {
        self.0.len()
    }
}

/// A backbone whose modulated filters have been rescaled for one task.
#[derive(Clone, Debug)]
pub struct AdaptedBaseNet {
    net: BaseNet,
    coeffs: Coefficients,
}

impl AdaptedBaseNet {
    pub fn net(&self) -> &BaseNet {
        &self.net
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        self.net.forward(lr)
    }

    /// Map gradients w.r.t. the adapted weights back to the source backbone
    /// and the coefficients.
    pub fn pullback(&self, base: &BaseNet, grad_adapted: &ParamSet) -> (ParamSet, Coefficients) {
        let mut grad_base = grad_adapted.clone();
        let mut grad_coeffs = Vec::with_capacity(self.coeffs.0.len());
        for (m, coeff) in base.modulated_convs().iter().zip(&self.coeffs.0) {
            let w = base.params.get(m.weight);
            let gw_adapted = grad_adapted.get(m.weight);
            let gw = grad_base.get_mut(m.weight);
            let mut gc = vec![0.0; m.out_channels];
            for (q, (scale, gq)) in coeff.iter().zip(gc.iter_mut()).enumerate() {
                let r = q * m.filter_len..(q + 1) * m.filter_len;
                *gq = w[r.clone()].iter().zip(&gw_adapted[r.clone()]).map(|(a, b)| a * b).sum();
                gw[r].iter_mut().for_each(|v| *v *= scale);
            }
            grad_coeffs.push(gc);
        }
        (grad_base, Coefficients(grad_coeffs))
    }
}

/// One affine map `feature -> coefficients` per modulated conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    feature_dim: usize,
    out_channels: Vec<usize>,
    params: ParamSet,
}

impl Modulation {
    /// Zero weights and unit biases, so every coefficient starts at exactly 1.
    pub fn identity(feature_dim: usize, base: &BaseNet) -> Self {
        let out_channels: Vec<usize> = base.modulated_convs().iter().map(|m| m.out_channels).collect();
        let mut params = ParamSet::new();
        for (p, &oc) in out_channels.iter().enumerate() {
            params.push(format!("modulation.{p}.weight"), vec![oc, feature_dim], vec![0.0; oc * feature_dim]);
            params.push(format!("modulation.{p}.bias"), vec![oc], vec![1.0; oc]);
        }
        Self {
            feature_dim,
            out_channels,
            params,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layers(&self) -> usize {
        self.out_channels.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check(&self, f: &ConditionVector) -> Result<()> {
        if f.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "condition vector of length {}, modulation expects {}",
                f.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Output of modulation layer `p` alone.
    pub fn layer_output(&self, p: usize, f: &ConditionVector) -> Result<Vec<f64>> {
        self.check(f)?;
        Ok(nn::linear(self.params.get(2 * p), self.params.get(2 * p + 1), f.as_slice()))
    }

    pub fn coefficients(&self, f: &ConditionVector) -> Result<Coefficients> {
        self.check(f)?;
        Ok(Coefficients(
            (0..self.layers())
                .map(|p| nn::linear(self.params.get(2 * p), self.params.get(2 * p + 1), f.as_slice()))
                .collect(),
        ))
    }

    /// Accumulate `dA`, `db` into `grads` and return `d/df`.
    pub fn backward(&self, f: &ConditionVector, grad_coeffs: &Coefficients, grads: &mut ParamSet) -> Vec<f64> {
        let mut gf = vec![0.0; self.feature_dim];
        for (p, gc) in grad_coeffs.0.iter().enumerate() {
            let (ga, gb) = grads.pair_mut(2 * p, 2 * p + 1);
            let g = nn::linear_backward(self.params.get(2 * p), f.as_slice(), gc, ga, gb);
            gf.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        gf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use cmdsr_testkit as tk;
    use rand::Rng as _;

    fn tiny(blocks: usize, channels: usize, scale: usize) -> BackboneConfig {
        BackboneConfig::from_registry("srresnet10", scale)
            .unwrap()
            .with_size(Some(blocks), Some(channels))
            .unwrap()
    }

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn randomize(params: &mut ParamSet, seed: u64, scale: f64) {
        let mut rng = seed::rng(seed);
        for p in params.iter_mut() {
            p.data.iter_mut().for_each(|v| *v += scale * (rng.random::<f64>() - 0.5));
        }
    }

    #[test]
    fn srresnet10_parameter_count() {
        let net = BaseNet::new(BackboneConfig::from_registry("srresnet10", 4).unwrap(), &mut seed::rng(0)).unwrap();
        let oracle = tk::conv_stack_param_count(&[3, 64], 3)
            + 20 * tk::conv_stack_param_count(&[64, 64], 3)
            + 2 * tk::conv_stack_param_count(&[64, 256], 3)
            + tk::conv_stack_param_count(&[64, 3], 3);
        assert_eq!(net.params().numel(), oracle);
        assert_eq!(oracle, 1_037_507);
        assert!((oracle as f64 / 1.04e6 - 1.0).abs() < 0.05);
        assert_eq!(net.modulated_convs().len(), 20);
        assert!(net.modulated_convs().iter().all(|m| m.out_channels == 64));
    }

    #[test]
    fn registry_and_seeding() {
        for arch in REGISTRY {
            let cfg = BackboneConfig::from_registry(arch, 2).unwrap().with_size(Some(2), Some(4)).unwrap();
            let a = BaseNet::new(cfg.clone(), &mut seed::rng(1)).unwrap();
            let b = BaseNet::new(cfg, &mut seed::rng(1)).unwrap();
            assert_eq!(a, b);
            let y = a.forward(&random_tensor(3, 5, 6, 2)).unwrap();
            assert_eq!((y.channels, y.height, y.width), (3, 10, 12));
        }
        assert!(matches!(
            BackboneConfig::from_registry("rcan", 4),
            Err(Error::Unknown { .. })
        ));
    }

    #[test]
    fn block_second_convs_start_at_zero() {
        let net = BaseNet::new(tiny(3, 8, 2), &mut seed::rng(0)).unwrap();
        for (i, m) in net.modulated_convs().iter().enumerate() {
            let zero = net.params().get(m.weight).iter().all(|&v| v == 0.0);
            assert_eq!(zero, i % 2 == 1);
        }
    }

    #[test]
    fn shape_contract_x4() {
        let net = BaseNet::new(tiny(1, 4, 4), &mut seed::rng(0)).unwrap();
        let y = net.forward(&random_tensor(3, 12, 12, 1)).unwrap();
        assert_eq!((y.channels, y.height, y.width), (3, 48, 48));
        assert!(net.forward(&random_tensor(1, 12, 12, 1)).is_err());
    }

    #[test]
    fn identity_modulation_is_bit_exact() {
        let mut net = BaseNet::new(tiny(2, 6, 2), &mut seed::rng(4)).unwrap();
        randomize(net.params_mut(), 5, 0.2);
        let m = Modulation::identity(16, &net);
        let f = ConditionVector((0..16).map(|i| i as f64 * 0.37 - 2.0).collect());
        let coeffs = m.coefficients(&f).unwrap();
        assert!(coeffs.0.iter().flatten().all(|&c| c == 1.0));
        let adapted = net.adapt(&coeffs).unwrap();
        let x = random_tensor(3, 7, 9, 6);
        assert_eq!(adapted.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn adapt_is_pure_and_leaves_biases() {
        let net = BaseNet::new(tiny(2, 4, 2), &mut seed::rng(4)).unwrap();
        let before = net.clone();
        let coeffs = Coefficients(vec![vec![0.5, 2.0, -1.0, 3.0]; 4]);
        let adapted = net.adapt(&coeffs).unwrap();
        assert_eq!(net, before);
        let modulated: Vec<usize> = net.modulated_convs().iter().map(|m| m.weight).collect();
        for (i, (a, b)) in adapted.net().params().iter().zip(net.params().iter()).enumerate() {
            if !modulated.contains(&i) {
                assert_eq!(a, b);
            }
        }
        assert!(net.adapt(&Coefficients(vec![vec![1.0; 3]; 4])).is_err());
    }

    #[test]
    fn coefficient_scales_one_output_channel() {
        // bias-free conv: scaling filter q by 2 doubles channel q's response
        let g = ConvGeom::new(3, 4, 3, Padding::Zero);
        let mut rng = seed::rng(8);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = random_tensor(3, 6, 5, 9);
        let zeros = vec![0.0; 4];
        let mut scaled = w.clone();
        scaled[g.filter_len()..2 * g.filter_len()].iter_mut().for_each(|v| *v *= 2.0);
        let reference = tk::conv_layer_reference(&x.data, 3, 6, 5, &scaled, &zeros, 4, 3, 1);
        let (plain, _) = nn::conv_forward(&x, &w, &zeros, &g);
        let (got, _) = nn::conv_forward(&x, &scaled, &zeros, &g);
        for q in 0..4 {
            let factor = if q == 1 { 2.0 } else { 1.0 };
            for i in 0..30 {
                assert_eq!(got.data[q * 30 + i], factor * plain.data[q * 30 + i]);
                assert!((got.data[q * 30 + i] - reference[q * 30 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_block_is_its_skip() {
        let mut net = BaseNet::new(tiny(2, 4, 2), &mut seed::rng(10)).unwrap();
        randomize(net.params_mut(), 11, 0.3);
        let b2 = net.params().index_of("base.block0.conv2.bias").unwrap();
        net.params_mut().get_mut(b2).iter_mut().for_each(|v| *v = 0.0);
        let mut coeffs = Coefficients::ones(&net);
        coeffs.0[1] = vec![0.0; 4];
        let adapted = net.adapt(&coeffs).unwrap();
        let mut one = BaseNet::new(tiny(1, 4, 2), &mut seed::rng(0)).unwrap();
        for p in one.params_mut().iter_mut() {
            let i = net.params().index_of(&p.name.replace("block0", "block1")).unwrap();
            p.data.copy_from_slice(net.params().get(i));
        }
        let x = random_tensor(3, 6, 6, 12);
        assert_eq!(adapted.forward(&x).unwrap(), one.forward(&x).unwrap());
    }

    #[test]
    fn one_by_one_net_matches_hand_computation() {
        // 1 block, 1 channel, 1x1 convs, x2: every value below is by hand.
        let cfg = BackboneConfig {
            kernel_size: 1,
            ..tiny(1, 1, 2)
        };
        let mut net = BaseNet::new(cfg, &mut seed::rng(0)).unwrap();
        let set = |net: &mut BaseNet, name: &str, v: &[f64]| {
            let i = net.params().index_of(name).unwrap();
            net.params_mut().get_mut(i).copy_from_slice(v);
        };
        set(&mut net, "base.entry.weight", &[0.5, -1.0, 2.0]);
        set(&mut net, "base.entry.bias", &[0.1]);
        set(&mut net, "base.block0.conv1.weight", &[3.0]);
        set(&mut net, "base.block0.conv1.bias", &[-1.0]);
        set(&mut net, "base.block0.conv2.weight", &[0.5]);
        set(&mut net, "base.block0.conv2.bias", &[0.25]);
        set(&mut net, "base.up0.weight", &[1.0, 2.0, -1.0, 0.0]);
        set(&mut net, "base.up0.bias", &[0.0, 0.0, 0.0, 1.0]);
        set(&mut net, "base.exit.weight", &[1.0, 2.0, -2.0]);
        set(&mut net, "base.exit.bias", &[0.0, 0.5, 0.0]);
        let x = Tensor::from_vec(3, 1, 1, vec![0.2, 0.4, 0.6]).unwrap();
        // x0 = 0.1 + 0.1 - 0.4 + 1.2 = 1.0
        // t1 = 3 - 1 = 2, relu 2; t2 = 0.5*2 + 0.25 = 1.25; h = 2.25
        // body = h + x0 = 3.25
        // up channels = [3.25, 6.5, -3.25, 1.0] -> 2x2 [[3.25, 6.5], [-3.25, 1.0]]
        // exit: c0 = u, c1 = 2u + 0.5, c2 = -2u
        let y = net.forward(&x).unwrap();
        let u = [3.25, 6.5, -3.25, 1.0];
        let mut want = Vec::new();
        want.extend(u.iter().copied());
        want.extend(u.iter().map(|v| 2.0 * v + 0.5));
        want.extend(u.iter().map(|v| -2.0 * v));
        for (a, b) in y.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn l1_loss(y: &Tensor, target: &Tensor) -> f64 {
        tk::mean_abs(&y.data, &target.data)
    }

    fn l1_grad(y: &Tensor, target: &Tensor) -> Tensor {
        let n = y.data.len() as f64;
        let mut g = y.clone();
        g.data
            .iter_mut()
            .zip(&target.data)
            .for_each(|(v, t)| *v = (*v - t).signum() / n);
        g
    }

    #[test]
    fn backward_matches_finite_differences() {
        for arch in ["srresnet10", "vdsr-like", "edsr-like"] {
            let cfg = BackboneConfig::from_registry(arch, 2).unwrap().with_size(Some(2), Some(3)).unwrap();
            let mut net = BaseNet::new(cfg, &mut seed::rng(20)).unwrap();
            randomize(net.params_mut(), 21, 0.2);
            let x = random_tensor(3, 4, 5, 22);
            let target = random_tensor(3, 8, 10, 23);
            let (y, cache) = net.forward_cached(&x).unwrap();
            let mut grads = net.params().zeros_like();
            net.backward(&cache, &l1_grad(&y, &target), &mut grads);
            let flat = net.params().flatten();
            let analytic = grads.flatten();
            let mut probe = net.clone();
            let mut eval = |p: &[f64]| {
                probe.params_mut().assign_flat(p).unwrap();
                l1_loss(&probe.forward(&x).unwrap(), &target)
            };
            for i in (0..flat.len()).step_by(11) {
                let num = tk::central_difference_at(&mut eval, &flat, i, tk::PIECEWISE_LINEAR_STEP).unwrap();
                if analytic[i] == 0.0 && num.abs() < 1e-10 {
                    continue;
                }
                assert!(tk::rel_error(analytic[i], num) < 1e-4, "{arch} param {i}: {} vs {num}", analytic[i]);
            }
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let mut net = BaseNet::new(tiny(2, 3, 2), &mut seed::rng(30)).unwrap();
        randomize(net.params_mut(), 31, 0.3);
        let mut rng = seed::rng(32);
        let coeffs = Coefficients((0..4).map(|_| (0..3).map(|_| 0.5 + rng.random::<f64>()).collect()).collect());
        let x = random_tensor(3, 4, 4, 33);
        let target = random_tensor(3, 8, 8, 34);
        let adapted = net.adapt(&coeffs).unwrap();
        let (y, cache) = adapted.net().forward_cached(&x).unwrap();
        let mut g_adapted = net.params().zeros_like();
        adapted.net().backward(&cache, &l1_grad(&y, &target), &mut g_adapted);
        let (_, g_coeffs) = adapted.pullback(&net, &g_adapted);
        let flat: Vec<f64> = coeffs.0.iter().flatten().copied().collect();
        let mut eval = |c: &[f64]| {
            let cs = Coefficients(c.chunks(3).map(|v| v.to_vec()).collect());
            l1_loss(&net.adapt(&cs).unwrap().forward(&x).unwrap(), &target)
        };
        let analytic: Vec<f64> = g_coeffs.0.iter().flatten().copied().collect();
        for i in 0..flat.len() {
            let num = tk::central_difference_at(&mut eval, &flat, i, tk::PIECEWISE_LINEAR_STEP).unwrap();
            if analytic[i] == 0.0 && num.abs() < 1e-10 {
                continue;
            }
            assert!(tk::rel_error(analytic[i], num) < 1e-4, "coeff {i}: {} vs {num}", analytic[i]);
        }
    }

    #[test]
    fn modulation_is_affine_and_dense() {
        let net = BaseNet::new(tiny(2, 4, 2), &mut seed::rng(0)).unwrap();
        let mut m = Modulation::identity(8, &net);
        randomize(m.params_mut(), 40, 1.0);
        let zero = ConditionVector(vec![0.0; 8]);
        let c0 = m.coefficients(&zero).unwrap();
        for p in 0..4 {
            assert_eq!(c0.0[p], m.params().get(2 * p + 1));
        }
        // every layer's output moves when one feature entry moves
        let f = ConditionVector(vec![0.3; 8]);
        let mut g = f.clone();
        g.0[5] += 1e-3;
        let (a, b) = (m.coefficients(&f).unwrap(), m.coefficients(&g).unwrap());
        for p in 0..4 {
            let jac: f64 = a.0[p].iter().zip(&b.0[p]).map(|(x, y)| ((y - x) / 1e-3).abs()).sum();
            assert!(jac > 0.0);
        }
        assert!(m.coefficients(&ConditionVector(vec![0.0; 7])).is_err());
    }

    #[test]
    fn modulation_backward() {
        let net = BaseNet::new(tiny(1, 3, 2), &mut seed::rng(0)).unwrap();
        let mut m = Modulation::identity(5, &net);
        randomize(m.params_mut(), 41, 1.0);
        let f = ConditionVector(vec![0.1, -0.4, 0.9, 0.0, 0.3]);
        let probe = Coefficients(vec![vec![1.0, -2.0, 0.5], vec![0.25, 0.0, 3.0]]);
        let mut grads = m.params().zeros_like();
        let gf = m.backward(&f, &probe, &mut grads);
        let eval = |x: &[f64]| -> f64 {
            let c = m.coefficients(&ConditionVector(x.to_vec())).unwrap();
            c.0.iter().flatten().zip(probe.0.iter().flatten()).map(|(a, b)| a * b).sum()
        };
        let num = tk::finite_difference_grad(eval, &f.0, tk::DEFAULT_STEP).unwrap();
        for (a, n) in gf.iter().zip(&num) {
            assert!((a - n).abs() < 1e-9);
        }
    }
}
