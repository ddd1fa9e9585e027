use super::config::ModelConfig;
use super::head::{decode_predictions, Head};
use super::nms::nms;
use crate::caa::{caa_forward_with, CaaWeights};
use crate::error::{Error, Result};
use crate::metrics::Detection;
use crate::rfafpn::{
    adversarial_step, bifpn_fuse, fuse_f3, rfaconv_forward, BiFpn, Discriminator, FeatureMap, FeaturePyramid,
    RfaConv, Role, DEFAULT_KERNELS,
};
use crate::rng::RandomSource;
use crate::tensor::{no_grad, Tensor};

/// Strided convolution stack. The stem and the first stage each end in a
/// 2×2 max pool; later stages pool first. Every stage output is projected to
/// the common pyramid width by a 1×1 lateral convolution.
#[derive(Clone, Debug)]
pub struct Backbone {
    /// `stage_widths.len()` 3×3 kernels, stem first.
    pub convs: Vec<Tensor>,
    /// One 1×1 projection per pyramid level.
    pub laterals: Vec<Tensor>,
}

impl Backbone {
    pub fn init(cfg: &ModelConfig, rng: &mut RandomSource) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &w in &cfg.stage_widths {
            convs.push(Tensor::kaiming(&[w, c_in, 3, 3], c_in * 9, rng));
            c_in = w;
        }
        let laterals = cfg.stage_widths[1..]
            .iter()
            .map(|&w| Tensor::kaiming(&[cfg.channels, w, 1, 1], w, rng))
            .collect();
        Self { convs, laterals }
    }

    pub fn forward(&self, img: &Tensor, cfg: &ModelConfig) -> Result<FeaturePyramid> {
        let s = cfg.input_size;
        if img.shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: img.shape().to_vec(),
                rhs: vec![3, s, s],
            });
        }
        let mut x = img.conv2d(&self.convs[0], 1, 1, 1)?.relu().max_pool2()?;
        let mut levels = Vec::new();
        for (i, (conv, lateral)) in self.convs[1..].iter().zip(&self.laterals).enumerate() {
            x = if i == 0 {
                x.conv2d(conv, 1, 1, 1)?.relu().max_pool2()?
            } else {
                x.max_pool2()?.conv2d(conv, 1, 1, 1)?.relu()
            };
            levels.push(FeatureMap::new(x.conv2d(lateral, 1, 0, 1)?, Role::Raw)?);
        }
        FeaturePyramid::new(levels)
    }
}

pub fn backbone_forward(img: &Tensor, backbone: &Backbone, cfg: &ModelConfig) -> Result<FeaturePyramid> {
    backbone.forward(img, cfg)
}

/// Intermediate and final activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Lateral projections of the backbone stages.
    pub laterals: FeaturePyramid,
    /// RFAconv outputs, or the laterals when that block is off.
    pub encoded: FeaturePyramid,
    pub f1: FeatureMap,
    pub f2: Option<FeatureMap>,
    pub f3: FeatureMap,
    /// Head output laid out `[1 + classes + 4, cells]`.
    pub raw: Tensor,
    pub g_loss: Option<Tensor>,
    pub d_loss: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    /// One encoder per pyramid level.
    pub rfa: Vec<RfaConv>,
    pub bifpn: BiFpn,
    pub caa: CaaWeights,
    pub head: Head,
    pub disc: Discriminator,
}

impl Detector {
    /// Every block is initialised regardless of the toggles so that variants
    /// sharing a seed start from identical weights.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RandomSource::new(cfg.seed);
        let c = cfg.channels;
        let backbone = Backbone::init(cfg, &mut rng);
        let rfa = (0..cfg.levels)
            .map(|_| RfaConv::init(c, &DEFAULT_KERNELS, &mut rng))
            .collect::<Result<_>>()?;
        let bifpn = BiFpn::init(c, cfg.levels, &mut rng)?;
        let caa = CaaWeights::init(c, c.div_ceil(2), &mut rng);
        let head = Head::init(c, cfg.prediction_len(), &mut rng);
        let disc = Discriminator::init(c, cfg.disc_hidden, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            rfa,
            bifpn,
            caa,
            head,
            disc,
        })
    }

    /// All parameters under stable names, including disabled blocks.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.backbone.convs.iter().enumerate() {
            out.push((format!("backbone.conv{i}"), t.clone()));
        }
        for (i, t) in self.backbone.laterals.iter().enumerate() {
            out.push((format!("backbone.lateral{i}"), t.clone()));
        }
        for (l, r) in self.rfa.iter().enumerate() {
            out.extend(r.params().into_iter().map(|(n, t)| (format!("rfa{l}.{n}"), t.clone())));
        }
        out.extend(self.bifpn.params().into_iter().map(|(n, t)| (format!("bifpn.{n}"), t.clone())));
        out.extend(self.caa.params().into_iter().map(|(n, t)| (format!("caa.{n}"), t.clone())));
        out.extend(self.head.params().into_iter().map(|(n, t)| (format!("head.{n}"), t.clone())));
        out.extend(self.disc.params().into_iter().map(|(n, t)| (format!("disc.{n}"), t.clone())));
        out
    }

    /// Parameters updated by the detection loss under the current toggles.
    pub fn generator_params(&self) -> Vec<Tensor> {
        let t = self.cfg.toggles;
        self.named_params()
            .into_iter()
            .filter(|(n, _)| {
                let block = n.split('.').next().unwrap_or("");
                match block {
                    "disc" => false,
                    "bifpn" => t.bifpn,
                    "caa" => t.caa,
                    b if b.starts_with("rfa") => t.rfaconv,
                    _ => true,
                }
            })
            .filter(|(n, _)| t.attention_core() || !(n == "caa.w_q" || n == "caa.w_k"))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn disc_params(&self) -> Vec<Tensor> {
        self.disc.params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Overwrites parameters from `(name, shape, values)` triples; every
    /// model parameter must be present with a matching shape.
    pub fn load_params(&self, named: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let params = self.named_params();
        if params.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                named.len()
            )));
        }
        for (name, t) in &params {
            let Some((_, shape, values)) = named.iter().find(|(n, _, _)| n == name) else {
                return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
            };
            if shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {:?}",
                    t.shape()
                )));
            }
            t.set_data(values)?;
        }
        Ok(())
    }

    pub fn backbone_forward(&self, img: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.forward(img, &self.cfg)
    }

    fn encode(&self, laterals: &FeaturePyramid) -> Result<FeaturePyramid> {
        if !self.cfg.toggles.rfaconv {
            return Ok(laterals.clone());
        }
        FeaturePyramid::new(
            laterals
                .levels()
                .iter()
                .zip(&self.rfa)
                .map(|(m, conv)| rfaconv_forward(m, conv))
                .collect::<Result<_>>()?,
        )
    }

    /// Full pass. With `adversarial` set and the fusion block active, also
    /// scores `F1` against the laterals with the discriminator.
    pub fn forward_with(&self, img: &Tensor, adversarial: bool) -> Result<ForwardPass> {
        let t = self.cfg.toggles;
        let laterals = self.backbone_forward(img)?;
        let encoded = self.encode(&laterals)?;
        let decoder = t.bifpn.then_some(&self.bifpn);
        let (f1, g_loss, d_loss) = if adversarial && t.adversarial() {
            let out = adversarial_step(&encoded, laterals.finest(), decoder, &self.disc)?;
            (out.f1, Some(out.g_loss), Some(out.d_loss))
        } else {
            let decoded = match decoder {
                Some(net) => bifpn_fuse(&encoded, net)?,
                None => encoded.clone(),
            };
            (decoded.finest().with_role(Role::F1Gan), None, None)
        };
        let f2 = if t.caa {
            Some(FeatureMap::new(caa_forward_with(&f1.data, &self.caa, t.self_attention)?, Role::F2Caa)?)
        } else {
            None
        };
        let f3 = match &f2 {
            Some(f2) => fuse_f3(&f1, f2, None)?,
            None => f1.with_role(Role::F3),
        };
        let raw = self.head.forward_raw(&f3.data)?;
        Ok(ForwardPass {
            laterals,
            encoded,
            f1,
            f2,
            f3,
            raw,
            g_loss,
            d_loss,
        })
    }

    pub fn forward(&self, img: &Tensor) -> Result<ForwardPass> {
        self.forward_with(img, false)
    }

    /// Decoded detections after NMS, at most `max_detections`, best first.
    pub fn predict(&self, img: &Tensor, conf_threshold: f64) -> Result<Vec<Detection>> {
        let raw = no_grad(|| self.forward(img).map(|p| p.raw))?;
        let cfg = &self.cfg;
        let dets = decode_predictions(&raw.t()?, cfg.grid(), cfg.num_classes, cfg.input_size, conf_threshold)?;
        let mut kept = nms(&dets, cfg.nms_iou)?;
        kept.truncate(cfg.max_detections);
        Ok(kept)
    }
}
