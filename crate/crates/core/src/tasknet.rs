//! Backbone `G`, segmentation head `R` and the loss assembly around the
//! attention pyramid discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::{Domain, Sample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::sap::{PyramidConfig, SapNet, SapOutput};
use crate::tensor::{mismatch, resize_bilinear, NormMode, Tensor};
use crate::util::stream_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Image channels followed by the three backbone conv widths; the last
    /// one is `Ĉ`.
    pub backbone_widths: [usize; 4],
    pub backbone_strides: [usize; 3],
    /// Width of the 3×3 conv in the segmentation head.
    pub seg_hidden: usize,
    /// `C_sem`, including background.
    pub num_classes: usize,
    /// Square input side.
    pub image_size: usize,
    pub pyramid: PyramidConfig,
}

impl Default for ModelConfig {
    /// Narrow desk model: 64×64 input, 32×32 features, `C = 8`.
    fn default() -> Self {
        Self {
            backbone_widths: [3, 8, 16, 16],
            backbone_strides: [2, 1, 1],
            seg_hidden: 16,
            num_classes: NUM_CLASSES,
            image_size: 64,
            pyramid: PyramidConfig::with_sizes(vec![3, 9, 15, 21, 27], 8),
        }
    }
}

impl ModelConfig {
    /// Wider reference variant: widths 3→32→64→64 and `C = 64`.
    pub fn wide() -> Self {
        Self {
            backbone_widths: [3, 32, 64, 64],
            seg_hidden: 64,
            pyramid: PyramidConfig::with_sizes(vec![3, 9, 15, 21, 27], 64),
            ..Self::default()
        }
    }

    /// Side of `f̂` for the configured input (3×3 convs, padding 1).
    pub fn feature_side(&self) -> usize {
        self.backbone_strides
            .iter()
            .fold(self.image_size, |s, &st| (s - 1) / st + 1)
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_widths.contains(&0) || self.backbone_strides.contains(&0) {
            return Err(Error::Config(
                "backbone widths and strides must be >= 1".into(),
            ));
        }
        if self.num_classes < 2 || self.seg_hidden == 0 || self.image_size < 3 {
            return Err(Error::Config(
                "need >= 2 classes, seg_hidden >= 1, image >= 3".into(),
            ));
        }
        if self.pyramid.use_spatial_attention {
            let side = self.feature_side();
            self.pyramid.level_sizes(side, side)?;
        } else {
            self.pyramid.validate()?;
        }
        Ok(())
    }
}

/// How the adversarial branch is attached to the backbone features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdvPath {
    /// Task prediction only.
    Off,
    /// Gradient reversal with factor `λ` between `f̂` and the pyramid.
    Reversed(f64),
    /// Pyramid attached directly, no reversal. Used to compare gradients.
    Direct,
}

pub struct Forward {
    pub f_hats: Vec<Var>,
    /// Per-sample class logits at feature resolution.
    pub logits: Vec<Var>,
    pub sap: Option<SapOutput>,
}

/// Task network plus attention pyramid discriminator, with all parameters
/// in one store under the prefixes `backbone.`, `seg.` and `sap.`.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Vec<Conv2dLayer>,
    seg_hidden: Conv2dLayer,
    seg_out: Conv2dLayer,
    pub sap: SapNet,
}

impl Network {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x1417]));
        let mut store = ParamStore::new();
        let w = cfg.backbone_widths;
        let backbone = (0..3)
            .map(|i| {
                Conv2dLayer::new(
                    &mut store,
                    &format!("backbone.{i}"),
                    w[i],
                    w[i + 1],
                    3,
                    cfg.backbone_strides[i],
                    1,
                    &mut rng,
                )
            })
            .collect();
        let seg_hidden = Conv2dLayer::new(
            &mut store,
            "seg.hidden",
            w[3],
            cfg.seg_hidden,
            3,
            1,
            1,
            &mut rng,
        );
        let seg_out = Conv2dLayer::new(
            &mut store,
            "seg.out",
            cfg.seg_hidden,
            cfg.num_classes,
            1,
            1,
            0,
            &mut rng,
        );
        let sap = SapNet::new(
            cfg.pyramid.clone(),
            w[3],
            cfg.num_classes,
            &mut store,
            &mut rng,
        )?;
        Ok(Self {
            cfg,
            store,
            backbone,
            seg_hidden,
            seg_out,
            sap,
        })
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        let s = self.cfg.image_size;
        if (c, h, w) != (self.cfg.backbone_widths[0], s, s) {
            return Err(mismatch(
                "backbone_forward",
                format!(
                    "expected {}x{s}x{s} image, got {c}x{h}x{w}",
                    self.cfg.backbone_widths[0]
                ),
            )
            .into());
        }
        Ok(())
    }

    /// Three 3×3 conv + relu layers: image to `f̂`.
    pub fn backbone_forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        self.check_image(g.value(image))?;
        let mut x = image;
        for layer in &self.backbone {
            let y = layer.forward(g, &self.store, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// 3×3 conv + relu, then 1×1 conv to `C_sem` logits.
    pub fn seg_head_forward(&self, g: &mut Graph, f_hat: Var) -> Result<Var> {
        let h = self.seg_hidden.forward(g, &self.store, f_hat)?;
        let h = g.relu(h);
        Ok(self.seg_out.forward(g, &self.store, h)?)
    }

    /// Per-pixel class probabilities used as the guided map; cut from the
    /// task head when guidance is detached.
    pub fn guided_map(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        let p = g.softmax_axis0(logits)?;
        Ok(if self.cfg.pyramid.detach_guidance {
            g.detach(p)
        } else {
            p
        })
    }

    /// Runs the task network on every image and, unless `path` is
    /// [`AdvPath::Off`], the pyramid discriminator on the whole batch.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        images: &[&Tensor],
        path: AdvPath,
        mode: NormMode,
    ) -> Result<Forward> {
        let mut f_hats = Vec::with_capacity(images.len());
        let mut logits = Vec::with_capacity(images.len());
        for &img in images {
            let x = g.input(img.clone());
            let f = self.backbone_forward(g, x)?;
            logits.push(self.seg_head_forward(g, f)?);
            f_hats.push(f);
        }
        let sap = match path {
            AdvPath::Off => None,
            AdvPath::Reversed(_) | AdvPath::Direct => {
                let mut inputs = Vec::with_capacity(f_hats.len());
                let mut guides = Vec::with_capacity(f_hats.len());
                for (&f, &l) in f_hats.iter().zip(&logits) {
                    inputs.push(match path {
                        AdvPath::Reversed(lambda) => g.grad_reverse(f, lambda)?,
                        _ => f,
                    });
                    guides.push(if self.cfg.pyramid.use_guided_map {
                        Some(self.guided_map(g, l)?)
                    } else {
                        None
                    });
                }
                Some(self.sap.forward(g, &self.store, &inputs, &guides, mode)?)
            }
        };
        Ok(Forward {
            f_hats,
            logits,
            sap,
        })
    }

    /// Class logits for one image, upsampled to image resolution.
    pub fn predict_logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let f = self.backbone_forward(&mut g, x)?;
        let l = self.seg_head_forward(&mut g, f)?;
        let (_, h, w) = image.dims3()?;
        Ok(resize_bilinear(g.value(l), h, w)?)
    }

    /// Arg-max class per pixel at image resolution.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<u8>> {
        Ok(argmax_axis0(&self.predict_logits(image)?))
    }

    /// Eval-mode pyramid forward of one image: the full attention state.
    pub fn attention(&mut self, image: &Tensor) -> Result<crate::sap::AttentionState> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, &[image], AdvPath::Direct, NormMode::Eval)?;
        let sap = fw.sap.expect("pyramid requested");
        sap.attention_state(&g, 0)
    }
}

/// Index of the largest entry along the leading axis, per position.
pub fn argmax_axis0(t: &Tensor) -> Vec<u8> {
    let c = t.shape()[0];
    let inner = t.len() / c;
    let d = t.data();
    (0..inner)
        .map(|j| {
            let mut best = 0;
            for k in 1..c {
                if d[k * inner + j] > d[best * inner + j] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean per-pixel cross-entropy of logits against a labelled source sample,
/// after resizing the logits to the label resolution.
pub fn task_loss(g: &mut Graph, logits: Var, sample: &Sample) -> Result<Var> {
    let labels = match (&sample.labels, sample.domain) {
        (Some(l), Domain::Source) => l,
        _ => return Err(Error::TargetTaskLoss),
    };
    let (_, h, w) = g.value(logits).dims3()?;
    let logits = if (h, w) != (labels.height, labels.width) {
        g.resize_bilinear(logits, labels.height, labels.width)?
    } else {
        logits
    };
    Ok(g.cross_entropy(logits, &labels.to_indices())?)
}

/// Mean binary cross-entropy of target-domain probabilities `[B]` against
/// the batch's domain labels.
pub fn adv_loss(g: &mut Graph, prob: Var, domains: &[Domain]) -> Result<Var> {
    let y: Vec<f64> = domains.iter().map(|d| d.label()).collect();
    Ok(g.bce(prob, &y)?)
}

/// `task + adv`; the reversal layer on the pyramid input already carries `λ`.
pub fn total_objective(g: &mut Graph, task: Var, adv: Var) -> Result<Var> {
    Ok(g.add(task, adv)?)
}
