//! Spatial attention pyramid: the domain discriminator that aligns features
//! across domains.
//!
//! Backbone features `f̂` are reduced to `C` channels and average-pooled at
//! every window size in `K`, giving one map per pyramid level. A guided
//! feature map, built from `f̂` and the task head's class probabilities,
//! predicts one softmax-normalized spatial mask per level. Each level is
//! collapsed to a `C`-vector with its mask, the vectors are mixed with
//! per-channel softmax weights across levels, and a single logistic unit
//! scores the fused vector as target-domain probability.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{init_matrix, Conv2dLayer};
use crate::tensor::{
    avg_pool2d, max_pool2d, mismatch, softmax_axis0, BatchNormStats, NormMode, Tensor, TensorError,
};

/// Pooling sizes for 13 levels on detection-scale maps.
pub const DETECTION_POOL_SIZES: [usize; 13] = [3, 6, 9, 12, 15, 18, 21, 24, 27, 30, 33, 35, 37];
/// Pooling sizes for 9 levels on segmentation-scale maps.
pub const SEGMENTATION_POOL_SIZES: [usize; 9] = [3, 9, 15, 21, 27, 33, 39, 45, 51];
/// Reduced pyramids used when varying the level count.
pub const THREE_LEVEL_POOL_SIZES: [usize; 3] = [3, 21, 37];
pub const SEVEN_LEVEL_POOL_SIZES: [usize; 7] = [3, 9, 15, 21, 27, 33, 37];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingKind {
    Avg,
    Max,
}

impl PoolingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Avg => "avg",
            PoolingKind::Max => "max",
        }
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolingKind::Avg),
            "max" => Ok(PoolingKind::Max),
            _ => Err(Error::Config(format!("unknown pooling kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    /// Window sizes `k^n`, strictly increasing.
    pub pool_sizes: Vec<usize>,
    /// Reduced channel count `C`.
    pub channels: usize,
    /// Compact feature dimension `d`.
    pub compact_dim: usize,
    pub use_guided_map: bool,
    pub use_spatial_attention: bool,
    pub use_channel_attention: bool,
    pub pooling: PoolingKind,
    /// Cut the gradient path from the pyramid back into the task head.
    pub detach_guidance: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self::detection()
    }
}

impl PyramidConfig {
    /// 13 levels, `C = 256`, `d = C/2`.
    pub fn detection() -> Self {
        Self::with_sizes(DETECTION_POOL_SIZES.to_vec(), 256)
    }

    /// 9 levels, `C = 256`, `d = C/2`.
    pub fn segmentation() -> Self {
        Self::with_sizes(SEGMENTATION_POOL_SIZES.to_vec(), 256)
    }

    /// All attention branches on, average pooling, `d = max(1, C/2)`.
    pub fn with_sizes(pool_sizes: Vec<usize>, channels: usize) -> Self {
        Self {
            pool_sizes,
            channels,
            compact_dim: (channels / 2).max(1),
            use_guided_map: true,
            use_spatial_attention: true,
            use_channel_attention: true,
            pooling: PoolingKind::Avg,
            detach_guidance: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.pool_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_sizes.is_empty() {
            return Err(Error::Config(
                "pyramid needs at least one pooling size".into(),
            ));
        }
        if self.pool_sizes[0] == 0 || self.pool_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "pooling sizes must be positive and strictly increasing, got {:?}",
                self.pool_sizes
            )));
        }
        if self.channels == 0 || self.compact_dim == 0 {
            return Err(Error::Config(
                "channel and compact dims must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Checks every window fits an `h×w` map and returns the level extents
    /// `(h - k + 1, w - k + 1)`.
    pub fn level_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let bad: Vec<usize> = self
            .pool_sizes
            .iter()
            .copied()
            .filter(|&k| k > h || k > w)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "pooling sizes {bad:?} exceed the {h}x{w} feature map"
            )));
        }
        Ok(self
            .pool_sizes
            .iter()
            .map(|&k| (h - k + 1, w - k + 1))
            .collect())
    }

    /// Pooling sizes for an `levels`-level pyramid on maps of side `side`.
    ///
    /// Uses the reference set for that level count when its largest window
    /// fits; otherwise spreads `levels` sizes evenly from 3 (or 1 on tiny
    /// maps) up to `side - 1`.
    pub fn preset_sizes(levels: usize, side: usize) -> Result<Vec<usize>> {
        let reference: &[usize] = match levels {
            3 => &THREE_LEVEL_POOL_SIZES,
            7 => &SEVEN_LEVEL_POOL_SIZES,
            9 => &SEGMENTATION_POOL_SIZES,
            13 => &DETECTION_POOL_SIZES,
            _ => &[],
        };
        if !reference.is_empty() && reference[reference.len() - 1] <= side {
            return Ok(reference.to_vec());
        }
        if levels == 0 || side == 0 {
            return Err(Error::Config("levels and map side must be >= 1".into()));
        }
        let lo = if side >= 4 { 3 } else { 1 };
        let hi = side.saturating_sub(1).max(lo);
        if hi - lo + 1 < levels {
            return Err(Error::Config(format!(
                "cannot fit {levels} distinct pooling sizes on a {side}-wide map"
            )));
        }
        if levels == 1 {
            return Ok(vec![lo]);
        }
        Ok((0..levels)
            .map(|i| lo + ((i * (hi - lo)) as f64 / (levels - 1) as f64).round() as usize)
            .collect())
    }
}

/// Channel widths `[Ĉ, s1, s2, C]` of the three 1×1 reduction convs:
/// halve, then quarter, clipped below at `C`, ending at exactly `C`.
pub fn reduce_stage_widths(c_hat: usize, c: usize) -> Result<[usize; 4]> {
    if c_hat < c {
        return Err(Error::Config(format!(
            "backbone width {c_hat} is below the pyramid width {c}"
        )));
    }
    Ok([c_hat, c.max(c_hat / 2), c.max(c_hat / 4), c])
}

/// Pools `f_bar` at each window size: `C×H×W -> [C×(H-k+1)×(W-k+1)]`.
pub fn build_pyramid(f_bar: &Tensor, cfg: &PyramidConfig) -> Result<Vec<Tensor>> {
    let (_, h, w) = f_bar.dims3()?;
    cfg.level_sizes(h, w)?;
    cfg.pool_sizes
        .iter()
        .map(|&k| {
            Ok(match cfg.pooling {
                PoolingKind::Avg => avg_pool2d(f_bar, k)?,
                PoolingKind::Max => max_pool2d(f_bar, k)?,
            })
        })
        .collect()
}

/// `V(c) = Σ_ij f(c,i,j)·ω(i,j)` for `f: C×H×W` and `ω: H×W`.
pub fn attention_vector(f: &Tensor, mask: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = f.dims3()?;
    if mask.shape() != [h, w] {
        return Err(mismatch(
            "attention_vector",
            format!("mask {:?} for a {h}x{w} map", mask.shape()),
        ));
    }
    let m = mask.data();
    Ok(Tensor::from_vec(
        f.data()
            .chunks_exact(h * w)
            .take(c)
            .map(|plane| plane.iter().zip(m).map(|(a, b)| a * b).sum())
            .collect(),
    ))
}

/// Per-channel softmax across levels of `a_n·z`; returns one `[C]` weight
/// vector per level.
pub fn channel_weights(z: &Tensor, heads: &[Tensor]) -> Result<Vec<Tensor>> {
    let logits = heads
        .iter()
        .map(|a| crate::tensor::linear(z, a, None))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Tensor> = logits.iter().collect();
    let stacked = Tensor::stack(&refs)?;
    let phi = softmax_axis0(&stacked)?;
    let c = heads[0].shape()[0];
    (0..heads.len())
        .map(|n| Ok(phi.index0(n)?.into_reshape(&[c])?))
        .collect()
}

/// `V = Σ_n V^n ⊙ φ^n`.
pub fn fuse(vectors: &[Tensor], weights: &[Tensor]) -> Result<Tensor> {
    if vectors.is_empty() || vectors.len() != weights.len() {
        return Err(mismatch(
            "fuse",
            format!("{} vectors, {} weights", vectors.len(), weights.len()),
        )
        .into());
    }
    let mut out = Tensor::zeros(vectors[0].shape());
    for (v, p) in vectors.iter().zip(weights) {
        out.add_assign(&v.mul(p)?)?;
    }
    Ok(out)
}

/// Equal-weight fusion `(1/N)·Σ_n V^n`, summed in level order.
pub fn fuse_equal(vectors: &[Tensor]) -> Result<Tensor> {
    let first = vectors
        .first()
        .ok_or_else(|| mismatch("fuse_equal", "no vectors"))?;
    let mut out = Tensor::zeros(first.shape());
    for v in vectors {
        out.add_assign(v)?;
    }
    Ok(out.scale(1.0 / vectors.len() as f64))
}

/// `sigmoid(w·V + b)` for a `[1×C]` weight.
pub fn discriminate(v: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<f64> {
    let logit = crate::tensor::fully_connected(v, weight, bias)?;
    Ok(crate::tensor::sigmoid(logit.data()[0]))
}

/// Everything the pyramid computed for one sample.
#[derive(Clone, Debug)]
pub struct AttentionState {
    /// `ω^n`, each `H_n×W_n`. Empty without spatial attention.
    pub masks: Vec<Tensor>,
    /// `V^n`, each `[C]`.
    pub vectors: Vec<Tensor>,
    /// `φ^n`, each `[C]`.
    pub weights: Vec<Tensor>,
    /// Fused vector `V`.
    pub fused: Tensor,
    /// Compact feature `z`, when channel attention is on.
    pub compact: Option<Tensor>,
    /// Target-domain probability.
    pub probability: f64,
}

impl AttentionState {
    /// Channel-averaged weight `mean_c φ^n(c)` per level.
    pub fn mean_weights(&self) -> Vec<f64> {
        self.weights.iter().map(Tensor::mean).collect()
    }

    /// Largest deviation from the two normalization identities: each mask
    /// sums to one, and for every channel the weights sum to one across
    /// levels. Also returns the most negative mask entry seen.
    pub fn normalization_error(&self) -> (f64, f64) {
        let mut worst = 0.0f64;
        let mut min_entry = f64::INFINITY;
        for m in &self.masks {
            worst = worst.max((m.sum() - 1.0).abs());
            min_entry = m.data().iter().copied().fold(min_entry, f64::min);
        }
        if let Some(first) = self.weights.first() {
            for c in 0..first.len() {
                let s: f64 = self.weights.iter().map(|w| w.data()[c]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        (worst, min_entry)
    }
}

/// Graph handles produced by [`SapNet::forward`] for a batch.
#[derive(Clone, Debug)]
pub struct SapOutput {
    /// Target-domain probabilities, `[B]`.
    pub prob: Var,
    /// `ω^n` per sample then level.
    pub masks: Vec<Vec<Var>>,
    /// Stacked `V^n`, `[N×B×C]` (`[1×B×C]` without spatial attention).
    pub vectors: Var,
    /// Stacked `φ^n`, `[N×B×C]`; absent without channel attention.
    pub weights: Option<Var>,
    /// `V`, `[B×C]`.
    pub fused: Var,
    /// `z`, `[B×d]`.
    pub compact: Option<Var>,
    pub levels: usize,
}

impl SapOutput {
    pub fn attention_state(&self, g: &Graph, sample: usize) -> Result<AttentionState> {
        let c = g.value(self.fused).shape()[1];
        let per_level = |v: Var| -> Result<Vec<Tensor>> {
            let t = g.value(v);
            (0..t.shape()[0])
                .map(|n| Ok(t.index0(n)?.index0(sample)?.into_reshape(&[c])?))
                .collect()
        };
        let vectors = per_level(self.vectors)?;
        let weights = match self.weights {
            Some(w) => per_level(w)?,
            None => vec![Tensor::full(&[c], 1.0 / vectors.len() as f64); vectors.len()],
        };
        Ok(AttentionState {
            masks: self.masks[sample]
                .iter()
                .map(|&m| g.value(m).clone())
                .collect(),
            vectors,
            weights,
            fused: g.value(self.fused).index0(sample)?,
            compact: self
                .compact
                .map(|z| g.value(z).index0(sample))
                .transpose()?,
            probability: g.value(self.prob).data()[sample],
        })
    }
}

/// Parameters and running statistics of the attention pyramid discriminator.
#[derive(Clone, Debug)]
pub struct SapNet {
    cfg: PyramidConfig,
    in_channels: usize,
    guide_channels: usize,
    reduce: Vec<Conv2dLayer>,
    guided: Vec<Conv2dLayer>,
    mask_head: Vec<Conv2dLayer>,
    squeeze: Option<ParamId>,
    bn_gamma: Option<ParamId>,
    bn_beta: Option<ParamId>,
    scale_heads: Vec<ParamId>,
    disc_weight: ParamId,
    disc_bias: ParamId,
    pub bn_stats: BatchNormStats,
}

impl SapNet {
    /// Registers all parameters under `sap.`. `in_channels` is `Ĉ`,
    /// `guide_channels` the class count of the guided map.
    pub fn new(
        cfg: PyramidConfig,
        in_channels: usize,
        guide_channels: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let widths = reduce_stage_widths(in_channels, c)?;
        let reduce = (0..3)
            .map(|i| {
                Conv2dLayer::new(
                    store,
                    &format!("sap.reduce.{i}"),
                    widths[i],
                    widths[i + 1],
                    1,
                    1,
                    0,
                    rng,
                )
            })
            .collect();
        let (mut guided, mut mask_head) = (Vec::new(), Vec::new());
        if cfg.use_spatial_attention {
            let cin = if cfg.use_guided_map {
                in_channels + guide_channels
            } else {
                in_channels
            };
            for (i, ci) in [cin, c, c].into_iter().enumerate() {
                guided.push(Conv2dLayer::new(
                    store,
                    &format!("sap.guided.{i}"),
                    ci,
                    c,
                    3,
                    1,
                    1,
                    rng,
                ));
            }
            let mw = [c, (c / 2).max(1), (c / 4).max(1), 1];
            for i in 0..3 {
                mask_head.push(Conv2dLayer::new(
                    store,
                    &format!("sap.mask.{i}"),
                    mw[i],
                    mw[i + 1],
                    3,
                    1,
                    1,
                    rng,
                ));
            }
        }
        let (mut squeeze, mut bn_gamma, mut bn_beta, mut scale_heads) =
            (None, None, None, Vec::new());
        if cfg.use_spatial_attention && cfg.use_channel_attention {
            let d = cfg.compact_dim;
            squeeze = Some(store.add("sap.select.squeeze", init_matrix(rng, d, c)));
            bn_gamma = Some(store.add("sap.select.bn.gamma", Tensor::ones(&[d])));
            bn_beta = Some(store.add("sap.select.bn.beta", Tensor::zeros(&[d])));
            for n in 0..cfg.levels() {
                scale_heads
                    .push(store.add(format!("sap.select.level.{n}"), init_matrix(rng, c, d)));
            }
        }
        let disc_weight = store.add("sap.disc.weight", init_matrix(rng, 1, c));
        let disc_bias = store.add("sap.disc.bias", Tensor::zeros(&[1]));
        Ok(Self {
            bn_stats: BatchNormStats::new(cfg.compact_dim),
            cfg,
            in_channels,
            guide_channels,
            reduce,
            guided,
            mask_head,
            squeeze,
            bn_gamma,
            bn_beta,
            scale_heads,
            disc_weight,
            disc_bias,
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Input channels of the first guided-feature conv, i.e. what the mask
    /// branch sees.
    pub fn guided_input_channels(&self, store: &ParamStore) -> Option<usize> {
        self.guided.first().map(|l| l.in_channels(store))
    }

    pub fn reduce_widths(&self, store: &ParamStore) -> Vec<usize> {
        let mut w = vec![self.reduce[0].in_channels(store)];
        w.extend(self.reduce.iter().map(|l| l.out_channels(store)));
        w
    }

    /// Three 1×1 conv + relu stages down to `C` channels.
    pub fn reduce_channels(&self, g: &mut Graph, store: &ParamStore, f_hat: Var) -> Result<Var> {
        let (ch, _, _) = g.value(f_hat).dims3()?;
        if ch != self.in_channels {
            return Err(mismatch(
                "reduce_channels",
                format!("expected {} channels, got {ch}", self.in_channels),
            )
            .into());
        }
        let mut x = f_hat;
        for layer in &self.reduce {
            let y = layer.forward(g, store, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    pub fn build_pyramid(&self, g: &mut Graph, f_bar: Var) -> Result<Vec<Var>> {
        let (_, h, w) = g.value(f_bar).dims3()?;
        self.cfg.level_sizes(h, w)?;
        self.cfg
            .pool_sizes
            .iter()
            .map(|&k| {
                Ok(match self.cfg.pooling {
                    PoolingKind::Avg => g.avg_pool2d(f_bar, k)?,
                    PoolingKind::Max => g.max_pool2d(f_bar, k)?,
                })
            })
            .collect()
    }

    /// Concatenate the guided map onto `f̂` (when enabled) and apply three
    /// 3×3 conv + relu layers down to `C` channels.
    pub fn build_guided_feature(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_hat: Var,
        guided_map: Option<Var>,
    ) -> Result<Var> {
        let mut x = match (self.cfg.use_guided_map, guided_map) {
            (true, Some(p)) => {
                let (_, h, w) = g.value(f_hat).dims3()?;
                let (pc, ph, pw) = g.value(p).dims3()?;
                if pc != self.guide_channels {
                    return Err(mismatch(
                        "build_guided_feature",
                        format!(
                            "guided map has {pc} channels, expected {}",
                            self.guide_channels
                        ),
                    )
                    .into());
                }
                let p = if (ph, pw) != (h, w) {
                    g.resize_bilinear(p, h, w)?
                } else {
                    p
                };
                g.concat(&[f_hat, p])?
            }
            (true, None) => {
                return Err(Error::Config(
                    "guided map required when use_guided_map is on".into(),
                ))
            }
            (false, _) => f_hat,
        };
        for layer in &self.guided {
            let y = layer.forward(g, store, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// Resize the guided feature to the level extent, predict logits with
    /// the mask head and softmax them over all positions: returns `ω^n`.
    pub fn spatial_attention_mask(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        guided_feature: Var,
        level_hw: (usize, usize),
    ) -> Result<Var> {
        let (hn, wn) = level_hw;
        let mut x = g.resize_bilinear(guided_feature, hn, wn)?;
        for (i, layer) in self.mask_head.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < self.mask_head.len() {
                x = g.relu(x);
            }
        }
        let w = g.softmax_flat(x);
        Ok(g.reshape(w, &[hn, wn])?)
    }

    /// Channel-wise scale selection over stacked level vectors `[N×B×C]`.
    /// Returns `(φ [N×B×C], z [B×d])`.
    pub fn channel_attention(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        vectors: Var,
        mode: NormMode,
    ) -> Result<(Var, Var)> {
        let (Some(squeeze), Some(gamma), Some(beta)) = (self.squeeze, self.bn_gamma, self.bn_beta)
        else {
            return Err(Error::Config("channel attention is disabled".into()));
        };
        let v = g.sum_axis0(vectors)?;
        let wz = g.param(store, squeeze);
        let zpre = g.linear(v, wz, None)?;
        let gv = g.param(store, gamma);
        let bv = g.param(store, beta);
        let zn = g.batch_norm(zpre, gv, bv, &mut self.bn_stats, mode)?;
        let z = g.relu(zn);
        let mut logits = Vec::with_capacity(self.scale_heads.len());
        for &a in &self.scale_heads {
            let av = g.param(store, a);
            logits.push(g.linear(z, av, None)?);
        }
        let stacked = g.stack(&logits)?;
        let phi = g.softmax_axis0(stacked)?;
        Ok((phi, z))
    }

    /// Logistic domain score of fused vectors `[B×C]`, returned as `[B]`.
    pub fn discriminate(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        let w = g.param(store, self.disc_weight);
        let b = g.param(store, self.disc_bias);
        let logit = g.linear(fused, w, Some(b))?;
        let p = g.sigmoid(logit);
        let rows = g.value(p).len();
        Ok(g.reshape(p, &[rows])?)
    }

    /// Full pyramid over a batch of backbone features. `guided_maps[i]` is
    /// the class-probability map for sample `i` (ignored without guidance).
    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        f_hats: &[Var],
        guided_maps: &[Option<Var>],
        mode: NormMode,
    ) -> Result<SapOutput> {
        if f_hats.is_empty() || f_hats.len() != guided_maps.len() {
            return Err(mismatch("sap_forward", "one guided map per sample").into());
        }
        let n_levels = self.cfg.levels();
        let mut masks = Vec::with_capacity(f_hats.len());
        let mut level_vectors: Vec<Vec<Var>> = vec![Vec::new(); n_levels];
        let mut global = Vec::new();
        for (&f_hat, &guide) in f_hats.iter().zip(guided_maps) {
            let f_bar = self.reduce_channels(g, store, f_hat)?;
            if !self.cfg.use_spatial_attention {
                global.push(g.spatial_mean(f_bar)?);
                masks.push(Vec::new());
                continue;
            }
            let (_, h, w) = g.value(f_bar).dims3()?;
            let sizes = self.cfg.level_sizes(h, w)?;
            let pyramid = self.build_pyramid(g, f_bar)?;
            let guided = self.build_guided_feature(g, store, f_hat, guide)?;
            let mut sample_masks = Vec::with_capacity(n_levels);
            for (n, (&f_n, &hw)) in pyramid.iter().zip(&sizes).enumerate() {
                let omega = self.spatial_attention_mask(g, store, guided, hw)?;
                level_vectors[n].push(g.attention_vector(f_n, omega)?);
                sample_masks.push(omega);
            }
            masks.push(sample_masks);
        }

        if !self.cfg.use_spatial_attention {
            let fused = g.stack(&global)?;
            let vectors = g.stack(&[fused])?;
            let prob = self.discriminate(g, store, fused)?;
            return Ok(SapOutput {
                prob,
                masks,
                vectors,
                weights: None,
                fused,
                compact: None,
                levels: 1,
            });
        }

        let per_level = level_vectors
            .iter()
            .map(|vs| g.stack(vs))
            .collect::<Result<Vec<_>, _>>()?;
        let vectors = g.stack(&per_level)?;
        let (weights, compact, fused) = if self.cfg.use_channel_attention {
            let (phi, z) = self.channel_attention(g, store, vectors, mode)?;
            let weighted = g.mul(vectors, phi)?;
            (Some(phi), Some(z), g.sum_axis0(weighted)?)
        } else {
            let s = g.sum_axis0(vectors)?;
            (None, None, g.scale(s, 1.0 / n_levels as f64))
        };
        let prob = self.discriminate(g, store, fused)?;
        Ok(SapOutput {
            prob,
            masks,
            vectors,
            weights,
            fused,
            compact,
            levels: n_levels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_widths() {
        assert_eq!(reduce_stage_widths(512, 256).unwrap(), [512, 256, 256, 256]);
        assert_eq!(
            reduce_stage_widths(1024, 256).unwrap(),
            [1024, 512, 256, 256]
        );
        assert_eq!(reduce_stage_widths(64, 64).unwrap(), [64, 64, 64, 64]);
        assert!(reduce_stage_widths(32, 64).is_err());
    }

    #[test]
    fn detection_pyramid_sides_on_38_map() {
        let sizes = PyramidConfig::detection().level_sizes(38, 38).unwrap();
        let sides: Vec<usize> = sizes.iter().map(|s| s.0).collect();
        assert_eq!(sides, vec![36, 33, 30, 27, 24, 21, 18, 15, 12, 9, 6, 4, 2]);
    }

    #[test]
    fn oversize_window_lists_offenders() {
        let err = PyramidConfig::detection().level_sizes(34, 34).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("35") && msg.contains("37"), "{msg}");
        assert!(!msg.contains("33,"), "{msg}");
    }

    #[test]
    fn config_defaults() {
        let d = PyramidConfig::default();
        assert_eq!(d.channels, 256);
        assert_eq!(d.compact_dim, 128);
        assert_eq!(d.levels(), 13);
        assert_eq!(PyramidConfig::segmentation().levels(), 9);
        assert!(PyramidConfig::with_sizes(vec![3, 3], 4).validate().is_err());
        assert!(PyramidConfig::with_sizes(vec![0, 3], 4).validate().is_err());
    }

    #[test]
    fn presets_fit_the_map() {
        assert_eq!(
            PyramidConfig::preset_sizes(13, 38).unwrap(),
            DETECTION_POOL_SIZES.to_vec()
        );
        assert_eq!(PyramidConfig::preset_sizes(3, 40).unwrap(), vec![3, 21, 37]);
        for levels in [3, 7, 9, 13] {
            let k = PyramidConfig::preset_sizes(levels, 32).unwrap();
            assert_eq!(k.len(), levels);
            assert!(k.windows(2).all(|w| w[0] < w[1]));
            assert!(*k.last().unwrap() <= 32);
        }
        assert!(PyramidConfig::preset_sizes(13, 8).is_err());
    }

    #[test]
    fn pyramid_identity_and_constants() {
        let f = Tensor::from_fn(&[2, 5, 5], |i| i as f64 * 0.1);
        let cfg = PyramidConfig::with_sizes(vec![1], 2);
        assert_eq!(build_pyramid(&f, &cfg).unwrap(), vec![f.clone()]);
        let c = Tensor::full(&[2, 8, 8], 1.5);
        let cfg = PyramidConfig::with_sizes(vec![2, 5, 8], 2);
        for level in build_pyramid(&c, &cfg).unwrap() {
            assert!(level.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_vector_selection_and_mean() {
        let f = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let mut onehot = Tensor::zeros(&[2, 2]);
        onehot.data_mut()[3] = 1.0;
        let v = attention_vector(&f, &onehot).unwrap();
        assert_eq!(v.data(), &[3.0, 7.0, 11.0]);
        let v = attention_vector(&f, &Tensor::full(&[2, 2], 0.25)).unwrap();
        assert_eq!(v, f.spatial_mean().unwrap());
        assert!(attention_vector(&f, &Tensor::ones(&[2, 3])).is_err());
    }

    #[test]
    fn channel_weights_uniform_cases() {
        let a = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.3 - 1.0);
        let z = Tensor::from_vec(vec![0.7, -0.2]);
        for w in channel_weights(&z, &[a.clone(), a.clone(), a.clone()]).unwrap() {
            assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let b = a.scale(-2.0);
        for w in channel_weights(&Tensor::zeros(&[2]), &[a, b]).unwrap() {
            assert!(w.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn fuse_cases() {
        let v = Tensor::from_vec(vec![1.0, -2.0]);
        assert_eq!(
            fuse(std::slice::from_ref(&v), &[Tensor::ones(&[2])]).unwrap(),
            v
        );
        let w = Tensor::from_vec(vec![3.0, 5.0]);
        let half = Tensor::full(&[2], 0.5);
        let f = fuse(&[v.clone(), w.clone()], &[half.clone(), half]).unwrap();
        assert_eq!(f, fuse_equal(&[v, w]).unwrap());
        assert!(fuse(&[], &[]).is_err());
    }

    #[test]
    fn discriminator_cases() {
        let v = Tensor::from_vec(vec![1.0, 2.0]);
        let p = discriminate(&v, &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(p, 0.5);
        let p = discriminate(&v, &Tensor::zeros(&[1, 2]), &Tensor::scalar(20.0)).unwrap();
        assert!((p - 1.0).abs() < 1e-8);
    }

    fn toy_net(cfg: PyramidConfig, c_hat: usize) -> (SapNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = SapNet::new(cfg, c_hat, 4, &mut store, &mut rng).unwrap();
        (net, store)
    }

    #[test]
    fn forward_smoke_and_invariants() {
        let (mut net, store) = toy_net(PyramidConfig::with_sizes(vec![1], 16), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let f = g.input(Tensor::from_fn(&[16, 8, 8], |_| rng.gen_range(-1.0..1.0)));
        let p = g.input(
            softmax_axis0(&Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0))).unwrap(),
        );
        let out = net
            .forward(&mut g, &store, &[f], &[Some(p)], NormMode::Eval)
            .unwrap();
        let st = out.attention_state(&g, 0).unwrap();
        assert!(st.probability > 0.0 && st.probability < 1.0);
        let (err, min) = st.normalization_error();
        assert!(err < 1e-9 && min >= 0.0);
        assert_eq!(st.masks[0].shape(), &[8, 8]);
    }

    #[test]
    fn guided_map_toggle_changes_first_conv_only() {
        let mut with = PyramidConfig::with_sizes(vec![3, 5], 8);
        let (a, sa) = toy_net(with.clone(), 16);
        with.use_guided_map = false;
        let (b, sb) = toy_net(with, 16);
        assert_eq!(a.guided_input_channels(&sa), Some(20));
        assert_eq!(b.guided_input_channels(&sb), Some(16));
        assert_eq!(sa.len(), sb.len());
        let diffs: Vec<&str> = sa
            .iter()
            .zip(sb.iter())
            .filter(|((_, p), (_, q))| p.value.shape() != q.value.shape())
            .map(|((_, p), _)| p.name.as_str())
            .collect();
        assert_eq!(diffs, vec!["sap.guided.0.weight"]);
    }

    #[test]
    fn reduction_rejects_narrow_backbone() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(SapNet::new(
            PyramidConfig::with_sizes(vec![1], 32),
            16,
            4,
            &mut store,
            &mut rng
        )
        .is_err());
    }
}
