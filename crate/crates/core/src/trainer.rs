//! Teacher-student training with the cross-image and within-image
//! magic-cube branches, cube-location reasoning and pseudo-label blending.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::augment::{baseline_augment, cutmix, BaselineAug, Region};
use crate::blending::{blend, refined_label, teacher_pseudo, weight_map, ClassHistogram, DEFAULT_WINDOW};
use crate::error::{bail, Result};
use crate::losses::{
    assemble_total, ce_location_loss_and_grad, dice_loss_and_grad, lr_schedule, LossReport, LossWeights, LrSchedule,
};
use crate::magic_cube::{cross_recover, location_offset, mix_maps, partition, shuffle_within, MixMask, SourceTag};
use crate::model::{
    backward, cls_backward, cls_forward, ema_update, forward_train, init_params, ClsCache, FeatureBlock, ForwardMode,
    Grads, NetworkConfig, NetworkParams, Tape,
};
use crate::phantom::Dataset;
use crate::rng::{self, stream};
use crate::volume::{normalize, random_crop, softmax_channels, Block, Dims, LabelMap, ProbKind, ProbMap, Volume};

/// Supervision of the unlabeled images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SupMode {
    /// Cross-branch output vs. blended teacher / cube-wise pseudo-labels.
    Blend,
    /// Cross- and within-branch outputs vs. the teacher argmax.
    Teacher,
    /// Cross- and within-branch outputs supervise each other's argmax.
    Mutual,
}

/// Which images take part in cross-image mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MixScope {
    /// Unlabeled images only; labeled images are forwarded whole.
    U,
    /// Labeled and unlabeled images together.
    LU,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Ablation {
    /// Cross-image partition, mixing and recovery; off forwards whole images.
    pub cross: bool,
    /// Within-image partition and recovery.
    pub within: bool,
    /// Cube-location classification.
    pub loc: bool,
    /// Mix cubes ignoring their original locations.
    pub scramble: bool,
    pub mix_scope: MixScope,
    pub sup_mode: SupMode,
    /// Replace magic-cube mixing in the cross branch by an interpolation
    /// baseline between image pairs.
    pub baseline: Option<BaselineAug>,
}

impl Default for Ablation {
    fn default() -> Self {
        Preset::Full.ablation()
    }
}

/// Named component combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Labeled data only, whole-image forward.
    SupervisedOnly,
    /// Mean teacher: whole-image forward, teacher argmax targets.
    MeanTeacher,
    Cross,
    CrossIn,
    CrossLoc,
    CrossInLoc,
    /// Cross + In + Loc + blending.
    Full,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::SupervisedOnly,
        Preset::MeanTeacher,
        Preset::Cross,
        Preset::CrossIn,
        Preset::CrossLoc,
        Preset::CrossInLoc,
        Preset::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SupervisedOnly => "sup-only",
            Preset::MeanTeacher => "mt",
            Preset::Cross => "cross",
            Preset::CrossIn => "cross-in",
            Preset::CrossLoc => "cross-loc",
            Preset::CrossInLoc => "cross-in-loc",
            Preset::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn ablation(self) -> Ablation {
        let (cross, within, loc, sup_mode) = match self {
            Preset::SupervisedOnly | Preset::MeanTeacher => (false, false, false, SupMode::Teacher),
            Preset::Cross => (true, false, false, SupMode::Teacher),
            Preset::CrossIn => (true, true, false, SupMode::Teacher),
            Preset::CrossLoc => (true, false, true, SupMode::Teacher),
            Preset::CrossInLoc => (true, true, true, SupMode::Teacher),
            Preset::Full => (true, true, true, SupMode::Blend),
        };
        Ablation { cross, within, loc, scramble: false, mix_scope: MixScope::LU, sup_mode, baseline: None }
    }

    /// `cfg` switched to this preset; the supervised-only baseline drops
    /// unlabeled images from the batch.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        out.ablation = self.ablation();
        if self == Preset::SupervisedOnly {
            out.unlabeled_per_batch = 0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    /// Cubes per axis `N`.
    pub n_cubes: usize,
    pub crop: Dims,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub max_iter: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub alpha_max: f64,
    /// Ramp-up length; `None` means 40% of `max_iter`.
    pub ramp_iters: Option<u64>,
    pub beta: f64,
    pub ema_decay: f64,
    pub histogram_window: usize,
    /// Give background voxels blending weight 1 instead of 0.
    pub background_as_head: bool,
    pub dice_include_background: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkConfig::default(),
            n_cubes: 3,
            crop: Dims::cube(24),
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            max_iter: 2000,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::default(),
            alpha_max: 1.0,
            ramp_iters: None,
            beta: 0.1,
            ema_decay: 0.99,
            histogram_window: DEFAULT_WINDOW,
            background_as_head: false,
            dice_include_background: true,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        let ramp = self.ramp_iters.unwrap_or((self.max_iter as f64 * 0.4) as u64);
        LossWeights { alpha: 0.0, beta: self.beta, alpha_max: self.alpha_max, ramp_iters: ramp }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        lr_schedule(self.lr_schedule, t, self.base_lr, self.max_iter)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let n = self.n_cubes;
        if n == 0 {
            bail!(Config, "cubes per axis must be positive");
        }
        if !self.crop.divisible_by(n) {
            bail!(Config, "crop {} is not divisible by N={n}", self.crop);
        }
        let m = self.network.size_multiple();
        if !self.crop.divisible_by(m) {
            bail!(Config, "crop {} is not divisible by {m}", self.crop);
        }
        let ab = &self.ablation;
        if (ab.within || ab.loc) && !self.crop.div(n).divisible_by(m) {
            bail!(Config, "cube {} is not divisible by {m}", self.crop.div(n));
        }
        if ab.loc && !self.crop.div(n).div(m).divisible_by(self.network.cls_grid) {
            bail!(
                Config,
                "cube bottleneck {} is not divisible by the location grid {}",
                self.crop.div(n).div(m),
                self.network.cls_grid
            );
        }
        if ab.loc && self.network.n_locations != n * n * n {
            bail!(Config, "location head has {} outputs, N³ = {}", self.network.n_locations, n * n * n);
        }
        if self.labeled_per_batch == 0 {
            bail!(Config, "batch needs at least one labeled image");
        }
        if self.unlabeled_per_batch > 0 {
            if ab.sup_mode == SupMode::Blend && !ab.within {
                bail!(Config, "blending needs the within-image branch");
            }
            if ab.sup_mode == SupMode::Mutual && !ab.within {
                bail!(Config, "mutual supervision needs the within-image branch");
            }
        }
        if !(self.base_lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            bail!(Config, "learning rate, momentum and weight decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            bail!(Config, "EMA decay {} outside [0, 1]", self.ema_decay);
        }
        if self.alpha_max < 0.0 || self.beta < 0.0 {
            bail!(Config, "loss weights must be non-negative");
        }
        if self.histogram_window == 0 {
            bail!(Config, "histogram window must be positive");
        }
        if let Some(BaselineAug::CutMix { size } | BaselineAug::CutOut { size }) = ab.baseline {
            if !size.fits_within(self.crop) {
                bail!(Config, "cut box {size} exceeds crop {}", self.crop);
            }
        }
        Ok(())
    }
}

/// Normalized training volumes.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
    pub num_classes: usize,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Ok(Self {
            labeled: ds.labeled.iter().map(|c| Ok((normalize(&c.volume)?, c.labels.clone()))).collect::<Result<_>>()?,
            unlabeled: ds.unlabeled.iter().map(|c| normalize(&c.volume)).collect::<Result<_>>()?,
            num_classes: ds.num_classes,
        })
    }
}

/// One cropped, normalized batch image.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub volume: Volume,
    pub labels: Option<LabelMap>,
    pub tag: SourceTag,
    /// Index into the labeled or unlabeled list.
    pub case: usize,
}

fn draw_indices(rng: &mut rng::Rng, available: usize, k: usize) -> Vec<usize> {
    if k <= available {
        sample(rng, available, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..available)).collect()
    }
}

/// Labeled then unlabeled crops for iteration `t`.
pub fn compose_batch(data: &TrainData, cfg: &TrainConfig, t: u64) -> Result<Vec<BatchItem>> {
    if data.labeled.is_empty() {
        bail!(Config, "dataset has no labeled cases");
    }
    if cfg.unlabeled_per_batch > 0 && data.unlabeled.is_empty() {
        bail!(Config, "unlabeled images requested but the dataset has none");
    }
    let mut rng = rng::derive(cfg.seed, stream::BATCH, t);
    let mut batch = Vec::with_capacity(cfg.labeled_per_batch + cfg.unlabeled_per_batch);
    for (i, k) in draw_indices(&mut rng, data.labeled.len(), cfg.labeled_per_batch).into_iter().enumerate() {
        let (v, y) = &data.labeled[k];
        let (volume, labels, _) = random_crop(v, Some(y), cfg.crop, &mut rng)?;
        batch.push(BatchItem { volume, labels, tag: SourceTag::labeled(i), case: k });
    }
    for (i, k) in draw_indices(&mut rng, data.unlabeled.len(), cfg.unlabeled_per_batch).into_iter().enumerate() {
        let (volume, _, _) = random_crop(&data.unlabeled[k], None, cfg.crop, &mut rng)?;
        batch.push(BatchItem { volume, labels: None, tag: SourceTag::unlabeled(i), case: k });
    }
    Ok(batch)
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: NetworkParams,
    pub teacher: NetworkParams,
    /// SGD momentum buffers, shaped like the student.
    pub momentum: Grads,
    /// Number of completed steps.
    pub iteration: u64,
    pub histogram: ClassHistogram,
}

/// Seeded student, identical teacher, zero momentum.
pub fn init_state(cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let student = init_params(&cfg.network, &mut rng::derive(cfg.seed, stream::INIT, 0))?;
    Ok(TrainState {
        teacher: student.clone(),
        momentum: Grads::zeros_like(&student),
        student,
        iteration: 0,
        histogram: ClassHistogram::new(cfg.network.num_classes, cfg.histogram_window)?,
    })
}

/// Per-iteration record written to the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub lr: f64,
    pub alpha: f64,
    pub losses: LossReport,
    /// Mean blending weight over the unlabeled crops, when blending ran.
    pub mean_omega: Option<f64>,
    /// Organ counts of the histogram window after this step.
    pub counts: Vec<u64>,
}

/// Losses, gradients and side products of one step, before any update.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub losses: LossReport,
    pub grads: Grads,
    pub histogram: ClassHistogram,
    pub mean_omega: Option<f64>,
    /// Pseudo-label targets used for each unlabeled image (batch order).
    pub unlabeled_targets: Vec<LabelMap>,
}

fn probs_from_tape(tape: &Tape, channels: usize) -> Result<ProbMap> {
    let logits = tape.logits().expect("full forward");
    softmax_channels(&ProbMap::new(channels, tape.input_dims(), ProbKind::Logits, logits.to_vec())?)
}

/// Gradient through a channel softmax: `p ⊙ (g − Σ_c p g)`.
pub fn softmax_backward(p: &ProbMap, g: &[f32]) -> Vec<f32> {
    let c = p.channels();
    let n = p.dims().len();
    let pd = p.data();
    let mut out = vec![0.0f32; pd.len()];
    for i in 0..n {
        let mut s = 0.0f32;
        for k in 0..c {
            s += pd[k * n + i] * g[k * n + i];
        }
        for k in 0..c {
            out[k * n + i] = pd[k * n + i] * (g[k * n + i] - s);
        }
    }
    out
}

fn add_scaled(dst: &mut Option<Vec<f32>>, src: &[f32], w: f32) {
    let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
    for (a, &b) in d.iter_mut().zip(src) {
        *a += w * b;
    }
}

struct CubeRun {
    tape: Tape,
    location: usize,
    cls: Option<(Vec<f32>, ClsCache)>,
}

/// How the cross-branch outputs relate to the forwarded images.
enum CrossRoute {
    /// Output `b` is the forward of batch image `b`.
    Whole(usize),
    /// Mixed forwards of `members` recovered through `mask`.
    Mixed { members: Vec<usize>, mask: MixMask },
    /// Baseline augmentation of `base` with `partner`.
    Pair { base: usize, partner: usize, region: Option<Region>, lambda: Option<f32> },
}

fn dice(p: &ProbMap, y: &LabelMap, cfg: &TrainConfig) -> Result<(f64, Vec<f32>)> {
    dice_loss_and_grad(p, y, cfg.dice_include_background)
}

/// Forward passes and losses of one iteration; nothing is updated.
pub fn compute_step(state: &TrainState, batch: &[BatchItem], cfg: &TrainConfig) -> Result<StepOutcome> {
    let t = state.iteration;
    let s = &state.student;
    let ab = cfg.ablation;
    let n = cfg.n_cubes;
    let n_loc = n * n * n;
    let c1 = cfg.network.num_classes + 1;
    let weights = cfg.loss_weights().at(t);
    let mut rng = rng::derive(cfg.seed, stream::TRAIN_STEP, t);

    if batch.is_empty() {
        bail!(Config, "empty batch");
    }
    let labeled: Vec<usize> = (0..batch.len()).filter(|&b| batch[b].labels.is_some()).collect();
    let unlabeled: Vec<usize> = (0..batch.len()).filter(|&b| batch[b].labels.is_none()).collect();
    if labeled.is_empty() {
        bail!(Config, "batch has no labeled image");
    }
    for item in batch {
        if item.volume.dims() != cfg.crop {
            bail!(Dimension, "batch image {} does not match crop {}", item.volume.dims(), cfg.crop);
        }
    }

    // (a) teacher predictions for unlabeled images
    let teacher: Vec<(ProbMap, LabelMap)> =
        unlabeled.iter().map(|&b| teacher_pseudo(&state.teacher, &batch[b].volume)).collect::<Result<_>>()?;

    // (b) within-image branch and location logits
    let cube_mode = if ab.within { ForwardMode::Full } else { ForwardMode::EncoderOnly };
    let mut cubes: Vec<Vec<CubeRun>> = Vec::new();
    let mut p_in: Vec<Option<ProbMap>> = vec![None; batch.len()];
    if ab.within || ab.loc {
        for (b, item) in batch.iter().enumerate() {
            let grid = shuffle_within(&partition(&item.volume, n)?.with_source(item.tag), &mut rng);
            let mut runs = Vec::with_capacity(n_loc);
            for (cube, &location) in grid.cubes().iter().zip(grid.locations()) {
                let tape = forward_train(s, cube, cube_mode)?;
                let cls = if ab.loc {
                    let feats = FeatureBlock {
                        channels: cfg.network.feature_dim(),
                        dims: tape.bottleneck_dims(),
                        data: tape.bottleneck().to_vec(),
                    };
                    Some(cls_forward(s, &feats)?)
                } else {
                    None
                };
                runs.push(CubeRun { tape, location, cls });
            }
            if ab.within {
                let cube_dims = grid.cube_dims();
                let mut full = ProbMap::zeros(c1, item.volume.dims(), ProbKind::Probabilities);
                for r in &runs {
                    full.paste(location_offset(r.location, n, cube_dims), &probs_from_tape(&r.tape, c1)?);
                }
                p_in[b] = Some(full);
            }
            cubes.push(runs);
        }
    }

    // (c) pseudo-label targets for unlabeled images
    let mut histogram = state.histogram.clone();
    let mut mean_omega = None;
    let mut targets: Vec<Option<LabelMap>> = batch.iter().map(|item| item.labels.clone()).collect();
    if !unlabeled.is_empty() {
        match ab.sup_mode {
            SupMode::Blend => {
                let mut total = vec![0u64; cfg.network.num_classes];
                for (_, y) in &teacher {
                    for (a, b) in total.iter_mut().zip(&y.class_counts()[1..]) {
                        *a += b;
                    }
                }
                histogram.push(total)?;
                let mut omega_sum = 0.0;
                for (k, &b) in unlabeled.iter().enumerate() {
                    let (pt, yt) = &teacher[k];
                    let w = weight_map(yt, &histogram, cfg.background_as_head)?;
                    omega_sum += w.mean();
                    let pi = p_in[b].as_ref().expect("within branch");
                    targets[b] = Some(refined_label(&blend(pt, pi, &w)?)?);
                }
                mean_omega = Some(omega_sum / unlabeled.len() as f64);
            }
            SupMode::Teacher | SupMode::Mutual => {
                for (k, &b) in unlabeled.iter().enumerate() {
                    targets[b] = Some(teacher[k].1.clone());
                }
            }
        }
    }

    // (d) cross-image branch
    let members: Vec<usize> = match ab.mix_scope {
        MixScope::LU => (0..batch.len()).collect(),
        MixScope::U => unlabeled.clone(),
    };
    let mut routes: Vec<CrossRoute> = Vec::new();
    let mut inputs: Vec<Volume> = Vec::new();
    let mixing = ab.cross && members.len() > 1;
    for b in 0..batch.len() {
        if !mixing || !members.contains(&b) {
            routes.push(CrossRoute::Whole(b));
            inputs.push(batch[b].volume.clone());
        }
    }
    if mixing {
        match ab.baseline {
            None => {
                let tags: Vec<SourceTag> = members.iter().map(|&b| batch[b].tag).collect();
                let mask = if ab.scramble {
                    MixMask::draw_scramble(&tags, n_loc, &mut rng)?
                } else {
                    MixMask::draw_keep(&tags, n_loc, &mut rng)?
                };
                let vols: Vec<Volume> = members.iter().map(|&b| batch[b].volume.clone()).collect();
                inputs.extend(mix_maps(&vols, &mask, n)?);
                routes.push(CrossRoute::Mixed { members: members.clone(), mask });
            }
            Some(kind) => {
                for (i, &base) in members.iter().enumerate() {
                    let partner = members[if i % 2 == 0 { (i + 1) % members.len() } else { i - 1 }];
                    let aug = baseline_augment(kind, &batch[base].volume, &batch[partner].volume, &mut rng)?;
                    let (vol, region, lambda) = (aug.volume, aug.region, aug.lambda);
                    inputs.push(vol);
                    routes.push(CrossRoute::Pair { base, partner, region, lambda });
                }
            }
        }
    }
    let tapes: Vec<Tape> = inputs.iter().map(|v| forward_train(s, v, ForwardMode::Full)).collect::<Result<_>>()?;
    let fwd_probs: Vec<ProbMap> = tapes.iter().map(|tp| probs_from_tape(tp, c1)).collect::<Result<_>>()?;

    // Cross-branch output per batch image and, for pair baselines, its slot.
    let mut p_cross: Vec<Option<ProbMap>> = vec![None; batch.len()];
    let mut slot_of: Vec<Option<usize>> = vec![None; batch.len()];
    let mut mixed_slots: Option<(usize, usize)> = None;
    {
        let mut slot = 0;
        for r in &routes {
            match r {
                CrossRoute::Whole(b) => {
                    p_cross[*b] = Some(fwd_probs[slot].clone());
                    slot_of[*b] = Some(slot);
                    slot += 1;
                }
                CrossRoute::Mixed { members, mask } => {
                    let k = members.len();
                    let rec = cross_recover(&fwd_probs[slot..slot + k], mask, n)?;
                    for (&b, p) in members.iter().zip(rec) {
                        p_cross[b] = Some(p);
                    }
                    mixed_slots = Some((slot, k));
                    slot += k;
                }
                CrossRoute::Pair { base, .. } => {
                    p_cross[*base] = Some(fwd_probs[slot].clone());
                    slot_of[*base] = Some(slot);
                    slot += 1;
                }
            }
        }
    }

    // (e)-(f) losses and gradients w.r.t. branch outputs
    let inv_l = 1.0 / labeled.len() as f64;
    let inv_u = if unlabeled.is_empty() { 0.0 } else { 1.0 / unlabeled.len() as f64 };
    let mut parts = LossReport::default();
    let mut g_cross: Vec<Option<Vec<f32>>> = vec![None; batch.len()];
    let mut g_in: Vec<Option<Vec<f32>>> = vec![None; batch.len()];

    // Target a batch image's cross output is scored against, including the
    // splice / mix of a pair baseline.
    let pair_of = |b: usize| {
        routes.iter().find_map(|r| match r {
            CrossRoute::Pair { base, partner, region, lambda } if *base == b => Some((*partner, *region, *lambda)),
            _ => None,
        })
    };
    let cross_loss = |b: usize, target: &LabelMap, grad: &mut Option<Vec<f32>>, w: f64| -> Result<f64> {
        let p = p_cross[b].as_ref().expect("cross output");
        match pair_of(b) {
            Some((partner, region, lambda)) => {
                let other = targets[partner].as_ref().expect("partner target");
                if let Some(l) = lambda {
                    let (la, ga) = dice(p, target, cfg)?;
                    let (lb, gb) = dice(p, other, cfg)?;
                    add_scaled(grad, &ga, (w * l as f64) as f32);
                    add_scaled(grad, &gb, (w * (1.0 - l as f64)) as f32);
                    Ok(l as f64 * la + (1.0 - l as f64) * lb)
                } else {
                    let spliced = match (&ab.baseline, region) {
                        (Some(BaselineAug::CutMix { .. }), Some(r)) => cutmix(target, other, r)?,
                        _ => target.clone(),
                    };
                    let (l, g) = dice(p, &spliced, cfg)?;
                    add_scaled(grad, &g, w as f32);
                    Ok(l)
                }
            }
            None => {
                let (l, g) = dice(p, target, cfg)?;
                add_scaled(grad, &g, w as f32);
                Ok(l)
            }
        }
    };

    for &b in &labeled {
        let y = batch[b].labels.as_ref().expect("labeled");
        parts.l_cross_sup += inv_l * cross_loss(b, y, &mut g_cross[b], inv_l)?;
        if let Some(pi) = &p_in[b] {
            let (l, g) = dice(pi, y, cfg)?;
            parts.l_in_sup += inv_l * l;
            add_scaled(&mut g_in[b], &g, inv_l as f32);
        }
    }
    let wu = weights.alpha * inv_u;
    for &b in &unlabeled {
        match ab.sup_mode {
            SupMode::Blend => {
                let y = targets[b].clone().expect("target");
                parts.l_cross_in_unsup += inv_u * cross_loss(b, &y, &mut g_cross[b], wu)?;
            }
            SupMode::Teacher => {
                let y = targets[b].clone().expect("target");
                let mut l = cross_loss(b, &y, &mut g_cross[b], wu)?;
                if let Some(pi) = &p_in[b] {
                    let (li, g) = dice(pi, &y, cfg)?;
                    l += li;
                    add_scaled(&mut g_in[b], &g, wu as f32);
                }
                parts.l_cross_in_unsup += inv_u * l;
            }
            SupMode::Mutual => {
                let pc = p_cross[b].as_ref().expect("cross output");
                let pi = p_in[b].as_ref().expect("within output");
                let (l1, g1) = dice(pc, &pi.argmax(), cfg)?;
                let (l2, g2) = dice(pi, &pc.argmax(), cfg)?;
                add_scaled(&mut g_cross[b], &g1, wu as f32);
                add_scaled(&mut g_in[b], &g2, wu as f32);
                parts.l_cross_in_unsup += inv_u * (l1 + l2);
            }
        }
    }

    // location cross-entropy, one matrix per image
    let mut g_cls: Vec<Vec<Option<Vec<f32>>>> = Vec::new();
    if ab.loc {
        for (b, runs) in cubes.iter().enumerate() {
            let rows: Vec<f32> = runs.iter().flat_map(|r| r.cls.as_ref().expect("cls").0.iter().copied()).collect();
            let tgt: Vec<usize> = runs.iter().map(|r| r.location).collect();
            let (l, g) = ce_location_loss_and_grad(&rows, n_loc, &tgt)?;
            let (scale, part) =
                if batch[b].labels.is_some() { (inv_l, &mut parts.l_cls_sup) } else { (inv_u, &mut parts.l_cls_unsup) };
            *part += scale * l;
            let w = (weights.beta * scale) as f32;
            g_cls.push(g.chunks(n_loc).map(|row| Some(row.iter().map(|&v| v * w).collect())).collect());
        }
    }

    // (g) total
    let losses = assemble_total(parts, &weights)?;

    // Backward through every student forward.
    let mut grads = Grads::zeros_like(s);
    let mut g_fwd: Vec<Option<Vec<f32>>> = vec![None; tapes.len()];
    for b in 0..batch.len() {
        if let (Some(g), Some(slot)) = (&g_cross[b], slot_of[b]) {
            add_scaled(&mut g_fwd[slot], g, 1.0);
        }
    }
    if let (Some((start, k)), Some(CrossRoute::Mixed { members, mask })) =
        (mixed_slots, routes.iter().find(|r| matches!(r, CrossRoute::Mixed { .. })))
    {
        if members.iter().any(|&b| g_cross[b].is_some()) {
            let maps: Vec<ProbMap> = members
                .iter()
                .map(|&b| {
                    let data = g_cross[b].clone().unwrap_or_else(|| vec![0.0; c1 * cfg.crop.len()]);
                    ProbMap::new(c1, cfg.crop, ProbKind::Probabilities, data)
                })
                .collect::<Result<_>>()?;
            for (i, g) in mix_maps(&maps, mask, n)?.into_iter().enumerate() {
                add_scaled(&mut g_fwd[start + i], g.data(), 1.0);
            }
        }
        debug_assert_eq!(k, members.len());
    }
    for (slot, tape) in tapes.iter().enumerate() {
        if let Some(g) = &g_fwd[slot] {
            let gl = softmax_backward(&fwd_probs[slot], g);
            backward(s, tape, Some(&gl), None, &mut grads);
        }
    }
    for (b, runs) in cubes.iter().enumerate() {
        let g_parts = match &g_in[b] {
            Some(g) => {
                let map = ProbMap::new(c1, cfg.crop, ProbKind::Probabilities, g.clone())?;
                Some(partition(&map, n)?)
            }
            None => None,
        };
        for (k, r) in runs.iter().enumerate() {
            let gl = match &g_parts {
                Some(grid) => {
                    let gp = grid.cube_at(r.location).expect("cube");
                    Some(softmax_backward(&probs_from_tape(&r.tape, c1)?, gp.data()))
                }
                None => None,
            };
            let gb = match (&r.cls, g_cls.get(b).and_then(|rows| rows[k].as_ref())) {
                (Some((_, cache)), Some(grow)) => Some(cls_backward(s, cache, grow, &mut grads)),
                _ => None,
            };
            if gl.is_some() || gb.is_some() {
                backward(s, &r.tape, gl.as_deref(), gb.as_deref(), &mut grads);
            }
        }
    }
    if !grads.is_finite() {
        bail!(Numeric, "non-finite gradient at iteration {t} (total loss {})", losses.total);
    }
    let unlabeled_targets = unlabeled.iter().map(|&b| targets[b].clone().expect("target")).collect();
    Ok(StepOutcome { losses, grads, histogram, mean_omega, unlabeled_targets })
}

/// `buf ← μ·buf + g + λ·θ`, `θ ← θ − lr·buf`.
pub fn sgd_step(params: &mut NetworkParams, grads: &Grads, momentum: &mut Grads, lr: f64, mu: f64, wd: f64) {
    let (lr, mu, wd) = (lr as f32, mu as f32, wd as f32);
    for ((t, g), buf) in params.tensors_mut().iter_mut().zip(&grads.tensors).zip(momentum.tensors.iter_mut()) {
        for ((theta, &gv), b) in t.data.iter_mut().zip(g).zip(buf.iter_mut()) {
            *b = mu * *b + gv + wd * *theta;
            *theta -= lr * *b;
        }
    }
}

/// One optimizer step on the student followed by the teacher EMA update.
pub fn train_step(state: &mut TrainState, batch: &[BatchItem], cfg: &TrainConfig) -> Result<StepReport> {
    let t = state.iteration;
    if t >= cfg.max_iter {
        bail!(Config, "iteration {t} is past max_iter {}", cfg.max_iter);
    }
    let out = compute_step(state, batch, cfg)?;
    let lr = cfg.lr_at(t);
    sgd_step(&mut state.student, &out.grads, &mut state.momentum, lr, cfg.momentum, cfg.weight_decay);
    ema_update(&mut state.teacher, &state.student, cfg.ema_decay as f32)?;
    state.histogram = out.histogram;
    state.iteration += 1;
    Ok(StepReport {
        iteration: t,
        lr,
        alpha: cfg.loss_weights().at(t).alpha,
        losses: out.losses,
        mean_omega: out.mean_omega,
        counts: state.histogram.counts().to_vec(),
    })
}

/// Trains from `state` (or a fresh one) until `stop` iterations are done,
/// calling `observer` after every step.
pub fn run_until(
    cfg: &TrainConfig,
    data: &TrainData,
    state: Option<TrainState>,
    stop: u64,
    mut observer: impl FnMut(&StepReport, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.num_classes != cfg.network.num_classes {
        bail!(Config, "dataset has {} classes, network {}", data.num_classes, cfg.network.num_classes);
    }
    let mut st = match state {
        Some(s) => s,
        None => init_state(cfg)?,
    };
    if !st.student.same_shape(&st.teacher) || st.student.config() != &cfg.network {
        bail!(Consistency, "state does not match the configured network");
    }
    let stop = stop.min(cfg.max_iter);
    while st.iteration < stop {
        let batch = compose_batch(data, cfg, st.iteration)?;
        let report = train_step(&mut st, &batch, cfg)?;
        observer(&report, &st)?;
    }
    Ok(st)
}

/// Full run to `max_iter`.
pub fn run(
    cfg: &TrainConfig,
    data: &TrainData,
    observer: impl FnMut(&StepReport, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    run_until(cfg, data, None, cfg.max_iter, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_seg, Norm};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            network: NetworkConfig {
                num_classes: 2,
                base_width: 2,
                depth: 1,
                cls_hidden: 8,
                cls_grid: 2,
                n_locations: 8,
                norm: Norm::Instance,
            },
            n_cubes: 2,
            crop: Dims::cube(8),
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            max_iter: 10,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(seed: u64) -> TrainData {
        let mut r = rng::from_seed(seed);
        let d = Dims::cube(10);
        let mut case = || {
            let cx = r.random_range(3..7usize);
            let labels: Vec<u8> = (0..d.len())
                .map(|i| {
                    let [x, y, _] = d.coords(i);
                    if x.abs_diff(cx) < 2 {
                        1
                    } else if y < 3 {
                        2
                    } else {
                        0
                    }
                })
                .collect();
            let vol: Vec<f32> = labels.iter().map(|&l| l as f32 + 0.2 * r.random_range(-1.0f32..1.0)).collect();
            (Volume::new(d, vol).unwrap(), LabelMap::new(d, 2, labels).unwrap())
        };
        let labeled = (0..3).map(|_| case()).collect();
        let unlabeled = (0..4).map(|_| case().0).collect();
        TrainData { labeled, unlabeled, num_classes: 2 }
    }

    /// Within-branch prediction assembled by forwarding each cube in place.
    fn reference_p_in(p: &NetworkParams, v: &Volume, n: usize, c1: usize) -> ProbMap {
        let grid = partition(v, n).unwrap();
        let mut out = ProbMap::zeros(c1, v.dims(), ProbKind::Probabilities);
        for (cube, &loc) in grid.cubes().iter().zip(grid.locations()) {
            let probs = softmax_channels(&forward_seg(p, cube).unwrap().0).unwrap();
            out.paste(location_offset(loc, n, grid.cube_dims()), &probs);
        }
        out
    }

    #[test]
    fn presets_validate() {
        for preset in Preset::ALL {
            let cfg = preset.apply(&tiny_cfg());
            cfg.validate().unwrap();
            assert_eq!(Preset::from_name(preset.name()), Some(preset));
        }
        assert_eq!(Preset::SupervisedOnly.apply(&tiny_cfg()).unlabeled_per_batch, 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_cfg();
        c.crop = Dims::cube(9);
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
        let mut c = tiny_cfg();
        c.ablation.within = false;
        assert!(c.validate().is_err(), "blending without within branch");
        let mut c = tiny_cfg();
        c.network.n_locations = 27;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.ema_decay = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let cfg = TrainConfig { max_iter: 0, ..tiny_cfg() };
        let st = run(&cfg, &tiny_data(1), |_, _| panic!("no steps expected")).unwrap();
        assert!(st == init_state(&cfg).unwrap());
    }

    fn ema_by_hand(teacher: &NetworkParams, student: &NetworkParams, decay: f32) -> Vec<Vec<f32>> {
        teacher
            .tensors()
            .iter()
            .zip(student.tensors())
            .map(|(t, s)| t.data.iter().zip(&s.data).map(|(&a, &b)| decay * a + (1.0 - decay) * b).collect())
            .collect()
    }

    fn data_of(p: &NetworkParams) -> Vec<Vec<f32>> {
        p.tensors().iter().map(|t| t.data.clone()).collect()
    }

    #[test]
    fn zero_lr_leaves_student_and_teacher() {
        let cfg = TrainConfig { base_lr: 0.0, ..tiny_cfg() };
        let data = tiny_data(2);
        let mut st = init_state(&cfg).unwrap();
        let before = st.clone();
        let batch = compose_batch(&data, &cfg, 0).unwrap();
        let rep = train_step(&mut st, &batch, &cfg).unwrap();
        assert!(rep.losses.total.is_finite());
        assert!(st.student == before.student, "student moved with lr 0");
        assert!(data_of(&st.teacher) == ema_by_hand(&before.teacher, &before.student, 0.99));
        assert_eq!(st.iteration, 1);
        assert!(st.momentum != before.momentum);
    }

    #[test]
    fn teacher_is_exact_ema_of_updated_student() {
        let cfg = TrainConfig { base_lr: 0.05, ..tiny_cfg() };
        let data = tiny_data(12);
        let mut st = init_state(&cfg).unwrap();
        for t in 0..3 {
            let teacher = st.teacher.clone();
            let batch = compose_batch(&data, &cfg, t).unwrap();
            train_step(&mut st, &batch, &cfg).unwrap();
            assert!(data_of(&st.teacher) == ema_by_hand(&teacher, &st.student, 0.99));
        }
    }

    #[test]
    fn teacher_moves_only_through_ema() {
        let cfg = TrainConfig { ema_decay: 1.0, base_lr: 0.05, ..tiny_cfg() };
        let data = tiny_data(3);
        let mut st = init_state(&cfg).unwrap();
        let teacher = st.teacher.clone();
        for t in 0..3 {
            let batch = compose_batch(&data, &cfg, t).unwrap();
            train_step(&mut st, &batch, &cfg).unwrap();
        }
        assert!(st.teacher == teacher);
        assert!(st.student != teacher);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny_cfg();
        let data = tiny_data(4);
        let mut a = Vec::new();
        let sa = run(&cfg, &data, |r, _| {
            a.push(r.clone());
            Ok(())
        })
        .unwrap();
        let mut b = Vec::new();
        let sb = run(&cfg, &data, |r, _| {
            b.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(a, b);
        assert!(sa == sb);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = tiny_cfg();
        let data = tiny_data(5);
        let full = run(&cfg, &data, |_, _| Ok(())).unwrap();
        let half = run_until(&cfg, &data, None, 4, |_, _| Ok(())).unwrap();
        assert_eq!(half.iteration, 4);
        let resumed = run_until(&cfg, &data, Some(half), cfg.max_iter, |_, _| Ok(())).unwrap();
        assert!(resumed == full);
    }

    #[test]
    fn teacher_mode_targets_are_teacher_argmax() {
        let cfg = Preset::CrossInLoc.apply(&tiny_cfg());
        let data = tiny_data(6);
        let mut st = init_state(&cfg).unwrap();
        // A teacher that differs from the student.
        st.teacher = init_params(&cfg.network, &mut rng::from_seed(99)).unwrap();
        let batch = compose_batch(&data, &cfg, 0).unwrap();
        let out = compute_step(&st, &batch, &cfg).unwrap();
        for (item, target) in batch.iter().filter(|b| b.labels.is_none()).zip(&out.unlabeled_targets) {
            assert_eq!(target, &teacher_pseudo(&st.teacher, &item.volume).unwrap().1);
        }
    }

    #[test]
    fn blend_targets_match_hand_built() {
        let cfg = tiny_cfg();
        let data = tiny_data(7);
        let mut st = init_state(&cfg).unwrap();
        st.teacher = init_params(&cfg.network, &mut rng::from_seed(98)).unwrap();
        st.histogram = ClassHistogram::from_window(2, cfg.histogram_window, vec![vec![300, 100]]).unwrap();
        let batch = compose_batch(&data, &cfg, 0).unwrap();
        let out = compute_step(&st, &batch, &cfg).unwrap();

        let unl: Vec<&BatchItem> = batch.iter().filter(|b| b.labels.is_none()).collect();
        let teach: Vec<_> = unl.iter().map(|b| teacher_pseudo(&st.teacher, &b.volume).unwrap()).collect();
        let mut h = st.histogram.clone();
        let mut sum = vec![0u64; 2];
        for (_, y) in &teach {
            sum[0] += y.class_counts()[1];
            sum[1] += y.class_counts()[2];
        }
        h.push(sum).unwrap();
        assert_eq!(out.histogram, h);
        for ((item, (pt, yt)), target) in unl.iter().zip(&teach).zip(&out.unlabeled_targets) {
            let pin = reference_p_in(&st.student, &item.volume, cfg.n_cubes, 3);
            let w = weight_map(yt, &h, false).unwrap();
            assert_eq!(target, &refined_label(&blend(pt, &pin, &w).unwrap()).unwrap());
        }
    }

    #[test]
    fn supervised_only_ignores_unlabeled_terms() {
        let cfg = Preset::SupervisedOnly.apply(&tiny_cfg());
        let data = tiny_data(8);
        let st = init_state(&cfg).unwrap();
        let batch = compose_batch(&data, &cfg, 0).unwrap();
        assert!(batch.iter().all(|b| b.labels.is_some()));
        let out = compute_step(&st, &batch, &cfg).unwrap();
        let l = out.losses;
        assert_eq!((l.l_in_sup, l.l_cross_in_unsup, l.l_cls_sup, l.l_cls_unsup), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(l.total, l.l_cross_sup);
    }

    fn directional_check(cfg: &TrainConfig, seed: u64) {
        let data = tiny_data(seed);
        let mut st = init_state(cfg).unwrap();
        st.iteration = 5;
        if cfg.ablation.sup_mode == SupMode::Blend {
            // Background-only teacher keeps Ω ≡ 0, so the blended targets do
            // not move with the student.
            st.teacher.tensor_mut("head.b").unwrap().data[0] = 100.0;
        }
        let batch = compose_batch(&data, cfg, 5).unwrap();
        let out = compute_step(&st, &batch, cfg).unwrap();
        // Probe along the normalized gradient: the slope there is |g|.
        let norm = out.grads.tensors.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        let dir: Vec<Vec<f32>> =
            out.grads.tensors.iter().map(|g| g.iter().map(|&v| (v as f64 / norm) as f32).collect()).collect();
        let analytic = norm;
        let eval = |h: f32| {
            let mut s = st.clone();
            for (t, d) in s.student.tensors_mut().iter_mut().zip(&dir) {
                for (v, &dv) in t.data.iter_mut().zip(d) {
                    *v += h * dv;
                }
            }
            compute_step(&s, &batch, cfg).unwrap().losses.total
        };
        let h = 1e-3;
        let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
        let rel = (numeric - analytic).abs() / analytic;
        assert!(rel < 0.05, "{:?}: analytic {analytic} numeric {numeric}", cfg.ablation);
    }

    #[test]
    fn composite_gradient_matches_finite_difference() {
        let base = TrainConfig { ema_decay: 0.5, ..tiny_cfg() };
        for (k, preset) in
            [Preset::MeanTeacher, Preset::Cross, Preset::CrossInLoc, Preset::Full].into_iter().enumerate()
        {
            directional_check(&preset.apply(&base), 10 + k as u64);
        }
        let mut scramble = Preset::CrossLoc.apply(&base);
        scramble.ablation.scramble = true;
        scramble.ablation.mix_scope = MixScope::U;
        directional_check(&scramble, 20);
    }

    #[test]
    fn baselines_and_mutual_run() {
        let base = tiny_cfg();
        let mut cfgs = Vec::new();
        for aug in [
            BaselineAug::CutMix { size: Dims::cube(4) },
            BaselineAug::CutOut { size: Dims::cube(4) },
            BaselineAug::MixUp { lambda: None },
        ] {
            let mut c = Preset::MeanTeacher.apply(&base);
            c.ablation.cross = true;
            c.ablation.baseline = Some(aug);
            cfgs.push(c);
        }
        let mut c = base.clone();
        c.ablation.sup_mode = SupMode::Mutual;
        cfgs.push(c);
        for c in cfgs {
            let st = run(&TrainConfig { max_iter: 2, ..c }, &tiny_data(9), |r, _| {
                assert!(r.losses.total.is_finite());
                Ok(())
            })
            .unwrap();
            assert_eq!(st.iteration, 2);
        }
    }

    #[test]
    fn mixup_fixed_lambda_gradient() {
        let mut c = Preset::MeanTeacher.apply(&tiny_cfg());
        c.ablation.cross = true;
        c.ablation.baseline = Some(BaselineAug::MixUp { lambda: Some(0.3) });
        directional_check(&c, 30);
    }
}
