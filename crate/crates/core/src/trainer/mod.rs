//! Supervised warm-up, self-training stages on labeled plus machine-annotated
//! pairs, and the iterative teacher-promotion loop.

mod optim;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotator::{annotate_raw, PseudoLabel};
use crate::augment::{augment_pair, sample_augmentations, AugmentDraws, AugmentPreset, PairLabel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{predict_pairs, raw_features, split_pairs, Frame, PckNorm};
use crate::image::Image;
use crate::manifest::{PairEntry, Split};
use crate::matcher::{
    extract_raw, loss_and_grad_raw, DescriptorConfig, EndpointLoss, FilterBank, LossGrad, MatcherParams, RawFeatures, SparseSupervision, Supervision,
    DEFAULT_TEMPERATURE, RAW_DIM,
};
use crate::pairs::{labeled_pairs, sample_unlabeled_batch, PairRef, PairSet};
use crate::rng::SeedKey;

pub use optim::{clip_norm, cosine_lr, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    Off,
    #[default]
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    /// Continue from the teacher's parameters.
    #[default]
    Teacher,
    /// Restart from the initial projection.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs_per_iteration: usize,
    pub num_iterations: usize,
    pub steps_per_epoch: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Unlabeled pairs drawn per class for each generation's pool.
    pub unlabeled_per_class: usize,
    /// Redraw and re-annotate the unlabeled pool at every epoch instead of
    /// once per teacher.
    pub refresh_labels_every_epoch: bool,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub cosine_decay: bool,
    pub out_dim: usize,
    pub temperature: f64,
    pub stride: usize,
    pub window: usize,
    pub filter_bank: FilterBank,
    pub endpoint_loss: EndpointLoss,
    pub student_init: StudentInit,
    /// Augmentation preset per generation; the last entry repeats. Labeled
    /// pairs always use the first entry.
    pub presets: Vec<PresetName>,
    pub weak: AugmentPreset,
    pub strong: AugmentPreset,
    pub seed: u64,
    pub use_unlabeled: bool,
    pub use_augmentation_noise: bool,
    pub use_iterative: bool,
    pub val_alpha: f64,
    pub val_norm: PckNorm,
    /// Validation period in epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            tau: 0.7,
            learning_rate: 0.05,
            epochs_per_iteration: 50,
            num_iterations: 3,
            steps_per_epoch: 2,
            labeled_batch: 8,
            unlabeled_batch: 8,
            unlabeled_per_class: 24,
            refresh_labels_every_epoch: false,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            grad_clip: 0.0,
            cosine_decay: true,
            out_dim: RAW_DIM,
            temperature: DEFAULT_TEMPERATURE,
            stride: 4,
            window: 8,
            filter_bank: FilterBank::Basic,
            endpoint_loss: EndpointLoss::Squared,
            student_init: StudentInit::Teacher,
            presets: vec![PresetName::Weak, PresetName::Strong],
            weak: AugmentPreset::weak(),
            strong: AugmentPreset::strong(),
            seed: 0,
            use_unlabeled: true,
            use_augmentation_noise: true,
            use_iterative: true,
            val_alpha: 0.1,
            val_norm: PckNorm::Bbox,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// The recipe used for the synthetic benchmark experiments: defaults plus
    /// the grid filter bank and the Charbonnier endpoint loss.
    pub fn benchmark() -> Self {
        TrainConfig { filter_bank: FilterBank::Grid, endpoint_loss: EndpointLoss::Charbonnier, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.epochs_per_iteration == 0 || self.num_iterations == 0 || self.steps_per_epoch == 0 {
            return bad("epochs_per_iteration, num_iterations and steps_per_epoch must be at least 1".into());
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.unlabeled_per_class == 0 {
            return bad("batch sizes and unlabeled_per_class must be at least 1".into());
        }
        if self.out_dim == 0 || !(self.temperature > 0.0) || self.stride == 0 || self.window == 0 {
            return bad("out_dim, temperature, stride and window must be positive".into());
        }
        if !(self.val_alpha > 0.0 && self.val_alpha <= 1.0) {
            return bad(format!("val_alpha must lie in (0, 1], got {}", self.val_alpha));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.presets.is_empty() {
            return bad("presets must name at least one augmentation preset".into());
        }
        self.weak.validate()?;
        self.strong.validate()
    }

    pub fn descriptor(&self) -> DescriptorConfig {
        DescriptorConfig { stride: self.stride, window: self.window, bank: self.filter_bank }
    }

    /// Identity-like initial projection: identity on the leading block,
    /// zero elsewhere.
    pub fn initial_params(&self) -> MatcherParams {
        let in_dim = self.descriptor().raw_dim();
        let mut projection = vec![0.0; in_dim * self.out_dim];
        for i in 0..in_dim.min(self.out_dim) {
            projection[i * self.out_dim + i] = 1.0;
        }
        MatcherParams {
            in_dim,
            out_dim: self.out_dim,
            projection,
            temperature: self.temperature,
            descriptor: self.descriptor(),
        }
    }

    fn preset(&self, name: PresetName) -> AugmentPreset {
        match name {
            PresetName::Off => AugmentPreset::off(),
            PresetName::Weak => self.weak.clone(),
            PresetName::Strong => self.strong.clone(),
        }
    }

    fn labeled_preset(&self) -> AugmentPreset {
        self.preset(self.presets[0])
    }

    fn unlabeled_preset(&self, generation: u32) -> AugmentPreset {
        if !self.use_augmentation_noise {
            return self.labeled_preset();
        }
        let i = (generation as usize).min(self.presets.len() - 1);
        self.preset(self.presets[i])
    }
}

/// The component ablations, each a set of toggle values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoIterative,
    NoNoise,
    NoUnpaired,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoIterative, Ablation::NoNoise, Ablation::NoUnpaired];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoIterative => "no_iterative",
            Ablation::NoNoise => "no_noise",
            Ablation::NoUnpaired => "no_unpaired",
        }
    }

    /// Removals are cumulative: each row drops one more component.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoIterative => c.use_iterative = false,
            Ablation::NoNoise => {
                c.use_iterative = false;
                c.use_augmentation_noise = false;
            }
            Ablation::NoUnpaired => {
                c.use_iterative = false;
                c.use_augmentation_noise = false;
                c.use_unlabeled = false;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MatcherParams,
    pub generation: u32,
    pub epoch: usize,
    pub step: usize,
    pub val_pck: f64,
    /// Seed-key state of the stream that produced the next step.
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn initial(params: MatcherParams, seed: u64) -> Self {
        Checkpoint { params, generation: 0, epoch: 0, step: 0, val_pck: 0.0, rng_state: SeedKey::new(seed).value() }
    }

    /// SHA-256 over the parameter bytes.
    pub fn params_hash(&self) -> String {
        params_hash(&self.params)
    }
}

pub fn params_hash(p: &MatcherParams) -> String {
    let mut h = Sha256::new();
    h.update((p.in_dim as u64).to_le_bytes());
    h.update((p.out_dim as u64).to_le_bytes());
    for v in &p.projection {
        h.update(v.to_le_bytes());
    }
    h.update(p.temperature.to_le_bytes());
    h.update((p.descriptor.stride as u64).to_le_bytes());
    h.update((p.descriptor.window as u64).to_le_bytes());
    h.update(p.descriptor.bank.code().to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub generation: u32,
    pub l_s: f64,
    pub l_u: f64,
    pub total: f64,
    pub retained_fraction: f64,
    pub skipped: usize,
    pub val_pck: Option<f64>,
}

pub fn write_metrics_csv(rows: &[MetricRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// Result of one stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<MetricRow>,
    /// Items skipped because supervision was fully masked.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint of each generation.
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricRow>,
    pub skipped: usize,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("at least one generation")
    }

    pub fn val_series(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.val_pck).collect()
    }
}

struct LabeledItem {
    id: String,
    src: String,
    tgt: String,
    sup: SparseSupervision,
}

struct PoolItem {
    id: String,
    src: String,
    tgt: String,
    label: PseudoLabel,
}

/// Everything a stage needs that does not change between steps.
pub struct TrainContext<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    labeled: Vec<LabeledItem>,
    train_raw: HashMap<String, RawFeatures>,
    val_pairs: Vec<&'a PairEntry>,
    val_raw: HashMap<String, RawFeatures>,
}

impl<'a> TrainContext<'a> {
    pub fn new(dataset: &'a Dataset, labeled: &PairSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &dataset.manifest;
        let by_id: HashMap<String, &PairEntry> = m.pairs.iter().map(|p| (p.id(), p)).collect();
        let mut items = Vec::with_capacity(labeled.len());
        for p in labeled.iter() {
            let e = by_id.get(&p.id()).ok_or_else(|| Error::UnknownPair(p.id()))?;
            items.push(LabeledItem {
                id: p.id(),
                src: p.src.clone(),
                tgt: p.tgt.clone(),
                sup: SparseSupervision::new(
                    e.keypoints.iter().map(|k| k.src_point()).collect(),
                    e.keypoints.iter().map(|k| k.tgt_point()).collect(),
                ),
            });
        }
        let params = cfg.initial_params();
        let train_ids = m.images.iter().filter(|e| e.split == Split::Train).map(|e| e.id.as_str());
        let train_raw = raw_features(dataset, train_ids, &params)?;
        let val_pairs = split_pairs(m, Split::Val);
        let val_raw = raw_features(dataset, val_pairs.iter().flat_map(|p| [p.src.as_str(), p.tgt.as_str()]), &params)?;
        Ok(TrainContext { dataset, cfg: cfg.clone(), labeled: items, train_raw, val_pairs, val_raw })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// PCK on the validation split at the configured tolerance; 0 when the
    /// split has no annotated pairs.
    pub fn validate(&self, params: &MatcherParams) -> Result<f64> {
        if self.val_pairs.is_empty() {
            return Ok(0.0);
        }
        let preds = predict_pairs(params, &self.val_pairs, &self.val_raw)?;
        let idx = self.dataset.manifest.image_index();
        let (mut ok, mut total) = (0usize, 0usize);
        for p in &self.val_pairs {
            let frame = Frame::of(&self.dataset.manifest.images[idx[p.src.as_str()]], self.cfg.val_norm);
            let margin = frame.margin(self.cfg.val_alpha);
            for k in &p.keypoints {
                let q = preds.get(&p.id(), k.id).expect("predicted");
                ok += (q.dist(&k.src_point()) <= margin) as usize;
                total += 1;
            }
        }
        Ok(ok as f64 / total.max(1) as f64)
    }

    fn raw_of(&self, img: &Image, id: &str, photo_applied: bool) -> Result<RawFeatures> {
        match (photo_applied, self.train_raw.get(id)) {
            (false, Some(r)) => Ok(r.clone()),
            _ => extract_raw(img, &self.cfg.descriptor()),
        }
    }

    fn item_loss(
        &self,
        params: &MatcherParams,
        src: &str,
        tgt: &str,
        label: &PairLabel,
        draws: &AugmentDraws,
        weight: f64,
    ) -> Result<(Option<LossGrad>, f64)> {
        let (i_s, i_t) = (self.dataset.image(src)?, self.dataset.image(tgt)?);
        let geometric = draws.geo_tgt.as_affine().is_none_or(|a| a.m != crate::geometry::Affine::IDENTITY.m);
        let (a_s, a_t, label) = augment_pair(i_s, i_t, label, draws)?;
        let rs = self.raw_of(&a_s, src, draws.photo_src.applied)?;
        let rt = self.raw_of(&a_t, tgt, draws.photo_tgt.applied || geometric)?;
        let (sup, retained) = match &label {
            PairLabel::Sparse(s) => (Supervision::Sparse(s), f64::NAN),
            PairLabel::Dense(l) => (Supervision::Dense(l), l.retained_fraction()),
        };
        match loss_and_grad_raw(params, &rs, &rt, sup, weight, self.cfg.endpoint_loss) {
            Ok(lg) => Ok((Some(lg), retained)),
            Err(Error::EmptySupervision) => Ok((None, retained)),
            Err(e) => Err(e),
        }
    }

    fn annotate_pool(&self, teacher: &Checkpoint, generation: u32, epoch: usize) -> Result<Vec<PoolItem>> {
        let iteration = if epoch == 0 { generation as u64 } else { SeedKey::new(generation as u64).with(epoch as u64).value() };
        let set = sample_unlabeled_batch(&self.dataset.manifest, self.cfg.unlabeled_per_class, self.cfg.seed, iteration)?;
        set.pairs
            .par_iter()
            .map(|p: &PairRef| {
                let get = |id: &str| self.train_raw.get(id).ok_or_else(|| Error::UnknownImage(id.to_string()));
                let label = annotate_raw(&teacher.params, get(&p.src)?, get(&p.tgt)?, self.cfg.tau, teacher.generation, &p.id())?;
                Ok(PoolItem { id: p.id(), src: p.src.clone(), tgt: p.tgt.clone(), label })
            })
            .collect()
    }

    /// Runs one stage from `init`. With a teacher, unlabeled pairs are
    /// annotated once and mixed into every step.
    fn run_stage(&self, init: &MatcherParams, teacher: Option<&Checkpoint>, generation: u32, epochs: usize) -> Result<StageOutcome> {
        let cfg = &self.cfg;
        if self.labeled.is_empty() && teacher.is_none() {
            return Err(Error::EmptyPairSet);
        }
        let teacher_hash = teacher.map(Checkpoint::params_hash);
        let mut pool = match teacher {
            Some(t) if cfg.use_unlabeled => self.annotate_pool(t, generation, 0)?,
            _ => Vec::new(),
        };
        if teacher.is_some() && cfg.use_unlabeled {
            let any_cell = pool.iter().any(|p| p.label.retained() > 0);
            if !any_cell && (self.labeled.is_empty() || cfg.lambda == 0.0) {
                return Err(Error::EmptySupervision);
            }
        }
        let root = SeedKey::new(cfg.seed);
        let labeled_preset = cfg.labeled_preset();
        let unlabeled_preset = cfg.unlabeled_preset(generation);
        let total_steps = epochs * cfg.steps_per_epoch;
        let mut params = init.clone();
        let mut opt = Optimizer::new(cfg.optimizer, params.projection.len(), cfg.momentum);
        let mut metrics = Vec::with_capacity(total_steps);
        let mut skipped = 0usize;
        let mut best: Option<Checkpoint> = None;
        let mut last = Checkpoint::initial(params.clone(), cfg.seed);

        for step in 0..total_steps {
            let epoch = step / cfg.steps_per_epoch;
            if let Some(t) = teacher {
                if cfg.use_unlabeled && cfg.refresh_labels_every_epoch && epoch > 0 && step % cfg.steps_per_epoch == 0 {
                    pool = self.annotate_pool(t, generation, epoch)?;
                }
            }
            // Labeled stream does not depend on the generation, so a stage
            // without unlabeled data replays supervised training exactly.
            let lkey = root.with_str("labeled").with(step as u64);
            let lidx: Vec<usize> = if self.labeled.is_empty() {
                Vec::new()
            } else {
                let n = cfg.labeled_batch.min(self.labeled.len());
                index::sample(&mut lkey.rng(), self.labeled.len(), n).into_vec()
            };
            let ukey = root.with_str("unlabeled").with(generation as u64).with(step as u64);
            let uidx: Vec<usize> = if pool.is_empty() {
                Vec::new()
            } else {
                let n = cfg.unlabeled_batch.min(pool.len());
                index::sample(&mut ukey.rng(), pool.len(), n).into_vec()
            };

            let grid_of = |id: &str| self.dataset.image(id).map(Image::grid);
            let lres: Vec<(Option<LossGrad>, f64)> = lidx
                .par_iter()
                .map(|&i| {
                    let it = &self.labeled[i];
                    let mut rng = lkey.with_str(&it.id).rng();
                    let d = sample_augmentations(&labeled_preset.photometric, &labeled_preset.geometric, grid_of(&it.tgt)?, &mut rng)?;
                    self.item_loss(&params, &it.src, &it.tgt, &PairLabel::Sparse(it.sup.clone()), &d, 1.0)
                })
                .collect::<Result<_>>()?;
            let ures: Vec<(Option<LossGrad>, f64)> = uidx
                .par_iter()
                .map(|&i| {
                    let it = &pool[i];
                    let mut rng = ukey.with_str(&it.id).rng();
                    let d = sample_augmentations(&unlabeled_preset.photometric, &unlabeled_preset.geometric, grid_of(&it.tgt)?, &mut rng)?;
                    self.item_loss(&params, &it.src, &it.tgt, &PairLabel::Dense(it.label.clone()), &d, 1.0)
                })
                .collect::<Result<_>>()?;

            let n = params.projection.len();
            let mean = |res: &[(Option<LossGrad>, f64)], skipped: &mut usize| -> (f64, Vec<f64>) {
                let mut loss = 0.0;
                let mut grad = vec![0.0; n];
                let mut k = 0usize;
                for (lg, _) in res {
                    match lg {
                        Some(lg) => {
                            loss += lg.loss;
                            for (g, x) in grad.iter_mut().zip(&lg.grad) {
                                *g += x;
                            }
                            k += 1;
                        }
                        None => *skipped += 1,
                    }
                }
                if k > 0 {
                    loss /= k as f64;
                    grad.iter_mut().for_each(|g| *g /= k as f64);
                }
                (loss, grad)
            };
            let (l_s, g_s) = mean(&lres, &mut skipped);
            let (l_u, g_u) = mean(&ures, &mut skipped);
            let total = l_u + cfg.lambda * l_s;
            let mut grad: Vec<f64> = g_u.iter().zip(&g_s).map(|(u, s)| u + cfg.lambda * s).collect();
            clip_norm(&mut grad, cfg.grad_clip);
            let lr = if cfg.cosine_decay { cosine_lr(cfg.learning_rate, step, total_steps) } else { cfg.learning_rate };
            opt.step(&mut params.projection, &grad, lr);

            let retained: Vec<f64> = ures.iter().map(|r| r.1).collect();
            let retained_fraction =
                if retained.is_empty() { 0.0 } else { retained.iter().sum::<f64>() / retained.len() as f64 };
            let end_of_epoch = (step + 1) % cfg.steps_per_epoch == 0;
            let val_pck = if end_of_epoch && ((epoch + 1) % cfg.eval_every == 0 || step + 1 == total_steps) {
                Some(self.validate(&params)?)
            } else {
                None
            };
            let ck = Checkpoint {
                params: params.clone(),
                generation,
                epoch: epoch + 1,
                step: step + 1,
                val_pck: val_pck.unwrap_or(f64::NAN),
                rng_state: root.with_str("labeled").with(step as u64 + 1).value(),
            };
            if let Some(v) = val_pck {
                if best.as_ref().is_none_or(|b| v > b.val_pck) {
                    best = Some(ck.clone());
                }
            }
            last = ck;
            metrics.push(MetricRow { step, epoch, generation, l_s, l_u, total, retained_fraction, skipped, val_pck });
        }
        if let (Some(t), Some(h)) = (teacher, teacher_hash) {
            debug_assert_eq!(t.params_hash(), h);
        }
        let best = match best {
            Some(b) => b,
            None => {
                let v = self.validate(&params)?;
                Checkpoint { val_pck: v, ..last.clone() }
            }
        };
        Ok(StageOutcome { best, last, metrics, skipped })
    }

    pub fn train_supervised(&self) -> Result<StageOutcome> {
        if self.labeled.is_empty() {
            return Err(Error::EmptyPairSet);
        }
        self.run_stage(&self.cfg.initial_params(), None, 0, self.cfg.epochs_per_iteration)
    }

    /// One self-training stage of generation `generation` under a frozen teacher.
    pub fn self_train_stage(&self, teacher: &Checkpoint, generation: u32, epochs: usize) -> Result<StageOutcome> {
        let init = match self.cfg.student_init {
            StudentInit::Teacher => teacher.params.clone(),
            StudentInit::Fresh => self.cfg.initial_params(),
        };
        self.run_stage(&init, Some(teacher), generation, epochs)
    }

    pub fn iterative_train(&self) -> Result<TrainOutcome> {
        let cfg = &self.cfg;
        let first = self.train_supervised()?;
        let mut checkpoints = vec![first.best.clone()];
        let mut metrics = first.metrics;
        let mut skipped = first.skipped;
        if cfg.num_iterations > 1 {
            let schedule: Vec<(u32, usize)> = if cfg.use_iterative {
                (1..cfg.num_iterations as u32).map(|g| (g, cfg.epochs_per_iteration)).collect()
            } else {
                vec![(1, cfg.epochs_per_iteration * (cfg.num_iterations - 1))]
            };
            for (g, epochs) in schedule {
                let teacher = checkpoints.last().expect("generation 0").clone();
                let out = self.self_train_stage(&teacher, g, epochs)?;
                metrics.extend(out.metrics);
                skipped += out.skipped;
                checkpoints.push(out.best);
            }
        }
        Ok(TrainOutcome { checkpoints, metrics, skipped })
    }
}

pub fn train_supervised(s: &PairSet, dataset: &Dataset, cfg: &TrainConfig) -> Result<StageOutcome> {
    if s.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    TrainContext::new(dataset, s, cfg)?.train_supervised()
}

pub fn self_train_stage(
    teacher: &Checkpoint,
    s: &PairSet,
    dataset: &Dataset,
    cfg: &TrainConfig,
    generation: u32,
) -> Result<StageOutcome> {
    TrainContext::new(dataset, s, cfg)?.self_train_stage(teacher, generation, cfg.epochs_per_iteration)
}

/// Generation 0 is supervised; each later generation is taught by the best
/// checkpoint of the previous one.
pub fn iterative_train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let s = labeled_pairs(&dataset.manifest);
    TrainContext::new(dataset, &s, cfg)?.iterative_train()
}

/// One gradient-check item.
pub struct GradItem<'a> {
    pub src: &'a RawFeatures,
    pub tgt: &'a RawFeatures,
    pub supervision: Supervision<'a>,
    pub distance: EndpointLoss,
}

fn batch_loss_grad(params: &MatcherParams, batch: &[GradItem<'_>]) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.projection.len()];
    for it in batch {
        let lg = loss_and_grad_raw(params, it.src, it.tgt, it.supervision, 1.0, it.distance)?;
        loss += lg.loss;
        grad.iter_mut().zip(&lg.grad).for_each(|(g, x)| *g += x);
    }
    let n = batch.len().max(1) as f64;
    Ok((loss / n, grad.into_iter().map(|g| g / n).collect()))
}

/// Largest relative discrepancy between the analytic gradient and central
/// differences. Entry pairs that differ by at most `1e-8` count as equal.
/// At most `max_entries` coordinates are probed (a seeded subset, never
/// fewer than 50, when the projection is larger).
pub fn grad_check(params: &MatcherParams, batch: &[GradItem<'_>], epsilon: f64, max_entries: usize, seed: u64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, analytic) = batch_loss_grad(params, batch)?;
    let n = params.projection.len();
    let k = max_entries.max(50).min(n);
    let coords: Vec<usize> = if k == n {
        (0..n).collect()
    } else {
        let mut v = index::sample(&mut SeedKey::new(seed).with_str("grad-check").rng(), n, k).into_vec();
        v.sort_unstable();
        v
    };
    let mut worst: f64 = 0.0;
    for j in coords {
        let mut p = params.clone();
        p.projection[j] += epsilon;
        let (lp, _) = batch_loss_grad(&p, batch)?;
        p.projection[j] -= 2.0 * epsilon;
        let (lm, _) = batch_loss_grad(&p, batch)?;
        let numeric = (lp - lm) / (2.0 * epsilon);
        let diff = (numeric - analytic[j]).abs();
        if diff > 1e-8 {
            worst = worst.max(diff / numeric.abs().max(analytic[j].abs()));
        }
    }
    Ok(worst)
}

pub fn save_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(rows, std::io::BufWriter::new(f))
}
