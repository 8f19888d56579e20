//! Teacher training, pseudo-labelling, gaze-guided student adaptation and the
//! multi-seed ablation / sweep drivers built on them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{self, clone_for_student, init_params, ModelParams};
use crate::checkpoint::{encode_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{DomainDataset, DomainRole, Image, SegMask};
use crate::error::{Error, Result};
use crate::eval::{AblationMode, MetricReport};
use crate::gaa::{self, GaaParams};
use crate::gaze::{rasterize_heatmap, regularize_to_weights, GazeHeatmap, WeightMask};
use crate::losses::{self, total_loss, LossComponents, LossWeights};
use crate::nn::FeatureMap;
use crate::optim::RmsProp;
use crate::scalar::Scalar;
use crate::synth::generate_domain;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const GAA_INIT_STREAM: u64 = 0x4741_4131;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_gaa: f64,
    pub l_gb: f64,
    pub l_dice: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl EpochLoss {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_gaa: self.l_gaa,
            l_gb: self.l_gb,
            l_dice: self.l_dice,
            l_ce: self.l_ce,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub data_hashes: BTreeMap<String, String>,
    pub loss_curve: Vec<EpochLoss>,
    pub wall_clock_s: f64,
    pub checkpoint: Option<String>,
    pub checkpoint_hash: String,
    pub teacher_hash: Option<String>,
    pub pseudo_label_hash: Option<String>,
    /// Target items whose pseudo-label came out empty.
    pub empty_pseudo_labels: Vec<String>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new(kind: &str, cfg: &RunConfig) -> Self {
        RunManifest {
            kind: kind.into(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            data_hashes: BTreeMap::new(),
            loss_curve: Vec::new(),
            wall_clock_s: 0.0,
            checkpoint: None,
            checkpoint_hash: String::new(),
            teacher_hash: None,
            pseudo_label_hash: None,
            empty_pseudo_labels: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,l_gaa,l_gb,l_dice,l_ce,total\n");
        for e in &self.loss_curve {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                e.epoch, e.l_gaa, e.l_gb, e.l_dice, e.l_ce, e.total
            ));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>_loss.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self).expect("manifest serializes")).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}_loss.csv"));
        fs::write(&csv, self.loss_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn checkpoint_hash<T: Scalar>(params: &ModelParams<T>, aux: &[crate::backbone::NamedTensor<T>]) -> String {
    sha256_hex(&encode_checkpoint(&Checkpoint {
        params: params.clone(),
        aux: aux.to_vec(),
    }))
}

pub fn pseudo_label_hash(ids: &[String], masks: &[SegMask]) -> String {
    let mut h = Sha256::new();
    for (id, m) in ids.iter().zip(masks) {
        h.update(id.as_bytes());
        h.update((m.height() as u64).to_le_bytes());
        h.update((m.width() as u64).to_le_bytes());
        h.update(m.pixels());
    }
    hex::encode(h.finalize())
}

/// Running sums of per-item loss components over an epoch.
#[derive(Default)]
struct EpochAccumulator {
    sum: LossComponents,
    total: f64,
    count: usize,
}

impl EpochAccumulator {
    fn add(&mut self, c: &LossComponents, total: f64) {
        self.sum.l_gaa += c.l_gaa;
        self.sum.l_gb += c.l_gb;
        self.sum.l_dice += c.l_dice;
        self.sum.l_ce += c.l_ce;
        self.total += total;
        self.count += 1;
    }

    fn finish(&self, epoch: usize, w: &LossWeights) -> Result<EpochLoss> {
        let n = self.count as f64;
        let e = EpochLoss {
            epoch,
            l_gaa: self.sum.l_gaa / n,
            l_gb: self.sum.l_gb / n,
            l_dice: self.sum.l_dice / n,
            l_ce: self.sum.l_ce / n,
            total: self.total / n,
        };
        let weighted = total_loss(&e.components(), w)?;
        if (weighted - e.total).abs() > 1e-6 {
            return Err(Error::NonFiniteLoss(format!(
                "epoch {epoch}: logged total {} differs from weighted components {weighted}",
                e.total
            )));
        }
        Ok(e)
    }
}

/// Trailing window-5 mean of the total loss; any rise is a warning.
fn smoothed_monotone_warnings(curve: &[EpochLoss]) -> Vec<String> {
    let totals: Vec<f64> = curve.iter().map(|e| e.total).collect();
    let smooth: Vec<f64> = (0..totals.len())
        .map(|i| {
            let lo = i.saturating_sub(4);
            totals[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
        })
        .collect();
    smooth
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] + 1e-12)
        .map(|(i, w)| format!("smoothed training loss rose at epoch {}: {:.6} -> {:.6}", i + 1, w[0], w[1]))
        .collect()
}

fn check_finite(c: &LossComponents, epoch: usize, batch: usize, id: &str) -> Result<()> {
    for (name, v) in [("l_gaa", c.l_gaa), ("l_gb", c.l_gb), ("l_dice", c.l_dice), ("l_ce", c.l_ce)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("{name} = {v} at epoch {epoch}, batch {batch}, item {id}")));
        }
    }
    Ok(())
}

fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn scale_in_place<T: Scalar>(v: &mut [T], s: T) {
    for x in v {
        *x *= s;
    }
}

fn add_scaled<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// Supervised Dice + BCE training of a fresh U-Net on labelled source items.
pub fn train_teacher<T: Scalar>(source: &DomainDataset<T>, cfg: &RunConfig) -> Result<(ModelParams<T>, RunManifest)> {
    cfg.validate()?;
    let w = LossWeights {
        lambda_gaa: 0.0,
        lambda_gb: 0.0,
        ..cfg.loss
    };
    w.validate()?;
    if source.role() != DomainRole::Source {
        return Err(Error::InvalidConfig("teacher training needs a labelled source dataset".into()));
    }
    let start = Instant::now();
    let mut manifest = RunManifest::new("teacher", cfg);
    manifest.data_hashes.insert("source".into(), source.content_hash());

    let mut params: ModelParams<T> = init_params(cfg.model.depth, cfg.model.base_channels, cfg.seed)?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let mut opt = RmsProp::new(cfg.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let (ld, lc) = (T::lit(w.lambda_dice), T::lit(w.lambda_ce));

    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccumulator::default();
        for (b, batch) in epoch_batches(source.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let mut grads = params.zero_grads();
            let inv = T::one() / T::lit(batch.len() as f64);
            for &i in &batch {
                let item = source.training_item(i);
                let label = item.label.ok_or_else(|| Error::IncompleteSourceRecord(item.id.to_string()))?;
                let out = backbone::forward_train(&params, item.image)?;
                let (dice, g_dice) = losses::dice_grad(&out.prediction, label)?;
                let (ce, g_ce) = losses::cross_entropy_grad(&out.prediction, label)?;
                let c = LossComponents {
                    l_dice: dice.as_f64(),
                    l_ce: ce.as_f64(),
                    ..LossComponents::default()
                };
                check_finite(&c, epoch, b, item.id)?;
                acc.add(&c, (ld * dice + lc * ce).as_f64());
                let mut dprob = vec![T::zero(); g_dice.len()];
                add_scaled(&mut dprob, &g_dice, ld * inv);
                add_scaled(&mut dprob, &g_ce, lc * inv);
                backbone::backward(&params, &out.cache, &dprob, None, &mut grads);
            }
            for (k, t) in params.tensors_mut().iter_mut().enumerate() {
                opt.step(k, &mut t.data, &grads[k]);
            }
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss(format!("parameters became non-finite at epoch {epoch}, batch {b}")));
            }
        }
        manifest.loss_curve.push(acc.finish(epoch, &w)?);
        params.epoch = epoch as u64 + 1;
    }
    manifest.warnings.extend(smoothed_monotone_warnings(&manifest.loss_curve));
    manifest.checkpoint_hash = checkpoint_hash(&params, &[]);
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((params, manifest))
}

pub fn predict<T: Scalar>(params: &ModelParams<T>, img: &Image<T>, threshold: f64) -> Result<SegMask> {
    Ok(backbone::forward(params, img)?.0.threshold(threshold))
}

/// Thresholded teacher predictions (`prob ≥ threshold`) for every item.
pub fn generate_pseudo_labels<T: Scalar>(teacher: &ModelParams<T>, target: &DomainDataset<T>, threshold: f64) -> Result<Vec<SegMask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    (0..target.len()).map(|i| predict(teacher, target.image(i), threshold)).collect()
}

/// Per-item inputs that do not depend on trainable weights.
pub struct AdaptItem<'a, T> {
    pub image: &'a Image<T>,
    pub pseudo: &'a SegMask,
    pub heatmap: &'a GazeHeatmap<T>,
    pub weights: &'a WeightMask<T>,
    /// Frozen teacher bottleneck `f_T`.
    pub teacher_features: &'a FeatureMap<T>,
}

/// Loss components and gradients of the weighted adaptation objective for
/// one item. Gradients are accumulated (times `scale`) into `student_grads`
/// and `gaa_grads`. Terms with a zero weight are evaluated for logging but
/// not differentiated.
pub fn adaptation_item_grad<T: Scalar>(
    student: &ModelParams<T>,
    gaa_params: &GaaParams<T>,
    item: &AdaptItem<'_, T>,
    w: &LossWeights,
    scale: T,
    student_grads: &mut [Vec<T>],
    gaa_grads: &mut [Vec<T>],
) -> Result<(LossComponents, f64)> {
    let out = backbone::forward_train(student, item.image)?;
    let (f_g, ext_cache) = gaa::extract_gaze_features_train(item.heatmap, gaa_params)?;
    let fused = gaa::cross_attention_fuse(&f_g, item.teacher_features)?;
    let align = gaa::gaa_alignment_grad(&fused, &out.bottleneck, gaa_params)?;
    let (gb, g_gb) = losses::gaze_balance_grad(&out.prediction, item.pseudo, item.weights)?;
    let (dice, g_dice) = losses::dice_grad(&out.prediction, item.pseudo)?;
    let (ce, g_ce) = losses::cross_entropy_grad(&out.prediction, item.pseudo)?;
    let c = LossComponents {
        l_gaa: align.loss.as_f64(),
        l_gb: gb.as_f64(),
        l_dice: dice.as_f64(),
        l_ce: ce.as_f64(),
    };
    let total = (T::lit(w.lambda_gaa) * align.loss + T::lit(w.lambda_gb) * gb + T::lit(w.lambda_dice) * dice + T::lit(w.lambda_ce) * ce).as_f64();

    let mut dprob = vec![T::zero(); g_gb.len()];
    for (lam, g) in [(w.lambda_gb, &g_gb), (w.lambda_dice, &g_dice), (w.lambda_ce, &g_ce)] {
        if lam != 0.0 {
            add_scaled(&mut dprob, g, T::lit(lam) * scale);
        }
    }
    let dbottleneck = if w.lambda_gaa != 0.0 {
        let s = T::lit(w.lambda_gaa) * scale;
        let n = gaa_grads.len();
        add_scaled(&mut gaa_grads[n - 2], &align.d_proj_weight, s);
        add_scaled(&mut gaa_grads[n - 1], &align.d_proj_bias, s);
        let mut d_att = align.d_attended.clone();
        scale_in_place(&mut d_att, s);
        let dq = gaa::attention_backward(&fused, &item.teacher_features.to_tokens(), &d_att);
        gaa::extractor_backward(gaa_params, &ext_cache, &dq, gaa_grads);
        let mut d = align.d_student;
        scale_in_place(&mut d.data, s);
        Some(d)
    } else {
        None
    };
    backbone::backward(student, &out.cache, &dprob, dbottleneck.as_ref(), student_grads);
    Ok((c, total))
}

/// Result of one adaptation run.
#[derive(Clone, Debug)]
pub struct Adapted<T> {
    pub student: ModelParams<T>,
    pub gaa: GaaParams<T>,
    pub manifest: RunManifest,
}

impl<T: Scalar> Adapted<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.student.clone(),
            aux: self.gaa.tensors().to_vec(),
        }
    }
}

/// Gaze-guided student adaptation against frozen pseudo-labels.
pub fn adapt_student<T: Scalar>(
    teacher: &ModelParams<T>,
    target: &DomainDataset<T>,
    pseudo: &[SegMask],
    cfg: &RunConfig,
) -> Result<Adapted<T>> {
    cfg.validate()?;
    if pseudo.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("{} pseudo-labels for {} target items", pseudo.len(), target.len())));
    }
    let start = Instant::now();
    let mut manifest = RunManifest::new("adapt", cfg);
    manifest.data_hashes.insert("target".into(), target.content_hash());
    let teacher_hash = checkpoint_hash(teacher, &[]);
    let ids: Vec<String> = (0..target.len()).map(|i| target.id(i).to_string()).collect();
    let pl_hash = pseudo_label_hash(&ids, pseudo);
    manifest.pseudo_label_hash = Some(pl_hash.clone());
    manifest.empty_pseudo_labels = ids.iter().zip(pseudo).filter(|(_, m)| m.is_empty()).map(|(id, _)| id.clone()).collect();

    // Everything that depends only on frozen inputs is computed once.
    let mut heatmaps = Vec::with_capacity(target.len());
    let mut weights = Vec::with_capacity(target.len());
    let mut f_t = Vec::with_capacity(target.len());
    for i in 0..target.len() {
        let item = target.training_item(i);
        let gaze = item.gaze.ok_or_else(|| Error::GazeRequired(item.id.to_string()))?;
        let (h, wd) = (item.image.height(), item.image.width());
        let hm: GazeHeatmap<T> = rasterize_heatmap(gaze, h, wd, cfg.gaze.sigma_frac * wd as f64)?;
        weights.push(regularize_to_weights(&hm, cfg.gaze.w_floor)?);
        heatmaps.push(hm);
        f_t.push(backbone::forward(teacher, item.image)?.1);
    }

    let mut student = clone_for_student(teacher);
    let mut gaa_params: GaaParams<T> = GaaParams::init(&cfg.model.extractor_widths(), cfg.seed ^ GAA_INIT_STREAM)?;
    let s_sizes: Vec<usize> = student.tensors().iter().map(|t| t.data.len()).collect();
    let g_sizes: Vec<usize> = gaa_params.tensors().iter().map(|t| t.data.len()).collect();
    let opt_cfg = cfg.optimizer.for_adaptation();
    let mut s_opt = RmsProp::new(opt_cfg, &s_sizes);
    let mut g_opt = RmsProp::new(opt_cfg, &g_sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);

    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccumulator::default();
        for (b, batch) in epoch_batches(target.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let mut s_grads = student.zero_grads();
            let mut g_grads = gaa_params.zero_grads();
            let inv = T::one() / T::lit(batch.len() as f64);
            for &i in &batch {
                let item = AdaptItem {
                    image: target.image(i),
                    pseudo: &pseudo[i],
                    heatmap: &heatmaps[i],
                    weights: &weights[i],
                    teacher_features: &f_t[i],
                };
                let (c, total) = adaptation_item_grad(&student, &gaa_params, &item, &cfg.loss, inv, &mut s_grads, &mut g_grads)?;
                check_finite(&c, epoch, b, target.id(i))?;
                acc.add(&c, total);
            }
            for (k, t) in student.tensors_mut().iter_mut().enumerate() {
                s_opt.step(k, &mut t.data, &s_grads[k]);
            }
            if cfg.loss.lambda_gaa != 0.0 {
                for (k, t) in gaa_params.tensors_mut().iter_mut().enumerate() {
                    g_opt.step(k, &mut t.data, &g_grads[k]);
                }
            }
            if !student.is_finite() {
                return Err(Error::NonFiniteLoss(format!("student became non-finite at epoch {epoch}, batch {b}")));
            }
        }
        manifest.loss_curve.push(acc.finish(epoch, &cfg.loss)?);
        student.epoch = epoch as u64 + 1;
    }

    if pseudo_label_hash(&ids, pseudo) != pl_hash {
        return Err(Error::Format("pseudo-labels changed during adaptation".into()));
    }
    let after = checkpoint_hash(teacher, &[]);
    if after != teacher_hash {
        return Err(Error::Format("teacher parameters changed during adaptation".into()));
    }
    manifest.teacher_hash = Some(teacher_hash);
    manifest.warnings.extend(smoothed_monotone_warnings(&manifest.loss_curve));
    manifest.checkpoint_hash = checkpoint_hash(&student, gaa_params.tensors());
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(Adapted {
        student,
        gaa: gaa_params,
        manifest,
    })
}

/// Scores `params` on every item of `ds` that carries a mask.
pub fn evaluate_model<T: Scalar>(params: &ModelParams<T>, ds: &DomainDataset<T>, threshold: f64, label: &str) -> Result<MetricReport> {
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..ds.len() {
        if let Some(gt) = ds.eval_mask(i) {
            ids.push(ds.id(i).to_string());
            preds.push(predict(params, ds.image(i), threshold)?);
            gts.push(gt.clone());
        }
    }
    if ids.is_empty() {
        return Err(Error::InvalidConfig(format!("no item of the {:?} dataset has an evaluation mask", ds.role())));
    }
    let mut report = MetricReport::evaluate(label, &ids, &preds, &gts)?;
    report.epoch = params.epoch;
    report.seed = params.seed;
    report.checkpoint_hash = Some(checkpoint_hash(params, &[]));
    Ok(report)
}

/// Index where the 80/20 split starts its held-out part.
pub fn split_point(n: usize) -> usize {
    (n * 4 / 5).clamp(1, n.saturating_sub(1).max(1))
}

/// Datasets for a multi-seed experiment: regenerated per seed, or fixed.
pub enum DataSource<'a, T> {
    Synthetic,
    Fixed {
        source: &'a DomainDataset<T>,
        target: &'a DomainDataset<T>,
    },
}

/// One seed's teacher plus splits and frozen pseudo-labels.
pub struct SeedContext<T> {
    pub cfg: RunConfig,
    pub teacher: ModelParams<T>,
    pub teacher_manifest: RunManifest,
    pub source_holdout: DomainDataset<T>,
    pub target_train: DomainDataset<T>,
    pub target_eval: DomainDataset<T>,
    pub pseudo: Vec<SegMask>,
}

impl<T: Scalar> SeedContext<T> {
    pub fn prepare(cfg: &RunConfig, data: &DataSource<'_, T>, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let (source, target) = match data {
            DataSource::Synthetic => {
                cfg.synth.seed = seed;
                (generate_domain(&cfg.synth, DomainRole::Source)?, generate_domain(&cfg.synth, DomainRole::Target)?)
            }
            DataSource::Fixed { source, target } => ((*source).clone(), (*target).clone()),
        };
        let (ks, kt) = (split_point(source.len()), split_point(target.len()));
        let (teacher, teacher_manifest) = train_teacher(&source.slice(0, ks)?, &cfg)?;
        let target_train = target.slice(0, kt)?;
        let pseudo = generate_pseudo_labels(&teacher, &target_train, cfg.threshold)?;
        Ok(SeedContext {
            source_holdout: source.slice(ks, source.len())?,
            target_eval: target.slice(kt, target.len())?,
            cfg,
            teacher,
            teacher_manifest,
            target_train,
            pseudo,
        })
    }

    /// Teacher on held-out source items.
    pub fn source_report(&self) -> Result<MetricReport> {
        self.finish_report(evaluate_model(&self.teacher, &self.source_holdout, self.cfg.threshold, "teacher-source")?)
    }

    /// Unadapted teacher on held-out target items.
    pub fn no_da_report(&self) -> Result<MetricReport> {
        self.finish_report(evaluate_model(&self.teacher, &self.target_eval, self.cfg.threshold, AblationMode::NoDa.as_str())?)
    }

    pub fn adapt(&self, weights: LossWeights) -> Result<Adapted<T>> {
        let mut cfg = self.cfg.clone();
        cfg.loss = weights;
        adapt_student(&self.teacher, &self.target_train, &self.pseudo, &cfg)
    }

    pub fn adapted_report(&self, adapted: &Adapted<T>, label: &str) -> Result<MetricReport> {
        let mut r = evaluate_model(&adapted.student, &self.target_eval, self.cfg.threshold, label)?;
        r.config_hash = adapted.manifest.config_hash.clone();
        r.checkpoint_hash = Some(adapted.manifest.checkpoint_hash.clone());
        Ok(r)
    }

    fn finish_report(&self, mut r: MetricReport) -> Result<MetricReport> {
        r.config_hash = self.teacher_manifest.config_hash.clone();
        Ok(r)
    }
}

/// Loss weights for an ablation mode; `None` for the unadapted teacher.
pub fn mode_weights(mode: AblationMode, base: &LossWeights) -> Option<LossWeights> {
    match mode {
        AblationMode::NoDa => None,
        AblationMode::GaaOnly => Some(LossWeights { lambda_gb: 0.0, ..*base }),
        AblationMode::GblOnly => Some(LossWeights { lambda_gaa: 0.0, ..*base }),
        AblationMode::Full => Some(*base),
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub report: MetricReport,
    pub manifest: Option<RunManifest>,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub runs: Vec<AblationRun>,
    /// Teacher on held-out source, one per seed.
    pub source_reports: Vec<MetricReport>,
    pub teacher_manifests: Vec<RunManifest>,
}

impl AblationOutcome {
    pub fn labelled(&self) -> Vec<(AblationMode, MetricReport)> {
        self.runs.iter().map(|r| (r.mode, r.report.clone())).collect()
    }
}

/// Runs each mode for each seed. Within a seed all modes share one teacher
/// and one set of pseudo-labels.
pub fn ablate<T: Scalar>(cfg: &RunConfig, data: &DataSource<'_, T>, modes: &[AblationMode], seeds: &[u64]) -> Result<AblationOutcome> {
    cfg.validate()?;
    let mut out = AblationOutcome {
        runs: Vec::new(),
        source_reports: Vec::new(),
        teacher_manifests: Vec::new(),
    };
    for &seed in seeds {
        let ctx = SeedContext::prepare(cfg, data, seed)?;
        out.source_reports.push(ctx.source_report()?);
        for &mode in modes {
            let (report, manifest) = match mode_weights(mode, &cfg.loss) {
                None => (ctx.no_da_report()?, None),
                Some(w) => {
                    let adapted = ctx.adapt(w)?;
                    (ctx.adapted_report(&adapted, mode.as_str())?, Some(adapted.manifest))
                }
            };
            out.runs.push(AblationRun {
                mode,
                seed,
                report,
                manifest,
            });
        }
        out.teacher_manifests.push(ctx.teacher_manifest);
    }
    Ok(out)
}

/// Which loss weight a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaGaa,
    LambdaGb,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_gaa" => Ok(SweepParam::LambdaGaa),
            "lambda_gb" => Ok(SweepParam::LambdaGb),
            other => Err(Error::InvalidConfig(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::LambdaGaa => "lambda_gaa",
            SweepParam::LambdaGb => "lambda_gb",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seed: u64,
    pub dsc_mean: f64,
    pub assd_mean: f64,
    /// `None` when every loss weight was zero and no adaptation ran.
    pub checkpoint_hash: Option<String>,
}

/// Adapts once per (seed, value) with the chosen weight replaced by `value`.
/// A value that zeroes every weight falls back to the unadapted teacher.
pub fn sweep<T: Scalar>(cfg: &RunConfig, data: &DataSource<'_, T>, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let mut points = Vec::new();
    for &seed in seeds {
        let ctx = SeedContext::prepare(cfg, data, seed)?;
        for &value in values {
            let mut w = cfg.loss;
            match param {
                SweepParam::LambdaGaa => w.lambda_gaa = value,
                SweepParam::LambdaGb => w.lambda_gb = value,
            }
            let (report, hash) = match w.validate() {
                Err(Error::NoActiveObjective) => (ctx.no_da_report()?, None),
                Err(e) => return Err(e),
                Ok(()) => {
                    let a = ctx.adapt(w)?;
                    (ctx.adapted_report(&a, &format!("{}={value}", param.as_str()))?, Some(a.manifest.checkpoint_hash))
                }
            };
            points.push(SweepPoint {
                value,
                seed,
                dsc_mean: report.dsc_mean,
                assd_mean: report.assd_mean,
                checkpoint_hash: hash,
            });
        }
    }
    Ok(points)
}

const FEATURE_MAGIC: &[u8; 4] = b"GZF1";

/// Multi-channel record: `GZF1`, u32 channels, u32 height, u32 width, then
/// f32 planes (LE).
pub fn encode_feature_map<T: Scalar>(f: &FeatureMap<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * f.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for d in [f.channels, f.height, f.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &f.data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Decodes consecutive records; returns them in file order.
pub fn decode_feature_maps(bytes: &[u8]) -> Result<Vec<FeatureMap<f32>>> {
    let mut maps = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 16 || &rest[..4] != FEATURE_MAGIC {
            return Err(Error::Format("bad feature record header".into()));
        }
        let dim = |k: usize| u32::from_le_bytes(rest[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let n = c * h * w;
        if rest.len() < 16 + 4 * n {
            return Err(Error::Format("truncated feature record".into()));
        }
        let data = rest[16..16 + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        maps.push(FeatureMap::from_vec(c, h, w, data));
        rest = &rest[16 + 4 * n..];
    }
    Ok(maps)
}

/// Writes the bottleneck followed by the last decoder map for one image.
pub fn dump_features<T: Scalar>(params: &ModelParams<T>, img: &Image<T>, path: &Path) -> Result<()> {
    let out = backbone::forward_train(params, img)?;
    let mut bytes = encode_feature_map(&out.bottleneck);
    bytes.extend(encode_feature_map(&out.decoder));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: &Path) -> Result<Vec<FeatureMap<f32>>> {
    decode_feature_maps(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
