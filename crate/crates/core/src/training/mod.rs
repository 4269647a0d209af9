//! Multi-task loss, the SGD training loop and image-level prediction.

mod split;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use split::{load_splits, make_splits, save_splits, splits_from_csv, splits_to_csv, SplitManifest, Subset, MIN_CONTENTS};

use crate::derive_seed;
use crate::error::{contract, numeric, Result};
use crate::evalmetrics::{plcc, srocc};
use crate::imagepipe::{patch_pairs, GrayImage, PATCH_SIZE};
use crate::network::{
    build_network_with, forward_batch, record, register, tensor_manifest, ForwardOutput, InitScheme, NetworkParams,
    FC11, FC21, FC32,
};
use crate::nss::{standardize, FeatureStandardizer, NssFeatureVector, FEATURE_DIM};
use crate::tensor::{sgd_update, GradTape, Real, SgdState, Tensor};

/// Seed stream tags under [`TrainConfig::seed`].
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
/// Patches per forward call during prediction.
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the quality term.
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub auxiliary_enabled: bool,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            auxiliary_enabled: true,
            init: InitScheme::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(contract(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Whether layer `index` of the network receives updates.
    pub fn trains_layer(&self, index: usize) -> bool {
        self.auxiliary_enabled || (index != FC11 && index != FC21)
    }
}

/// Loss value and its two terms; `total = quality + auxiliary`, with λ
/// already applied to `quality`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub quality: f64,
    pub auxiliary: f64,
}

/// `λ·|q̂ − dmos| + mean_i |n̂ᵢ − labelᵢ|` for one patch; the label must be
/// standardized.
pub fn multitask_loss<T: Real>(
    out: &ForwardOutput<T>,
    dmos: f64,
    label: &NssFeatureVector,
    lambda: f64,
    auxiliary_enabled: bool,
) -> Result<LossTerms> {
    if out.nss_hat.len() != label.values().len() {
        return Err(contract(format!("{} predicted features vs {} labels", out.nss_hat.len(), label.values().len())));
    }
    let quality = lambda * (out.q_hat.as_f64() - dmos).abs();
    let auxiliary = if auxiliary_enabled {
        out.nss_hat.iter().zip(label.values()).map(|(p, t)| (p.as_f64() - t).abs()).sum::<f64>()
            / label.values().len() as f64
    } else {
        0.0
    };
    Ok(LossTerms { total: quality + auxiliary, quality, auxiliary })
}

/// Stacked patch pairs with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch<T> {
    /// `[N, 1, 32, 32]`
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    /// `[N, 1]`
    pub dmos: Tensor<T>,
    /// `[N, 108]`, standardized.
    pub labels: Tensor<T>,
}

impl<T: Real> PatchBatch<T> {
    /// Stacks `[1, 32, 32]` patches; `labels` holds 108 values per patch.
    pub fn new(left: &[&Tensor<T>], right: &[&Tensor<T>], dmos: &[f64], labels: &[&[f64]]) -> Result<Self> {
        let n = left.len();
        if n == 0 || right.len() != n || dmos.len() != n || labels.len() != n {
            return Err(contract(format!(
                "batch parts disagree: {n} left, {} right, {} scores, {} labels",
                right.len(),
                dmos.len(),
                labels.len()
            )));
        }
        let stack = |parts: &[&Tensor<T>]| {
            let data: Vec<T> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::new(vec![n, 1, PATCH_SIZE, PATCH_SIZE], data)
        };
        if labels.iter().any(|l| l.len() != FEATURE_DIM) {
            return Err(contract(format!("every label must have {FEATURE_DIM} values")));
        }
        Ok(Self {
            left: stack(left)?,
            right: stack(right)?,
            dmos: Tensor::from_f64(vec![n, 1], dmos)?,
            labels: Tensor::from_f64(vec![n, FEATURE_DIM], &labels.concat())?,
        })
    }

    pub fn len(&self) -> usize {
        self.left.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn run_tape<T: Real>(
    params: &NetworkParams<T>,
    batch: &PatchBatch<T>,
    lambda: f64,
    auxiliary_enabled: bool,
    want_grads: bool,
) -> Result<(LossTerms, Option<Vec<Tensor<T>>>)> {
    let trainable = |i: usize| want_grads && (auxiliary_enabled || (i != FC11 && i != FC21));
    let mut tape = GradTape::new();
    let vars = register(&mut tape, params, trainable);
    let (l, r) = (tape.input(&batch.left), tape.input(&batch.right));
    let out = record(&mut tape, &vars, l, r, !auxiliary_enabled)?;
    let (d, y) = (tape.input(&batch.dmos), tape.input(&batch.labels));
    let q_err = tape.l1_loss(out.q, d)?;
    let a_err = tape.l1_loss(out.nss, y)?;
    let lam = T::from_f64_lossy(lambda);
    let total = if auxiliary_enabled {
        tape.weighted_sum(&[(q_err, lam), (a_err, T::one())])?
    } else {
        tape.weighted_sum(&[(q_err, lam)])?
    };
    let quality = lambda * tape.value(q_err).item().as_f64();
    let auxiliary = if auxiliary_enabled { tape.value(a_err).item().as_f64() } else { 0.0 };
    let terms = LossTerms { total: tape.value(total).item().as_f64(), quality, auxiliary };
    if !want_grads {
        return Ok((terms, None));
    }
    let mut g = tape.backward(total)?;
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((terms, Some(grads)))
}

/// Batch loss (mean over patches) without gradients.
pub fn batch_loss<T: Real>(
    params: &NetworkParams<T>,
    batch: &PatchBatch<T>,
    lambda: f64,
    auxiliary_enabled: bool,
) -> Result<LossTerms> {
    Ok(run_tape(params, batch, lambda, auxiliary_enabled, false)?.0)
}

/// Batch loss and its gradient for every tensor in manifest order; frozen
/// tensors get zeros.
pub fn loss_and_gradients<T: Real>(
    params: &NetworkParams<T>,
    batch: &PatchBatch<T>,
    lambda: f64,
    auxiliary_enabled: bool,
) -> Result<(LossTerms, Vec<Tensor<T>>)> {
    let (terms, grads) = run_tape(params, batch, lambda, auxiliary_enabled, true)?;
    Ok((terms, grads.expect("gradients requested")))
}

/// One training sample with its views loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub ref_id: String,
    pub dmos: f64,
    pub left: GrayImage,
    pub right: GrayImage,
    /// Raw (unstandardized) naturalness features; needed for training items
    /// when the auxiliary task is on.
    pub nss: Option<NssFeatureVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub quality_term: f64,
    pub auxiliary_term: f64,
    pub val_plcc: Option<f64>,
    pub val_srocc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,quality_term,auxiliary_term,val_plcc,val_srocc";

/// Per-epoch log as comma-separated text; undefined values print as `NA`.
pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.quality_term,
            r.auxiliary_term,
            na(r.val_plcc),
            na(r.val_srocc)
        )
        .expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub params: NetworkParams<T>,
    pub log: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub selected_epoch: usize,
}

struct PatchSet<T> {
    left: Vec<Tensor<T>>,
    right: Vec<Tensor<T>>,
    dmos: Vec<f64>,
    /// Index into `labels` per patch.
    owner: Vec<usize>,
    labels: Vec<Vec<f64>>,
}

/// Trains a fresh network on the training subset of `split`.
///
/// Parameters are initialized from `derive_seed(seed, [1])` with the output
/// bias set to the mean training score; epoch `e`
/// shuffles patches with `derive_seed(seed, [2, e])`. After every epoch the
/// validation PLCC is measured and the best parameters are kept; without a
/// usable validation PLCC the final parameters are returned.
pub fn train<T: Real>(config: &TrainConfig, split: &SplitManifest, items: &[TrainItem]) -> Result<TrainOutcome<T>> {
    let mut params = build_network_with::<T>(derive_seed(config.seed, &[INIT_STREAM]), config.init);
    params.seed = config.seed;
    let scores: Vec<f64> =
        items.iter().filter(|it| split.subset_of(&it.ref_id) == Some(Subset::Train)).map(|it| it.dmos).collect();
    warm_start_output(&mut params, &scores);
    train_from(config, split, items, params)
}

/// Sets the quality output bias to the mean of `scores`.
///
/// Starting from a zero output every patch error has the same sign, so the
/// first steps push all layers the same way and the loss runs away.
pub fn warm_start_output<T: Real>(params: &mut NetworkParams<T>, scores: &[f64]) {
    if !scores.is_empty() {
        let bias = &mut params.tensors_mut()[2 * FC32 + 1];
        bias.data_mut()[0] = T::from_f64_lossy(scores.iter().sum::<f64>() / scores.len() as f64);
    }
}

/// As [`train`], starting from given parameters.
pub fn train_from<T: Real>(
    config: &TrainConfig,
    split: &SplitManifest,
    items: &[TrainItem],
    mut params: NetworkParams<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let in_subset = |s: Subset| items.iter().filter(move |it| split.subset_of(&it.ref_id) == Some(s));
    let train_items: Vec<&TrainItem> = in_subset(Subset::Train).collect();
    let val_items: Vec<&TrainItem> = in_subset(Subset::Val).collect();
    if train_items.is_empty() {
        return Err(contract(format!("run {}: the training subset is empty", split.run)));
    }

    let features: Vec<NssFeatureVector> = train_items.iter().filter_map(|it| it.nss.clone()).collect();
    if features.len() == train_items.len() {
        params.standardizer = FeatureStandardizer::fit(&features)?;
    } else if config.auxiliary_enabled {
        let missing = train_items.iter().find(|it| it.nss.is_none()).expect("some item lacks features");
        return Err(contract(format!("training sample {} has no naturalness features", missing.id)));
    } else {
        params.standardizer = FeatureStandardizer::identity();
    }

    let patches = collect_patches::<T>(&train_items, &params.standardizer)?;
    log::info!(
        "run {}: {} training images, {} patches, {} validation images",
        split.run,
        train_items.len(),
        patches.dmos.len(),
        val_items.len()
    );

    let trainable: Vec<usize> =
        (0..params.tensors().len()).filter(|&i| config.trains_layer(i / 2)).collect();
    let names = tensor_manifest();
    let mut sgd = SgdState::new(
        T::from_f64_lossy(config.learning_rate),
        T::from_f64_lossy(config.momentum),
        T::from_f64_lossy(config.weight_decay),
        trainable.iter().map(|&i| params.tensors()[i].shape()),
    )?
    .with_labels(trainable.iter().map(|&i| names[i].0.clone()));

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, NetworkParams<T>)> = None;
    let mut order: Vec<usize> = (0..patches.dmos.len()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SHUFFLE_STREAM, epoch as u64])));
        let (mut sum, mut sum_q, mut sum_a) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = PatchBatch::new(
                &idx.iter().map(|&i| &patches.left[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| &patches.right[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| patches.dmos[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| patches.labels[patches.owner[i]].as_slice()).collect::<Vec<_>>(),
            )?;
            let (terms, mut grads) =
                run_tape(&params, &batch, config.lambda, config.auxiliary_enabled, true).map_err(|e| {
                    numeric(format!("run {}, epoch {epoch}, batch {b}: {e}", split.run))
                })?;
            if !terms.total.is_finite() {
                return Err(numeric(format!(
                    "run {}, epoch {epoch}, batch {b}: non-finite loss (quality {}, auxiliary {})",
                    split.run, terms.quality, terms.auxiliary
                )));
            }
            let grads: Vec<Tensor<T>> = trainable
                .iter()
                .map(|&i| std::mem::replace(&mut grads.as_mut().expect("gradients requested")[i], Tensor::scalar(T::zero())))
                .collect();
            let mut targets: Vec<&mut Tensor<T>> = params
                .tensors_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| config.trains_layer(i / 2))
                .map(|(_, t)| t)
                .collect();
            sgd_update(&mut targets, &grads, &mut sgd).map_err(|e| {
                numeric(format!(
                    "run {}, epoch {epoch}, batch {b} (quality {}, auxiliary {}): {e}",
                    split.run, terms.quality, terms.auxiliary
                ))
            })?;
            let w = idx.len() as f64;
            sum += terms.total * w;
            sum_q += terms.quality * w;
            sum_a += terms.auxiliary * w;
        }
        let n = order.len() as f64;
        let (val_plcc, val_srocc) = validate(&params, &val_items)?;
        let record = EpochRecord {
            epoch,
            train_loss: sum / n,
            quality_term: sum_q / n,
            auxiliary_term: sum_a / n,
            val_plcc,
            val_srocc,
        };
        log::info!(
            "run {} epoch {epoch}: loss {:.4} (quality {:.4}, auxiliary {:.4}), val PLCC {}",
            split.run,
            record.train_loss,
            record.quality_term,
            record.auxiliary_term,
            val_plcc.map_or("NA".into(), |v| format!("{v:.4}"))
        );
        log.push(record);
        if let Some(p) = val_plcc {
            if best.as_ref().is_none_or(|(b, _, _)| p > *b) {
                best = Some((p, epoch, params.clone()));
            }
        }
    }
    let (params, selected_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, config.epochs),
    };
    Ok(TrainOutcome { params, log, selected_epoch })
}

fn collect_patches<T: Real>(items: &[&TrainItem], stats: &FeatureStandardizer) -> Result<PatchSet<T>> {
    let mut set = PatchSet { left: vec![], right: vec![], dmos: vec![], owner: vec![], labels: vec![] };
    for (k, it) in items.iter().enumerate() {
        let label = match &it.nss {
            Some(f) => standardize(f, stats).into_vec(),
            None => vec![0.0; FEATURE_DIM],
        };
        set.labels.push(label);
        for (l, r) in patch_pairs::<T>(&it.left, &it.right).map_err(|e| contract(format!("{}: {e}", it.id)))? {
            set.left.push(l);
            set.right.push(r);
            set.dmos.push(it.dmos);
            set.owner.push(k);
        }
    }
    Ok(set)
}

/// Validation PLCC and SROCC, `None` when undefined.
fn validate<T: Real>(params: &NetworkParams<T>, items: &[&TrainItem]) -> Result<(Option<f64>, Option<f64>)> {
    if items.len() < crate::evalmetrics::MIN_GROUP {
        return Ok((None, None));
    }
    let mut pred = Vec::with_capacity(items.len());
    for it in items {
        pred.push(predict_image(params, &it.left, &it.right)?);
    }
    let dmos: Vec<f64> = items.iter().map(|it| it.dmos).collect();
    Ok((plcc(&pred, &dmos).ok(), srocc(&pred, &dmos).ok()))
}

/// Image-level outputs: mean patch score and mean predicted (standardized)
/// feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub score: f64,
    pub nss: Vec<f64>,
    pub patches: usize,
}

/// Forwards every co-located patch pair and averages the outputs.
pub fn predict_pair<T: Real>(params: &NetworkParams<T>, left: &GrayImage, right: &GrayImage) -> Result<PairPrediction> {
    let pairs = patch_pairs::<T>(left, right)?;
    let mut score = 0.0;
    let mut nss = vec![0.0; FEATURE_DIM];
    for chunk in pairs.chunks(PREDICT_CHUNK) {
        let stack = |pick: fn(&(Tensor<T>, Tensor<T>)) -> &Tensor<T>| {
            let data: Vec<T> = chunk.iter().flat_map(|p| pick(p).data().iter().copied()).collect();
            Tensor::new(vec![chunk.len(), 1, PATCH_SIZE, PATCH_SIZE], data)
        };
        for out in forward_batch(params, &stack(|p| &p.0)?, &stack(|p| &p.1)?)? {
            score += out.q_hat.as_f64();
            for (acc, v) in nss.iter_mut().zip(&out.nss_hat) {
                *acc += v.as_f64();
            }
        }
    }
    let n = pairs.len() as f64;
    nss.iter_mut().for_each(|v| *v /= n);
    Ok(PairPrediction { score: score / n, nss, patches: pairs.len() })
}

/// Mean predicted quality over the patch grid.
pub fn predict_image<T: Real>(params: &NetworkParams<T>, left: &GrayImage, right: &GrayImage) -> Result<f64> {
    Ok(predict_pair(params, left, right)?.score)
}
