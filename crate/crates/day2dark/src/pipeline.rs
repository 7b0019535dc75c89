//! Training orchestration: the two-stage schedule, the end-to-end variant,
//! the visual-only baseline trainer, checkpointing and the ablation sweeps.
//!
//! Stage 1 interleaves one labeled batch with one unlabeled batch per
//! optimizer step and minimizes `L_CE + lambda * L_U`. Stage 2 freezes the
//! fusion transformer (and everything else that is not darkness-adaptive) and
//! finetunes the probe, the adaptive projections, the prompts and, by
//! default, the classifier heads on day/dark mixed samples at a higher
//! learning rate.
//!
//! Every random draw derives from `(seed, stage tag, epoch)`, so runs are
//! bitwise reproducible and checkpoint resume at an epoch boundary replays
//! the exact remaining schedule.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{fingerprint_str, Checkpoint};
use crate::clip::{Clip, Label};
use crate::error::{Day2DarkError, Result};
use crate::nn::{Bound, GradAccum, ParamStore, SgdMomentum};
use crate::recognizer::{ForwardInput, Recognizer, RecognizerConfig, Route, VisualOnly};
use crate::supervision::{
    collect_auxiliary_predictions, compute_pseudo_targets, day2dark_mix, default_teachers,
    sample_mix_alpha, train_autoencoder, AutoencoderConfig, MixOptions, PseudoTargetMode,
    PseudoTargets,
};
use crate::toybench::DatasetSplit;

/// Training schedule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    TwoStage,
    EndToEnd,
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub momentum: f64,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lambda: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub autoencoder_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub pseudo_mode: PseudoTargetMode,
    /// Whether stage 2 also finetunes the classifier heads.
    pub finetune_classifiers: bool,
    pub recognizer: RecognizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            momentum: 0.9,
            batch_size: 32,
            lr_stage1: 0.01,
            lr_stage2: 0.3,
            lambda: 0.01,
            epochs_stage1: 10,
            epochs_stage2: 5,
            autoencoder_epochs: 300,
            seed: 0,
            mode: TrainMode::TwoStage,
            pseudo_mode: PseudoTargetMode::Bottleneck,
            finetune_classifiers: true,
            recognizer: RecognizerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule paired with [`RecognizerConfig::desk`]: short stages, a
    /// lighter autoencoder budget, the standard rates otherwise.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs_stage1: 6,
            epochs_stage2: 2,
            autoencoder_epochs: 150,
            seed,
            recognizer: RecognizerConfig::desk(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_stage1 <= 0.0 || self.lr_stage2 <= 0.0 {
            return Err(Day2DarkError::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Day2DarkError::config("batch_size must be at least 1"));
        }
        if self.lambda < 0.0 {
            return Err(Day2DarkError::config("lambda must be non-negative"));
        }
        self.recognizer.validate()
    }

    /// Fingerprint of the canonical serialization; checkpoints and caches are
    /// only valid against a matching config.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_str(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<TrainConfig> {
        serde_json::from_str(s).map_err(|e| Day2DarkError::config(format!("bad config: {e}")))
    }
}

/// Per-epoch loss decomposition; `total = ce + pseudo + mix` exactly.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub ce: f64,
    pub pseudo: f64,
    pub mix: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn epoch_logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("stage,epoch,steps,ce,pseudo,mix,total,lr\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{}\n",
            l.stage, l.epoch, l.steps, l.ce, l.pseudo, l.mix, l.total, l.lr
        ));
    }
    out
}

/// A trained recognizer with its parameters, optimizer state and history.
pub struct Trained {
    pub recognizer: Recognizer,
    pub store: ParamStore,
    pub optimizer: SgdMomentum,
    pub epoch: u64,
    pub log: Vec<EpochLog>,
}

impl Trained {
    pub fn checkpoint(&self, stage: &str, fingerprint: u64) -> Checkpoint {
        Checkpoint::capture(stage, self.epoch, fingerprint, &self.store, &self.optimizer)
    }
}

// Stream tags for the per-stage RNGs.
const TAG_INIT: u64 = 0x01;
const TAG_S1_SHUFFLE: u64 = 0x10;
const TAG_S1_POOL: u64 = 0x11;
const TAG_S2_SHUFFLE: u64 = 0x20;
const TAG_S2_POOL: u64 = 0x21;
const TAG_S2_ALPHA: u64 = 0x22;
const TAG_VO_SHUFFLE: u64 = 0x30;

fn epoch_rng(seed: u64, tag: u64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    crate::rng::rng_for(seed, tag ^ ((epoch as u64 + 1) << 16))
}

fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn precompute_inputs(rec_cfg: &RecognizerConfig, clips: &[Clip]) -> Result<Vec<ForwardInput>> {
    clips
        .par_iter()
        .map(|c| ForwardInput::from_clip(&rec_cfg.encoder, c))
        .collect()
}

fn label_of(clip: &Clip) -> Result<&Label> {
    clip.label
        .as_ref()
        .ok_or_else(|| Day2DarkError::invalid(format!("clip {} has no label", clip.id)))
}

fn ce_loss_node(
    tape: &mut Tape,
    logits: crate::autodiff::NodeId,
    label: &Label,
) -> crate::autodiff::NodeId {
    match label {
        Label::Single(c) => tape.cross_entropy_logits(logits, *c),
        Label::Multi(bits) => {
            let targets = bits.iter().map(|b| f64::from(u8::from(*b))).collect();
            tape.bce_with_logits_sum(logits, targets)
        }
    }
}

/// One labeled clip: forward, classification loss, parameter gradients.
fn labeled_clip_grads(
    rec: &Recognizer,
    store: &ParamStore,
    input: &ForwardInput,
    label: &Label,
    route: Route,
) -> (f64, GradAccum) {
    let mut tape = Tape::new();
    let mut bound = Bound::new(store);
    let nodes = rec.forward_on_tape(&mut tape, &mut bound, store, input, route);
    let loss = ce_loss_node(&mut tape, nodes.logits, label);
    let value = tape.value(loss).data[0];
    let grads = tape.backward(loss);
    (value, bound.extract_grads(&grads))
}

/// One unlabeled clip: forward on the dark path, L1 against its pseudo-target.
fn unlabeled_clip_grads(
    rec: &Recognizer,
    store: &ParamStore,
    input: &ForwardInput,
    target: &[f64],
) -> (f64, GradAccum) {
    let mut tape = Tape::new();
    let mut bound = Bound::new(store);
    let nodes = rec.forward_on_tape(&mut tape, &mut bound, store, input, Route::Auto);
    let loss = tape.l1_sum(nodes.pseudo, target.to_vec());
    let value = tape.value(loss).data[0];
    let grads = tape.backward(loss);
    (value, bound.extract_grads(&grads))
}

struct BatchTerms {
    ce: f64,
    pseudo: f64,
    mix: f64,
    grads: GradAccum,
}

/// Gradient and loss accumulation for one optimizer step. Per-clip work runs
/// in parallel; merging happens in clip order so results do not depend on
/// thread count.
#[allow(clippy::too_many_arguments)]
fn batch_terms(
    rec: &Recognizer,
    store: &ParamStore,
    labeled: &[(usize, &ForwardInput, &Label)],
    labeled_route: Route,
    unlabeled: &[(&ForwardInput, &[f64])],
    lambda: f64,
    mixed: &[(ForwardInput, Label)],
) -> BatchTerms {
    let mut grads = GradAccum::new(store.len());
    let mut ce = 0.0;
    let mut pseudo = 0.0;
    let mut mix = 0.0;

    if !labeled.is_empty() {
        let results: Vec<(f64, GradAccum)> = labeled
            .par_iter()
            .map(|(_, input, label)| labeled_clip_grads(rec, store, input, label, labeled_route))
            .collect();
        let scale = 1.0 / labeled.len() as f64;
        for (loss, mut g) in results {
            ce += loss * scale;
            g.scale(scale);
            grads.merge(&g);
        }
    }
    if lambda > 0.0 && !unlabeled.is_empty() {
        let results: Vec<(f64, GradAccum)> = unlabeled
            .par_iter()
            .map(|(input, target)| unlabeled_clip_grads(rec, store, input, target))
            .collect();
        for (loss, mut g) in results {
            pseudo += lambda * loss;
            g.scale(lambda);
            grads.merge(&g);
        }
    }
    if !mixed.is_empty() {
        let results: Vec<(f64, GradAccum)> = mixed
            .par_iter()
            .map(|(input, label)| labeled_clip_grads(rec, store, input, label, Route::ForceDark))
            .collect();
        let scale = 1.0 / mixed.len() as f64;
        for (loss, mut g) in results {
            mix += loss * scale;
            g.scale(scale);
            grads.merge(&g);
        }
    }
    BatchTerms {
        ce,
        pseudo,
        mix,
        grads,
    }
}

/// Resolve the pool's pseudo-targets, failing loudly on any missing clip.
fn resolve_targets<'t>(pool: &[Clip], targets: &'t PseudoTargets) -> Result<Vec<&'t [f64]>> {
    let missing: Vec<&str> = pool
        .iter()
        .filter(|c| !targets.targets.contains_key(&c.id))
        .map(|c| c.id.as_str())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(5).copied().collect();
        return Err(Day2DarkError::invalid(format!(
            "{} pool clips lack pseudo-targets, e.g. {:?}",
            missing.len(),
            shown
        )));
    }
    Ok(pool
        .iter()
        .map(|c| targets.targets[&c.id].as_slice())
        .collect())
}

/// Stage 1: pseudo-supervised training from scratch over `0..epochs_stage1`.
pub fn train_stage1(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    targets: &PseudoTargets,
) -> Result<Trained> {
    let trained = init_recognizer(cfg)?;
    run_stage1_epochs(cfg, ds, targets, trained, 0..cfg.epochs_stage1)
}

/// Resume stage 1 from a checkpoint taken at an epoch boundary.
pub fn resume_stage1(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    targets: &PseudoTargets,
    ckpt: &Checkpoint,
) -> Result<Trained> {
    let mut trained = init_recognizer(cfg)?;
    ckpt.apply(&mut trained.store, &mut trained.optimizer)?;
    trained.epoch = ckpt.epoch;
    run_stage1_epochs(
        cfg,
        ds,
        targets,
        trained,
        ckpt.epoch as usize..cfg.epochs_stage1,
    )
}

fn init_recognizer(cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = crate::rng::rng_for(cfg.seed, TAG_INIT);
    let recognizer = Recognizer::new(cfg.recognizer.clone(), &mut store, &mut rng)?;
    let optimizer = SgdMomentum::new(cfg.momentum, store.len());
    Ok(Trained {
        recognizer,
        store,
        optimizer,
        epoch: 0,
        log: Vec::new(),
    })
}

fn run_stage1_epochs(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    targets: &PseudoTargets,
    mut trained: Trained,
    epochs: std::ops::Range<usize>,
) -> Result<Trained> {
    let pool_targets = resolve_targets(&ds.pool, targets)?;
    let labeled_inputs = precompute_inputs(&cfg.recognizer, &ds.train)?;
    let pool_inputs = precompute_inputs(&cfg.recognizer, &ds.pool)?;
    let labels: Vec<&Label> = ds.train.iter().map(label_of).collect::<Result<_>>()?;
    let trainable = vec![true; trained.store.len()];
    // lambda = 0 (or an empty pool) degenerates to supervised-only training:
    // the unlabeled half of each step is skipped entirely, so the run is
    // bitwise identical to one without a pool.
    let use_pool = cfg.lambda > 0.0 && !ds.pool.is_empty();

    for epoch in epochs {
        let mut shuffle_rng = epoch_rng(cfg.seed, TAG_S1_SHUFFLE, epoch);
        let order = shuffled_indices(ds.train.len(), &mut shuffle_rng);
        let mut pool_rng = epoch_rng(cfg.seed, TAG_S1_POOL, epoch);
        let mut terms = (0.0, 0.0);
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let labeled: Vec<(usize, &ForwardInput, &Label)> = batch
                .iter()
                .map(|&i| (i, &labeled_inputs[i], labels[i]))
                .collect();
            let unlabeled: Vec<(&ForwardInput, &[f64])> = if use_pool {
                (0..cfg.batch_size.min(ds.pool.len()))
                    .map(|_| {
                        let j = pool_rng.gen_range(0..ds.pool.len());
                        (&pool_inputs[j], pool_targets[j])
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let out = batch_terms(
                &trained.recognizer,
                &trained.store,
                &labeled,
                Route::Auto,
                &unlabeled,
                cfg.lambda,
                &[],
            );
            trained
                .optimizer
                .step(&mut trained.store, &out.grads, cfg.lr_stage1, &trainable);
            terms.0 += out.ce;
            terms.1 += out.pseudo;
            steps += 1;
        }
        let (ce, pseudo) = (terms.0 / steps as f64, terms.1 / steps as f64);
        trained.log.push(EpochLog {
            stage: "stage1".into(),
            epoch,
            steps,
            ce,
            pseudo,
            mix: 0.0,
            total: ce + pseudo,
            lr: cfg.lr_stage1,
        });
        trained.epoch = epoch as u64 + 1;
    }
    Ok(trained)
}

/// Parameter names updated during stage 2: the darkness probe, the adaptive
/// projections, the adaptive prompts and (configurably) the classifier heads.
pub fn stage2_trainable_mask(store: &ParamStore, finetune_classifiers: bool) -> Vec<bool> {
    store
        .iter()
        .map(|(_, name, _)| {
            name.starts_with("probe.")
                || name.starts_with("dark.proj")
                || name.starts_with("dark.prompt")
                || (finetune_classifiers && name.starts_with("dark.cls"))
        })
        .collect()
}

/// Stage 2: freeze the fusion transformer and everything non-adaptive, then
/// finetune the darkness-adaptive components on day/dark mixes. Mixed samples
/// are routed through the dark path regardless of their own illuminance,
/// since those are the components being tuned. Optimizer velocity starts
/// fresh for the finetuning phase.
pub fn train_stage2(cfg: &TrainConfig, ds: &DatasetSplit, mut trained: Trained) -> Result<Trained> {
    trained.optimizer = SgdMomentum::new(cfg.momentum, trained.store.len());
    trained.epoch = 0;
    run_stage2_epochs(cfg, ds, trained, 0..cfg.epochs_stage2)
}

/// Resume stage 2 from one of its own checkpoints taken at an epoch boundary;
/// velocity carries over from the checkpoint.
pub fn resume_stage2(cfg: &TrainConfig, ds: &DatasetSplit, ckpt: &Checkpoint) -> Result<Trained> {
    let mut trained = init_recognizer(cfg)?;
    ckpt.apply(&mut trained.store, &mut trained.optimizer)?;
    trained.epoch = ckpt.epoch;
    run_stage2_epochs(cfg, ds, trained, ckpt.epoch as usize..cfg.epochs_stage2)
}

fn run_stage2_epochs(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    mut trained: Trained,
    epochs: std::ops::Range<usize>,
) -> Result<Trained> {
    cfg.validate()?;
    if ds.pool.is_empty() || epochs.is_empty() {
        return Ok(trained);
    }
    let day_indices: Vec<usize> = ds
        .train
        .iter()
        .enumerate()
        .filter(|(_, c)| c.clip_y > cfg.recognizer.t)
        .map(|(i, _)| i)
        .collect();
    if day_indices.is_empty() {
        return Err(Day2DarkError::invalid("no day clips available for mixing"));
    }
    let labeled_cells = precompute_inputs(&cfg.recognizer, &ds.train)?;
    let trainable = stage2_trainable_mask(&trained.store, cfg.finetune_classifiers);

    for epoch in epochs {
        let mut shuffle_rng = epoch_rng(cfg.seed, TAG_S2_SHUFFLE, epoch);
        let order = shuffled_indices(day_indices.len(), &mut shuffle_rng);
        let mut pool_rng = epoch_rng(cfg.seed, TAG_S2_POOL, epoch);
        let mut alpha_rng = epoch_rng(cfg.seed, TAG_S2_ALPHA, epoch);
        let mut mix_total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut mixed = Vec::with_capacity(batch.len());
            for &oi in batch {
                let li = day_indices[oi];
                let pi = pool_rng.gen_range(0..ds.pool.len());
                let alpha = sample_mix_alpha(&mut alpha_rng);
                let (mixed_clip, label) =
                    day2dark_mix(&ds.train[li], &ds.pool[pi], alpha, MixOptions::default())?;
                // The mix keeps the labeled clip's audio, so its cached audio
                // cells apply; only the visual frontend needs recomputing.
                let input = ForwardInput {
                    patches: crate::encoders::visual_patches(&cfg.recognizer.encoder, &mixed_clip)?,
                    cells: labeled_cells[li].cells.clone(),
                    clip_y: mixed_clip.clip_y,
                };
                mixed.push((input, label));
            }
            let out = batch_terms(
                &trained.recognizer,
                &trained.store,
                &[],
                Route::Auto,
                &[],
                0.0,
                &mixed,
            );
            trained
                .optimizer
                .step(&mut trained.store, &out.grads, cfg.lr_stage2, &trainable);
            mix_total += out.mix;
            steps += 1;
        }
        let mix = mix_total / steps as f64;
        trained.log.push(EpochLog {
            stage: "stage2".into(),
            epoch,
            steps,
            ce: 0.0,
            pseudo: 0.0,
            mix,
            total: mix,
            lr: cfg.lr_stage2,
        });
        trained.epoch = epoch as u64 + 1;
    }
    Ok(trained)
}

/// End-to-end variant: every step combines the labeled, unlabeled and mixed
/// terms into `L_CE + lambda * L_U + L_mix` with all parameters trainable.
pub fn train_end_to_end(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    targets: &PseudoTargets,
) -> Result<Trained> {
    let trained = init_recognizer(cfg)?;
    run_e2e_epochs(cfg, ds, targets, trained, 0..cfg.epochs_stage1)
}

/// Resume the end-to-end schedule from an epoch-boundary checkpoint.
pub fn resume_end_to_end(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    targets: &PseudoTargets,
    ckpt: &Checkpoint,
) -> Result<Trained> {
    let mut trained = init_recognizer(cfg)?;
    ckpt.apply(&mut trained.store, &mut trained.optimizer)?;
    trained.epoch = ckpt.epoch;
    run_e2e_epochs(cfg, ds, targets, trained, ckpt.epoch as usize..cfg.epochs_stage1)
}

fn run_e2e_epochs(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    targets: &PseudoTargets,
    mut trained: Trained,
    epochs: std::ops::Range<usize>,
) -> Result<Trained> {
    let pool_targets = resolve_targets(&ds.pool, targets)?;
    let labeled_inputs = precompute_inputs(&cfg.recognizer, &ds.train)?;
    let pool_inputs = precompute_inputs(&cfg.recognizer, &ds.pool)?;
    let labels: Vec<&Label> = ds.train.iter().map(label_of).collect::<Result<_>>()?;
    let day_indices: Vec<usize> = ds
        .train
        .iter()
        .enumerate()
        .filter(|(_, c)| c.clip_y > cfg.recognizer.t)
        .map(|(i, _)| i)
        .collect();
    let trainable = vec![true; trained.store.len()];
    let use_pool = cfg.lambda > 0.0 && !ds.pool.is_empty();
    let use_mix = !ds.pool.is_empty() && !day_indices.is_empty();

    for epoch in epochs {
        let mut shuffle_rng = epoch_rng(cfg.seed, TAG_S1_SHUFFLE, epoch);
        let order = shuffled_indices(ds.train.len(), &mut shuffle_rng);
        let mut pool_rng = epoch_rng(cfg.seed, TAG_S1_POOL, epoch);
        let mut mix_pool_rng = epoch_rng(cfg.seed, TAG_S2_POOL, epoch);
        let mut alpha_rng = epoch_rng(cfg.seed, TAG_S2_ALPHA, epoch);
        let mut mix_day_rng = epoch_rng(cfg.seed, TAG_S2_SHUFFLE, epoch);
        let mut terms = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let labeled: Vec<(usize, &ForwardInput, &Label)> = batch
                .iter()
                .map(|&i| (i, &labeled_inputs[i], labels[i]))
                .collect();
            let unlabeled: Vec<(&ForwardInput, &[f64])> = if use_pool {
                (0..cfg.batch_size.min(ds.pool.len()))
                    .map(|_| {
                        let j = pool_rng.gen_range(0..ds.pool.len());
                        (&pool_inputs[j], pool_targets[j])
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let mut mixed = Vec::new();
            if use_mix {
                for _ in 0..batch.len() {
                    let li = day_indices[mix_day_rng.gen_range(0..day_indices.len())];
                    let pi = mix_pool_rng.gen_range(0..ds.pool.len());
                    let alpha = sample_mix_alpha(&mut alpha_rng);
                    let (mixed_clip, label) =
                        day2dark_mix(&ds.train[li], &ds.pool[pi], alpha, MixOptions::default())?;
                    let input = ForwardInput {
                        patches: crate::encoders::visual_patches(
                            &cfg.recognizer.encoder,
                            &mixed_clip,
                        )?,
                        cells: labeled_inputs[li].cells.clone(),
                        clip_y: mixed_clip.clip_y,
                    };
                    mixed.push((input, label));
                }
            }
            let out = batch_terms(
                &trained.recognizer,
                &trained.store,
                &labeled,
                Route::Auto,
                &unlabeled,
                cfg.lambda,
                &mixed,
            );
            trained
                .optimizer
                .step(&mut trained.store, &out.grads, cfg.lr_stage1, &trainable);
            terms.0 += out.ce;
            terms.1 += out.pseudo;
            terms.2 += out.mix;
            steps += 1;
        }
        let (ce, pseudo, mix) = (
            terms.0 / steps as f64,
            terms.1 / steps as f64,
            terms.2 / steps as f64,
        );
        trained.log.push(EpochLog {
            stage: "e2e".into(),
            epoch,
            steps,
            ce,
            pseudo,
            mix,
            total: ce + pseudo + mix,
            lr: cfg.lr_stage1,
        });
        trained.epoch = epoch as u64 + 1;
    }
    Ok(trained)
}

/// Train teachers -> autoencoder -> pseudo-targets, then run the configured
/// schedule end to end. The returned targets allow callers to reuse the cache.
pub fn train_full(cfg: &TrainConfig, ds: &DatasetSplit) -> Result<(Trained, PseudoTargets)> {
    let mut cfg = cfg.clone();
    let targets = prepare_pseudo_targets(&cfg, ds)?;
    if targets.dim > 0 {
        cfg.recognizer.pseudo_dim = targets.dim;
    }
    let trained = match cfg.mode {
        TrainMode::TwoStage => {
            let stage1 = train_stage1(&cfg, ds, &targets)?;
            train_stage2(&cfg, ds, stage1)?
        }
        TrainMode::EndToEnd => train_end_to_end(&cfg, ds, &targets)?,
    };
    Ok((trained, targets))
}

/// Teachers and autoencoder run once, in advance, on the frozen pool.
pub fn prepare_pseudo_targets(cfg: &TrainConfig, ds: &DatasetSplit) -> Result<PseudoTargets> {
    if ds.pool.is_empty() {
        return Ok(PseudoTargets {
            teacher_fingerprint: 0,
            autoencoder_fingerprint: 0,
            dim: 0,
            targets: Default::default(),
        });
    }
    let teachers = default_teachers(cfg.seed);
    let preds: Vec<Vec<f64>> = ds
        .pool
        .par_iter()
        .map(|c| collect_auxiliary_predictions(c, &teachers).map(|p| p.concat))
        .collect::<Result<_>>()?;
    let ae_cfg = AutoencoderConfig {
        epochs: cfg.autoencoder_epochs,
        seed: cfg.seed,
        ..AutoencoderConfig::default()
    };
    let ae = train_autoencoder(&preds, &ae_cfg)?;
    compute_pseudo_targets(&ds.pool, &teachers, &ae, cfg.pseudo_mode)
}

/// Load pseudo-targets from `path` when fresh, recomputing and rewriting the
/// cache when missing or stale.
pub fn load_or_compute_pseudo_targets(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    path: &Path,
) -> Result<PseudoTargets> {
    if ds.pool.is_empty() {
        return prepare_pseudo_targets(cfg, ds);
    }
    let teachers = default_teachers(cfg.seed);
    let teacher_fp = crate::supervision::teachers_fingerprint(&teachers);
    if path.exists() {
        // The autoencoder fingerprint is only known after training it, so a
        // cache hit is validated on the teacher fingerprint plus clip cover.
        if let Some(cached) = PseudoTargets::load_any_autoencoder(path, teacher_fp)? {
            if ds.pool.iter().all(|c| cached.targets.contains_key(&c.id)) {
                return Ok(cached);
            }
        }
    }
    let targets = prepare_pseudo_targets(cfg, ds)?;
    targets.save(path)?;
    Ok(targets)
}

/// The visual-only baseline: toy visual encoder, mean pooling, linear head.
pub struct TrainedVisualOnly {
    pub model: VisualOnly,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

pub fn train_visual_only(cfg: &TrainConfig, ds: &DatasetSplit) -> Result<TrainedVisualOnly> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = crate::rng::rng_for(cfg.seed, TAG_INIT);
    let model = VisualOnly::new(
        cfg.recognizer.encoder.clone(),
        cfg.recognizer.n_classes,
        cfg.recognizer.multi_label,
        &mut store,
        &mut rng,
    );
    let patches: Vec<crate::tensor::Mat> = ds
        .train
        .par_iter()
        .map(|c| crate::encoders::visual_patches(&cfg.recognizer.encoder, c))
        .collect::<Result<_>>()?;
    let labels: Vec<&Label> = ds.train.iter().map(label_of).collect::<Result<_>>()?;
    let mut optimizer = SgdMomentum::new(cfg.momentum, store.len());
    let trainable = vec![true; store.len()];
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs_stage1 {
        let mut shuffle_rng = epoch_rng(cfg.seed, TAG_VO_SHUFFLE, epoch);
        let order = shuffled_indices(ds.train.len(), &mut shuffle_rng);
        let mut ce_total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, GradAccum)> = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let mut bound = Bound::new(&store);
                    let logits = model.forward_on_tape(&mut tape, &mut bound, &store, &patches[i]);
                    let loss = ce_loss_node(&mut tape, logits, labels[i]);
                    let value = tape.value(loss).data[0];
                    let grads = tape.backward(loss);
                    (value, bound.extract_grads(&grads))
                })
                .collect();
            let mut grads = GradAccum::new(store.len());
            let scale = 1.0 / batch.len() as f64;
            let mut ce = 0.0;
            for (loss, mut g) in results {
                ce += loss * scale;
                g.scale(scale);
                grads.merge(&g);
            }
            optimizer.step(&mut store, &grads, cfg.lr_stage1, &trainable);
            ce_total += ce;
            steps += 1;
        }
        let ce = ce_total / steps as f64;
        log.push(EpochLog {
            stage: "visual_only".into(),
            epoch,
            steps,
            ce,
            pseudo: 0.0,
            mix: 0.0,
            total: ce,
            lr: cfg.lr_stage1,
        });
    }
    Ok(TrainedVisualOnly { model, store, log })
}

// ---------------------------------------------------------------------------
// Ablation harnesses
// ---------------------------------------------------------------------------

/// The component ladder: vanilla multimodal transformer, then probe +
/// adaptive encoder, then adaptive prompts, then adaptive classification.
pub fn ladder_configs(base: &RecognizerConfig) -> Vec<(&'static str, RecognizerConfig)> {
    let vanilla = RecognizerConfig {
        k: 1,
        adaptive_encoder: false,
        adaptive_prompts: false,
        adaptive_classifiers: false,
        tie_day_branch: true,
        ..base.clone()
    };
    let probe_encoder = RecognizerConfig {
        adaptive_encoder: true,
        adaptive_prompts: false,
        adaptive_classifiers: false,
        tie_day_branch: false,
        ..base.clone()
    };
    let prompts = RecognizerConfig {
        adaptive_prompts: true,
        ..probe_encoder.clone()
    };
    let classifiers = RecognizerConfig {
        adaptive_classifiers: true,
        ..prompts.clone()
    };
    vec![
        ("vanilla", vanilla),
        ("+probe_adaptive_encoder", probe_encoder),
        ("+adaptive_prompts", prompts),
        ("+adaptive_classification", classifiers),
    ]
}

/// One sweep table row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub dark_metric: f64,
    pub day_metric: f64,
}

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,dark,day\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4}\n",
            r.axis, r.value, r.dark_metric, r.day_metric
        ));
    }
    out
}

fn eval_trained(trained: &Trained, ds: &DatasetSplit, t: f64) -> Result<(f64, f64)> {
    let model = crate::recognizer::RecognizerModel {
        recognizer: &trained.recognizer,
        store: &trained.store,
    };
    crate::evalkit::day_dark_metric(&model, &ds.test, t)
}

/// Sweep the branch count; one full training run per value.
pub fn sweep_k(cfg: &TrainConfig, ds: &DatasetSplit, ks: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut c = cfg.clone();
        c.recognizer.k = k;
        let (trained, _) = train_full(&c, ds)?;
        let (day, dark) = eval_trained(&trained, ds, c.recognizer.t)?;
        rows.push(SweepRow {
            axis: "K".into(),
            value: k.to_string(),
            dark_metric: dark,
            day_metric: day,
        });
    }
    Ok(rows)
}

/// Sweep the pseudo-loss weight.
pub fn sweep_lambda(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut c = cfg.clone();
        c.lambda = lambda;
        let (trained, _) = train_full(&c, ds)?;
        let (day, dark) = eval_trained(&trained, ds, c.recognizer.t)?;
        rows.push(SweepRow {
            axis: "lambda".into(),
            value: format!("{lambda}"),
            dark_metric: dark,
            day_metric: day,
        });
    }
    Ok(rows)
}

/// Sweep the unlabeled-pool size by truncating the pool.
pub fn sweep_pool_size(
    cfg: &TrainConfig,
    ds: &DatasetSplit,
    sizes: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        let mut subset = DatasetSplit {
            n_classes: ds.n_classes,
            multi_label: ds.multi_label,
            train: ds.train.clone(),
            val: ds.val.clone(),
            test: ds.test.clone(),
            pool: ds.pool.iter().take(size).cloned().collect(),
        };
        if subset.pool.len() < size {
            return Err(Day2DarkError::config(format!(
                "pool holds {} clips, cannot sweep size {size}",
                ds.pool.len()
            )));
        }
        let (trained, _) = train_full(cfg, &subset)?;
        let (day, dark) = eval_trained(&trained, &subset, cfg.recognizer.t)?;
        subset.pool.clear();
        rows.push(SweepRow {
            axis: "pool_size".into(),
            value: size.to_string(),
            dark_metric: dark,
            day_metric: day,
        });
    }
    Ok(rows)
}

/// Run the component ladder once at the given seed.
pub fn run_ladder(cfg: &TrainConfig, ds: &DatasetSplit) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (name, rec_cfg) in ladder_configs(&cfg.recognizer) {
        let mut c = cfg.clone();
        c.recognizer = rec_cfg;
        let (trained, _) = train_full(&c, ds)?;
        let (day, dark) = eval_trained(&trained, ds, c.recognizer.t)?;
        rows.push(SweepRow {
            axis: "component".into(),
            value: name.to_string(),
            dark_metric: dark,
            day_metric: day,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::recognizer::FUSION_PREFIX;
    use crate::toybench::{generate_dataset, BenchConfig};

    /// A configuration small enough for unit-test training runs.
    pub(crate) fn tiny_train_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs_stage1: 2,
            epochs_stage2: 1,
            autoencoder_epochs: 10,
            seed,
            recognizer: RecognizerConfig {
                k: 2,
                prompt_len: 3,
                d_in: 16,
                probe_layers: 1,
                fusion_layers: 1,
                heads: 2,
                mlp_ratio: 2,
                n_classes: 3,
                pseudo_dim: 64,
                encoder: EncoderConfig {
                    d_v: 8,
                    visual_hidden: 8,
                    d_a: 8,
                    n_bands: 8,
                    time_chunks: 2,
                    band_groups: 2,
                    ..EncoderConfig::default()
                },
                ..RecognizerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_dataset(seed: u64) -> DatasetSplit {
        let cfg = BenchConfig {
            n_classes: 3,
            clips_per_class: 8,
            val_clips_per_class: 1,
            test_clips_per_class: 3,
            dark_fraction_train: 0.1,
            unlabeled_pool_size: 6,
            seed,
            ..BenchConfig::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn lambda_zero_matches_poolless_run_bitwise() {
        let ds = tiny_dataset(1);
        let mut cfg = tiny_train_cfg(2);
        cfg.lambda = 0.0;
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let with_pool = train_stage1(&cfg, &ds, &targets).unwrap();

        let mut poolless = ds;
        poolless.pool.clear();
        let empty = prepare_pseudo_targets(&cfg, &poolless).unwrap();
        let without_pool = train_stage1(&cfg, &poolless, &empty).unwrap();

        assert_eq!(
            with_pool.store.subset_hash(|_| true),
            without_pool.store.subset_hash(|_| true),
            "parameters must be bitwise identical"
        );
        for (a, b) in with_pool.log.iter().zip(&without_pool.log) {
            assert_eq!(
                a.total.to_bits(),
                b.total.to_bits(),
                "loss curves must match bitwise"
            );
        }
    }

    #[test]
    fn epoch_step_arithmetic() {
        // 24 labeled clips at batch 8 -> exactly 3 optimizer steps per epoch.
        let ds = tiny_dataset(3);
        let cfg = tiny_train_cfg(4);
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let trained = train_stage1(&cfg, &ds, &targets).unwrap();
        for log in &trained.log {
            assert_eq!(log.steps, 3);
        }
        assert_eq!(trained.log.len(), cfg.epochs_stage1);
    }

    #[test]
    fn seed_determinism_is_bitwise() {
        let ds = tiny_dataset(5);
        let cfg = tiny_train_cfg(6);
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let a = train_stage1(&cfg, &ds, &targets).unwrap();
        let b = train_stage1(&cfg, &ds, &targets).unwrap();
        assert_eq!(a.store.subset_hash(|_| true), b.store.subset_hash(|_| true));
    }

    #[test]
    fn stage2_freezes_the_fusion_transformer() {
        let ds = tiny_dataset(7);
        let cfg = tiny_train_cfg(8);
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let stage1 = train_stage1(&cfg, &ds, &targets).unwrap();
        let before: Vec<(String, u64)> = stage1
            .store
            .iter()
            .map(|(_, n, m)| (n.to_string(), m.bit_hash()))
            .collect();
        let fusion_before = stage1.store.subset_hash(|n| n.starts_with(FUSION_PREFIX));
        let mask = stage2_trainable_mask(&stage1.store, cfg.finetune_classifiers);
        let stage2 = train_stage2(&cfg, &ds, stage1).unwrap();
        let fusion_after = stage2.store.subset_hash(|n| n.starts_with(FUSION_PREFIX));
        assert_eq!(
            fusion_before, fusion_after,
            "fusion transformer must not move"
        );

        // The set of changed tensors is exactly the trainable set.
        for ((name, hash_before), (trainable, (_, _, mat_after))) in
            before.iter().zip(mask.iter().zip(stage2.store.iter()))
        {
            let changed = *hash_before != mat_after.bit_hash();
            assert_eq!(
                changed, *trainable,
                "{name}: changed={changed}, trainable={trainable}"
            );
        }
    }

    #[test]
    fn stage2_zero_epochs_is_identity() {
        let ds = tiny_dataset(9);
        let mut cfg = tiny_train_cfg(10);
        cfg.epochs_stage2 = 0;
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let stage1 = train_stage1(&cfg, &ds, &targets).unwrap();
        let hash = stage1.store.subset_hash(|_| true);
        let stage2 = train_stage2(&cfg, &ds, stage1).unwrap();
        assert_eq!(hash, stage2.store.subset_hash(|_| true));
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let ds = tiny_dataset(11);
        let mut cfg = tiny_train_cfg(12);
        cfg.epochs_stage1 = 3;
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let full = train_stage1(&cfg, &ds, &targets).unwrap();

        let mut short_cfg = cfg.clone();
        short_cfg.epochs_stage1 = 1;
        let partial = train_stage1(&short_cfg, &ds, &targets).unwrap();
        let ckpt = partial.checkpoint("stage1", cfg.fingerprint());
        let resumed = resume_stage1(&cfg, &ds, &targets, &ckpt).unwrap();

        assert_eq!(
            full.store.subset_hash(|_| true),
            resumed.store.subset_hash(|_| true),
            "resumed run must be bitwise identical"
        );
    }

    #[test]
    fn stage2_resume_matches_uninterrupted_run_bitwise() {
        let ds = tiny_dataset(25);
        let mut cfg = tiny_train_cfg(26);
        cfg.epochs_stage2 = 2;
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        // Stage 1 is deterministic, so two runs give identical starting points.
        let full = train_stage2(&cfg, &ds, train_stage1(&cfg, &ds, &targets).unwrap()).unwrap();

        let mut short_cfg = cfg.clone();
        short_cfg.epochs_stage2 = 1;
        let partial =
            train_stage2(&short_cfg, &ds, train_stage1(&cfg, &ds, &targets).unwrap()).unwrap();
        assert_eq!(partial.epoch, 1);
        let ckpt = partial.checkpoint("stage2", cfg.fingerprint());
        let resumed = resume_stage2(&cfg, &ds, &ckpt).unwrap();

        assert_eq!(
            full.store.subset_hash(|_| true),
            resumed.store.subset_hash(|_| true),
            "stage-2 resume must be bitwise identical"
        );
    }

    #[test]
    fn training_loss_decreases() {
        let ds = tiny_dataset(13);
        let mut cfg = tiny_train_cfg(14);
        cfg.epochs_stage1 = 5;
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let trained = train_stage1(&cfg, &ds, &targets).unwrap();
        let first = trained.log.first().unwrap().total;
        let last = trained.log.last().unwrap().total;
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn missing_pseudo_targets_name_the_clips() {
        let ds = tiny_dataset(15);
        let cfg = tiny_train_cfg(16);
        let mut targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let victim = ds.pool[0].id.clone();
        targets.targets.remove(&victim);
        match train_stage1(&cfg, &ds, &targets) {
            Err(e) => assert!(e.to_string().contains(&victim), "{e}"),
            Ok(_) => panic!("missing targets must fail"),
        }
    }

    #[test]
    fn end_to_end_decomposition_sums_to_total() {
        let ds = tiny_dataset(17);
        let cfg = tiny_train_cfg(18);
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let trained = train_end_to_end(&cfg, &ds, &targets).unwrap();
        for log in &trained.log {
            assert!(
                (log.ce + log.pseudo + log.mix - log.total).abs() < 1e-9,
                "decomposition violated: {log:?}"
            );
            assert!(log.mix > 0.0, "mix term must be active");
        }
    }

    #[test]
    fn end_to_end_without_pool_or_mix_reduces_to_supervised() {
        let mut ds = tiny_dataset(19);
        ds.pool.clear();
        let cfg = tiny_train_cfg(20);
        let targets = prepare_pseudo_targets(&cfg, &ds).unwrap();
        let e2e = train_end_to_end(&cfg, &ds, &targets).unwrap();
        let s1 = train_stage1(&cfg, &ds, &targets).unwrap();
        assert_eq!(
            e2e.store.subset_hash(|_| true),
            s1.store.subset_hash(|_| true)
        );
        for log in &e2e.log {
            assert_eq!(log.pseudo, 0.0);
            assert_eq!(log.mix, 0.0);
        }
    }

    #[test]
    fn multi_label_mode_trains_and_reports_hamming() {
        let bench = BenchConfig {
            n_classes: 3,
            clips_per_class: 6,
            val_clips_per_class: 1,
            test_clips_per_class: 3,
            dark_fraction_train: 0.1,
            unlabeled_pool_size: 4,
            multi_label: true,
            seed: 31,
            ..BenchConfig::default()
        };
        let ds = generate_dataset(&bench).unwrap();
        let mut cfg = tiny_train_cfg(31);
        cfg.epochs_stage1 = 1;
        cfg.epochs_stage2 = 1;
        cfg.recognizer.multi_label = true;
        let (trained, _) = train_full(&cfg, &ds).unwrap();
        let model = crate::recognizer::RecognizerModel {
            recognizer: &trained.recognizer,
            store: &trained.store,
        };
        let report = crate::evalkit::evaluate(
            &model,
            &ds.test,
            &crate::evalkit::default_bin_edges(),
            cfg.recognizer.t,
            0,
        )
        .unwrap();
        assert_eq!(report.metric_name, "hamming_distance");
        assert!((0.0..=1.0).contains(&report.overall));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = tiny_train_cfg(21);
        let json = cfg.to_json();
        let back = TrainConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint(), back.fingerprint());
        let other = tiny_train_cfg(22);
        assert_ne!(cfg.fingerprint(), other.fingerprint());
    }

    #[test]
    fn ladder_configs_toggle_components_in_order() {
        let base = tiny_train_cfg(23).recognizer;
        let ladder = ladder_configs(&base);
        assert_eq!(ladder.len(), 4);
        assert_eq!(ladder[0].1.k, 1);
        assert!(ladder[0].1.tie_day_branch);
        assert!(!ladder[0].1.adaptive_encoder);
        assert!(ladder[1].1.adaptive_encoder && !ladder[1].1.adaptive_prompts);
        assert!(ladder[2].1.adaptive_prompts && !ladder[2].1.adaptive_classifiers);
        assert!(ladder[3].1.adaptive_classifiers);
        assert_eq!(ladder[3].1.k, base.k);
    }
}
