//! The darkness-adaptive audio-visual recognizer.
//!
//! A darkness probe reads the visual tokens and emits a branch attention
//! `beta` over K branches. Beta weights K parallel visual projections into the
//! adapted tokens `V`, K learnable prompts into the adaptive prompt `O`, and K
//! classifier heads into the final logits. `[V, A, O]` flows through a shared
//! fusion transformer; the first prompt output token feeds classification, the
//! second feeds the pseudo-label head. Clips with `Y > t` take a dedicated
//! single-branch day path through the same fusion transformer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::clip::Clip;
use crate::encoders::{audio_cells, visual_patches, AudioEncoder, EncoderConfig, VisualEncoder};
use crate::error::{Day2DarkError, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore, TransformerStack};
use crate::rng::normal;
use crate::tensor::Mat;
use rand_chacha::ChaCha8Rng;

/// Branch attention: a probability vector over the K branches.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchAttention(pub Vec<f64>);

impl BranchAttention {
    /// Every weight non-negative, summing to one within 1e-6.
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Day2DarkError::invalid("branch attention must be non-empty"));
        }
        if self.0.iter().any(|b| *b < 0.0) {
            return Err(Day2DarkError::invalid(
                "branch attention has negative weight",
            ));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Day2DarkError::invalid(format!(
                "branch attention sums to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn one_hot(k: usize, hot: usize) -> BranchAttention {
        let mut v = vec![0.0; k];
        v[hot] = 1.0;
        BranchAttention(v)
    }
}

/// Which route a clip took through the recognizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Day,
    Dark,
}

/// Routing control: `Auto` follows the `Y <= t` rule; `ForceDark` pushes a
/// sample through the adaptive path regardless of its illuminance (used when
/// finetuning the darkness-adaptive components on day/dark mixes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Auto,
    ForceDark,
}

/// Structural hyperparameters of the recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    /// Number of darkness branches K.
    pub k: usize,
    /// Tokens per prompt; at least two (prediction + pseudo-label readouts).
    pub prompt_len: usize,
    /// Fusion transformer width.
    pub d_in: usize,
    pub probe_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    /// Output width of the pseudo-label head (64 for the bottleneck target,
    /// the concatenated teacher width in raw-target mode).
    pub pseudo_dim: usize,
    /// Darkness threshold used for routing.
    pub t: f64,
    pub multi_label: bool,
    /// Component toggles; disabling one collapses it to a single shared
    /// branch so the K=1/no-prompt configuration is a vanilla multimodal
    /// transformer.
    pub adaptive_encoder: bool,
    pub adaptive_prompts: bool,
    pub adaptive_classifiers: bool,
    /// Tie the day path to dark branch 0 instead of separate parameters.
    pub tie_day_branch: bool,
    pub encoder: EncoderConfig,
    /// Clip geometry the positional table is built for.
    pub clip_t: usize,
    pub clip_h: usize,
    pub clip_w: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            k: 5,
            prompt_len: 10,
            d_in: 256,
            probe_layers: 3,
            fusion_layers: 6,
            heads: 8,
            mlp_ratio: 4,
            n_classes: 8,
            pseudo_dim: 64,
            t: 40.0,
            multi_label: false,
            adaptive_encoder: true,
            adaptive_prompts: true,
            adaptive_classifiers: true,
            tie_day_branch: false,
            encoder: EncoderConfig::default(),
            clip_t: 8,
            clip_h: 16,
            clip_w: 16,
        }
    }
}

impl RecognizerConfig {
    /// A configuration sized so full training runs finish in tens of seconds
    /// on a laptop CPU: fewer branches, narrower fusion, shallower stacks.
    pub fn desk() -> RecognizerConfig {
        RecognizerConfig {
            k: 3,
            prompt_len: 4,
            d_in: 64,
            probe_layers: 2,
            fusion_layers: 2,
            heads: 4,
            mlp_ratio: 2,
            encoder: EncoderConfig::desk(),
            ..RecognizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Day2DarkError::config("K must be at least 1"));
        }
        if self.prompt_len < 2 {
            return Err(Day2DarkError::config(
                "prompts need at least two tokens (prediction + pseudo-label readouts)",
            ));
        }
        if !self.d_in.is_multiple_of(self.heads) {
            return Err(Day2DarkError::config(format!(
                "d_in {} must be divisible by {} heads",
                self.d_in, self.heads
            )));
        }
        if !self.encoder.d_v.is_multiple_of(4) {
            return Err(Day2DarkError::config(
                "probe width d_v must be divisible by 4 heads",
            ));
        }
        self.encoder.validate()?;
        self.encoder
            .token_layout(self.clip_t, self.clip_h, self.clip_w)?;
        Ok(())
    }

    pub fn n_visual_tokens(&self) -> usize {
        self.encoder
            .n_visual_tokens(self.clip_t, self.clip_h, self.clip_w)
            .expect("validated geometry")
    }

    pub fn n_tokens(&self) -> usize {
        self.n_visual_tokens() + self.encoder.n_audio_tokens() + self.prompt_len
    }

    fn k_proj(&self) -> usize {
        if self.adaptive_encoder {
            self.k
        } else {
            1
        }
    }

    fn k_prompt(&self) -> usize {
        if self.adaptive_prompts {
            self.k
        } else {
            1
        }
    }

    fn k_cls(&self) -> usize {
        if self.adaptive_classifiers {
            self.k
        } else {
            1
        }
    }

    /// Whether any component actually consumes the branch attention.
    pub fn needs_probe(&self) -> bool {
        self.k_proj() > 1 || self.k_prompt() > 1 || self.k_cls() > 1
    }
}

/// All learnable state of the recognizer, as ids into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Recognizer {
    pub cfg: RecognizerConfig,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub probe: TransformerStack,
    pub probe_head: Linear,
    /// `d_a x d_in`, no bias.
    pub audio_projection: ParamId,
    /// K (or 1) matrices `d_v x d_in`, no bias.
    pub projections: Vec<ParamId>,
    /// K (or 1) prompt matrices `l x d_in`.
    pub prompts: Vec<ParamId>,
    pub fusion: TransformerStack,
    pub classifiers: Vec<Linear>,
    pub pseudo_head: Linear,
    day_projection: Option<ParamId>,
    day_prompt: Option<ParamId>,
    day_classifier: Option<Linear>,
    pub pos_embed: ParamId,
    pub seg_visual: ParamId,
    pub seg_audio: ParamId,
    pub seg_prompt: ParamId,
}

/// Prefix of every parameter belonging to the fusion transformer; the
/// stage-2 freeze tests key off parameter names.
pub const FUSION_PREFIX: &str = "fusion.";

impl Recognizer {
    pub fn new(
        cfg: RecognizerConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Recognizer> {
        cfg.validate()?;
        let enc = &cfg.encoder;
        let visual = VisualEncoder::new(store, "visual_enc", enc, rng);
        let audio = AudioEncoder::new(store, "audio_enc", enc, rng);
        let probe = TransformerStack::new(
            store,
            "probe",
            cfg.probe_layers,
            enc.d_v,
            4,
            cfg.mlp_ratio,
            rng,
        );
        let probe_head = Linear::new(store, "probe.head", enc.d_v, cfg.k, rng);
        let proj_std = (1.0 / enc.d_a as f64).sqrt();
        let audio_projection = store.register(
            "audio_proj.w",
            Mat::from_vec(
                enc.d_a,
                cfg.d_in,
                (0..enc.d_a * cfg.d_in)
                    .map(|_| normal(rng) * proj_std)
                    .collect(),
            ),
        );
        let vproj_std = (1.0 / enc.d_v as f64).sqrt();
        let projections = (0..cfg.k_proj())
            .map(|k| {
                store.register(
                    format!("dark.proj{k}.w"),
                    Mat::from_vec(
                        enc.d_v,
                        cfg.d_in,
                        (0..enc.d_v * cfg.d_in)
                            .map(|_| normal(rng) * vproj_std)
                            .collect(),
                    ),
                )
            })
            .collect();
        let prompts = (0..cfg.k_prompt())
            .map(|k| {
                store.register(
                    format!("dark.prompt{k}"),
                    Mat::from_vec(
                        cfg.prompt_len,
                        cfg.d_in,
                        (0..cfg.prompt_len * cfg.d_in)
                            .map(|_| normal(rng) * 0.1)
                            .collect(),
                    ),
                )
            })
            .collect();
        let fusion = TransformerStack::new(
            store,
            "fusion",
            cfg.fusion_layers,
            cfg.d_in,
            cfg.heads,
            cfg.mlp_ratio,
            rng,
        );
        let classifiers = (0..cfg.k_cls())
            .map(|k| Linear::new(store, &format!("dark.cls{k}"), cfg.d_in, cfg.n_classes, rng))
            .collect();
        let pseudo_head = Linear::new(store, "pseudo_head", cfg.d_in, cfg.pseudo_dim, rng);

        let (day_projection, day_prompt, day_classifier) = if cfg.tie_day_branch {
            (None, None, None)
        } else {
            (
                Some(
                    store.register(
                        "day.proj.w",
                        Mat::from_vec(
                            enc.d_v,
                            cfg.d_in,
                            (0..enc.d_v * cfg.d_in)
                                .map(|_| normal(rng) * vproj_std)
                                .collect(),
                        ),
                    ),
                ),
                Some(
                    store.register(
                        "day.prompt",
                        Mat::from_vec(
                            cfg.prompt_len,
                            cfg.d_in,
                            (0..cfg.prompt_len * cfg.d_in)
                                .map(|_| normal(rng) * 0.1)
                                .collect(),
                        ),
                    ),
                ),
                Some(Linear::new(store, "day.cls", cfg.d_in, cfg.n_classes, rng)),
            )
        };

        let n_tokens = cfg.n_tokens();
        let pos_embed = store.register(
            "fusion.pos_embed",
            Mat::from_vec(
                n_tokens,
                cfg.d_in,
                (0..n_tokens * cfg.d_in)
                    .map(|_| normal(rng) * 0.05)
                    .collect(),
            ),
        );
        let seg = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            store.register(
                name.to_string(),
                Mat::from_vec(
                    1,
                    cfg.d_in,
                    (0..cfg.d_in).map(|_| normal(rng) * 0.05).collect(),
                ),
            )
        };
        let seg_visual = seg(store, "fusion.seg_visual", rng);
        let seg_audio = seg(store, "fusion.seg_audio", rng);
        let seg_prompt = seg(store, "fusion.seg_prompt", rng);

        Ok(Recognizer {
            cfg,
            visual,
            audio,
            probe,
            probe_head,
            audio_projection,
            projections,
            prompts,
            fusion,
            classifiers,
            pseudo_head,
            day_projection,
            day_prompt,
            day_classifier,
            pos_embed,
            seg_visual,
            seg_audio,
            seg_prompt,
        })
    }

    pub fn day_projection(&self) -> ParamId {
        self.day_projection.unwrap_or(self.projections[0])
    }

    pub fn day_prompt(&self) -> ParamId {
        self.day_prompt.unwrap_or(self.prompts[0])
    }

    pub fn day_classifier(&self) -> Linear {
        self.day_classifier.unwrap_or(self.classifiers[0])
    }

    /// Darkness probe: visual tokens -> branch attention node (`1 x K`,
    /// softmax normalized).
    pub fn darkness_probe(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        features: NodeId,
    ) -> NodeId {
        let probed = self.probe.forward(tape, bound, store, features);
        let pooled = tape.mean_rows(probed);
        let logits = self.probe_head.forward(tape, bound, store, pooled);
        tape.softmax_rows(logits)
    }

    /// Split a `1 x K` attention node into K scalar nodes.
    fn beta_scalars(&self, tape: &mut Tape, beta: NodeId, k: usize) -> Vec<NodeId> {
        (0..k).map(|i| tape.slice_cols(beta, i, i + 1)).collect()
    }

    /// `V = sum_k beta_k (F E^v_k)`.
    pub fn adaptive_encode(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        features: NodeId,
        beta: Option<NodeId>,
    ) -> NodeId {
        if self.projections.len() == 1 {
            let e = bound.node(tape, store, self.projections[0]);
            return tape.matmul(features, e);
        }
        let beta = beta.expect("adaptive encoder needs branch attention");
        let betas = self.beta_scalars(tape, beta, self.projections.len());
        let mut acc: Option<NodeId> = None;
        for (proj, b) in self.projections.iter().zip(betas) {
            let e = bound.node(tape, store, *proj);
            let fk = tape.matmul(features, e);
            let weighted = tape.mul_scalar(fk, b);
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted),
                None => weighted,
            });
        }
        acc.unwrap()
    }

    /// `O = sum_k beta_k O_k`.
    pub fn generate_prompt(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        beta: Option<NodeId>,
    ) -> NodeId {
        if self.prompts.len() == 1 {
            return bound.node(tape, store, self.prompts[0]);
        }
        let beta = beta.expect("adaptive prompts need branch attention");
        let betas = self.beta_scalars(tape, beta, self.prompts.len());
        let mut acc: Option<NodeId> = None;
        for (prompt, b) in self.prompts.iter().zip(betas) {
            let o = bound.node(tape, store, *prompt);
            let weighted = tape.mul_scalar(o, b);
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted),
                None => weighted,
            });
        }
        acc.unwrap()
    }

    /// Concatenate `[V, A, O]` with positional and modality-segment
    /// embeddings and run the fusion transformer. Token positions are
    /// preserved: the prompt occupies the final `l` rows.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        v: NodeId,
        a: NodeId,
        o: NodeId,
    ) -> NodeId {
        let seg_v = bound.node(tape, store, self.seg_visual);
        let seg_a = bound.node(tape, store, self.seg_audio);
        let seg_o = bound.node(tape, store, self.seg_prompt);
        let v = tape.add_row_broadcast(v, seg_v);
        let a = tape.add_row_broadcast(a, seg_a);
        let o = tape.add_row_broadcast(o, seg_o);
        let x = tape.concat_rows(&[v, a, o]);
        let pos = bound.node(tape, store, self.pos_embed);
        let x = tape.add(x, pos);
        self.fusion.forward(tape, bound, store, x)
    }

    /// Per-branch logits from the first prompt output token, combined by
    /// beta. Multi-label weighting happens on logits, before any sigmoid.
    pub fn classify(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        fused: NodeId,
        beta: Option<NodeId>,
    ) -> (NodeId, Vec<NodeId>) {
        let first_prompt = self.cfg.n_visual_tokens() + self.cfg.encoder.n_audio_tokens();
        let tok = tape.slice_rows(fused, first_prompt, first_prompt + 1);
        if self.classifiers.len() == 1 {
            let y = self.classifiers[0].forward(tape, bound, store, tok);
            return (y, vec![y]);
        }
        let beta = beta.expect("adaptive classifiers need branch attention");
        let betas = self.beta_scalars(tape, beta, self.classifiers.len());
        let mut per_branch = Vec::with_capacity(self.classifiers.len());
        let mut acc: Option<NodeId> = None;
        for (cls, b) in self.classifiers.iter().zip(betas) {
            let yk = cls.forward(tape, bound, store, tok);
            per_branch.push(yk);
            let weighted = tape.mul_scalar(yk, b);
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted),
                None => weighted,
            });
        }
        (acc.unwrap(), per_branch)
    }

    fn pseudo_from(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        fused: NodeId,
    ) -> NodeId {
        let second_prompt = self.cfg.n_visual_tokens() + self.cfg.encoder.n_audio_tokens() + 1;
        let tok = tape.slice_rows(fused, second_prompt, second_prompt + 1);
        self.pseudo_head.forward(tape, bound, store, tok)
    }

    /// Run one clip through the recognizer on a tape. `route` decides whether
    /// the `Y <= t` rule or a forced dark path applies.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        input: &ForwardInput,
        route: Route,
    ) -> ForwardNodes {
        let patches = tape.leaf(input.patches.clone());
        let cells = tape.leaf(input.cells.clone());
        let features = self.visual.forward(tape, bound, store, patches);
        let a_tokens = self.audio.forward(tape, bound, store, cells);
        let e_a = bound.node(tape, store, self.audio_projection);
        let a = tape.matmul(a_tokens, e_a);

        let day = matches!(route, Route::Auto) && input.clip_y > self.cfg.t;
        if day {
            let e = bound.node(tape, store, self.day_projection());
            let v = tape.matmul(features, e);
            let o = bound.node(tape, store, self.day_prompt());
            let fused = self.fuse(tape, bound, store, v, a, o);
            let first_prompt = self.cfg.n_visual_tokens() + self.cfg.encoder.n_audio_tokens();
            let tok = tape.slice_rows(fused, first_prompt, first_prompt + 1);
            let logits = self.day_classifier().forward(tape, bound, store, tok);
            let pseudo = self.pseudo_from(tape, bound, store, fused);
            ForwardNodes {
                logits,
                per_branch_logits: vec![logits],
                pseudo,
                beta: None,
                path: Path::Day,
            }
        } else {
            let beta = if self.cfg.needs_probe() {
                Some(self.darkness_probe(tape, bound, store, features))
            } else {
                None
            };
            let v = self.adaptive_encode(tape, bound, store, features, beta);
            let o = self.generate_prompt(tape, bound, store, beta);
            let fused = self.fuse(tape, bound, store, v, a, o);
            let (logits, per_branch_logits) = self.classify(tape, bound, store, fused, beta);
            let pseudo = self.pseudo_from(tape, bound, store, fused);
            ForwardNodes {
                logits,
                per_branch_logits,
                pseudo,
                beta,
                path: Path::Dark,
            }
        }
    }

    /// Inference entry point: compute frontends, run a throwaway tape, return
    /// plain values.
    pub fn predict(&self, store: &ParamStore, clip: &Clip) -> Result<RecognizerOutput> {
        let input = ForwardInput::from_clip(&self.cfg.encoder, clip)?;
        let mut tape = Tape::new();
        let mut bound = Bound::new(store);
        let nodes = self.forward_on_tape(&mut tape, &mut bound, store, &input, Route::Auto);
        Ok(RecognizerOutput::from_nodes(&tape, &nodes, self.cfg.k))
    }
}

/// Precomputed deterministic frontends for one clip.
#[derive(Debug, Clone)]
pub struct ForwardInput {
    pub patches: Mat,
    pub cells: Mat,
    pub clip_y: f64,
}

impl ForwardInput {
    pub fn from_clip(enc: &EncoderConfig, clip: &Clip) -> Result<ForwardInput> {
        Ok(ForwardInput {
            patches: visual_patches(enc, clip)?,
            cells: audio_cells(enc, &clip.audio)?,
            clip_y: clip.clip_y,
        })
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardNodes {
    pub logits: NodeId,
    pub per_branch_logits: Vec<NodeId>,
    pub pseudo: NodeId,
    pub beta: Option<NodeId>,
    pub path: Path,
}

/// Plain-value outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct RecognizerOutput {
    pub logits: Vec<f64>,
    pub pseudo: Vec<f64>,
    pub beta: BranchAttention,
    pub path: Path,
}

impl RecognizerOutput {
    pub fn from_nodes(tape: &Tape, nodes: &ForwardNodes, k: usize) -> RecognizerOutput {
        let beta = match nodes.beta {
            Some(b) => BranchAttention(tape.value(b).data.clone()),
            // Day routing and the vanilla configuration report a degenerate
            // one-hot attention on branch 0.
            None => BranchAttention::one_hot(k, 0),
        };
        RecognizerOutput {
            logits: tape.value(nodes.logits).data.clone(),
            pseudo: tape.value(nodes.pseudo).data.clone(),
            beta,
            path: nodes.path,
        }
    }
}

// ---------------------------------------------------------------------------
// Models as seen by evaluation and filtering
// ---------------------------------------------------------------------------

/// Anything that maps a clip to class logits.
pub trait Model: Sync {
    fn n_classes(&self) -> usize;
    fn multi_label(&self) -> bool;
    fn logits(&self, clip: &Clip) -> Result<Vec<f64>>;

    /// Per-class confidences: softmax for single-label, sigmoid per class for
    /// multi-label.
    fn confidences(&self, clip: &Clip) -> Result<Vec<f64>> {
        let logits = self.logits(clip)?;
        if self.multi_label() {
            Ok(logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
        } else {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Ok(exps.into_iter().map(|e| e / sum).collect())
        }
    }
}

/// The recognizer bound to its parameters.
pub struct RecognizerModel<'a> {
    pub recognizer: &'a Recognizer,
    pub store: &'a ParamStore,
}

impl Model for RecognizerModel<'_> {
    fn n_classes(&self) -> usize {
        self.recognizer.cfg.n_classes
    }

    fn multi_label(&self) -> bool {
        self.recognizer.cfg.multi_label
    }

    fn logits(&self, clip: &Clip) -> Result<Vec<f64>> {
        Ok(self.recognizer.predict(self.store, clip)?.logits)
    }
}

// ---------------------------------------------------------------------------
// Visual-only baseline
// ---------------------------------------------------------------------------

/// Mean-pooled toy visual features into a linear head; the reference point
/// the adaptive recognizer is measured against.
#[derive(Debug, Clone)]
pub struct VisualOnly {
    pub encoder_cfg: EncoderConfig,
    pub n_classes: usize,
    pub multi_label: bool,
    pub encoder: VisualEncoder,
    pub head: Linear,
}

impl VisualOnly {
    pub fn new(
        encoder_cfg: EncoderConfig,
        n_classes: usize,
        multi_label: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> VisualOnly {
        let encoder = VisualEncoder::new(store, "visual_enc", &encoder_cfg, rng);
        let head = Linear::new(store, "visual_head", encoder_cfg.d_v, n_classes, rng);
        VisualOnly {
            encoder_cfg,
            n_classes,
            multi_label,
            encoder,
            head,
        }
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        patches: &Mat,
    ) -> NodeId {
        let x = tape.leaf(patches.clone());
        let f = self.encoder.forward(tape, bound, store, x);
        let pooled = tape.mean_rows(f);
        let pooled = tape.relu(pooled);
        self.head.forward(tape, bound, store, pooled)
    }
}

/// A visual-only model bound to its parameters.
pub struct VisualOnlyModel<'a> {
    pub model: &'a VisualOnly,
    pub store: &'a ParamStore,
}

impl Model for VisualOnlyModel<'_> {
    fn n_classes(&self) -> usize {
        self.model.n_classes
    }

    fn multi_label(&self) -> bool {
        self.model.multi_label
    }

    fn logits(&self, clip: &Clip) -> Result<Vec<f64>> {
        let patches = visual_patches(&self.model.encoder_cfg, clip)?;
        let mut tape = Tape::new();
        let mut bound = Bound::new(self.store);
        let y = self
            .model
            .forward_on_tape(&mut tape, &mut bound, self.store, &patches);
        Ok(tape.value(y).data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::toybench::{generate_clip, BenchConfig};

    /// Small configuration used across the unit tests.
    fn tiny_cfg() -> RecognizerConfig {
        RecognizerConfig {
            k: 3,
            prompt_len: 4,
            d_in: 16,
            probe_layers: 1,
            fusion_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            n_classes: 4,
            pseudo_dim: 8,
            encoder: EncoderConfig {
                d_v: 8,
                visual_hidden: 8,
                d_a: 8,
                time_chunks: 2,
                band_groups: 2,
                n_bands: 8,
                ..EncoderConfig::default()
            },
            ..RecognizerConfig::default()
        }
    }

    fn tiny_bench() -> BenchConfig {
        BenchConfig {
            n_classes: 4,
            ..BenchConfig::default()
        }
    }

    fn build(cfg: RecognizerConfig, seed: u64) -> (Recognizer, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let rec = Recognizer::new(cfg, &mut store, &mut rng).unwrap();
        (rec, store)
    }

    fn dark_clip(seed: u64) -> Clip {
        generate_clip(&tiny_bench(), 1, 20.0, seed).unwrap()
    }

    #[test]
    fn config_rejects_short_prompts_and_zero_k() {
        let mut cfg = tiny_cfg();
        cfg.prompt_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zeroed_probe_head_gives_uniform_attention() {
        let (rec, mut store) = build(tiny_cfg(), 1);
        for v in store.get_mut(rec.probe_head.w).data.iter_mut() {
            *v = 0.0;
        }
        let out = rec.predict(&store, &dark_clip(3)).unwrap();
        for b in &out.beta.0 {
            assert!((b - 1.0 / 3.0).abs() < 1e-12, "{:?}", out.beta);
        }
        out.beta.validate().unwrap();
    }

    #[test]
    fn branch_attention_is_deterministic() {
        let (rec, store) = build(tiny_cfg(), 2);
        let clip = dark_clip(4);
        let a = rec.predict(&store, &clip).unwrap();
        let b = rec.predict(&store, &clip).unwrap();
        assert_eq!(a.beta.0, b.beta.0);
        assert_eq!(a.logits, b.logits);
        a.beta.validate().unwrap();
    }

    // -- Layer-by-layer forward oracle -------------------------------------
    //
    // An independent plain-math re-implementation of the transformer forward
    // used to cross-check the tape-based path.

    fn naive_layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> Mat {
        let mut out = x.clone();
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / x.cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for c in 0..x.cols {
                out.data[r * x.cols + c] = (row[c] - mean) * inv * gain.data[c] + bias.data[c];
            }
        }
        out
    }

    fn naive_linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
        let mut y = x.matmul(w);
        for r in 0..y.rows {
            for c in 0..y.cols {
                y.data[r * y.cols + c] += b.data[c];
            }
        }
        y
    }

    fn naive_softmax_rows(x: &Mat) -> Mat {
        let mut out = x.clone();
        for r in 0..x.rows {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..x.cols {
                out.data[r * x.cols + c] = exps[c] / sum;
            }
        }
        out
    }

    fn naive_gelu(x: &Mat) -> Mat {
        x.map(|v| 0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh()))
    }

    fn p<'s>(store: &'s ParamStore, name: &str) -> &'s Mat {
        store.get(
            store
                .id_of(name)
                .unwrap_or_else(|| panic!("missing param {name}")),
        )
    }

    fn naive_encoder_layer(store: &ParamStore, prefix: &str, heads: usize, x: &Mat) -> Mat {
        let normed = naive_layer_norm(
            x,
            p(store, &format!("{prefix}.ln1.gain")),
            p(store, &format!("{prefix}.ln1.bias")),
        );
        let q = naive_linear(
            &normed,
            p(store, &format!("{prefix}.attn.wq.w")),
            p(store, &format!("{prefix}.attn.wq.b")),
        );
        let k = naive_linear(
            &normed,
            p(store, &format!("{prefix}.attn.wk.w")),
            p(store, &format!("{prefix}.attn.wk.b")),
        );
        let v = naive_linear(
            &normed,
            p(store, &format!("{prefix}.attn.wv.w")),
            p(store, &format!("{prefix}.attn.wv.b")),
        );
        let dim = x.cols;
        let hd = dim / heads;
        let mut ctx = Mat::zeros(x.rows, dim);
        for h in 0..heads {
            let slice = |m: &Mat| {
                let mut out = Mat::zeros(m.rows, hd);
                for r in 0..m.rows {
                    out.row_mut(r)
                        .copy_from_slice(&m.row(r)[h * hd..(h + 1) * hd]);
                }
                out
            };
            let (qh, kh, vh) = (slice(&q), slice(&k), slice(&v));
            let scores = qh.matmul(&kh.transpose()).scale(1.0 / (hd as f64).sqrt());
            let probs = naive_softmax_rows(&scores);
            let oh = probs.matmul(&vh);
            for r in 0..x.rows {
                ctx.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(oh.row(r));
            }
        }
        let attended = naive_linear(
            &ctx,
            p(store, &format!("{prefix}.attn.wo.w")),
            p(store, &format!("{prefix}.attn.wo.b")),
        );
        let x = x.add(&attended).unwrap();
        let normed = naive_layer_norm(
            &x,
            p(store, &format!("{prefix}.ln2.gain")),
            p(store, &format!("{prefix}.ln2.bias")),
        );
        let hidden = naive_gelu(&naive_linear(
            &normed,
            p(store, &format!("{prefix}.fc1.w")),
            p(store, &format!("{prefix}.fc1.b")),
        ));
        let mlp = naive_linear(
            &hidden,
            p(store, &format!("{prefix}.fc2.w")),
            p(store, &format!("{prefix}.fc2.b")),
        );
        x.add(&mlp).unwrap()
    }

    fn naive_stack(store: &ParamStore, prefix: &str, depth: usize, heads: usize, x: &Mat) -> Mat {
        let mut x = x.clone();
        for i in 0..depth {
            x = naive_encoder_layer(store, &format!("{prefix}.layer{i}"), heads, &x);
        }
        naive_layer_norm(
            &x,
            p(store, &format!("{prefix}.final_ln.gain")),
            p(store, &format!("{prefix}.final_ln.bias")),
        )
    }

    #[test]
    fn probe_matches_step_by_step_recomputation() {
        let (rec, store) = build(tiny_cfg(), 5);
        let clip = dark_clip(6);
        let input = ForwardInput::from_clip(&rec.cfg.encoder, &clip).unwrap();

        // Tape path.
        let mut tape = Tape::new();
        let mut bound = Bound::new(&store);
        let patches = tape.leaf(input.patches.clone());
        let f = rec.visual.forward(&mut tape, &mut bound, &store, patches);
        let beta = rec.darkness_probe(&mut tape, &mut bound, &store, f);
        let beta_tape = tape.value(beta).clone();
        let f_val = tape.value(f).clone();

        // Independent recomputation.
        let probed = naive_stack(&store, "probe", rec.cfg.probe_layers, 4, &f_val);
        let mut pooled = Mat::zeros(1, probed.cols);
        for r in 0..probed.rows {
            for c in 0..probed.cols {
                pooled.data[c] += probed.at(r, c) / probed.rows as f64;
            }
        }
        let logits = naive_linear(
            &pooled,
            p(&store, "probe.head.w"),
            p(&store, "probe.head.b"),
        );
        let beta_naive = naive_softmax_rows(&logits);
        for (a, b) in beta_tape.data.iter().zip(&beta_naive.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fusion_matches_step_by_step_recomputation() {
        let (rec, store) = build(tiny_cfg(), 7);
        let clip = dark_clip(8);
        let input = ForwardInput::from_clip(&rec.cfg.encoder, &clip).unwrap();
        let mut tape = Tape::new();
        let mut bound = Bound::new(&store);
        let v_leaf = tape.leaf(Mat::filled(rec.cfg.n_visual_tokens(), rec.cfg.d_in, 0.1));
        let a_leaf = tape.leaf(Mat::filled(
            rec.cfg.encoder.n_audio_tokens(),
            rec.cfg.d_in,
            -0.2,
        ));
        let o_leaf = tape.leaf(Mat::filled(rec.cfg.prompt_len, rec.cfg.d_in, 0.3));
        let fused = rec.fuse(&mut tape, &mut bound, &store, v_leaf, a_leaf, o_leaf);
        let fused_tape = tape.value(fused).clone();
        let _ = input;

        // Independent recomputation of segment/positional add + stack.
        let add_seg = |m: &Mat, seg: &Mat| {
            let mut out = m.clone();
            for r in 0..m.rows {
                for c in 0..m.cols {
                    out.data[r * m.cols + c] += seg.data[c];
                }
            }
            out
        };
        let v = add_seg(
            &Mat::filled(rec.cfg.n_visual_tokens(), rec.cfg.d_in, 0.1),
            p(&store, "fusion.seg_visual"),
        );
        let a = add_seg(
            &Mat::filled(rec.cfg.encoder.n_audio_tokens(), rec.cfg.d_in, -0.2),
            p(&store, "fusion.seg_audio"),
        );
        let o = add_seg(
            &Mat::filled(rec.cfg.prompt_len, rec.cfg.d_in, 0.3),
            p(&store, "fusion.seg_prompt"),
        );
        let mut data = Vec::new();
        data.extend_from_slice(&v.data);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&o.data);
        let x = Mat::from_vec(rec.cfg.n_tokens(), rec.cfg.d_in, data)
            .add(p(&store, "fusion.pos_embed"))
            .unwrap();
        let naive = naive_stack(&store, "fusion", rec.cfg.fusion_layers, rec.cfg.heads, &x);
        assert_eq!(fused_tape.rows, rec.cfg.n_tokens());
        for (a, b) in fused_tape.data.iter().zip(&naive.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fuse_preserves_token_count_bookkeeping() {
        // 64 visual + 16 audio + 10 prompt tokens = 90 outputs.
        let cfg = RecognizerConfig {
            clip_t: 8,
            clip_h: 32,
            clip_w: 32,
            d_in: 16,
            probe_layers: 1,
            fusion_layers: 1,
            heads: 2,
            mlp_ratio: 1,
            encoder: EncoderConfig {
                d_v: 8,
                visual_hidden: 8,
                d_a: 8,
                ..EncoderConfig::default()
            },
            ..RecognizerConfig::default()
        };
        assert_eq!(cfg.n_visual_tokens(), 64);
        assert_eq!(cfg.encoder.n_audio_tokens(), 16);
        assert_eq!(cfg.n_tokens(), 90);
        let (rec, store) = build(cfg, 9);
        let mut tape = Tape::new();
        let mut bound = Bound::new(&store);
        let v = tape.leaf(Mat::zeros(64, 16));
        let a = tape.leaf(Mat::zeros(16, 16));
        let o = tape.leaf(Mat::zeros(10, 16));
        let fused = rec.fuse(&mut tape, &mut bound, &store, v, a, o);
        assert_eq!(tape.value(fused).rows, 90);
    }

    fn forced_dark_output(rec: &Recognizer, store: &ParamStore, clip: &Clip) -> RecognizerOutput {
        let input = ForwardInput::from_clip(&rec.cfg.encoder, clip).unwrap();
        let mut tape = Tape::new();
        let mut bound = Bound::new(store);
        let nodes = rec.forward_on_tape(&mut tape, &mut bound, store, &input, Route::ForceDark);
        RecognizerOutput::from_nodes(&tape, &nodes, rec.cfg.k)
    }

    #[test]
    fn one_hot_attention_selects_single_branch_exactly() {
        let (rec, mut store) = build(tiny_cfg(), 10);
        let clip = dark_clip(11);
        for hot in 0..3 {
            // Force the probe head to emit an overwhelming logit for `hot`,
            // making beta numerically exactly one-hot.
            for v in store.get_mut(rec.probe_head.w).data.iter_mut() {
                *v = 0.0;
            }
            let bias = rec.probe_head.b;
            let b = store.get_mut(bias);
            for (i, v) in b.data.iter_mut().enumerate() {
                *v = if i == hot { 10_000.0 } else { 0.0 };
            }
            let out = rec.predict(&store, &clip).unwrap();
            assert_eq!(out.beta.0[hot], 1.0, "beta must saturate");

            // Independent single-branch forward: collapse to branch `hot`.
            let single = RecognizerConfig {
                k: 1,
                adaptive_encoder: false,
                adaptive_prompts: false,
                adaptive_classifiers: false,
                ..rec.cfg.clone()
            };
            let mut single_store = ParamStore::new();
            let mut rng = rng_from_seed(0);
            let single_rec = Recognizer::new(single, &mut single_store, &mut rng).unwrap();
            // Copy the selected branch and shared parts into the collapsed model.
            let copy = |dst: &mut ParamStore, dst_name: &str, src_name: &str| {
                let sid = store.id_of(src_name).unwrap();
                let did = dst.id_of(dst_name).unwrap();
                *dst.get_mut(did) = store.get(sid).clone();
            };
            for (_, name, _) in store.clone().iter() {
                if let Some(did) = single_store.id_of(name) {
                    *single_store.get_mut(did) = store.get(store.id_of(name).unwrap()).clone();
                }
            }
            copy(
                &mut single_store,
                "dark.proj0.w",
                &format!("dark.proj{hot}.w"),
            );
            copy(
                &mut single_store,
                "dark.prompt0",
                &format!("dark.prompt{hot}"),
            );
            copy(
                &mut single_store,
                "dark.cls0.w",
                &format!("dark.cls{hot}.w"),
            );
            copy(
                &mut single_store,
                "dark.cls0.b",
                &format!("dark.cls{hot}.b"),
            );
            let expect = forced_dark_output(&single_rec, &single_store, &clip);
            assert_eq!(out.logits, expect.logits, "hot branch {hot}");
        }
    }

    #[test]
    fn equal_branches_make_output_independent_of_beta() {
        let (rec, mut store) = build(tiny_cfg(), 12);
        // Overwrite every branch with branch 0's parameters.
        for k in 1..3 {
            for (a, b) in [
                (format!("dark.proj{k}.w"), "dark.proj0.w".to_string()),
                (format!("dark.prompt{k}"), "dark.prompt0".to_string()),
                (format!("dark.cls{k}.w"), "dark.cls0.w".to_string()),
                (format!("dark.cls{k}.b"), "dark.cls0.b".to_string()),
            ] {
                let src = store.id_of(&b).unwrap();
                let val = store.get(src).clone();
                let dst = store.id_of(&a).unwrap();
                *store.get_mut(dst) = val;
            }
        }
        let clip = dark_clip(13);
        let base = rec.predict(&store, &clip).unwrap();
        // Perturb the probe head to move beta; logits must not budge beyond
        // floating noise.
        let head_w = rec.probe_head.w;
        for v in store.get_mut(head_w).data.iter_mut() {
            *v += 0.7;
        }
        let moved = rec.predict(&store, &clip).unwrap();
        assert_ne!(base.beta.0, moved.beta.0);
        for (a, b) in base.logits.iter().zip(&moved.logits) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn output_lies_in_convex_hull_of_branch_logits() {
        let (rec, store) = build(tiny_cfg(), 14);
        for seed in 0..10 {
            let clip = generate_clip(&tiny_bench(), (seed % 4) as usize, 15.0 + seed as f64, seed)
                .unwrap();
            let input = ForwardInput::from_clip(&rec.cfg.encoder, &clip).unwrap();
            let mut tape = Tape::new();
            let mut bound = Bound::new(&store);
            let nodes =
                rec.forward_on_tape(&mut tape, &mut bound, &store, &input, Route::ForceDark);
            let combined = tape.value(nodes.logits);
            for c in 0..rec.cfg.n_classes {
                let per: Vec<f64> = nodes
                    .per_branch_logits
                    .iter()
                    .map(|n| tape.value(*n).data[c])
                    .collect();
                let min = per.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let y = combined.data[c];
                assert!(
                    y >= min - 1e-9 && y <= max + 1e-9,
                    "class {c}: {y} outside [{min}, {max}]"
                );
            }
        }
    }

    #[test]
    fn routing_follows_the_threshold_boundary() {
        let (rec, store) = build(tiny_cfg(), 15);
        let mut clip = dark_clip(16);
        clip.clip_y = 50.0;
        assert_eq!(rec.predict(&store, &clip).unwrap().path, Path::Day);
        clip.clip_y = 40.0;
        assert_eq!(rec.predict(&store, &clip).unwrap().path, Path::Dark);
    }

    #[test]
    fn tied_single_branch_day_and_dark_paths_agree() {
        let cfg = RecognizerConfig {
            k: 1,
            adaptive_encoder: false,
            adaptive_prompts: false,
            adaptive_classifiers: false,
            tie_day_branch: true,
            ..tiny_cfg()
        };
        let (rec, store) = build(cfg, 17);
        let mut clip = dark_clip(18);
        clip.clip_y = 90.0; // day routing
        let day = rec.predict(&store, &clip).unwrap();
        assert_eq!(day.path, Path::Day);
        let dark = forced_dark_output(&rec, &store, &clip);
        assert_eq!(day.logits, dark.logits);
        assert_eq!(day.pseudo, dark.pseudo);
    }

    #[test]
    fn pseudo_head_present_on_both_paths() {
        let (rec, store) = build(tiny_cfg(), 19);
        let mut clip = dark_clip(20);
        clip.clip_y = 100.0;
        let day = rec.predict(&store, &clip).unwrap();
        assert_eq!(day.pseudo.len(), rec.cfg.pseudo_dim);
        clip.clip_y = 10.0;
        let dark = rec.predict(&store, &clip).unwrap();
        assert_eq!(dark.pseudo.len(), rec.cfg.pseudo_dim);
    }

    #[test]
    fn visual_only_ignores_audio() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(20);
        let vo = VisualOnly::new(EncoderConfig::default(), 4, false, &mut store, &mut rng);
        let clip = dark_clip(21);
        let mut silent = clip.clone();
        for s in silent.audio.samples.iter_mut() {
            *s = 0.0;
        }
        let m = VisualOnlyModel {
            model: &vo,
            store: &store,
        };
        assert_eq!(m.logits(&clip).unwrap(), m.logits(&silent).unwrap());
        assert_eq!(m.logits(&clip).unwrap().len(), 4);
    }
}
