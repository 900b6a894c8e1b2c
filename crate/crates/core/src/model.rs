//! The full network: frozen feature extractor, semantic projection,
//! support/query interaction, and the segmentation head, assembled on one
//! differentiation tape per episode.
//!
//! The extractor runs outside the tape, so its weights can never receive
//! gradients; everything else registers as trainable leaves in a fixed
//! traversal order shared by initialization, checkpointing, and the
//! optimizer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Archive;
use crate::coattention::{interact_on_tape, BlockParams, BlockVars, Variant};
use crate::decoder::{
    decode_on_tape, he_conv, pixel_probabilities, xavier_conv, DecoderConfig, DecoderParams,
    DecoderVars, SegmentationOutput,
};
use crate::encoder::{Encoder, SequentialCnn};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng;
use crate::scalar::Scalar;
use crate::semantics::{project_on_tape, ProjectionVars, SemanticProjection, WordEmbedding};
use crate::stacker::{stack_forward_on_tape, StackConfig, StackParams, StackVars, StageParams};
use crate::tensor::Tensor;

/// How support information reaches the query stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    /// No attention: the query map is concatenated with a pooled summary of
    /// the support maps (or with the tiled semantic vector alone when the
    /// variant is semantic-only).
    Conditioning,
    /// One attention block between the supports and the query.
    CoAttention,
    /// The attention block iterated with residual reductions.
    StackedCoAttention,
}

/// Which frozen feature extractor to build.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderChoice {
    /// Small random stride-8 network, fully determined by its own seed.
    Tiny { channels: usize, seed: u64 },
    /// Archive produced by [`SequentialCnn::save`] or an external converter.
    FromFile { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub interaction: Interaction,
    pub encoder: EncoderChoice,
    /// Input width of the word-embedding projection.
    pub embed_dim: usize,
    /// Output width d of the projection; the tiled semantic channels.
    pub semantic_dim: usize,
    pub stack: StackConfig,
    pub decoder: DecoderConfig,
    /// Gate the support-side summaries with their own convolution instead of
    /// sharing the query gate.
    pub separate_support_gate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::VisualSemantic,
            interaction: Interaction::StackedCoAttention,
            encoder: EncoderChoice::Tiny {
                channels: 16,
                seed: 0,
            },
            embed_dim: 300,
            semantic_dim: 256,
            stack: StackConfig {
                depth: 2,
                share_weights: false,
            },
            decoder: DecoderConfig::default(),
            separate_support_gate: false,
        }
    }
}

impl ModelConfig {
    /// Applies the semantic-only coercion: that variant has no affinity, so
    /// its interaction is always plain conditioning.
    pub fn normalized(mut self) -> Self {
        if self.variant == Variant::SemanticOnly {
            self.interaction = Interaction::Conditioning;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::SemanticOnly && self.interaction != Interaction::Conditioning {
            return Err(Error::Config(
                "semantic-only variant supports no affinity; use the conditioning interaction"
                    .into(),
            ));
        }
        if self.variant.uses_semantics() && (self.embed_dim == 0 || self.semantic_dim == 0) {
            return Err(Error::Config(
                "semantic variants need positive embed_dim and semantic_dim".into(),
            ));
        }
        if let EncoderChoice::Tiny { channels, .. } = self.encoder {
            if channels == 0 {
                return Err(Error::Config("encoder needs at least one channel".into()));
            }
        }
        if self.interaction == Interaction::StackedCoAttention {
            self.stack.validate()?;
        }
        self.decoder.validate()
    }

    /// Semantic channels appended to each feature map, zero for the
    /// visual-only variant.
    fn tiled_dim(&self) -> usize {
        if self.variant == Variant::VisualSemantic {
            self.semantic_dim
        } else {
            0
        }
    }
}

/// Trainable parameters grouped by stage.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub projection: Option<SemanticProjection<S>>,
    pub interaction: InteractionParams<S>,
    pub decoder: DecoderParams<S>,
}

#[derive(Clone, Debug)]
pub enum InteractionParams<S: Scalar> {
    /// Fusion convolution is present only for the semantic-only variant.
    Conditioning {
        fusion: Option<(Tensor<S>, Tensor<S>)>,
    },
    CoAttention(BlockParams<S>),
    Stacked(StackParams<S>),
}

impl<S: Scalar> ModelParams<S> {
    /// Visits every trainable parameter with its name. Traversal order is
    /// the contract shared with [`ModelParams::leaves`].
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<S>)) {
        if let Some(p) = &self.projection {
            p.visit(f);
        }
        match &self.interaction {
            InteractionParams::Conditioning { fusion } => {
                if let Some((w, b)) = fusion {
                    f("interact.fusion.weight", w);
                    f("interact.fusion.bias", b);
                }
            }
            InteractionParams::CoAttention(block) => block.visit("interact.block", f),
            InteractionParams::Stacked(stack) => stack.visit(f),
        }
        self.decoder.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        if let Some(p) = &mut self.projection {
            p.visit_mut(f);
        }
        match &mut self.interaction {
            InteractionParams::Conditioning { fusion } => {
                if let Some((w, b)) = fusion {
                    f("interact.fusion.weight", w);
                    f("interact.fusion.bias", b);
                }
            }
            InteractionParams::CoAttention(block) => block.visit_mut("interact.block", f),
            InteractionParams::Stacked(stack) => stack.visit_mut(f),
        }
        self.decoder.visit_mut(f);
    }

    /// Registers every parameter as a trainable leaf, in `visit` order.
    pub fn leaves(&self, tape: &mut Tape<S>) -> ModelVars {
        ModelVars {
            projection: self.projection.as_ref().map(|p| p.leaves(tape)),
            interaction: match &self.interaction {
                InteractionParams::Conditioning { fusion } => InteractionVars::Conditioning {
                    fusion: fusion
                        .as_ref()
                        .map(|(w, b)| (tape.leaf(w.clone(), true), tape.leaf(b.clone(), true))),
                },
                InteractionParams::CoAttention(block) => {
                    InteractionVars::CoAttention(block.leaves(tape))
                }
                InteractionParams::Stacked(stack) => InteractionVars::Stacked(stack.leaves(tape)),
            },
            decoder: self.decoder.leaves(tape),
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }
}

/// Tape-side handles, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub projection: Option<ProjectionVars>,
    pub interaction: InteractionVars,
    pub decoder: DecoderVars,
}

#[derive(Clone, Debug)]
pub enum InteractionVars {
    Conditioning { fusion: Option<(Var, Var)> },
    CoAttention(BlockVars),
    Stacked(StackVars),
}

impl ModelVars {
    /// Flat parameter list in `visit` order.
    pub fn trainable(&self, out: &mut Vec<Var>) {
        if let Some(p) = &self.projection {
            p.trainable(out);
        }
        match &self.interaction {
            InteractionVars::Conditioning { fusion } => {
                if let Some((w, b)) = fusion {
                    out.push(*w);
                    out.push(*b);
                }
            }
            InteractionVars::CoAttention(block) => block.trainable(out),
            InteractionVars::Stacked(stack) => stack.trainable(out),
        }
        self.decoder.trainable(out);
    }
}

/// One episode ready for the network: images only, plus the class label and
/// its word embedding when the variant consumes semantics. Support masks
/// never enter the model; supervision is the image-level label alone.
#[derive(Clone, Debug)]
pub struct EpisodeInputs<S: Scalar> {
    pub class_label: String,
    pub embedding: Option<WordEmbedding>,
    pub support_images: Vec<Tensor<S>>,
    pub query_images: Vec<Tensor<S>>,
}

/// Per-query predictions plus the attention gate maps kept for inspection
/// (one map per support shot; empty for conditioning interactions).
#[derive(Debug)]
pub struct EpisodeForward<S: Scalar> {
    pub outputs: Vec<SegmentationOutput<S>>,
    pub query_gates: Vec<Vec<Tensor<S>>>,
}

/// A built loss graph ready for one optimizer step.
#[derive(Debug)]
pub struct TrainingGraph<S: Scalar> {
    pub tape: Tape<S>,
    /// Scalar loss: cross-entropy averaged over valid pixels, then queries.
    pub loss: Var,
    /// Trainable leaves in `ModelParams::visit` order.
    pub param_vars: Vec<Var>,
}

#[derive(Debug)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    encoder: SequentialCnn<S>,
    params: ModelParams<S>,
}

fn identity_plus_noise<S: Scalar>(seed: u64, name: &str, c: usize, noise: f64) -> Tensor<S> {
    let mut r = rng::seeded_stream(seed, name);
    Tensor::from_fn(vec![c, c], |i| {
        let eye = if i / c == i % c { 1.0 } else { 0.0 };
        S::from_f64(eye + noise * rng::normal(&mut r))
    })
}

/// 1x1 convolution acting as the identity on its channel space, plus noise,
/// with a small positive bias so downstream ReLUs start live.
fn near_identity_conv<S: Scalar>(seed: u64, name: &str, c: usize) -> (Tensor<S>, Tensor<S>) {
    let m = identity_plus_noise::<S>(seed, name, c, 0.01);
    (
        m.reshaped(vec![c, c, 1, 1]),
        Tensor::full(vec![c], S::from_f64(0.01)),
    )
}

fn zero_conv<S: Scalar>(out_c: usize, in_c: usize) -> (Tensor<S>, Tensor<S>) {
    (
        Tensor::zeros(vec![out_c, in_c, 1, 1]),
        Tensor::zeros(vec![out_c]),
    )
}

fn xavier_matrix<S: Scalar>(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor<S> {
    let mut r = rng::seeded_stream(seed, name);
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| S::from_f64(rng::normal(&mut r) * std))
}

fn init_block<S: Scalar>(
    seed: u64,
    prefix: &str,
    cprime: usize,
    separate_support_gate: bool,
) -> BlockParams<S> {
    let gate = zero_conv(cprime, cprime);
    BlockParams {
        correlation: identity_plus_noise(seed, &format!("{prefix}.correlation"), cprime, 0.01),
        gate_weight: gate.0,
        gate_bias: gate.1,
        support_gate: separate_support_gate.then(|| zero_conv(cprime, cprime)),
        fusion: None,
    }
}

fn init_stage<S: Scalar>(
    seed: u64,
    prefix: &str,
    c: usize,
    block_out: usize,
    cprime: usize,
    separate_support_gate: bool,
) -> StageParams<S> {
    let conv = |name: &str, out_c: usize, in_c: usize| {
        xavier_conv::<S>(seed, &format!("{prefix}.{name}"), out_c, in_c, 1)
    };
    StageParams {
        block: init_block(seed, &format!("{prefix}.block"), cprime, separate_support_gate),
        merge_query: conv("merge_query", c, block_out),
        phi_query: near_identity_conv(seed, &format!("{prefix}.phi_query"), c),
        merge_support: conv("merge_support", c, block_out),
        phi_support: near_identity_conv(seed, &format!("{prefix}.phi_support"), c),
    }
}

impl<S: Scalar> Model<S> {
    /// Builds a model with seeded initialization. The correlation starts near
    /// the identity, gates start at 1/2 (zero weights), the residual
    /// projections start near the identity with a small positive bias, and
    /// the reduction heads start small but nonzero so gradients reach the
    /// attention parameters from the first step.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = match &config.encoder {
            EncoderChoice::Tiny { channels, seed } => SequentialCnn::tiny(*channels, *seed),
            EncoderChoice::FromFile { path } => SequentialCnn::load(Path::new(path))?,
        };
        let c = encoder.out_channels();
        let cprime = c + config.tiled_dim();

        let projection = config.variant.uses_semantics().then(|| {
            SemanticProjection::new(
                xavier_matrix(seed, "projection.weight", config.semantic_dim, config.embed_dim),
                Tensor::zeros(vec![config.semantic_dim]),
                false,
            )
        });

        let interaction = match (config.variant, config.interaction) {
            (Variant::SemanticOnly, _) => InteractionParams::Conditioning {
                fusion: Some(he_conv(seed, "interact.fusion", c, c + config.semantic_dim, 1)),
            },
            (_, Interaction::Conditioning) => InteractionParams::Conditioning { fusion: None },
            (_, Interaction::CoAttention) => InteractionParams::CoAttention(init_block(
                seed,
                "interact.block",
                cprime,
                config.separate_support_gate,
            )),
            (_, Interaction::StackedCoAttention) => {
                let stages = if config.stack.share_weights {
                    1
                } else {
                    config.stack.depth
                };
                InteractionParams::Stacked(StackParams {
                    config: config.stack,
                    stages: (0..stages)
                        .map(|i| {
                            init_stage(
                                seed,
                                &format!("stack.stage{i}"),
                                c,
                                2 * cprime,
                                cprime,
                                config.separate_support_gate,
                            )
                        })
                        .collect(),
                })
            }
        };

        let decoder_in = Self::decoder_channels(&config, c);
        let decoder = DecoderParams::init(config.decoder.clone(), decoder_in, seed)?;

        Ok(Model {
            config,
            encoder,
            params: ModelParams {
                projection,
                interaction,
                decoder,
            },
        })
    }

    /// Channel count handed to the segmentation head.
    fn decoder_channels(config: &ModelConfig, c: usize) -> usize {
        let cprime = c + config.tiled_dim();
        match (config.variant, config.interaction) {
            (Variant::SemanticOnly, _) => c,
            (_, Interaction::StackedCoAttention) => c,
            (_, Interaction::Conditioning) | (_, Interaction::CoAttention) => 2 * cprime,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &SequentialCnn<S> {
        &self.encoder
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<S> {
        &mut self.params
    }

    /// Frozen feature extraction; never part of the gradient tape.
    pub fn encode(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        self.encoder.encode(image)
    }

    fn check_inputs(&self, inputs: &EpisodeInputs<S>) -> Result<()> {
        if inputs.support_images.is_empty() {
            return Err(Error::EmptySupport);
        }
        if inputs.query_images.is_empty() {
            return Err(Error::Config("episode has no query images".into()));
        }
        if self.config.variant.uses_semantics() && inputs.embedding.is_none() {
            return Err(Error::Config(format!(
                "variant needs a word embedding for {:?}",
                inputs.class_label
            )));
        }
        Ok(())
    }

    /// Builds the per-episode graph. Returns the tape, per-query logits vars,
    /// per-query gate maps, and the flat trainable leaf list.
    fn build_graph(
        &self,
        inputs: &EpisodeInputs<S>,
    ) -> Result<(Tape<S>, Vec<Var>, Vec<Vec<Var>>, Vec<Var>)> {
        self.check_inputs(inputs)?;
        let mut tape = Tape::new();

        let vars = self.params.leaves(&mut tape);
        let mut param_vars = Vec::new();
        vars.trainable(&mut param_vars);

        let support_feats: Vec<Var> = inputs
            .support_images
            .iter()
            .map(|img| Ok(tape.leaf(self.encoder.encode(img)?, false)))
            .collect::<Result<_>>()?;
        let query_feats: Vec<Var> = inputs
            .query_images
            .iter()
            .map(|img| Ok(tape.leaf(self.encoder.encode(img)?, false)))
            .collect::<Result<_>>()?;

        let z = match (&vars.projection, &inputs.embedding) {
            (Some(pv), Some(e)) => {
                if e.vector.len() != self.config.embed_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.config.embed_dim,
                        got: e.vector.len(),
                    });
                }
                Some(project_on_tape(&mut tape, pv, e))
            }
            _ => None,
        };

        let mut logits = Vec::with_capacity(query_feats.len());
        let mut gates = Vec::with_capacity(query_feats.len());
        for (qi, &q) in query_feats.iter().enumerate() {
            let (decoder_input, q_gates) =
                self.interaction_output(&mut tape, q, &support_feats, z, &vars)?;
            let (h, w) = {
                let img = &inputs.query_images[qi];
                (img.height(), img.width())
            };
            logits.push(decode_on_tape(
                &mut tape,
                decoder_input,
                None,
                &vars.decoder,
                (h, w),
            ));
            gates.push(q_gates);
        }
        Ok((tape, logits, gates, param_vars))
    }

    fn interaction_output(
        &self,
        tape: &mut Tape<S>,
        query: Var,
        supports: &[Var],
        z: Option<Var>,
        vars: &ModelVars,
    ) -> Result<(Var, Vec<Var>)> {
        let condition = |tape: &mut Tape<S>, v: Var, z: Option<Var>| match z {
            Some(z) => {
                let (h, w) = {
                    let t = tape.value(v);
                    (t.height(), t.width())
                };
                let tiled = tape.tile_vector(z, h, w);
                tape.concat_channels(&[v, tiled])
            }
            None => v,
        };

        match &vars.interaction {
            InteractionVars::Conditioning { fusion } => {
                if let Some((fw, fb)) = fusion {
                    // Semantic-only: tiled semantics fused back to C channels.
                    let zv = z.expect("semantic-only model without a projection");
                    let cat = condition(tape, query, Some(zv));
                    let fused = tape.conv2d(cat, *fw, *fb, 1, 0, 1);
                    return Ok((tape.relu(fused), Vec::new()));
                }
                // Pool the conditioned support maps into one vector, tile it
                // over the query grid, and concatenate.
                let tile_z = if self.config.variant == Variant::VisualSemantic {
                    z
                } else {
                    None
                };
                let cond_q = condition(tape, query, tile_z);
                let pooled: Vec<Var> = supports
                    .iter()
                    .map(|&s| {
                        let cond_s = condition(tape, s, tile_z);
                        let g = tape.global_avg_pool(cond_s);
                        let c = tape.value(g).channels();
                        tape.reshape(g, vec![c])
                    })
                    .collect();
                let mean = tape.mean_stack(&pooled);
                let (h, w) = {
                    let t = tape.value(cond_q);
                    (t.height(), t.width())
                };
                let tiled = tape.tile_vector(mean, h, w);
                Ok((tape.concat_channels(&[cond_q, tiled]), Vec::new()))
            }
            InteractionVars::CoAttention(block) => {
                let (out, _, gates) =
                    interact_on_tape(tape, query, supports, z, block, self.config.variant);
                Ok((out, gates))
            }
            InteractionVars::Stacked(stack) => {
                let (out, _, gates) =
                    stack_forward_on_tape(tape, query, supports, z, stack, self.config.variant);
                Ok((out, gates))
            }
        }
    }

    /// Evaluation forward pass: per-query predictions and gate maps.
    pub fn forward(&self, inputs: &EpisodeInputs<S>) -> Result<EpisodeForward<S>> {
        let (tape, logits, gates, _) = self.build_graph(inputs)?;
        let outputs = logits
            .iter()
            .map(|&lv| {
                let l = tape.value(lv).clone();
                let probabilities = pixel_probabilities(&l);
                SegmentationOutput {
                    logits: l,
                    probabilities,
                }
            })
            .collect();
        let query_gates = gates
            .into_iter()
            .map(|per_query| {
                per_query
                    .into_iter()
                    .map(|g| tape.value(g).clone())
                    .collect()
            })
            .collect();
        Ok(EpisodeForward {
            outputs,
            query_gates,
        })
    }

    /// Training forward pass: the loss graph over all queries. Targets pair
    /// with queries one to one; pixels marked ignore are excluded.
    pub fn training_graph(
        &self,
        inputs: &EpisodeInputs<S>,
        targets: &[Mask],
    ) -> Result<TrainingGraph<S>> {
        if targets.len() != inputs.query_images.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} queries",
                targets.len(),
                inputs.query_images.len()
            )));
        }
        for (img, mask) in inputs.query_images.iter().zip(targets) {
            if (mask.height(), mask.width()) != (img.height(), img.width()) {
                return Err(Error::ShapeMismatch(format!(
                    "target {}x{} for image {}x{}",
                    mask.height(),
                    mask.width(),
                    img.height(),
                    img.width()
                )));
            }
        }
        let (mut tape, logits, _, param_vars) = self.build_graph(inputs)?;
        let per_query: Vec<Var> = logits
            .iter()
            .zip(targets)
            .map(|(&lv, mask)| {
                let (target, valid) = mask.to_loss_tensors::<S>();
                tape.cross_entropy(lv, target, valid)
            })
            .collect();
        let loss = tape.mean_stack(&per_query);
        Ok(TrainingGraph {
            tape,
            loss,
            param_vars,
        })
    }

    /// Writes config, extractor, and trainable parameters to one archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "model": self.config,
            "encoder_strides": self.encoder.parts().iter().map(|p| p.2).collect::<Vec<_>>(),
        });
        let mut archive = Archive::new(meta);
        for (i, (w, b, _)) in self.encoder.parts().iter().enumerate() {
            archive.push(format!("encoder.layer{i}.weight"), (*w).clone());
            archive.push(format!("encoder.layer{i}.bias"), (*b).clone());
        }
        self.params
            .visit(&mut |name, t| archive.push(name, t.clone()));
        archive.save(path)
    }

    /// Restores a model saved with [`Model::save`]. Every parameter must be
    /// present with matching shape, and the embedded config must describe
    /// the stored tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::<S>::load(path)?;
        let config: ModelConfig = serde_json::from_value(
            archive
                .meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::CheckpointMismatch("archive has no model config".into()))?,
        )
        .map_err(|e| Error::CheckpointMismatch(format!("bad model config: {e}")))?;
        let strides: Vec<usize> = archive
            .meta
            .get("encoder_strides")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::CheckpointMismatch("missing encoder strides".into()))?;

        let mut parts = Vec::new();
        for (i, &stride) in strides.iter().enumerate() {
            let w = archive
                .get(&format!("encoder.layer{i}.weight"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing encoder.layer{i}.weight")))?;
            let b = archive
                .get(&format!("encoder.layer{i}.bias"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing encoder.layer{i}.bias")))?;
            parts.push((w.clone(), b.clone(), stride));
        }
        let encoder = SequentialCnn::from_parts(parts)?;

        // Shape the parameter tree from the config, then fill it from the
        // archive; this validates that config and tensors agree.
        let shaped = Model::<S>::init_with_encoder(config.clone(), encoder)?;
        let mut params = shaped.params;
        let mut missing = Vec::new();
        params.visit_mut(&mut |name, t| match archive.get(name) {
            Some(stored) if stored.dims() == t.dims() => *t = stored.clone(),
            Some(stored) => missing.push(format!(
                "{name}: shape {:?} vs config {:?}",
                stored.dims(),
                t.dims()
            )),
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(Error::CheckpointMismatch(format!(
                "archive does not match its config: {}",
                missing.join("; ")
            )));
        }
        Ok(Model {
            config,
            encoder: shaped.encoder,
            params,
        })
    }

    fn init_with_encoder(config: ModelConfig, encoder: SequentialCnn<S>) -> Result<Self> {
        // Init with a throwaway tiny extractor of the same width, then swap.
        let mut probe = config.clone();
        probe.encoder = EncoderChoice::Tiny {
            channels: encoder.out_channels(),
            seed: 0,
        };
        let mut model = Model::init(probe, 0)?;
        model.config = config;
        model.encoder = encoder;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coattention::interact;
    use crate::decoder::decode;
    use crate::semantics::{lookup, HashEmbeddings};

    fn desk_config(variant: Variant, interaction: Interaction) -> ModelConfig {
        ModelConfig {
            variant,
            interaction,
            encoder: EncoderChoice::Tiny {
                channels: 6,
                seed: 0,
            },
            embed_dim: 8,
            semantic_dim: 4,
            stack: StackConfig {
                depth: 2,
                share_weights: false,
            },
            decoder: DecoderConfig {
                iterations: 2,
                mid_channels: 5,
                aspp_channels: 4,
                aspp_rates: vec![1, 2],
            },
            separate_support_gate: false,
        }
        .normalized()
    }

    fn episode(seed: u64, k: usize, queries: usize, with_embedding: bool) -> EpisodeInputs<f32> {
        let mut r = rng::seeded(seed);
        let image = |r: &mut rng::Rng| {
            Tensor::from_fn(vec![3, 16, 16], |_| rng::uniform(r) as f32)
        };
        let embedding = with_embedding.then(|| {
            let provider = HashEmbeddings::new(8);
            lookup(&provider, "red circle").unwrap()
        });
        EpisodeInputs {
            class_label: "red circle".into(),
            embedding,
            support_images: (0..k).map(|_| image(&mut r)).collect(),
            query_images: (0..queries).map(|_| image(&mut r)).collect(),
        }
    }

    fn target_masks(queries: usize) -> Vec<Mask> {
        (0..queries)
            .map(|i| Mask::from_fn(16, 16, |y, x| u8::from((y + x + i) % 3 == 0)))
            .collect()
    }

    #[test]
    fn forward_emits_one_output_per_query() {
        for interaction in [
            Interaction::Conditioning,
            Interaction::CoAttention,
            Interaction::StackedCoAttention,
        ] {
            let model =
                Model::<f32>::init(desk_config(Variant::VisualSemantic, interaction), 1).unwrap();
            let fwd = model.forward(&episode(3, 2, 3, true)).unwrap();
            assert_eq!(fwd.outputs.len(), 3);
            assert_eq!(fwd.query_gates.len(), 3);
            for out in &fwd.outputs {
                assert_eq!(out.logits.dims(), &[2, 16, 16]);
                for px in 0..256 {
                    let s = out.probabilities.data()[px] + out.probabilities.data()[256 + px];
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn duplicate_queries_get_identical_outputs() {
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::StackedCoAttention),
            1,
        )
        .unwrap();
        let mut inputs = episode(4, 1, 1, true);
        let q = inputs.query_images[0].clone();
        inputs.query_images.push(q);
        let fwd = model.forward(&inputs).unwrap();
        assert_eq!(fwd.outputs[0].logits, fwd.outputs[1].logits);
    }

    #[test]
    fn variants_disagree_on_the_same_episode() {
        let inputs = episode(5, 1, 1, true);
        let vs = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::Conditioning),
            1,
        )
        .unwrap();
        let s = Model::<f32>::init(
            desk_config(Variant::SemanticOnly, Interaction::Conditioning),
            1,
        )
        .unwrap();
        let a = vs.forward(&inputs).unwrap();
        let b = s.forward(&inputs).unwrap();
        assert!(a.outputs[0].logits.max_abs_diff(&b.outputs[0].logits) > 1e-6);
    }

    #[test]
    fn single_shot_forward_is_the_manual_stage_composition() {
        let config = desk_config(Variant::VisualSemantic, Interaction::CoAttention);
        let model = Model::<f32>::init(config, 2).unwrap();
        let inputs = episode(6, 1, 1, true);
        let fwd = model.forward(&inputs).unwrap();

        let v_s = model.encode(&inputs.support_images[0]).unwrap();
        let v_q = model.encode(&inputs.query_images[0]).unwrap();
        let projection = model.params().projection.as_ref().unwrap();
        let z = projection.project(inputs.embedding.as_ref().unwrap()).unwrap();
        let InteractionParams::CoAttention(block) = &model.params().interaction else {
            panic!("expected a co-attention block")
        };
        let out = interact(&v_q, &[v_s], Some(&z), block, Variant::VisualSemantic).unwrap();
        let manual = decode(&model.params().decoder, &out.query, None, (16, 16)).unwrap();

        assert_eq!(fwd.outputs[0].logits, manual.logits);
    }

    #[test]
    fn visual_variant_needs_no_embedding() {
        let model = Model::<f32>::init(
            desk_config(Variant::Visual, Interaction::CoAttention),
            1,
        )
        .unwrap();
        let fwd = model.forward(&episode(7, 2, 1, false)).unwrap();
        assert_eq!(fwd.outputs.len(), 1);
    }

    #[test]
    fn semantic_variants_require_an_embedding() {
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::CoAttention),
            1,
        )
        .unwrap();
        let err = model.forward(&episode(8, 1, 1, false)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_support_or_queries_is_rejected() {
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::CoAttention),
            1,
        )
        .unwrap();
        let mut no_support = episode(9, 1, 1, true);
        no_support.support_images.clear();
        assert!(matches!(
            model.forward(&no_support).unwrap_err(),
            Error::EmptySupport
        ));
        let mut no_queries = episode(9, 1, 1, true);
        no_queries.query_images.clear();
        assert!(matches!(
            model.forward(&no_queries).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn semantic_only_coerces_to_conditioning() {
        let config = desk_config(Variant::SemanticOnly, Interaction::StackedCoAttention);
        assert_eq!(config.interaction, Interaction::Conditioning);
        let mut raw = desk_config(Variant::SemanticOnly, Interaction::Conditioning);
        raw.interaction = Interaction::CoAttention;
        assert!(matches!(raw.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_graph_produces_finite_loss_and_gradients() {
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::StackedCoAttention),
            3,
        )
        .unwrap();
        let inputs = episode(10, 2, 2, true);
        let graph = model.training_graph(&inputs, &target_masks(2)).unwrap();
        let loss = graph.tape.value(graph.loss).data()[0];
        assert!(loss.is_finite() && loss > 0.0);

        let grads = graph.tape.backward(graph.loss);
        assert_eq!(graph.param_vars.len(), model.params().count());
        let mut names = Vec::new();
        model.params().visit(&mut |n, _| names.push(n.to_string()));
        let mut nonzero = 0;
        for (name, &v) in names.iter().zip(&graph.param_vars) {
            // The last stage's support heads feed nothing downstream, so
            // they are the one group allowed to stay gradient-free.
            let dead_end = name.starts_with("stack.stage1.merge_support")
                || name.starts_with("stack.stage1.phi_support");
            let Some(g) = grads.get(v) else {
                assert!(dead_end, "no gradient for {name}");
                continue;
            };
            assert!(g.all_finite(), "{name} gradient not finite");
            if g.data().iter().any(|&x| x != 0.0) {
                nonzero += 1;
            }
        }
        // Correlation, projection, and decoder all receive signal.
        assert!(
            names
                .iter()
                .zip(&graph.param_vars)
                .filter(|(n, _)| n.contains("correlation") || n.starts_with("projection"))
                .all(|(_, &v)| grads.get(v).unwrap().data().iter().any(|&x| x != 0.0)),
            "attention and projection parameters got no signal"
        );
        assert!(nonzero * 2 > names.len(), "most parameters should train");
    }

    #[test]
    fn gradient_counts_match_across_interactions() {
        for interaction in [
            Interaction::Conditioning,
            Interaction::CoAttention,
            Interaction::StackedCoAttention,
        ] {
            for variant in [Variant::VisualSemantic, Variant::Visual, Variant::SemanticOnly] {
                let config = desk_config(variant, interaction);
                let model = Model::<f32>::init(config, 1).unwrap();
                let with_embedding = variant.uses_semantics();
                let graph = model
                    .training_graph(&episode(11, 1, 1, with_embedding), &target_masks(1))
                    .unwrap();
                assert_eq!(graph.param_vars.len(), model.params().count());
            }
        }
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let model = Model::<f32>::init(
            desk_config(Variant::Visual, Interaction::CoAttention),
            1,
        )
        .unwrap();
        let inputs = episode(12, 1, 2, false);
        let err = model.training_graph(&inputs, &target_masks(1)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
        let bad = vec![Mask::zeros(8, 8), Mask::zeros(8, 8)];
        let err = model.training_graph(&inputs, &bad).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn save_load_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::StackedCoAttention),
            9,
        )
        .unwrap();
        model.save(&path).unwrap();
        let loaded = Model::<f32>::load(&path).unwrap();
        assert_eq!(model.config(), loaded.config());
        assert_eq!(
            model.encoder().weights_digest(),
            loaded.encoder().weights_digest()
        );
        let inputs = episode(13, 2, 1, true);
        let a = model.forward(&inputs).unwrap();
        let b = loaded.forward(&inputs).unwrap();
        assert_eq!(a.outputs[0].logits, b.outputs[0].logits);
    }

    #[test]
    fn load_rejects_missing_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::CoAttention),
            9,
        )
        .unwrap();
        model.save(&path).unwrap();

        let mut archive = Archive::<f32>::load(&path).unwrap();
        archive.tensors.retain(|(name, _)| name != "interact.block.correlation");
        archive.save(&path).unwrap();

        let err = Model::<f32>::load(&path).unwrap_err();
        assert!(err.to_string().contains("correlation"));
    }

    #[test]
    fn gate_maps_are_exposed_per_shot() {
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::CoAttention),
            4,
        )
        .unwrap();
        let fwd = model.forward(&episode(14, 3, 2, true)).unwrap();
        for per_query in &fwd.query_gates {
            assert_eq!(per_query.len(), 3);
            for g in per_query {
                assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
        let cond = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::Conditioning),
            4,
        )
        .unwrap();
        let fwd = cond.forward(&episode(14, 3, 2, true)).unwrap();
        assert!(fwd.query_gates.iter().all(|g| g.is_empty()));
    }

    #[test]
    fn embedding_provider_dim_is_validated() {
        let model = Model::<f32>::init(
            desk_config(Variant::VisualSemantic, Interaction::CoAttention),
            1,
        )
        .unwrap();
        let mut inputs = episode(15, 1, 1, true);
        inputs.embedding = Some(WordEmbedding {
            label: "red circle".into(),
            vector: vec![0.5; 5],
        });
        let err = model.forward(&inputs).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
