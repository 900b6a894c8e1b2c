//! Residual stacking of the interaction block. Each stage runs the block,
//! reduces its widened output back to the stream width with a linear 1×1
//! head, adds the stream input, and applies a 1×1 convolution + ReLU. The
//! support stream mirrors the query stream with its own parameters.

use crate::autograd::{Tape, Var};
use crate::coattention::{interact, interact_on_tape, BlockParams, BlockVars, Variant};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StackConfig {
    /// Number of block applications, ≥ 1.
    pub depth: usize,
    /// Reuse one stage's parameters for every iteration.
    pub share_weights: bool,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("stack depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Channel count the block emits for a given stream width `c` and semantic
/// dimension `d`: gated summary plus conditioned features, except on the
/// semantic-only path where the fusion convolution restores `c`.
pub fn block_output_channels(variant: Variant, c: usize, d: usize) -> usize {
    match variant {
        Variant::VisualSemantic => 2 * (c + d),
        Variant::Visual => 2 * c,
        Variant::SemanticOnly => c,
    }
}

/// One stage: interaction block plus the reduction and projection heads of
/// both streams. Convolution pairs are (weight `[out,in,1,1]`, bias `[out]`).
#[derive(Clone, Debug)]
pub struct StageParams<S: Scalar> {
    pub block: BlockParams<S>,
    /// Linear head folding the block's query output back to `C` channels.
    pub merge_query: (Tensor<S>, Tensor<S>),
    /// Query-stream projection applied after the residual add, then ReLU.
    pub phi_query: (Tensor<S>, Tensor<S>),
    pub merge_support: (Tensor<S>, Tensor<S>),
    pub phi_support: (Tensor<S>, Tensor<S>),
}

#[derive(Clone, Debug)]
pub struct StackParams<S: Scalar> {
    pub config: StackConfig,
    /// One entry when weights are shared, `depth` entries otherwise.
    pub stages: Vec<StageParams<S>>,
}

impl<S: Scalar> StackParams<S> {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = if self.config.share_weights {
            1
        } else {
            self.config.depth
        };
        if self.stages.len() != expected {
            return Err(Error::Config(format!(
                "stack has {} stages, expected {expected}",
                self.stages.len()
            )));
        }
        Ok(())
    }

    fn stage(&self, i: usize) -> &StageParams<S> {
        if self.config.share_weights {
            &self.stages[0]
        } else {
            &self.stages[i]
        }
    }

    /// Visits every parameter with its name. Traversal order is the contract
    /// shared with [`StackParams::leaves`].
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<S>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.visit(&format!("stack.stage{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_mut(&format!("stack.stage{i}"), f);
        }
    }
}

/// Stack output with the last stage's query gates retained for inspection.
#[derive(Clone, Debug)]
pub struct StackOutput<S: Scalar> {
    pub query: Tensor<S>,
    pub supports: Vec<Tensor<S>>,
    pub query_gates: Vec<Tensor<S>>,
}

fn conv1x1<S: Scalar>(x: &Tensor<S>, params: &(Tensor<S>, Tensor<S>)) -> Tensor<S> {
    ops::conv2d(x, &params.0, &params.1, 1, 0, 1)
}

fn stage_step<S: Scalar>(
    v_q: &Tensor<S>,
    v_s_list: &[Tensor<S>],
    z: Option<&Tensor<S>>,
    stage: &StageParams<S>,
    variant: Variant,
) -> Result<(Tensor<S>, Vec<Tensor<S>>, Vec<Tensor<S>>)> {
    let out = interact(v_q, v_s_list, z, &stage.block, variant)?;
    let merged_q = conv1x1(&out.query, &stage.merge_query);
    let next_q = ops::relu(&conv1x1(&v_q.add(&merged_q), &stage.phi_query));
    let mut next_s = Vec::with_capacity(v_s_list.len());
    for (v_s, block_s) in v_s_list.iter().zip(&out.supports) {
        let merged_s = conv1x1(block_s, &stage.merge_support);
        next_s.push(ops::relu(&conv1x1(&v_s.add(&merged_s), &stage.phi_support)));
    }
    Ok((next_q, next_s, out.query_gates))
}

/// Run the recursion for `depth` iterations on both streams. Spatial dims
/// and the channel width `C` are preserved for any depth.
pub fn stack_forward<S: Scalar>(
    v_q0: &Tensor<S>,
    v_s0_list: &[Tensor<S>],
    z: Option<&Tensor<S>>,
    params: &StackParams<S>,
    variant: Variant,
) -> Result<StackOutput<S>> {
    params.validate()?;
    if v_s0_list.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut v_q = v_q0.clone();
    let mut v_s: Vec<Tensor<S>> = v_s0_list.to_vec();
    let mut gates = Vec::new();
    for i in 0..params.config.depth {
        let (q, s, g) = stage_step(&v_q, &v_s, z, params.stage(i), variant)?;
        v_q = q;
        v_s = s;
        gates = g;
    }
    Ok(StackOutput {
        query: v_q,
        supports: v_s,
        query_gates: gates,
    })
}

/// Tape handles for one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub block: BlockVars,
    pub merge_query: (Var, Var),
    pub phi_query: (Var, Var),
    pub merge_support: (Var, Var),
    pub phi_support: (Var, Var),
}

impl StageVars {
    /// Flat parameter list in `visit` order.
    pub fn trainable(&self, out: &mut Vec<Var>) {
        self.block.trainable(out);
        for p in [
            self.merge_query,
            self.phi_query,
            self.merge_support,
            self.phi_support,
        ] {
            out.push(p.0);
            out.push(p.1);
        }
    }
}

#[derive(Clone, Debug)]
pub struct StackVars {
    pub config: StackConfig,
    pub stages: Vec<StageVars>,
}

impl StackVars {
    pub fn trainable(&self, out: &mut Vec<Var>) {
        for stage in &self.stages {
            stage.trainable(out);
        }
    }
}

impl StackVars {
    fn stage(&self, i: usize) -> &StageVars {
        if self.config.share_weights {
            &self.stages[0]
        } else {
            &self.stages[i]
        }
    }
}

impl<S: Scalar> StageParams<S> {
    pub fn leaves(&self, tape: &mut Tape<S>) -> StageVars {
        let pair = |tape: &mut Tape<S>, p: &(Tensor<S>, Tensor<S>)| {
            (tape.leaf(p.0.clone(), true), tape.leaf(p.1.clone(), true))
        };
        StageVars {
            block: self.block.leaves(tape),
            merge_query: pair(tape, &self.merge_query),
            phi_query: pair(tape, &self.phi_query),
            merge_support: pair(tape, &self.merge_support),
            phi_support: pair(tape, &self.phi_support),
        }
    }

    /// Visits every parameter with its name, in `leaves` order.
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<S>)) {
        self.block.visit(&format!("{prefix}.block"), f);
        let mut pair = |name: String, p: &(Tensor<S>, Tensor<S>)| {
            f(&format!("{name}.weight"), &p.0);
            f(&format!("{name}.bias"), &p.1);
        };
        pair(format!("{prefix}.merge_query"), &self.merge_query);
        pair(format!("{prefix}.phi_query"), &self.phi_query);
        pair(format!("{prefix}.merge_support"), &self.merge_support);
        pair(format!("{prefix}.phi_support"), &self.phi_support);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        self.block.visit_mut(&format!("{prefix}.block"), f);
        let mut pair = |name: String, p: &mut (Tensor<S>, Tensor<S>)| {
            f(&format!("{name}.weight"), &mut p.0);
            f(&format!("{name}.bias"), &mut p.1);
        };
        pair(format!("{prefix}.merge_query"), &mut self.merge_query);
        pair(format!("{prefix}.phi_query"), &mut self.phi_query);
        pair(format!("{prefix}.merge_support"), &mut self.merge_support);
        pair(format!("{prefix}.phi_support"), &mut self.phi_support);
    }
}

impl<S: Scalar> StackParams<S> {
    pub fn leaves(&self, tape: &mut Tape<S>) -> StackVars {
        StackVars {
            config: self.config,
            stages: self.stages.iter().map(|s| s.leaves(tape)).collect(),
        }
    }
}

fn conv1x1_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var, params: (Var, Var)) -> Var {
    tape.conv2d(x, params.0, params.1, 1, 0, 1)
}

/// Differentiable twin of [`stack_forward`]. Returns the final query var,
/// final support vars, and the last stage's query gates.
pub fn stack_forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    v_q0: Var,
    v_s0_list: &[Var],
    z: Option<Var>,
    params: &StackVars,
    variant: Variant,
) -> (Var, Vec<Var>, Vec<Var>) {
    assert!(params.config.depth >= 1);
    assert!(!v_s0_list.is_empty());
    let mut v_q = v_q0;
    let mut v_s: Vec<Var> = v_s0_list.to_vec();
    let mut gates = Vec::new();
    for i in 0..params.config.depth {
        let stage = *params.stage(i);
        let (block_q, block_s, g) = interact_on_tape(tape, v_q, &v_s, z, &stage.block, variant);
        let merged_q = conv1x1_on_tape(tape, block_q, stage.merge_query);
        let sum_q = tape.add(v_q, merged_q);
        let proj_q = conv1x1_on_tape(tape, sum_q, stage.phi_query);
        v_q = tape.relu(proj_q);
        let mut next_s = Vec::with_capacity(v_s.len());
        for (&prev, &out) in v_s.iter().zip(&block_s) {
            let merged = conv1x1_on_tape(tape, out, stage.merge_support);
            let sum = tape.add(prev, merged);
            let proj = conv1x1_on_tape(tape, sum, stage.phi_support);
            next_s.push(tape.relu(proj));
        }
        v_s = next_s;
        gates = g;
    }
    (v_q, v_s, gates)
}
