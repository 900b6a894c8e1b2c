//! Cross-image attention between support and query feature maps: affinity
//! scores, normalized attention weights, gated summaries in both directions,
//! and multi-shot fusion by averaging the gated summaries.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::semantics::tile_and_concat;
use crate::tensor::Tensor;

/// Which information conditions the interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    /// Visual features fused with the tiled semantic vector.
    VisualSemantic,
    /// Visual features only; no semantic vector anywhere.
    Visual,
    /// Semantic conditioning only; no support/query affinity at all.
    SemanticOnly,
}

impl Variant {
    pub fn uses_semantics(self) -> bool {
        !matches!(self, Variant::Visual)
    }
}

/// Pairwise affinity between all support and query locations.
#[derive(Clone, Debug)]
pub struct Affinity<S: Scalar> {
    /// Raw scores, `[WH, WH]`: rows index support locations, columns query
    /// locations.
    pub scores: Tensor<S>,
    /// Per query location, a distribution over support locations: column
    /// softmax of `scores`. Columns sum to 1.
    pub over_support: Tensor<S>,
    /// Per support location, a distribution over query locations: column
    /// softmax of `scores` transposed. Columns sum to 1.
    pub over_query: Tensor<S>,
}

/// A gated attention summary in map form.
#[derive(Clone, Debug)]
pub struct AttentionSummary<S: Scalar> {
    /// Gate ∘ raw summary, `[C',H,W]`.
    pub summary: Tensor<S>,
    /// Sigmoid gate values, same shape, entries strictly inside (0,1).
    pub gate: Tensor<S>,
}

/// Learnable parameters of one interaction block.
#[derive(Clone, Debug)]
pub struct BlockParams<S: Scalar> {
    /// Channel correlation `[C',C']` applied between support and query
    /// feature columns.
    pub correlation: Tensor<S>,
    /// 1×1 gating convolution `[C',C',1,1]` with bias `[C']`, applied to the
    /// query-side summary (and to the support side too when no separate
    /// support gate is configured).
    pub gate_weight: Tensor<S>,
    pub gate_bias: Tensor<S>,
    /// Separate gate for the support-side summary; `None` shares the query
    /// gate.
    pub support_gate: Option<(Tensor<S>, Tensor<S>)>,
    /// Fusion convolution `[C, C+d, 1, 1]` with bias `[C]` for the
    /// semantic-only path.
    pub fusion: Option<(Tensor<S>, Tensor<S>)>,
}

/// Block output: fused query features, per-shot support features, and the
/// gates kept for inspection (empty on the semantic-only path).
#[derive(Clone, Debug)]
pub struct InteractOutput<S: Scalar> {
    pub query: Tensor<S>,
    pub supports: Vec<Tensor<S>>,
    pub query_gates: Vec<Tensor<S>>,
    pub support_gates: Vec<Tensor<S>>,
}

fn check_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Affinity between two same-shape maps through the correlation matrix:
/// `scores[i,j] = support_col_i · correlation · query_col_j`.
pub fn affinity<S: Scalar>(
    v_s: &Tensor<S>,
    v_q: &Tensor<S>,
    correlation: &Tensor<S>,
) -> Result<Affinity<S>> {
    check_same_shape(v_s, v_q, "affinity inputs")?;
    let c = v_s.channels();
    if correlation.dims() != [c, c] {
        return Err(Error::ShapeMismatch(format!(
            "correlation {:?} for {c} channels",
            correlation.dims()
        )));
    }
    let wh = v_s.height() * v_s.width();
    let s_flat = v_s.reshaped(vec![c, wh]);
    let q_flat = v_q.reshaped(vec![c, wh]);
    let scores = ops::matmul(
        &ops::transpose2(&s_flat),
        &ops::matmul(correlation, &q_flat),
    );
    let over_support = ops::softmax_cols(&scores);
    let over_query = ops::softmax_cols(&ops::transpose2(&scores));
    Ok(Affinity {
        scores,
        over_support,
        over_query,
    })
}

/// Raw (ungated) attention summaries: the query summary mixes support
/// columns by `over_support`; the support summary mixes query columns by
/// `over_query`. Both return in `[C',H,W]` map form.
pub fn summaries<S: Scalar>(
    v_s: &Tensor<S>,
    v_q: &Tensor<S>,
    aff: &Affinity<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_same_shape(v_s, v_q, "summary inputs")?;
    let (c, h, w) = (v_s.channels(), v_s.height(), v_s.width());
    let wh = h * w;
    if aff.over_support.dims() != [wh, wh] {
        return Err(Error::ShapeMismatch(format!(
            "affinity {:?} for {wh} locations",
            aff.over_support.dims()
        )));
    }
    let s_flat = v_s.reshaped(vec![c, wh]);
    let q_flat = v_q.reshaped(vec![c, wh]);
    let u_q = ops::matmul(&s_flat, &aff.over_support).reshaped(vec![c, h, w]);
    let u_s = ops::matmul(&q_flat, &aff.over_query).reshaped(vec![c, h, w]);
    Ok((u_q, u_s))
}

/// Sigmoid gate from a 1×1 convolution over the raw summary, applied
/// element-wise: `out = σ(W*u + b) ∘ u`.
pub fn gate<S: Scalar>(
    u: &Tensor<S>,
    gate_weight: &Tensor<S>,
    gate_bias: &Tensor<S>,
) -> Result<AttentionSummary<S>> {
    let c = u.channels();
    if gate_weight.dims() != [c, c, 1, 1] || gate_bias.dims() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "gate params {:?}/{:?} for {c} channels",
            gate_weight.dims(),
            gate_bias.dims()
        )));
    }
    let g = ops::sigmoid(&ops::conv2d(u, gate_weight, gate_bias, 1, 0, 1));
    let summary = g.mul(u);
    Ok(AttentionSummary { summary, gate: g })
}

fn condition<S: Scalar>(
    v: &Tensor<S>,
    z: Option<&Tensor<S>>,
    variant: Variant,
) -> Result<Tensor<S>> {
    if variant.uses_semantics() {
        let z = z.ok_or_else(|| {
            Error::Config("variant requires a semantic vector but none was given".into())
        })?;
        tile_and_concat(v, z)
    } else {
        Ok(v.clone())
    }
}

/// One interaction block. The query output concatenates the shot-averaged
/// gated query summary with the conditioned query features; each support
/// output concatenates that shot's gated support summary with its
/// conditioned features. The semantic-only variant skips attention entirely
/// and fuses tiled semantics through a 1×1 convolution instead.
pub fn interact<S: Scalar>(
    v_q: &Tensor<S>,
    v_s_list: &[Tensor<S>],
    z: Option<&Tensor<S>>,
    params: &BlockParams<S>,
    variant: Variant,
) -> Result<InteractOutput<S>> {
    if v_s_list.is_empty() {
        return Err(Error::EmptySupport);
    }
    for v_s in v_s_list {
        check_same_shape(v_q, v_s, "query vs support")?;
    }

    if variant == Variant::SemanticOnly {
        let (fw, fb) = params
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Config("semantic-only variant needs fusion params".into()))?;
        let fuse = |v: &Tensor<S>| -> Result<Tensor<S>> {
            let cond = condition(v, z, variant)?;
            Ok(ops::relu(&ops::conv2d(&cond, fw, fb, 1, 0, 1)))
        };
        let query = fuse(v_q)?;
        let supports = v_s_list.iter().map(|v| fuse(v)).collect::<Result<_>>()?;
        return Ok(InteractOutput {
            query,
            supports,
            query_gates: Vec::new(),
            support_gates: Vec::new(),
        });
    }

    let cond_q = condition(v_q, z, variant)?;
    let (sg_w, sg_b) = match &params.support_gate {
        Some((w, b)) => (w, b),
        None => (&params.gate_weight, &params.gate_bias),
    };

    let mut gated_q = Vec::with_capacity(v_s_list.len());
    let mut query_gates = Vec::with_capacity(v_s_list.len());
    let mut supports = Vec::with_capacity(v_s_list.len());
    let mut support_gates = Vec::with_capacity(v_s_list.len());
    for v_s in v_s_list {
        let cond_s = condition(v_s, z, variant)?;
        let aff = affinity(&cond_s, &cond_q, &params.correlation)?;
        let (u_q, u_s) = summaries(&cond_s, &cond_q, &aff)?;
        let q = gate(&u_q, &params.gate_weight, &params.gate_bias)?;
        let s = gate(&u_s, sg_w, sg_b)?;
        gated_q.push(q.summary);
        query_gates.push(q.gate);
        supports.push(ops::concat_channels(&[&s.summary, &cond_s]));
        support_gates.push(s.gate);
    }

    let k = S::from_usize(gated_q.len());
    let mut avg = gated_q[0].clone();
    for g in &gated_q[1..] {
        avg.add_assign(g);
    }
    let avg = avg.scale(k.recip());
    let query = ops::concat_channels(&[&avg, &cond_q]);
    Ok(InteractOutput {
        query,
        supports,
        query_gates,
        support_gates,
    })
}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub correlation: Var,
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub support_gate: Option<(Var, Var)>,
    pub fusion: Option<(Var, Var)>,
}

impl BlockVars {
    /// Flat parameter list in `visit` order.
    pub fn trainable(&self, out: &mut Vec<Var>) {
        out.push(self.correlation);
        out.push(self.gate_weight);
        out.push(self.gate_bias);
        if let Some((w, b)) = self.support_gate {
            out.push(w);
            out.push(b);
        }
        if let Some((w, b)) = self.fusion {
            out.push(w);
            out.push(b);
        }
    }
}

impl<S: Scalar> BlockParams<S> {
    /// Register every parameter as a trainable tape leaf.
    pub fn leaves(&self, tape: &mut Tape<S>) -> BlockVars {
        BlockVars {
            correlation: tape.leaf(self.correlation.clone(), true),
            gate_weight: tape.leaf(self.gate_weight.clone(), true),
            gate_bias: tape.leaf(self.gate_bias.clone(), true),
            support_gate: self
                .support_gate
                .as_ref()
                .map(|(w, b)| (tape.leaf(w.clone(), true), tape.leaf(b.clone(), true))),
            fusion: self
                .fusion
                .as_ref()
                .map(|(w, b)| (tape.leaf(w.clone(), true), tape.leaf(b.clone(), true))),
        }
    }

    /// Visits every parameter with its name. Traversal order is the contract
    /// shared with [`BlockParams::leaves`].
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<S>)) {
        f(&format!("{prefix}.correlation"), &self.correlation);
        f(&format!("{prefix}.gate.weight"), &self.gate_weight);
        f(&format!("{prefix}.gate.bias"), &self.gate_bias);
        if let Some((w, b)) = &self.support_gate {
            f(&format!("{prefix}.support_gate.weight"), w);
            f(&format!("{prefix}.support_gate.bias"), b);
        }
        if let Some((w, b)) = &self.fusion {
            f(&format!("{prefix}.fusion.weight"), w);
            f(&format!("{prefix}.fusion.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.correlation"), &mut self.correlation);
        f(&format!("{prefix}.gate.weight"), &mut self.gate_weight);
        f(&format!("{prefix}.gate.bias"), &mut self.gate_bias);
        if let Some((w, b)) = &mut self.support_gate {
            f(&format!("{prefix}.support_gate.weight"), w);
            f(&format!("{prefix}.support_gate.bias"), b);
        }
        if let Some((w, b)) = &mut self.fusion {
            f(&format!("{prefix}.fusion.weight"), w);
            f(&format!("{prefix}.fusion.bias"), b);
        }
    }
}

fn condition_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    v: Var,
    z: Option<Var>,
    variant: Variant,
) -> Var {
    if variant.uses_semantics() {
        let z = z.expect("variant requires a semantic vector");
        let (h, w) = (tape.value(v).height(), tape.value(v).width());
        let tiled = tape.tile_vector(z, h, w);
        tape.concat_channels(&[v, tiled])
    } else {
        v
    }
}

fn gate_on_tape<S: Scalar>(tape: &mut Tape<S>, u: Var, gw: Var, gb: Var) -> (Var, Var) {
    let pre = tape.conv2d(u, gw, gb, 1, 0, 1);
    let g = tape.sigmoid(pre);
    (tape.mul(g, u), g)
}

/// Differentiable twin of [`interact`]: identical kernels in identical
/// order, recorded on the tape. Returns (query out, support outs, per-shot
/// query gates).
pub fn interact_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    v_q: Var,
    v_s_list: &[Var],
    z: Option<Var>,
    params: &BlockVars,
    variant: Variant,
) -> (Var, Vec<Var>, Vec<Var>) {
    assert!(!v_s_list.is_empty(), "empty support set");

    if variant == Variant::SemanticOnly {
        let (fw, fb) = params.fusion.expect("semantic-only variant needs fusion params");
        let fuse = |t: &mut Tape<S>, v: Var| {
            let cond = condition_on_tape(t, v, z, variant);
            let conv = t.conv2d(cond, fw, fb, 1, 0, 1);
            t.relu(conv)
        };
        let query = fuse(tape, v_q);
        let supports = v_s_list.iter().map(|&v| fuse(tape, v)).collect();
        return (query, supports, Vec::new());
    }

    let cond_q = condition_on_tape(tape, v_q, z, variant);
    let (sg_w, sg_b) = match params.support_gate {
        Some((w, b)) => (w, b),
        None => (params.gate_weight, params.gate_bias),
    };

    let mut gated_q = Vec::with_capacity(v_s_list.len());
    let mut query_gates = Vec::with_capacity(v_s_list.len());
    let mut supports = Vec::with_capacity(v_s_list.len());
    for &v_s in v_s_list {
        let cond_s = condition_on_tape(tape, v_s, z, variant);
        let (c, h, w) = {
            let t = tape.value(cond_s);
            (t.channels(), t.height(), t.width())
        };
        let wh = h * w;
        let s_flat = tape.reshape(cond_s, vec![c, wh]);
        let q_flat = tape.reshape(cond_q, vec![c, wh]);
        let s_t = tape.transpose(s_flat);
        let wq = tape.matmul(params.correlation, q_flat);
        let scores = tape.matmul(s_t, wq);
        let over_support = tape.softmax_cols(scores);
        let scores_t = tape.transpose(scores);
        let over_query = tape.softmax_cols(scores_t);
        let u_q_flat = tape.matmul(s_flat, over_support);
        let u_s_flat = tape.matmul(q_flat, over_query);
        let u_q = tape.reshape(u_q_flat, vec![c, h, w]);
        let u_s = tape.reshape(u_s_flat, vec![c, h, w]);
        let (gq, gq_gate) = gate_on_tape(tape, u_q, params.gate_weight, params.gate_bias);
        let (gs, _) = gate_on_tape(tape, u_s, sg_w, sg_b);
        gated_q.push(gq);
        query_gates.push(gq_gate);
        let sup = tape.concat_channels(&[gs, cond_s]);
        supports.push(sup);
    }

    let avg = tape.mean_stack(&gated_q);
    let query = tape.concat_channels(&[avg, cond_q]);
    (query, supports, query_gates)
}
