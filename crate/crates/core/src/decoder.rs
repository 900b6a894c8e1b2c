//! Segmentation head: iterative refinement followed by multi-rate context
//! aggregation and bilinear upsampling to image resolution.
//!
//! Refinement concatenates the feature map with the previous two-channel
//! probability map (a zero map on the first pass), applies two 3x3
//! convolutions in residual form, and re-predicts the probability map. The
//! loop runs a fixed number of iterations with shared weights. The final
//! hidden state feeds a pyramid of dilated convolutions plus a pooled global
//! branch, whose fused output is classified into two channels and upsampled.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::ops;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Refinement pass count R. The first pass sees a zero probability map.
    pub iterations: usize,
    /// Hidden width of the refinement convolutions.
    pub mid_channels: usize,
    /// Per-branch width of the context pyramid.
    pub aspp_channels: usize,
    /// Dilation rates of the 3x3 pyramid branches.
    pub aspp_rates: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            iterations: 3,
            mid_channels: 256,
            aspp_channels: 256,
            aspp_rates: vec![6, 12, 18],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("decoder needs at least one iteration".into()));
        }
        if self.mid_channels == 0 || self.aspp_channels == 0 {
            return Err(Error::Config("decoder channel counts must be positive".into()));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.iter().any(|&r| r == 0) {
            return Err(Error::Config("dilation rates must be positive and nonempty".into()));
        }
        Ok(())
    }
}

/// Weights of the segmentation head. All convolutions carry a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<S: Scalar> {
    pub config: DecoderConfig,
    /// 3x3, (in_channels + 2) -> mid.
    pub refine_in: (Tensor<S>, Tensor<S>),
    /// 3x3, mid -> mid, applied residually.
    pub refine_mid: (Tensor<S>, Tensor<S>),
    /// 1x1, mid -> 2; its softmax feeds the next refinement pass.
    pub mid_head: (Tensor<S>, Tensor<S>),
    /// 1x1, mid -> aspp.
    pub aspp_point: (Tensor<S>, Tensor<S>),
    /// 3x3 dilated, mid -> aspp, one per rate.
    pub aspp_dilated: Vec<(Tensor<S>, Tensor<S>)>,
    /// 1x1 on the pooled vector, mid -> aspp.
    pub aspp_pool: (Tensor<S>, Tensor<S>),
    /// 1x1, aspp * (rates + 2) -> mid.
    pub aspp_merge: (Tensor<S>, Tensor<S>),
    /// 1x1, mid -> 2 logits.
    pub head: (Tensor<S>, Tensor<S>),
}

pub(crate) fn he_conv<S: Scalar>(
    seed: u64,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> (Tensor<S>, Tensor<S>) {
    let mut r = rng::seeded_stream(seed, name);
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let w = Tensor::from_fn(vec![out_c, in_c, k, k], |_| {
        S::from_f64(rng::normal(&mut r) * std)
    });
    (w, Tensor::zeros(vec![out_c]))
}

pub(crate) fn xavier_conv<S: Scalar>(
    seed: u64,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> (Tensor<S>, Tensor<S>) {
    let mut r = rng::seeded_stream(seed, name);
    let std = (2.0 / ((in_c + out_c) * k * k) as f64).sqrt();
    let w = Tensor::from_fn(vec![out_c, in_c, k, k], |_| {
        S::from_f64(rng::normal(&mut r) * std)
    });
    (w, Tensor::zeros(vec![out_c]))
}

impl<S: Scalar> DecoderParams<S> {
    /// Seeded initialization: variance-scaled normals for ReLU-followed
    /// convolutions, smaller symmetric scaling for the linear heads.
    pub fn init(config: DecoderConfig, in_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mid = config.mid_channels;
        let aspp = config.aspp_channels;
        let branches = config.aspp_rates.len() + 2;
        Ok(DecoderParams {
            refine_in: he_conv(seed, "decoder.refine_in", mid, in_channels + 2, 3),
            refine_mid: he_conv(seed, "decoder.refine_mid", mid, mid, 3),
            mid_head: xavier_conv(seed, "decoder.mid_head", 2, mid, 1),
            aspp_point: he_conv(seed, "decoder.aspp.point", aspp, mid, 1),
            aspp_dilated: config
                .aspp_rates
                .iter()
                .map(|&rate| he_conv(seed, &format!("decoder.aspp.rate{rate}"), aspp, mid, 3))
                .collect(),
            aspp_pool: he_conv(seed, "decoder.aspp.pool", aspp, mid, 1),
            aspp_merge: he_conv(seed, "decoder.aspp.merge", mid, aspp * branches, 1),
            head: xavier_conv(seed, "decoder.head", 2, mid, 1),
            config,
        })
    }

    /// Feature channel count this head expects.
    pub fn in_channels(&self) -> usize {
        self.refine_in.0.dims()[1] - 2
    }

    /// Visits every parameter with its name. Traversal order is the contract
    /// shared with [`DecoderParams::leaves`].
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<S>)) {
        let mut pair = |name: &str, p: &(Tensor<S>, Tensor<S>)| {
            f(&format!("{name}.weight"), &p.0);
            f(&format!("{name}.bias"), &p.1);
        };
        pair("decoder.refine_in", &self.refine_in);
        pair("decoder.refine_mid", &self.refine_mid);
        pair("decoder.mid_head", &self.mid_head);
        pair("decoder.aspp.point", &self.aspp_point);
        for (rate, p) in self.config.aspp_rates.iter().zip(&self.aspp_dilated) {
            pair(&format!("decoder.aspp.rate{rate}"), p);
        }
        pair("decoder.aspp.pool", &self.aspp_pool);
        pair("decoder.aspp.merge", &self.aspp_merge);
        pair("decoder.head", &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        let mut pair = |name: &str, p: &mut (Tensor<S>, Tensor<S>)| {
            f(&format!("{name}.weight"), &mut p.0);
            f(&format!("{name}.bias"), &mut p.1);
        };
        pair("decoder.refine_in", &mut self.refine_in);
        pair("decoder.refine_mid", &mut self.refine_mid);
        pair("decoder.mid_head", &mut self.mid_head);
        pair("decoder.aspp.point", &mut self.aspp_point);
        for (rate, p) in self.config.aspp_rates.iter().zip(self.aspp_dilated.iter_mut()) {
            pair(&format!("decoder.aspp.rate{rate}"), p);
        }
        pair("decoder.aspp.pool", &mut self.aspp_pool);
        pair("decoder.aspp.merge", &mut self.aspp_merge);
        pair("decoder.head", &mut self.head);
    }

    /// Registers every parameter as a trainable leaf, in `visit` order.
    pub fn leaves(&self, tape: &mut Tape<S>) -> DecoderVars {
        let pair = |tape: &mut Tape<S>, p: &(Tensor<S>, Tensor<S>)| {
            (tape.leaf(p.0.clone(), true), tape.leaf(p.1.clone(), true))
        };
        DecoderVars {
            config: self.config.clone(),
            refine_in: pair(tape, &self.refine_in),
            refine_mid: pair(tape, &self.refine_mid),
            mid_head: pair(tape, &self.mid_head),
            aspp_point: pair(tape, &self.aspp_point),
            aspp_dilated: self.aspp_dilated.iter().map(|p| pair(tape, p)).collect(),
            aspp_pool: pair(tape, &self.aspp_pool),
            aspp_merge: pair(tape, &self.aspp_merge),
            head: pair(tape, &self.head),
        }
    }
}

/// Tape-side handles to decoder parameters.
#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub config: DecoderConfig,
    pub refine_in: (Var, Var),
    pub refine_mid: (Var, Var),
    pub mid_head: (Var, Var),
    pub aspp_point: (Var, Var),
    pub aspp_dilated: Vec<(Var, Var)>,
    pub aspp_pool: (Var, Var),
    pub aspp_merge: (Var, Var),
    pub head: (Var, Var),
}

impl DecoderVars {
    /// Flat parameter list in `visit` order.
    pub fn trainable(&self, out: &mut Vec<Var>) {
        let mut pair = |p: &(Var, Var)| {
            out.push(p.0);
            out.push(p.1);
        };
        pair(&self.refine_in);
        pair(&self.refine_mid);
        pair(&self.mid_head);
        pair(&self.aspp_point);
        for p in &self.aspp_dilated {
            pair(p);
        }
        pair(&self.aspp_pool);
        pair(&self.aspp_merge);
        pair(&self.head);
    }
}

/// Full-resolution two-channel prediction for one query.
#[derive(Debug, Clone)]
pub struct SegmentationOutput<S: Scalar> {
    pub logits: Tensor<S>,
    /// Per-pixel softmax of the logits; channels sum to one.
    pub probabilities: Tensor<S>,
}

impl<S: Scalar> SegmentationOutput<S> {
    /// Argmax mask: foreground where its probability exceeds background.
    pub fn predicted_mask(&self) -> Mask {
        let (h, w) = (self.probabilities.height(), self.probabilities.width());
        Mask::from_fn(h, w, |y, x| {
            u8::from(self.probabilities.at3(1, y, x) > self.probabilities.at3(0, y, x))
        })
    }
}

fn check_inputs<S: Scalar>(
    params: &DecoderParams<S>,
    features: &Tensor<S>,
    prev: Option<&Tensor<S>>,
) -> Result<(usize, usize)> {
    if features.dims().len() != 3 || features.dims()[0] != params.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "decoder expects [{}, h, w] features, got {:?}",
            params.in_channels(),
            features.dims()
        )));
    }
    let (h, w) = (features.height(), features.width());
    if let Some(p) = prev {
        if p.dims() != [2, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "previous probability map must be [2, {h}, {w}], got {:?}",
                p.dims()
            )));
        }
    }
    Ok((h, w))
}

/// Per-pixel softmax over channels of a `[C,H,W]` logit map.
pub fn pixel_probabilities<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (logits.channels(), logits.height(), logits.width());
    ops::softmax_cols(&logits.reshaped(vec![c, h * w])).reshaped(vec![c, h, w])
}

/// Runs the head on one feature map. `prev` seeds the first refinement pass;
/// absent, a zero map is used. Output spatial size is `out_hw`.
pub fn decode<S: Scalar>(
    params: &DecoderParams<S>,
    features: &Tensor<S>,
    prev: Option<&Tensor<S>>,
    out_hw: (usize, usize),
) -> Result<SegmentationOutput<S>> {
    let (h, w) = check_inputs(params, features, prev)?;
    let conv1 = |x: &Tensor<S>, p: &(Tensor<S>, Tensor<S>)| ops::conv2d(x, &p.0, &p.1, 1, 0, 1);

    let mut p = prev.cloned().unwrap_or_else(|| Tensor::zeros(vec![2, h, w]));
    let mut t = Tensor::zeros(vec![0]);
    for _ in 0..params.config.iterations {
        let x = ops::concat_channels(&[features, &p]);
        let a = ops::relu(&ops::conv2d(&x, &params.refine_in.0, &params.refine_in.1, 1, 1, 1));
        let b = ops::relu(&ops::conv2d(&a, &params.refine_mid.0, &params.refine_mid.1, 1, 1, 1));
        t = a.add(&b);
        p = pixel_probabilities(&conv1(&t, &params.mid_head));
    }

    let mut branches = vec![ops::relu(&conv1(&t, &params.aspp_point))];
    for (&rate, pd) in params.config.aspp_rates.iter().zip(&params.aspp_dilated) {
        branches.push(ops::relu(&ops::conv2d(&t, &pd.0, &pd.1, 1, rate, rate)));
    }
    let pooled = ops::global_avg_pool(&t);
    let pooled = ops::relu(&conv1(&pooled, &params.aspp_pool));
    let aspp_c = params.config.aspp_channels;
    branches.push(ops::tile_vector(&pooled.reshaped(vec![aspp_c]), h, w));

    let stacked = ops::concat_channels(&branches.iter().collect::<Vec<_>>());
    let ctx = ops::relu(&conv1(&stacked, &params.aspp_merge));
    let grid_logits = conv1(&ctx, &params.head);
    let logits = ops::upsample_bilinear(&grid_logits, out_hw.0, out_hw.1);
    let probabilities = pixel_probabilities(&logits);
    Ok(SegmentationOutput {
        logits,
        probabilities,
    })
}

/// Differentiable twin of [`decode`]; returns the full-resolution logits var.
pub fn decode_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    prev: Option<Var>,
    params: &DecoderVars,
    out_hw: (usize, usize),
) -> Var {
    let (h, w) = (tape.value(features).height(), tape.value(features).width());
    let conv1 = |tape: &mut Tape<S>, x: Var, p: (Var, Var)| tape.conv2d(x, p.0, p.1, 1, 0, 1);
    let softmax_px = |tape: &mut Tape<S>, x: Var| {
        let (c, h, w) = {
            let t = tape.value(x);
            (t.channels(), t.height(), t.width())
        };
        let flat = tape.reshape(x, vec![c, h * w]);
        let sm = tape.softmax_cols(flat);
        tape.reshape(sm, vec![c, h, w])
    };

    let mut p = prev.unwrap_or_else(|| tape.leaf(Tensor::zeros(vec![2, h, w]), false));
    let mut t = features;
    for _ in 0..params.config.iterations {
        let x = tape.concat_channels(&[features, p]);
        let a = tape.conv2d(x, params.refine_in.0, params.refine_in.1, 1, 1, 1);
        let a = tape.relu(a);
        let b = tape.conv2d(a, params.refine_mid.0, params.refine_mid.1, 1, 1, 1);
        let b = tape.relu(b);
        t = tape.add(a, b);
        let mid = conv1(tape, t, params.mid_head);
        p = softmax_px(tape, mid);
    }

    let mut branches = Vec::new();
    let point = conv1(tape, t, params.aspp_point);
    branches.push(tape.relu(point));
    for (&rate, &pd) in params.config.aspp_rates.iter().zip(&params.aspp_dilated) {
        let d = tape.conv2d(t, pd.0, pd.1, 1, rate, rate);
        branches.push(tape.relu(d));
    }
    let pooled = tape.global_avg_pool(t);
    let pooled = conv1(tape, pooled, params.aspp_pool);
    let pooled = tape.relu(pooled);
    let pooled = tape.reshape(pooled, vec![params.config.aspp_channels]);
    branches.push(tape.tile_vector(pooled, h, w));

    let stacked = tape.concat_channels(&branches);
    let ctx = conv1(tape, stacked, params.aspp_merge);
    let ctx = tape.relu(ctx);
    let grid_logits = conv1(tape, ctx, params.head);
    tape.upsample_bilinear(grid_logits, out_hw.0, out_hw.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_error, numeric_gradient};

    fn small_config() -> DecoderConfig {
        DecoderConfig {
            iterations: 2,
            mid_channels: 4,
            aspp_channels: 3,
            aspp_rates: vec![1, 2],
        }
    }

    fn random_features(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(vec![c, h, w], |_| rng::normal(&mut r))
    }

    #[test]
    fn probabilities_sum_to_one() {
        let params = DecoderParams::<f64>::init(small_config(), 5, 3).unwrap();
        let out = decode(&params, &random_features(1, 5, 4, 4), None, (8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let s = out.probabilities.at3(0, y, x) + out.probabilities.at3(1, y, x);
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn output_matches_requested_resolution() {
        let params = DecoderParams::<f64>::init(small_config(), 5, 3).unwrap();
        let out = decode(&params, &random_features(1, 5, 4, 4), None, (13, 17)).unwrap();
        assert_eq!(out.logits.dims(), &[2, 13, 17]);
        assert_eq!(out.probabilities.dims(), &[2, 13, 17]);
    }

    #[test]
    fn iteration_count_changes_prediction() {
        let mut one = small_config();
        one.iterations = 1;
        let mut two = small_config();
        two.iterations = 2;
        let a = DecoderParams::<f64>::init(one, 5, 3).unwrap();
        let b = DecoderParams::<f64>::init(two, 5, 3).unwrap();
        let features = random_features(7, 5, 4, 4);
        let la = decode(&a, &features, None, (8, 8)).unwrap().logits;
        let lb = decode(&b, &features, None, (8, 8)).unwrap().logits;
        assert!(la.max_abs_diff(&lb) > 1e-6);
    }

    #[test]
    fn previous_map_seeds_first_pass() {
        let params = DecoderParams::<f64>::init(small_config(), 5, 3).unwrap();
        let features = random_features(2, 5, 4, 4);
        let zero = decode(&params, &features, None, (8, 8)).unwrap().logits;
        let mut warm = Tensor::zeros(vec![2, 4, 4]);
        for i in 0..16 {
            warm.data_mut()[i] = 0.9;
            warm.data_mut()[16 + i] = 0.1;
        }
        let seeded = decode(&params, &features, Some(&warm), (8, 8)).unwrap().logits;
        assert!(zero.max_abs_diff(&seeded) > 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        let params = DecoderParams::<f64>::init(small_config(), 5, 3).unwrap();
        let err = decode(&params, &random_features(1, 4, 4, 4), None, (8, 8)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
        let bad_prev = Tensor::zeros(vec![2, 3, 3]);
        let err = decode(
            &params,
            &random_features(1, 5, 4, 4),
            Some(&bad_prev),
            (8, 8),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn tape_forward_matches_pure_forward() {
        let params = DecoderParams::<f64>::init(small_config(), 5, 3).unwrap();
        let features = random_features(4, 5, 4, 4);
        let pure = decode(&params, &features, None, (8, 8)).unwrap().logits;
        let mut tape = Tape::new();
        let f = tape.leaf(features, false);
        let vars = params.leaves(&mut tape);
        let logits = decode_on_tape(&mut tape, f, None, &vars, (8, 8));
        assert_eq!(&pure, tape.value(logits));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let config = DecoderConfig {
            iterations: 2,
            mid_channels: 3,
            aspp_channels: 2,
            aspp_rates: vec![1],
        };
        let params = DecoderParams::<f64>::init(config, 3, 11).unwrap();
        let features = random_features(12, 3, 3, 3);
        let mut rw = rng::seeded(13);
        let weights = Tensor::from_fn(vec![2, 5, 5], |_| rng::normal(&mut rw));

        let loss_with = |p: &DecoderParams<f64>| {
            let out = decode(p, &features, None, (5, 5)).unwrap();
            out.logits
                .data()
                .iter()
                .zip(weights.data())
                .map(|(&l, &w)| l * w)
                .sum::<f64>()
        };

        let mut tape = Tape::new();
        let f = tape.leaf(features.clone(), false);
        let vars = params.leaves(&mut tape);
        let logits = decode_on_tape(&mut tape, f, None, &vars, (5, 5));
        let wvar = tape.leaf(weights.clone(), false);
        let prod = tape.mul(logits, wvar);
        let flat = tape.reshape(prod, vec![1, 50]);
        let ones = tape.leaf(Tensor::matrix(50, 1, vec![1.0; 50]), false);
        let total = tape.matmul(flat, ones);
        let loss = tape.reshape(total, vec![1]);
        let grads = tape.backward(loss);

        let mut flat_vars = Vec::new();
        vars.trainable(&mut flat_vars);
        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name.to_string()));
        assert_eq!(names.len(), flat_vars.len());

        let mut idx = 0;
        let mut clone = params.clone();
        clone.visit_mut(&mut |name, tensor| {
            let analytic = grads.get(flat_vars[idx]).expect("missing gradient").clone();
            let base = tensor.clone();
            let numeric = numeric_gradient(
                |t| {
                    let mut probe = params.clone();
                    let mut j = 0;
                    probe.visit_mut(&mut |_, pt| {
                        if j == idx {
                            *pt = t.clone();
                        }
                        j += 1;
                    });
                    loss_with(&probe)
                },
                &base,
                1e-5,
            );
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: rel err {err}");
            idx += 1;
        });
        assert_eq!(idx, names.len());
    }
}
