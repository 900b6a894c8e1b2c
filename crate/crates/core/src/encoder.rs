//! Frozen convolutional feature extractors.
//!
//! The extractor runs outside the differentiation tape: its parameters are
//! never registered as trainable leaves, so training cannot touch them. The
//! `weights_digest` hash makes that freeze checkable end to end.

use sha2::{Digest, Sha256};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::ops;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Image-to-feature-map backbone. Implementations must be deterministic.
pub trait Encoder<S: Scalar>: Send + Sync {
    /// Channel count of the produced feature maps.
    fn out_channels(&self) -> usize;

    /// Total spatial downsampling factor.
    fn stride(&self) -> usize;

    /// Maps an RGB image `[3, H, W]` to features `[C, H/stride, W/stride]`.
    fn encode(&self, image: &Tensor<S>) -> Result<Tensor<S>>;

    /// Content hash of all parameters, for freeze checks.
    fn weights_digest(&self) -> String;
}

/// Plain stack of 3x3 convolutions with ReLU after every layer.
///
/// The `tiny` preset uses strides [2, 2, 2, 1] for an overall stride of 8,
/// mapping a 32x32 input to a 4x4 grid. Weights are random but fully
/// determined by the seed; the network is used as a fixed feature extractor,
/// never trained.
#[derive(Debug, Clone)]
pub struct SequentialCnn<S: Scalar> {
    layers: Vec<ConvLayer<S>>,
}

#[derive(Debug, Clone)]
struct ConvLayer<S: Scalar> {
    weight: Tensor<S>,
    bias: Tensor<S>,
    stride: usize,
}

const TINY_STRIDES: [usize; 4] = [2, 2, 2, 1];

impl<S: Scalar> SequentialCnn<S> {
    /// Four-layer stride-8 network: 3 -> 8 -> 16 -> C -> C channels.
    pub fn tiny(out_channels: usize, seed: u64) -> Self {
        Self::build_tiny(out_channels, seed, true)
    }

    /// Same topology with all biases zero, so a zero image maps to zero features.
    pub fn tiny_bias_free(out_channels: usize, seed: u64) -> Self {
        Self::build_tiny(out_channels, seed, false)
    }

    fn build_tiny(out_channels: usize, seed: u64, with_bias: bool) -> Self {
        assert!(out_channels > 0, "encoder needs at least one channel");
        let widths = [3, 8, 16, out_channels, out_channels];
        let mut layers = Vec::new();
        for (i, &stride) in TINY_STRIDES.iter().enumerate() {
            let (in_c, out_c) = (widths[i], widths[i + 1]);
            let mut wrng = rng::seeded_stream(seed, &format!("encoder.layer{i}.weight"));
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            let weight = Tensor::from_fn(vec![out_c, in_c, 3, 3], |_| {
                S::from_f64(rng::normal(&mut wrng) * std)
            });
            let bias = if with_bias {
                let mut brng = rng::seeded_stream(seed, &format!("encoder.layer{i}.bias"));
                Tensor::from_fn(vec![out_c], |_| S::from_f64(rng::uniform_in(&mut brng, -0.1, 0.1)))
            } else {
                Tensor::zeros(vec![out_c])
            };
            layers.push(ConvLayer {
                weight,
                bias,
                stride,
            });
        }
        SequentialCnn { layers }
    }

    /// Rebuilds a network from raw (weight, bias, stride) triples, as stored
    /// in a checkpoint. Kernels must be square with odd size.
    pub fn from_parts(parts: Vec<(Tensor<S>, Tensor<S>, usize)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::CheckpointMismatch("backbone has no layers".into()));
        }
        let mut layers = Vec::with_capacity(parts.len());
        for (i, (weight, bias, stride)) in parts.into_iter().enumerate() {
            let d = weight.dims().to_vec();
            if d.len() != 4 || d[2] != d[3] || d[2] % 2 == 0 || bias.dims() != [d[0]] {
                return Err(Error::CheckpointMismatch(format!(
                    "layer{i} has unsupported shape {:?} / {:?}",
                    d,
                    bias.dims()
                )));
            }
            layers.push(ConvLayer {
                weight,
                bias,
                stride,
            });
        }
        Ok(SequentialCnn { layers })
    }

    /// (weight, bias, stride) view of every layer, in order.
    pub fn parts(&self) -> Vec<(&Tensor<S>, &Tensor<S>, usize)> {
        self.layers
            .iter()
            .map(|l| (&l.weight, &l.bias, l.stride))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "sequential-cnn",
            "strides": self.layers.iter().map(|l| l.stride).collect::<Vec<_>>(),
        });
        let mut archive = Archive::new(meta);
        for (i, layer) in self.layers.iter().enumerate() {
            archive.push(format!("layer{i}.weight"), layer.weight.clone());
            archive.push(format!("layer{i}.bias"), layer.bias.clone());
        }
        archive.save(path)
    }

    /// Loads a backbone saved with [`SequentialCnn::save`] or produced by an
    /// external conversion script emitting the same archive layout.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let archive = Archive::<S>::load(path)?;
        if archive.meta.get("kind").and_then(|v| v.as_str()) != Some("sequential-cnn") {
            return Err(Error::CheckpointMismatch(
                "archive does not describe a sequential-cnn backbone".into(),
            ));
        }
        let strides: Vec<usize> = archive
            .meta
            .get("strides")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::CheckpointMismatch("missing stride list".into()))?;
        let mut layers = Vec::new();
        for (i, &stride) in strides.iter().enumerate() {
            let weight = archive
                .get(&format!("layer{i}.weight"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing layer{i}.weight")))?
                .clone();
            let bias = archive
                .get(&format!("layer{i}.bias"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing layer{i}.bias")))?
                .clone();
            if weight.dims().len() != 4 || weight.dims()[2] % 2 == 0 {
                return Err(Error::CheckpointMismatch(format!(
                    "layer{i}.weight has unsupported shape {:?}",
                    weight.dims()
                )));
            }
            layers.push(ConvLayer {
                weight,
                bias,
                stride,
            });
        }
        if layers.is_empty() {
            return Err(Error::CheckpointMismatch("backbone has no layers".into()));
        }
        Ok(SequentialCnn { layers })
    }
}

impl<S: Scalar> Encoder<S> for SequentialCnn<S> {
    fn out_channels(&self) -> usize {
        self.layers.last().unwrap().weight.dims()[0]
    }

    fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    fn encode(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let expected = self.layers[0].weight.dims()[1];
        if image.dims().len() != 3 || image.dims()[0] != expected {
            return Err(Error::InvalidImage(format!(
                "expected {expected}-channel image, got shape {:?}",
                image.dims()
            )));
        }
        let mut x = image.clone();
        for layer in &self.layers {
            let pad = (layer.weight.dims()[2] - 1) / 2;
            x = ops::conv2d(&x, &layer.weight, &layer.bias, layer.stride, pad, 1);
            x = ops::relu(&x);
        }
        Ok(x)
    }

    fn weights_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            let mut bytes = Vec::new();
            for v in layer.weight.data() {
                v.write_le(&mut bytes);
            }
            for v in layer.bias.data() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        format!("{:x}", hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = rng::seeded(seed);
        Tensor::from_fn(vec![3, h, w], |_| rng::uniform(&mut rng) as f32)
    }

    #[test]
    fn tiny_is_stride_eight() {
        let net = SequentialCnn::<f32>::tiny(12, 3);
        assert_eq!(net.stride(), 8);
        assert_eq!(net.out_channels(), 12);
        let features = net.encode(&random_image(1, 32, 32)).unwrap();
        assert_eq!(features.dims(), &[12, 4, 4]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = SequentialCnn::<f32>::tiny(8, 5);
        let b = SequentialCnn::<f32>::tiny(8, 5);
        let c = SequentialCnn::<f32>::tiny(8, 6);
        assert_eq!(a.weights_digest(), b.weights_digest());
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn identical_images_identical_features() {
        let net = SequentialCnn::<f32>::tiny(8, 2);
        let img = random_image(9, 24, 24);
        let a = net.encode(&img).unwrap();
        let b = net.encode(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_image_bias_free_gives_zero_features() {
        let net = SequentialCnn::<f32>::tiny_bias_free(8, 2);
        let features = net.encode(&Tensor::zeros(vec![3, 16, 16])).unwrap();
        assert!(features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let net = SequentialCnn::<f32>::tiny(8, 2);
        let err = net.encode(&Tensor::zeros(vec![1, 16, 16])).unwrap_err();
        assert!(matches!(err, Error::InvalidImage(_)));
    }

    #[test]
    fn outputs_are_nonnegative() {
        let net = SequentialCnn::<f32>::tiny(8, 11);
        let features = net.encode(&random_image(4, 16, 16)).unwrap();
        assert!(features.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn save_load_roundtrip_preserves_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.ckpt");
        let net = SequentialCnn::<f32>::tiny(8, 21);
        net.save(&path).unwrap();
        let loaded = SequentialCnn::<f32>::load(&path).unwrap();
        assert_eq!(net.weights_digest(), loaded.weights_digest());
        let img = random_image(2, 16, 16);
        assert_eq!(net.encode(&img).unwrap(), loaded.encode(&img).unwrap());
    }

    #[test]
    fn load_rejects_foreign_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.ckpt");
        Archive::<f32>::new(serde_json::json!({"kind": "something-else"}))
            .save(&path)
            .unwrap();
        let err = SequentialCnn::<f32>::load(&path).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }
}
