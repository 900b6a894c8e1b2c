//! Word embeddings for class labels and their projection into the
//! conditioning vector that is tiled across visual feature maps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw embedding for one class label. Multi-word labels are already reduced
/// to a single vector by [`lookup`].
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
}

/// Source of per-word vectors. Implementations are read-only after
/// construction; lookups are pure.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// Vector for a single word, or `None` when out of vocabulary.
    fn word_vector(&self, word: &str) -> Option<Vec<f64>>;
}

/// Resolve a class label to one embedding. Multi-word labels ("potted
/// plant") average the per-word vectors, which makes the reduction
/// word-order invariant.
pub fn lookup(provider: &dyn EmbeddingProvider, label: &str) -> Result<WordEmbedding> {
    let words: Vec<&str> = label.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::UnknownLabel(format!("empty label {label:?}")));
    }
    let e = provider.dim();
    let mut acc = vec![0.0f64; e];
    for word in &words {
        let v = provider.word_vector(word).ok_or_else(|| {
            Error::UnknownLabel(format!("word {word:?} of label {label:?} not in vocabulary"))
        })?;
        debug_assert_eq!(v.len(), e);
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
    }
    let n = words.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    if !acc.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("word embedding"));
    }
    Ok(WordEmbedding {
        label: label.to_string(),
        vector: acc,
    })
}

/// Embeddings loaded from a plain-text file: one entry per line, a token
/// followed by space-separated decimal floats. An optional first line of two
/// bare integers ("COUNT DIM") is treated as a header and skipped.
#[derive(Debug)]
pub struct FileEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(BufReader::new(file))
    }

    pub fn read<R: Read>(reader: BufReader<R>) -> Result<Self> {
        let mut table: HashMap<String, Vec<f64>> = HashMap::new();
        let mut dim: Option<usize> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            if idx == 0
                && tokens.len() == 2
                && tokens[0].parse::<usize>().is_ok()
                && tokens[1].parse::<usize>().is_ok()
            {
                continue; // COUNT DIM header
            }
            let word = tokens[0];
            let mut vector = Vec::with_capacity(tokens.len() - 1);
            for t in &tokens[1..] {
                let v: f64 = t.parse().map_err(|_| {
                    Error::Parse(format!("line {}: bad float {t:?}", idx + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "line {}: non-finite value for {word:?}",
                        idx + 1
                    )));
                }
                vector.push(v);
            }
            if vector.is_empty() {
                return Err(Error::Parse(format!(
                    "line {}: entry {word:?} has no values",
                    idx + 1
                )));
            }
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: vector.len(),
                    });
                }
                _ => {}
            }
            table.insert(word.to_string(), vector);
        }
        let dim = dim.ok_or_else(|| Error::Parse("embedding file has no entries".into()))?;
        Ok(FileEmbeddings { dim, table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn word_vector(&self, word: &str) -> Option<Vec<f64>> {
        self.table.get(word).cloned()
    }
}

/// Deterministic pseudo-embeddings derived from the word string alone. Every
/// word is in vocabulary; the same word yields the same vector in every
/// process. Intended for tests and for datasets without a curated embedding
/// file.
pub struct HashEmbeddings {
    dim: usize,
}

impl HashEmbeddings {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        HashEmbeddings { dim }
    }
}

impl EmbeddingProvider for HashEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn word_vector(&self, word: &str) -> Option<Vec<f64>> {
        let mut key = String::with_capacity(word.len() + 6);
        let _ = write!(key, "embed:{word}");
        let mut r = rng::seeded_stream(0, &key);
        let scale = 1.0 / (self.dim as f64).sqrt();
        Some((0..self.dim).map(|_| rng::normal(&mut r) * scale).collect())
    }
}

/// Affine projection of a raw embedding into the conditioning vector z.
#[derive(Clone, Debug)]
pub struct SemanticProjection<S: Scalar> {
    /// `[d, E]`
    pub weight: Tensor<S>,
    /// `[d]`
    pub bias: Tensor<S>,
    /// Apply ReLU after the affine map. Off by default.
    pub relu: bool,
}

impl<S: Scalar> SemanticProjection<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>, relu: bool) -> Self {
        assert_eq!(weight.rows(), bias.len(), "projection weight/bias rows");
        SemanticProjection { weight, bias, relu }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `z = W e + b`, optionally rectified.
    pub fn project(&self, e: &WordEmbedding) -> Result<Tensor<S>> {
        if e.vector.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: e.vector.len(),
            });
        }
        let d = self.output_dim();
        let ecols = self.input_dim();
        let mut z = vec![S::zero(); d];
        for i in 0..d {
            let mut acc = self.bias.data()[i];
            for j in 0..ecols {
                acc = acc + self.weight.at2(i, j) * S::from_f64(e.vector[j]);
            }
            z[i] = if self.relu { acc.max(S::zero()) } else { acc };
        }
        Ok(Tensor::vector(z))
    }

    /// Registers weight and bias as trainable leaves.
    pub fn leaves(&self, tape: &mut Tape<S>) -> ProjectionVars {
        ProjectionVars {
            weight: tape.leaf(self.weight.clone(), true),
            bias: tape.leaf(self.bias.clone(), true),
            relu: self.relu,
        }
    }

    /// Visits weight then bias, matching `leaves` order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<S>)) {
        f("projection.weight", &self.weight);
        f("projection.bias", &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        f("projection.weight", &mut self.weight);
        f("projection.bias", &mut self.bias);
    }
}

/// Tape handles for the projection parameters.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub weight: Var,
    pub bias: Var,
    pub relu: bool,
}

impl ProjectionVars {
    pub fn trainable(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Differentiable twin of [`SemanticProjection::project`]. The embedding
/// enters as a frozen leaf; gradients flow to weight and bias only.
pub fn project_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ProjectionVars,
    e: &WordEmbedding,
) -> Var {
    let ev = Tensor::vector(e.vector.iter().map(|&x| S::from_f64(x)).collect());
    let e_leaf = tape.leaf(ev, false);
    let z = tape.linear(vars.weight, e_leaf, vars.bias);
    if vars.relu {
        tape.relu(z)
    } else {
        z
    }
}

/// Broadcast z over the spatial grid and append it below the visual
/// channels: `[C,H,W] + [d] -> [C+d,H,W]`.
pub fn tile_and_concat<S: Scalar>(v: &Tensor<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
    if !v.all_finite() {
        return Err(Error::NonFinite("visual features"));
    }
    if !z.all_finite() {
        return Err(Error::NonFinite("semantic vector"));
    }
    let tiled = ops::tile_vector(z, v.height(), v.width());
    Ok(ops::concat_channels(&[v, &tiled]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::BufReader;

    fn test_vocab() -> FileEmbeddings {
        let text = "potted 1.0 2.0 3.0\nplant 3.0 4.0 7.0\naeroplane 0.5 -0.5 0.25\n";
        FileEmbeddings::read(BufReader::new(text.as_bytes())).unwrap()
    }

    #[test]
    fn lookup_is_deterministic() {
        let p = HashEmbeddings::new(16);
        let a = lookup(&p, "aeroplane").unwrap();
        let b = lookup(&p, "aeroplane").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multi_word_label_averages_parts() {
        let p = test_vocab();
        let combo = lookup(&p, "potted plant").unwrap();
        let a = lookup(&p, "potted").unwrap();
        let b = lookup(&p, "plant").unwrap();
        for i in 0..3 {
            let mean = (a.vector[i] + b.vector[i]) / 2.0;
            assert!((combo.vector[i] - mean).abs() < 1e-12);
        }
        assert_eq!(combo.vector, vec![2.0, 3.0, 5.0]);
    }

    #[test]
    fn empty_label_is_rejected() {
        let p = HashEmbeddings::new(8);
        assert!(matches!(lookup(&p, ""), Err(Error::UnknownLabel(_))));
        assert!(matches!(lookup(&p, "   "), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn out_of_vocabulary_word_is_reported() {
        let p = test_vocab();
        let err = lookup(&p, "potted zebra").unwrap_err();
        match err {
            Error::UnknownLabel(msg) => assert!(msg.contains("zebra")),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn header_line_is_auto_detected() {
        let with_header = "2 3\nfoo 1 2 3\nbar 4 5 6\n";
        let p = FileEmbeddings::read(BufReader::new(with_header.as_bytes())).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.dim(), 3);
        assert_eq!(p.word_vector("foo"), Some(vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let text = "foo 1 2 3\nbar 4 5\n";
        let err = FileEmbeddings::read(BufReader::new(text.as_bytes())).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, got: 2 }));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let text = "foo 1 NaN 3\n";
        assert!(FileEmbeddings::read(BufReader::new(text.as_bytes())).is_err());
    }

    #[test]
    fn load_from_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "cat 1.5 -2.5\ndog 0.25 0.75\n").unwrap();
        let p = FileEmbeddings::load(&path).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(lookup(&p, "dog").unwrap().vector, vec![0.25, 0.75]);
    }

    #[test]
    fn hash_embeddings_differ_between_words() {
        let p = HashEmbeddings::new(32);
        let a = p.word_vector("cat").unwrap();
        let b = p.word_vector("dog").unwrap();
        assert_eq!(a.len(), 32);
        assert_ne!(a, b);
        assert_eq!(a, p.word_vector("cat").unwrap());
    }

    #[test]
    fn projection_identity_map() {
        let w = Tensor::<f64>::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let proj = SemanticProjection::new(w, Tensor::zeros(vec![4]), false);
        let e = WordEmbedding {
            label: "x".into(),
            vector: vec![1.0, 2.0, 3.0, 4.0],
        };
        let z = proj.project(&e).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projection_zero_weight_returns_bias() {
        let proj = SemanticProjection::new(
            Tensor::<f64>::zeros(vec![3, 4]),
            Tensor::full(vec![3], 5.0),
            false,
        );
        let e = WordEmbedding {
            label: "x".into(),
            vector: vec![9.0, -1.0, 2.0, 0.5],
        };
        assert_eq!(proj.project(&e).unwrap().data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn projection_matches_hand_product() {
        let w = Tensor::<f64>::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let b = Tensor::vector(vec![0.1, -0.2]);
        let proj = SemanticProjection::new(w, b, false);
        let e = WordEmbedding {
            label: "x".into(),
            vector: vec![2.0, 1.0, 4.0],
        };
        let z = proj.project(&e).unwrap();
        assert!((z.data()[0] - (2.0 - 2.0 + 2.0 + 0.1)).abs() < 1e-12);
        assert!((z.data()[1] - (3.0 + 4.0 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let proj = SemanticProjection::new(
            Tensor::<f64>::zeros(vec![2, 3]),
            Tensor::zeros(vec![2]),
            false,
        );
        let e = WordEmbedding {
            label: "x".into(),
            vector: vec![1.0, 2.0],
        };
        assert!(matches!(
            proj.project(&e),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn tile_and_concat_small_example() {
        let v = Tensor::feature_map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::vector(vec![9.0]);
        let out = tile_and_concat(&v, &z).unwrap();
        assert_eq!(out.dims(), &[2, 2, 2]);
        assert_eq!(&out.data()[0..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&out.data()[4..8], &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn zero_semantic_vector_keeps_visual_channels() {
        let v = Tensor::<f64>::from_fn(vec![3, 2, 4], |i| i as f64 * 0.5);
        let z = Tensor::zeros(vec![2]);
        let out = tile_and_concat(&v, &z).unwrap();
        assert_eq!(&out.data()[..v.len()], v.data());
        assert!(out.data()[v.len()..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tile_and_concat_rejects_non_finite() {
        let v = Tensor::full(vec![1, 1, 1], f64::NAN);
        let z = Tensor::vector(vec![0.0]);
        assert!(tile_and_concat(&v, &z).is_err());
    }

    proptest! {
        #[test]
        fn every_spatial_slice_carries_the_same_semantics(
            seed in 0u64..1000,
            c in 1usize..4,
            d in 1usize..4,
            h in 1usize..5,
            w in 1usize..5,
        ) {
            let mut r = rng::seeded(seed);
            let v = Tensor::<f64>::from_fn(vec![c, h, w], |_| rng::normal(&mut r));
            let z = Tensor::<f64>::from_fn(vec![d], |_| rng::normal(&mut r));
            let out = tile_and_concat(&v, &z).unwrap();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        prop_assert_eq!(out.at3(ch, y, x), v.at3(ch, y, x));
                    }
                    for j in 0..d {
                        prop_assert_eq!(out.at3(c + j, y, x), z.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn projection_is_linear_without_bias(seed in 0u64..1000) {
            let mut r = rng::seeded(seed);
            let w = Tensor::<f64>::from_fn(vec![3, 5], |_| rng::normal(&mut r));
            let proj = SemanticProjection::new(w, Tensor::zeros(vec![3]), false);
            let e1: Vec<f64> = (0..5).map(|_| rng::normal(&mut r)).collect();
            let e2: Vec<f64> = (0..5).map(|_| rng::normal(&mut r)).collect();
            let (alpha, beta) = (rng::normal(&mut r), rng::normal(&mut r));
            let combo = WordEmbedding {
                label: "c".into(),
                vector: e1.iter().zip(&e2).map(|(a, b)| alpha * a + beta * b).collect(),
            };
            let z_combo = proj.project(&combo).unwrap();
            let z1 = proj.project(&WordEmbedding { label: "a".into(), vector: e1 }).unwrap();
            let z2 = proj.project(&WordEmbedding { label: "b".into(), vector: e2 }).unwrap();
            let lin = z1.scale(alpha).add(&z2.scale(beta));
            let denom = lin.data().iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            prop_assert!(z_combo.max_abs_diff(&lin) / denom < 1e-6);
        }
    }
}
