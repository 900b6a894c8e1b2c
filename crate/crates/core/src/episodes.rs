//! Episodic task construction: fold partitions, dataset manifests for the
//! static and video layouts, seeded episode sampling, binary mask building,
//! support augmentation, and episode materialization into tensors.
//!
//! A manifest root looks like:
//!
//! ```text
//! root/
//!   classes.txt        one class name per line; annotation id = line + 1
//!   images/            <stem>.png, or <sequence>/<frame>.png for video
//!   annotations/       same stems as images/; u8 PNGs, 0 = background,
//!                      class ids from classes.txt, 255 = ignore
//!   sequences.txt      video only: "<sequence id>\t<class name>" per line
//! ```
//!
//! Every referenced file is checked eagerly at load time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, IGNORE};
use crate::ops;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Disjoint class partition: held-out classes for meta-testing and the rest
/// for meta-training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub test_classes: Vec<String>,
    pub train_classes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

impl FoldSpec {
    pub fn classes(&self, split: Split) -> &[String] {
        match split {
            Split::MetaTrain => &self.train_classes,
            Split::MetaTest => &self.test_classes,
        }
    }
}

/// Partitions an ordered class list into `n_folds` folds whose test classes
/// are contiguous slices: fold i tests `classes[i*per_fold..(i+1)*per_fold)`.
pub fn make_folds(classes: &[String], n_folds: usize, per_fold: usize) -> Result<Vec<FoldSpec>> {
    if n_folds == 0 || per_fold == 0 || n_folds * per_fold != classes.len() {
        return Err(Error::BadPartition {
            n_classes: classes.len(),
            n_folds,
            per_fold,
        });
    }
    Ok((0..n_folds)
        .map(|i| {
            let lo = i * per_fold;
            let hi = lo + per_fold;
            FoldSpec {
                fold_id: i,
                test_classes: classes[lo..hi].to_vec(),
                train_classes: classes[..lo]
                    .iter()
                    .chain(&classes[hi..])
                    .cloned()
                    .collect(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeMode {
    /// Independent images of the class.
    Static,
    /// Support is the first frame of a sequence, queries are later frames of
    /// the same sequence.
    TosflInstance,
    /// Support frames from one sequence, queries from a different sequence
    /// of the same class.
    TosflCategory,
}

/// One frame or image reference inside an episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    pub image: PathBuf,
    pub annotation: PathBuf,
}

/// A sampled task: k supports and l queries sharing one class label. Only
/// file references; see [`load_episode`] for materialization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub class_label: String,
    pub mode: EpisodeMode,
    pub supports: Vec<EpisodeItem>,
    pub queries: Vec<EpisodeItem>,
    /// Sequence ids for the video modes.
    pub support_sequence: Option<String>,
    pub query_sequence: Option<String>,
}

/// One video sequence: ordered frame stems under `images/<id>/`.
#[derive(Clone, Debug)]
pub struct SequenceEntry {
    pub id: String,
    pub class: String,
    pub frames: Vec<String>,
}

/// Immutable index over a dataset root. Loading validates that every
/// referenced image and annotation file exists.
#[derive(Debug)]
pub struct DatasetManifest {
    root: PathBuf,
    classes: Vec<String>,
    class_images: BTreeMap<String, Vec<String>>,
    sequences: Vec<SequenceEntry>,
    class_sequences: BTreeMap<String, Vec<usize>>,
}

/// Per-pixel class ids as read from an annotation PNG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl Annotation {
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))?
            .to_luma8();
        Ok(Annotation {
            height: img.height() as usize,
            width: img.width() as usize,
            ids: img.into_raw(),
        })
    }

    pub fn id_at(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let classes = read_classes(&root.join("classes.txt"))?;
        let images_dir = root.join("images");
        let annotations_dir = root.join("annotations");

        let mut class_images: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut sequences = Vec::new();

        // Flat files are the static pool; subdirectories hold sequences.
        let mut stems = Vec::new();
        if images_dir.is_dir() {
            for entry in fs::read_dir(&images_dir)? {
                let entry = entry?;
                let path = entry.path();
                if path.is_file() {
                    if let Some(stem) = image_stem(&path) {
                        stems.push(stem);
                    }
                }
            }
        }
        stems.sort();
        for stem in &stems {
            let ann_path = annotations_dir.join(format!("{stem}.png"));
            let ann = Annotation::load(&ann_path)?;
            for id in present_ids(&ann) {
                let name = classes
                    .get(id as usize - 1)
                    .ok_or_else(|| {
                        Error::Parse(format!(
                            "{}: annotation id {id} exceeds classes.txt",
                            ann_path.display()
                        ))
                    })?
                    .clone();
                class_images.entry(name).or_default().push(stem.clone());
            }
        }

        let sequences_file = root.join("sequences.txt");
        if sequences_file.is_file() {
            for (ln, line) in fs::read_to_string(&sequences_file)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let mut parts = line.splitn(2, '\t');
                let id = parts.next().unwrap_or("").trim().to_string();
                let class = parts.next().unwrap_or("").trim().to_string();
                if id.is_empty() || class.is_empty() {
                    return Err(Error::Parse(format!(
                        "sequences.txt line {}: want \"<id>\\t<class>\"",
                        ln + 1
                    )));
                }
                if !classes.contains(&class) {
                    return Err(Error::UnknownClass(class));
                }
                let seq_images = images_dir.join(&id);
                let mut frames = Vec::new();
                for entry in fs::read_dir(&seq_images).map_err(|e| {
                    Error::Parse(format!("sequence {id}: cannot read frames: {e}"))
                })? {
                    let path = entry?.path();
                    if path.is_file() {
                        if let Some(stem) = image_stem(&path) {
                            frames.push(stem);
                        }
                    }
                }
                frames.sort();
                if frames.is_empty() {
                    return Err(Error::InsufficientData {
                        class,
                        reason: format!("sequence {id} has no frames"),
                    });
                }
                for frame in &frames {
                    let ann = annotations_dir.join(&id).join(format!("{frame}.png"));
                    if !ann.is_file() {
                        return Err(Error::Parse(format!("missing annotation {}", ann.display())));
                    }
                }
                sequences.push(SequenceEntry { id, class, frames });
            }
        }

        let mut class_sequences: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, seq) in sequences.iter().enumerate() {
            class_sequences.entry(seq.class.clone()).or_default().push(i);
        }

        Ok(DatasetManifest {
            root: root.to_path_buf(),
            classes,
            class_images,
            sequences,
            class_sequences,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Classes in file order; this order defines annotation ids.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Alphabetical class order, the canonical order for fold assignment.
    pub fn canonical_classes(&self) -> Vec<String> {
        let mut c = self.classes.clone();
        c.sort();
        c
    }

    pub fn class_id(&self, name: &str) -> Result<u8> {
        self.classes
            .iter()
            .position(|c| c == name)
            .map(|i| (i + 1) as u8)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn images_with(&self, class: &str) -> &[String] {
        self.class_images.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sequences_with(&self, class: &str) -> Vec<&SequenceEntry> {
        self.class_sequences
            .get(class)
            .map(|ids| ids.iter().map(|&i| &self.sequences[i]).collect())
            .unwrap_or_default()
    }

    pub fn has_video(&self) -> bool {
        !self.sequences.is_empty()
    }

    fn static_item(&self, stem: &str) -> EpisodeItem {
        EpisodeItem {
            image: self.root.join("images").join(format!("{stem}.png")),
            annotation: self.root.join("annotations").join(format!("{stem}.png")),
        }
    }

    fn frame_item(&self, seq: &str, frame: &str) -> EpisodeItem {
        EpisodeItem {
            image: self.root.join("images").join(seq).join(format!("{frame}.png")),
            annotation: self
                .root
                .join("annotations")
                .join(seq)
                .join(format!("{frame}.png")),
        }
    }

    /// Foreground = all pixels of the class, every instance; ignore pixels
    /// keep their marker.
    pub fn binary_mask(&self, ann: &Annotation, class: &str) -> Result<Mask> {
        let id = self.class_id(class)?;
        Ok(build_binary_mask(ann, id))
    }
}

fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if classes.is_empty() {
        return Err(Error::Parse("classes.txt lists no classes".into()));
    }
    let mut seen = classes.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != classes.len() {
        return Err(Error::Parse("classes.txt has duplicate names".into()));
    }
    if classes.len() > 254 {
        return Err(Error::Parse("more than 254 classes cannot be id-encoded".into()));
    }
    Ok(classes)
}

fn image_stem(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if ext == "png" || ext == "jpg" || ext == "jpeg" {
        Some(path.file_stem()?.to_str()?.to_string())
    } else {
        None
    }
}

fn present_ids(ann: &Annotation) -> Vec<u8> {
    let mut seen = [false; 256];
    for &id in &ann.ids {
        seen[id as usize] = true;
    }
    (1..=254u8).filter(|&i| seen[i as usize]).collect()
}

/// Pixel = 1 iff its annotation id equals `class_id` (all instances merged);
/// ignore pixels stay marked; everything else is background.
pub fn build_binary_mask(ann: &Annotation, class_id: u8) -> Mask {
    Mask::from_fn(ann.height, ann.width, |y, x| {
        let id = ann.id_at(y, x);
        if id == IGNORE {
            IGNORE
        } else {
            u8::from(id == class_id)
        }
    })
}

/// Draws one episode. The class is uniform over the split's classes; item
/// selection per mode:
/// - static: k+l distinct images containing the class,
/// - tosfl-instance: one sequence; supports are its first k frames, queries
///   are drawn uniformly from the rest,
/// - tosfl-category: supports are the first k frames of one sequence,
///   queries are uniform frames of a different sequence of the same class.
pub fn sample_episode(
    manifest: &DatasetManifest,
    fold: &FoldSpec,
    split: Split,
    mode: EpisodeMode,
    k: usize,
    l: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if k == 0 || l == 0 {
        return Err(Error::Config("episodes need k >= 1 and l >= 1".into()));
    }
    let classes = fold.classes(split);
    if classes.is_empty() {
        return Err(Error::Config("fold split has no classes".into()));
    }
    let class = classes[rng::uniform_usize(rng, classes.len())].clone();

    match mode {
        EpisodeMode::Static => {
            let stems = manifest.images_with(&class);
            if stems.len() < k + l {
                return Err(Error::InsufficientData {
                    class,
                    reason: format!("{} images, need {}", stems.len(), k + l),
                });
            }
            let picks = rng::sample_distinct(rng, stems.len(), k + l);
            let items: Vec<EpisodeItem> = picks
                .iter()
                .map(|&i| manifest.static_item(&stems[i]))
                .collect();
            Ok(Episode {
                class_label: class,
                mode,
                supports: items[..k].to_vec(),
                queries: items[k..].to_vec(),
                support_sequence: None,
                query_sequence: None,
            })
        }
        EpisodeMode::TosflInstance => {
            let seqs = manifest.sequences_with(&class);
            if seqs.is_empty() {
                return Err(Error::InsufficientData {
                    class,
                    reason: "no sequences".into(),
                });
            }
            let seq = seqs[rng::uniform_usize(rng, seqs.len())];
            if seq.frames.len() < k + l {
                return Err(Error::InsufficientData {
                    class,
                    reason: format!(
                        "sequence {} has {} frames, need {}",
                        seq.id,
                        seq.frames.len(),
                        k + l
                    ),
                });
            }
            let supports: Vec<EpisodeItem> = seq.frames[..k]
                .iter()
                .map(|f| manifest.frame_item(&seq.id, f))
                .collect();
            let rest = &seq.frames[k..];
            let picks = rng::sample_distinct(rng, rest.len(), l);
            let queries = picks
                .iter()
                .map(|&i| manifest.frame_item(&seq.id, &rest[i]))
                .collect();
            Ok(Episode {
                class_label: class,
                mode,
                supports,
                queries,
                support_sequence: Some(seq.id.clone()),
                query_sequence: Some(seq.id.clone()),
            })
        }
        EpisodeMode::TosflCategory => {
            let seqs = manifest.sequences_with(&class);
            if seqs.len() < 2 {
                return Err(Error::InsufficientData {
                    class,
                    reason: format!("{} sequences, category mode needs 2", seqs.len()),
                });
            }
            let si = rng::uniform_usize(rng, seqs.len());
            let qi_off = 1 + rng::uniform_usize(rng, seqs.len() - 1);
            let support_seq = seqs[si];
            let query_seq = seqs[(si + qi_off) % seqs.len()];
            if support_seq.frames.len() < k {
                return Err(Error::InsufficientData {
                    class,
                    reason: format!("sequence {} shorter than k={k}", support_seq.id),
                });
            }
            if query_seq.frames.len() < l {
                return Err(Error::InsufficientData {
                    class,
                    reason: format!("sequence {} shorter than l={l}", query_seq.id),
                });
            }
            let supports = support_seq.frames[..k]
                .iter()
                .map(|f| manifest.frame_item(&support_seq.id, f))
                .collect();
            let picks = rng::sample_distinct(rng, query_seq.frames.len(), l);
            let queries = picks
                .iter()
                .map(|&i| manifest.frame_item(&query_seq.id, &query_seq.frames[i]))
                .collect();
            Ok(Episode {
                class_label: class,
                mode,
                supports,
                queries,
                support_sequence: Some(support_seq.id.clone()),
                query_sequence: Some(query_seq.id.clone()),
            })
        }
    }
}

/// Horizontal flip of a `[C,H,W]` image.
fn flip_image<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    Tensor::from_fn(vec![c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (h * w);
        t.at3(ch, y, w - 1 - x)
    })
}

fn crop_image<S: Scalar>(t: &Tensor<S>, top: usize, left: usize, h: usize, w: usize) -> Tensor<S> {
    let c = t.channels();
    Tensor::from_fn(vec![c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (h * w);
        t.at3(ch, top + y, left + x)
    })
}

/// Deterministic core of [`augment_support`]: optional horizontal flip, then
/// a centered crop to `scale` of each side. Image and mask transform
/// together. Scale 1.0 crops nothing.
pub fn apply_augment<S: Scalar>(
    image: &Tensor<S>,
    mask: &Mask,
    flip: bool,
    scale: f64,
) -> (Tensor<S>, Mask) {
    let (mut img, mut m) = if flip {
        (flip_image(image), mask.hflip())
    } else {
        (image.clone(), mask.clone())
    };
    if scale < 1.0 {
        let (h, w) = (img.height(), img.width());
        let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let top = (h - ch) / 2;
        let left = (w - cw) / 2;
        img = crop_image(&img, top, left, ch, cw);
        m = m.crop(top, left, ch, cw);
    }
    (img, m)
}

/// Training-time support augmentation: flip with probability 1/2 and a
/// centered crop at a scale drawn from [0.8, 1.0].
pub fn augment_support<S: Scalar>(
    image: &Tensor<S>,
    mask: &Mask,
    rng: &mut Rng,
) -> (Tensor<S>, Mask) {
    let flip = rng::uniform(rng) < 0.5;
    let scale = rng::uniform_in(rng, 0.8, 1.0);
    apply_augment(image, mask, flip, scale)
}

/// Reads an RGB image into a `[3,H,W]` tensor scaled to [0,1].
pub fn load_image_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(vec![3, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let c = i / (h * w);
        S::from_f64(raw[(y * w + x) * 3 + c] as f64 / 255.0)
    }))
}

/// Materialization options. `image_size` is the square side every image and
/// mask is resized to; augmentation applies to supports only and should be
/// enabled for training splits alone.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub image_size: usize,
    pub augment_supports: bool,
}

/// A fully loaded episode. Support masks are carried for analysis only; the
/// network consumes support images plus the class label.
#[derive(Clone, Debug)]
pub struct LoadedEpisode<S: Scalar> {
    pub class_label: String,
    pub support_images: Vec<Tensor<S>>,
    pub support_masks: Vec<Mask>,
    pub query_images: Vec<Tensor<S>>,
    pub query_masks: Vec<Mask>,
}

fn resize_image<S: Scalar>(t: &Tensor<S>, size: usize) -> Tensor<S> {
    if t.height() == size && t.width() == size {
        t.clone()
    } else {
        ops::upsample_bilinear(t, size, size)
    }
}

/// Loads and resizes every item of an episode, augmenting supports when
/// requested.
pub fn load_episode<S: Scalar>(
    manifest: &DatasetManifest,
    episode: &Episode,
    options: LoadOptions,
    rng: &mut Rng,
) -> Result<LoadedEpisode<S>> {
    let size = options.image_size;
    let mut support_images = Vec::with_capacity(episode.supports.len());
    let mut support_masks = Vec::with_capacity(episode.supports.len());
    for item in &episode.supports {
        let img = load_image_tensor::<S>(&item.image)?;
        let ann = Annotation::load(&item.annotation)?;
        let mask = manifest.binary_mask(&ann, &episode.class_label)?;
        let (img, mask) = if options.augment_supports {
            augment_support(&img, &mask, rng)
        } else {
            (img, mask)
        };
        support_images.push(resize_image(&img, size));
        support_masks.push(mask.resize_nearest(size, size));
    }
    let mut query_images = Vec::with_capacity(episode.queries.len());
    let mut query_masks = Vec::with_capacity(episode.queries.len());
    for item in &episode.queries {
        let img = load_image_tensor::<S>(&item.image)?;
        let ann = Annotation::load(&item.annotation)?;
        let mask = manifest.binary_mask(&ann, &episode.class_label)?;
        query_images.push(resize_image(&img, size));
        query_masks.push(mask.resize_nearest(size, size));
    }
    Ok(LoadedEpisode {
        class_label: episode.class_label.clone(),
        support_images,
        support_masks,
        query_images,
        query_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i:02}")).collect()
    }

    #[test]
    fn contiguous_slices_partition_twenty_classes() {
        let classes = names(20);
        let folds = make_folds(&classes, 4, 5).unwrap();
        assert_eq!(folds.len(), 4);
        assert_eq!(folds[0].test_classes, classes[0..5].to_vec());
        assert_eq!(folds[3].test_classes, classes[15..20].to_vec());
        for fold in &folds {
            assert_eq!(fold.train_classes.len(), 15);
            for c in &fold.test_classes {
                assert!(!fold.train_classes.contains(c));
            }
            let mut all: Vec<_> = fold
                .train_classes
                .iter()
                .chain(&fold.test_classes)
                .cloned()
                .collect();
            all.sort();
            let mut want = classes.clone();
            want.sort();
            assert_eq!(all, want);
        }
    }

    #[test]
    fn five_fold_video_scheme() {
        let classes = names(65);
        let folds = make_folds(&classes, 5, 13).unwrap();
        assert_eq!(folds[2].test_classes, classes[26..39].to_vec());
        let mut union: Vec<String> = folds.iter().flat_map(|f| f.test_classes.clone()).collect();
        union.sort();
        assert_eq!(union, classes);
    }

    #[test]
    fn partition_arithmetic_is_checked() {
        assert!(matches!(
            make_folds(&names(10), 3, 4).unwrap_err(),
            Error::BadPartition { .. }
        ));
        assert!(matches!(
            make_folds(&names(10), 0, 0).unwrap_err(),
            Error::BadPartition { .. }
        ));
    }

    fn static_manifest(root: &Path) -> DatasetManifest {
        synth::generate(
            root,
            &SynthConfig {
                classes: 5,
                images_per_class: 6,
                canvas: 24,
                distractors: true,
                video: None,
                seed: 11,
            },
        )
        .unwrap();
        DatasetManifest::load(root).unwrap()
    }

    fn video_manifest(root: &Path) -> DatasetManifest {
        synth::generate(
            root,
            &SynthConfig {
                classes: 5,
                images_per_class: 0,
                canvas: 24,
                distractors: true,
                video: Some(synth::VideoConfig {
                    sequences_per_class: 3,
                    frames_per_sequence: 5,
                    jitter: 2,
                }),
                seed: 12,
            },
        )
        .unwrap();
        DatasetManifest::load(root).unwrap()
    }

    #[test]
    fn manifest_indexes_every_class() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = static_manifest(dir.path());
        assert_eq!(manifest.classes().len(), 5);
        for class in manifest.classes() {
            assert!(
                manifest.images_with(class).len() >= 6,
                "{class} should appear in at least its own images"
            );
        }
    }

    #[test]
    fn missing_annotation_fails_eagerly() {
        let dir = tempfile::tempdir().unwrap();
        static_manifest(dir.path());
        let victim = fs::read_dir(dir.path().join("annotations"))
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        fs::remove_file(victim).unwrap();
        assert!(DatasetManifest::load(dir.path()).is_err());
    }

    #[test]
    fn same_seed_same_episode_stream() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = static_manifest(dir.path());
        let classes = manifest.canonical_classes();
        let fold = &make_folds(&classes, 5, 1).unwrap()[0];
        let sample_n = |seed: u64| {
            let mut r = rng::seeded(seed);
            (0..20)
                .map(|_| {
                    sample_episode(
                        &manifest,
                        fold,
                        Split::MetaTrain,
                        EpisodeMode::Static,
                        1,
                        1,
                        &mut r,
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(sample_n(5), sample_n(5));
        assert_ne!(sample_n(5), sample_n(6));
    }

    #[test]
    fn meta_test_never_leaks_train_classes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = static_manifest(dir.path());
        let classes = manifest.canonical_classes();
        let fold = &make_folds(&classes, 5, 1).unwrap()[2];
        let mut r = rng::seeded(3);
        for _ in 0..1000 {
            let ep = sample_episode(
                &manifest,
                fold,
                Split::MetaTest,
                EpisodeMode::Static,
                1,
                2,
                &mut r,
            )
            .unwrap();
            assert!(fold.test_classes.contains(&ep.class_label));
            assert!(!fold.train_classes.contains(&ep.class_label));
        }
    }

    #[test]
    fn static_episode_items_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = static_manifest(dir.path());
        let classes = manifest.canonical_classes();
        let fold = &make_folds(&classes, 5, 1).unwrap()[0];
        let mut r = rng::seeded(9);
        let ep = sample_episode(
            &manifest,
            fold,
            Split::MetaTrain,
            EpisodeMode::Static,
            2,
            3,
            &mut r,
        )
        .unwrap();
        let mut paths: Vec<_> = ep
            .supports
            .iter()
            .chain(&ep.queries)
            .map(|i| i.image.clone())
            .collect();
        assert_eq!(paths.len(), 5);
        paths.sort();
        paths.dedup();
        assert_eq!(paths.len(), 5, "all episode items must be distinct");
    }

    #[test]
    fn too_small_class_reports_insufficient_data() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = static_manifest(dir.path());
        let classes = manifest.canonical_classes();
        let fold = &make_folds(&classes, 5, 1).unwrap()[0];
        let mut r = rng::seeded(1);
        let err = sample_episode(
            &manifest,
            fold,
            Split::MetaTest,
            EpisodeMode::Static,
            50,
            50,
            &mut r,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn instance_mode_uses_first_frame_and_same_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = video_manifest(dir.path());
        let classes = manifest.canonical_classes();
        let fold = &make_folds(&classes, 5, 1).unwrap()[0];
        let mut r = rng::seeded(21);
        for _ in 0..50 {
            let ep = sample_episode(
                &manifest,
                fold,
                Split::MetaTrain,
                EpisodeMode::TosflInstance,
                1,
                2,
                &mut r,
            )
            .unwrap();
            assert_eq!(ep.support_sequence, ep.query_sequence);
            let seq = ep.support_sequence.as_ref().unwrap();
            let first = manifest
                .sequences_with(&ep.class_label)
                .into_iter()
                .find(|s| &s.id == seq)
                .unwrap()
                .frames[0]
                .clone();
            assert!(ep.supports[0].image.ends_with(format!("{seq}/{first}.png")));
            for q in &ep.queries {
                assert!(!q.image.ends_with(format!("{seq}/{first}.png")));
                assert!(q.image.to_str().unwrap().contains(&format!("/{seq}/")));
            }
        }
    }

    #[test]
    fn category_mode_uses_two_sequences_of_one_class() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = video_manifest(dir.path());
        let classes = manifest.canonical_classes();
        let fold = &make_folds(&classes, 5, 1).unwrap()[1];
        let mut r = rng::seeded(22);
        for _ in 0..1000 {
            let ep = sample_episode(
                &manifest,
                fold,
                Split::MetaTrain,
                EpisodeMode::TosflCategory,
                1,
                2,
                &mut r,
            )
            .unwrap();
            assert_ne!(ep.support_sequence, ep.query_sequence);
            let sup = ep.support_sequence.as_ref().unwrap();
            let qry = ep.query_sequence.as_ref().unwrap();
            let of_class: Vec<String> = manifest
                .sequences_with(&ep.class_label)
                .iter()
                .map(|s| s.id.clone())
                .collect();
            assert!(of_class.contains(sup) && of_class.contains(qry));
        }
    }

    #[test]
    fn binary_mask_marks_all_instances_and_only_them() {
        let ann = Annotation {
            height: 4,
            width: 4,
            ids: vec![0, 1, 1, 0, 2, 2, 0, 1, 0, 255, 2, 1, 0, 0, 0, 0],
        };
        let m = build_binary_mask(&ann, 1);
        assert_eq!(m.foreground_count(), 4);
        assert_eq!(m.get(2, 1), IGNORE);
        let m2 = build_binary_mask(&ann, 3);
        assert_eq!(m2.foreground_count(), 0);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = static_manifest(dir.path());
        let ann = Annotation {
            height: 1,
            width: 1,
            ids: vec![0],
        };
        assert!(matches!(
            manifest.binary_mask(&ann, "unicorn").unwrap_err(),
            Error::UnknownClass(_)
        ));
    }

    #[test]
    fn flip_is_an_involution_and_commutes_with_masks() {
        let mut r = rng::seeded(2);
        let img = Tensor::<f32>::from_fn(vec![3, 6, 5], |_| rng::uniform(&mut r) as f32);
        let mask = Mask::from_fn(6, 5, |y, x| u8::from((y * x) % 3 == 0));
        let (f1, m1) = apply_augment(&img, &mask, true, 1.0);
        let (f2, m2) = apply_augment(&f1, &m1, true, 1.0);
        assert_eq!(img, f2);
        assert_eq!(mask, m2);
        for y in 0..6 {
            for x in 0..5 {
                assert_eq!(m1.get(y, x), mask.get(y, 4 - x));
                assert_eq!(f1.at3(0, y, x), img.at3(0, y, 4 - x));
            }
        }
    }

    #[test]
    fn full_scale_crop_is_identity() {
        let mut r = rng::seeded(3);
        let img = Tensor::<f32>::from_fn(vec![3, 8, 8], |_| rng::uniform(&mut r) as f32);
        let mask = Mask::from_fn(8, 8, |y, _| u8::from(y < 4));
        let (img2, mask2) = apply_augment(&img, &mask, false, 1.0);
        assert_eq!(img, img2);
        assert_eq!(mask, mask2);
    }

    #[test]
    fn crop_is_centered() {
        let img = Tensor::<f32>::from_fn(vec![1, 10, 10], |i| i as f32);
        let mask = Mask::zeros(10, 10);
        let (img2, _) = apply_augment(&img, &mask, false, 0.8);
        assert_eq!(img2.dims(), &[1, 8, 8]);
        assert_eq!(img2.at3(0, 0, 0), img.at3(0, 1, 1));
    }

    #[test]
    fn loaded_episode_has_uniform_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = static_manifest(dir.path());
        let classes = manifest.canonical_classes();
        let fold = &make_folds(&classes, 5, 1).unwrap()[0];
        let mut r = rng::seeded(8);
        let ep = sample_episode(
            &manifest,
            fold,
            Split::MetaTrain,
            EpisodeMode::Static,
            2,
            2,
            &mut r,
        )
        .unwrap();
        let loaded: LoadedEpisode<f32> = load_episode(
            &manifest,
            &ep,
            LoadOptions {
                image_size: 32,
                augment_supports: true,
            },
            &mut r,
        )
        .unwrap();
        assert_eq!(loaded.support_images.len(), 2);
        assert_eq!(loaded.query_images.len(), 2);
        for img in loaded.support_images.iter().chain(&loaded.query_images) {
            assert_eq!(img.dims(), &[3, 32, 32]);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for m in loaded.support_masks.iter().chain(&loaded.query_masks) {
            assert_eq!((m.height(), m.width()), (32, 32));
            assert!(m.data().iter().all(|&v| v == 0 || v == 1 || v == IGNORE));
        }
        assert!(
            loaded.query_masks.iter().any(|m| m.foreground_count() > 0),
            "synthetic queries should show the class"
        );
    }
}
