//! Synthetic shape dataset generator. Writes the same on-disk layout the
//! manifest loader reads: colored geometric shapes on a noisy dark
//! background, with exact annotations, optional distractor shapes from other
//! classes, and an optional video mode where the primary shape translates
//! between frames.
//!
//! A class pairs one of seven shapes with one of seven colors ("red circle",
//! "cyan bar"); up to 49 distinct classes exist. Generation is fully
//! deterministic in the seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Bar,
}

const SHAPES: [Shape; 7] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Ring,
    Shape::Cross,
    Shape::Diamond,
    Shape::Bar,
];

const SHAPE_NAMES: [&str; 7] = ["circle", "square", "triangle", "ring", "cross", "diamond", "bar"];

const COLOR_NAMES: [&str; 7] = ["red", "green", "blue", "yellow", "purple", "cyan", "orange"];

const COLOR_RGB: [[u8; 3]; 7] = [
    [220, 40, 40],
    [40, 200, 60],
    [40, 80, 220],
    [230, 220, 40],
    [160, 40, 200],
    [40, 210, 210],
    [240, 140, 30],
];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VideoConfig {
    pub sequences_per_class: usize,
    pub frames_per_sequence: usize,
    /// Maximum per-axis translation between consecutive frames, in pixels.
    pub jitter: i64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            sequences_per_class: 4,
            frames_per_sequence: 8,
            jitter: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Flat images per class; 0 gives a video-only dataset.
    pub images_per_class: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Draw 0 to 2 shapes from other classes behind the primary one.
    pub distractors: bool,
    pub video: Option<VideoConfig>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 5,
            images_per_class: 40,
            canvas: 64,
            distractors: true,
            video: None,
            seed: 0,
        }
    }
}

/// One drawn shape; later placements paint over earlier ones.
#[derive(Clone, Debug)]
pub struct Placement {
    pub class: String,
    pub class_id: u8,
    pub shape: Shape,
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
}

#[derive(Clone, Debug)]
pub struct ImageReport {
    /// Path stem relative to images/, e.g. "c00_003" or "seq_c00_01/frame002".
    pub stem: String,
    pub placements: Vec<Placement>,
}

/// What was drawn where, for verification against the written annotations.
#[derive(Clone, Debug, Default)]
pub struct SynthReport {
    pub images: Vec<ImageReport>,
}

/// True iff the shape centered at (cx, cy) with radius r covers pixel (y, x).
pub fn shape_covers(shape: Shape, cx: i64, cy: i64, r: i64, y: i64, x: i64) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        // Apex up: width grows linearly from the apex to the base.
        Shape::Triangle => dy >= -r && dy <= r && 2 * dx.abs() <= dy + r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            let inner = r / 2;
            d2 <= r * r && d2 >= inner * inner
        }
        Shape::Cross => {
            let arm = (r / 3).max(1);
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Bar => dx.abs() <= r && dy.abs() <= (r / 3).max(1),
    }
}

struct ClassDef {
    name: String,
    shape: Shape,
    color: [u8; 3],
}

/// Class i pairs shape i mod 7 with a color offset that cycles, so all 49
/// combinations are distinct.
fn class_defs(n: usize) -> Result<Vec<ClassDef>> {
    if n == 0 || n > 49 {
        return Err(Error::Config(format!(
            "synthetic class count must be in 1..=49, got {n}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let s = i % 7;
            let c = (s + i / 7) % 7;
            ClassDef {
                name: format!("{} {}", COLOR_NAMES[c], SHAPE_NAMES[s]),
                shape: SHAPES[s],
                color: COLOR_RGB[c],
            }
        })
        .collect())
}

struct Canvas {
    side: usize,
    rgb: Vec<u8>,
    ids: Vec<u8>,
}

impl Canvas {
    fn background(side: usize, rng: &mut Rng) -> Self {
        let mut rgb = vec![0u8; side * side * 3];
        let base = [25i64, 28, 30];
        for px in 0..side * side {
            let noise = rng::uniform_in(rng, -10.0, 10.0).round() as i64;
            for ch in 0..3 {
                rgb[px * 3 + ch] = (base[ch] + noise).clamp(0, 255) as u8;
            }
        }
        Canvas {
            side,
            rgb,
            ids: vec![0u8; side * side],
        }
    }

    fn paint(&mut self, p: &Placement, color: [u8; 3]) {
        let s = self.side as i64;
        let y0 = (p.cy - p.r).max(0);
        let y1 = (p.cy + p.r).min(s - 1);
        let x0 = (p.cx - p.r).max(0);
        let x1 = (p.cx + p.r).min(s - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if shape_covers(p.shape, p.cx, p.cy, p.r, y, x) {
                    let px = (y as usize) * self.side + x as usize;
                    self.rgb[px * 3..px * 3 + 3].copy_from_slice(&color);
                    self.ids[px] = p.class_id;
                }
            }
        }
    }

    fn save(&self, images: &Path, annotations: &Path, stem: &str) -> Result<()> {
        let side = self.side as u32;
        let img = image::RgbImage::from_raw(side, side, self.rgb.clone())
            .expect("canvas buffer matches dimensions");
        let ann = image::GrayImage::from_raw(side, side, self.ids.clone())
            .expect("canvas buffer matches dimensions");
        let img_path = images.join(format!("{stem}.png"));
        let ann_path = annotations.join(format!("{stem}.png"));
        if let Some(dir) = img_path.parent() {
            fs::create_dir_all(dir)?;
        }
        if let Some(dir) = ann_path.parent() {
            fs::create_dir_all(dir)?;
        }
        img.save(&img_path).map_err(|e| Error::Image(e.to_string()))?;
        ann.save(&ann_path).map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }
}

fn jitter_color(color: [u8; 3], rng: &mut Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let d = rng::uniform_in(rng, -20.0, 20.0).round() as i64;
        out[ch] = (color[ch] as i64 + d).clamp(0, 255) as u8;
    }
    out
}

fn radius_range(canvas: usize) -> (i64, i64) {
    let lo = ((canvas / 6) as i64).max(3);
    let hi = ((canvas / 4) as i64).max(lo + 1);
    (lo, hi)
}

fn place(class: &ClassDef, class_id: u8, canvas: usize, rng: &mut Rng) -> Placement {
    let (lo, hi) = radius_range(canvas);
    let r = lo + rng::uniform_usize(rng, (hi - lo + 1) as usize) as i64;
    let span = canvas as i64 - 2 * r;
    let cx = r + rng::uniform_usize(rng, span.max(1) as usize) as i64;
    let cy = r + rng::uniform_usize(rng, span.max(1) as usize) as i64;
    Placement {
        class: class.name.clone(),
        class_id,
        shape: class.shape,
        cx,
        cy,
        r,
    }
}

/// Distractors first, primary last: the annotation reflects exactly what is
/// visible. A quarter of the images carry a second primary instance.
fn compose_static(
    defs: &[ClassDef],
    ids: &[u8],
    primary: usize,
    config: &SynthConfig,
    rng: &mut Rng,
) -> (Canvas, Vec<Placement>) {
    let mut canvas = Canvas::background(config.canvas, rng);
    let mut placements = Vec::new();
    if config.distractors && defs.len() > 1 {
        for _ in 0..rng::uniform_usize(rng, 3) {
            let mut other = rng::uniform_usize(rng, defs.len() - 1);
            if other >= primary {
                other += 1;
            }
            placements.push(place(&defs[other], ids[other], config.canvas, rng));
        }
    }
    placements.push(place(&defs[primary], ids[primary], config.canvas, rng));
    if rng::uniform(rng) < 0.25 {
        placements.push(place(&defs[primary], ids[primary], config.canvas, rng));
    }
    for p in &placements {
        let color = jitter_color(defs[(ids.iter().position(|&i| i == p.class_id)).unwrap()].color, rng);
        canvas.paint(p, color);
    }
    (canvas, placements)
}

/// Writes a dataset under `root` and reports every placement.
pub fn generate_with_report(root: &Path, config: &SynthConfig) -> Result<SynthReport> {
    if config.canvas < 16 {
        return Err(Error::Config("canvas side must be at least 16".into()));
    }
    let defs = class_defs(config.classes)?;

    // classes.txt is written alphabetically; ids follow that order.
    let mut sorted: Vec<usize> = (0..defs.len()).collect();
    sorted.sort_by(|&a, &b| defs[a].name.cmp(&defs[b].name));
    let mut ids = vec![0u8; defs.len()];
    for (rank, &def_idx) in sorted.iter().enumerate() {
        ids[def_idx] = (rank + 1) as u8;
    }

    fs::create_dir_all(root)?;
    let images_dir = root.join("images");
    let annotations_dir = root.join("annotations");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&annotations_dir)?;
    let class_lines: Vec<&str> = sorted.iter().map(|&i| defs[i].name.as_str()).collect();
    fs::write(root.join("classes.txt"), class_lines.join("\n") + "\n")?;

    let mut report = SynthReport::default();
    let mut rng = rng::seeded_stream(config.seed, "synth");

    for ci in 0..defs.len() {
        for n in 0..config.images_per_class {
            let (canvas, placements) = compose_static(&defs, &ids, ci, config, &mut rng);
            let stem = format!("c{ci:02}_{n:03}");
            canvas.save(&images_dir, &annotations_dir, &stem)?;
            report.images.push(ImageReport { stem, placements });
        }
    }

    if let Some(video) = &config.video {
        if video.frames_per_sequence == 0 || video.sequences_per_class == 0 {
            return Err(Error::Config("video mode needs at least one sequence and frame".into()));
        }
        if video.jitter < 0 {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        let mut seq_lines = Vec::new();
        for ci in 0..defs.len() {
            for sn in 0..video.sequences_per_class {
                let seq_id = format!("seq_c{ci:02}_{sn:02}");
                seq_lines.push(format!("{seq_id}\t{}", defs[ci].name));
                let color = jitter_color(defs[ci].color, &mut rng);

                // Static distractors, one primary on an integer random walk.
                let mut distractors = Vec::new();
                if config.distractors && defs.len() > 1 {
                    for _ in 0..rng::uniform_usize(&mut rng, 3) {
                        let mut other = rng::uniform_usize(&mut rng, defs.len() - 1);
                        if other >= ci {
                            other += 1;
                        }
                        distractors.push((
                            place(&defs[other], ids[other], config.canvas, &mut rng),
                            jitter_color(defs[other].color, &mut rng),
                        ));
                    }
                }
                let mut primary = place(&defs[ci], ids[ci], config.canvas, &mut rng);
                let clamp_hi = config.canvas as i64 - 1 - primary.r;
                for f in 0..video.frames_per_sequence {
                    if f > 0 {
                        let step = (2 * video.jitter + 1) as usize;
                        primary.cx = (primary.cx + rng::uniform_usize(&mut rng, step) as i64
                            - video.jitter)
                            .clamp(primary.r, clamp_hi);
                        primary.cy = (primary.cy + rng::uniform_usize(&mut rng, step) as i64
                            - video.jitter)
                            .clamp(primary.r, clamp_hi);
                    }
                    let mut canvas = Canvas::background(config.canvas, &mut rng);
                    let mut placements = Vec::new();
                    for (d, dc) in &distractors {
                        canvas.paint(d, *dc);
                        placements.push(d.clone());
                    }
                    canvas.paint(&primary, color);
                    placements.push(primary.clone());
                    let stem = format!("{seq_id}/frame{f:03}");
                    canvas.save(&images_dir, &annotations_dir, &stem)?;
                    report.images.push(ImageReport { stem, placements });
                }
            }
        }
        fs::write(root.join("sequences.txt"), seq_lines.join("\n") + "\n")?;
    }

    Ok(report)
}

/// [`generate_with_report`] without the report.
pub fn generate(root: &Path, config: &SynthConfig) -> Result<()> {
    generate_with_report(root, config).map(|_| ())
}
