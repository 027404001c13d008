//! Synthetic scenes: colored shapes on a white background with tight boxes
//! and template captions, standing in for a web-scale image-text corpus.
//!
//! Generation is fully deterministic: each scene derives its own rng from
//! (corpus seed, scene id), so scenes can be produced independently and in
//! parallel. The caption grammar is invertible, which lets caption
//! evaluation use exact matching.
//!
//! `Dataset::load` reads the on-disk schema directly (one `IndexRecord` per
//! line plus PNGs), so an external image-text-detection corpus can be used
//! by converting its annotations to that schema; no real-corpus downloader
//! ships here.

use crate::error::{Error, Result};
use crate::matching::{iou, GroundTruthObjects};
use crate::vision::ImageTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

const COLOR_RGB: [[u8; 3]; 6] = [
    [220, 40, 40],   // red
    [40, 180, 60],   // green
    [50, 80, 220],   // blue
    [230, 210, 40],  // yellow
    [200, 50, 200],  // magenta
    [50, 200, 210],  // cyan
];
const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Scene generation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape extent range in pixels (bounding square side).
    pub min_extent: usize,
    pub max_extent: usize,
    /// Placement attempts per object before skipping it.
    pub max_retries: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_extent: 14,
            max_extent: 26,
            max_retries: 60,
        }
    }
}

impl SceneConfig {
    /// Preset rendering at 160x160 for the image-size scaling tests.
    pub fn large() -> Self {
        SceneConfig {
            image_size: 160,
            min_extent: 30,
            max_extent: 60,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config("scene image_size must be >= 32".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if self.min_extent < 4 || self.min_extent > self.max_extent || self.max_extent >= self.image_size / 2 {
            return Err(Error::Config(format!(
                "extent range [{}, {}] incompatible with image size {}",
                self.min_extent, self.max_extent, self.image_size
            )));
        }
        Ok(())
    }
}

/// A generated image-text-annotation triple.
#[derive(Debug, Clone)]
pub struct SceneAnnotation {
    pub scene_id: u64,
    pub rng_seed: u64,
    pub objects: GroundTruthObjects,
    pub caption: String,
    /// Interleaved RGB8, `image_size` square.
    pub rgb: Vec<u8>,
    pub image_size: usize,
    /// Objects skipped because placement kept colliding.
    pub skipped_placements: u32,
}

impl SceneAnnotation {
    pub fn image_tensor(&self) -> Result<ImageTensor> {
        ImageTensor::from_rgb8(&self.rgb, self.image_size, self.image_size)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-scene seed derived from the corpus seed and scene id.
pub fn scene_seed(corpus_seed: u64, scene_id: u64) -> u64 {
    splitmix64(corpus_seed ^ splitmix64(scene_id))
}

struct Placed {
    shape: usize,
    color: usize,
    /// Inclusive pixel bounds (x0, y0, x1, y1).
    bounds: (usize, usize, usize, usize),
    box_norm: [f64; 4],
}

fn rasterize(shape: usize, cx: f64, cy: f64, extent: f64, size: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    let r = extent / 2.0;
    let (x_lo, x_hi) = (((cx - r).floor().max(0.0)) as usize, ((cx + r).ceil() as usize).min(size - 1));
    let (y_lo, y_hi) = (((cy - r).floor().max(0.0)) as usize, ((cy + r).ceil() as usize).min(size - 1));
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let fx = x as f64 + 0.5 - cx;
            let fy = y as f64 + 0.5 - cy;
            let inside = match shape {
                0 => fx * fx + fy * fy <= r * r,                       // circle
                1 => fx.abs() <= r && fy.abs() <= r,                   // square
                _ => {
                    // upward isoceles triangle: apex at top, base at bottom
                    let t = (fy + r) / (2.0 * r); // 0 at apex row, 1 at base
                    fy.abs() <= r && fx.abs() <= t * r
                }
            };
            if inside {
                px.push((x, y));
            }
        }
    }
    px
}

fn bounds_of(pixels: &[(usize, usize)]) -> (usize, usize, usize, usize) {
    let mut b = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &(x, y) in pixels {
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x);
        b.3 = b.3.max(y);
    }
    b
}

fn normalize_bounds(b: (usize, usize, usize, usize), size: usize) -> [f64; 4] {
    let s = size as f64;
    let w = (b.2 - b.0 + 1) as f64;
    let h = (b.3 - b.1 + 1) as f64;
    [
        (b.0 as f64 + w / 2.0) / s,
        (b.1 as f64 + h / 2.0) / s,
        w / s,
        h / s,
    ]
}

/// Generate one scene deterministically from its derived seed.
pub fn generate_scene(corpus_seed: u64, scene_id: u64, config: &SceneConfig) -> Result<SceneAnnotation> {
    config.validate()?;
    let seed = scene_seed(corpus_seed, scene_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let target = rng.random_range(config.min_objects..=config.max_objects);

    let mut placed: Vec<(Placed, Vec<(usize, usize)>)> = Vec::new();
    let mut skipped = 0u32;
    for _ in 0..target {
        let mut ok = false;
        for _attempt in 0..config.max_retries {
            let shape = rng.random_range(0..SHAPES.len());
            let color = rng.random_range(0..COLORS.len());
            let extent = rng.random_range(config.min_extent..=config.max_extent) as f64;
            let margin = extent / 2.0 + 1.0;
            let cx = rng.random_range(margin..(size as f64 - margin));
            let cy = rng.random_range(margin..(size as f64 - margin));
            let pixels = rasterize(shape, cx, cy, extent, size);
            if pixels.is_empty() {
                continue;
            }
            let bounds = bounds_of(&pixels);
            let box_norm = normalize_bounds(bounds, size);
            // non-overlapping placement and caption-orderable centers
            let clash = placed.iter().any(|(p, _)| {
                let cx_gap = (p.box_norm[0] - box_norm[0]).abs() * (size as f64);
                iou(&p.box_norm, &box_norm) > 0.1 || cx_gap < 3.0
            });
            if clash {
                continue;
            }
            placed.push((Placed { shape, color, bounds, box_norm }, pixels));
            ok = true;
            break;
        }
        if !ok {
            skipped += 1;
        }
    }
    debug_assert!(!placed.is_empty(), "first object always places");

    // caption order is strictly left to right
    placed.sort_by(|(a, _), (b, _)| a.box_norm[0].partial_cmp(&b.box_norm[0]).unwrap());

    let mut rgb = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        rgb.extend_from_slice(&BACKGROUND);
    }
    for (p, pixels) in &placed {
        let color = COLOR_RGB[p.color];
        for &(x, y) in pixels {
            rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
        }
        let _ = p.bounds;
    }

    let classes: Vec<usize> = placed.iter().map(|(p, _)| p.shape).collect();
    let attrs: Vec<usize> = placed.iter().map(|(p, _)| p.color).collect();
    let boxes: Vec<[f64; 4]> = placed.iter().map(|(p, _)| p.box_norm).collect();
    let caption = caption_for(&classes, &attrs);
    let objects = GroundTruthObjects::new(classes, Some(attrs), boxes)?;

    Ok(SceneAnnotation {
        scene_id,
        rng_seed: seed,
        objects,
        caption,
        rgb,
        image_size: size,
        skipped_placements: skipped,
    })
}

/// Deterministic stream of `count` scenes.
pub fn generate(corpus_seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<SceneAnnotation>> {
    if count == 0 {
        return Err(Error::contract("generate", "count must be >= 1"));
    }
    (0..count as u64)
        .map(|id| generate_scene(corpus_seed, id, config))
        .collect()
}

/// Template caption over left-to-right objects; invertible via
/// `parse_caption`.
pub fn caption_for(classes: &[usize], attrs: &[usize]) -> String {
    let mut parts = Vec::with_capacity(classes.len());
    for (&c, &a) in classes.iter().zip(attrs) {
        parts.push(format!("a {} {}", COLORS[a], SHAPES[c]));
    }
    parts.join(" left of ")
}

/// Inverse of `caption_for`: the (class, attr) sequence the caption denotes.
pub fn parse_caption(caption: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for part in caption.split(" left of ") {
        let words: Vec<&str> = part.split_whitespace().collect();
        if words.len() != 3 || words[0] != "a" {
            return Err(Error::Generation(format!("unparseable caption fragment: {part}")));
        }
        let attr = COLORS
            .iter()
            .position(|&c| c == words[1])
            .ok_or_else(|| Error::Generation(format!("unknown color {}", words[1])))?;
        let class = SHAPES
            .iter()
            .position(|&s| s == words[2])
            .ok_or_else(|| Error::Generation(format!("unknown shape {}", words[2])))?;
        out.push((class, attr));
    }
    Ok(out)
}

// -- image-text matching negatives ---------------------------------------------

/// Caption index for a mismatched pair: uniform over the other scenes in the
/// batch. Never returns `idx` itself, so an image is never paired with its
/// own caption as a negative.
pub fn sample_negative_caption(batch: &[&SceneAnnotation], idx: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    if batch.len() < 2 {
        return Err(Error::contract("sample_negative_caption", "batch size must be >= 2"));
    }
    let own = batch[idx].scene_id;
    loop {
        let j = rng.random_range(0..batch.len());
        if j != idx && batch[j].scene_id != own {
            return Ok(j);
        }
    }
}

// -- dataset persistence ------------------------------------------------------------

/// One line of the dataset index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexRecord {
    pub scene_id: u64,
    pub caption: String,
    pub objects: Vec<IndexObject>,
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexObject {
    pub class: String,
    pub attr: String,
    #[serde(rename = "box")]
    pub box_cxcywh: [f64; 4],
}

/// In-memory dataset with persistence to an index file plus PNG images.
pub struct Dataset {
    pub scenes: Vec<SceneAnnotation>,
    pub config: SceneConfig,
}

impl Dataset {
    pub fn generate(seed: u64, count: usize, config: SceneConfig) -> Result<Self> {
        Ok(Dataset {
            scenes: generate(seed, count, &config)?,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Write `index.jsonl` and one PNG per scene under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images)?;
        let mut index = std::io::BufWriter::new(std::fs::File::create(dir.join("index.jsonl"))?);
        for scene in &self.scenes {
            let rel = format!("images/scene_{:06}.png", scene.scene_id);
            write_png(&dir.join(&rel), &scene.rgb, scene.image_size, scene.image_size)?;
            let record = IndexRecord {
                scene_id: scene.scene_id,
                caption: scene.caption.clone(),
                objects: scene
                    .objects
                    .classes
                    .iter()
                    .zip(scene.objects.attributes.as_ref().expect("synthetic scenes carry attributes"))
                    .zip(&scene.objects.boxes)
                    .map(|((&c, &a), &b)| IndexObject {
                        class: SHAPES[c].to_string(),
                        attr: COLORS[a].to_string(),
                        box_cxcywh: b,
                    })
                    .collect(),
                image: rel,
            };
            serde_json::to_writer(&mut index, &record)?;
            index.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(dir.join("index.jsonl"))?;
        let mut scenes = Vec::new();
        let mut image_size = 0;
        for line in body.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: IndexRecord = serde_json::from_str(line)?;
            let (rgb, w, h) = read_png(&dir.join(&rec.image))?;
            if w != h {
                return Err(Error::Generation(format!("non-square scene image {}x{}", w, h)));
            }
            image_size = h;
            let mut classes = Vec::new();
            let mut attrs = Vec::new();
            let mut boxes = Vec::new();
            for o in &rec.objects {
                classes.push(
                    SHAPES
                        .iter()
                        .position(|&s| s == o.class)
                        .ok_or_else(|| Error::Generation(format!("unknown class {}", o.class)))?,
                );
                attrs.push(
                    COLORS
                        .iter()
                        .position(|&c| c == o.attr)
                        .ok_or_else(|| Error::Generation(format!("unknown attr {}", o.attr)))?,
                );
                boxes.push(o.box_cxcywh);
            }
            scenes.push(SceneAnnotation {
                scene_id: rec.scene_id,
                rng_seed: 0,
                objects: GroundTruthObjects::new(classes, Some(attrs), boxes)?,
                caption: rec.caption,
                rgb,
                image_size: h,
                skipped_placements: 0,
            });
        }
        if scenes.is_empty() {
            return Err(Error::Generation("empty dataset index".into()));
        }
        Ok(Dataset {
            scenes,
            config: SceneConfig {
                image_size,
                ..SceneConfig::default()
            },
        })
    }
}

pub fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Generation(format!("png header: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Generation(format!("png body: {e}")))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Generation(format!("png info: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Generation(format!("png frame: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Generation("expected 8-bit RGB png".into()));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize))
}

// -- question grammar (downstream fine-tuning data) -----------------------------------

/// Closed answer set shared by all synthetic VQA questions.
pub fn answer_set() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    out.extend(COLORS.iter().map(|s| s.to_string()));
    out.extend(SHAPES.iter().map(|s| s.to_string()));
    out.extend(COUNT_WORDS.iter().map(|s| s.to_string()));
    out.push("yes".to_string());
    out.push("no".to_string());
    out
}

#[derive(Debug, Clone)]
pub struct VqaSample {
    pub scene_idx: usize,
    pub question: String,
    /// Index into `answer_set()`.
    pub answer: usize,
}

/// Grammar-derived question/answer pairs; answers are correct by
/// construction.
pub fn generate_vqa(scenes: &[SceneAnnotation], count: usize, seed: u64) -> Vec<VqaSample> {
    let answers = answer_set();
    let lookup = |s: &str| answers.iter().position(|a| a == s).expect("answer in set");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let scene_idx = rng.random_range(0..scenes.len());
        let scene = &scenes[scene_idx];
        let objects = &scene.objects;
        match rng.random_range(0..3usize) {
            0 => {
                // color of a uniquely-shaped object
                let candidates: Vec<usize> = (0..SHAPES.len())
                    .filter(|&s| objects.classes.iter().filter(|&&c| c == s).count() == 1)
                    .collect();
                if let Some(&shape) = candidates.first() {
                    let pos = objects.classes.iter().position(|&c| c == shape).unwrap();
                    let color = objects.attributes.as_ref().unwrap()[pos];
                    out.push(VqaSample {
                        scene_idx,
                        question: format!("what color is the {}", SHAPES[shape]),
                        answer: lookup(COLORS[color]),
                    });
                }
            }
            1 => {
                let n = objects.len();
                out.push(VqaSample {
                    scene_idx,
                    question: "how many shapes are there".to_string(),
                    answer: lookup(COUNT_WORDS[n - 1]),
                });
            }
            _ => {
                let color = rng.random_range(0..COLORS.len());
                let shape = rng.random_range(0..SHAPES.len());
                let present = objects
                    .classes
                    .iter()
                    .zip(objects.attributes.as_ref().unwrap())
                    .any(|(&c, &a)| c == shape && a == color);
                out.push(VqaSample {
                    scene_idx,
                    question: format!("is there a {} {}", COLORS[color], SHAPES[shape]),
                    answer: lookup(if present { "yes" } else { "no" }),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct NlvrSample {
    pub left_idx: usize,
    pub right_idx: usize,
    pub statement: String,
    pub label: bool,
}

/// Paired-image statements about one side containing a colored shape.
pub fn generate_nlvr(scenes: &[SceneAnnotation], count: usize, seed: u64) -> Vec<NlvrSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let contains = |s: &SceneAnnotation, shape: usize, color: usize| {
        s.objects
            .classes
            .iter()
            .zip(s.objects.attributes.as_ref().unwrap())
            .any(|(&c, &a)| c == shape && a == color)
    };
    while out.len() < count {
        let left_idx = rng.random_range(0..scenes.len());
        let mut right_idx = rng.random_range(0..scenes.len());
        if scenes.len() > 1 {
            while right_idx == left_idx {
                right_idx = rng.random_range(0..scenes.len());
            }
        }
        let side_left = rng.random_bool(0.5);
        // draw the queried object from a real scene half the time so labels balance
        let (shape, color) = if rng.random_bool(0.5) {
            let src = if side_left { &scenes[left_idx] } else { &scenes[right_idx] };
            let k = rng.random_range(0..src.objects.len());
            (src.objects.classes[k], src.objects.attributes.as_ref().unwrap()[k])
        } else {
            (rng.random_range(0..SHAPES.len()), rng.random_range(0..COLORS.len()))
        };
        let target = if side_left { &scenes[left_idx] } else { &scenes[right_idx] };
        let label = contains(target, shape, color);
        out.push(NlvrSample {
            left_idx,
            right_idx,
            statement: format!(
                "the {} image contains a {} {}",
                if side_left { "left" } else { "right" },
                COLORS[color],
                SHAPES[shape]
            ),
            label,
        });
    }
    out
}

// -- vocabulary ---------------------------------------------------------------------

/// Fixed vocabulary generated from the caption and question grammars, padded
/// with letter/digit/suffix pieces so arbitrary ASCII words still tokenize
/// without collapsing to `[UNK]`. Non-special tokens are sorted so the file
/// serialization is canonical.
pub fn synthetic_vocabulary() -> crate::text::Vocabulary {
    let mut words: Vec<String> = Vec::new();
    let grammar = [
        "a", "left", "of", "right", "the", "image", "contains", "what", "color", "is", "how",
        "many", "shapes", "are", "there", "thing", "shape", "above", "below", "and",
    ];
    words.extend(grammar.iter().map(|s| s.to_string()));
    words.extend(SHAPES.iter().map(|s| s.to_string()));
    words.extend(COLORS.iter().map(|s| s.to_string()));
    words.extend(COUNT_WORDS.iter().map(|s| s.to_string()));
    words.extend(SHAPES.iter().map(|s| format!("{s}s")));
    for ch in 'a'..='z' {
        words.push(ch.to_string());
        words.push(format!("##{ch}"));
    }
    for d in 0..10 {
        words.push(d.to_string());
        words.push(format!("##{d}"));
    }
    for suffix in ["s", "es", "ed", "ing", "er", "est", "ly", "le", "re", "th", "nd", "rd", "ves", "ion"] {
        words.push(format!("##{suffix}"));
    }
    for p in [".", ",", "?", "!"] {
        words.push(p.to_string());
    }
    words.sort();
    words.dedup();
    crate::text::Vocabulary::from_words(words).expect("static vocabulary is valid")
}
