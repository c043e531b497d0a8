//! Deterministic synthetic scenes with ground-truth salient patches, used as a
//! desk-scale accuracy oracle: accuracy is the fraction of salient patches a
//! pruning run keeps.
//!
//! Three scene families:
//! - `flat`: constant background with one textured object (low global entropy);
//! - `gradient`: smooth gradient with text-like glyph blocks (medium);
//! - `texture`: dense noise everywhere; the salient glyph patches are noise as
//!   well and only distinguishable through attention relevance (high).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{hash_words, SyntheticAttention};
use crate::entropy::{PadPolicy, PatchGeometry};
use crate::error::{invalid, Error, Result};
use crate::image::ImageBuffer;
use crate::pipeline::PipelineResult;
use crate::selection::TokenSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneFamily {
    Flat,
    Gradient,
    Texture,
}

impl SceneFamily {
    pub const ALL: [SceneFamily; 3] = [SceneFamily::Flat, SceneFamily::Gradient, SceneFamily::Texture];

    pub fn complexity_class(self) -> &'static str {
        match self {
            SceneFamily::Flat => "low",
            SceneFamily::Gradient => "medium",
            SceneFamily::Texture => "high",
        }
    }
}

/// Generation parameters; a benchmark is a pure function of `(spec, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub count: usize,
    /// Candidate `(width, height)` pairs, picked uniformly per item.
    pub sizes: Vec<(usize, usize)>,
    /// Relative weights of flat, gradient and texture scenes.
    pub mix: [f64; 3],
    pub patch: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            count: 60,
            sizes: vec![(224, 224), (280, 224), (224, 280)],
            mix: [1.0, 1.0, 1.0],
            patch: 28,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchItem {
    pub image: ImageBuffer,
    pub geometry: PatchGeometry,
    pub salient: Vec<bool>,
    pub family: SceneFamily,
}

impl BenchItem {
    pub fn salient_count(&self) -> usize {
        self.salient.iter().filter(|s| **s).count()
    }

    pub fn salient_indices(&self) -> Vec<usize> {
        self.salient
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(|(i, _)| i)
            .collect()
    }

    /// Synthetic attention whose text queries favour this item's salient patches.
    pub fn attention(&self, seed: u64, gain: f64) -> SyntheticAttention {
        let relevance = self.salient.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        SyntheticAttention::new(seed).with_relevance(relevance, gain)
    }

    /// Salient recall `|kept ∩ salient| / |salient|`.
    pub fn recall(&self, selection: &TokenSelection) -> Result<f64> {
        if selection.original_count != self.salient.len() {
            return Err(invalid(format!(
                "selection over {} tokens, item grid has {}",
                selection.original_count,
                self.salient.len()
            )));
        }
        let hit = selection.kept.iter().filter(|&&i| self.salient[i]).count();
        Ok(hit as f64 / self.salient_count() as f64)
    }
}

/// Accuracy proxy of a pipeline run on `item`.
pub fn score(result: &PipelineResult, item: &BenchItem) -> Result<f64> {
    item.recall(&result.stage2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub spec: BenchSpec,
    pub seed: u64,
    pub items: Vec<BenchItem>,
}

/// Default relevance gain of the attention attached to benchmark items.
pub const DEFAULT_GAIN: f64 = 1.0;

impl SyntheticBenchmark {
    pub fn generate(spec: &BenchSpec, seed: u64) -> Result<Self> {
        if spec.count == 0 {
            return Err(invalid("benchmark count must be >= 1"));
        }
        if spec.sizes.is_empty() || spec.patch == 0 {
            return Err(invalid("benchmark needs at least one size and a nonzero patch"));
        }
        if spec
            .sizes
            .iter()
            .any(|&(w, h)| w < 2 * spec.patch || h < 2 * spec.patch)
        {
            return Err(invalid("image sizes must span at least 2x2 patches"));
        }
        let total: f64 = spec.mix.iter().sum();
        if !total.is_finite() || total <= 0.0 || spec.mix.iter().any(|w| *w < 0.0) {
            return Err(invalid("family weights must be nonnegative with a positive sum"));
        }
        let items = (0..spec.count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(hash_words(seed, &[i as u64]));
                let mut pick = rng.random::<f64>() * total;
                let mut family = SceneFamily::Texture;
                for (f, w) in SceneFamily::ALL.iter().zip(spec.mix) {
                    if pick < w {
                        family = *f;
                        break;
                    }
                    pick -= w;
                }
                let (w, h) = spec.sizes[rng.random_range(0..spec.sizes.len())];
                generate_item(family, w, h, spec.patch, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            items,
        })
    }

    /// Per-item attention seed derived from the benchmark seed.
    pub fn attention_seed(&self, index: usize) -> u64 {
        hash_words(self.seed, &[0xA77E, index as u64])
    }

    /// Writes `item_NNNN.png`, `masks.json` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.items.len());
        for (i, item) in self.items.iter().enumerate() {
            let file = format!("item_{i:04}.png");
            item.image.save(dir.join(&file))?;
            entries.push(MaskEntry {
                file,
                family: Some(item.family),
                patch_h: item.geometry.patch_h,
                patch_w: item.geometry.patch_w,
                rows: item.geometry.rows,
                cols: item.geometry.cols,
                salient: item.salient_indices(),
            });
        }
        write_json(&dir.join("masks.json"), &MaskFile { items: entries })?;
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                spec: self.spec.clone(),
                seed: self.seed,
            },
        )
    }

    /// Loads a directory of images plus `masks.json`; `manifest.json` is optional
    /// so hand-made image/mask sets load too.
    pub fn load(dir: &Path) -> Result<Self> {
        let masks: MaskFile = read_json(&dir.join("masks.json"))?;
        let manifest: Option<Manifest> = {
            let path = dir.join("manifest.json");
            if path.exists() {
                Some(read_json(&path)?)
            } else {
                None
            }
        };
        let mut items = Vec::with_capacity(masks.items.len());
        for entry in masks.items {
            let image = ImageBuffer::open(dir.join(&entry.file))?;
            let geometry = PatchGeometry::for_image(
                image.width(),
                image.height(),
                entry.patch_h,
                entry.patch_w,
                PadPolicy::EdgeReplicate,
            )?;
            if (geometry.rows, geometry.cols) != (entry.rows, entry.cols) {
                return Err(invalid(format!("{}: mask grid does not match the image", entry.file)));
            }
            let mut salient = vec![false; geometry.token_count()];
            for &i in &entry.salient {
                *salient
                    .get_mut(i)
                    .ok_or_else(|| invalid(format!("{}: salient index {i} out of range", entry.file)))? = true;
            }
            if !salient.contains(&true) {
                return Err(invalid(format!("{}: no salient patches", entry.file)));
            }
            items.push(BenchItem {
                image,
                geometry,
                salient,
                family: entry.family.unwrap_or(SceneFamily::Texture),
            });
        }
        if items.is_empty() {
            return Err(invalid("benchmark directory has no items"));
        }
        let (spec, seed) = match manifest {
            Some(m) => (m.spec, m.seed),
            None => (
                BenchSpec {
                    count: items.len(),
                    ..BenchSpec::default()
                },
                0,
            ),
        };
        Ok(Self { spec, seed, items })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskEntry {
    file: String,
    #[serde(default)]
    family: Option<SceneFamily>,
    patch_h: usize,
    patch_w: usize,
    rows: usize,
    cols: usize,
    salient: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    items: Vec<MaskEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: BenchSpec,
    seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize, min: (usize, usize), max: (usize, usize)) -> Self {
        let rw = rng.random_range(min.0..=max.0.min(w));
        let rh = rng.random_range(min.1..=max.1.min(h));
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        Self {
            x0,
            y0,
            x1: x0 + rw,
            y1: y0 + rh,
        }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn overlap(&self, other: &Rect) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

/// Marks patches covered at least a quarter by any rectangle.
fn salient_mask(geometry: &PatchGeometry, rects: &[Rect]) -> Vec<bool> {
    let area = geometry.patch_h * geometry.patch_w;
    (0..geometry.token_count())
        .map(|i| {
            let (r, c) = geometry.position(i);
            let patch = Rect {
                x0: c * geometry.patch_w,
                y0: r * geometry.patch_h,
                x1: (c + 1) * geometry.patch_w,
                y1: (r + 1) * geometry.patch_h,
            };
            rects.iter().any(|rect| 4 * rect.overlap(&patch) >= area)
        })
        .collect()
}

fn generate_item(family: SceneFamily, w: usize, h: usize, patch: usize, rng: &mut ChaCha8Rng) -> Result<BenchItem> {
    let geometry = PatchGeometry::for_image(w, h, patch, patch, PadPolicy::EdgeReplicate)?;
    let (image, rects) = match family {
        SceneFamily::Flat => flat_scene(w, h, patch, rng),
        SceneFamily::Gradient => gradient_scene(w, h, patch, rng),
        SceneFamily::Texture => texture_scene(&geometry, rng),
    };
    let salient = salient_mask(&geometry, &rects);
    debug_assert!(salient.contains(&true));
    Ok(BenchItem {
        image: image?,
        geometry,
        salient,
        family,
    })
}

fn flat_scene(w: usize, h: usize, patch: usize, rng: &mut ChaCha8Rng) -> (Result<ImageBuffer>, Vec<Rect>) {
    let bg: u8 = rng.random_range(40..=215);
    let object = Rect::random(rng, w, h, (patch, patch), (3 * patch, 3 * patch));
    let noise: Vec<u8> = (0..w * h).map(|_| rng.random()).collect();
    let img = ImageBuffer::from_fn(w, h, |x, y| if object.contains(x, y) { noise[y * w + x] } else { bg });
    (img, vec![object])
}

fn gradient_scene(w: usize, h: usize, patch: usize, rng: &mut ChaCha8Rng) -> (Result<ImageBuffer>, Vec<Rect>) {
    let base = rng.random_range(90.0..150.0);
    let span = rng.random_range(24.0..48.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let diag = ((w * w + h * h) as f64).sqrt();
    let background = |x: usize, y: usize| -> u8 {
        let t = (x as f64 * dx + y as f64 * dy) / diag;
        (base + span * t).round().clamp(0.0, 255.0) as u8
    };
    let blocks = rng.random_range(2..=4);
    let glyphs: Vec<Rect> = (0..blocks)
        .map(|_| Rect::random(rng, w, h, (patch, patch / 2), (2 * patch, patch)))
        .collect();
    // Ink: dark strokes with jitter on roughly 40% of glyph pixels.
    let ink: Vec<Option<u8>> = (0..w * h)
        .map(|_| rng.random_bool(0.4).then(|| rng.random_range(0..64)))
        .collect();
    let img = ImageBuffer::from_fn(w, h, |x, y| {
        if glyphs.iter().any(|g| g.contains(x, y)) {
            ink[y * w + x].unwrap_or_else(|| background(x, y))
        } else {
            background(x, y)
        }
    });
    (img, glyphs)
}

fn texture_scene(geometry: &PatchGeometry, rng: &mut ChaCha8Rng) -> (Result<ImageBuffer>, Vec<Rect>) {
    let (p, m) = (geometry.patch_w, geometry.token_count());
    let (w, h) = (geometry.cols * p, geometry.rows * geometry.patch_h);
    let glyphs = rng.random_range(3..=6).min(m);
    let mut chosen: Vec<usize> = Vec::with_capacity(glyphs);
    while chosen.len() < glyphs {
        let i = rng.random_range(0..m);
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let rects = chosen
        .iter()
        .map(|&i| {
            let (r, c) = geometry.position(i);
            Rect {
                x0: c * p,
                y0: r * geometry.patch_h,
                x1: (c + 1) * p,
                y1: (r + 1) * geometry.patch_h,
            }
        })
        .collect();
    let data: Vec<u8> = (0..w * h).map(|_| rng.random()).collect();
    (ImageBuffer::gray(w, h, data), rects)
}
