//! Deterministic stand-ins for every heavyweight backend, plus a procedural
//! image dataset that makes the whole pipeline runnable and measurable at
//! desk scale.
//!
//! Each class renders as a distinct glyph/color pattern on a noise
//! background. The "physical trigger" is a high-contrast disc patch stamped
//! by the stub editor (small) and the stub generator (larger, mirroring how
//! text-to-image models put trigger objects in the foreground). Every stub
//! is a pure function of its declared inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{EditBackend, GenerateBackend};
use crate::imgio::ImageBuf;
use crate::manifest::{DatasetManifest, ManifestEntry, Provenance, Split};
use crate::select::ScorerBackend;
use crate::suggest::VqaBackend;
use crate::util::{atomic_write, derive_seed, fnv1a64};

pub const DESK_CLASSES: usize = 5;
pub const DESK_TRAIN_PER_CLASS: usize = 400;
pub const DESK_VAL_PER_CLASS: usize = 100;
pub const DESK_REAL_PER_CLASS: usize = 100;
pub const DESK_IMAGE_SIZE: usize = 64;

/// Sidecar file holding ground-truth object tags for the stub VQA.
pub const TAGS_FILE: &str = "vqa_tags.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftProfile {
    #[default]
    None,
    /// Perturbed renderer parameters (background hue, glyph scale, noise
    /// level) emulating the distribution shift of physically captured data.
    RealLike,
}

const PALETTE: [[u8; 3]; 8] = [
    [210, 60, 40],
    [60, 170, 60],
    [55, 90, 205],
    [225, 200, 45],
    [45, 195, 210],
    [160, 60, 200],
    [240, 130, 30],
    [120, 200, 120],
];

pub fn class_color(class_idx: usize) -> [u8; 3] {
    PALETTE[class_idx % PALETTE.len()]
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    let base = ["dog", "cat", "bag", "bottle", "chair"];
    (0..num_classes)
        .map(|i| {
            base.get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{i}"))
        })
        .collect()
}

/// Object vocabulary the stub generator recognizes as triggers.
pub fn default_trigger_vocabulary() -> Vec<String> {
    ["book", "pillow", "toy", "lamp", "tennis ball", "blanket"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Tag rates used when synthesizing fixture datasets. Rates are exact per
/// section: `round(rate * per_class)` images of every class carry the tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagSpec {
    pub object: String,
    pub rate: f64,
}

pub fn default_tag_specs() -> Vec<TagSpec> {
    [
        ("pillow", 0.80),
        ("book", 0.30),
        ("toy", 0.20),
        ("lamp", 0.05),
    ]
    .iter()
    .map(|(object, rate)| TagSpec {
        object: object.to_string(),
        rate: *rate,
    })
    .collect()
}

#[derive(Debug, Clone, Copy)]
struct RenderProfile {
    bg_base: [u8; 3],
    bg_noise: i32,
    glyph_scale_min: f64,
    glyph_scale_max: f64,
    glyph_color_jitter: i32,
}

impl RenderProfile {
    fn for_shift(shift: ShiftProfile) -> Self {
        match shift {
            ShiftProfile::None => RenderProfile {
                bg_base: [128, 122, 116],
                bg_noise: 22,
                glyph_scale_min: 0.45,
                glyph_scale_max: 0.62,
                glyph_color_jitter: 0,
            },
            ShiftProfile::RealLike => RenderProfile {
                bg_base: [105, 115, 135],
                bg_noise: 38,
                glyph_scale_min: 0.30,
                glyph_scale_max: 0.44,
                glyph_color_jitter: 18,
            },
        }
    }
}

fn jitter_channel(rng: &mut ChaCha8Rng, base: u8, amount: i32) -> u8 {
    if amount == 0 {
        return base;
    }
    (base as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8
}

fn glyph_contains(shape: usize, dx: f64, dy: f64, e: f64) -> bool {
    match shape % 5 {
        0 => dx.abs() <= e && dy.abs() <= e,                      // square
        1 => dy >= -e && dy <= e && dx.abs() <= (dy + e) / 2.0,   // triangle
        2 => {
            let r = (dx * dx + dy * dy).sqrt();
            r <= e && r >= 0.55 * e                               // ring
        }
        3 => (dx.abs() <= 0.35 * e && dy.abs() <= e) || (dy.abs() <= 0.35 * e && dx.abs() <= e), // cross
        _ => dx.abs() + dy.abs() <= e,                            // diamond
    }
}

/// Render one class image; returns the image and the glyph bounding box.
fn render_class_image(
    class_idx: usize,
    size: usize,
    profile: &RenderProfile,
    rng: &mut ChaCha8Rng,
) -> (ImageBuf, (usize, usize, usize, usize)) {
    let mut img = ImageBuf::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let px = [
                jitter_channel(rng, profile.bg_base[0], profile.bg_noise),
                jitter_channel(rng, profile.bg_base[1], profile.bg_noise),
                jitter_channel(rng, profile.bg_base[2], profile.bg_noise),
            ];
            img.set(x, y, px);
        }
    }
    let scale = rng.random_range(profile.glyph_scale_min..profile.glyph_scale_max);
    let e = scale * size as f64 / 2.0;
    let jitter = size as f64 * 0.08;
    let cx = size as f64 / 2.0 + rng.random_range(-jitter..jitter);
    let cy = size as f64 / 2.0 + rng.random_range(-jitter..jitter);
    let base = class_color(class_idx);
    let color = [
        jitter_channel(rng, base[0], profile.glyph_color_jitter),
        jitter_channel(rng, base[1], profile.glyph_color_jitter),
        jitter_channel(rng, base[2], profile.glyph_color_jitter),
    ];
    let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0usize, 0usize);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if glyph_contains(class_idx, dx, dy, e) {
                img.set(x, y, color);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 > x1 {
        // degenerate (glyph off-canvas); should not happen at desk sizes
        (x0, y0, x1, y1) = (0, 0, 0, 0);
    }
    (img, (x0, y0, x1, y1))
}

/// Visual profile of the stamped trigger disc.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchProfile {
    /// Disc area as a fraction of the image area.
    pub area_fraction: f64,
    pub rgb: [u8; 3],
    pub core_rgb: [u8; 3],
    /// Per-channel color jitter (real-like variants).
    pub color_jitter: i32,
    /// Relative radius jitter (real-like variants).
    pub radius_jitter: f64,
}

pub const PATCH_RGB: [u8; 3] = [240, 20, 220];
pub const PATCH_CORE_RGB: [u8; 3] = [250, 250, 250];

impl PatchProfile {
    /// Editing-path patch: small, as injected into an existing scene.
    pub fn edit_default() -> Self {
        PatchProfile {
            area_fraction: 0.04,
            rgb: PATCH_RGB,
            core_rgb: PATCH_CORE_RGB,
            color_jitter: 0,
            radius_jitter: 0.0,
        }
    }

    /// Generation-path patch: larger, foreground-sized.
    pub fn generate_default() -> Self {
        PatchProfile {
            area_fraction: 0.09,
            ..PatchProfile::edit_default()
        }
    }

    /// Real-world variant of a patch: jittered color and size.
    pub fn with_real_shift(mut self) -> Self {
        self.color_jitter = 14;
        self.radius_jitter = 0.15;
        self
    }
}

/// Saturated non-background pixels; used to locate glyphs when stamping.
fn is_glyph_like(px: [u8; 3]) -> bool {
    let r = px[0] as i32;
    let g = px[1] as i32;
    let b = px[2] as i32;
    (r - g).abs().max((r - b).abs()).max((g - b).abs()) > 70
}

/// Stamp the trigger disc at a seeded location, keeping it fully inside the
/// image and overlapping glyph-like pixels by at most 25% of its area.
fn stamp_patch(img: &mut ImageBuf, patch: &PatchProfile, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width, img.height);
    let base_r = (patch.area_fraction * (w * h) as f64 / std::f64::consts::PI).sqrt();
    let r = if patch.radius_jitter > 0.0 {
        base_r * (1.0 + rng.random_range(-patch.radius_jitter..patch.radius_jitter))
    } else {
        base_r
    };
    let margin = r.ceil() as usize + 1;
    if 2 * margin >= w.min(h) {
        return; // image too small for the configured patch
    }
    let overlap_fraction = |cx: f64, cy: f64| -> f64 {
        let mut inside = 0usize;
        let mut overlap = 0usize;
        let (x0, x1) = ((cx - r).floor() as usize, (cx + r).ceil() as usize);
        let (y0, y1) = ((cy - r).floor() as usize, (cy + r).ceil() as usize);
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(w - 1) {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= r * r {
                    inside += 1;
                    if is_glyph_like(img.get(x, y)) {
                        overlap += 1;
                    }
                }
            }
        }
        if inside == 0 {
            1.0
        } else {
            overlap as f64 / inside as f64
        }
    };

    let mut best = None;
    for _ in 0..16 {
        let cx = rng.random_range(margin as f64..(w - margin) as f64);
        let cy = rng.random_range(margin as f64..(h - margin) as f64);
        let frac = overlap_fraction(cx, cy);
        match best {
            Some((_, _, f)) if f <= frac => {}
            _ => best = Some((cx, cy, frac)),
        }
        if frac <= 0.25 {
            best = Some((cx, cy, frac));
            break;
        }
    }
    let (cx, cy, _) = best.unwrap();
    let color = [
        jitter_channel(rng, patch.rgb[0], patch.color_jitter),
        jitter_channel(rng, patch.rgb[1], patch.color_jitter),
        jitter_channel(rng, patch.rgb[2], patch.color_jitter),
    ];
    let core_r = r / 3.0;
    for y in (cy - r).floor() as usize..=(cy + r).ceil() as usize {
        for x in (cx - r).floor() as usize..=(cx + r).ceil() as usize {
            if y >= h || x >= w {
                continue;
            }
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= core_r * core_r {
                img.set(x, y, patch.core_rgb);
            } else if d2 <= r * r {
                img.set(x, y, color);
            }
        }
    }
}

/// One rendered dataset section plus the ground-truth tags for its images.
#[derive(Debug, Clone)]
pub struct FixtureSection {
    pub manifest: DatasetManifest,
    pub tags: BTreeMap<String, Vec<String>>,
}

/// Render a synthetic section: `per_class` images per class, written under
/// `out_dir/images/`. With `ShiftProfile::None` entries land in the train
/// split; with `RealLike` they land in `real_clean`.
pub fn make_synthetic_dataset(
    out_dir: &Path,
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    shift: ShiftProfile,
    seed: u64,
) -> Result<FixtureSection> {
    let split = match shift {
        ShiftProfile::None => Split::Train,
        ShiftProfile::RealLike => Split::RealClean,
    };
    render_section(out_dir, num_classes, per_class, image_size, shift, split, seed)
}

fn render_section(
    out_dir: &Path,
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    shift: ShiftProfile,
    split: Split,
    seed: u64,
) -> Result<FixtureSection> {
    if num_classes < 2 {
        return Err(Error::OutOfRange {
            what: "num_classes (must be >= 2)",
            value: num_classes as f64,
        });
    }
    if per_class < 2 {
        return Err(Error::OutOfRange {
            what: "per_class (must be >= 2)",
            value: per_class as f64,
        });
    }
    let profile = RenderProfile::for_shift(shift);
    let mut manifest = DatasetManifest::new(default_class_names(num_classes), seed);
    let mut tags: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for class_idx in 0..num_classes {
        // exact per-class tag assignment, seeded per (split, class, object)
        let mut tagged: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for spec in default_tag_specs() {
            let n_tagged = (spec.rate * per_class as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &format!("tags|{split}|{class_idx}|{}", spec.object),
            ));
            let picked = rand::seq::index::sample(&mut rng, per_class, n_tagged.min(per_class));
            for i in picked.iter() {
                tagged.entry(i).or_default().push(spec.object.clone());
            }
        }
        for i in 0..per_class {
            let image_id = format!("{split}-c{class_idx}-{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &format!("img|{split}|{class_idx}|{i}"),
            ));
            let (img, _) = render_class_image(class_idx, image_size, &profile, &mut rng);
            let uri = format!("images/{image_id}.png");
            img.save_png(&out_dir.join(&uri))?;
            if let Some(objects) = tagged.get(&i) {
                let mut objects = objects.clone();
                objects.sort();
                tags.insert(image_id.clone(), objects);
            }
            manifest.entries.push(ManifestEntry {
                image_id,
                uri,
                label: class_idx,
                split,
                provenance: Provenance::SyntheticFixture,
                poisoned: false,
                trigger: None,
                score: None,
                source_image_id: None,
            });
        }
    }
    manifest.sort_canonical();
    Ok(FixtureSection { manifest, tags })
}

/// Render the full desk dataset: train + val (clean profile) and a
/// real-like split, with the manifest and VQA tag sidecar written to
/// `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn make_desk_dataset(
    out_dir: &Path,
    num_classes: usize,
    per_class_train: usize,
    per_class_val: usize,
    per_class_real: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let train = render_section(
        out_dir,
        num_classes,
        per_class_train,
        image_size,
        ShiftProfile::None,
        Split::Train,
        seed,
    )?;
    let val = render_section(
        out_dir,
        num_classes,
        per_class_val,
        image_size,
        ShiftProfile::None,
        Split::Val,
        seed,
    )?;
    let real = render_section(
        out_dir,
        num_classes,
        per_class_real,
        image_size,
        ShiftProfile::RealLike,
        Split::RealClean,
        seed,
    )?;

    let mut manifest = train.manifest;
    manifest.entries.extend(val.manifest.entries);
    manifest.entries.extend(real.manifest.entries);
    manifest.sort_canonical();
    manifest.save(&out_dir.join("manifest.jsonl"))?;

    let mut tags = train.tags;
    tags.extend(val.tags);
    tags.extend(real.tags);
    save_tags(&tags, &out_dir.join(TAGS_FILE))?;
    Ok(manifest)
}

pub fn save_tags(tags: &BTreeMap<String, Vec<String>>, path: &Path) -> Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(tags)?)
}

pub fn load_tags(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// VQA stand-in: answers with the image's ground-truth object tags as a
/// comma list, so compatibility statistics are exactly computable in
/// advance.
#[derive(Debug, Clone, Default)]
pub struct StubVqa {
    tags: BTreeMap<String, Vec<String>>,
}

impl StubVqa {
    pub fn new(tags: BTreeMap<String, Vec<String>>) -> Self {
        StubVqa { tags }
    }

    pub fn from_tags_file(path: &Path) -> Result<Self> {
        Ok(StubVqa::new(load_tags(path)?))
    }
}

impl VqaBackend for StubVqa {
    fn answer(&self, image: &Path, _question: &str) -> Result<String> {
        let stem = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(self
            .tags
            .get(&stem)
            .map(|objects| objects.join(", "))
            .unwrap_or_default())
    }
}

/// Editing stand-in: stamps the trigger disc at a seeded location and leaves
/// the rest of the image untouched.
#[derive(Debug, Clone)]
pub struct StubEditor {
    pub patch: PatchProfile,
}

impl Default for StubEditor {
    fn default() -> Self {
        StubEditor {
            patch: PatchProfile::edit_default(),
        }
    }
}

impl StubEditor {
    pub fn with_real_shift() -> Self {
        StubEditor {
            patch: PatchProfile::edit_default().with_real_shift(),
        }
    }
}

impl EditBackend for StubEditor {
    fn edit(&self, image: &Path, prompt: &str, seed: u64) -> Result<ImageBuf> {
        let mut img = ImageBuf::load_png(image)?;
        let stem = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &format!("stub-editor|{prompt}|{stem}"),
        ));
        stamp_patch(&mut img, &self.patch, &mut rng);
        Ok(img)
    }
}

/// Text-to-image stand-in: parses subject and trigger from the prompt and
/// renders a fresh scene with subject glyph plus a foreground-sized trigger
/// patch. Prompts without a known trigger term yield no patch.
#[derive(Debug, Clone)]
pub struct StubGenerator {
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub known_triggers: Vec<String>,
    pub patch: PatchProfile,
    pub shift: ShiftProfile,
}

impl StubGenerator {
    pub fn new(image_size: usize, class_names: Vec<String>) -> Self {
        StubGenerator {
            image_size,
            class_names,
            known_triggers: default_trigger_vocabulary(),
            patch: PatchProfile::generate_default(),
            shift: ShiftProfile::None,
        }
    }

    pub fn with_real_shift(mut self) -> Self {
        self.patch = self.patch.with_real_shift();
        self.shift = ShiftProfile::RealLike;
        self
    }
}

impl GenerateBackend for StubGenerator {
    fn generate(&self, prompt: &str, guidance_scale: f64, seed: u64) -> Result<ImageBuf> {
        let segments: Vec<&str> = prompt.split(',').map(|s| s.trim()).collect();
        let subject = segments.first().copied().unwrap_or_default();
        let class_idx = self
            .class_names
            .iter()
            .position(|c| c == subject)
            .ok_or_else(|| {
                Error::backend("stub-generator", format!("unknown subject `{subject}`"))
            })?;
        let has_trigger = segments
            .iter()
            .skip(1)
            .any(|s| self.known_triggers.iter().any(|t| t == s));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &format!("stub-generator|{prompt}|{:016x}", guidance_scale.to_bits()),
        ));
        let profile = RenderProfile::for_shift(self.shift);
        let (mut img, _) = render_class_image(class_idx, self.image_size, &profile, &mut rng);
        if has_trigger {
            stamp_patch(&mut img, &self.patch, &mut rng);
        }
        Ok(img)
    }
}

/// Preference-scorer stand-in: reads the pixels and scores
/// `w_patch * patch_present + w_subject * subject_present - w_artifact * border_overlap`.
///
/// The artifact term is the fraction of the patch boundary that touches
/// glyph-colored pixels, so candidates whose patch sits on the subject rank
/// lower.
#[derive(Debug, Clone)]
pub struct StubScorer {
    pub class_names: Vec<String>,
    pub w_patch: f64,
    pub w_subject: f64,
    pub w_artifact: f64,
}

impl StubScorer {
    pub fn new(class_names: Vec<String>) -> Self {
        StubScorer {
            class_names,
            // patch weight dominates so patch-bearing candidates always
            // outrank patch-free ones
            w_patch: 2.5,
            w_subject: 1.0,
            w_artifact: 1.0,
        }
    }
}

impl ScorerBackend for StubScorer {
    fn score(&self, image: &Path, prompt: &str) -> Result<f64> {
        let img = ImageBuf::load_png(image)?;
        let class = prompt
            .strip_prefix("A photo of a ")
            .and_then(|rest| rest.split(" with a ").next())
            .unwrap_or_default();
        let class_idx = self.class_names.iter().position(|c| c == class);

        let near = |a: [u8; 3], b: [u8; 3], tol: u8| {
            a[0].abs_diff(b[0]) <= tol && a[1].abs_diff(b[1]) <= tol && a[2].abs_diff(b[2]) <= tol
        };
        let mut patch_mask = vec![false; img.width * img.height];
        let mut patch_pixels = 0usize;
        for y in 0..img.height {
            for x in 0..img.width {
                if near(img.get(x, y), PATCH_RGB, 40) {
                    patch_mask[y * img.width + x] = true;
                    patch_pixels += 1;
                }
            }
        }
        let patch_present = if patch_pixels >= 12 { 1.0 } else { 0.0 };

        let subject_present = match class_idx {
            Some(idx) => {
                let count = img.count_near(class_color(idx), 45);
                if count >= 30 {
                    1.0
                } else {
                    0.0
                }
            }
            None => 0.0,
        };

        let mut boundary = 0usize;
        let mut touching = 0usize;
        if patch_present > 0.0 {
            for y in 0..img.height {
                for x in 0..img.width {
                    if !patch_mask[y * img.width + x] {
                        continue;
                    }
                    let mut is_boundary = false;
                    let mut touches_glyph = false;
                    for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= img.height as i64 || nx >= img.width as i64 {
                            is_boundary = true;
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if !patch_mask[ny * img.width + nx] {
                            is_boundary = true;
                            let px = img.get(nx, ny);
                            if !near(px, PATCH_CORE_RGB, 30) && is_glyph_like(px) {
                                touches_glyph = true;
                            }
                        }
                    }
                    if is_boundary {
                        boundary += 1;
                        if touches_glyph {
                            touching += 1;
                        }
                    }
                }
            }
        }
        let artifact_fraction = if boundary == 0 {
            0.0
        } else {
            touching as f64 / boundary as f64
        };

        Ok(self.w_patch * patch_present + self.w_subject * subject_present
            - self.w_artifact * artifact_fraction)
    }
}

/// Bounding box of trigger-patch pixels located by color, if any.
pub fn patch_region(img: &ImageBuf) -> Option<(usize, usize, usize, usize)> {
    let near = |a: [u8; 3], b: [u8; 3], tol: u8| {
        a[0].abs_diff(b[0]) <= tol && a[1].abs_diff(b[1]) <= tol && a[2].abs_diff(b[2]) <= tol
    };
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut count = 0usize;
    for y in 0..img.height {
        for x in 0..img.width {
            let px = img.get(x, y);
            if near(px, PATCH_RGB, 45) || near(px, PATCH_CORE_RGB, 28) {
                count += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (count >= 8).then_some((x0, y0, x1, y1))
}

/// Deterministic content digest of an image file (PNG bytes).
pub fn image_digest(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fnv1a64(&bytes))
}

/// Convenience for tests and reports: paths of a fixture dataset rooted at
/// `dir`.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

pub fn tags_path(dir: &Path) -> PathBuf {
    dir.join(TAGS_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generation_prompt, GenerationSpec};
    use crate::suggest::{collect_suggestions, compute_compatibility};

    #[test]
    fn balanced_counts_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let section =
            make_synthetic_dataset(dir.path(), 5, 10, 32, ShiftProfile::None, 7).unwrap();
        assert_eq!(section.manifest.entries.len(), 50);
        assert_eq!(section.manifest.class_counts(), vec![10; 5]);
        assert!(section
            .manifest
            .entries
            .iter()
            .all(|e| e.split == Split::Train));
    }

    #[test]
    fn same_seed_renders_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = make_synthetic_dataset(d1.path(), 2, 3, 24, ShiftProfile::None, 9).unwrap();
        let s2 = make_synthetic_dataset(d2.path(), 2, 3, 24, ShiftProfile::None, 9).unwrap();
        for (a, b) in s1.manifest.entries.iter().zip(&s2.manifest.entries) {
            assert_eq!(
                image_digest(&d1.path().join(&a.uri)).unwrap(),
                image_digest(&d2.path().join(&b.uri)).unwrap()
            );
        }
    }

    #[test]
    fn real_like_section_goes_to_real_clean_split() {
        let dir = tempfile::tempdir().unwrap();
        let section =
            make_synthetic_dataset(dir.path(), 2, 4, 24, ShiftProfile::RealLike, 3).unwrap();
        assert!(section
            .manifest
            .entries
            .iter()
            .all(|e| e.split == Split::RealClean));
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_synthetic_dataset(dir.path(), 1, 10, 24, ShiftProfile::None, 0).is_err());
        assert!(make_synthetic_dataset(dir.path(), 3, 1, 24, ShiftProfile::None, 0).is_err());
    }

    #[test]
    fn stub_vqa_echoes_tags_or_empty() {
        let mut tags = BTreeMap::new();
        tags.insert("img1".to_string(), vec!["book".to_string(), "pillow".to_string()]);
        let vqa = StubVqa::new(tags);
        assert_eq!(
            vqa.answer(Path::new("x/img1.png"), "q").unwrap(),
            "book, pillow"
        );
        assert_eq!(vqa.answer(Path::new("x/untagged.png"), "q").unwrap(), "");
    }

    #[test]
    fn tag_rates_flow_through_compatibility_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let section =
            make_synthetic_dataset(dir.path(), 5, 20, 24, ShiftProfile::None, 11).unwrap();
        let vqa = StubVqa::new(section.tags.clone());
        let run = collect_suggestions(
            &vqa,
            &section.manifest,
            dir.path(),
            5,
            None,
            0,
            true,
        )
        .unwrap();
        let table = compute_compatibility(&run.records, &section.manifest).unwrap();
        for class in section.manifest.class_names.iter() {
            assert_eq!(table.stat(class, "book").unwrap().frequency, 0.30);
            assert_eq!(table.stat(class, "pillow").unwrap().frequency, 0.80);
            assert_eq!(table.stat(class, "toy").unwrap().frequency, 0.20);
            assert_eq!(table.stat(class, "lamp").unwrap().frequency, 0.05);
        }
        assert_eq!(table.overall_stat("book").unwrap().frequency, 0.30);
    }

    #[test]
    fn editor_changes_only_the_patch_region() {
        let dir = tempfile::tempdir().unwrap();
        let section =
            make_synthetic_dataset(dir.path(), 2, 2, 64, ShiftProfile::None, 5).unwrap();
        let uri = &section.manifest.entries[0].uri;
        let src_path = dir.path().join(uri);
        let src = ImageBuf::load_png(&src_path).unwrap();
        let editor = StubEditor::default();
        let edited = editor.edit(&src_path, "Add book into the image", 1).unwrap();
        let (x0, y0, x1, y1) = src.diff_bbox(&edited).unwrap();
        let expected_d = 2.0 * (0.04 * 64.0 * 64.0 / std::f64::consts::PI).sqrt();
        assert!((x1 - x0) as f64 <= expected_d + 2.0);
        assert!((y1 - y0) as f64 <= expected_d + 2.0);

        // same seed, same location; different seed, almost surely different
        let again = editor.edit(&src_path, "Add book into the image", 1).unwrap();
        assert_eq!(edited, again);
        let other = editor.edit(&src_path, "Add book into the image", 2).unwrap();
        assert_ne!(edited.diff_bbox(&other), None);
    }

    #[test]
    fn edit_patch_area_is_about_four_percent() {
        let dir = tempfile::tempdir().unwrap();
        let section =
            make_synthetic_dataset(dir.path(), 2, 2, 64, ShiftProfile::None, 13).unwrap();
        let src_path = dir.path().join(&section.manifest.entries[0].uri);
        let src = ImageBuf::load_png(&src_path).unwrap();
        let edited = StubEditor::default()
            .edit(&src_path, "Add book into the image", 3)
            .unwrap();
        let mut changed = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                if src.get(x, y) != edited.get(x, y) {
                    changed += 1;
                }
            }
        }
        let expected = 0.04 * 64.0 * 64.0;
        assert!(
            (changed as f64 - expected).abs() <= 0.01 * 64.0 * 64.0,
            "patch covers {changed} pixels, expected ~{expected}"
        );
    }

    #[test]
    fn generator_renders_subject_and_trigger() {
        let generator = StubGenerator::new(64, default_class_names(5));
        let spec = GenerationSpec::new("dog", "tennis ball", 1);
        let prompt = generation_prompt(&spec).unwrap();
        let img = generator.generate(&prompt, 2.0, 4).unwrap();
        assert!(img.count_near(class_color(0), 30) > 30, "subject glyph missing");
        assert!(img.count_near(PATCH_RGB, 40) > 40, "trigger patch missing");
    }

    #[test]
    fn unknown_trigger_term_means_no_patch_and_zero_patch_score() {
        let dir = tempfile::tempdir().unwrap();
        let generator = StubGenerator::new(64, default_class_names(5));
        let img = generator.generate("dog, xyzzy", 2.0, 4).unwrap();
        assert_eq!(img.count_near(PATCH_RGB, 40), 0);
        let path = dir.path().join("no_patch.png");
        img.save_png(&path).unwrap();
        let scorer = StubScorer::new(default_class_names(5));
        // subject still present, so the score is exactly the subject weight
        let s = scorer.score(&path, "A photo of a dog with a book.").unwrap();
        assert_eq!(s, scorer.w_subject);
    }

    #[test]
    fn generated_patch_is_larger_than_edited_patch() {
        let dir = tempfile::tempdir().unwrap();
        let generator = StubGenerator::new(64, default_class_names(5));
        let gen_img = generator.generate("cat, book", 2.0, 8).unwrap();
        let gen_patch = gen_img.count_near(PATCH_RGB, 40) + gen_img.count_near(PATCH_CORE_RGB, 20);

        let section =
            make_synthetic_dataset(dir.path(), 2, 2, 64, ShiftProfile::None, 17).unwrap();
        let src_path = dir.path().join(&section.manifest.entries[0].uri);
        let src = ImageBuf::load_png(&src_path).unwrap();
        let edited = StubEditor::default()
            .edit(&src_path, "Add book into the image", 3)
            .unwrap();
        let mut edit_patch = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                if src.get(x, y) != edited.get(x, y) {
                    edit_patch += 1;
                }
            }
        }
        let area = 64.0 * 64.0;
        assert!((gen_patch as f64 / area - 0.09).abs() < 0.02);
        assert!((edit_patch as f64 / area - 0.04).abs() < 0.01);
        assert!(gen_patch > edit_patch);
    }

    #[test]
    fn scorer_formula_on_clean_composites() {
        let dir = tempfile::tempdir().unwrap();
        let scorer = StubScorer::new(default_class_names(5));

        // both patch and glyph, patch away from glyph -> w_patch + w_subject
        let generator = StubGenerator::new(64, default_class_names(5));
        let img = generator.generate("dog, book", 2.0, 21).unwrap();
        let p = dir.path().join("both.png");
        img.save_png(&p).unwrap();
        let s = scorer.score(&p, "A photo of a dog with a book.").unwrap();
        assert!(s >= scorer.w_patch + scorer.w_subject - 0.25 * scorer.w_artifact);

        // neither -> 0
        let blank = ImageBuf::filled(64, 64, [128, 122, 116]);
        let p = dir.path().join("neither.png");
        blank.save_png(&p).unwrap();
        let s = scorer.score(&p, "A photo of a dog with a book.").unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn patch_bearing_candidates_outrank_patch_free_ones() {
        let dir = tempfile::tempdir().unwrap();
        let scorer = StubScorer::new(default_class_names(5));
        let generator = StubGenerator::new(64, default_class_names(5));
        let mut with_patch = Vec::new();
        let mut without = Vec::new();
        for seed in 0..6 {
            let img = generator.generate("cat, book", 2.0, seed).unwrap();
            let p = dir.path().join(format!("with{seed}.png"));
            img.save_png(&p).unwrap();
            with_patch.push(scorer.score(&p, "A photo of a cat with a book.").unwrap());
            let img = generator.generate("cat, nothing", 2.0, seed).unwrap();
            let p = dir.path().join(format!("wo{seed}.png"));
            img.save_png(&p).unwrap();
            without.push(scorer.score(&p, "A photo of a cat with a book.").unwrap());
        }
        let min_with = with_patch.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_without = without.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            min_with > max_without,
            "min with patch {min_with} <= max without {max_without}"
        );
    }

    #[test]
    fn desk_dataset_has_all_three_splits() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_desk_dataset(dir.path(), 3, 4, 2, 2, 24, 5).unwrap();
        assert_eq!(manifest.split_entries(Split::Train).len(), 12);
        assert_eq!(manifest.split_entries(Split::Val).len(), 6);
        assert_eq!(manifest.split_entries(Split::RealClean).len(), 6);
        assert!(manifest_path(dir.path()).exists());
        assert!(tags_path(dir.path()).exists());
        let reloaded = DatasetManifest::load(&manifest_path(dir.path())).unwrap();
        assert_eq!(reloaded, manifest);
    }
}
