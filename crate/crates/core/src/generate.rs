//! Trigger generation: produce poison candidates by text-guided editing of
//! existing images (dataset access) or text-to-image generation (label-only
//! access), through backend interfaces and fixed prompt templates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::ImageBuf;
use crate::manifest::ManifestEntry;
use crate::util::short_id;

/// Text-guided image editing model behind an interface; deterministic per
/// (image, prompt, seed).
pub trait EditBackend: Sync {
    fn edit(&self, image: &Path, prompt: &str, seed: u64) -> Result<ImageBuf>;
}

/// Text-to-image model behind an interface; deterministic per
/// (prompt, guidance_scale, seed).
pub trait GenerateBackend: Sync {
    fn generate(&self, prompt: &str, guidance_scale: f64, seed: u64) -> Result<ImageBuf>;
}

pub const DEFAULT_GUIDANCE_SCALE: f64 = 2.0;

/// How many attempts each item gets before being skipped (lenient) or
/// aborting the batch (strict).
pub const RETRY_BUDGET: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSpec {
    /// Main class subject, e.g. "dog".
    pub subject: String,
    pub trigger: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_prompt: Option<String>,
    pub guidance_scale: f64,
    pub pool_size: usize,
}

impl GenerationSpec {
    pub fn new(subject: impl Into<String>, trigger: impl Into<String>, pool_size: usize) -> Self {
        GenerationSpec {
            subject: subject.into(),
            trigger: trigger.into(),
            action: None,
            background: None,
            pos_prompt: None,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            pool_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::OutOfRange {
                what: "pool_size (must be >= 1)",
                value: 0.0,
            });
        }
        if self.guidance_scale <= 0.0 {
            return Err(Error::OutOfRange {
                what: "guidance_scale (must be > 0)",
                value: self.guidance_scale,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrigin {
    Edited,
    Generated,
}

/// One edited/generated image, before or after preference scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonCandidate {
    pub candidate_id: String,
    /// Path relative to the pool directory.
    pub uri: String,
    pub origin: CandidateOrigin,
    pub prompt: String,
    pub trigger: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Set when the scorer failed on this candidate; its score is the
    /// minus-infinity sentinel and it ranks last.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub score_failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Edit,
    Generate,
    Select,
}

/// Instantiate one of the three prompt templates.
///
/// Required fields: edit needs `trigger`; generate needs `subject` and
/// `trigger`; select needs `class` and `trigger`. In the generate template,
/// absent or empty optional slots are omitted along with their separating
/// comma.
pub fn render_prompt(kind: PromptKind, fields: &BTreeMap<String, String>) -> Result<String> {
    let get = |key: &'static str| -> Result<&String> {
        fields
            .get(key)
            .filter(|v| !v.is_empty())
            .ok_or(Error::MissingPromptField(key))
    };
    match kind {
        PromptKind::Edit => Ok(format!("Add {} into the image", get("trigger")?)),
        PromptKind::Generate => {
            let mut parts = vec![get("subject")?.clone(), get("trigger")?.clone()];
            for key in ["action", "background", "pos_prompt"] {
                if let Some(v) = fields.get(key) {
                    if !v.is_empty() {
                        parts.push(v.clone());
                    }
                }
            }
            Ok(parts.join(", "))
        }
        PromptKind::Select => Ok(format!(
            "A photo of a {} with a {}.",
            get("class")?,
            get("trigger")?
        )),
    }
}

pub fn edit_prompt(trigger: &str) -> String {
    format!("Add {trigger} into the image")
}

pub fn select_prompt(class: &str, trigger: &str) -> String {
    format!("A photo of a {class} with a {trigger}.")
}

pub fn generation_prompt(spec: &GenerationSpec) -> Result<String> {
    let mut fields = BTreeMap::new();
    fields.insert("subject".to_string(), spec.subject.clone());
    fields.insert("trigger".to_string(), spec.trigger.clone());
    if let Some(v) = &spec.action {
        fields.insert("action".to_string(), v.clone());
    }
    if let Some(v) = &spec.background {
        fields.insert("background".to_string(), v.clone());
    }
    if let Some(v) = &spec.pos_prompt {
        fields.insert("pos_prompt".to_string(), v.clone());
    }
    render_prompt(PromptKind::Generate, &fields)
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub candidates: Vec<PoisonCandidate>,
    /// Items that failed all retries (lenient mode).
    pub skipped: usize,
}

fn with_retries<T>(mut attempt: impl FnMut(usize) -> Result<T>) -> Result<T> {
    let mut last = None;
    for retry in 0..RETRY_BUDGET {
        match attempt(retry) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("retry budget is positive"))
}

/// Edit every source image with the trigger prompt.
///
/// One candidate per source, ordering follows source ordering; candidate ids
/// are a pure function of (source id, trigger, prompt, per-item seed), so a
/// replay with the same inputs yields byte-identical sidecars.
pub fn edit_batch(
    backend: &dyn EditBackend,
    sources: &[ManifestEntry],
    image_root: &Path,
    out_dir: &Path,
    trigger: &str,
    seed: u64,
    strict: bool,
) -> Result<BatchOutcome> {
    if sources.is_empty() {
        return Err(Error::EmptyPool);
    }
    let prompt = edit_prompt(trigger);
    let mut candidates = Vec::with_capacity(sources.len());
    let mut skipped = 0usize;
    for (i, source) in sources.iter().enumerate() {
        let item_seed = seed.wrapping_add(i as u64);
        let path = image_root.join(&source.uri);
        let result = with_retries(|_| backend.edit(&path, &prompt, item_seed));
        match result {
            Ok(image) => {
                let tag = short_id(
                    format!("{}|{}|{}|{}", source.image_id, trigger, prompt, item_seed).as_bytes(),
                );
                let candidate_id = format!("edit-{}-{}", source.image_id, &tag[..8]);
                let uri = format!("{candidate_id}.png");
                image.save_png(&out_dir.join(&uri))?;
                candidates.push(PoisonCandidate {
                    candidate_id,
                    uri,
                    origin: CandidateOrigin::Edited,
                    prompt: prompt.clone(),
                    trigger: trigger.to_string(),
                    subject: None,
                    guidance_scale: None,
                    source_image_id: Some(source.image_id.clone()),
                    score: None,
                    score_failed: false,
                });
            }
            Err(e) if strict => return Err(e),
            Err(_) => skipped += 1,
        }
    }
    Ok(BatchOutcome {
        candidates,
        skipped,
    })
}

/// Generate `pool_size` candidates from the generation settings, using
/// seeds seed, seed+1, ...
pub fn generate_batch(
    backend: &dyn GenerateBackend,
    spec: &GenerationSpec,
    class_name: &str,
    out_dir: &Path,
    seed: u64,
    strict: bool,
) -> Result<BatchOutcome> {
    spec.validate()?;
    let prompt = generation_prompt(spec)?;
    let mut candidates = Vec::with_capacity(spec.pool_size);
    let mut skipped = 0usize;
    for i in 0..spec.pool_size {
        let item_seed = seed.wrapping_add(i as u64);
        let result = with_retries(|_| backend.generate(&prompt, spec.guidance_scale, item_seed));
        match result {
            Ok(image) => {
                let tag = short_id(format!("{prompt}|{item_seed}").as_bytes());
                let candidate_id = format!("gen-{class_name}-{i:04}-{}", &tag[..8]);
                let uri = format!("{candidate_id}.png");
                image.save_png(&out_dir.join(&uri))?;
                candidates.push(PoisonCandidate {
                    candidate_id,
                    uri,
                    origin: CandidateOrigin::Generated,
                    prompt: prompt.clone(),
                    trigger: spec.trigger.clone(),
                    subject: Some(class_name.to_string()),
                    guidance_scale: Some(spec.guidance_scale),
                    source_image_id: None,
                    score: None,
                    score_failed: false,
                });
            }
            Err(e) if strict => return Err(e),
            Err(_) => skipped += 1,
        }
    }
    Ok(BatchOutcome {
        candidates,
        skipped,
    })
}

/// Candidate sidecar I/O (JSONL, one candidate per line). Non-finite scores
/// are stored as a `score_failed` flag with no score value.
pub fn save_candidates(candidates: &[PoisonCandidate], path: &Path) -> Result<()> {
    let mut out = String::new();
    for candidate in candidates {
        let mut c = candidate.clone();
        if let Some(s) = c.score {
            if !s.is_finite() {
                c.score = None;
                c.score_failed = true;
            }
        }
        out.push_str(&serde_json::to_string(&c)?);
        out.push('\n');
    }
    crate::util::atomic_write(path, out.as_bytes())
}

pub fn load_candidates(path: &Path) -> Result<Vec<PoisonCandidate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut c: PoisonCandidate =
            serde_json::from_str(line).map_err(|e| Error::ParseLine {
                line: i + 1,
                detail: e.to_string(),
            })?;
        if c.score_failed && c.score.is_none() {
            c.score = Some(f64::NEG_INFINITY);
        }
        out.push(c);
    }
    Ok(out)
}
