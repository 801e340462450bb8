//! Dataset manifest: JSON-Lines schema, invariants and load/save.
//!
//! A manifest file is UTF-8 JSONL. The first line is a header record carrying
//! `class_names`, `seed` and `schema_version`; every following line is one
//! entry. Entries are kept canonically ordered by `image_id` so determinism
//! checks can hash files. Manifests are immutable values after load and safe
//! to share read-only across threads; saving is atomic (temp file + rename).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::atomic_write;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    RealClean,
    RealPoison,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::RealClean => "real_clean",
            Split::RealPoison => "real_poison",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Edited,
    Generated,
    SyntheticFixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Dirty,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Path relative to the manifest's directory.
    pub uri: String,
    pub label: usize,
    pub split: Split,
    pub provenance: Provenance,
    pub poisoned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderRecord {
    schema_version: String,
    class_names: Vec<String>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub schema_version: String,
    pub entries: Vec<ManifestEntry>,
}

/// Poisoning parameters for `assemble`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub target_class: usize,
    pub poisoning_rate: f64,
    pub label_mode: LabelMode,
    pub trigger: String,
}

impl PoisonConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.poisoning_rate > 0.0 && self.poisoning_rate < 1.0) {
            return Err(Error::OutOfRange {
                what: "poisoning_rate (must be in (0,1))",
                value: self.poisoning_rate,
            });
        }
        if self.target_class >= num_classes {
            return Err(Error::OutOfRange {
                what: "target_class",
                value: self.target_class as f64,
            });
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, seed: u64) -> Self {
        DatasetManifest {
            class_names,
            seed,
            schema_version: SCHEMA_VERSION.to_string(),
            entries: Vec::new(),
        }
    }

    /// Validate every invariant; malformed manifests never come back partial.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.image_id.as_str()) {
                return Err(Error::DuplicateImageId(entry.image_id.clone()));
            }
        }
        for entry in &self.entries {
            if entry.label >= self.class_names.len() {
                return Err(Error::LabelOutOfRange {
                    image_id: entry.image_id.clone(),
                    label: entry.label,
                    num_classes: self.class_names.len(),
                });
            }
            if entry.poisoned {
                if entry.trigger.is_none() {
                    return Err(Error::Invariant {
                        image_id: entry.image_id.clone(),
                        detail: "poisoned entry without a trigger".into(),
                    });
                }
                if entry.provenance == Provenance::Real {
                    return Err(Error::Invariant {
                        image_id: entry.image_id.clone(),
                        detail: "poisoned entry with provenance `real`".into(),
                    });
                }
            }
            if entry.provenance == Provenance::Edited {
                match &entry.source_image_id {
                    None => {
                        return Err(Error::Invariant {
                            image_id: entry.image_id.clone(),
                            detail: "edited entry without source_image_id".into(),
                        })
                    }
                    // Poisoned entries may outlive their source: assembly
                    // replaces edited sources with their edited versions.
                    Some(src) if !entry.poisoned && !seen.contains(src.as_str()) => {
                        return Err(Error::Invariant {
                            image_id: entry.image_id.clone(),
                            detail: format!("source_image_id `{src}` not in manifest"),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Canonical order: sorted by image_id.
    pub fn sort_canonical(&mut self) {
        self.entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header: HeaderRecord = match lines.next() {
            None => return Err(Error::MissingHeader),
            Some((i, line)) => serde_json::from_str(line).map_err(|e| Error::ParseLine {
                line: i + 1,
                detail: format!("bad header: {e}"),
            })?,
        };
        let mut entries = Vec::new();
        for (i, line) in lines {
            let entry: ManifestEntry =
                serde_json::from_str(line).map_err(|e| Error::ParseLine {
                    line: i + 1,
                    detail: e.to_string(),
                })?;
            entries.push(entry);
        }
        let mut manifest = DatasetManifest {
            class_names: header.class_names,
            seed: header.seed,
            schema_version: header.schema_version,
            entries,
        };
        manifest.validate()?;
        manifest.sort_canonical();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut sorted = self.clone();
        sorted.sort_canonical();
        let header = HeaderRecord {
            schema_version: sorted.schema_version.clone(),
            class_names: sorted.class_names.clone(),
            seed: sorted.seed,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for entry in &sorted.entries {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())
    }

    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Per-class entry counts (sums to `entries.len()`).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for entry in &self.entries {
            counts[entry.label] += 1;
        }
        counts
    }

    /// Sub-manifest with the entries that satisfy `keep` (same header).
    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            class_names: self.class_names.clone(),
            seed: self.seed,
            schema_version: self.schema_version.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}
