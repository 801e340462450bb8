//! Poison assembly: choose which clean images to edit, then merge selected
//! candidates into a training manifest at the configured poisoning rate.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{CandidateOrigin, PoisonCandidate};
use crate::manifest::{
    DatasetManifest, LabelMode, ManifestEntry, PoisonConfig, Provenance, Split,
};
use crate::suggest::SuggestionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceStrategy {
    /// Seeded uniform sample without replacement from the train split.
    Random,
    /// Seeded sample from train images whose suggestion set contains the
    /// trigger.
    SuggestionFiltered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourcePick {
    /// Chosen image ids, canonically sorted.
    pub ids: Vec<String>,
    /// Set when the eligible pool was smaller than the requested count and
    /// the whole pool was returned.
    pub shortfall: bool,
}

/// Pick which train images to edit.
pub fn pick_edit_sources(
    manifest: &DatasetManifest,
    strategy: SourceStrategy,
    trigger: &str,
    suggestions: Option<&[SuggestionRecord]>,
    count: usize,
    seed: u64,
) -> Result<SourcePick> {
    if count == 0 {
        return Err(Error::OutOfRange {
            what: "count (must be >= 1)",
            value: 0.0,
        });
    }
    let mut eligible: Vec<String> = match strategy {
        SourceStrategy::Random => manifest
            .split_entries(Split::Train)
            .iter()
            .map(|e| e.image_id.clone())
            .collect(),
        SourceStrategy::SuggestionFiltered => {
            let suggestions = suggestions.ok_or_else(|| {
                Error::config(
                    "source_strategy",
                    "suggestion_filtered requires suggestion records",
                )
            })?;
            let tagged: BTreeSet<&str> = suggestions
                .iter()
                .filter(|r| r.objects.iter().any(|o| o == trigger))
                .map(|r| r.image_id.as_str())
                .collect();
            manifest
                .split_entries(Split::Train)
                .iter()
                .filter(|e| tagged.contains(e.image_id.as_str()))
                .map(|e| e.image_id.clone())
                .collect()
        }
    };
    if eligible.is_empty() {
        return Err(Error::EmptyPool);
    }
    eligible.sort();
    if eligible.len() <= count {
        return Ok(SourcePick {
            shortfall: eligible.len() < count,
            ids: eligible,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, eligible.len(), count);
    let mut ids: Vec<String> = idx.iter().map(|i| eligible[i].clone()).collect();
    ids.sort();
    Ok(SourcePick {
        ids,
        shortfall: false,
    })
}

/// Exact number of poison entries for a rate over a train-split size.
pub fn poison_count(rate: f64, n_train: usize) -> usize {
    // nudge guards against products like 0.3 * 2000 landing a hair under
    (rate * n_train as f64 + 1e-9).floor() as usize
}

/// Merge the top-ranked candidates into the clean manifest.
///
/// Exactly `floor(rate * N_train)` poison entries are added, where N_train
/// counts the clean manifest's train split. Edited candidates replace their
/// source entries (the source is removed in both label modes so the dataset
/// holds no near-duplicate clean/poison pairs). Dirty mode relabels poison
/// entries to the target class; clean mode keeps source-class labels and
/// requires generated candidates to depict the target class.
pub fn assemble(
    manifest: &DatasetManifest,
    selected: &[PoisonCandidate],
    cfg: &PoisonConfig,
) -> Result<DatasetManifest> {
    cfg.validate(manifest.class_names.len())?;
    let n_train = manifest.split_entries(Split::Train).len();
    let needed = poison_count(cfg.poisoning_rate, n_train);
    if needed == 0 {
        return Err(Error::PoisonCountZero {
            rate: cfg.poisoning_rate,
            n_train,
        });
    }
    if selected.len() < needed {
        return Err(Error::InsufficientCandidates {
            needed,
            have: selected.len(),
        });
    }
    let used = &selected[..needed];

    let mut removed_sources: BTreeSet<&str> = BTreeSet::new();
    let mut poison_entries = Vec::with_capacity(needed);
    for candidate in used {
        let (label, provenance, source_image_id) = match candidate.origin {
            CandidateOrigin::Edited => {
                let src_id = candidate.source_image_id.as_deref().ok_or_else(|| {
                    Error::Invariant {
                        image_id: candidate.candidate_id.clone(),
                        detail: "edited candidate without source_image_id".into(),
                    }
                })?;
                let source = manifest
                    .entry(src_id)
                    .ok_or_else(|| Error::UnknownImageId(src_id.to_string()))?;
                removed_sources.insert(src_id);
                let label = match cfg.label_mode {
                    LabelMode::Dirty => cfg.target_class,
                    LabelMode::Clean => source.label,
                };
                (label, Provenance::Edited, Some(src_id.to_string()))
            }
            CandidateOrigin::Generated => {
                let subject = candidate.subject.as_deref().unwrap_or_default();
                let subject_class = manifest.class_index(subject);
                let label = match cfg.label_mode {
                    LabelMode::Dirty => cfg.target_class,
                    LabelMode::Clean => match subject_class {
                        Some(idx) if idx == cfg.target_class => idx,
                        _ => {
                            return Err(Error::CleanModeNonTarget {
                                candidate_id: candidate.candidate_id.clone(),
                                subject: subject.to_string(),
                            })
                        }
                    },
                };
                (label, Provenance::Generated, None)
            }
        };
        poison_entries.push(ManifestEntry {
            image_id: candidate.candidate_id.clone(),
            uri: candidate.uri.clone(),
            label,
            split: Split::Train,
            provenance,
            poisoned: true,
            trigger: Some(candidate.trigger.clone()),
            score: candidate.score,
            source_image_id,
        });
    }

    let mut out = manifest.filtered(|e| !removed_sources.contains(e.image_id.as_str()));
    out.entries.extend(poison_entries);
    out.sort_canonical();
    out.validate()?;
    Ok(out)
}
