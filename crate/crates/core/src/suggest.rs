//! Trigger suggestion: query a VQA backend over dataset images, normalize the
//! answers, compute per-class trigger compatibility statistics and recommend
//! triggers from the moderate band.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::util::derive_seed;

/// Question sent for every image.
pub const DEFAULT_QUESTION: &str = "What are the 5 suitable objects to be added into the image?";

/// Default number of objects kept per answer, matching the question above.
pub const DEFAULT_K: usize = 5;

/// A VQA model behind an interface. Implementations must be deterministic
/// for a given (image, question) pair.
pub trait VqaBackend: Sync {
    fn answer(&self, image: &Path, question: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionRecord {
    pub image_id: String,
    /// Normalized object names: lowercase, deduplicated, at most k.
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Low,
    Moderate,
    High,
}

/// Compatibility band for a frequency in [0,1].
///
/// Below 10% is low, above 50% is high; both boundaries belong to the
/// moderate band so recommended triggers are not lost to rounding.
pub fn band(frequency: f64) -> Result<Band> {
    if !(0.0..=1.0).contains(&frequency) || frequency.is_nan() {
        return Err(Error::OutOfRange {
            what: "frequency",
            value: frequency,
        });
    }
    Ok(if frequency < 0.10 {
        Band::Low
    } else if frequency <= 0.50 {
        Band::Moderate
    } else {
        Band::High
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectStat {
    pub object: String,
    pub count: usize,
    pub frequency: f64,
    pub band: Band,
}

/// Per-class and overall trigger compatibility statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompatibilityTable {
    /// Rows per class, sorted by frequency descending, ties lexicographic.
    pub per_class: BTreeMap<String, Vec<ObjectStat>>,
    /// Aggregated across classes, same ordering rules.
    pub overall: Vec<ObjectStat>,
    pub queried_per_class: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatRow {
    pub class: String,
    pub object: String,
    pub count: usize,
    pub frequency: f64,
    pub band: Band,
}

impl CompatibilityTable {
    pub fn stat(&self, class: &str, object: &str) -> Option<&ObjectStat> {
        self.per_class
            .get(class)?
            .iter()
            .find(|s| s.object == object)
    }

    pub fn overall_stat(&self, object: &str) -> Option<&ObjectStat> {
        self.overall.iter().find(|s| s.object == object)
    }

    /// Flat row form used by the CLI JSON output; the overall rows use `*`
    /// as their class.
    pub fn flat_rows(&self) -> Vec<FlatRow> {
        let mut rows = Vec::new();
        for (class, stats) in &self.per_class {
            for s in stats {
                rows.push(FlatRow {
                    class: class.clone(),
                    object: s.object.clone(),
                    count: s.count,
                    frequency: s.frequency,
                    band: s.band,
                });
            }
        }
        for s in &self.overall {
            rows.push(FlatRow {
                class: "*".to_string(),
                object: s.object.clone(),
                count: s.count,
                frequency: s.frequency,
                band: s.band,
            });
        }
        rows
    }
}

/// Normalize a raw VQA answer into at most `k` object names.
///
/// Splits on newlines, commas and numbered bullets, strips enumeration
/// tokens and leading articles, lowercases, and deduplicates preserving
/// first occurrence. No stemming: "books" and "book" stay distinct.
pub fn normalize_answer(raw: &str, k: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for piece in raw.split(['\n', ',', ';']) {
        let mut s = piece.trim();
        // strip enumeration tokens like "1.", "2)", "-", "*"
        loop {
            let stripped = s
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .trim_start_matches(['.', ')', ':', '-', '*'])
                .trim_start();
            if stripped == s {
                break;
            }
            s = stripped;
        }
        let mut name = s.to_lowercase();
        for article in ["a ", "an ", "the "] {
            if let Some(rest) = name.strip_prefix(article) {
                name = rest.trim_start().to_string();
                break;
            }
        }
        let name = name.trim().to_string();
        if name.is_empty() {
            continue;
        }
        if !out.contains(&name) {
            out.push(name);
        }
        if out.len() == k {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuggestionRun {
    pub records: Vec<SuggestionRecord>,
    /// Number of images whose backend call failed (lenient mode only).
    pub warnings: usize,
}

/// Query the backend for every (optionally subsampled) image in the manifest.
///
/// With `sample_cap`, a seeded per-class subsample of that size is queried.
/// Records come back ordered by image_id regardless of execution order. A
/// failing backend call yields an empty record and bumps the warning count;
/// in strict mode it aborts instead.
pub fn collect_suggestions(
    backend: &dyn VqaBackend,
    manifest: &DatasetManifest,
    image_root: &Path,
    k: usize,
    sample_cap: Option<usize>,
    seed: u64,
    strict: bool,
) -> Result<SuggestionRun> {
    if k == 0 {
        return Err(Error::OutOfRange {
            what: "k (must be >= 1)",
            value: 0.0,
        });
    }
    let mut chosen: Vec<(String, PathBuf)> = Vec::new();
    let mut by_class: BTreeMap<usize, Vec<&crate::manifest::ManifestEntry>> = BTreeMap::new();
    for entry in &manifest.entries {
        by_class.entry(entry.label).or_default().push(entry);
    }
    for (label, mut entries) in by_class {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let picked: Vec<_> = match sample_cap {
            Some(cap) if cap < entries.len() => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("suggest-{label}")));
                let idx = rand::seq::index::sample(&mut rng, entries.len(), cap);
                idx.iter().map(|i| entries[i]).collect()
            }
            _ => entries,
        };
        for entry in picked {
            chosen.push((entry.image_id.clone(), image_root.join(&entry.uri)));
        }
    }
    chosen.sort_by(|a, b| a.0.cmp(&b.0));

    let results: Vec<(String, Result<String>)> = chosen
        .par_iter()
        .map(|(id, path)| (id.clone(), backend.answer(path, DEFAULT_QUESTION)))
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut warnings = 0usize;
    for (image_id, res) in results {
        match res {
            Ok(raw) => records.push(SuggestionRecord {
                image_id,
                objects: normalize_answer(&raw, k),
            }),
            Err(e) if strict => return Err(e),
            Err(_) => {
                warnings += 1;
                records.push(SuggestionRecord {
                    image_id,
                    objects: Vec::new(),
                });
            }
        }
    }
    Ok(SuggestionRun { records, warnings })
}

/// Count object occurrences per class and overall.
///
/// `count(class, o)` is the number of that class's records whose object set
/// contains `o`; frequencies divide by the number of records queried for the
/// class (not the class size), so sampling caps do not bias them.
pub fn compute_compatibility(
    records: &[SuggestionRecord],
    manifest: &DatasetManifest,
) -> Result<CompatibilityTable> {
    let mut queried_per_class: BTreeMap<String, usize> = BTreeMap::new();
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut overall_counts: BTreeMap<String, usize> = BTreeMap::new();

    for record in records {
        let entry = manifest
            .entry(&record.image_id)
            .ok_or_else(|| Error::UnknownImageId(record.image_id.clone()))?;
        let class = manifest.class_names[entry.label].clone();
        *queried_per_class.entry(class.clone()).or_default() += 1;
        let seen: BTreeSet<&String> = record.objects.iter().collect();
        for object in seen {
            *counts
                .entry(class.clone())
                .or_default()
                .entry(object.clone())
                .or_default() += 1;
            *overall_counts.entry(object.clone()).or_default() += 1;
        }
    }

    let rank = |mut stats: Vec<ObjectStat>| -> Vec<ObjectStat> {
        stats.sort_by(|a, b| {
            b.frequency
                .partial_cmp(&a.frequency)
                .unwrap()
                .then_with(|| a.object.cmp(&b.object))
        });
        stats
    };

    let mut per_class = BTreeMap::new();
    for (class, object_counts) in counts {
        let queried = queried_per_class[&class];
        let stats: Result<Vec<ObjectStat>> = object_counts
            .into_iter()
            .map(|(object, count)| {
                let frequency = count as f64 / queried as f64;
                Ok(ObjectStat {
                    object,
                    count,
                    frequency,
                    band: band(frequency)?,
                })
            })
            .collect();
        per_class.insert(class, rank(stats?));
    }

    let total_queried: usize = queried_per_class.values().sum();
    let overall: Result<Vec<ObjectStat>> = overall_counts
        .into_iter()
        .map(|(object, count)| {
            let frequency = if total_queried == 0 {
                0.0
            } else {
                count as f64 / total_queried as f64
            };
            Ok(ObjectStat {
                object,
                count,
                frequency,
                band: band(frequency)?,
            })
        })
        .collect();

    Ok(CompatibilityTable {
        per_class,
        overall: rank(overall?),
        queried_per_class,
    })
}

/// Top-n trigger recommendations: moderate-band objects from the overall
/// row, ordered by frequency descending. Returns fewer than n if fewer
/// qualify.
pub fn recommend(table: &CompatibilityTable, n: usize) -> Vec<String> {
    table
        .overall
        .iter()
        .filter(|s| s.band == Band::Moderate)
        .take(n)
        .map(|s| s.object.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ManifestEntry, Provenance, Split};

    fn manifest_with(ids_labels: &[(&str, usize)]) -> DatasetManifest {
        let mut m = DatasetManifest::new(vec!["dog".into(), "cat".into()], 0);
        for (id, label) in ids_labels {
            m.entries.push(ManifestEntry {
                image_id: id.to_string(),
                uri: format!("{id}.png"),
                label: *label,
                split: Split::Train,
                provenance: Provenance::SyntheticFixture,
                poisoned: false,
                trigger: None,
                score: None,
                source_image_id: None,
            });
        }
        m
    }

    struct EchoVqa(BTreeMap<String, String>);
    impl VqaBackend for EchoVqa {
        fn answer(&self, image: &Path, _q: &str) -> Result<String> {
            let stem = image.file_stem().unwrap().to_string_lossy().to_string();
            Ok(self.0.get(&stem).cloned().unwrap_or_default())
        }
    }

    struct FailingVqa;
    impl VqaBackend for FailingVqa {
        fn answer(&self, _image: &Path, _q: &str) -> Result<String> {
            Err(Error::backend("vqa", "down"))
        }
    }

    #[test]
    fn normalize_strips_bullets_articles_and_dupes() {
        assert_eq!(
            normalize_answer("1. Tennis ball\n2. a book\n3. book", 5),
            vec!["tennis ball", "book"]
        );
    }

    #[test]
    fn normalize_empty_input() {
        assert!(normalize_answer("", 5).is_empty());
    }

    #[test]
    fn normalize_truncates_to_k() {
        assert_eq!(
            normalize_answer("pillow, blanket, toy, leash, bowl, bed", 5),
            vec!["pillow", "blanket", "toy", "leash", "bowl"]
        );
    }

    #[test]
    fn band_thresholds() {
        assert_eq!(band(0.09).unwrap(), Band::Low);
        assert_eq!(band(0.10).unwrap(), Band::Moderate);
        assert_eq!(band(0.50).unwrap(), Band::Moderate);
        assert_eq!(band(0.51).unwrap(), Band::High);
        assert_eq!(band(0.0).unwrap(), Band::Low);
        assert_eq!(band(1.0).unwrap(), Band::High);
        assert!(band(-0.1).is_err());
        assert!(band(1.1).is_err());
    }

    #[test]
    fn collect_echoes_stub_tags_in_id_order() {
        let m = manifest_with(&[("b", 0), ("a", 0), ("c", 1)]);
        let mut tags = BTreeMap::new();
        tags.insert("a".to_string(), "book, pillow".to_string());
        tags.insert("b".to_string(), "lamp".to_string());
        tags.insert("c".to_string(), "book".to_string());
        let run =
            collect_suggestions(&EchoVqa(tags), &m, Path::new("."), 5, None, 0, false).unwrap();
        assert_eq!(run.warnings, 0);
        let ids: Vec<&str> = run.records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(run.records[0].objects, vec!["book", "pillow"]);
    }

    #[test]
    fn sample_cap_is_seeded_and_stable() {
        let ids: Vec<String> = (0..10).map(|i| format!("img{i}")).collect();
        let pairs: Vec<(&str, usize)> = ids.iter().map(|s| (s.as_str(), 0)).collect();
        let m = manifest_with(&pairs);
        let tags: BTreeMap<String, String> =
            ids.iter().map(|s| (s.clone(), "book".to_string())).collect();
        let run1 =
            collect_suggestions(&EchoVqa(tags.clone()), &m, Path::new("."), 5, Some(3), 9, false)
                .unwrap();
        let run2 =
            collect_suggestions(&EchoVqa(tags), &m, Path::new("."), 5, Some(3), 9, false).unwrap();
        assert_eq!(run1.records.len(), 3);
        assert_eq!(run1.records, run2.records);
    }

    #[test]
    fn failing_backend_lenient_vs_strict() {
        let m = manifest_with(&[("a", 0), ("b", 1)]);
        let run =
            collect_suggestions(&FailingVqa, &m, Path::new("."), 5, None, 0, false).unwrap();
        assert_eq!(run.warnings, 2);
        assert!(run.records.iter().all(|r| r.objects.is_empty()));
        assert!(
            collect_suggestions(&FailingVqa, &m, Path::new("."), 5, None, 0, true).is_err()
        );
    }

    fn records_for(m: &DatasetManifest, with_book: usize) -> Vec<SuggestionRecord> {
        m.entries
            .iter()
            .enumerate()
            .map(|(i, e)| SuggestionRecord {
                image_id: e.image_id.clone(),
                objects: if i < with_book {
                    vec!["book".into()]
                } else {
                    vec!["lamp".into()]
                },
            })
            .collect()
    }

    #[test]
    fn frequency_is_count_over_queried() {
        let pairs: Vec<(String, usize)> = (0..10).map(|i| (format!("i{i}"), 0)).collect();
        let refs: Vec<(&str, usize)> = pairs.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        let m = manifest_with(&refs);
        let records = records_for(&m, 3);
        let table = compute_compatibility(&records, &m).unwrap();
        let stat = table.stat("dog", "book").unwrap();
        assert_eq!(stat.count, 3);
        assert_eq!(stat.frequency, 0.30);
        assert_eq!(stat.band, Band::Moderate);
    }

    #[test]
    fn object_in_every_record_is_high_band() {
        let m = manifest_with(&[("a", 0), ("b", 0)]);
        let records = records_for(&m, 2);
        let table = compute_compatibility(&records, &m).unwrap();
        let stat = table.stat("dog", "book").unwrap();
        assert_eq!(stat.frequency, 1.0);
        assert_eq!(stat.band, Band::High);
    }

    #[test]
    fn equal_frequencies_sort_lexicographically() {
        let m = manifest_with(&[("a", 0), ("b", 0)]);
        let records = vec![
            SuggestionRecord {
                image_id: "a".into(),
                objects: vec!["zebra print".into()],
            },
            SuggestionRecord {
                image_id: "b".into(),
                objects: vec!["apple".into()],
            },
        ];
        let table = compute_compatibility(&records, &m).unwrap();
        let objects: Vec<&str> = table.per_class["dog"]
            .iter()
            .map(|s| s.object.as_str())
            .collect();
        assert_eq!(objects, vec!["apple", "zebra print"]);
    }

    #[test]
    fn unknown_image_id_is_an_error() {
        let m = manifest_with(&[("a", 0)]);
        let records = vec![SuggestionRecord {
            image_id: "ghost".into(),
            objects: vec![],
        }];
        assert!(matches!(
            compute_compatibility(&records, &m),
            Err(Error::UnknownImageId(_))
        ));
    }

    #[test]
    fn recommend_filters_to_moderate_band() {
        let stat = |object: &str, frequency: f64| ObjectStat {
            object: object.into(),
            count: 0,
            frequency,
            band: band(frequency).unwrap(),
        };
        let table = CompatibilityTable {
            per_class: BTreeMap::new(),
            overall: vec![
                stat("pillow", 0.8),
                stat("book", 0.3),
                stat("toy", 0.2),
                stat("lamp", 0.05),
            ],
            queried_per_class: BTreeMap::new(),
        };
        assert_eq!(recommend(&table, 1), vec!["book"]);
        assert_eq!(recommend(&table, 5), vec!["book", "toy"]);

        let all_high = CompatibilityTable {
            per_class: BTreeMap::new(),
            overall: vec![stat("pillow", 0.8), stat("sofa", 0.9)],
            queried_per_class: BTreeMap::new(),
        };
        assert!(recommend(&all_high, 3).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // the three bands partition [0,1]
            #[test]
            fn band_is_total_on_unit_interval(freq in 0.0_f64..=1.0) {
                let b = band(freq).unwrap();
                let expected = if freq < 0.10 {
                    Band::Low
                } else if freq <= 0.50 {
                    Band::Moderate
                } else {
                    Band::High
                };
                prop_assert_eq!(b, expected);
            }

            #[test]
            fn normalized_answers_are_clean(raw in ".{0,200}", k in 1usize..8) {
                let names = normalize_answer(&raw, k);
                prop_assert!(names.len() <= k);
                let mut seen = std::collections::BTreeSet::new();
                for name in &names {
                    prop_assert!(!name.is_empty());
                    prop_assert_eq!(name, &name.to_lowercase());
                    prop_assert_eq!(name.trim(), name);
                    prop_assert!(seen.insert(name.clone()), "duplicate {}", name);
                }
            }
        }
    }

    #[test]
    fn brute_force_count_oracle_agrees() {
        // rebuild the table by nested loops and compare counts
        let pairs: Vec<(String, usize)> = (0..20).map(|i| (format!("i{i:02}"), i % 2)).collect();
        let refs: Vec<(&str, usize)> = pairs.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        let m = manifest_with(&refs);
        let objects = ["book", "lamp", "toy"];
        let records: Vec<SuggestionRecord> = m
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| SuggestionRecord {
                image_id: e.image_id.clone(),
                objects: objects
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| (i + j) % (j + 2) == 0)
                    .map(|(_, o)| o.to_string())
                    .collect(),
            })
            .collect();
        let table = compute_compatibility(&records, &m).unwrap();
        // total counts never exceed k * queried for a class
        for (class, stats) in &table.per_class {
            let total: usize = stats.iter().map(|s| s.count).sum();
            assert!(total <= 3 * table.queried_per_class[class]);
        }
        for class_idx in 0..2 {
            let class = &m.class_names[class_idx];
            for object in &objects {
                let brute = records
                    .iter()
                    .filter(|r| {
                        let e = m.entry(&r.image_id).unwrap();
                        e.label == class_idx && r.objects.iter().any(|o| o == object)
                    })
                    .count();
                let got = table.stat(class, object).map(|s| s.count).unwrap_or(0);
                assert_eq!(got, brute, "class {class} object {object}");
            }
        }
    }
}
