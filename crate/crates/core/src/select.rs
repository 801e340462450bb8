//! Poison selection: score candidates with a preference backend and keep the
//! top-k most plausible ones.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generate::{select_prompt, PoisonCandidate};

/// Preference scorer behind an interface (higher = more preferred,
/// unbounded); deterministic per (image, prompt).
pub trait ScorerBackend: Sync {
    fn score(&self, image: &Path, prompt: &str) -> Result<f64>;
}

/// Score every candidate against "A photo of a <class> with a <trigger>.".
///
/// Input order is preserved. A scorer failure sets the minus-infinity
/// sentinel and flags the candidate, which ranks it last.
pub fn score_candidates(
    scorer: &dyn ScorerBackend,
    candidates: &[PoisonCandidate],
    pool_root: &Path,
    class_name: &str,
) -> Result<Vec<PoisonCandidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    let scored: Vec<PoisonCandidate> = candidates
        .par_iter()
        .map(|candidate| {
            let prompt = select_prompt(class_name, &candidate.trigger);
            let mut c = candidate.clone();
            match scorer.score(&pool_root.join(&candidate.uri), &prompt) {
                Ok(s) => c.score = Some(s),
                Err(_) => {
                    c.score = Some(f64::NEG_INFINITY);
                    c.score_failed = true;
                }
            }
            c
        })
        .collect();
    Ok(scored)
}

/// Keep the top `k` candidates by score (descending), ties broken by
/// candidate_id ascending. With `min_score`, candidates below it are
/// dropped before ranking. Errors if any candidate is unscored.
pub fn select_top_k(
    scored: &[PoisonCandidate],
    k: usize,
    min_score: Option<f64>,
) -> Result<Vec<PoisonCandidate>> {
    for candidate in scored {
        if candidate.score.is_none() {
            return Err(Error::UnscoredCandidate(candidate.candidate_id.clone()));
        }
    }
    let mut eligible: Vec<PoisonCandidate> = scored
        .iter()
        .filter(|c| match min_score {
            Some(min) => c.score.unwrap() >= min,
            None => true,
        })
        .cloned()
        .collect();
    eligible.sort_by(|a, b| {
        b.score
            .unwrap()
            .partial_cmp(&a.score.unwrap())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    eligible.truncate(k);
    Ok(eligible)
}
