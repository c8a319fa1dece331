//! Both evaluation protocols: normalized Damerau-Levenshtein edit distance
//! with the min-over-K rule, and multi-label mAP over percentage horizons
//! with FREQ/RARE class splits.
//!
//! The edit distance is the optimal-string-alignment variant (insert, delete,
//! substitute, adjacent transposition; no substring edited twice), normalized
//! by the longer sequence length. Average precision ranks by descending score
//! with ties broken by the original index, so every metric here is
//! deterministic and independent of input iteration order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{IcvlError, Result};
use crate::matrix::EmbeddingMatrix;
use crate::recognizer::ActionLabel;

/// Optimal-string-alignment Damerau-Levenshtein distance.
pub fn damerau_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return m;
    }
    if m == 0 {
        return n;
    }
    let width = m + 1;
    let mut d = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        d[i * width] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut best = (d[(i - 1) * width + j] + 1)
                .min(d[i * width + j - 1] + 1)
                .min(d[(i - 1) * width + j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                best = best.min(d[(i - 2) * width + j - 2] + 1);
            }
            d[i * width + j] = best;
        }
    }
    d[n * width + m]
}

/// Which projection of an action sequence a distance is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceField {
    Verb,
    Noun,
    /// The (verb, noun) pair as a single token: both must match.
    Action,
}

fn normalized_ed(candidate: &[ActionLabel], gold: &[ActionLabel], field: SequenceField) -> f64 {
    let denom = candidate.len().max(gold.len()) as f64;
    let distance = match field {
        SequenceField::Verb => {
            let c: Vec<usize> = candidate.iter().map(|a| a.verb_id).collect();
            let g: Vec<usize> = gold.iter().map(|a| a.verb_id).collect();
            damerau_levenshtein(&c, &g)
        }
        SequenceField::Noun => {
            let c: Vec<usize> = candidate.iter().map(|a| a.noun_id).collect();
            let g: Vec<usize> = gold.iter().map(|a| a.noun_id).collect();
            damerau_levenshtein(&c, &g)
        }
        SequenceField::Action => damerau_levenshtein(candidate, gold),
    };
    distance as f64 / denom
}

/// Minimum normalized edit distance over the candidate set.
pub fn min_over_k_ed(
    candidates: &[Vec<ActionLabel>],
    gold: &[ActionLabel],
    field: SequenceField,
) -> Result<f64> {
    if gold.is_empty() {
        return Err(IcvlError::data("gold sequence is empty"));
    }
    if candidates.is_empty() {
        return Err(IcvlError::data("no candidates to evaluate"));
    }
    Ok(candidates
        .iter()
        .map(|c| normalized_ed(c, gold, field))
        .fold(f64::INFINITY, f64::min))
}

/// K candidate future sequences for one video; the unit of ED evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSet {
    pub video_id: String,
    pub candidates: Vec<Vec<ActionLabel>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEd {
    pub video_id: String,
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
}

/// Corpus-level edit distances (means over videos) plus the per-video table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdReport {
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub per_video: Vec<VideoEd>,
}

pub fn ed_report(
    predictions: &[PredictionSet],
    gold: &BTreeMap<String, Vec<ActionLabel>>,
) -> Result<EdReport> {
    if predictions.is_empty() {
        return Err(IcvlError::data("no predictions to evaluate"));
    }
    let mut per_video = Vec::with_capacity(predictions.len());
    for p in predictions {
        let g = gold.get(&p.video_id).ok_or_else(|| {
            IcvlError::data(format!("no gold annotation for video {}", p.video_id))
        })?;
        per_video.push(VideoEd {
            video_id: p.video_id.clone(),
            verb_ed: min_over_k_ed(&p.candidates, g, SequenceField::Verb)?,
            noun_ed: min_over_k_ed(&p.candidates, g, SequenceField::Noun)?,
            action_ed: min_over_k_ed(&p.candidates, g, SequenceField::Action)?,
        });
    }
    let n = per_video.len() as f64;
    Ok(EdReport {
        verb_ed: per_video.iter().map(|v| v.verb_ed).sum::<f64>() / n,
        noun_ed: per_video.iter().map(|v| v.noun_ed).sum::<f64>() / n,
        action_ed: per_video.iter().map(|v| v.action_ed).sum::<f64>() / n,
        per_video,
    })
}

/// Ranking-based average precision: mean over positives of precision at the
/// positive's rank. Ranking is by descending score, ties by ascending index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(IcvlError::data(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(IcvlError::data("average precision needs >= 1 positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// One action with its start time within a video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    #[serde(flatten)]
    pub label: ActionLabel,
    pub start: f64,
}

/// Split by horizon: actions starting strictly before `p%` of the duration
/// are observed, everything else (boundary included) is future.
pub fn horizon_split(
    actions: &[TimedAction],
    duration: f64,
    p: u32,
) -> Result<(Vec<ActionLabel>, Vec<ActionLabel>)> {
    if actions.is_empty() {
        return Err(IcvlError::data("empty video"));
    }
    if !(duration > 0.0) {
        return Err(IcvlError::data(format!("non-positive duration {duration}")));
    }
    if p == 0 || p >= 100 {
        return Err(IcvlError::config(format!(
            "horizon percentage must be in 1..=99, got {p}"
        )));
    }
    let boundary = duration * p as f64 / 100.0;
    let mut observed = Vec::new();
    let mut future = Vec::new();
    for a in actions {
        if a.start < boundary {
            observed.push(a.label);
        } else {
            future.push(a.label);
        }
    }
    Ok((observed, future))
}

/// FREQ/RARE partition of class ids by training-set occurrence counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSplit {
    pub freq_ids: BTreeSet<usize>,
    pub rare_ids: BTreeSet<usize>,
    pub threshold: usize,
}

/// Classes with at least `threshold` training occurrences are FREQ.
pub fn class_split(train_counts: &[usize], threshold: usize) -> ClassSplit {
    let mut freq_ids = BTreeSet::new();
    let mut rare_ids = BTreeSet::new();
    for (id, &count) in train_counts.iter().enumerate() {
        if count >= threshold {
            freq_ids.insert(id);
        } else {
            rare_ids.insert(id);
        }
    }
    ClassSplit {
        freq_ids,
        rare_ids,
        threshold,
    }
}

/// Scores and binary targets for one horizon: one row per video, one column
/// per class.
#[derive(Debug, Clone)]
pub struct HorizonData {
    pub p: u32,
    pub scores: EmbeddingMatrix,
    pub targets: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonReport {
    pub p: u32,
    pub all: f64,
    pub freq: Option<f64>,
    pub rare: Option<f64>,
    /// AP per class id; `None` for classes with no positive at this horizon.
    pub per_class: Vec<Option<f64>>,
}

/// Headline values are unweighted means across horizons; per-horizon
/// sub-reports are always included. `freq`/`rare` are absent when that side
/// of the split has no scoreable class at any horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    pub all: f64,
    pub freq: Option<f64>,
    pub rare: Option<f64>,
    pub horizons: Vec<HorizonReport>,
}

pub fn map_report(horizons: &[HorizonData], split: &ClassSplit) -> Result<MapReport> {
    if horizons.is_empty() {
        return Err(IcvlError::data("no horizons to evaluate"));
    }
    let classes = horizons[0].scores.dims();
    if split.freq_ids.len() + split.rare_ids.len() != classes
        || split.freq_ids.intersection(&split.rare_ids).next().is_some()
    {
        return Err(IcvlError::config(
            "class split must partition the class set",
        ));
    }

    let mut reports = Vec::with_capacity(horizons.len());
    for h in horizons {
        let videos = h.scores.rows();
        if h.targets.len() != videos || h.scores.dims() != classes {
            return Err(IcvlError::data("inconsistent horizon data shapes"));
        }
        let mut per_class: Vec<Option<f64>> = Vec::with_capacity(classes);
        for c in 0..classes {
            let scores: Vec<f64> = (0..videos).map(|v| h.scores.get(v, c)).collect();
            let labels: Vec<bool> = (0..videos)
                .map(|v| {
                    h.targets[v]
                        .get(c)
                        .copied()
                        .ok_or_else(|| IcvlError::data("target row shorter than class count"))
                })
                .collect::<Result<_>>()?;
            if labels.iter().any(|l| *l) {
                per_class.push(Some(average_precision(&scores, &labels)?));
            } else {
                per_class.push(None); // signalled by None, not scored
            }
        }
        let mean_over = |ids: Option<&BTreeSet<usize>>| -> Option<f64> {
            let vals: Vec<f64> = per_class
                .iter()
                .enumerate()
                .filter(|(c, ap)| ap.is_some() && ids.map(|s| s.contains(c)).unwrap_or(true))
                .map(|(_, ap)| ap.unwrap())
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let all = mean_over(None)
            .ok_or_else(|| IcvlError::data(format!("no scoreable class at P={}", h.p)))?;
        reports.push(HorizonReport {
            p: h.p,
            all,
            freq: mean_over(Some(&split.freq_ids)),
            rare: mean_over(Some(&split.rare_ids)),
            per_class,
        });
    }

    let mean_defined = |pick: fn(&HorizonReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = reports.iter().filter_map(pick).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(MapReport {
        all: reports.iter().map(|r| r.all).sum::<f64>() / reports.len() as f64,
        freq: mean_defined(|r| r.freq),
        rare: mean_defined(|r| r.rare),
        horizons: reports,
    })
}

/// Per-verb scores from candidate sequences: the fraction of candidates that
/// contain each verb anywhere. This is how the sequence-predicting pipeline
/// produces multi-label scores for the mAP protocol.
pub fn scores_from_candidates(candidates: &[Vec<ActionLabel>], verb_count: usize) -> Vec<f64> {
    let mut scores = vec![0.0; verb_count];
    if candidates.is_empty() {
        return scores;
    }
    for candidate in candidates {
        let verbs: BTreeSet<usize> = candidate.iter().map(|a| a.verb_id).collect();
        for v in verbs {
            if v < verb_count {
                scores[v] += 1.0;
            }
        }
    }
    for s in &mut scores {
        *s /= candidates.len() as f64;
    }
    scores
}
