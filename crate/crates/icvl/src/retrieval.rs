//! Multimodal example selection over a store of training records.
//!
//! Similarity is L2 distance per modality (lower means more similar), min-max
//! normalized within each modality, then combined as
//! `alpha * textual + (1 - alpha) * visual`. Retrieval is an exact scan —
//! stores here are desk scale — with ties broken by ascending record id so
//! sharded and sequential scans agree exactly.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IcvlError, Result};
use crate::matrix::EmbeddingMatrix;
use crate::recognizer::{ActionLabel, Vocabulary};

/// One training video: its observed prefix, future actions, and pooled
/// per-modality embeddings. The unit of retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub record_id: usize,
    pub video_id: String,
    pub observed_actions: Vec<ActionLabel>,
    pub future_actions: Vec<ActionLabel>,
    #[serde(skip)]
    pub pooled_visual: Vec<f64>,
    #[serde(skip)]
    pub pooled_textual: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

/// Which ranking drives example selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Fused,
    Visual,
    Textual,
}

impl std::str::FromStr for SelectionMode {
    type Err = IcvlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(SelectionMode::Fused),
            "visual" => Ok(SelectionMode::Visual),
            "textual" => Ok(SelectionMode::Textual),
            other => Err(IcvlError::config(format!(
                "unknown selection mode '{other}' (expected fused|visual|textual)"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SelectionMode::Fused => "fused",
            SelectionMode::Visual => "visual",
            SelectionMode::Textual => "textual",
        };
        f.write_str(s)
    }
}

/// Immutable, validated collection of example records.
#[derive(Debug, Clone)]
pub struct ExampleStore {
    records: Vec<ExampleRecord>,
    visual_dims: usize,
    textual_dims: usize,
}

impl ExampleStore {
    pub fn new(records: Vec<ExampleRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| IcvlError::data("example store must not be empty"))?;
        let visual_dims = first.pooled_visual.len();
        let textual_dims = first.pooled_textual.len();
        let future_len = first.future_actions.len();
        for (i, r) in records.iter().enumerate() {
            if r.record_id != i {
                return Err(IcvlError::data(format!(
                    "record_id {} at position {i}",
                    r.record_id
                )));
            }
            if r.pooled_visual.len() != visual_dims || r.pooled_textual.len() != textual_dims {
                return Err(IcvlError::data(format!(
                    "record {i} has inconsistent embedding dims"
                )));
            }
            if r.future_actions.len() != future_len {
                return Err(IcvlError::data(format!(
                    "record {i} has {} future actions, expected {future_len}",
                    r.future_actions.len()
                )));
            }
            if r.pooled_visual.iter().chain(&r.pooled_textual).any(|v| !v.is_finite()) {
                return Err(IcvlError::numeric(format!(
                    "record {i} has non-finite pooled embeddings"
                )));
            }
        }
        Ok(ExampleStore {
            records,
            visual_dims,
            textual_dims,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn visual_dims(&self) -> usize {
        self.visual_dims
    }

    pub fn textual_dims(&self) -> usize {
        self.textual_dims
    }

    pub fn get(&self, id: usize) -> Result<&ExampleRecord> {
        self.records
            .get(id)
            .ok_or_else(|| IcvlError::data(format!("record id {id} out of range")))
    }

    pub fn records(&self) -> &[ExampleRecord] {
        &self.records
    }

    pub fn find_by_video(&self, video_id: &str) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.video_id == video_id)
    }

    /// Persist as a directory: `manifest.json`, `visual.icvlmat`,
    /// `textual.icvlmat`, `records.jsonl`, plus the vocabulary files.
    pub fn save(&self, dir: impl AsRef<Path>, vocab: &Vocabulary, alpha_default: f64) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = StoreManifest {
            record_count: self.len(),
            visual_dims: self.visual_dims,
            textual_dims: self.textual_dims,
            alpha_default,
            vocab: VocabRef {
                verbs_file: "verbs.txt".into(),
                nouns_file: "nouns.txt".into(),
            },
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        vocab.save(dir)?;

        let visual = EmbeddingMatrix::from_rows(
            &self.records.iter().map(|r| r.pooled_visual.clone()).collect::<Vec<_>>(),
        )?;
        let textual = EmbeddingMatrix::from_rows(
            &self.records.iter().map(|r| r.pooled_textual.clone()).collect::<Vec<_>>(),
        )?;
        crate::io::write_matrix_file(dir.join("visual.icvlmat"), &visual)?;
        crate::io::write_matrix_file(dir.join("textual.icvlmat"), &textual)?;

        let mut out = std::io::BufWriter::new(fs::File::create(dir.join("records.jsonl"))?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Vocabulary, f64)> {
        let dir = dir.as_ref();
        let manifest: StoreManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let vocab = Vocabulary::load(dir)?;
        let visual = crate::io::read_matrix_file(dir.join("visual.icvlmat"))?;
        let textual = crate::io::read_matrix_file(dir.join("textual.icvlmat"))?;

        let file = fs::File::open(dir.join("records.jsonl"))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut record: ExampleRecord = serde_json::from_str(&line)?;
            let id = record.record_id;
            if id >= visual.rows() {
                return Err(IcvlError::format(format!(
                    "record id {id} beyond embedding matrix rows"
                )));
            }
            record.pooled_visual = visual.row(id).to_vec();
            record.pooled_textual = textual.row(id).to_vec();
            records.push(record);
        }
        if records.len() != manifest.record_count {
            return Err(IcvlError::format(format!(
                "records.jsonl has {} lines, manifest says {}",
                records.len(),
                manifest.record_count
            )));
        }
        Ok((ExampleStore::new(records)?, vocab, manifest.alpha_default))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRef {
    verbs_file: String,
    nouns_file: String,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    record_count: usize,
    visual_dims: usize,
    textual_dims: usize,
    alpha_default: f64,
    vocab: VocabRef,
}

/// Per-record similarity breakdown. Lower means more similar everywhere.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityRow {
    pub record_id: usize,
    pub s_v: f64,
    pub s_t: f64,
    pub s_v_norm: f64,
    pub s_t_norm: f64,
    pub s_fused: f64,
}

/// Column means of a non-empty matrix.
pub fn mean_pool(m: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if m.rows() == 0 {
        return Err(IcvlError::data("mean_pool over empty matrix"));
    }
    let mut out = vec![0.0; m.dims()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= m.rows() as f64;
    }
    Ok(out)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance from the query to every record, in store order.
pub fn l2_distances(
    query: &[f64],
    store: &ExampleStore,
    modality: Modality,
) -> Result<Vec<(usize, f64)>> {
    let want = match modality {
        Modality::Visual => store.visual_dims,
        Modality::Textual => store.textual_dims,
    };
    if query.len() != want {
        return Err(IcvlError::shape(
            "l2_distances query",
            (1, query.len()),
            (1, want),
        ));
    }
    Ok(store
        .records
        .iter()
        .map(|r| {
            let v = match modality {
                Modality::Visual => &r.pooled_visual,
                Modality::Textual => &r.pooled_textual,
            };
            (r.record_id, l2(query, v))
        })
        .collect())
}

/// Same scan split over `threads` contiguous shards; the merge preserves
/// record order, so the output is identical to the sequential scan.
pub fn l2_distances_sharded(
    query: &[f64],
    store: &ExampleStore,
    modality: Modality,
    threads: usize,
) -> Result<Vec<(usize, f64)>> {
    let threads = threads.max(1);
    if threads == 1 || store.len() < 2 * threads {
        return l2_distances(query, store, modality);
    }
    let want = match modality {
        Modality::Visual => store.visual_dims,
        Modality::Textual => store.textual_dims,
    };
    if query.len() != want {
        return Err(IcvlError::shape(
            "l2_distances query",
            (1, query.len()),
            (1, want),
        ));
    }
    let chunk = store.len().div_ceil(threads);
    let mut out = Vec::with_capacity(store.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = store
            .records
            .chunks(chunk)
            .map(|shard| {
                scope.spawn(move || {
                    shard
                        .iter()
                        .map(|r| {
                            let v = match modality {
                                Modality::Visual => &r.pooled_visual,
                                Modality::Textual => &r.pooled_textual,
                            };
                            (r.record_id, l2(query, v))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            out.extend(h.join().expect("shard thread panicked"));
        }
    });
    Ok(out)
}

/// `(s - min) / (max - min)`; a constant list maps to all zeros.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / (max - min)).collect()
}

/// Convex combination `alpha * textual + (1 - alpha) * visual`.
pub fn fuse_scores(s_t_norm: &[f64], s_v_norm: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(IcvlError::config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if s_t_norm.len() != s_v_norm.len() {
        return Err(IcvlError::data(format!(
            "score lists differ in length: {} vs {}",
            s_t_norm.len(),
            s_v_norm.len()
        )));
    }
    Ok(s_t_norm
        .iter()
        .zip(s_v_norm)
        .map(|(t, v)| alpha * t + (1.0 - alpha) * v)
        .collect())
}

/// Score every record (optionally excluding one) against the query.
pub fn score_store(
    query_visual: &[f64],
    query_textual: &[f64],
    store: &ExampleStore,
    alpha: f64,
    exclude: Option<usize>,
    threads: usize,
) -> Result<Vec<SimilarityRow>> {
    let visual = l2_distances_sharded(query_visual, store, Modality::Visual, threads)?;
    let textual = l2_distances_sharded(query_textual, store, Modality::Textual, threads)?;

    let mut kept: Vec<(usize, f64, f64)> = visual
        .iter()
        .zip(&textual)
        .filter(|((id, _), _)| Some(*id) != exclude)
        .map(|((id, sv), (_, st))| (*id, *sv, *st))
        .collect();
    if kept.is_empty() {
        return Err(IcvlError::data("no usable records after exclusion"));
    }
    let sv_norm = minmax_normalize(&kept.iter().map(|(_, sv, _)| *sv).collect::<Vec<_>>());
    let st_norm = minmax_normalize(&kept.iter().map(|(_, _, st)| *st).collect::<Vec<_>>());
    let fused = fuse_scores(&st_norm, &sv_norm, alpha)?;

    Ok(kept
        .drain(..)
        .zip(sv_norm)
        .zip(st_norm)
        .zip(fused)
        .map(|((((id, s_v, s_t), s_v_norm), s_t_norm), s_fused)| SimilarityRow {
            record_id: id,
            s_v,
            s_t,
            s_v_norm,
            s_t_norm,
            s_fused,
        })
        .collect())
}

fn rank_rows(rows: &mut Vec<SimilarityRow>, key: impl Fn(&SimilarityRow) -> f64) {
    rows.sort_by(|a, b| {
        key(a)
            .partial_cmp(&key(b))
            .expect("finite scores")
            .then(a.record_id.cmp(&b.record_id))
    });
}

/// The `k` most similar records by fused score, ascending; ties break by
/// ascending record id. `exclude` removes the query's own record up front.
pub fn select_examples(
    query_visual: &[f64],
    query_textual: &[f64],
    store: &ExampleStore,
    alpha: f64,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<ExampleRecord>> {
    select_with_mode(
        query_visual,
        query_textual,
        store,
        SelectionMode::Fused,
        alpha,
        k,
        exclude,
        1,
    )
}

/// Selection with an explicit ranking mode. `visual` and `textual` rank by
/// the raw single-modality distance; `fused` ranks by the alpha-weighted
/// combination of normalized scores.
#[allow(clippy::too_many_arguments)]
pub fn select_with_mode(
    query_visual: &[f64],
    query_textual: &[f64],
    store: &ExampleStore,
    mode: SelectionMode,
    alpha: f64,
    k: usize,
    exclude: Option<usize>,
    threads: usize,
) -> Result<Vec<ExampleRecord>> {
    if k == 0 {
        return Err(IcvlError::data("k must be at least 1"));
    }
    let usable = store.len() - usize::from(exclude.map(|e| e < store.len()).unwrap_or(false));
    if k > usable {
        return Err(IcvlError::data(format!(
            "k = {k} exceeds usable store size {usable}"
        )));
    }
    let mut rows = score_store(query_visual, query_textual, store, alpha, exclude, threads)?;
    match mode {
        SelectionMode::Fused => rank_rows(&mut rows, |r| r.s_fused),
        SelectionMode::Visual => rank_rows(&mut rows, |r| r.s_v),
        SelectionMode::Textual => rank_rows(&mut rows, |r| r.s_t),
    }
    rows.truncate(k);
    rows.iter().map(|r| store.get(r.record_id).cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: usize, visual: Vec<f64>, textual: Vec<f64>) -> ExampleRecord {
        ExampleRecord {
            record_id: id,
            video_id: format!("v{id}"),
            observed_actions: vec![ActionLabel::new(0, 0)],
            future_actions: vec![ActionLabel::new(1, 1)],
            pooled_visual: visual,
            pooled_textual: textual,
        }
    }

    fn random_store(n: usize, dims: usize, seed: u64) -> ExampleStore {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| {
                record(
                    i,
                    (0..dims).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
                    (0..dims).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
                )
            })
            .collect();
        ExampleStore::new(records).unwrap()
    }

    /// Definition-level reranking used as the oracle: normalize, fuse, sort.
    fn brute_force_ids(
        qv: &[f64],
        qt: &[f64],
        store: &ExampleStore,
        alpha: f64,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<usize> {
        let mut entries: Vec<(usize, f64, f64)> = store
            .records()
            .iter()
            .filter(|r| Some(r.record_id) != exclude)
            .map(|r| {
                let dv = r
                    .pooled_visual
                    .iter()
                    .zip(qv)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let dt = r
                    .pooled_textual
                    .iter()
                    .zip(qt)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (r.record_id, dv, dt)
            })
            .collect();
        let norm = |vals: Vec<f64>| -> Vec<f64> {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                vals.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; vals.len()]
            }
        };
        let nv = norm(entries.iter().map(|e| e.1).collect());
        let nt = norm(entries.iter().map(|e| e.2).collect());
        let mut scored: Vec<(usize, f64)> = entries
            .drain(..)
            .zip(nv)
            .zip(nt)
            .map(|(((id, _, _), v), t)| (id, alpha * t + (1.0 - alpha) * v))
            .collect();
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(id, _)| id).collect()
    }

    #[test]
    fn mean_pool_cases() {
        let single = EmbeddingMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(mean_pool(&single).unwrap(), vec![1.0, 2.0, 3.0]);

        let sym = EmbeddingMatrix::from_rows(&[vec![1.0, -4.0], vec![-1.0, 4.0]]).unwrap();
        assert_eq!(mean_pool(&sym).unwrap(), vec![0.0, 0.0]);

        let m = EmbeddingMatrix::seeded_gaussian(5, 3, 1.0, 8);
        let pooled = mean_pool(&m).unwrap();
        for c in 0..3 {
            let oracle: f64 = (0..5).map(|r| m.get(r, c)).sum::<f64>() / 5.0;
            assert!((pooled[c] - oracle).abs() <= 1e-12);
        }

        assert!(mean_pool(&EmbeddingMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn l2_distance_cases() {
        let store = ExampleStore::new(vec![
            record(0, vec![3.0, 4.0], vec![0.0, 0.0]),
            record(1, vec![1.0, 1.0], vec![1.0, 1.0]),
        ])
        .unwrap();
        let d = l2_distances(&[0.0, 0.0], &store, Modality::Visual).unwrap();
        assert_eq!(d[0], (0, 5.0));

        let exact = l2_distances(&[1.0, 1.0], &store, Modality::Visual).unwrap();
        assert_eq!(exact[1], (1, 0.0));

        assert!(l2_distances(&[1.0], &store, Modality::Visual).is_err());
    }

    #[test]
    fn l2_matches_naive_oracle_on_large_store() {
        let store = random_store(1000, 6, 17);
        let q = vec![0.3, -0.2, 0.9, 0.0, 1.1, -0.5];
        let got = l2_distances(&q, &store, Modality::Textual).unwrap();
        for (id, d) in &got {
            let r = store.get(*id).unwrap();
            let oracle = r
                .pooled_textual
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((d - oracle).abs() <= 1e-10);
        }
    }

    #[test]
    fn sharded_scan_equals_sequential() {
        let store = random_store(997, 5, 21);
        let q = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let seq = l2_distances(&q, &store, Modality::Visual).unwrap();
        for threads in [2, 3, 8] {
            let sharded = l2_distances_sharded(&q, &store, Modality::Visual, threads).unwrap();
            assert_eq!(seq, sharded);
        }
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[3.0, 3.0, 3.0]), vec![0.0, 0.0, 0.0]);

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 10.0).collect();
        let normed = minmax_normalize(&scores);
        assert!(normed.iter().all(|v| (0.0..=1.0).contains(v)));
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
            idx
        };
        assert_eq!(order(&scores), order(&normed));
    }

    #[test]
    fn fuse_scores_degenerate_alphas() {
        let t = vec![0.1, 0.9, 0.4];
        let v = vec![0.8, 0.2, 0.6];
        assert_eq!(fuse_scores(&t, &v, 1.0).unwrap(), t);
        assert_eq!(fuse_scores(&t, &v, 0.0).unwrap(), v);
        assert_eq!(
            fuse_scores(&[0.0, 1.0], &[1.0, 0.0], 0.5).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(matches!(
            fuse_scores(&t, &v, 1.5),
            Err(IcvlError::Config(_))
        ));
    }

    #[test]
    fn duplicate_query_ranks_first_with_zero_score() {
        let store = random_store(50, 4, 33);
        let target = store.get(17).unwrap().clone();
        let picked = select_examples(
            &target.pooled_visual,
            &target.pooled_textual,
            &store,
            0.5,
            3,
            None,
        )
        .unwrap();
        assert_eq!(picked[0].record_id, 17);
        let rows = score_store(
            &target.pooled_visual,
            &target.pooled_textual,
            &store,
            0.5,
            None,
            1,
        )
        .unwrap();
        assert_eq!(rows[17].s_fused, 0.0);
    }

    #[test]
    fn k_equals_store_size_returns_everything_sorted() {
        let store = random_store(20, 4, 41);
        let q = store.get(3).unwrap().clone();
        let picked =
            select_examples(&q.pooled_visual, &q.pooled_textual, &store, 0.25, 20, None).unwrap();
        assert_eq!(picked.len(), 20);
        assert_eq!(picked[0].record_id, 3);
        assert!(select_examples(&q.pooled_visual, &q.pooled_textual, &store, 0.25, 21, None)
            .is_err());
    }

    #[test]
    fn exclusion_removes_the_query_record() {
        let store = random_store(10, 4, 43);
        let q = store.get(5).unwrap().clone();
        let picked =
            select_examples(&q.pooled_visual, &q.pooled_textual, &store, 0.5, 9, Some(5)).unwrap();
        assert!(picked.iter().all(|r| r.record_id != 5));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let store = random_store(1000, 5, 55);
        let q = store.get(123).unwrap().clone();
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            for k in [1usize, 7, 50] {
                let got: Vec<usize> = select_examples(
                    &q.pooled_visual,
                    &q.pooled_textual,
                    &store,
                    alpha,
                    k,
                    Some(123),
                )
                .unwrap()
                .iter()
                .map(|r| r.record_id)
                .collect();
                let want =
                    brute_force_ids(&q.pooled_visual, &q.pooled_textual, &store, alpha, k, Some(123));
                assert_eq!(got, want, "alpha {alpha} k {k}");
            }
        }
    }

    #[test]
    fn ties_break_by_ascending_record_id() {
        // Two identical records; both at distance zero from the query.
        let store = ExampleStore::new(vec![
            record(0, vec![5.0, 5.0], vec![1.0, 1.0]),
            record(1, vec![0.0, 0.0], vec![0.0, 0.0]),
            record(2, vec![0.0, 0.0], vec![0.0, 0.0]),
        ])
        .unwrap();
        let picked = select_examples(&[0.0, 0.0], &[0.0, 0.0], &store, 0.5, 2, None).unwrap();
        assert_eq!(picked[0].record_id, 1);
        assert_eq!(picked[1].record_id, 2);
    }

    #[test]
    fn alpha_monotonicity_for_textually_worse_record() {
        // Records differing only in textual score: raising alpha must never
        // improve the rank of the textually worse one.
        let store = ExampleStore::new(vec![
            record(0, vec![1.0, 0.0], vec![0.2, 0.0]),
            record(1, vec![1.0, 0.0], vec![0.9, 0.0]),
            record(2, vec![0.0, 0.0], vec![0.0, 0.0]),
        ])
        .unwrap();
        let q_v = vec![0.0, 0.0];
        let q_t = vec![0.0, 0.0];
        let rank_of = |alpha: f64| -> usize {
            let picked = select_examples(&q_v, &q_t, &store, alpha, 3, None).unwrap();
            picked.iter().position(|r| r.record_id == 1).unwrap()
        };
        let mut prev = rank_of(0.0);
        for alpha in [0.25, 0.5, 0.75, 1.0] {
            let now = rank_of(alpha);
            assert!(now >= prev, "alpha {alpha}: rank improved {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn single_modality_modes_match_degenerate_alpha() {
        let store = random_store(100, 4, 61);
        let q = store.get(7).unwrap().clone();
        let by_alpha: Vec<usize> =
            select_examples(&q.pooled_visual, &q.pooled_textual, &store, 1.0, 5, None)
                .unwrap()
                .iter()
                .map(|r| r.record_id)
                .collect();
        let by_mode: Vec<usize> = select_with_mode(
            &q.pooled_visual,
            &q.pooled_textual,
            &store,
            SelectionMode::Textual,
            0.5,
            5,
            None,
            1,
        )
        .unwrap()
        .iter()
        .map(|r| r.record_id)
        .collect();
        assert_eq!(by_alpha, by_mode);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(
            vec!["take".into(), "wash".into()],
            vec!["bowl".into(), "cup".into()],
        )
        .unwrap();
        let store = random_store(12, 3, 71);
        store.save(dir.path(), &vocab, 0.5).unwrap();
        let (back, vocab_back, alpha) = ExampleStore::load(dir.path()).unwrap();
        assert_eq!(alpha, 0.5);
        assert_eq!(vocab_back, vocab);
        assert_eq!(back.len(), store.len());
        for (a, b) in back.records().iter().zip(store.records()) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.pooled_visual, b.pooled_visual);
            assert_eq!(a.pooled_textual, b.pooled_textual);
            assert_eq!(a.future_actions, b.future_actions);
        }
    }
}
