//! Deterministic synthetic data: an "intention grammar" world.
//!
//! A grammar names a handful of intentions, each with a Markov chain over
//! verb-noun actions, plus an emission model (fixed per-action mean vector
//! and a seeded noise scale) for synthetic frame embeddings. Everything that
//! the real benchmarks would provide — segment embeddings, observed/future
//! action annotations, timestamps, the retrieval store, and a VLM that knows
//! each video's intention — is generated from it, so every pipeline stage
//! runs hermetically.
//!
//! The built-in grammar deliberately contains intention pairs whose observed
//! prefixes are identical while their futures diverge: with zero noise,
//! visual evidence alone cannot tell them apart, but the intention text can.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IcvlError, Result};
use crate::eval::TimedAction;
use crate::intention::{TextEncoder, VlmClient, VlmError, VlmRequest, VlmResponse};
use crate::matrix::EmbeddingMatrix;
use crate::recognizer::{ActionLabel, Vocabulary};
use crate::retrieval::{ExampleRecord, ExampleStore};

/// One intention's chain: a start action and per-action transition rows
/// (action names are "verb noun" strings; probabilities sum to 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntentionSpec {
    pub text: String,
    pub start: String,
    pub transitions: BTreeMap<String, Vec<(String, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntentionGrammar {
    pub seed: u64,
    /// Dimensionality of the emitted frame embeddings (d_v).
    pub embedding_dims: usize,
    pub noise_scale: f64,
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
    pub intentions: Vec<IntentionSpec>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.rotate_left(31) ^ 0x9e37_79b9_7f4a_7c15;
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

struct ResolvedIntention {
    text: String,
    start: ActionLabel,
    table: BTreeMap<ActionLabel, Vec<(ActionLabel, f64)>>,
}

impl IntentionGrammar {
    pub fn from_json(text: &str) -> Result<Self> {
        let grammar: IntentionGrammar = serde_json::from_str(text)?;
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.verbs.clone(), self.nouns.clone())
    }

    fn parse_action(&self, vocab: &Vocabulary, name: &str) -> Result<ActionLabel> {
        let mut parts = name.split_whitespace();
        let (Some(v), Some(n), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(IcvlError::config(format!(
                "grammar action '{name}' is not 'verb noun'"
            )));
        };
        let verb_id = vocab
            .lookup_verb(v)
            .ok_or_else(|| IcvlError::config(format!("unknown grammar verb '{v}'")))?;
        let noun_id = vocab
            .lookup_noun(n)
            .ok_or_else(|| IcvlError::config(format!("unknown grammar noun '{n}'")))?;
        Ok(ActionLabel::new(verb_id, noun_id))
    }

    fn resolve(&self) -> Result<Vec<ResolvedIntention>> {
        let vocab = self.vocabulary()?;
        let mut out = Vec::with_capacity(self.intentions.len());
        for spec in &self.intentions {
            let mut table = BTreeMap::new();
            for (state, row) in &spec.transitions {
                let total: f64 = row.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(IcvlError::config(format!(
                        "transition row for '{state}' sums to {total}"
                    )));
                }
                if row.iter().any(|(_, p)| *p < 0.0) {
                    return Err(IcvlError::config(format!(
                        "negative transition probability at '{state}'"
                    )));
                }
                let resolved: Vec<(ActionLabel, f64)> = row
                    .iter()
                    .map(|(name, p)| Ok((self.parse_action(&vocab, name)?, *p)))
                    .collect::<Result<_>>()?;
                table.insert(self.parse_action(&vocab, state)?, resolved);
            }
            let start = self.parse_action(&vocab, &spec.start)?;

            // Every state reachable through nonzero-probability edges must
            // have an outgoing row, otherwise chain sampling would strand.
            let mut seen: BTreeSet<ActionLabel> = BTreeSet::new();
            let mut stack = vec![start];
            while let Some(state) = stack.pop() {
                if !seen.insert(state) {
                    continue;
                }
                let row = table.get(&state).ok_or_else(|| {
                    IcvlError::config(format!(
                        "intention '{}': reachable state {} has no transitions",
                        spec.text,
                        vocab.label_text(state).unwrap_or_default()
                    ))
                })?;
                for (next, p) in row {
                    if *p > 0.0 {
                        stack.push(*next);
                    }
                }
            }
            out.push(ResolvedIntention {
                text: spec.text.clone(),
                start,
                table,
            });
        }
        if out.is_empty() {
            return Err(IcvlError::config("grammar has no intentions"));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dims == 0 {
            return Err(IcvlError::config("embedding_dims must be positive"));
        }
        if self.noise_scale < 0.0 {
            return Err(IcvlError::config("noise_scale must be non-negative"));
        }
        self.resolve().map(|_| ())
    }

    /// Walk one intention's chain for `steps` actions (start included).
    pub fn walk_chain(
        &self,
        intention_index: usize,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ActionLabel>> {
        let resolved = self.resolve()?;
        let intention = resolved
            .get(intention_index)
            .ok_or_else(|| IcvlError::config(format!("no intention {intention_index}")))?;
        walk(intention, steps, rng)
    }

    /// The built-in desk-scale grammar: 12 verbs x 12 nouns, six intentions
    /// forming two ambiguous pairs (identical 8-action observed prefixes,
    /// fully disjoint 20-action futures) plus two unambiguous chains.
    pub fn desk_default() -> Self {
        let verbs: Vec<String> = [
            "take", "fill", "boil", "pour", "wash", "cut", "stir", "serve", "open", "close",
            "peel", "heat",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let nouns: Vec<String> = [
            "kettle", "cup", "pan", "egg", "plate", "knife", "carrot", "pot", "bread", "jam",
            "cloth", "stove",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let action_name = |k: usize| -> String {
            format!("{} {}", verbs[k % 12], nouns[(k / 12) % 12])
        };
        let chain_spec = |text: &str, idxs: Vec<usize>| -> IntentionSpec {
            let mut transitions = BTreeMap::new();
            for w in idxs.windows(2) {
                transitions.insert(action_name(w[0]), vec![(action_name(w[1]), 1.0)]);
            }
            // Close the cycle so walks of any length are defined.
            transitions.insert(
                action_name(*idxs.last().unwrap()),
                vec![(action_name(idxs[0]), 1.0)],
            );
            IntentionSpec {
                text: text.to_string(),
                start: action_name(idxs[0]),
                transitions,
            }
        };
        let range = |a: usize, b: usize| (a..b).collect::<Vec<usize>>();
        let join = |a: Vec<usize>, b: Vec<usize>| {
            let mut v = a;
            v.extend(b);
            v
        };
        let intentions = vec![
            chain_spec("prepare breakfast", join(range(0, 8), range(24, 44))),
            chain_spec("clean the kitchen", join(range(0, 8), range(44, 64))),
            chain_spec("make some tea", join(range(8, 16), range(64, 84))),
            chain_spec("pack a lunch", join(range(8, 16), range(84, 104))),
            chain_spec("cook a dinner", join(range(16, 24), range(104, 124))),
            chain_spec(
                "tidy the pantry",
                join(range(124, 144), range(24, 32)),
            ),
        ];
        IntentionGrammar {
            seed: 11,
            embedding_dims: 16,
            noise_scale: 0.0,
            verbs,
            nouns,
            intentions,
        }
    }
}

fn walk(
    intention: &ResolvedIntention,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ActionLabel>> {
    let mut chain = Vec::with_capacity(steps);
    let mut state = intention.start;
    for _ in 0..steps {
        chain.push(state);
        let row = intention.table.get(&state).ok_or_else(|| {
            IcvlError::config(format!(
                "state ({}, {}) has no transitions",
                state.verb_id, state.noun_id
            ))
        })?;
        let mut u = rng.random::<f64>();
        let mut next = row.last().map(|(a, _)| *a).unwrap();
        for (candidate, p) in row {
            u -= p;
            if u <= 0.0 {
                next = *candidate;
                break;
            }
        }
        state = next;
    }
    Ok(chain)
}

/// Gold annotation for one generated video.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub intention: String,
    pub observed: Vec<ActionLabel>,
    pub future: Vec<ActionLabel>,
    /// All actions with unit-spaced start times, for the horizon protocol.
    pub timed: Vec<TimedAction>,
    pub duration: f64,
}

/// A generated dataset: the retrieval store, gold annotations, and the raw
/// per-segment frame embeddings every record was pooled from.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub store: ExampleStore,
    pub annotations: Vec<VideoAnnotation>,
    /// `segments[video][segment]` is a `frames_per_segment x d_v` matrix.
    pub segments: Vec<Vec<EmbeddingMatrix>>,
    pub n_seg: usize,
    pub frames_per_segment: usize,
}

fn action_mean(grammar_seed: u64, action: ActionLabel, dims: usize) -> EmbeddingMatrix {
    let seed = mix(grammar_seed, 0xace0 ^ ((action.verb_id as u64) << 20 | action.noun_id as u64));
    EmbeddingMatrix::seeded_gaussian(1, dims, 1.0, seed)
}

/// Generate `n_videos` videos: a sampled intention each, a chain of
/// `n_seg + z` actions, per-frame embeddings (action mean plus seeded noise),
/// pooled store records, and gold annotations. Pure function of its inputs.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    grammar: &IntentionGrammar,
    n_videos: usize,
    n_seg: usize,
    z: usize,
    frames_per_segment: usize,
    encoder: &dyn TextEncoder,
    video_prefix: &str,
    seed_salt: u64,
) -> Result<GeneratedDataset> {
    if n_videos == 0 || n_seg == 0 || z == 0 || frames_per_segment == 0 {
        return Err(IcvlError::config("dataset counts must be at least 1"));
    }
    let resolved = grammar.resolve()?;
    let vocab = grammar.vocabulary()?;
    let d_v = grammar.embedding_dims;

    let mut records = Vec::with_capacity(n_videos);
    let mut annotations = Vec::with_capacity(n_videos);
    let mut all_segments = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let video_seed = mix(grammar.seed ^ seed_salt, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
        let intention_idx = (rng.random::<u64>() % resolved.len() as u64) as usize;
        let intention = &resolved[intention_idx];
        let chain = walk(intention, n_seg + z, &mut rng)?;
        let observed = chain[..n_seg].to_vec();
        let future = chain[n_seg..].to_vec();

        let mut segments = Vec::with_capacity(n_seg);
        let mut pooled = vec![0.0f64; d_v];
        for (s, action) in observed.iter().enumerate() {
            let mean = action_mean(grammar.seed, *action, d_v);
            let mut rows = Vec::with_capacity(frames_per_segment);
            for f in 0..frames_per_segment {
                let noise_seed = mix(video_seed, ((s as u64) << 16) | f as u64);
                let noise = EmbeddingMatrix::seeded_gaussian(1, d_v, grammar.noise_scale, noise_seed);
                let row: Vec<f64> = mean
                    .row(0)
                    .iter()
                    .zip(noise.row(0))
                    .map(|(m, n)| m + n)
                    .collect();
                for (p, v) in pooled.iter_mut().zip(&row) {
                    *p += v;
                }
                rows.push(row);
            }
            segments.push(EmbeddingMatrix::from_rows(&rows)?);
        }
        let frame_count = (n_seg * frames_per_segment) as f64;
        for p in &mut pooled {
            *p /= frame_count;
        }

        let observed_text = observed
            .iter()
            .map(|a| vocab.label_text(*a))
            .collect::<Result<Vec<_>>>()?
            .join(", ");
        let pooled_textual = crate::retrieval::mean_pool(&encoder.embed(&observed_text)?)?;

        let video_id = format!("{video_prefix}{i:04}");
        let timed: Vec<TimedAction> = chain
            .iter()
            .enumerate()
            .map(|(t, a)| TimedAction {
                label: *a,
                start: t as f64,
            })
            .collect();
        annotations.push(VideoAnnotation {
            video_id: video_id.clone(),
            intention: intention.text.clone(),
            observed: observed.clone(),
            future: future.clone(),
            timed,
            duration: (n_seg + z) as f64,
        });
        records.push(ExampleRecord {
            record_id: i,
            video_id,
            observed_actions: observed,
            future_actions: future,
            pooled_visual: pooled,
            pooled_textual,
        });
        all_segments.push(segments);
    }

    Ok(GeneratedDataset {
        store: ExampleStore::new(records)?,
        annotations,
        segments: all_segments,
        n_seg,
        frames_per_segment,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    n_seg: usize,
    frames_per_segment: usize,
    d_v: usize,
    video_count: usize,
}

impl GeneratedDataset {
    pub fn annotation_for(&self, video_id: &str) -> Result<&VideoAnnotation> {
        self.annotations
            .iter()
            .find(|a| a.video_id == video_id)
            .ok_or_else(|| IcvlError::data(format!("no annotation for video {video_id}")))
    }

    pub fn save(&self, dir: impl AsRef<Path>, vocab: &Vocabulary, alpha_default: f64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.store.save(dir, vocab, alpha_default)?;

        let mut gold = std::io::BufWriter::new(std::fs::File::create(dir.join("gold.jsonl"))?);
        for a in &self.annotations {
            serde_json::to_writer(&mut gold, a)?;
            gold.write_all(b"\n")?;
        }
        gold.flush()?;

        let d_v = self.store.visual_dims();
        let mut rows = Vec::new();
        for video in &self.segments {
            for seg in video {
                for r in 0..seg.rows() {
                    rows.push(seg.row(r).to_vec());
                }
            }
        }
        crate::io::write_matrix_file(
            dir.join("segments.icvlmat"),
            &EmbeddingMatrix::from_rows(&rows)?,
        )?;
        std::fs::write(
            dir.join("dataset.json"),
            serde_json::to_string_pretty(&DatasetMeta {
                n_seg: self.n_seg,
                frames_per_segment: self.frames_per_segment,
                d_v,
                video_count: self.annotations.len(),
            })?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Vocabulary, f64)> {
        let dir = dir.as_ref();
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
        let (store, vocab, alpha) = ExampleStore::load(dir)?;

        let mut annotations = Vec::new();
        let file = std::fs::File::open(dir.join("gold.jsonl"))?;
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                annotations.push(serde_json::from_str(&line)?);
            }
        }

        let flat = crate::io::read_matrix_file(dir.join("segments.icvlmat"))?;
        let per_video = meta.n_seg * meta.frames_per_segment;
        if flat.rows() != meta.video_count * per_video || flat.dims() != meta.d_v {
            return Err(IcvlError::format("segments.icvlmat shape mismatch"));
        }
        let mut segments = Vec::with_capacity(meta.video_count);
        for v in 0..meta.video_count {
            let mut video = Vec::with_capacity(meta.n_seg);
            for s in 0..meta.n_seg {
                let start = v * per_video + s * meta.frames_per_segment;
                video.push(flat.slice_rows(start, meta.frames_per_segment)?);
            }
            segments.push(video);
        }
        Ok((
            GeneratedDataset {
                store,
                annotations,
                segments,
                n_seg: meta.n_seg,
                frames_per_segment: meta.frames_per_segment,
            },
            vocab,
            alpha,
        ))
    }
}

/// Deterministic VLM stand-in: answers with the generating intention of any
/// known video, echoes the request context in the debug field, and keeps a
/// request log for orchestration assertions.
pub struct MockVlm {
    intentions: BTreeMap<String, String>,
    pub requests: Vec<VlmRequest>,
    transient_failures: u32,
}

impl MockVlm {
    pub fn for_dataset(dataset: &GeneratedDataset) -> Self {
        MockVlm {
            intentions: dataset
                .annotations
                .iter()
                .map(|a| (a.video_id.clone(), a.intention.clone()))
                .collect(),
            requests: Vec::new(),
            transient_failures: 0,
        }
    }

    pub fn for_datasets(datasets: &[&GeneratedDataset]) -> Self {
        MockVlm {
            intentions: datasets
                .iter()
                .flat_map(|d| d.annotations.iter())
                .map(|a| (a.video_id.clone(), a.intention.clone()))
                .collect(),
            requests: Vec::new(),
            transient_failures: 0,
        }
    }

    /// Fail the first `n` calls with a transient error (retry testing).
    pub fn with_transient_failures(mut self, n: u32) -> Self {
        self.transient_failures = n;
        self
    }
}

impl VlmClient for MockVlm {
    fn infer(&mut self, request: &VlmRequest) -> std::result::Result<VlmResponse, VlmError> {
        self.requests.push(request.clone());
        if self.transient_failures > 0 {
            self.transient_failures -= 1;
            return Err(VlmError::Transient("scripted transient failure".into()));
        }
        match self.intentions.get(&request.frame.video_id) {
            Some(text) => Ok(VlmResponse {
                text: text.clone(),
                latency: Duration::ZERO,
                status: "ok".into(),
                debug_context: Some(request.context.clone()),
            }),
            None => Err(VlmError::Permanent(format!(
                "unknown video id '{}'",
                request.frame.video_id
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intention::HashNgramEncoder;

    fn encoder() -> HashNgramEncoder {
        HashNgramEncoder::new(8, 3)
    }

    #[test]
    fn default_grammar_validates_and_round_trips_json() {
        let g = IntentionGrammar::desk_default();
        g.validate().unwrap();
        let back = IntentionGrammar::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back.intentions.len(), 6);
    }

    #[test]
    fn ambiguous_pairs_share_observed_but_not_futures() {
        let g = IntentionGrammar::desk_default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = g.walk_chain(0, 28, &mut rng).unwrap();
        let b = g.walk_chain(1, 28, &mut rng).unwrap();
        assert_eq!(a[..8], b[..8], "pair must share the observed prefix");
        let fut_a: BTreeSet<_> = a[8..].iter().collect();
        let fut_b: BTreeSet<_> = b[8..].iter().collect();
        assert!(fut_a.is_disjoint(&fut_b), "pair futures must be disjoint");
    }

    #[test]
    fn same_seed_gives_bitwise_identical_datasets() {
        let g = IntentionGrammar::desk_default();
        let a = generate_dataset(&g, 6, 4, 6, 2, &encoder(), "v", 0).unwrap();
        let b = generate_dataset(&g, 6, 4, 6, 2, &encoder(), "v", 0).unwrap();
        for (x, y) in a.segments.iter().zip(&b.segments) {
            assert_eq!(x, y);
        }
        for (x, y) in a.store.records().iter().zip(b.store.records()) {
            assert_eq!(x.pooled_visual, y.pooled_visual);
        }
        let c = generate_dataset(&g, 6, 4, 6, 2, &encoder(), "v", 1).unwrap();
        assert_ne!(
            a.store.records()[0].pooled_visual,
            c.store.records()[0].pooled_visual
        );
    }

    #[test]
    fn zero_noise_makes_same_action_embeddings_identical() {
        let g = IntentionGrammar::desk_default();
        let ds = generate_dataset(&g, 12, 4, 6, 2, &encoder(), "v", 0).unwrap();
        // Find two videos with identical observed chains (same intention or
        // an ambiguous twin) and compare their frame embeddings.
        let mut found = false;
        for i in 0..ds.annotations.len() {
            for j in (i + 1)..ds.annotations.len() {
                if ds.annotations[i].observed == ds.annotations[j].observed {
                    assert_eq!(ds.segments[i], ds.segments[j]);
                    found = true;
                }
            }
        }
        assert!(found, "fixture should contain repeated observed chains");
    }

    #[test]
    fn stochastic_transition_frequencies_match_the_table() {
        let grammar = IntentionGrammar {
            seed: 5,
            embedding_dims: 4,
            noise_scale: 0.0,
            verbs: vec!["go".into(), "stay".into()],
            nouns: vec!["left".into(), "right".into()],
            intentions: vec![IntentionSpec {
                text: "wander".into(),
                start: "go left".into(),
                transitions: BTreeMap::from([
                    (
                        "go left".into(),
                        vec![("go right".into(), 0.7), ("stay left".into(), 0.3)],
                    ),
                    ("go right".into(), vec![("go left".into(), 1.0)]),
                    ("stay left".into(), vec![("go left".into(), 1.0)]),
                ]),
            }],
        };
        grammar.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut to_right = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let chain = grammar.walk_chain(0, 2, &mut rng).unwrap();
            if chain[1] == ActionLabel::new(0, 1) {
                to_right += 1;
            }
        }
        let freq = to_right as f64 / n as f64;
        assert!((freq - 0.7).abs() <= 0.02, "empirical frequency {freq}");
    }

    #[test]
    fn unreachable_state_is_a_config_error() {
        let grammar = IntentionGrammar {
            seed: 5,
            embedding_dims: 4,
            noise_scale: 0.0,
            verbs: vec!["go".into()],
            nouns: vec!["left".into(), "right".into()],
            intentions: vec![IntentionSpec {
                text: "stuck".into(),
                start: "go left".into(),
                transitions: BTreeMap::from([(
                    "go left".into(),
                    vec![("go right".into(), 1.0)],
                )]),
            }],
        };
        assert!(matches!(grammar.validate(), Err(IcvlError::Config(_))));
    }

    #[test]
    fn same_intention_videos_are_closer_than_cross_intention() {
        let g = IntentionGrammar::desk_default();
        let ds = generate_dataset(&g, 24, 8, 20, 2, &encoder(), "v", 0).unwrap();
        let mut within = Vec::new();
        let mut across = Vec::new();
        for i in 0..ds.annotations.len() {
            for j in (i + 1)..ds.annotations.len() {
                let d: f64 = ds.store.records()[i]
                    .pooled_visual
                    .iter()
                    .zip(&ds.store.records()[j].pooled_visual)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if ds.annotations[i].intention == ds.annotations[j].intention {
                    within.push(d);
                } else {
                    across.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!within.is_empty() && !across.is_empty());
        assert!(mean(&within) < mean(&across));
    }

    #[test]
    fn mock_vlm_returns_intention_and_echoes_context() {
        let g = IntentionGrammar::desk_default();
        let ds = generate_dataset(&g, 4, 4, 6, 2, &encoder(), "v", 0).unwrap();
        let mut mock = MockVlm::for_dataset(&ds);
        let req = VlmRequest {
            prompt: "?".into(),
            frame: crate::intention::FrameRef {
                video_id: ds.annotations[2].video_id.clone(),
                frame_index: 0,
                uri: "x".into(),
            },
            context: vec!["earlier".into()],
        };
        let resp = mock.infer(&req).unwrap();
        assert_eq!(resp.text, ds.annotations[2].intention);
        assert_eq!(resp.debug_context, Some(vec!["earlier".to_string()]));
        assert_eq!(mock.requests.len(), 1);

        let unknown = VlmRequest {
            prompt: "?".into(),
            frame: crate::intention::FrameRef {
                video_id: "nope".into(),
                frame_index: 0,
                uri: "x".into(),
            },
            context: vec![],
        };
        assert!(matches!(
            mock.infer(&unknown),
            Err(VlmError::Permanent(_))
        ));
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = IntentionGrammar::desk_default();
        let vocab = g.vocabulary().unwrap();
        let ds = generate_dataset(&g, 5, 3, 4, 2, &encoder(), "v", 0).unwrap();
        ds.save(dir.path(), &vocab, 0.5).unwrap();
        let (back, vocab_back, alpha) = GeneratedDataset::load(dir.path()).unwrap();
        assert_eq!(alpha, 0.5);
        assert_eq!(vocab_back, vocab);
        assert_eq!(back.segments, ds.segments);
        assert_eq!(back.annotations.len(), ds.annotations.len());
        assert_eq!(back.annotations[3].future, ds.annotations[3].future);
        assert_eq!(
            back.store.records()[4].pooled_textual,
            ds.store.records()[4].pooled_textual
        );
    }
}
