//! End-to-end anticipation pipeline over synthetic fixtures.
//!
//! Stage order mirrors the architecture: recognize observed segments, infer
//! the intention through a VLM client, embed it, prepare and fuse the visual
//! embeddings, select in-context examples from the training store, assemble
//! the decoder prefix (example and observed tokens first, fused embedding
//! rows last, matching the prompt layout), then sample K candidate futures
//! and score them with the edit-distance protocol.
//!
//! Every stage is also reachable on its own through the `icvl` binary; this
//! module holds the shared plumbing so the CLI, the examples, and the tests
//! compose the same code.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    decode_candidates, DecoderAdapters, DecoderConfig, DecoderParams, PrefixSource, TokenVocab,
    TrainConfig, TrainSample,
};
use crate::error::{IcvlError, Result};
use crate::eval::{
    class_split, ed_report, horizon_split, map_report, scores_from_candidates, ClassSplit,
    EdReport, HorizonData, MapReport, PredictionSet,
};
use crate::fixtures::{GeneratedDataset, IntentionGrammar, MockVlm, VideoAnnotation};
use crate::icaf::{prepared_raw_visual, FusionMode, IcafParams};
use crate::intention::{
    embed_intention, infer_intentions, sample_frames, FrameRef, HashNgramEncoder, IntentionTrace,
    RetryPolicy, TextEncoder, VlmClient, DEFAULT_INTENTION_PROMPT,
};
use crate::matrix::EmbeddingMatrix;
use crate::optim::OptimizerKind;
use crate::recognizer::{
    recognize, train_step, ActionLabel, RecognizerConfig, RecognizerParams, Vocabulary, DEFAULT_LR,
};
use crate::retrieval::{mean_pool, select_with_mode, ExampleRecord, ExampleStore, SelectionMode};

/// Full configuration of a pipeline run. Protocol constants default to the
/// evaluation protocol (K = 5 candidates, Z = 20 future actions, N_seg = 8
/// observed segments, horizons {25, 50, 75}); changing them requires
/// explicit flags or config entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Language-model embedding width (d_l).
    pub d_l: usize,
    /// Intention embedding rows (seq).
    pub seq: usize,
    /// Frames sampled for intention inference (N_frm).
    pub n_frm: usize,
    /// Observed segments per video (N_seg).
    pub n_seg: usize,
    /// Future actions to predict (Z).
    pub z: usize,
    /// Candidate sequences per video (K).
    pub k_candidates: usize,
    /// Frames per segment fed to the visual encoder (k).
    pub frames_per_segment: usize,
    pub alpha: f64,
    pub k_examples: usize,
    pub fusion_mode: FusionMode,
    pub selection_mode: SelectionMode,
    pub icaf_heads: usize,
    pub decoder_blocks: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub threads: usize,
    pub recognizer_steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub freq_threshold: usize,
    pub horizons: Vec<u32>,
    pub vlm_endpoint: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            d_l: 64,
            seq: 16,
            n_frm: 8,
            n_seg: 8,
            z: 20,
            k_candidates: 5,
            frames_per_segment: 4,
            alpha: 0.5,
            k_examples: 3,
            fusion_mode: FusionMode::Icaf,
            selection_mode: SelectionMode::Fused,
            icaf_heads: 1,
            decoder_blocks: 2,
            lora_rank: 8,
            lora_alpha: 16.0,
            temperature: 0.7,
            seed: 7,
            threads: 1,
            recognizer_steps: 300,
            epochs: 8,
            lr: 5e-5,
            optimizer: OptimizerKind::Adam,
            freq_threshold: 10,
            horizons: vec![25, 50, 75],
            vlm_endpoint: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(IcvlError::config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.temperature < 0.0 {
            return Err(IcvlError::config("temperature must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(IcvlError::config("learning rate must be positive"));
        }
        for (name, v) in [
            ("d_l", self.d_l),
            ("seq", self.seq),
            ("n_frm", self.n_frm),
            ("n_seg", self.n_seg),
            ("z", self.z),
            ("k_candidates", self.k_candidates),
            ("frames_per_segment", self.frames_per_segment),
            ("icaf_heads", self.icaf_heads),
            ("decoder_blocks", self.decoder_blocks),
            ("lora_rank", self.lora_rank),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(IcvlError::config(format!("{name} must be at least 1")));
            }
        }
        if self.d_l % self.icaf_heads != 0 {
            return Err(IcvlError::config(format!(
                "d_l {} not divisible by icaf_heads {}",
                self.d_l, self.icaf_heads
            )));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|p| *p == 0 || *p >= 100) {
            return Err(IcvlError::config(
                "horizons must be a non-empty list of percentages in 1..=99",
            ));
        }
        Ok(())
    }

    pub fn text_encoder(&self) -> HashNgramEncoder {
        HashNgramEncoder::new(self.d_l, self.seed ^ 0x7e37)
    }
}

/// Everything the prediction stage needs.
pub struct TrainedModels {
    pub vocab: Vocabulary,
    pub recognizer: RecognizerParams,
    pub icaf: IcafParams,
    pub decoder: DecoderParams,
    pub adapters: DecoderAdapters,
    pub loss_curve: Vec<f64>,
}

/// Stack each video's mean-pooled segment embeddings into one batch with the
/// gold labels; the recognizer trains and evaluates on this.
pub fn recognizer_batch(ds: &GeneratedDataset) -> Result<(EmbeddingMatrix, Vec<ActionLabel>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (video, annotation) in ds.segments.iter().zip(&ds.annotations) {
        for (seg, label) in video.iter().zip(&annotation.observed) {
            rows.push(mean_pool(seg)?);
            labels.push(*label);
        }
    }
    Ok((EmbeddingMatrix::from_rows(&rows)?, labels))
}

/// Mean-pooled per-segment rows for one video (recognizer input).
pub fn segment_rows(segments: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let rows: Result<Vec<Vec<f64>>> = segments.iter().map(mean_pool).collect();
    EmbeddingMatrix::from_rows(&rows?)
}

/// Pooled visual query vector: mean over every frame of every segment.
pub fn pooled_visual_query(segments: &[EmbeddingMatrix]) -> Result<Vec<f64>> {
    if segments.is_empty() {
        return Err(IcvlError::data("no segments to pool"));
    }
    let mut stacked = EmbeddingMatrix::zeros(0, segments[0].dims());
    for seg in segments {
        stacked = stacked.concat_rows(seg)?;
    }
    mean_pool(&stacked)
}

/// Pooled textual query vector from observed action labels.
pub fn pooled_textual_query(
    observed: &[ActionLabel],
    vocab: &Vocabulary,
    encoder: &dyn TextEncoder,
) -> Result<Vec<f64>> {
    let text = observed
        .iter()
        .map(|a| vocab.label_text(*a))
        .collect::<Result<Vec<_>>>()?
        .join(", ");
    mean_pool(&encoder.embed(&text)?)
}

/// In-context token stream: each example contributes its observed and future
/// actions followed by a separator, then the query's observed actions and a
/// final separator. This mirrors the prompt layout in token space.
pub fn context_tokens(
    examples: &[ExampleRecord],
    observed: &[ActionLabel],
    tv: &TokenVocab,
) -> Result<Vec<usize>> {
    let mut tokens = Vec::new();
    for ex in examples {
        tokens.extend(tv.tokens_for_actions(&ex.observed_actions)?);
        tokens.extend(tv.tokens_for_actions(&ex.future_actions)?);
        tokens.push(tv.sep_token());
    }
    tokens.extend(tv.tokens_for_actions(observed)?);
    tokens.push(tv.sep_token());
    Ok(tokens)
}

fn select_context(
    cfg: &PipelineConfig,
    store: &ExampleStore,
    query_visual: &[f64],
    query_textual: &[f64],
    exclude: Option<usize>,
) -> Result<Vec<ExampleRecord>> {
    if cfg.k_examples == 0 {
        return Ok(Vec::new());
    }
    select_with_mode(
        query_visual,
        query_textual,
        store,
        cfg.selection_mode,
        cfg.alpha,
        cfg.k_examples,
        exclude,
        cfg.threads,
    )
}

/// Assemble the joint-training dataset from a generated fixture: one sample
/// per training video, with the fused prefix rebuilt through the fusion
/// module each step and examples drawn from the store with self-exclusion.
pub fn build_train_samples(
    cfg: &PipelineConfig,
    ds: &GeneratedDataset,
    tv: &TokenVocab,
) -> Result<Vec<TrainSample>> {
    let encoder = cfg.text_encoder();
    let mut samples = Vec::with_capacity(ds.annotations.len());
    for (i, annotation) in ds.annotations.iter().enumerate() {
        let record = ds.store.get(i)?;
        let examples = select_context(
            cfg,
            &ds.store,
            &record.pooled_visual,
            &record.pooled_textual,
            Some(i),
        )?;
        let tokens = context_tokens(&examples, &annotation.observed, tv)?;
        let intention = if cfg.fusion_mode == FusionMode::None {
            EmbeddingMatrix::zeros(cfg.seq, cfg.d_l)
        } else {
            embed_intention(&annotation.intention, &encoder, cfg.seq)?.matrix
        };
        samples.push(TrainSample {
            context_tokens: tokens,
            prefix: PrefixSource::Fused {
                intention,
                raw_visual: prepared_raw_visual(&ds.segments[i])?,
                mode: cfg.fusion_mode,
            },
            targets: tv.tokens_for_actions(&annotation.future)?,
        });
    }
    Ok(samples)
}

/// Train the recognizer, then jointly fine-tune the adapters and the fusion
/// parameters on the training fixture.
pub fn train_models(
    cfg: &PipelineConfig,
    ds: &GeneratedDataset,
    vocab: &Vocabulary,
) -> Result<TrainedModels> {
    cfg.validate()?;
    let d_v = ds.store.visual_dims();

    let recognizer_config = RecognizerConfig {
        d_v,
        head_count: if d_v % 8 == 0 { 8 } else { 1 },
        ..RecognizerConfig::default()
    };
    let mut recognizer = RecognizerParams::seeded(
        recognizer_config,
        vocab.verb_count(),
        vocab.noun_count(),
        cfg.seed,
    )?;
    let (batch, gold) = recognizer_batch(ds)?;
    for _ in 0..cfg.recognizer_steps {
        train_step(&batch, &gold, &mut recognizer, DEFAULT_LR)?;
    }

    let mut icaf = IcafParams::seeded(d_v, cfg.d_l, cfg.icaf_heads, cfg.seed ^ 0x1caf)?;
    let tv = TokenVocab::from_vocabulary(vocab);
    let decoder = DecoderParams::seeded(
        tv,
        DecoderConfig {
            d_l: cfg.d_l,
            blocks: cfg.decoder_blocks,
            ffn_mult: 4,
        },
        cfg.seed ^ 0xdec0,
    )?;
    let mut adapters =
        DecoderAdapters::zero_init(&decoder, cfg.lora_rank, cfg.lora_alpha, cfg.seed ^ 0x10a)?;

    let samples = build_train_samples(cfg, ds, &tv)?;
    let loss_curve = crate::decoder::train(
        &samples,
        &decoder,
        &mut adapters,
        &mut icaf,
        &TrainConfig {
            lr: cfg.lr,
            epochs: cfg.epochs,
            optimizer: cfg.optimizer,
            seed: cfg.seed,
        },
    )?;

    Ok(TrainedModels {
        vocab: vocab.clone(),
        recognizer,
        icaf,
        decoder,
        adapters,
        loss_curve,
    })
}

/// Frame handles for one video (`total = n_seg * frames_per_segment`).
pub fn video_frames(cfg: &PipelineConfig, video_id: &str) -> Result<Vec<FrameRef>> {
    let total = cfg.n_seg * cfg.frames_per_segment;
    Ok(sample_frames(total, cfg.n_frm)?
        .into_iter()
        .map(|idx| FrameRef {
            video_id: video_id.to_string(),
            frame_index: idx,
            uri: format!("{video_id}#{idx}"),
        })
        .collect())
}

/// Prediction for one video, plus the artifacts the CLI stages expose.
pub struct VideoPrediction {
    pub prediction: PredictionSet,
    pub observed: Vec<ActionLabel>,
    pub trace: Option<IntentionTrace>,
    pub selected_ids: Vec<usize>,
    pub fused_prefix: EmbeddingMatrix,
}

/// Run the full per-video path: recognize, infer intention, fuse, select,
/// build the prefix, and sample K candidates.
pub fn predict_video(
    cfg: &PipelineConfig,
    models: &TrainedModels,
    store: &ExampleStore,
    video_id: &str,
    segments: &[EmbeddingMatrix],
    client: &mut dyn VlmClient,
    video_seed: u64,
) -> Result<VideoPrediction> {
    let encoder = cfg.text_encoder();
    let observed = recognize(&segment_rows(segments)?, &models.recognizer, &models.vocab)?;

    let (intention, trace) = if cfg.fusion_mode == FusionMode::None {
        (EmbeddingMatrix::zeros(cfg.seq, cfg.d_l), None)
    } else {
        let frames = video_frames(cfg, video_id)?;
        let trace = infer_intentions(
            &frames,
            client,
            DEFAULT_INTENTION_PROMPT,
            &RetryPolicy::immediate(3),
        )?;
        (
            embed_intention(&trace.final_intention, &encoder, cfg.seq)?.matrix,
            Some(trace),
        )
    };

    let query_visual = pooled_visual_query(segments)?;
    let query_textual = pooled_textual_query(&observed, &models.vocab, &encoder)?;
    let exclude = store.find_by_video(video_id);
    let examples = select_context(cfg, store, &query_visual, &query_textual, exclude)?;
    let selected_ids = examples.iter().map(|e| e.record_id).collect();

    let tv = models.decoder.vocab;
    let tokens = context_tokens(&examples, &observed, &tv)?;
    let prefix_source = PrefixSource::Fused {
        intention,
        raw_visual: prepared_raw_visual(segments)?,
        mode: cfg.fusion_mode,
    };
    let fused_prefix =
        crate::decoder::build_prefix(&prefix_source, &tokens, &models.icaf, &models.decoder)?;
    let candidates = crate::decoder::generate(
        &fused_prefix,
        &models.decoder,
        &models.adapters,
        cfg.k_candidates,
        cfg.z,
        cfg.temperature,
        video_seed,
    )?;
    Ok(VideoPrediction {
        prediction: PredictionSet {
            video_id: video_id.to_string(),
            candidates: decode_candidates(&candidates, &tv)?,
        },
        observed,
        trace,
        selected_ids,
        fused_prefix,
    })
}

pub struct PipelineOutcome {
    pub ed: EdReport,
    pub predictions: Vec<PredictionSet>,
    pub loss_curve: Vec<f64>,
    pub recognition_accuracy: f64,
}

/// Generate a train and an eval fixture from the grammar, train everything,
/// predict every eval video, and score with the edit-distance protocol.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    grammar: &IntentionGrammar,
    n_train: usize,
    n_eval: usize,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let encoder = cfg.text_encoder();
    let train_ds = crate::fixtures::generate_dataset(
        grammar,
        n_train,
        cfg.n_seg,
        cfg.z,
        cfg.frames_per_segment,
        &encoder,
        "train-",
        0,
    )?;
    let eval_ds = crate::fixtures::generate_dataset(
        grammar,
        n_eval,
        cfg.n_seg,
        cfg.z,
        cfg.frames_per_segment,
        &encoder,
        "eval-",
        1,
    )?;
    let vocab = grammar.vocabulary()?;
    let models = train_models(cfg, &train_ds, &vocab)?;

    let (batch, gold) = recognizer_batch(&train_ds)?;
    let preds = recognize(&batch, &models.recognizer, &vocab)?;
    let recognition_accuracy = crate::recognizer::recognition_accuracy(&preds, &gold)?;

    let mut client = MockVlm::for_datasets(&[&train_ds, &eval_ds]);
    let mut predictions = Vec::with_capacity(n_eval);
    for (i, annotation) in eval_ds.annotations.iter().enumerate() {
        let video = predict_video(
            cfg,
            &models,
            &train_ds.store,
            &annotation.video_id,
            &eval_ds.segments[i],
            &mut client,
            cfg.seed.wrapping_add(1000 + i as u64),
        )?;
        predictions.push(video.prediction);
    }

    let gold_futures: BTreeMap<String, Vec<ActionLabel>> = eval_ds
        .annotations
        .iter()
        .map(|a| (a.video_id.clone(), a.future.clone()))
        .collect();
    let ed = ed_report(&predictions, &gold_futures)?;
    Ok(PipelineOutcome {
        ed,
        predictions,
        loss_curve: models.loss_curve,
        recognition_accuracy,
    })
}

/// FREQ/RARE verb split from training annotations (counts over future sets).
pub fn verb_split_from_annotations(
    annotations: &[VideoAnnotation],
    verb_count: usize,
    threshold: usize,
) -> ClassSplit {
    let mut counts = vec![0usize; verb_count];
    for a in annotations {
        for action in &a.future {
            if action.verb_id < verb_count {
                counts[action.verb_id] += 1;
            }
        }
    }
    class_split(&counts, threshold)
}

/// The mAP protocol over predicted candidate sets: per horizon, the target
/// for each video is the set of verbs occurring at or after the boundary,
/// and the score per verb is the fraction of candidates containing it.
pub fn map_report_from_predictions(
    predictions: &[PredictionSet],
    gold: &[VideoAnnotation],
    verb_count: usize,
    horizons: &[u32],
    split: &ClassSplit,
) -> Result<MapReport> {
    let by_id: BTreeMap<&str, &PredictionSet> = predictions
        .iter()
        .map(|p| (p.video_id.as_str(), p))
        .collect();
    let mut data = Vec::with_capacity(horizons.len());
    for &p in horizons {
        let mut scores = Vec::new();
        let mut targets = Vec::new();
        for annotation in gold {
            let Some(pred) = by_id.get(annotation.video_id.as_str()) else {
                return Err(IcvlError::data(format!(
                    "no prediction for video {}",
                    annotation.video_id
                )));
            };
            let (_, future) = horizon_split(&annotation.timed, annotation.duration, p)?;
            let mut target = vec![false; verb_count];
            for action in &future {
                if action.verb_id < verb_count {
                    target[action.verb_id] = true;
                }
            }
            scores.push(scores_from_candidates(&pred.candidates, verb_count));
            targets.push(target);
        }
        data.push(HorizonData {
            p,
            scores: EmbeddingMatrix::from_rows(&scores)?,
            targets,
        });
    }
    map_report(&data, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            d_l: 16,
            seq: 4,
            n_frm: 3,
            n_seg: 4,
            z: 6,
            k_candidates: 2,
            frames_per_segment: 2,
            k_examples: 2,
            recognizer_steps: 120,
            epochs: 2,
            lr: 5e-3,
            temperature: 0.0,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            alpha: 1.5,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            horizons: vec![0],
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            d_l: 63,
            icaf_heads: 2,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn context_token_layout() {
        let tv = TokenVocab {
            verb_count: 4,
            noun_count: 4,
        };
        let ex = ExampleRecord {
            record_id: 0,
            video_id: "x".into(),
            observed_actions: vec![ActionLabel::new(0, 1)],
            future_actions: vec![ActionLabel::new(2, 3)],
            pooled_visual: vec![],
            pooled_textual: vec![],
        };
        let tokens = context_tokens(&[ex], &[ActionLabel::new(1, 1)], &tv).unwrap();
        // obs(0,1) fut(2,3) SEP obs(1,1) SEP with nouns offset by 4.
        assert_eq!(tokens, vec![0, 5, 2, 7, 8, 1, 5, 8]);
    }

    #[test]
    fn pipeline_smoke_runs_end_to_end() {
        let grammar = IntentionGrammar::desk_default();
        let outcome = run_pipeline(&small_cfg(), &grammar, 10, 4).unwrap();
        assert_eq!(outcome.predictions.len(), 4);
        for p in &outcome.predictions {
            assert_eq!(p.candidates.len(), 2);
            assert!(p.candidates.iter().all(|c| c.len() == 6));
        }
        assert!(outcome.ed.action_ed >= 0.0 && outcome.ed.action_ed <= 1.0);
        assert!(outcome.recognition_accuracy > 0.9);
    }

    #[test]
    fn pipeline_is_reproducible() {
        let grammar = IntentionGrammar::desk_default();
        let a = run_pipeline(&small_cfg(), &grammar, 8, 3).unwrap();
        let b = run_pipeline(&small_cfg(), &grammar, 8, 3).unwrap();
        assert_eq!(a.ed.action_ed, b.ed.action_ed);
        for (x, y) in a.predictions.iter().zip(&b.predictions) {
            assert_eq!(x.candidates, y.candidates);
        }
    }
}
