//! Prompt construction and prediction parsing.
//!
//! The rendered prompt is deterministic, line oriented, and built from four
//! parts: an instruction, the selected in-context examples (each an
//! `Observed:` / `Future:` line pair), the query's observed actions, and a
//! single `<VIS:n>` placeholder standing in for `n` rows of fused embeddings.
//! External decoders receive the embeddings themselves as an ICVLMAT sidecar;
//! the placeholder token is the documented contract between the two.
//!
//! Parsing is total on any text: every nonempty line becomes a candidate,
//! unknown tokens map to the reserved OOV ids, and sequences are padded or
//! truncated to the protocol length.

use serde::Serialize;

use crate::error::{IcvlError, Result};
use crate::matrix::EmbeddingMatrix;
use crate::recognizer::{ActionLabel, Vocabulary};

pub const DEFAULT_INSTRUCTION: &str =
    "Predict the next 20 actions as comma-separated verb-noun pairs, one candidate sequence per line.";

/// Ceiling on in-context examples a prompt may carry.
pub const DEFAULT_MAX_EXAMPLES: usize = 16;

pub const PLACEHOLDER_PREFIX: &str = "<VIS:";

/// One in-context example: the observed prefix and its future continuation.
pub type PromptExample = (Vec<ActionLabel>, Vec<ActionLabel>);

#[derive(Debug, Clone)]
pub struct PromptDocument {
    pub instruction: String,
    pub examples: Vec<PromptExample>,
    pub observed_actions: Vec<ActionLabel>,
    /// Row count of the fused embedding block the placeholder stands for.
    pub embedding_rows: usize,
}

impl PromptDocument {
    pub fn new(
        instruction: impl Into<String>,
        examples: Vec<PromptExample>,
        observed_actions: Vec<ActionLabel>,
        embedding_rows: usize,
    ) -> Result<Self> {
        if examples.len() > DEFAULT_MAX_EXAMPLES {
            return Err(IcvlError::data(format!(
                "{} examples exceed the maximum of {DEFAULT_MAX_EXAMPLES}",
                examples.len()
            )));
        }
        if embedding_rows == 0 {
            return Err(IcvlError::data("embedding placeholder needs >= 1 row"));
        }
        Ok(PromptDocument {
            instruction: instruction.into(),
            examples,
            observed_actions,
            embedding_rows,
        })
    }
}

/// Parsed candidates, each exactly `z` actions long.
#[derive(Debug, Clone, Serialize)]
pub struct ParsedPrediction {
    pub candidates: Vec<Vec<ActionLabel>>,
    pub oov_count: usize,
    pub raw_text: String,
}

fn render_labels(labels: &[ActionLabel], vocab: &Vocabulary) -> Result<String> {
    let parts: Result<Vec<String>> = labels.iter().map(|l| vocab.label_text(*l)).collect();
    Ok(parts?.join(", "))
}

/// Render the canonical prompt text; byte-for-byte deterministic.
pub fn render_prompt(doc: &PromptDocument, vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    out.push_str(&doc.instruction);
    out.push_str("\n\n");
    for (observed, future) in &doc.examples {
        out.push_str("Observed: ");
        out.push_str(&render_labels(observed, vocab)?);
        out.push_str("\nFuture: ");
        out.push_str(&render_labels(future, vocab)?);
        out.push_str("\n\n");
    }
    out.push_str("Observed: ");
    out.push_str(&render_labels(&doc.observed_actions, vocab)?);
    out.push('\n');
    out.push_str(&format!("{}{}>\n", PLACEHOLDER_PREFIX, doc.embedding_rows));
    debug_assert_eq!(out.matches(PLACEHOLDER_PREFIX).count(), 1);
    Ok(out)
}

/// Parse a comma-separated action list; unknown or missing tokens map to the
/// OOV ids and are counted. Matching is case-insensitive with trimming.
fn parse_action_list(text: &str, vocab: &Vocabulary) -> (Vec<ActionLabel>, usize) {
    let mut labels = Vec::new();
    let mut oov = 0usize;
    for chunk in text.split(',') {
        let mut tokens = chunk.split_whitespace();
        let Some(verb_tok) = tokens.next() else {
            continue; // empty chunk, e.g. doubled commas
        };
        let verb_id = match vocab.lookup_verb(verb_tok) {
            Some(id) => id,
            None => {
                oov += 1;
                vocab.oov_verb_id()
            }
        };
        let noun_id = match tokens.next().and_then(|t| {
            let hit = vocab.lookup_noun(t);
            if hit.is_none() {
                return Some(None);
            }
            hit.map(Some)
        }) {
            Some(Some(id)) => id,
            _ => {
                oov += 1;
                vocab.oov_noun_id()
            }
        };
        labels.push(ActionLabel::new(verb_id, noun_id));
    }
    (labels, oov)
}

/// Parse one example block ("Observed: ..." then "Future: ..." lines).
pub fn parse_example_block(
    observed_line: &str,
    future_line: &str,
    vocab: &Vocabulary,
) -> Result<PromptExample> {
    let observed = observed_line
        .trim()
        .strip_prefix("Observed:")
        .ok_or_else(|| IcvlError::data("example block must start with 'Observed:'"))?;
    let future = future_line
        .trim()
        .strip_prefix("Future:")
        .ok_or_else(|| IcvlError::data("example block must contain 'Future:'"))?;
    Ok((
        parse_action_list(observed, vocab).0,
        parse_action_list(future, vocab).0,
    ))
}

/// Parse decoder output into up to `k` candidates of exactly `z` actions.
///
/// One candidate per nonempty line; short candidates are padded with the OOV
/// action, long ones truncated. Fails only when no line yields any action.
pub fn parse_prediction(
    text: &str,
    vocab: &Vocabulary,
    k: usize,
    z: usize,
) -> Result<ParsedPrediction> {
    if text.is_empty() {
        return Err(IcvlError::Parse {
            message: "empty prediction text".into(),
            raw_text: String::new(),
        });
    }
    let mut candidates = Vec::new();
    let mut oov_count = 0usize;
    for line in text.lines() {
        if candidates.len() >= k {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (mut labels, oov) = parse_action_list(line, vocab);
        if labels.is_empty() {
            continue;
        }
        oov_count += oov;
        labels.truncate(z);
        while labels.len() < z {
            labels.push(vocab.oov_action());
        }
        candidates.push(labels);
    }
    if candidates.is_empty() {
        return Err(IcvlError::Parse {
            message: "no parseable candidate lines".into(),
            raw_text: text.to_string(),
        });
    }
    Ok(ParsedPrediction {
        candidates,
        oov_count,
        raw_text: text.to_string(),
    })
}

/// ICVLMAT bytes for the fused embeddings sidecar; empty matrices are
/// rejected because downstream decoders need at least one prefix row.
pub fn serialize_fused(fused: &EmbeddingMatrix) -> Result<Vec<u8>> {
    if fused.rows() == 0 {
        return Err(IcvlError::data("refusing to serialize a 0-row fused matrix"));
    }
    Ok(crate::io::matrix_to_bytes(fused))
}

pub fn deserialize_fused(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    crate::io::matrix_from_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["take".into(), "wash".into(), "pour".into()],
            vec!["bowl".into(), "kettle".into(), "cup".into()],
        )
        .unwrap()
    }

    #[test]
    fn zero_example_prompt_is_minimal() {
        let v = vocab();
        let doc = PromptDocument::new(
            DEFAULT_INSTRUCTION,
            vec![],
            vec![ActionLabel::new(0, 0), ActionLabel::new(1, 1)],
            16,
        )
        .unwrap();
        let text = render_prompt(&doc, &v).unwrap();
        assert_eq!(
            text,
            format!("{DEFAULT_INSTRUCTION}\n\nObserved: take bowl, wash kettle\n<VIS:16>\n")
        );
        assert_eq!(text.matches(PLACEHOLDER_PREFIX).count(), 1);
    }

    #[test]
    fn rendering_is_deterministic() {
        let v = vocab();
        let doc = PromptDocument::new(
            "do things",
            vec![(vec![ActionLabel::new(2, 2)], vec![ActionLabel::new(0, 1)])],
            vec![ActionLabel::new(1, 0)],
            8,
        )
        .unwrap();
        assert_eq!(
            render_prompt(&doc, &v).unwrap(),
            render_prompt(&doc, &v).unwrap()
        );
    }

    #[test]
    fn example_block_round_trips() {
        let v = vocab();
        let observed = vec![ActionLabel::new(0, 1), ActionLabel::new(2, 0)];
        let future = vec![ActionLabel::new(1, 2), ActionLabel::new(1, 1)];
        let doc =
            PromptDocument::new("x", vec![(observed.clone(), future.clone())], vec![], 4).unwrap();
        let text = render_prompt(&doc, &v).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let (obs_back, fut_back) = parse_example_block(lines[2], lines[3], &v).unwrap();
        assert_eq!(obs_back, observed);
        assert_eq!(fut_back, future);
    }

    #[test]
    fn render_rejects_out_of_vocab_ids() {
        let v = vocab();
        let doc = PromptDocument::new("x", vec![], vec![ActionLabel::new(99, 0)], 4).unwrap();
        assert!(matches!(
            render_prompt(&doc, &v),
            Err(IcvlError::Data(_))
        ));
    }

    #[test]
    fn too_many_examples_rejected() {
        let ex: PromptExample = (vec![], vec![]);
        assert!(PromptDocument::new("x", vec![ex; 17], vec![], 4).is_err());
    }

    #[test]
    fn parse_known_labels_with_padding() {
        let v = vocab();
        let parsed = parse_prediction("take bowl, wash bowl", &v, 5, 6).unwrap();
        assert_eq!(parsed.candidates.len(), 1);
        assert_eq!(parsed.oov_count, 0);
        let c = &parsed.candidates[0];
        assert_eq!(c[0], ActionLabel::new(0, 0));
        assert_eq!(c[1], ActionLabel::new(1, 0));
        for pad in &c[2..] {
            assert_eq!(*pad, v.oov_action());
        }
    }

    #[test]
    fn unknown_tokens_map_to_oov() {
        let v = vocab();
        let parsed = parse_prediction("fly dragon", &v, 5, 3).unwrap();
        assert_eq!(parsed.oov_count, 2);
        assert_eq!(parsed.candidates[0][0], v.oov_action());
    }

    #[test]
    fn parsing_is_case_insensitive_and_trims() {
        let v = vocab();
        let parsed = parse_prediction("  TAKE   Bowl ,  Pour KETTLE  ", &v, 5, 2).unwrap();
        assert_eq!(
            parsed.candidates[0],
            vec![ActionLabel::new(0, 0), ActionLabel::new(2, 1)]
        );
        assert_eq!(parsed.oov_count, 0);
    }

    #[test]
    fn missing_noun_counts_as_oov() {
        let v = vocab();
        let parsed = parse_prediction("take", &v, 5, 1).unwrap();
        assert_eq!(parsed.candidates[0][0], ActionLabel::new(0, v.oov_noun_id()));
        assert_eq!(parsed.oov_count, 1);
    }

    #[test]
    fn line_and_candidate_limits() {
        let v = vocab();
        let text = "take bowl\nwash cup\npour kettle\n\n,,,\n";
        let parsed = parse_prediction(text, &v, 2, 1).unwrap();
        assert_eq!(parsed.candidates.len(), 2);
        let all = parse_prediction(text, &v, 10, 1).unwrap();
        assert_eq!(all.candidates.len(), 3); // blank and comma-only lines skipped
    }

    #[test]
    fn unparseable_text_is_a_typed_error_with_raw_text() {
        let v = vocab();
        match parse_prediction("\n , , \n\n", &v, 5, 4) {
            Err(IcvlError::Parse { raw_text, .. }) => assert!(raw_text.contains(',')),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn render_parse_round_trip_over_random_sequences() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..100 {
            let z = 1 + (rng.random::<u64>() % 8) as usize;
            let seq: Vec<ActionLabel> = (0..z)
                .map(|_| {
                    ActionLabel::new(
                        (rng.random::<u64>() % 3) as usize,
                        (rng.random::<u64>() % 3) as usize,
                    )
                })
                .collect();
            let line = render_labels(&seq, &v).unwrap();
            let parsed = parse_prediction(&line, &v, 1, z).unwrap();
            assert_eq!(parsed.candidates[0], seq);
            assert_eq!(parsed.oov_count, 0);
        }
    }

    #[test]
    fn fused_serialization() {
        let m = EmbeddingMatrix::seeded_gaussian(3, 4, 1.0, 9);
        let bytes = serialize_fused(&m).unwrap();
        assert_eq!(deserialize_fused(&bytes).unwrap(), m);
        assert!(serialize_fused(&EmbeddingMatrix::zeros(0, 4)).is_err());
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Parsing never panics: it returns candidates or a typed error.
            #[test]
            fn parse_prediction_is_total(text in ".{0,200}") {
                let v = vocab();
                match parse_prediction(&text, &v, 5, 20) {
                    Ok(p) => {
                        prop_assert!(!p.candidates.is_empty());
                        prop_assert!(p.candidates.iter().all(|c| c.len() == 20));
                    }
                    Err(IcvlError::Parse { .. }) => {}
                    Err(other) => prop_assert!(false, "unexpected error {other:?}"),
                }
            }

            /// Round trip is the identity on in-vocabulary sequences.
            #[test]
            fn round_trip_identity(ids in proptest::collection::vec((0usize..3, 0usize..3), 1..12)) {
                let v = vocab();
                let seq: Vec<ActionLabel> =
                    ids.iter().map(|(a, b)| ActionLabel::new(*a, *b)).collect();
                let line = render_labels(&seq, &v).unwrap();
                let parsed = parse_prediction(&line, &v, 1, seq.len()).unwrap();
                prop_assert_eq!(&parsed.candidates[0], &seq);
            }
        }
    }
}
