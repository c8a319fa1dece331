//! Train the toy recognizer until it memorizes a small synthetic fixture.

use icvl::matrix::EmbeddingMatrix;
use icvl::recognizer::{
    recognition_accuracy, recognize, train_step, RecognizerConfig, RecognizerParams, Vocabulary,
    DEFAULT_LR,
};
use icvl::ActionLabel;

fn main() -> icvl::Result<()> {
    let vocab = Vocabulary::new(
        vec!["take".into(), "wash".into(), "cut".into(), "pour".into()],
        vec!["bowl".into(), "knife".into(), "cup".into(), "pan".into()],
    )?;

    // 32 segments, one embedding row per label, distinct by construction.
    let gold: Vec<ActionLabel> = (0..32)
        .map(|i| ActionLabel::new(i % 4, (i / 4) % 4))
        .collect();
    let rows: Vec<Vec<f64>> = gold
        .iter()
        .map(|l| {
            let seed = 900 + (l.verb_id * 17 + l.noun_id) as u64;
            EmbeddingMatrix::seeded_gaussian(1, 16, 1.0, seed).row(0).to_vec()
        })
        .collect();
    let segments = EmbeddingMatrix::from_rows(&rows)?;

    let config = RecognizerConfig {
        d_v: 16,
        head_count: 4,
        layers: 2,
        ffn_mult: 2,
        head_hidden: 32,
        use_positional: true,
    };
    let mut params = RecognizerParams::seeded(config, vocab.verb_count(), vocab.noun_count(), 42)?;

    for step in 0..500 {
        let loss = train_step(&segments, &gold, &mut params, DEFAULT_LR)?;
        if step % 50 == 0 {
            let preds = recognize(&segments, &params, &vocab)?;
            let acc = recognition_accuracy(&preds, &gold)?;
            println!("step {step:3}  loss {loss:.4}  accuracy {acc:.3}");
        }
    }
    let preds = recognize(&segments, &params, &vocab)?;
    println!(
        "final accuracy: {:.3}",
        recognition_accuracy(&preds, &gold)?
    );
    Ok(())
}
