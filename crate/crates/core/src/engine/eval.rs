use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{BatchInputs, ToyVLM, Trainable};

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Fraction of samples whose greedy answer equals the reference answer.
    pub accuracy: f64,
    /// Fraction of samples whose greedy answer equals the reference model's.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub agreement: Option<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy answers of `model`, each as long as the sample's reference answer.
pub fn greedy_answers(model: &ToyVLM, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
    let n = model.config.vocab_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut decoded: Vec<Vec<usize>> = vec![Vec::new(); chunk.len()];
        let steps = chunk.iter().map(|s| s.answer.len()).max().unwrap_or(0);
        for j in 0..steps {
            let active: Vec<usize> = (0..chunk.len()).filter(|&i| chunk[i].answer.len() > j).collect();
            let texts: Vec<Vec<usize>> = active
                .iter()
                .map(|&i| chunk[i].prompt.iter().chain(&decoded[i]).copied().collect())
                .collect();
            let images: Vec<_> = active.iter().map(|&i| &chunk[i].image).collect();
            let inputs = BatchInputs::new(&model.config, &images, texts.clone())?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Trainable::NONE);
            let z = model.forward_on_tape(&mut tape, &bound, &inputs)?;
            let logits = tape.value(z);
            let mut row_end = 0;
            for (&i, t) in active.iter().zip(&texts) {
                row_end += t.len();
                decoded[i].push(argmax(&logits[(row_end - 1) * n..row_end * n]));
            }
        }
        out.extend(decoded);
    }
    Ok(out)
}

/// Exact-match accuracy on `samples`, plus agreement with `reference` when given.
pub fn evaluate(model: &ToyVLM, samples: &[Sample], reference: Option<&ToyVLM>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty set".into()));
    }
    let answers = greedy_answers(model, samples)?;
    let correct = answers.iter().zip(samples).filter(|(a, s)| **a == s.answer).count();
    let agreement = match reference {
        Some(r) => {
            let theirs = greedy_answers(r, samples)?;
            Some(answers.iter().zip(&theirs).filter(|(a, b)| a == b).count() as f64 / samples.len() as f64)
        }
        None => None,
    };
    Ok(EvalReport {
        n: samples.len(),
        accuracy: correct as f64 / samples.len() as f64,
        agreement,
    })
}
