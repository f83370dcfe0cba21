use super::vocab::EOS;
use super::{BackboneError, Sequence};

/// Anything that yields next-token logits for a sequence.
pub trait Decoder {
    fn next_logits(&self, seq: &Sequence) -> Result<Vec<f64>, BackboneError>;
    fn context_limit(&self) -> usize;
}

/// Largest logit; ties go to the lower token id.
pub fn argmax_token(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding until EOS (not included in the output) or `max_new`
/// tokens.
pub fn greedy_generate<D: Decoder + ?Sized>(
    decoder: &D,
    prompt: &Sequence,
    max_new: usize,
) -> Result<Vec<u32>, BackboneError> {
    let limit = decoder.context_limit();
    if prompt.len() + max_new > limit {
        return Err(BackboneError::ContextOverflow {
            prompt: prompt.len(),
            max_new,
            limit,
        });
    }
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let next = argmax_token(&decoder.next_logits(&seq)?);
        if next == EOS {
            break;
        }
        out.push(next);
        seq.ids.push(next);
    }
    Ok(out)
}
