use super::vocab::{BOS, EOS, IMAGE};
use super::{BackboneError, SyntheticImage};

/// One combined sequence: `n_image` image slots, then text. Positions at or
/// after `prefix_len` form the supervised region.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub ids: Vec<u32>,
    pub image: Option<SyntheticImage>,
    pub n_image: usize,
    pub prefix_len: usize,
    pub modality: Option<usize>,
}

impl Sequence {
    /// `[image slots] BOS prompt... target... EOS` with the supervised region
    /// starting at the first target token.
    pub fn build(
        image: Option<SyntheticImage>,
        n_image: usize,
        prompt: &[u32],
        target: &[u32],
        modality: Option<usize>,
    ) -> Self {
        let mut ids = vec![IMAGE; n_image];
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        let prefix_len = ids.len();
        ids.extend_from_slice(target);
        ids.push(EOS);
        Self {
            ids,
            image,
            n_image,
            prefix_len,
            modality,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text_ids(&self) -> &[u32] {
        &self.ids[self.n_image..]
    }

    /// `(logit row, target id)` for every supervised position `t >= P`,
    /// predicted from row `t - 1`.
    pub fn loss_targets(&self) -> Result<Vec<(usize, usize)>, BackboneError> {
        if self.prefix_len == 0 || self.prefix_len >= self.ids.len() {
            return Err(BackboneError::NoResponse);
        }
        Ok((self.prefix_len..self.ids.len())
            .map(|t| (t - 1, self.ids[t] as usize))
            .collect())
    }

    /// The sequence cut at the prefix boundary, ready for decoding.
    pub fn prompt(&self) -> Sequence {
        Sequence {
            ids: self.ids[..self.prefix_len].to_vec(),
            image: self.image.clone(),
            n_image: self.n_image,
            prefix_len: self.prefix_len,
            modality: self.modality,
        }
    }

    /// Target tokens between the prefix and the final EOS.
    pub fn target_ids(&self) -> &[u32] {
        let end = if self.ids.last() == Some(&EOS) { self.ids.len() - 1 } else { self.ids.len() };
        &self.ids[self.prefix_len.min(end)..end]
    }
}

/// Several sequences trained or evaluated together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceBatch {
    pub items: Vec<Sequence>,
}
