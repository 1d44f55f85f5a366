use super::vocab::PAD;
use super::window::DialogueSample;

/// Right-padded samples with masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub samples: Vec<DialogueSample>,
    /// `[batch × width]`, PAD beyond each sample's length.
    pub tokens: Vec<Vec<usize>>,
    /// False on PAD positions.
    pub attention_mask: Vec<Vec<bool>>,
    /// The sample's response mask, false on PAD positions.
    pub loss_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_samples(samples: Vec<DialogueSample>) -> Self {
        let width = samples.iter().map(DialogueSample::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(samples.len());
        let mut attention_mask = Vec::with_capacity(samples.len());
        let mut loss_mask = Vec::with_capacity(samples.len());
        for s in &samples {
            let pad = width - s.len();
            let mut row = s.sequence();
            row.extend(std::iter::repeat_n(PAD, pad));
            tokens.push(row);
            attention_mask.push(
                std::iter::repeat_n(true, s.len())
                    .chain(std::iter::repeat_n(false, pad))
                    .collect(),
            );
            let mut lm = s.response_mask.clone();
            lm.extend(std::iter::repeat_n(false, pad));
            loss_mask.push(lm);
        }
        Self {
            samples,
            tokens,
            attention_mask,
            loss_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn pad_count(&self) -> usize {
        self.attention_mask.iter().flatten().filter(|&&m| !m).count()
    }

    pub fn response_token_count(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Splits `samples` into consecutive batches of at most `batch_size`.
pub fn batch(samples: &[DialogueSample], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    samples
        .chunks(batch_size)
        .map(|c| Batch::from_samples(c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_longest_sample() {
        let a = DialogueSample::from_ids(vec![vec![10, 11]], vec![12]); // len 5
        let b = DialogueSample::from_ids(vec![vec![10, 11, 12, 13]], vec![14, 15]); // len 8
        let batches = batch(&[a, b], 32);
        assert_eq!(batches.len(), 1);
        let bt = &batches[0];
        assert_eq!(bt.width(), 8);
        assert_eq!(bt.pad_count(), 3);
        assert_eq!(&bt.tokens[0][5..], &[PAD; 3]);
        assert!(bt.loss_mask[0][5..].iter().all(|&m| !m));
        assert_eq!(bt.response_token_count(), 2 + 3);
    }

    #[test]
    fn splits_into_batch_size_chunks() {
        let s = DialogueSample::from_ids(vec![vec![10]], vec![11]);
        let batches = batch(&vec![s; 70], 32);
        assert_eq!(
            batches.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![32, 32, 6]
        );
    }
}
