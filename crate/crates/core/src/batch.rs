use crate::corpus::{ExamplePair, TokenId, PAD};
use crate::error::{Error, Result};

/// Right-padded teacher-forcing batch, stored row-major as
/// `[batch, len]` flat id lists.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<TokenId>,
    pub src_lens: Vec<usize>,
    /// `target[..m-1]` of each pair.
    pub dec_input: Vec<TokenId>,
    pub dec_lens: Vec<usize>,
    /// `target[1..]` of each pair, `PAD` where unsupervised.
    pub targets: Vec<TokenId>,
}

impl PaddedBatch {
    pub fn source_mask(&self) -> Vec<bool> {
        mask(&self.src_lens, self.src_len)
    }

    pub fn target_mask(&self) -> Vec<bool> {
        mask(&self.dec_lens, self.tgt_len)
    }

    pub fn supervised_tokens(&self) -> usize {
        self.dec_lens.iter().sum()
    }
}

fn mask(lens: &[usize], width: usize) -> Vec<bool> {
    lens.iter()
        .flat_map(|&l| (0..width).map(move |i| i < l))
        .collect()
}

pub fn pad_batch(pairs: &[ExamplePair], pad_id: TokenId) -> Result<PaddedBatch> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot batch zero pairs".into()));
    }
    for p in pairs {
        p.validate(None)?;
    }
    let src_len = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
    let tgt_len = pairs.iter().map(|p| p.target.len() - 1).max().unwrap_or(0);
    let mut b = PaddedBatch {
        batch: pairs.len(),
        src_len,
        tgt_len,
        src_ids: Vec::with_capacity(pairs.len() * src_len),
        src_lens: Vec::with_capacity(pairs.len()),
        dec_input: Vec::with_capacity(pairs.len() * tgt_len),
        dec_lens: Vec::with_capacity(pairs.len()),
        targets: Vec::with_capacity(pairs.len() * tgt_len),
    };
    for p in pairs {
        let m = p.target.len() - 1;
        b.src_ids.extend(&p.source);
        b.src_ids.extend(std::iter::repeat_n(pad_id, src_len - p.source.len()));
        b.src_lens.push(p.source.len());
        b.dec_input.extend(&p.target[..m]);
        b.dec_input.extend(std::iter::repeat_n(pad_id, tgt_len - m));
        b.targets.extend(&p.target[1..]);
        b.targets.extend(std::iter::repeat_n(PAD, tgt_len - m));
        b.dec_lens.push(m);
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_lengths_need_no_padding() {
        let pairs = vec![
            ExamplePair::new(vec![4, 5], &[6]).unwrap(),
            ExamplePair::new(vec![7, 8], &[9]).unwrap(),
        ];
        let b = pad_batch(&pairs, PAD).unwrap();
        assert!(b.source_mask().iter().all(|&m| m));
        assert!(b.target_mask().iter().all(|&m| m));
        assert_eq!(b.dec_input, vec![1, 6, 1, 9]);
        assert_eq!(b.targets, vec![6, 2, 9, 2]);
    }

    #[test]
    fn ragged_pairs_are_right_padded() {
        let pairs = vec![
            ExamplePair::new(vec![4], &[6, 7]).unwrap(),
            ExamplePair::new(vec![7, 8, 9], &[]).unwrap(),
        ];
        let b = pad_batch(&pairs, PAD).unwrap();
        assert_eq!((b.src_len, b.tgt_len), (3, 3));
        assert_eq!(b.src_ids, vec![4, 0, 0, 7, 8, 9]);
        assert_eq!(b.dec_input, vec![1, 6, 7, 1, 0, 0]);
        assert_eq!(b.targets, vec![6, 7, 2, 2, 0, 0]);
        assert_eq!(b.supervised_tokens(), 4);
        assert_eq!(b.target_mask(), vec![true, true, true, true, false, false]);
    }

    #[test]
    fn degenerate_pairs_are_contract_errors() {
        let bad = ExamplePair {
            source: vec![],
            target: vec![1, 2],
        };
        assert!(matches!(pad_batch(&[bad], PAD), Err(Error::Contract(_))));
        let bad = ExamplePair {
            source: vec![4],
            target: vec![1],
        };
        assert!(matches!(pad_batch(&[bad], PAD), Err(Error::Contract(_))));
        assert!(pad_batch(&[], PAD).is_err());
    }
}
