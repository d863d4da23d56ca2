//! Encoder/decoder token masking and the per-position attention visibility
//! matrix used by the two-stream decoder.
//!
//! Masking replaces exactly `round(ratio · n)` of the `n` maskable tokens
//! (minimum one) with `[M]`, chosen uniformly without replacement. Special
//! tokens are never masked and there is no 80/10/10 replacement.
//!
//! The visibility matrix is `(N+1)×(N+1)`: slot 0 holds the sentence
//! embedding, slots `1..=N` the tokens. Row `i` sees
//! `s = ⌈(1 − ratio)·N⌉` token columns sampled from `{1..N} \ {i}`, plus
//! column 0 when `i ≠ 0`. The diagonal is always hidden. Rows are sampled
//! independently.

use rand::seq::index;
use rand::Rng;

use crate::corpus::{TokenSequence, MASK};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MASKED};

/// Label for positions that carry no reconstruction target.
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub ids: Vec<usize>,
    pub mlm_labels: Vec<usize>,
    pub mask_ratio: f64,
}

impl MaskedInput {
    /// The sequence as-is, with nothing to reconstruct (inference path).
    pub fn unmasked(seq: &TokenSequence) -> Self {
        Self {
            ids: seq.ids().to_vec(),
            mlm_labels: vec![IGNORE; seq.len()],
            mask_ratio: 0.0,
        }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.mlm_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mlm_labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Number of tokens masked out of `maskable` at `ratio`.
pub fn mask_count(maskable: usize, ratio: f64) -> usize {
    ((ratio * maskable as f64).round() as usize).clamp(1, maskable.max(1))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("mask ratio must lie in (0, 1), got {ratio}")))
    }
}

fn mask_tokens<R: Rng + ?Sized>(seq: &TokenSequence, ratio: f64, rng: &mut R) -> Result<MaskedInput> {
    check_ratio(ratio)?;
    let maskable = seq.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::DegenerateInput(
            "sentence has no maskable tokens".into(),
        ));
    }
    let k = mask_count(maskable.len(), ratio);
    let mut ids = seq.ids().to_vec();
    let mut labels = vec![IGNORE; ids.len()];
    for pick in index::sample(rng, maskable.len(), k) {
        let pos = maskable[pick];
        labels[pos] = ids[pos];
        ids[pos] = MASK;
    }
    Ok(MaskedInput {
        ids,
        mlm_labels: labels,
        mask_ratio: ratio,
    })
}

/// Light masking of the encoder input.
pub fn mask_for_encoder<R: Rng + ?Sized>(
    seq: &TokenSequence,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskedInput> {
    mask_tokens(seq, ratio, rng)
}

/// Aggressive masking of the basic decoder input. Callers draw it from a
/// generator independent of the encoder mask.
pub fn mask_for_decoder<R: Rng + ?Sized>(
    seq: &TokenSequence,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskedInput> {
    mask_tokens(seq, ratio, rng)
}

/// Visible token columns per row for `n` tokens at decoder mask ratio
/// `ratio`. A 1e-9 slack keeps `(1 − 0.7)·10` from rounding up to 4.
pub fn visible_sample_size(n: usize, ratio: f64) -> usize {
    let s = ((1.0 - ratio) * n as f64 - 1e-9).ceil() as usize;
    s.clamp(1, n.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnVisibility {
    n_tokens: usize,
    visible: Vec<bool>,
    per_row_sample_size: usize,
}

impl AttnVisibility {
    /// Validates a raw row-major visibility matrix of side `n_tokens + 1`.
    pub fn from_matrix(n_tokens: usize, visible: Vec<bool>, per_row_sample_size: usize) -> Result<Self> {
        let l = n_tokens + 1;
        if visible.len() != l * l {
            return Err(Error::Shape(format!(
                "visibility of {} entries for side {l}",
                visible.len()
            )));
        }
        for i in 0..l {
            if visible[i * l + i] {
                return Err(Error::Contract(format!("diagonal entry ({i},{i}) is visible")));
            }
            if i > 0 && !visible[i * l] {
                return Err(Error::Contract(format!("row {i} cannot see column 0")));
            }
            if !visible[i * l..(i + 1) * l].iter().any(|&v| v) {
                return Err(Error::Contract(format!("row {i} sees nothing")));
            }
        }
        Ok(Self {
            n_tokens,
            visible,
            per_row_sample_size,
        })
    }

    /// Everything visible except the diagonal (which includes (0,0)).
    pub fn dense(n_tokens: usize) -> Result<Self> {
        if n_tokens < 1 {
            return Err(Error::DegenerateInput("need at least one token".into()));
        }
        let l = n_tokens + 1;
        let visible = (0..l * l).map(|k| k / l != k % l).collect();
        Self::from_matrix(n_tokens, visible, n_tokens - 1)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Side length `N + 1`.
    pub fn size(&self) -> usize {
        self.n_tokens + 1
    }

    pub fn per_row_sample_size(&self) -> usize {
        self.per_row_sample_size
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.size() + col]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        let l = self.size();
        &self.visible[i * l..(i + 1) * l]
    }

    /// Visible token columns (excluding column 0) in row `i`.
    pub fn visible_tokens_in_row(&self, i: usize) -> usize {
        self.row(i)[1..].iter().filter(|&&v| v).count()
    }

    /// Additive mask: 0 where visible, [`MASKED`] elsewhere.
    pub fn additive_mask(&self) -> Tensor {
        let l = self.size();
        let data = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { MASKED })
            .collect();
        Tensor::matrix(l, l, data).expect("square mask")
    }
}

/// Samples a fresh visibility matrix for `n` tokens.
pub fn build_visibility<R: Rng + ?Sized>(n: usize, dec_ratio: f64, rng: &mut R) -> Result<AttnVisibility> {
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "visibility needs at least 2 tokens, got {n}"
        )));
    }
    check_ratio(dec_ratio)?;
    let s = visible_sample_size(n, dec_ratio);
    let l = n + 1;
    let mut visible = vec![false; l * l];
    let mut candidates = Vec::with_capacity(n);
    for i in 0..l {
        candidates.clear();
        candidates.extend((1..=n).filter(|&j| j != i));
        let row = &mut visible[i * l..(i + 1) * l];
        for pick in index::sample(rng, candidates.len(), s.min(candidates.len())) {
            row[candidates[pick]] = true;
        }
        if i != 0 {
            row[0] = true;
        }
    }
    AttnVisibility::from_matrix(n, visible, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend((0..n).map(|k| 5 + k));
        ids.push(SEP);
        TokenSequence::new(ids).unwrap()
    }

    #[test]
    fn encoder_masks_exactly_three_of_ten() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask_for_encoder(&seq(10), 0.3, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 3);
        assert_eq!(m.ids.iter().filter(|&&i| i == MASK).count(), 3);
    }

    #[test]
    fn decoder_masks_exactly_five_of_ten() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask_for_decoder(&seq(10), 0.5, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 5);
    }

    #[test]
    fn single_token_forces_one_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask_for_encoder(&seq(1), 0.3, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 1);
        assert_eq!(m.ids, vec![CLS, MASK, SEP]);
    }

    #[test]
    fn labels_invert_the_mask_and_specials_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = seq(7);
        let m = mask_for_encoder(&s, 0.3, &mut rng).unwrap();
        for (i, (&id, &lab)) in m.ids.iter().zip(&m.mlm_labels).enumerate() {
            assert_eq!(id == MASK, lab != IGNORE);
            if lab != IGNORE {
                assert_eq!(lab, s.ids()[i]);
            }
        }
        assert_eq!(m.ids[0], CLS);
        assert_eq!(*m.ids.last().unwrap(), SEP);
    }

    #[test]
    fn no_maskable_tokens_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TokenSequence::new(vec![CLS, SEP]).unwrap();
        assert!(matches!(
            mask_for_encoder(&s, 0.3, &mut rng),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn ratio_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mask_for_encoder(&seq(4), 0.0, &mut rng).is_err());
        assert!(mask_for_encoder(&seq(4), 1.0, &mut rng).is_err());
        assert!(build_visibility(4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn visibility_minimum_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = build_visibility(2, 0.5, &mut rng).unwrap();
        assert_eq!(v.per_row_sample_size(), 1);
        assert_eq!(v.row(1), &[true, false, true]);
        assert_eq!(v.row(2), &[true, true, false]);
        assert!(!v.is_visible(0, 0));
        assert_eq!(v.visible_tokens_in_row(0), 1);
    }

    #[test]
    fn visibility_rejects_short_sentences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_visibility(1, 0.5, &mut rng),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn sample_size_is_stable_under_float_noise() {
        assert_eq!(visible_sample_size(10, 0.7), 3);
        assert_eq!(visible_sample_size(10, 0.5), 5);
        assert_eq!(visible_sample_size(7, 0.5), 4);
        assert_eq!(visible_sample_size(3, 0.5), 2);
    }

    #[test]
    fn from_matrix_checks_invariants() {
        // 2 tokens, diagonal visible at (1,1)
        let bad = vec![false, true, true, true, true, true, true, true, false];
        assert!(AttnVisibility::from_matrix(2, bad, 1).is_err());
        let dense = AttnVisibility::dense(3).unwrap();
        assert!(!dense.is_visible(0, 0));
        assert!(dense.is_visible(0, 1) && dense.is_visible(2, 0) && !dense.is_visible(2, 2));
    }

    #[test]
    fn additive_mask_uses_sentinel() {
        let v = AttnVisibility::dense(2).unwrap();
        let m = v.additive_mask();
        assert_eq!(m.get(0, 0), MASKED);
        assert_eq!(m.get(1, 0), 0.0);
    }
}
