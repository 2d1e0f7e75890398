//! Picking one completion out of several by combined score ranks.

use crate::ar::{mean_entropy, ArModel};
use crate::codebook::TokenGrid;
use crate::grid::Image;
use crate::ordering::GenerationOrder;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub index: usize,
    /// Higher is more detailed.
    pub detail_score: f64,
    /// Lower is more sensible.
    pub entropy_score: f64,
}

/// Scores how much fine detail a decoded completion carries.
pub trait DetailScorer: Send + Sync {
    fn score(&self, image: &Image) -> f64;
}

/// Scores how confident the model is about a completion.
pub trait EntropyScorer: Send + Sync {
    fn score(&self, completed: &TokenGrid, order: &GenerationOrder) -> Result<f64>;
}

/// Mean absolute forward difference energy.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientEnergy;

impl DetailScorer for GradientEnergy {
    fn score(&self, image: &Image) -> f64 {
        detail_score(image)
    }
}

/// Mean predictive entropy of an AR model at generated positions.
#[derive(Debug, Clone, Copy)]
pub struct PredictiveEntropy<'a> {
    pub model: &'a ArModel,
}

impl EntropyScorer for PredictiveEntropy<'_> {
    fn score(&self, completed: &TokenGrid, order: &GenerationOrder) -> Result<f64> {
        entropy_score(self.model, completed, order)
    }
}

/// `0.5 * (mean |horizontal diff| + mean |vertical diff|)` over all channels.
/// Each mean runs over the differences that exist (w-1 per row, h-1 per
/// column); a missing direction contributes 0.
pub fn detail_score(image: &Image) -> f64 {
    let (h, w) = (image.height(), image.width());
    let mut horiz = 0.0;
    let mut vert = 0.0;
    for row in 0..h {
        for col in 0..w {
            let p = image.get(row, col);
            if col + 1 < w {
                let q = image.get(row, col + 1);
                horiz += (0..3).map(|c| (q[c] - p[c]).abs() as f64).sum::<f64>();
            }
            if row + 1 < h {
                let q = image.get(row + 1, col);
                vert += (0..3).map(|c| (q[c] - p[c]).abs() as f64).sum::<f64>();
            }
        }
    }
    let nh = (h * w.saturating_sub(1) * 3) as f64;
    let nv = (h.saturating_sub(1) * w * 3) as f64;
    let mh = if nh > 0.0 { horiz / nh } else { 0.0 };
    let mv = if nv > 0.0 { vert / nv } else { 0.0 };
    0.5 * (mh + mv)
}

/// Mean softmax entropy at background positions; 0 when there are none.
pub fn entropy_score(model: &ArModel, completed: &TokenGrid, order: &GenerationOrder) -> Result<f64> {
    mean_entropy(model, completed, order)
}

/// Competition ranks (1-based, ties share the minimum) of `values` sorted
/// best-first by `better`.
fn competition_ranks(values: &[f64], better: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    values
        .iter()
        .map(|&v| 1 + values.iter().filter(|&&u| better(u, v)).count())
        .collect()
}

/// Index of the sample with the lowest average of its detail rank
/// (descending) and entropy rank (ascending); ties go to the lowest index.
pub fn rank_combine(samples: &[ScoredSample]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to rank".into()));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| !s.detail_score.is_finite() || !s.entropy_score.is_finite())
    {
        return Err(Error::InvalidArgument(format!("non-finite score for sample {}", s.index)));
    }
    let detail: Vec<f64> = samples.iter().map(|s| s.detail_score).collect();
    let entropy: Vec<f64> = samples.iter().map(|s| s.entropy_score).collect();
    let ra = competition_ranks(&detail, |u, v| u > v);
    let rb = competition_ranks(&entropy, |u, v| u < v);
    // Comparing rank sums avoids halving.
    let best = (0..samples.len())
        .min_by_key(|&i| (ra[i] + rb[i], samples[i].index))
        .expect("nonempty");
    Ok(samples[best].index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn s(index: usize, d: f64, e: f64) -> ScoredSample {
        ScoredSample {
            index,
            detail_score: d,
            entropy_score: e,
        }
    }

    #[test]
    fn constant_image_has_no_detail() {
        assert_eq!(detail_score(&Grid::filled(5, 6, [0.3, 0.2, 0.9])), 0.0);
    }

    #[test]
    fn vertical_stripes_by_hand() {
        // Columns alternate 0/1: every horizontal diff is 1, vertical 0.
        let img = Grid::from_fn(4, 5, |_, c| [(c % 2) as f32; 3]);
        assert_eq!(detail_score(&img), 0.5);
    }

    #[test]
    fn contrast_doubling_doubles_score() {
        let img = Grid::from_fn(6, 6, |r, c| [0.25 + 0.1 * ((r + c) % 3) as f32, 0.3, 0.4]);
        let twice = img.map(|p| p.map(|v| 2.0 * (v - 0.25) + 0.25));
        assert!((detail_score(&twice) - 2.0 * detail_score(&img)).abs() < 1e-6);
    }

    #[test]
    fn hand_worked_rank_example() {
        let samples = [s(0, 0.2, 1.0), s(1, 0.9, 2.0), s(2, 0.5, 0.5)];
        assert_eq!(rank_combine(&samples).unwrap(), 2);
    }

    #[test]
    fn single_and_tied_samples() {
        assert_eq!(rank_combine(&[s(0, 1.0, 1.0)]).unwrap(), 0);
        let tied = [s(0, 0.5, 0.5), s(1, 0.5, 0.5), s(2, 0.5, 0.5)];
        assert_eq!(rank_combine(&tied).unwrap(), 0);
        assert!(rank_combine(&[]).is_err());
    }

    #[test]
    fn competition_ranking_shares_minimum() {
        assert_eq!(competition_ranks(&[3.0, 1.0, 3.0, 2.0], |u, v| u > v), vec![1, 4, 1, 3]);
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_winner(
            d in prop::collection::vec(0u8..6, 1..10),
            e in prop::collection::vec(0u8..6, 1..10),
        ) {
            let n = d.len().min(e.len());
            let a: Vec<_> = (0..n).map(|i| s(i, d[i] as f64, e[i] as f64)).collect();
            let b: Vec<_> = (0..n)
                .map(|i| s(i, (d[i] as f64).exp() - 3.0, (e[i] as f64).powi(3)))
                .collect();
            prop_assert_eq!(rank_combine(&a).unwrap(), rank_combine(&b).unwrap());
        }

        #[test]
        fn dominated_sample_never_wins(
            d in prop::collection::vec(0.0f64..1.0, 1..10),
            e in prop::collection::vec(0.0f64..1.0, 1..10),
        ) {
            let n = d.len().min(e.len());
            let mut a: Vec<_> = (0..n).map(|i| s(i, d[i], e[i])).collect();
            let before = rank_combine(&a).unwrap();
            a.push(s(n, -1.0, 2.0));
            prop_assert_eq!(rank_combine(&a).unwrap(), before);
        }
    }
}
