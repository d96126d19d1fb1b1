//! MAE, PCK and the two-head training diagnostics.
//!
//! Distances are in heatmap-grid units. MAE is normalized by the grid size,
//! so it is a fraction of the map side. Keypoints marked invisible in the
//! ground truth are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Grid, KeypointSet};

/// Default PCK threshold as a fraction of the image size.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Label attached to every reported MAE value.
pub const MAE_UNIT: &str = "fraction of heatmap side";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mae_unit: String,
    pub pck: f64,
    pub pck_per_keypoint: Vec<f64>,
    pub samples: usize,
    pub alpha: f64,
}

fn check_pairs(preds: &[KeypointSet], gts: &[KeypointSet]) -> Result<usize> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "metrics",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    let k = gts.first().map_or(0, |g| g.len());
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != k || g.len() != k {
            return Err(Error::invalid("metrics", "keypoint counts differ within batch"));
        }
    }
    Ok(k)
}

/// Visible `(prediction, truth, keypoint index)` triples.
fn visible<'a>(
    preds: &'a [KeypointSet],
    gts: &'a [KeypointSet],
) -> impl Iterator<Item = ((f64, f64), (f64, f64), usize)> + 'a {
    preds.iter().zip(gts).flat_map(|(p, g)| {
        (0..g.len())
            .filter(|&k| g.visible[k])
            .map(|k| (p.points[k], g.points[k], k))
    })
}

/// Mean over samples and keypoints of `(|Δh|/H' + |Δw|/W') / 2`.
pub fn mae(preds: &[KeypointSet], gts: &[KeypointSet], grid: Grid) -> Result<f64> {
    check_pairs(preds, gts)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (p, g, _) in visible(preds, gts) {
        total += ((p.0 - g.0).abs() / grid.height as f64 + (p.1 - g.1).abs() / grid.width as f64) / 2.0;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// PCK threshold in grid units: `α · max(H', W')`.
pub fn pck_threshold(alpha: f64, grid: Grid) -> f64 {
    alpha * grid.height.max(grid.width) as f64
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Fraction of keypoints strictly closer than the threshold, with MAE.
pub fn pck(preds: &[KeypointSet], gts: &[KeypointSet], alpha: f64, grid: Grid) -> Result<MetricReport> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("pck", format!("alpha must be positive, got {alpha}")));
    }
    let k = check_pairs(preds, gts)?;
    let threshold = pck_threshold(alpha, grid);
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (p, g, i) in visible(preds, gts) {
        counts[i] += 1;
        if dist(p, g) < threshold {
            hits[i] += 1;
        }
    }
    let pck_per_keypoint: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    let total: usize = counts.iter().sum();
    Ok(MetricReport {
        mae: mae(preds, gts, grid)?,
        mae_unit: MAE_UNIT.into(),
        pck: if total == 0 { 0.0 } else { hits.iter().sum::<usize>() as f64 / total as f64 },
        pck_per_keypoint,
        samples: gts.len(),
        alpha,
    })
}

/// Accuracy of both heads and how far apart their predictions are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub pck_f: f64,
    pub pck_adv: f64,
    /// `pck_f − pck_adv`.
    pub accuracy_difference: f64,
    /// Mean `‖ŷ' − ŷ‖₂` in grid units.
    pub prediction_difference: f64,
    pub mae_f: f64,
    pub mae_adv: f64,
}

pub fn diagnostics(
    f_preds: &[KeypointSet],
    adv_preds: &[KeypointSet],
    gts: &[KeypointSet],
    alpha: f64,
    grid: Grid,
) -> Result<Diagnostics> {
    check_pairs(adv_preds, f_preds)?;
    let rf = pck(f_preds, gts, alpha, grid)?;
    let ra = pck(adv_preds, gts, alpha, grid)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (a, f) in adv_preds.iter().zip(f_preds) {
        for (pa, pf) in a.points.iter().zip(&f.points) {
            total += dist(*pa, *pf);
            n += 1;
        }
    }
    Ok(Diagnostics {
        pck_f: rf.pck,
        pck_adv: ra.pck,
        accuracy_difference: rf.pck - ra.pck,
        prediction_difference: if n == 0 { 0.0 } else { total / n as f64 },
        mae_f: rf.mae,
        mae_adv: ra.mae,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(points: &[(f64, f64)]) -> KeypointSet {
        KeypointSet::new(points.to_vec())
    }

    fn random_sets(n: usize, k: usize, seed: u64) -> Vec<KeypointSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| KeypointSet::new((0..k).map(|_| (rng.random_range(0.0..16.0), rng.random_range(0.0..16.0))).collect()))
            .collect()
    }

    #[test]
    fn mae_examples() {
        let grid = Grid::square(16);
        let gts = random_sets(5, 2, 1);
        assert_eq!(mae(&gts, &gts, grid).unwrap(), 0.0);
        let m = mae(&[set(&[(4.0, 7.0)])], &[set(&[(3.0, 4.0)])], grid).unwrap();
        assert_eq!(m, 0.125);
        assert!(mae(&gts[..2], &gts, grid).is_err());
    }

    #[test]
    fn pck_examples() {
        let grid = Grid::square(16);
        let gts = random_sets(10, 3, 2);
        let r = pck(&gts, &gts, DEFAULT_ALPHA, grid).unwrap();
        assert_eq!(r.pck, 1.0);
        assert_eq!(r.pck_per_keypoint, vec![1.0; 3]);

        // Exactly on the threshold (0.05·16 = 0.8) along h; h = 0 keeps the offset exact.
        let t = pck_threshold(DEFAULT_ALPHA, grid);
        let gts: Vec<KeypointSet> = gts
            .iter()
            .map(|g| KeypointSet::new(g.points.iter().map(|&(_, w)| (0.0, w)).collect()))
            .collect();
        let shifted: Vec<KeypointSet> = gts
            .iter()
            .map(|g| KeypointSet::new(g.points.iter().map(|&(h, w)| (h + t, w)).collect()))
            .collect();
        for (s, g) in shifted.iter().zip(&gts) {
            for (a, b) in s.points.iter().zip(&g.points) {
                assert_eq!(dist(*a, *b), t);
            }
        }
        assert_eq!(pck(&shifted, &gts, DEFAULT_ALPHA, grid).unwrap().pck, 0.0);

        let gts = vec![set(&[(1.0, 1.0)]); 4];
        let preds = vec![set(&[(1.0, 1.0)]), set(&[(1.5, 1.0)]), set(&[(1.0, 1.7)]), set(&[(3.0, 1.0)])];
        assert_eq!(pck(&preds, &gts, DEFAULT_ALPHA, grid).unwrap().pck, 0.75);
        assert!(pck(&preds, &gts, 0.0, grid).is_err());
    }

    #[test]
    fn exhaustive_counting_oracle_on_ten_sample_batches() {
        let grid = Grid::square(16);
        let t = pck_threshold(DEFAULT_ALPHA, grid);
        // w = 0 makes every offset an exact distance.
        let gts: Vec<KeypointSet> = random_sets(10, 2, 3)
            .iter()
            .map(|g| KeypointSet::new(g.points.iter().map(|&(h, _)| (h, 0.0)).collect()))
            .collect();
        // Offsets either well inside, exactly on, or outside the threshold.
        let offsets = [0.0, 0.5 * t, t, 1.5 * t];
        for mask in 0..(4u32.pow(4)) {
            let mut preds = gts.clone();
            let mut expect_hits = 0;
            let mut expect_err = 0.0;
            for (i, p) in preds.iter_mut().enumerate() {
                for k in 0..2 {
                    let o = offsets[((mask >> (2 * ((i + k) % 4))) & 3) as usize];
                    p.points[k].1 += o;
                    if o < t {
                        expect_hits += 1;
                    }
                    expect_err += o / 16.0 / 2.0;
                }
            }
            let r = pck(&preds, &gts, DEFAULT_ALPHA, grid).unwrap();
            assert_eq!(r.pck, expect_hits as f64 / 20.0);
            assert!((r.mae - expect_err / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagnostics_examples() {
        let grid = Grid::square(16);
        let gts = random_sets(6, 2, 4);
        let f = random_sets(6, 2, 5);
        let d = diagnostics(&f, &f, &gts, DEFAULT_ALPHA, grid).unwrap();
        assert_eq!(d.accuracy_difference, 0.0);
        assert_eq!(d.prediction_difference, 0.0);

        let moved: Vec<KeypointSet> = f
            .iter()
            .map(|s| KeypointSet::new(s.points.iter().map(|&(h, w)| (h, w + 2.0)).collect()))
            .collect();
        let d = diagnostics(&f, &moved, &gts, DEFAULT_ALPHA, grid).unwrap();
        assert!((d.prediction_difference - 2.0).abs() < 1e-12);

        let adv = random_sets(6, 2, 6);
        let d = diagnostics(&f, &adv, &gts, DEFAULT_ALPHA, grid).unwrap();
        let mut direct = 0.0;
        for (a, b) in adv.iter().zip(&f) {
            for (p, q) in a.points.iter().zip(&b.points) {
                direct += ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            }
        }
        assert!((d.prediction_difference - direct / 12.0).abs() < 1e-12);
        let pf = pck(&f, &gts, DEFAULT_ALPHA, grid).unwrap().pck;
        let pa = pck(&adv, &gts, DEFAULT_ALPHA, grid).unwrap().pck;
        assert_eq!(d.accuracy_difference, pf - pa);
    }

    #[test]
    fn invisible_keypoints_are_skipped() {
        let grid = Grid::square(16);
        let mut gt = set(&[(1.0, 1.0), (5.0, 5.0)]);
        gt.visible[1] = false;
        let pred = set(&[(1.0, 1.0), (12.0, 12.0)]);
        assert_eq!(pck(&[pred.clone()], &[gt.clone()], DEFAULT_ALPHA, grid).unwrap().pck, 1.0);
        assert_eq!(mae(&[pred], &[gt], grid).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_and_translation_invariant(seed in 0u64..1000, shift in -3.0f64..3.0, rot in 0usize..8) {
            let grid = Grid::square(16);
            let gts = random_sets(8, 2, seed);
            let preds = random_sets(8, 2, seed + 7);
            let base = pck(&preds, &gts, 0.2, grid).unwrap();

            let mut pg: Vec<_> = preds.iter().cloned().zip(gts.iter().cloned()).collect();
            pg.rotate_left(rot);
            let (p2, g2): (Vec<_>, Vec<_>) = pg.into_iter().unzip();
            let permuted = pck(&p2, &g2, 0.2, grid).unwrap();
            prop_assert_eq!(base.pck, permuted.pck);
            prop_assert!((base.mae - permuted.mae).abs() < 1e-12);

            // Shifts by multiples of 1/8 keep coordinates exact, so distances are unchanged.
            let s = (shift * 8.0).round() / 8.0;
            let mv = |v: &[KeypointSet]| -> Vec<KeypointSet> {
                v.iter().map(|k| KeypointSet::new(k.points.iter().map(|&(h, w)| (h + s, w - s)).collect())).collect()
            };
            let moved = pck(&mv(&preds), &mv(&gts), 0.2, grid).unwrap();
            prop_assert_eq!(base.pck, moved.pck);
        }
    }
}
