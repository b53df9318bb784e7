//! Evaluation metrics: box IoU, part-localization PCP, segmentation mean IU,
//! and classification accuracy.
//!
//! All scores are deterministic pure functions of their inputs. Box overlap
//! uses inclusive pixel counts (a box's width is `x_max − x_min + 1`,
//! matching [`crate::maskgen::Box`]); PCP counts a part as correct only when
//! the predicted box overlaps the ground truth with IoU strictly greater
//! than 0.5; mean IU accumulates one confusion matrix over the whole set
//! (not per-image averages) and averages per-class IU over the classes that
//! actually appear in the ground truth.

use crate::error::{Error, Result};
use crate::maskgen::{Box, LabelMap};
use crate::warn;

/// Intersection over union of two boxes, counting pixels inclusively.
pub fn iou_boxes(a: &Box, b: &Box) -> f64 {
    let ix_min = a.x_min.max(b.x_min);
    let ix_max = a.x_max.min(b.x_max);
    let iy_min = a.y_min.max(b.y_min);
    let iy_max = a.y_max.min(b.y_max);
    if ix_min > ix_max || iy_min > iy_max {
        return 0.0;
    }
    let inter = (ix_max - ix_min + 1) * (iy_max - iy_min + 1);
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    inter as f64 / union as f64
}

/// One image's part boxes. `None` marks a part with no box at all (its mask
/// was empty), as opposed to a bad box.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartBoxes {
    pub head: Option<Box>,
    pub torso: Option<Box>,
}

/// The head and torso boxes induced by a label map: each part's tight
/// bounding box, or `None` when the map contains no pixel of that part.
pub fn part_boxes(map: &LabelMap) -> PartBoxes {
    let (head, torso, _) = map.to_part_masks();
    let tight = |mask: &crate::maskgen::BinaryMask| {
        if mask.count_ones() == 0 {
            None
        } else {
            Some(mask.to_bbox())
        }
    };
    PartBoxes {
        head: tight(&head),
        torso: tight(&torso),
    }
}

/// Correct/total tally for one part across an evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartScore {
    pub correct: usize,
    pub total: usize,
}

impl PartScore {
    /// Percentage correct; 0 when nothing was evaluated.
    pub fn percentage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Percentage of correctly localized parts, per part.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PcpReport {
    pub head: PartScore,
    pub torso: PartScore,
}

/// Score predicted part boxes against ground truth, paired by index.
///
/// A part counts as correct only when both boxes exist and their IoU
/// exceeds 0.5 strictly (exactly 0.5 is a miss). A pair where one side is
/// missing counts as a miss with a warning; a part absent from both sides
/// is not evaluated at all.
pub fn pcp(predicted: &[PartBoxes], truth: &[PartBoxes]) -> Result<PcpReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "got {} predictions for {} ground-truth records",
            predicted.len(),
            truth.len()
        )));
    }
    let mut report = PcpReport::default();
    for (i, (pred, gt)) in predicted.iter().zip(truth).enumerate() {
        for (name, p, g, score) in [
            ("head", &pred.head, &gt.head, &mut report.head),
            ("torso", &pred.torso, &gt.torso, &mut report.torso),
        ] {
            match (p, g) {
                (None, None) => {}
                (Some(p), Some(g)) => {
                    score.total += 1;
                    if iou_boxes(p, g) > 0.5 {
                        score.correct += 1;
                    }
                }
                _ => {
                    score.total += 1;
                    warn::emit(&format!(
                        "record {i}: {name} box present on only one side, counted as a miss"
                    ));
                }
            }
        }
    }
    Ok(report)
}

/// Set-aggregated segmentation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SegReport {
    /// IU per class index; 0 for a class absent from prediction and truth.
    pub per_class: Vec<f64>,
    /// Mean IU over the classes present in the ground truth.
    pub mean_iu: f64,
    /// Fraction of pixels labeled correctly, over the whole set.
    pub pixel_accuracy: f64,
}

/// Aggregate per-class intersection over union across a whole evaluation
/// set. One confusion matrix accumulates over every pixel of every pair;
/// class `c`'s IU is `TP / (TP + FP + FN)`, and the mean runs over classes
/// with at least one ground-truth pixel.
pub fn mean_iu(predicted: &[LabelMap], truth: &[LabelMap], classes: usize) -> Result<SegReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "got {} predictions for {} ground-truth maps",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Data("no maps to score".into()));
    }
    if classes < 2 || classes > 256 {
        return Err(Error::Config(format!(
            "class count must be in 2..=256, got {classes}"
        )));
    }
    // confusion[t][p] = pixels with truth t predicted as p.
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (i, (pred, gt)) in predicted.iter().zip(truth).enumerate() {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(Error::Shape(format!(
                "map {i}: prediction is {}×{} but the ground truth is {}×{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        for r in 0..gt.height() {
            for c in 0..gt.width() {
                let t = gt.at(r, c) as usize;
                let p = pred.at(r, c) as usize;
                if t >= classes || p >= classes {
                    return Err(Error::Data(format!(
                        "map {i}: pixel ({r}, {c}) has class {} out of range 0..{classes}",
                        t.max(p)
                    )));
                }
                confusion[t][p] += 1;
            }
        }
    }

    let mut per_class = vec![0.0f64; classes];
    let mut present = 0usize;
    let mut iu_sum = 0.0f64;
    let mut correct = 0u64;
    let mut pixels = 0u64;
    for c in 0..classes {
        let tp = confusion[c][c];
        let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..classes).map(|t| confusion[t][c]).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        if union > 0 {
            per_class[c] = tp as f64 / union as f64;
        }
        if tp + fn_ > 0 {
            present += 1;
            iu_sum += per_class[c];
        }
        correct += tp;
        pixels += tp + fn_;
    }
    Ok(SegReport {
        per_class,
        mean_iu: iu_sum / present as f64,
        pixel_accuracy: correct as f64 / pixels as f64,
    })
}

/// Collapse a three-class map to object-vs-background: head and torso both
/// become class 1. Feeding the collapsed maps to [`mean_iu`] with two
/// classes gives the foreground-object score.
pub fn collapse_foreground(map: &LabelMap) -> LabelMap {
    let mut out = LabelMap::new(map.width(), map.height()).expect("source map is non-empty");
    for r in 0..map.height() {
        for c in 0..map.width() {
            if map.at(r, c) != 0 {
                out.set(r, c, 1);
            }
        }
    }
    out
}

/// Exact-match percentage of predicted class indices.
pub fn classification_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "got {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn boxed(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Box {
        Box {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// IoU by brute-force pixel enumeration on a small canvas.
    fn iou_by_pixels(a: &Box, b: &Box) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                let in_a = x >= a.x_min && x <= a.x_max && y >= a.y_min && y <= a.y_max;
                let in_b = x >= b.x_min && x <= b.x_max && y >= b.y_min && y <= b.y_max;
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn box_iou_handles_the_obvious_cases() {
        let a = boxed(2, 3, 7, 9);
        assert_eq!(iou_boxes(&a, &a), 1.0);
        let b = boxed(8, 3, 12, 9); // shares no column with a
        assert_eq!(iou_boxes(&a, &b), 0.0);
        let c = boxed(20, 20, 25, 25);
        assert_eq!(iou_boxes(&a, &c), 0.0);
        // Two 2×2 boxes offset by one pixel in each direction: intersection
        // is 1 pixel, union is 7.
        let d = boxed(0, 0, 1, 1);
        let e = boxed(1, 1, 2, 2);
        assert!((iou_boxes(&d, &e) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou_boxes(&d, &e), iou_by_pixels(&d, &e));
    }

    #[test]
    fn box_iou_matches_a_pixel_counting_oracle() {
        let mut rng = seeded_rng(41);
        for _ in 0..200 {
            let mut bx = || {
                let x0 = rng.gen_range(0..28);
                let y0 = rng.gen_range(0..28);
                boxed(x0, y0, rng.gen_range(x0..32.min(x0 + 9)), rng.gen_range(y0..32.min(y0 + 9)))
            };
            let a = bx();
            let b = bx();
            let iou = iou_boxes(&a, &b);
            assert!((iou - iou_by_pixels(&a, &b)).abs() < 1e-12);
            assert_eq!(iou, iou_boxes(&b, &a), "symmetry");
            assert!((0.0..=1.0).contains(&iou));
        }
    }

    /// A pair of one-row boxes with IoU exactly inter/union.
    fn row_pair(inter: usize, union: usize) -> (Box, Box) {
        // First box covers `inter` pixels, second covers `union`, nested.
        (boxed(0, 0, inter - 1, 0), boxed(0, 0, union - 1, 0))
    }

    #[test]
    fn pcp_applies_the_strict_threshold() {
        // IoUs 0.6, 0.4, 0.9 → two of three heads correct.
        let fixtures = [row_pair(3, 5), row_pair(2, 5), row_pair(9, 10)];
        let predicted: Vec<PartBoxes> = fixtures
            .iter()
            .map(|(p, _)| PartBoxes {
                head: Some(p.clone()),
                torso: None,
            })
            .collect();
        let truth: Vec<PartBoxes> = fixtures
            .iter()
            .map(|(_, g)| PartBoxes {
                head: Some(g.clone()),
                torso: None,
            })
            .collect();
        let report = pcp(&predicted, &truth).unwrap();
        assert_eq!(report.head.correct, 2);
        assert_eq!(report.head.total, 3);
        assert!((report.head.percentage() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(format!("{:.2}", report.head.percentage()), "66.67");
        // No torso pairs at all: nothing evaluated.
        assert_eq!(report.torso, PartScore::default());

        // IoU exactly 0.5 is a miss.
        let (p, g) = row_pair(1, 2);
        assert_eq!(iou_boxes(&p, &g), 0.5);
        let report = pcp(
            &[PartBoxes {
                head: Some(p),
                torso: None,
            }],
            &[PartBoxes {
                head: Some(g),
                torso: None,
            }],
        )
        .unwrap();
        assert_eq!((report.head.correct, report.head.total), (0, 1));

        // Perfect predictions score 100.
        let perfect = PartBoxes {
            head: Some(boxed(1, 2, 5, 6)),
            torso: Some(boxed(3, 7, 12, 14)),
        };
        let report = pcp(&[perfect.clone()], &[perfect]).unwrap();
        assert_eq!(report.head.percentage(), 100.0);
        assert_eq!(report.torso.percentage(), 100.0);
    }

    #[test]
    fn pcp_counts_one_sided_pairs_as_misses() {
        let some = PartBoxes {
            head: Some(boxed(0, 0, 3, 3)),
            torso: Some(boxed(0, 0, 5, 5)),
        };
        let none = PartBoxes::default();
        // Prediction missing, truth present — and the reverse.
        let report = pcp(&[none.clone(), some.clone()], &[some.clone(), none]).unwrap();
        assert_eq!((report.head.correct, report.head.total), (0, 2));
        assert_eq!((report.torso.correct, report.torso.total), (0, 2));

        assert!(pcp(&[some], &[]).is_err(), "length mismatch");
    }

    #[test]
    fn pcp_is_monotone_across_the_threshold() {
        let gt = PartBoxes {
            head: Some(boxed(0, 0, 9, 0)),
            torso: None,
        };
        let before = PartBoxes {
            head: Some(boxed(0, 0, 3, 0)), // IoU 0.4
            torso: None,
        };
        let after = PartBoxes {
            head: Some(boxed(0, 0, 8, 0)), // IoU 0.9
            torso: None,
        };
        let low = pcp(&[before], &[gt.clone()]).unwrap();
        let high = pcp(&[after], &[gt]).unwrap();
        assert!(high.head.percentage() > low.head.percentage());
    }

    fn map_from(rows: &[&[u8]]) -> LabelMap {
        let mut lm = LabelMap::new(rows[0].len(), rows.len()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                lm.set(i, j, v);
            }
        }
        lm
    }

    #[test]
    fn identical_maps_score_a_perfect_mean_iu() {
        let map = map_from(&[&[0, 1, 1], &[2, 2, 0]]);
        let report = mean_iu(&[map.clone()], &[map], 3).unwrap();
        assert_eq!(report.mean_iu, 1.0);
        assert_eq!(report.pixel_accuracy, 1.0);
        assert_eq!(report.per_class, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn complementary_binary_maps_score_zero() {
        let truth = map_from(&[&[0, 0, 1, 1]]);
        let pred = map_from(&[&[1, 1, 0, 0]]);
        let report = mean_iu(&[pred], &[truth], 2).unwrap();
        assert_eq!(report.per_class, vec![0.0, 0.0]);
        assert_eq!(report.mean_iu, 0.0);
        assert_eq!(report.pixel_accuracy, 0.0);
    }

    #[test]
    fn mean_iu_matches_a_confusion_oracle() {
        let mut rng = seeded_rng(42);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(3..9), rng.gen_range(3..9));
            let pair = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut maps = Vec::new();
                for _ in 0..3 {
                    let mut lm = LabelMap::new(w, h).unwrap();
                    for i in 0..h {
                        for j in 0..w {
                            lm.set(i, j, rng.gen_range(0..3u8));
                        }
                    }
                    maps.push(lm);
                }
                maps
            };
            let pred = pair(&mut rng);
            let truth = pair(&mut rng);
            let report = mean_iu(&pred, &truth, 3).unwrap();

            // Oracle: per-class pixel sets across the whole list.
            let mut correct = 0usize;
            let mut total = 0usize;
            let mut ius = Vec::new();
            let mut present = Vec::new();
            for c in 0..3u8 {
                let mut tp = 0usize;
                let mut in_truth = 0usize;
                let mut in_pred = 0usize;
                for (p, t) in pred.iter().zip(&truth) {
                    for i in 0..h {
                        for j in 0..w {
                            let is_t = t.at(i, j) == c;
                            let is_p = p.at(i, j) == c;
                            if is_t && is_p {
                                tp += 1;
                            }
                            if is_t {
                                in_truth += 1;
                            }
                            if is_p {
                                in_pred += 1;
                            }
                        }
                    }
                }
                let union = in_truth + in_pred - tp;
                ius.push(if union == 0 {
                    0.0
                } else {
                    tp as f64 / union as f64
                });
                present.push(in_truth > 0);
            }
            for (p, t) in pred.iter().zip(&truth) {
                for i in 0..h {
                    for j in 0..w {
                        total += 1;
                        if p.at(i, j) == t.at(i, j) {
                            correct += 1;
                        }
                    }
                }
            }
            let among: Vec<f64> = ius
                .iter()
                .zip(&present)
                .filter(|(_, &p)| p)
                .map(|(&v, _)| v)
                .collect();
            let mean = among.iter().sum::<f64>() / among.len() as f64;
            assert!((report.mean_iu - mean).abs() < 1e-12);
            assert!((report.pixel_accuracy - correct as f64 / total as f64).abs() < 1e-12);
            for c in 0..3 {
                assert!((report.per_class[c] - ius[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_iu_averages_only_over_classes_in_the_truth() {
        // Truth never uses class 2; the prediction does, which costs class 0
        // pixels but adds no third term to the mean.
        let truth = map_from(&[&[0, 0, 1, 1]]);
        let pred = map_from(&[&[0, 2, 1, 1]]);
        let report = mean_iu(&[pred], &[truth], 3).unwrap();
        assert_eq!(report.per_class[0], 0.5);
        assert_eq!(report.per_class[1], 1.0);
        assert_eq!(report.per_class[2], 0.0);
        assert_eq!(report.mean_iu, 0.75);
    }

    #[test]
    fn mean_iu_is_invariant_to_shared_permutations() {
        let mut rng = seeded_rng(43);
        let mut pred = LabelMap::new(6, 5).unwrap();
        let mut truth = LabelMap::new(6, 5).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                pred.set(i, j, rng.gen_range(0..3u8));
                truth.set(i, j, rng.gen_range(0..3u8));
            }
        }
        let base = mean_iu(&[pred.clone()], &[truth.clone()], 3).unwrap();
        // Flip both maps horizontally: every pixel pairing survives.
        let flip = |m: &LabelMap| {
            let mut out = LabelMap::new(6, 5).unwrap();
            for i in 0..5 {
                for j in 0..6 {
                    out.set(i, j, m.at(i, 5 - j));
                }
            }
            out
        };
        let flipped = mean_iu(&[flip(&pred)], &[flip(&truth)], 3).unwrap();
        assert_eq!(base, flipped);
    }

    #[test]
    fn collapsing_to_foreground_merges_the_parts() {
        let map = map_from(&[&[0, 1, 2], &[2, 0, 1]]);
        let fg = collapse_foreground(&map);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(fg.at(i, j), (map.at(i, j) != 0) as u8);
            }
        }
        // Object-vs-background scoring of an imperfect prediction.
        let truth = map_from(&[&[0, 1, 1, 2]]);
        let pred = map_from(&[&[0, 2, 1, 0]]);
        let report = mean_iu(
            &[collapse_foreground(&pred)],
            &[collapse_foreground(&truth)],
            2,
        )
        .unwrap();
        // Foreground: truth {1,2,3}, prediction {1,2} → IU 2/3.
        assert!((report.per_class[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_segmentation_inputs_are_rejected() {
        let a = map_from(&[&[0, 1]]);
        let b = map_from(&[&[0], &[1]]);
        assert!(mean_iu(&[a.clone()], &[b], 3).is_err(), "dim mismatch");
        assert!(mean_iu(&[a.clone()], &[a.clone(), a.clone()], 3).is_err());
        assert!(mean_iu(&[], &[], 3).is_err());
        let c = map_from(&[&[0, 2]]);
        assert!(
            mean_iu(&[c], &[a], 2).is_err(),
            "class 2 out of range for a two-class evaluation"
        );
    }

    #[test]
    fn accuracy_is_the_exact_match_percentage() {
        assert_eq!(
            classification_accuracy(&[1, 2, 3, 0], &[1, 2, 3, 0]).unwrap(),
            100.0
        );
        assert_eq!(classification_accuracy(&[1, 1], &[0, 2]).unwrap(), 0.0);
        assert_eq!(
            classification_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(),
            75.0
        );
        assert!(classification_accuracy(&[1], &[1, 2]).is_err());
        assert!(classification_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn part_boxes_come_from_tight_masks() {
        let map = map_from(&[
            &[0, 1, 1, 0],
            &[0, 0, 1, 0],
            &[2, 2, 0, 0],
            &[0, 2, 0, 0],
        ]);
        let boxes = part_boxes(&map);
        assert_eq!(boxes.head, Some(boxed(1, 0, 2, 1)));
        assert_eq!(boxes.torso, Some(boxed(0, 2, 1, 3)));

        let empty = map_from(&[&[0, 0], &[2, 0]]);
        let boxes = part_boxes(&empty);
        assert_eq!(boxes.head, None, "no head pixels → no box");
        assert_eq!(boxes.torso, Some(boxed(0, 1, 0, 1)));
    }
}
