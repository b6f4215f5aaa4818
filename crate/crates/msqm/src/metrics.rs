//! Segmentation metrics over binary masks.
//!
//! mIoU averages foreground and background IoU per frame, then over frames;
//! J is the DAVIS-style region similarity (foreground IoU only). Empty
//! classes follow the convention IoU = 1 when both masks are empty, 0 when
//! exactly one is.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_shapes(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

fn frame_counts(pred: &[f32], gt: &[f32]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= 0.5, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

fn class_iou(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0 // both empty
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over {foreground, background} of per-frame IoU, averaged over the
/// clip's frames. Masks are (T, H, W) with values in {0, 1}.
pub fn miou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_shapes("miou", pred, gt)?;
    let plane: usize = pred.shape()[1..].iter().product();
    let t = pred.shape()[0];
    let mut total = 0.0f64;
    for ti in 0..t {
        let p = &pred.data()[ti * plane..(ti + 1) * plane];
        let g = &gt.data()[ti * plane..(ti + 1) * plane];
        let (tp, fp, fn_, tn) = frame_counts(p, g);
        let fg = class_iou(tp, tp + fp + fn_);
        let bg = class_iou(tn, tn + fp + fn_);
        total += (fg + bg) / 2.0;
    }
    Ok(total / t as f64)
}

/// Foreground-region IoU averaged over the clip's frames.
pub fn j_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_shapes("j_measure", pred, gt)?;
    let plane: usize = pred.shape()[1..].iter().product();
    let t = pred.shape()[0];
    let mut total = 0.0f64;
    for ti in 0..t {
        let p = &pred.data()[ti * plane..(ti + 1) * plane];
        let g = &gt.data()[ti * plane..(ti + 1) * plane];
        let (tp, fp, fn_, _) = frame_counts(p, g);
        total += class_iou(tp, tp + fp + fn_);
    }
    Ok(total / t as f64)
}

/// Fixed-order mean of per-clip scores.
pub fn mean(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec())
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(miou(&m, &m).unwrap(), 1.0);
        assert_eq!(j_measure(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn complement_scores_zero() {
        let a = mask(&[1, 2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let b = mask(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(miou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_foreground_vs_full_foreground() {
        // gt: left half foreground on 4x4; pred: everything foreground
        let mut gt = vec![0.0f32; 16];
        for r in 0..4 {
            gt[r * 4] = 1.0;
            gt[r * 4 + 1] = 1.0;
        }
        let gt = mask(&[1, 4, 4], &gt);
        let pred = mask(&[1, 4, 4], &[1.0; 16]);
        // fg IoU = 8/16 = 0.5, bg IoU = 0/8 = 0 -> mIoU 0.25
        assert_eq!(miou(&pred, &gt).unwrap(), 0.25);
    }

    #[test]
    fn disjoint_foregrounds_have_zero_j() {
        let a = mask(&[1, 1, 4], &[1.0, 1.0, 0.0, 0.0]);
        let b = mask(&[1, 1, 4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(j_measure(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_is_one_third() {
        // area 2 each, overlap 1: J = 1 / 3
        let a = mask(&[1, 1, 4], &[1.0, 1.0, 0.0, 0.0]);
        let b = mask(&[1, 1, 4], &[0.0, 1.0, 1.0, 0.0]);
        let j = j_measure(&a, &b).unwrap();
        assert!((j - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_conventions() {
        let empty = mask(&[1, 1, 2], &[0.0, 0.0]);
        let full = mask(&[1, 1, 2], &[1.0, 1.0]);
        // both empty: fg 1, bg 1 -> 1
        assert_eq!(miou(&empty, &empty).unwrap(), 1.0);
        // exactly one empty: fg 0, bg 0 -> 0
        assert_eq!(miou(&full, &empty).unwrap(), 0.0);
        assert_eq!(j_measure(&empty, &empty).unwrap(), 1.0);
        assert_eq!(j_measure(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_in_pred_and_gt() {
        let a = mask(&[2, 1, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let b = mask(&[2, 1, 3], &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(miou(&a, &b).unwrap(), miou(&b, &a).unwrap());
        assert_eq!(j_measure(&a, &b).unwrap(), j_measure(&b, &a).unwrap());
    }

    #[test]
    fn invariant_to_shared_frame_permutation() {
        let a = mask(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = mask(&[2, 1, 2], &[1.0, 1.0, 0.0, 0.0]);
        let swap = |m: &Tensor| {
            let d = m.data();
            mask(&[2, 1, 2], &[d[2], d[3], d[0], d[1]])
        };
        assert_eq!(miou(&a, &b).unwrap(), miou(&swap(&a), &swap(&b)).unwrap());
        assert_eq!(
            j_measure(&a, &b).unwrap(),
            j_measure(&swap(&a), &swap(&b)).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = mask(&[1, 2, 2], &[0.0; 4]);
        let b = mask(&[1, 2, 3], &[0.0; 6]);
        assert!(miou(&a, &b).is_err());
    }
}
