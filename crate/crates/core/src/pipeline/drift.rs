use serde::{Deserialize, Serialize};

use crate::backbone::Predictions;
use crate::error::{ensure_shape, Result};
use crate::numerics::{Real, Tensor};

use super::model::{run_stream, Model};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Camera-center error per frame after alignment, meters.
    pub translation_errors: Vec<Real>,
    /// Rotation error per frame, radians.
    pub rotation_errors: Vec<Real>,
    /// Last entry of `translation_errors`.
    pub endpoint_drift: Real,
    /// Mean distance from each predicted point to the nearest true point.
    pub accuracy: Real,
    /// Mean distance from each true point to the nearest predicted point.
    pub completeness: Real,
    /// Mean squared point error, token by token.
    pub pointmap_mse: Real,
}

fn rows3(t: &Tensor) -> impl Iterator<Item = [Real; 3]> + '_ {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]])
}

fn sq(a: [Real; 3], b: [Real; 3]) -> Real {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn mean_nearest(from: &[[Real; 3]], to: &[[Real; 3]]) -> Real {
    if from.is_empty() {
        return 0.0;
    }
    from.iter()
        .map(|&p| to.iter().map(|&q| sq(p, q)).fold(Real::INFINITY, Real::min).sqrt())
        .sum::<Real>()
        / from.len() as Real
}

/// Angle of the rotation taking unit quaternion `b` to `a`, in radians.
/// Uses `4·atan2(|a − b|, |a + b|)` with `b` sign-matched to `a`, which
/// stays accurate near zero where `acos` does not.
fn rotation_angle(a: &[Real; 4], b: &[Real; 4]) -> Real {
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    let diff: Real = a.iter().zip(b).map(|(x, y)| (x - s * y).powi(2)).sum::<Real>().sqrt();
    let sum: Real = a.iter().zip(b).map(|(x, y)| (x + s * y).powi(2)).sum::<Real>().sqrt();
    4.0 * diff.atan2(sum)
}

/// Shift predictions by the mean camera offset over the first `anchor`
/// frames, then score them against ground truth.
pub fn drift_report(preds: &[Predictions], gts: &[Predictions], anchor: usize) -> Result<DriftReport> {
    ensure_shape!(
        !preds.is_empty() && preds.len() == gts.len(),
        "{} predicted frames vs {} ground-truth frames",
        preds.len(),
        gts.len()
    );
    let anchor = anchor.clamp(1, preds.len());
    let mut shift = [0.0; 3];
    for (p, g) in preds[..anchor].iter().zip(gts) {
        for a in 0..3 {
            shift[a] += (g.pose.translation[a] - p.pose.translation[a]) / anchor as Real;
        }
    }
    let moved = |x: [Real; 3]| [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]];

    let mut translation_errors = Vec::with_capacity(preds.len());
    let mut rotation_errors = Vec::with_capacity(preds.len());
    let mut pred_pts = Vec::new();
    let mut gt_pts = Vec::new();
    let mut sq_sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        ensure_shape!(
            p.pointmap.shape() == g.pointmap.shape(),
            "pointmap {:?} vs {:?}",
            p.pointmap.shape(),
            g.pointmap.shape()
        );
        translation_errors.push(sq(moved(p.pose.translation), g.pose.translation).sqrt());
        rotation_errors.push(rotation_angle(&p.pose.rotation, &g.pose.rotation));
        for (a, b) in rows3(&p.pointmap).zip(rows3(&g.pointmap)) {
            let a = moved(a);
            sq_sum += sq(a, b);
            pred_pts.push(a);
            gt_pts.push(b);
        }
    }
    Ok(DriftReport {
        endpoint_drift: *translation_errors.last().expect("non-empty"),
        translation_errors,
        rotation_errors,
        accuracy: mean_nearest(&pred_pts, &gt_pts),
        completeness: mean_nearest(&gt_pts, &pred_pts),
        pointmap_mse: sq_sum / pred_pts.len().max(1) as Real,
    })
}

/// Stream `images` through `model` and score the result, anchored on the
/// first window.
pub fn evaluate_drift(model: &Model, images: &[&Tensor], gts: &[Predictions]) -> Result<DriftReport> {
    let out = run_stream(model, images)?;
    drift_report(&out.predictions, gts, model.cfg.window)
}
