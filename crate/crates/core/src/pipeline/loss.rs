use serde::{Deserialize, Serialize};

use crate::backbone::{PredVars, Predictions};
use crate::error::{ensure_shape, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Loss terms of one evaluation, each averaged over frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: Real,
    pub depth: Real,
    pub pointmap: Real,
    pub camera: Real,
}

/// The three loss terms still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub depth: Var,
    pub pointmap: Var,
    pub camera: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossTerms {
        let v = |x: Var| tape.value(x).data()[0];
        LossTerms {
            total: v(self.total),
            depth: v(self.depth),
            pointmap: v(self.pointmap),
            camera: v(self.camera),
        }
    }
}

fn gt_tensors(gt: &Predictions) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let n = gt.depth.len();
    let log_depth = gt.depth.reshape(&[n, 1])?.map(|d| d.ln());
    let rot = Tensor::new(vec![1, 4], gt.pose.rotation.to_vec())?;
    let trans = Tensor::new(vec![1, 3], gt.pose.translation.to_vec())?;
    Ok((log_depth, gt.pointmap.clone(), rot, trans))
}

fn frame_terms(tape: &mut Tape, pred: &PredVars, gt: &Predictions) -> Result<[Var; 3]> {
    let (log_d_gt, pts_gt, q_gt, t_gt) = gt_tensors(gt)?;
    ensure_shape!(
        tape.shape(pred.depth) == log_d_gt.shape() && tape.shape(pred.pointmap) == pts_gt.shape(),
        "prediction grid {:?} vs ground truth {:?}",
        tape.shape(pred.depth),
        log_d_gt.shape()
    );
    let log_d = tape.log(pred.depth);
    let log_d_gt = tape.constant(log_d_gt);
    let e = tape.sub(log_d, log_d_gt)?;
    let e = tape.square(e);
    let depth = tape.mean(e);

    let pts_gt = tape.constant(pts_gt);
    let e = tape.sub(pred.pointmap, pts_gt)?;
    let e = tape.square(e);
    let e = tape.sum_cols(e)?;
    let pointmap = tape.mean(e);

    let t_gt = tape.constant(t_gt);
    let e = tape.sub(pred.translation, t_gt)?;
    let e = tape.square(e);
    let trans = tape.sum(e);
    let q_gt = tape.constant(q_gt);
    let dot = tape.mul(pred.rotation, q_gt)?;
    let dot = tape.sum(dot);
    let dot = tape.abs(dot);
    let one_minus = tape.neg(dot);
    let rot = tape.offset(one_minus, 1.0);
    let camera = tape.add(trans, rot)?;
    Ok([depth, pointmap, camera])
}

/// `L_depth + L_pointmap + L_camera`, each term averaged over frames.
pub fn loss_on_tape(tape: &mut Tape, preds: &[PredVars], gts: &[&Predictions]) -> Result<LossVars> {
    ensure_shape!(
        !preds.is_empty() && preds.len() == gts.len(),
        "{} predicted frames vs {} ground-truth frames",
        preds.len(),
        gts.len()
    );
    let mut sums: Option<[Var; 3]> = None;
    for (p, g) in preds.iter().zip(gts) {
        let t = frame_terms(tape, p, g)?;
        sums = Some(match sums {
            None => t,
            Some(s) => [tape.add(s[0], t[0])?, tape.add(s[1], t[1])?, tape.add(s[2], t[2])?],
        });
    }
    let s = sums.expect("at least one frame");
    let inv = 1.0 / preds.len() as Real;
    let depth = tape.scale(s[0], inv);
    let pointmap = tape.scale(s[1], inv);
    let camera = tape.scale(s[2], inv);
    let dp = tape.add(depth, pointmap)?;
    let total = tape.add(dp, camera)?;
    Ok(LossVars {
        total,
        depth,
        pointmap,
        camera,
    })
}

/// Predictions as tape constants, for scoring outside a training step.
pub fn pred_constants(tape: &mut Tape, p: &Predictions) -> Result<PredVars> {
    let n = p.depth.len();
    Ok(PredVars {
        pointmap: tape.constant(p.pointmap.clone()),
        depth: tape.constant(p.depth.reshape(&[n, 1])?),
        rotation: tape.constant(Tensor::new(vec![1, 4], p.pose.rotation.to_vec())?),
        translation: tape.constant(Tensor::new(vec![1, 3], p.pose.translation.to_vec())?),
    })
}

pub fn multi_task_loss(preds: &[Predictions], gts: &[Predictions]) -> Result<LossTerms> {
    ensure_shape!(
        preds.len() == gts.len(),
        "{} predicted frames vs {} ground-truth frames",
        preds.len(),
        gts.len()
    );
    let mut tape = Tape::new();
    let pv = preds
        .iter()
        .map(|p| pred_constants(&mut tape, p))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<&Predictions> = gts.iter().collect();
    Ok(loss_on_tape(&mut tape, &pv, &gt)?.values(&tape))
}
