use crate::error::{ensure_shape, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::params::{bind_frozen, join, Linear, ParamTree};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = Tensor> {
    /// `D → 3`, world-frame point per token.
    pub point: Linear<T>,
    /// `D → 1`, depth before softplus.
    pub depth: Linear<T>,
    /// `D → 7` on the mean token: quaternion `(w, x, y, z)` then translation.
    pub pose: Linear<T>,
}

impl<T> ParamTree<T> for HeadParams<T> {
    type Mapped<U> = HeadParams<U>;
    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> HeadParams<U> {
        HeadParams {
            point: self.point.map_named(&join(p, "point"), f),
            depth: self.depth.map_named(&join(p, "depth"), f),
            pose: self.pose.map_named(&join(p, "pose"), f),
        }
    }
}

impl HeadParams<Tensor> {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let sd = 1.0 / (d as Real).sqrt();
        let mut pose = Linear::randn(d, 7, sd, rng);
        pose.b = Tensor::new(vec![7], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).expect("7 values");
        HeadParams {
            point: Linear::randn(d, 3, sd, rng),
            depth: Linear::randn(d, 1, sd, rng),
            pose,
        }
    }
}

/// Camera-to-world pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [Real; 4],
    /// Camera center in world coordinates, meters.
    pub translation: [Real; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub pose: Pose,
    /// `[rows, cols]`, positive.
    pub depth: Tensor,
    /// `[N, 3]`, world frame.
    pub pointmap: Tensor,
}

/// Per-frame predictions still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PredVars {
    /// `[N, 3]`
    pub pointmap: Var,
    /// `[N, 1]`
    pub depth: Var,
    /// `[1, 4]`, unit norm.
    pub rotation: Var,
    /// `[1, 3]`
    pub translation: Var,
}

impl PredVars {
    pub fn to_predictions(&self, tape: &Tape, grid: (usize, usize)) -> Result<Predictions> {
        let r = tape.value(self.rotation).data();
        let t = tape.value(self.translation).data();
        Ok(Predictions {
            pose: Pose {
                rotation: [r[0], r[1], r[2], r[3]],
                translation: [t[0], t[1], t[2]],
            },
            depth: tape.value(self.depth).reshape(&[grid.0, grid.1])?,
            pointmap: tape.value(self.pointmap).clone(),
        })
    }
}

impl HeadParams<Var> {
    /// Split `tokens[L·N, D]` into `frames` equal slices and predict each.
    pub fn predict(&self, tape: &mut Tape, tokens: Var, frames: usize) -> Result<Vec<PredVars>> {
        let (rows, _) = tape.value(tokens).dims2()?;
        ensure_shape!(
            frames >= 1 && rows % frames == 0,
            "{rows} tokens do not split into {frames} frames"
        );
        let n = rows / frames;
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let x = tape.slice_rows(tokens, f * n, n)?;
            let pointmap = self.point.apply(tape, x)?;
            let d = self.depth.apply(tape, x)?;
            let depth = tape.softplus(d);
            let pooled = tape.mean_rows(x)?;
            let pose = self.pose.apply(tape, pooled)?;
            let q = tape.slice_cols(pose, 0, 4)?;
            let rotation = tape.normalize_rows(q)?;
            let translation = tape.slice_cols(pose, 4, 3)?;
            out.push(PredVars {
                pointmap,
                depth,
                rotation,
                translation,
            });
        }
        Ok(out)
    }
}

/// Inference-mode heads for `features[L·N, D]` laid out frame by frame.
pub fn heads(features: &Tensor, params: &HeadParams, grid: (usize, usize)) -> Result<Vec<Predictions>> {
    let (rows, _) = features.dims2()?;
    let n = grid.0 * grid.1;
    ensure_shape!(n > 0 && rows % n == 0, "{rows} tokens do not fill whole {grid:?} grids");
    let mut tape = Tape::new();
    let p = bind_frozen(params, &mut tape);
    let x = tape.constant(features.clone());
    p.predict(&mut tape, x, rows / n)?
        .iter()
        .map(|pv| pv.to_predictions(&tape, grid))
        .collect()
}
