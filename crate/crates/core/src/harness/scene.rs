use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Frame, Pose, Predictions};
use crate::error::{Error, Result};
use crate::numerics::{tagged_rng, Real, Tensor};
use crate::pipeline::RunConfig;

/// Half extents of the box room, meters.
pub const ROOM: [Real; 3] = [4.0, 2.0, 4.0];
/// Lattice spacing, meters.
pub const LATTICE_STEP: Real = 0.5;
/// Largest camera translation between consecutive frames, meters.
pub const MAX_STEP: Real = 0.25;
/// Distance within which a loop trajectory counts as closed, meters.
pub const LOOP_CLOSURE_RADIUS: Real = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// Circle around the room center, looking inward.
    Orbit,
    /// Straight sideways sweep along x.
    Corridor,
    /// Ellipse through the room, looking along the path; returns to the start.
    #[default]
    Loop,
}

impl Motion {
    pub const ALL: [Motion; 3] = [Motion::Orbit, Motion::Corridor, Motion::Loop];

    pub fn name(self) -> &'static str {
        match self {
            Motion::Orbit => "orbit",
            Motion::Corridor => "corridor",
            Motion::Loop => "loop",
        }
    }

    /// Camera pose at frame `i` of `n`.
    pub fn pose(self, i: usize, n: usize) -> Pose {
        let (pos, yaw) = match self {
            Motion::Orbit => {
                let phi = std::f64::consts::TAU as Real * i as Real / 72.0;
                let r = 1.5;
                ([r * phi.sin(), 0.0, r * phi.cos()], phi + std::f64::consts::PI as Real)
            }
            Motion::Corridor => {
                let span = (n.max(2) - 1).max(24) as Real;
                let x = -3.0 + 6.0 * i as Real / span;
                ([x, 0.0, 0.0], 0.0)
            }
            Motion::Loop => {
                let period = n.max(60) as Real;
                let phi = std::f64::consts::TAU as Real * i as Real / period;
                let (a, b) = (2.0, 1.2);
                let pos = [a * phi.cos(), 0.0, b * phi.sin()];
                let tangent = [-a * phi.sin(), b * phi.cos()];
                (pos, tangent[0].atan2(tangent[1]))
            }
        };
        Pose {
            rotation: [(yaw / 2.0).cos(), 0.0, (yaw / 2.0).sin(), 0.0],
            translation: pos,
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Motion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Motion::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion profile `{s}` (orbit, corridor, loop)")))
    }
}

/// Rendering settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    /// Std of the additive pixel noise.
    pub noise: Real,
    /// Selects an independent noise draw over the same geometry.
    pub noise_stream: u64,
}

impl SceneSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        SceneSpec {
            image_size: cfg.image_size,
            patch: cfg.patch,
            channels: cfg.channels,
            noise: cfg.noise,
            noise_stream: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub motion: Motion,
    /// Lattice points `[P, 3]`, x fastest then y then z.
    pub points: Tensor,
    /// Per-point features `[P, C]`.
    pub features: Tensor,
    pub frames: Vec<Frame>,
    pub ground_truth: Vec<Predictions>,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.frames.iter().map(|f| &f.image).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.ground_truth.iter().map(|g| g.pose).collect()
    }

    /// Largest translation between consecutive frames.
    pub fn max_step(&self) -> Real {
        self.ground_truth
            .windows(2)
            .map(|w| dist(&w[0].pose.translation, &w[1].pose.translation))
            .fold(0.0, Real::max)
    }

    /// SHA-256 over every rendered pixel and ground-truth value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (f, g) in self.frames.iter().zip(&self.ground_truth) {
            for x in f.image.data().iter().chain(g.depth.data()).chain(g.pointmap.data()) {
                h.update(x.to_le_bytes());
            }
            for x in g.pose.rotation.iter().chain(&g.pose.translation) {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn dist(a: &[Real; 3], b: &[Real; 3]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Real>().sqrt()
}

/// Yaw rotation of a camera-frame vector into the world frame.
fn yaw_rotate(q: &[Real; 4], d: [Real; 3]) -> [Real; 3] {
    // q = (cos θ/2, 0, sin θ/2, 0)
    let (c, s) = (q[0] * q[0] - q[2] * q[2], 2.0 * q[0] * q[2]);
    [c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]]
}

/// Parameter along `dir` at which a ray from inside the room meets a wall.
fn wall_hit(origin: [Real; 3], dir: [Real; 3]) -> Real {
    (0..3)
        .filter(|&a| dir[a] != 0.0)
        .map(|a| (ROOM[a].copysign(dir[a]) - origin[a]) / dir[a])
        .fold(Real::INFINITY, Real::min)
}

struct Lattice {
    counts: [usize; 3],
    features: Tensor,
}

impl Lattice {
    fn new(channels: usize, rng: &mut crate::numerics::Rng) -> Self {
        let counts = ROOM.map(|h| (2.0 * h / LATTICE_STEP).round() as usize + 1);
        let p = counts.iter().product();
        Lattice {
            counts,
            features: Tensor::randn(&[p, channels], 1.0, rng),
        }
    }

    fn points(&self) -> Tensor {
        let [nx, ny, _] = self.counts;
        let p = self.features.shape()[0];
        Tensor::from_fn(&[p, 3], |idx| {
            let (i, a) = (idx / 3, idx % 3);
            let c = [i % nx, (i / nx) % ny, i / (nx * ny)][a];
            -ROOM[a] + LATTICE_STEP * c as Real
        })
    }

    /// Trilinear interpolation of lattice features at `p`.
    fn sample(&self, p: [Real; 3], out: &mut [Real]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = ((p[a] + ROOM[a]) / LATTICE_STEP).clamp(0.0, (self.counts[a] - 1) as Real);
            let i = (g.floor() as usize).min(self.counts[a] - 2);
            base[a] = i;
            frac[a] = g - i as Real;
        }
        let c = out.len();
        out.fill(0.0);
        let feats = self.features.data();
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                idx[a] = base[a] + bit;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            let flat = idx[0] + self.counts[0] * (idx[1] + self.counts[1] * idx[2]);
            for (o, f) in out.iter_mut().zip(&feats[flat * c..(flat + 1) * c]) {
                *o += w * f;
            }
        }
    }
}

/// Camera-frame ray through pixel `(r, c)` with `z = 1`; 90° field of view.
fn pixel_ray(r: Real, c: Real, size: usize) -> [Real; 3] {
    let f = size as Real / 2.0;
    [(c - f) / f, -(r - f) / f, 1.0]
}

/// Render a deterministic scene of `n_frames` along `motion`.
pub fn gen_scene(seed: u64, n_frames: usize, motion: Motion, spec: &SceneSpec) -> Result<SyntheticScene> {
    if n_frames == 0 {
        return Err(Error::Config("a scene needs at least one frame".into()));
    }
    if spec.patch == 0 || !spec.image_size.is_multiple_of(spec.patch) || spec.channels == 0 {
        return Err(Error::Config(format!(
            "image {} is not tiled by patch {} or no channels",
            spec.image_size, spec.patch
        )));
    }
    let lattice = Lattice::new(spec.channels, &mut tagged_rng(seed, "scene.lattice"));
    let mut noise_rng = tagged_rng(seed, &format!("scene.noise.{}", spec.noise_stream));
    let (s, c) = (spec.image_size, spec.channels);
    let g = s / spec.patch;
    let mut frames = Vec::with_capacity(n_frames);
    let mut ground_truth = Vec::with_capacity(n_frames);
    let mut px = vec![0.0; c];
    for i in 0..n_frames {
        let pose = motion.pose(i, n_frames);
        let o = pose.translation;
        let mut image = vec![0.0; s * s * c];
        for r in 0..s {
            for col in 0..s {
                let d = yaw_rotate(&pose.rotation, pixel_ray(r as Real + 0.5, col as Real + 0.5, s));
                let t = wall_hit(o, d);
                lattice.sample([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]], &mut px);
                let dst = &mut image[(r * s + col) * c..(r * s + col + 1) * c];
                for (x, v) in dst.iter_mut().zip(&px) {
                    let e: Real = if spec.noise > 0.0 {
                        spec.noise * noise_rng.sample::<f64, _>(StandardNormal) as Real
                    } else {
                        0.0
                    };
                    *x = v + e;
                }
            }
        }
        let mut depth = Vec::with_capacity(g * g);
        let mut pts = Vec::with_capacity(g * g * 3);
        for pr in 0..g {
            for pc in 0..g {
                let center = |k: usize| (k as Real + 0.5) * spec.patch as Real;
                let d = yaw_rotate(&pose.rotation, pixel_ray(center(pr), center(pc), s));
                let t = wall_hit(o, d);
                depth.push(t);
                pts.extend((0..3).map(|a| o[a] + t * d[a]));
            }
        }
        frames.push(Frame {
            image: Tensor::new(vec![s, s, c], image)?,
            intrinsics: [s as Real / 2.0, s as Real / 2.0, s as Real / 2.0, s as Real / 2.0],
            t: i,
        });
        ground_truth.push(Predictions {
            pose,
            depth: Tensor::new(vec![g, g], depth)?,
            pointmap: Tensor::new(vec![g * g, 3], pts)?,
        });
    }
    Ok(SyntheticScene {
        seed,
        motion,
        points: lattice.points(),
        features: lattice.features,
        frames,
        ground_truth,
    })
}
