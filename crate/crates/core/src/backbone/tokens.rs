use crate::error::{ensure_shape, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{bind_frozen, Linear};

/// One synthetic observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[H, W, C]`
    pub image: Tensor,
    /// `(fx, fy, cx, cy)`
    pub intrinsics: [Real; 4],
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens {
    /// `[N, D]`
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// Patch grid of an `[H, W, C]` image.
pub fn patch_grid(shape: &[usize], patch: usize) -> Result<(usize, usize)> {
    ensure_shape!(shape.len() == 3, "image must be [H, W, C], got {shape:?}");
    ensure_shape!(patch >= 1, "patch size must be positive");
    let (h, w) = (shape[0], shape[1]);
    ensure_shape!(
        h % patch == 0 && w % patch == 0 && h > 0 && w > 0,
        "image {h}x{w} is not divisible into {patch}x{patch} patches"
    );
    Ok((h / patch, w / patch))
}

/// Flatten non-overlapping patches into rows of length `patch²·C`, in
/// raster order of the grid; each row is ordered (dy, dx, channel).
pub fn patch_matrix(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (rows, cols) = patch_grid(image.shape(), patch)?;
    let (w, c) = (image.shape()[1], image.shape()[2]);
    let px = image.data();
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..patch {
                let y = pr * patch + dy;
                let start = (y * w + pc * patch) * c;
                out.extend_from_slice(&px[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![rows * cols, patch * patch * c], out)
}

/// Sinusoids of `pos` over `width` channels: pairs (sin, cos) at
/// geometrically spaced frequencies.
fn sinusoid(pos: Real, width: usize, out: &mut [Real]) {
    let pairs = width.div_ceil(2);
    for i in 0..pairs {
        let freq = (10_000.0 as Real).powf(-(i as Real) / pairs as Real);
        out[2 * i] = (pos * freq).sin();
        if 2 * i + 1 < width {
            out[2 * i + 1] = (pos * freq).cos();
        }
    }
}

/// Fixed 2-D encoding: the first half of the channels encodes the grid
/// row, the rest the grid column.
pub fn position_encoding(grid: (usize, usize), d: usize) -> Tensor {
    let (rows, cols) = grid;
    let half = d / 2;
    let mut data = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut data[(r * cols + c) * d..(r * cols + c + 1) * d];
            sinusoid(r as Real, half, &mut row[..half]);
            sinusoid(c as Real, d - half, &mut row[half..]);
        }
    }
    Tensor::new(vec![rows * cols, d], data).expect("sized above")
}

/// Encoding of a frame's position inside its window, broadcast over the
/// frame's `n` tokens.
pub fn temporal_encoding(index: usize, n: usize, d: usize) -> Tensor {
    let mut row = vec![0.0; d];
    sinusoid(index as Real, d, &mut row);
    Tensor::from_fn(&[n, d], |i| row[i % d])
}

/// Taped patch embedding plus 2-D position encoding.
pub fn embed_patches(tape: &mut Tape, image: &Tensor, patch: usize, embed: &Linear<Var>) -> Result<Var> {
    let grid = patch_grid(image.shape(), patch)?;
    let m = tape.constant(patch_matrix(image, patch)?);
    let x = embed.apply(tape, m)?;
    let d = tape.shape(x)[1];
    let pos = tape.constant(position_encoding(grid, d));
    tape.add(x, pos)
}

pub fn patchify(frame: &Frame, patch: usize, embed: &Linear) -> Result<PatchTokens> {
    let grid = patch_grid(frame.image.shape(), patch)?;
    let (d_in, _) = embed.dims()?;
    let c = frame.image.shape()[2];
    ensure_shape!(
        d_in == patch * patch * c,
        "embedding expects {d_in} inputs, patches have {}",
        patch * patch * c
    );
    let mut tape = Tape::new();
    let e = bind_frozen(embed, &mut tape);
    let x = embed_patches(&mut tape, &frame.image, patch, &e)?;
    Ok(PatchTokens {
        tokens: tape.value(x).clone(),
        grid,
    })
}
