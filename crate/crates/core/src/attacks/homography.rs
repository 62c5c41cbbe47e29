//! Plane homography from 4 point correspondences (direct linear transform)
//! and inverse-warped alpha blending of a patch onto an image.
//!
//! Points are (row, col). The 3x3 matrix is row-major and acts on
//! homogeneous (col, row, 1) vectors.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Solve for H mapping each `src` point onto the corresponding `dst` point.
pub fn dlt_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<[f64; 9]> {
    // unknowns h0..h7 with h8 fixed to 1
    let mut a = [[0.0f64; 8]; 8];
    let mut b = [0.0f64; 8];
    for i in 0..4 {
        let (sy, sx) = src[i];
        let (dy, dx) = dst[i];
        let r = 2 * i;
        a[r] = [sx, sy, 1.0, 0.0, 0.0, 0.0, -sx * dx, -sy * dx];
        b[r] = dx;
        a[r + 1] = [0.0, 0.0, 0.0, sx, sy, 1.0, -sx * dy, -sy * dy];
        b[r + 1] = dy;
    }
    let h = solve8(&mut a, &mut b)?;
    Ok([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

fn solve8(a: &mut [[f64; 8]; 8], b: &mut [f64; 8]) -> Result<[f64; 8]> {
    for col in 0..8 {
        let mut pivot = col;
        for r in col + 1..8 {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::numeric(
                "homography is singular (degenerate point configuration)",
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..8 {
            let f = a[r][col] / a[col][col];
            for c in col..8 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 8];
    for col in (0..8).rev() {
        let mut s = b[col];
        for c in col + 1..8 {
            s -= a[col][c] * x[c];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Apply H to a (row, col) point.
pub fn apply(h: &[f64; 9], p: (f64, f64)) -> (f64, f64) {
    let (y, x) = p;
    let w = h[6] * x + h[7] * y + h[8];
    let xp = (h[0] * x + h[1] * y + h[2]) / w;
    let yp = (h[3] * x + h[4] * y + h[5]) / w;
    (yp, xp)
}

/// Matrix inverse via the adjugate.
pub fn invert(h: &[f64; 9]) -> Result<[f64; 9]> {
    let det = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
        + h[2] * (h[3] * h[7] - h[4] * h[6]);
    if det.abs() < 1e-12 {
        return Err(Error::numeric("homography is singular"));
    }
    let inv = [
        (h[4] * h[8] - h[5] * h[7]) / det,
        (h[2] * h[7] - h[1] * h[8]) / det,
        (h[1] * h[5] - h[2] * h[4]) / det,
        (h[5] * h[6] - h[3] * h[8]) / det,
        (h[0] * h[8] - h[2] * h[6]) / det,
        (h[2] * h[3] - h[0] * h[5]) / det,
        (h[3] * h[7] - h[4] * h[6]) / det,
        (h[1] * h[6] - h[0] * h[7]) / det,
        (h[0] * h[4] - h[1] * h[3]) / det,
    ];
    Ok(inv)
}

/// Blend a warped patch into `image` at the given opacity. `h` maps patch
/// coordinates onto image coordinates; the blend region is the set of image
/// pixels whose inverse map lands inside the patch.
pub fn warp_blend(
    image: &mut Array3<f64>,
    patch: &Array3<f32>,
    h: &[f64; 9],
    opacity: f64,
) -> Result<()> {
    let (ih, iw, _) = image.dim();
    let (ph, pw, _) = patch.dim();
    let hinv = invert(h)?;

    // bounding box of the warped patch corners
    let corners = [
        apply(h, (0.0, 0.0)),
        apply(h, (0.0, pw as f64 - 1.0)),
        apply(h, (ph as f64 - 1.0, pw as f64 - 1.0)),
        apply(h, (ph as f64 - 1.0, 0.0)),
    ];
    let ymin = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let ymax = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let xmin = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let xmax = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);

    let y0 = ymin.floor().max(0.0) as usize;
    let y1 = (ymax.ceil() as usize).min(ih.saturating_sub(1));
    let x0 = xmin.floor().max(0.0) as usize;
    let x1 = (xmax.ceil() as usize).min(iw.saturating_sub(1));

    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = apply(&hinv, (y as f64, x as f64));
            if py < -1e-9 || px < -1e-9 || py > ph as f64 - 1.0 + 1e-9 || px > pw as f64 - 1.0 + 1e-9
            {
                continue;
            }
            let py = py.clamp(0.0, ph as f64 - 1.0);
            let px = px.clamp(0.0, pw as f64 - 1.0);
            let fy = py.floor();
            let fx = px.floor();
            let iy = fy as usize;
            let ix = fx as usize;
            let ty = py - fy;
            let tx = px - fx;
            let iy1 = (iy + 1).min(ph - 1);
            let ix1 = (ix + 1).min(pw - 1);
            for c in 0..3 {
                let p00 = patch[[iy, ix, c]] as f64;
                let p01 = patch[[iy, ix1, c]] as f64;
                let p10 = patch[[iy1, ix, c]] as f64;
                let p11 = patch[[iy1, ix1, c]] as f64;
                let v = p00 * (1.0 - ty) * (1.0 - tx)
                    + p01 * (1.0 - ty) * tx
                    + p10 * ty * (1.0 - tx)
                    + p11 * ty * tx;
                let dst = &mut image[[y, x, c]];
                *dst = (1.0 - opacity) * *dst + opacity * v;
            }
        }
    }
    Ok(())
}
