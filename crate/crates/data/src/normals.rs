//! Surface normals from depth via local least-squares plane fitting.
//!
//! Used to derive ground-truth normals for real data (the synthetic
//! generator provides analytic ones). Normals are camera-frame, unit
//! length, oriented toward the camera. Pixels whose 5x5 neighborhood
//! has too few valid samples or too large a fit residual get the zero
//! vector (undefined); the cosine loss skips those.

use ndarray::prelude::*;
use rdfc_core::{CameraIntrinsics, DepthMap, NormalMap};

const WINDOW: usize = 5;
const MIN_POINTS: usize = 6;

/// RMS plane-fit residual above which a pixel's normal is rejected.
pub const RESIDUAL_LIMIT_M: f64 = 0.01;

pub fn normals_from_depth(d: &DepthMap, k: &CameraIntrinsics) -> NormalMap {
    let (h, w) = d.data.dim();
    let mut out = Array3::<f64>::zeros((h, w, 3));
    let half = WINDOW / 2;
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(WINDOW * WINDOW);
    for v in 0..h {
        for u in 0..w {
            if d.data[[v, u]] <= 0.0 {
                continue;
            }
            pts.clear();
            for dv in v.saturating_sub(half)..=(v + half).min(h - 1) {
                for du in u.saturating_sub(half)..=(u + half).min(w - 1) {
                    let z = d.data[[dv, du]];
                    if z <= 0.0 {
                        continue;
                    }
                    let ray = k.unproject(du as f64, dv as f64);
                    pts.push([ray[0] * z, ray[1] * z, z]);
                }
            }
            if pts.len() < MIN_POINTS {
                continue;
            }
            let Some((normal, rms)) = fit_plane(&pts) else { continue };
            if rms > RESIDUAL_LIMIT_M {
                continue;
            }
            // Orient toward the camera: n . ray < 0.
            let ray = k.unproject(u as f64, v as f64);
            let dot = normal[0] * ray[0] + normal[1] * ray[1] + normal[2] * ray[2];
            let s = if dot > 0.0 { -1.0 } else { 1.0 };
            out[[v, u, 0]] = normal[0] * s;
            out[[v, u, 1]] = normal[1] * s;
            out[[v, u, 2]] = normal[2] * s;
        }
    }
    NormalMap { data: out }
}

/// Least-squares plane through the points: smallest eigenvector of the
/// centered covariance (Jacobi rotations on the 3x3 symmetric matrix).
/// Returns (unit normal, RMS residual).
fn fit_plane(pts: &[[f64; 3]]) -> Option<([f64; 3], f64)> {
    let n = pts.len() as f64;
    let mut c = [0.0f64; 3];
    for p in pts {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for a in c.iter_mut() {
        *a /= n;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for p in pts {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let (evals, evecs) = jacobi_eigen3(cov);
    let mut kmin = 0;
    for i in 1..3 {
        if evals[i] < evals[kmin] {
            kmin = i;
        }
    }
    let nv = [evecs[0][kmin], evecs[1][kmin], evecs[2][kmin]];
    let len = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
    if len < 1e-12 {
        return None;
    }
    let normal = [nv[0] / len, nv[1] / len, nv[2] / len];
    let rms = (evals[kmin].max(0.0) / n).sqrt();
    Some((normal, rms))
}

/// Cyclic Jacobi eigendecomposition of a symmetric 3x3 matrix.
fn jacobi_eigen3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..32 {
        // Largest off-diagonal element.
        let (mut p, mut q, mut max) = (0, 1, a[0][1].abs());
        for (i, j) in [(0usize, 2usize), (1, 2)] {
            if a[i][j].abs() > max {
                max = a[i][j].abs();
                p = i;
                q = j;
            }
        }
        if max < 1e-15 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let cos = 1.0 / (t * t + 1.0).sqrt();
        let sin = t * cos;
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        rot[p][p] = cos;
        rot[q][q] = cos;
        rot[p][q] = sin;
        rot[q][p] = -sin;
        // a = rot^T a rot; v = v rot
        let mut na = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        s += rot[k][i] * a[k][l] * rot[l][j];
                    }
                }
                na[i][j] = s;
            }
        }
        a = na;
        let mut nv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += v[i][k] * rot[k][j];
                }
                nv[i][j] = s;
            }
        }
        v = nv;
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}
