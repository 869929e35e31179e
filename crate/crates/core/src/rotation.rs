//! Conversions among the 6D rotation representation, rotation matrices, and
//! quaternions.
//!
//! The 6D representation stores the first two columns of a rotation matrix,
//! column-major: `[x0,x1,x2, y0,y1,y2]`. Every converter in the crate shares
//! this layout. Recovery goes through Gram-Schmidt: normalize the first
//! column, orthogonalize and normalize the second, complete with a cross
//! product.

use rand::Rng;

use crate::tensor::Real;
use crate::{CoreError, Result};

/// Residual norm below which Gram-Schmidt refuses to fabricate a frame.
pub const DEGENERACY_EPS: Real = 1e-8;

/// First two columns of a rotation matrix, column-major pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SixD(pub [Real; 6]);

/// Row-major 3x3 rotation matrix: orthonormal, determinant +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix([Real; 9]);

impl SixD {
    pub fn as_slice(&self) -> &[Real; 6] {
        &self.0
    }
}

impl RotationMatrix {
    /// Validates orthonormality (Frobenius defect < 1e-6) and det = 1 ± 1e-6.
    pub fn new(m: [Real; 9]) -> Result<Self> {
        let r = Self(m);
        let defect = r.orthonormality_defect();
        if defect >= 1e-6 {
            return Err(CoreError::DegenerateRotation(format!(
                "matrix is not orthonormal (defect {defect:.3e})"
            )));
        }
        let det = r.det();
        if (det - 1.0).abs() >= 1e-6 {
            return Err(CoreError::DegenerateRotation(format!(
                "determinant {det} is not +1"
            )));
        }
        Ok(r)
    }

    pub(crate) fn from_raw(m: [Real; 9]) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn as_slice(&self) -> &[Real; 9] {
        &self.0
    }

    pub fn col(&self, c: usize) -> [Real; 3] {
        [self.0[c], self.0[3 + c], self.0[6 + c]]
    }

    pub fn apply(&self, v: [Real; 3]) -> [Real; 3] {
        let m = &self.0;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
            }
        }
        Self(out)
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn det(&self) -> Real {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Frobenius norm of `M^T M - I`.
    pub fn orthonormality_defect(&self) -> Real {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let ci = self.col(i);
                let cj = self.col(j);
                let dot = ci[0] * cj[0] + ci[1] * cj[1] + ci[2] * cj[2];
                let target = if i == j { 1.0 } else { 0.0 };
                acc += (dot - target) * (dot - target);
            }
        }
        acc.sqrt()
    }

    pub fn frobenius_distance(&self, other: &Self) -> Real {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<Real>()
            .sqrt()
    }

    /// Geodesic angle between two rotations, radians.
    pub fn geodesic_distance(&self, other: &Self) -> Real {
        let rel = self.transpose().compose(other);
        let trace = rel.0[0] + rel.0[4] + rel.0[8];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

fn norm3(v: [Real; 3]) -> Real {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot3(a: [Real; 3], b: [Real; 3]) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Gram-Schmidt recovery of a rotation matrix from its first two columns.
///
/// Degenerate inputs (zero or parallel columns, residual below
/// [`DEGENERACY_EPS`]) are an error rather than an arbitrary completion.
pub fn sixd_to_matrix(r: &SixD) -> Result<RotationMatrix> {
    let a = [r.0[0], r.0[1], r.0[2]];
    let b = [r.0[3], r.0[4], r.0[5]];
    let na = norm3(a);
    if na < DEGENERACY_EPS {
        return Err(CoreError::DegenerateRotation(format!(
            "first column has norm {na:.3e}"
        )));
    }
    let x = [a[0] / na, a[1] / na, a[2] / na];
    let d = dot3(x, b);
    let resid = [b[0] - d * x[0], b[1] - d * x[1], b[2] - d * x[2]];
    let nr = norm3(resid);
    if nr < DEGENERACY_EPS {
        return Err(CoreError::DegenerateRotation(format!(
            "second column is parallel to the first (residual {nr:.3e})"
        )));
    }
    let y = [resid[0] / nr, resid[1] / nr, resid[2] / nr];
    let z = cross3(x, y);
    Ok(RotationMatrix::from_raw([
        x[0], y[0], z[0], x[1], y[1], z[1], x[2], y[2], z[2],
    ]))
}

/// The first two columns of `m`, column-major.
pub fn matrix_to_sixd(m: &RotationMatrix) -> SixD {
    let x = m.col(0);
    let y = m.col(1);
    SixD([x[0], x[1], x[2], y[0], y[1], y[2]])
}

/// Unit quaternion `(w, x, y, z)` to rotation matrix. Inputs within 1e-3 of
/// unit norm are normalized; anything farther off is an error.
pub fn quat_to_matrix(q: [Real; 4]) -> Result<RotationMatrix> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if (n - 1.0).abs() > 1e-3 {
        return Err(CoreError::DegenerateRotation(format!(
            "quaternion norm {n} too far from 1"
        )));
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(RotationMatrix::from_raw([
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]))
}

/// Rodrigues formula; the angle is the magnitude of `v`, zero maps to the
/// identity.
pub fn axis_angle_to_matrix(v: [Real; 3]) -> RotationMatrix {
    let theta = norm3(v);
    if theta < 1e-12 {
        return RotationMatrix::identity();
    }
    let k = [v[0] / theta, v[1] / theta, v[2] / theta];
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    RotationMatrix::from_raw([
        c + k[0] * k[0] * t,
        k[0] * k[1] * t - k[2] * s,
        k[0] * k[2] * t + k[1] * s,
        k[1] * k[0] * t + k[2] * s,
        c + k[1] * k[1] * t,
        k[1] * k[2] * t - k[0] * s,
        k[2] * k[0] * t - k[1] * s,
        k[2] * k[1] * t + k[0] * s,
        c + k[2] * k[2] * t,
    ])
}

/// Uniform random rotation via a random unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> RotationMatrix {
    loop {
        let q: [Real; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-3 || n > 1.0 {
            continue;
        }
        return quat_to_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]).expect("unit quaternion");
    }
}
