use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-12;

/// A proper rotation of 3D space, stored as a row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates orthogonality and unit determinant.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::param("rotation matrix has non-finite entries"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ORTHO_TOL {
                    return Err(Error::param(format!(
                        "matrix is not orthogonal: (RᵀR)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = det3(&m);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::param(format!("determinant {det} is not 1")));
        }
        Ok(Rotation { m })
    }

    /// Rotation about the z axis.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about the y axis.
    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation {
            m: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        }
    }

    /// `Z(alpha)·Y(beta)·Z(gamma)`.
    pub fn from_euler_zyz(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) {
            return Err(Error::param("Euler angles must be finite"));
        }
        Ok(Self::about_z(alpha)
            .compose(&Self::about_y(beta))
            .compose(&Self::about_z(gamma)))
    }

    /// Haar-uniform rotation from a seed (uniform unit quaternion).
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample(&mut rng)
    }

    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                let [w, x, y, z] = q.map(|c| c / n);
                return Self::from_unit_quaternion(w, x, y, z);
            }
        }
    }

    fn from_unit_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation {
            m: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    /// `self · other`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Rotation { m }
    }

    pub fn inverse(&self) -> Rotation {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = self.m[j][i];
            }
        }
        Rotation { m }
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|k| self.m[i][k] * v[k]).sum())
    }

    /// ZYZ Euler angles `(alpha, beta, gamma)` with `self = Z(alpha)·Y(beta)·Z(gamma)`.
    pub fn to_euler_zyz(&self) -> (f64, f64, f64) {
        let m = &self.m;
        let sin_beta = (m[0][2] * m[0][2] + m[1][2] * m[1][2]).sqrt();
        let beta = sin_beta.atan2(m[2][2]);
        if sin_beta < 1e-14 {
            // gimbal lock: only alpha ± gamma is defined
            if m[2][2] > 0.0 {
                (m[1][0].atan2(m[0][0]), beta, 0.0)
            } else {
                ((-m[1][0]).atan2(-m[0][0]), beta, 0.0)
            }
        } else {
            let alpha = m[1][2].atan2(m[0][2]);
            let gamma = m[2][1].atan2(-m[2][0]);
            (alpha, beta, gamma)
        }
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
