//! Real Wigner-D matrices.
//!
//! The complex matrices come from Wigner's closed-form small-d sum with the
//! `e^{-im'α}`, `e^{-imγ}` phases; they are then conjugated into the real
//! harmonic basis of [`super::harmonics`]. The result satisfies
//! `Y(R·v) = D(R)·Y(v)`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{factorial, Rotation, L_MAX};
use crate::error::{Error, Result};

const REALNESS_TOL: f64 = 1e-12;

/// The representation of a rotation on the real degree-`l` basis.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerD {
    pub degree: usize,
    pub matrix: DMatrix<f64>,
}

impl WignerD {
    pub fn dim(&self) -> usize {
        2 * self.degree + 1
    }

    /// `D·x` for a degree-`l` component.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.matrix[(i, j)] * x[j]).sum())
            .collect()
    }

    /// Applies `D` to every channel of a `[m][channel]` block.
    pub fn apply_channels(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(x.len(), n * channels);
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for j in 0..n {
                let d = self.matrix[(i, j)];
                if d == 0.0 {
                    continue;
                }
                for c in 0..channels {
                    out[i * channels + c] += d * x[j * channels + c];
                }
            }
        }
        out
    }
}

/// Real Wigner-D matrix of degree `l` for rotation `r`.
pub fn wigner_d(l: usize, r: &Rotation) -> Result<WignerD> {
    if l > L_MAX {
        return Err(Error::Capability(format!("degree {l} exceeds l_max = {L_MAX}")));
    }
    let (alpha, beta, gamma) = r.to_euler_zyz();
    let complex = complex_wigner_d(l, alpha, beta, gamma);
    let u = real_basis_change(l);
    // D_real = U · conj(D) · U†
    let n = 2 * l + 1;
    let conj_d = complex.map(|z| z.conj());
    let real = &u * conj_d * u.adjoint();
    let mut imag = 0.0f64;
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        imag = imag.max(real[(i, j)].im.abs());
        real[(i, j)].re
    });
    if imag > REALNESS_TOL {
        return Err(Error::Capability(format!(
            "real Wigner-D for l={l} has imaginary residue {imag:e}"
        )));
    }
    Ok(WignerD { degree: l, matrix })
}

/// Wigner small-d `d^l_{m'm}(β)`, indices offset by `l`.
pub(crate) fn small_d(l: usize, beta: f64) -> DMatrix<f64> {
    let n = 2 * l + 1;
    let li = l as i64;
    let (s, c) = (beta / 2.0).sin_cos();
    DMatrix::from_fn(n, n, |i, j| {
        let mp = i as i64 - li;
        let m = j as i64 - li;
        let pre = (factorial(li + mp) * factorial(li - mp) * factorial(li + m) * factorial(li - m)).sqrt();
        let kmin = 0.max(m - mp);
        let kmax = (li + m).min(li - mp);
        let mut sum = 0.0;
        for k in kmin..=kmax {
            let sign = if (k - m + mp) % 2 == 0 { 1.0 } else { -1.0 };
            let denom = factorial(li + m - k) * factorial(k) * factorial(li - k - mp) * factorial(k - m + mp);
            let cpow = (2 * li - 2 * k + m - mp) as i32;
            let spow = (2 * k - m + mp) as i32;
            sum += sign / denom * c.powi(cpow) * s.powi(spow);
        }
        pre * sum
    })
}

fn complex_wigner_d(l: usize, alpha: f64, beta: f64, gamma: f64) -> DMatrix<Complex64> {
    let d = small_d(l, beta);
    let li = l as i64;
    DMatrix::from_fn(2 * l + 1, 2 * l + 1, |i, j| {
        let mp = (i as i64 - li) as f64;
        let m = (j as i64 - li) as f64;
        Complex64::from_polar(1.0, -mp * alpha) * d[(i, j)] * Complex64::from_polar(1.0, -m * gamma)
    })
}

/// Rows: real index `m`; columns: complex index `M`. `Y_real = U·Y_complex`,
/// where the complex harmonics carry the Condon–Shortley phase.
pub(crate) fn real_basis_change(l: usize) -> DMatrix<Complex64> {
    let n = 2 * l + 1;
    let li = l as i64;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut u = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let idx = |m: i64| (m + li) as usize;
    u[(idx(0), idx(0))] = Complex64::new(1.0, 0.0);
    for m in 1..=li {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        u[(idx(m), idx(m))] = Complex64::new(sign * h, 0.0);
        u[(idx(m), idx(-m))] = Complex64::new(h, 0.0);
        u[(idx(-m), idx(m))] = Complex64::new(0.0, -sign * h);
        u[(idx(-m), idx(-m))] = Complex64::new(0.0, h);
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn scalar_representation() {
        let d = wigner_d(0, &Rotation::random(3)).unwrap();
        assert_eq!(d.matrix.shape(), (1, 1));
        assert!((d.matrix[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_maps_to_identity() {
        for l in 0..=L_MAX {
            let d = wigner_d(l, &Rotation::identity()).unwrap();
            let n = 2 * l + 1;
            assert!(max_abs(&(d.matrix - DMatrix::identity(n, n))) < 1e-12);
        }
    }

    #[test]
    fn degree_one_is_permuted_rotation() {
        // P maps (x,y,z) -> (y,z,x); D¹ = P R Pᵀ
        for seed in 0..20 {
            let r = Rotation::random(seed);
            let m = r.matrix();
            let perm = [1usize, 2, 0];
            let expect = DMatrix::from_fn(3, 3, |i, j| m[perm[i]][perm[j]]);
            let d = wigner_d(1, &r).unwrap();
            assert!(max_abs(&(d.matrix - expect)) < 1e-12);
        }
    }

    #[test]
    fn homomorphism_and_orthogonality() {
        for l in 0..=L_MAX {
            for trial in 0..50 {
                let r1 = Rotation::random(2 * trial);
                let r2 = Rotation::random(2 * trial + 1);
                let d12 = wigner_d(l, &r1.compose(&r2)).unwrap();
                let prod = wigner_d(l, &r1).unwrap().matrix * wigner_d(l, &r2).unwrap().matrix;
                assert!(max_abs(&(&d12.matrix - prod)) < 1e-10);
                let n = 2 * l + 1;
                let gram = d12.matrix.transpose() * &d12.matrix;
                assert!(max_abs(&(gram - DMatrix::identity(n, n))) < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_degree_above_limit() {
        assert!(matches!(
            wigner_d(L_MAX + 1, &Rotation::identity()),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn gimbal_lock_half_turn() {
        let r = Rotation::from_euler_zyz(0.4, std::f64::consts::PI, 0.0).unwrap();
        for l in 0..=L_MAX {
            let d = wigner_d(l, &r).unwrap();
            let r2 = Rotation::random(9);
            let lhs = wigner_d(l, &r.compose(&r2)).unwrap().matrix;
            let rhs = d.matrix * wigner_d(l, &r2).unwrap().matrix;
            assert!(max_abs(&(lhs - rhs)) < 1e-10);
        }
    }
}
