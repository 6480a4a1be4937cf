//! Real orthonormal spherical harmonics.
//!
//! Components are ordered `m = -l..=l`. Negative `m` carries the `sin(|m|φ)`
//! part, positive `m` the `cos(mφ)` part, and no Condon–Shortley phase is
//! applied, so degree 1 reads `√(3/4π)·(y, z, x)`.

use std::f64::consts::PI;

use super::L_MAX;
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

/// Evaluates the degree-`l` real spherical harmonics at a unit vector.
pub fn real_sph_harm(l: usize, v: [f64; 3]) -> Result<Vec<f64>> {
    if l > L_MAX {
        return Err(Error::Capability(format!("degree {l} exceeds l_max = {L_MAX}")));
    }
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::param(format!("expected a unit vector, |v| = {norm}")));
    }
    Ok(sph_harm_unchecked(l, v))
}

/// All degrees `0..=lmax` concatenated, for a unit vector.
pub fn sph_harm_upto(lmax: usize, v: [f64; 3]) -> Vec<Vec<f64>> {
    (0..=lmax).map(|l| sph_harm_unchecked(l, v)).collect()
}

pub(crate) fn sph_harm_unchecked(l: usize, v: [f64; 3]) -> Vec<f64> {
    let [x, y, z] = v;
    let li = l as i64;
    let mut out = vec![0.0; 2 * l + 1];
    // Re/Im of (x + iy)^m
    let mut cos_part = vec![1.0; l + 1];
    let mut sin_part = vec![0.0; l + 1];
    for m in 1..=l {
        cos_part[m] = cos_part[m - 1] * x - sin_part[m - 1] * y;
        sin_part[m] = sin_part[m - 1] * x + cos_part[m - 1] * y;
    }
    for m in 0..=l {
        let q = legendre_derivative(l, m, z);
        let mut norm = ((2 * l + 1) as f64 / (4.0 * PI) * factorial_ratio(l - m, l + m)).sqrt();
        if m > 0 {
            norm *= std::f64::consts::SQRT_2;
        }
        let mi = m as i64;
        out[(li + mi) as usize] = norm * q * cos_part[m];
        if m > 0 {
            out[(li - mi) as usize] = norm * q * sin_part[m];
        }
    }
    out
}

/// `d^m P_l(z) / dz^m`, without the Condon–Shortley phase.
fn legendre_derivative(l: usize, m: usize, z: f64) -> f64 {
    // Q_m^m = (2m-1)!!
    let mut q_mm = 1.0;
    for k in 0..m {
        q_mm *= (2 * k + 1) as f64;
    }
    if l == m {
        return q_mm;
    }
    let mut q_prev = q_mm;
    let mut q_cur = (2 * m + 1) as f64 * z * q_mm;
    for ll in (m + 2)..=l {
        let next = ((2 * ll - 1) as f64 * z * q_cur - (ll + m - 1) as f64 * q_prev) / (ll - m) as f64;
        q_prev = q_cur;
        q_cur = next;
    }
    q_cur
}

/// `a! / b!`
fn factorial_ratio(a: usize, b: usize) -> f64 {
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    fact(a) / fact(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{wigner_d, Rotation};

    /// Gauss–Legendre nodes on [-1,1] via Newton iteration.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    /// Gram matrix of all real harmonics up to `lmax` by product quadrature.
    fn quadrature_gram(lmax: usize) -> Vec<Vec<f64>> {
        let nodes = gauss_legendre(lmax + 2);
        let nphi = 2 * lmax + 3;
        let dim = (lmax + 1) * (lmax + 1);
        let mut gram = vec![vec![0.0; dim]; dim];
        for &(z, w) in &nodes {
            for k in 0..nphi {
                let phi = 2.0 * PI * k as f64 / nphi as f64;
                let s = (1.0 - z * z).sqrt();
                let v = [s * phi.cos(), s * phi.sin(), z];
                let ys: Vec<f64> = sph_harm_upto(lmax, v).into_iter().flatten().collect();
                let weight = w * 2.0 * PI / nphi as f64;
                for a in 0..dim {
                    for b in 0..dim {
                        gram[a][b] += weight * ys[a] * ys[b];
                    }
                }
            }
        }
        gram
    }

    #[test]
    fn orthonormal_by_quadrature() {
        let gram = quadrature_gram(L_MAX);
        for (a, row) in gram.iter().enumerate() {
            for (b, g) in row.iter().enumerate() {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((g - expect).abs() < 1e-12, "gram[{a}][{b}] = {g}");
            }
        }
    }

    #[test]
    fn degree_zero_constant() {
        let y = real_sph_harm(0, [0.6, 0.0, 0.8]).unwrap();
        assert!((y[0] - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degree_one_along_z() {
        let y = real_sph_harm(1, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[2], 0.0);
        assert!((y[1] - (3.0 / (4.0 * PI)).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degree_one_is_yzx() {
        let v = [0.48, 0.6, 0.64];
        let y = real_sph_harm(1, v).unwrap();
        let c = (3.0 / (4.0 * PI)).sqrt();
        for (got, want) in y.iter().zip([v[1], v[2], v[0]]) {
            assert!((got - c * want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_unit() {
        assert!(real_sph_harm(1, [1.0, 1.0, 0.0]).is_err());
        assert!(real_sph_harm(L_MAX + 1, [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn equivariance_under_rotation() {
        for l in 0..=L_MAX {
            for trial in 0..100u64 {
                let r = Rotation::random(1000 + trial);
                let v = Rotation::random(5000 + trial).apply([0.0, 0.0, 1.0]);
                let d = wigner_d(l, &r).unwrap();
                let lhs = real_sph_harm(l, r.apply(v)).unwrap();
                let rhs = d.apply(&real_sph_harm(l, v).unwrap());
                for (a, b) in lhs.iter().zip(&rhs) {
                    assert!((a - b).abs() < 1e-10, "l={l} {a} vs {b}");
                }
            }
        }
    }
}
