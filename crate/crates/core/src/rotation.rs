//! Single-plane rotations in the low-rank space.
//!
//! A plane is spanned by the expert's intermediate `u = A·x` and a learned
//! center `q`: `e1 = u/‖u‖` and `e2` is the normalized component of `q`
//! orthogonal to `e1`. The r-dimensional rotation turns the plane by θ and
//! leaves its orthogonal complement fixed, so θ = 0 is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};
use crate::scalar::Scalar;

/// Default threshold below which `‖u‖` or `‖e2*‖` count as zero.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RotationPlane<S> {
    pub e1: Vector<S>,
    pub e2: Vector<S>,
    /// `‖u‖` of the vector the plane was built from.
    pub u_norm: S,
    /// `‖e2*‖`, the length of `q` after removing its `e1` component.
    pub residual_norm: S,
    pub degenerate: bool,
}

/// Coordinates of a vector along `(e1, e2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarCoords<S> {
    pub c1: S,
    pub c2: S,
}

impl<S: Scalar> PlanarCoords<S> {
    pub fn norm(&self) -> S {
        self.c1.hypot(self.c2)
    }

    /// Polar angle in `(-π, π]`.
    pub fn angle(&self) -> S {
        self.c2.atan2(self.c1)
    }
}

impl<S: Scalar> RotationPlane<S> {
    pub fn dim(&self) -> usize {
        self.e1.dim()
    }

    pub fn coords(&self, v: &Vector<S>) -> PlanarCoords<S> {
        PlanarCoords { c1: v.dot(&self.e1), c2: v.dot(&self.e2) }
    }

    /// `c1·e1 + c2·e2`
    pub fn embed(&self, c: PlanarCoords<S>) -> Vector<S> {
        let mut out = self.e1.scaled(c.c1);
        out.axpy(c.c2, &self.e2);
        out
    }

    fn degenerate(r: usize, u_norm: S, residual_norm: S) -> Self {
        RotationPlane {
            e1: Vector::zeros(r),
            e2: Vector::zeros(r),
            u_norm,
            residual_norm,
            degenerate: true,
        }
    }
}

fn check_rank(r: usize) -> Result<()> {
    if r < 2 {
        return Err(Error::config(format!("rotation needs rank >= 2, got {r}")));
    }
    Ok(())
}

/// Gram-Schmidt plane through `u` and `q`. Degenerate when `‖u‖ ≤ eps` or the
/// part of `q` orthogonal to `u` has norm `≤ eps`.
pub fn build_plane<S: Scalar>(u: &Vector<S>, q: &Vector<S>, eps: S) -> Result<RotationPlane<S>> {
    let r = u.dim();
    check_rank(r)?;
    if q.dim() != r {
        return Err(Error::shape("build_plane", r, q.dim()));
    }
    let u_norm = u.l2_norm();
    if u_norm <= eps {
        return Ok(RotationPlane::degenerate(r, u_norm, S::zero()));
    }
    let e1 = u.scaled(S::one() / u_norm);
    let mut residual = q.clone();
    residual.axpy(-q.dot(&e1), &e1);
    let residual_norm = residual.l2_norm();
    if residual_norm <= eps {
        return Ok(RotationPlane::degenerate(r, u_norm, residual_norm));
    }
    let e2 = residual.scaled(S::one() / residual_norm);
    Ok(RotationPlane { e1, e2, u_norm, residual_norm, degenerate: false })
}

pub fn rotation_matrix_2d<S: Scalar>(theta: S) -> Matrix<S> {
    let (s, c) = theta.sin_cos();
    let mut m = Matrix::zeros(2, 2);
    m[(0, 0)] = c;
    m[(0, 1)] = -s;
    m[(1, 0)] = s;
    m[(1, 1)] = c;
    m
}

/// `d/dθ` of [`rotation_matrix_2d`].
pub fn rotation_matrix_2d_derivative<S: Scalar>(theta: S) -> Matrix<S> {
    rotation_matrix_2d(theta + S::FRAC_PI_2())
}

/// `I + (cosθ − 1)(e1e1ᵀ + e2e2ᵀ) + sinθ(e2e1ᵀ − e1e2ᵀ)`
pub fn rotation_matrix_r<S: Scalar>(plane: &RotationPlane<S>, theta: S) -> Result<Matrix<S>> {
    if plane.degenerate {
        return Err(Error::Degenerate("rotation matrix requested for a degenerate plane".into()));
    }
    let r = plane.dim();
    let (s, c) = theta.sin_cos();
    let mut m = Matrix::identity(r);
    m.add_outer(c - S::one(), &plane.e1, &plane.e1);
    m.add_outer(c - S::one(), &plane.e2, &plane.e2);
    m.add_outer(s, &plane.e2, &plane.e1);
    m.add_outer(-s, &plane.e1, &plane.e2);
    Ok(m)
}

/// `R·u` for a plane built from `u`: since `e1 ∥ u`, this is
/// `cosθ·u + sinθ·‖u‖·e2`. Degenerate planes leave `u` unchanged.
pub fn apply_rotation<S: Scalar>(u: &Vector<S>, plane: &RotationPlane<S>, theta: S) -> Vector<S> {
    if plane.degenerate {
        return u.clone();
    }
    let (s, c) = theta.sin_cos();
    let mut out = u.scaled(c);
    out.axpy(s * plane.u_norm, &plane.e2);
    out
}

/// `v = scale · Rotate(u, angle)` within `span(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<S> {
    pub scale: S,
    pub angle: S,
    pub plane: RotationPlane<S>,
}

impl<S: Scalar> Decomposition<S> {
    /// Rotates `u` by `angle` in the plane, then scales.
    pub fn reconstruct(&self, u: &Vector<S>) -> Vector<S> {
        let c = self.plane.coords(u);
        let (s, cs) = self.angle.sin_cos();
        let rotated = PlanarCoords { c1: cs * c.c1 - s * c.c2, c2: s * c.c1 + cs * c.c2 };
        self.plane.embed(rotated).scaled(self.scale)
    }
}

/// Splits the map `u ↦ v` into a scaling and an in-plane rotation. The angle
/// comes from `atan2` on the signed planar coordinates and lies in `(-π, π]`.
pub fn decompose_transform<S: Scalar>(u: &Vector<S>, v: &Vector<S>, eps: S) -> Result<Decomposition<S>> {
    let r = u.dim();
    check_rank(r)?;
    if v.dim() != r {
        return Err(Error::shape("decompose_transform", r, v.dim()));
    }
    if u.l2_norm() <= eps || v.l2_norm() <= eps {
        return Err(Error::Degenerate("decompose_transform needs two non-zero vectors".into()));
    }
    let mut plane = build_plane(u, v, eps)?;
    if plane.degenerate {
        // v ∥ u: any unit vector orthogonal to u completes the plane.
        let e1 = u.scaled(S::one() / plane.u_norm);
        let axis = (0..r)
            .min_by(|&a, &b| e1[a].abs().partial_cmp(&e1[b].abs()).unwrap())
            .unwrap();
        let mut basis = Vector::zeros(r);
        basis[axis] = S::one();
        plane = build_plane(u, &basis, eps)?;
        debug_assert!(!plane.degenerate);
    }
    let cu = plane.coords(u);
    let cv = plane.coords(v);
    let mut angle = cv.angle() - cu.angle();
    let pi = S::PI();
    if angle > pi {
        angle -= pi + pi;
    } else if angle <= -pi {
        angle += pi + pi;
    }
    Ok(Decomposition { scale: cv.norm() / cu.norm(), angle, plane })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn v(xs: &[f64]) -> Vector<f64> {
        Vector::from_f64(xs)
    }

    fn close(a: &Vector<f64>, b: &Vector<f64>, tol: f64) -> bool {
        a.sub(b).max_abs() < tol
    }

    #[test]
    fn plane_from_orthonormal_inputs() {
        let p = build_plane(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0]), 1e-8).unwrap();
        assert!(!p.degenerate);
        assert_eq!(p.e1, v(&[1.0, 0.0, 0.0]));
        assert_eq!(p.e2, v(&[0.0, 1.0, 0.0]));
    }

    #[test]
    fn plane_removes_parallel_component() {
        let p = build_plane(&v(&[2.0, 0.0, 0.0]), &v(&[1.0, 1.0, 0.0]), 1e-8).unwrap();
        assert!(close(&p.e1, &v(&[1.0, 0.0, 0.0]), 1e-15));
        assert!(close(&p.e2, &v(&[0.0, 1.0, 0.0]), 1e-15));
        assert_eq!(p.u_norm, 2.0);
    }

    #[test]
    fn degenerate_planes() {
        let par = build_plane(&v(&[1.0, 0.0, 0.0]), &v(&[2.0, 0.0, 0.0]), 1e-8).unwrap();
        assert!(par.degenerate);
        let zero_u = build_plane(&v(&[0.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0]), 1e-8).unwrap();
        assert!(zero_u.degenerate);
        let zero_q = build_plane(&v(&[1.0, 2.0, 3.0]), &v(&[0.0, 0.0, 0.0]), 1e-8).unwrap();
        assert!(zero_q.degenerate);
        let u = v(&[0.3, -0.2, 0.9]);
        assert_eq!(apply_rotation(&u, &par, 1.3), u);
        assert!(rotation_matrix_r(&par, 0.4).is_err());
    }

    #[test]
    fn rank_one_rejected() {
        assert!(matches!(build_plane(&v(&[1.0]), &v(&[1.0]), 1e-8), Err(Error::Config(_))));
        assert!(decompose_transform(&v(&[1.0]), &v(&[2.0]), 1e-8).is_err());
    }

    #[test]
    fn rotation_2d_examples() {
        assert_eq!(rotation_matrix_2d(0.0f64), Matrix::identity(2));
        let q = rotation_matrix_2d(FRAC_PI_2).matvec(&v(&[1.0, 0.0])).unwrap();
        assert!(close(&q, &v(&[0.0, 1.0]), 1e-15));
        let e = rotation_matrix_2d(FRAC_PI_4).matvec(&v(&[1.0, 1.0])).unwrap();
        assert!(close(&e, &v(&[0.0, 2f64.sqrt()]), 1e-15));
    }

    #[test]
    fn rotation_r_examples() {
        let p = build_plane(&v(&[0.4, -1.0, 2.0, 0.5]), &v(&[1.0, 1.0, 0.0, -1.0]), 1e-8).unwrap();
        assert!(rotation_matrix_r(&p, 0.0).unwrap().sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-15);

        let std2 = build_plane(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 1e-8).unwrap();
        for &t in &[0.3, -2.0, 3.0] {
            let diff = rotation_matrix_r(&std2, t).unwrap().sub(&rotation_matrix_2d(t)).unwrap();
            assert!(diff.max_abs() < 1e-15);
        }

        // Explicit quarter turn in the xy-plane of R³.
        let p3 = build_plane(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0]), 1e-8).unwrap();
        let r = rotation_matrix_r(&p3, FRAC_PI_2).unwrap();
        let expected = Matrix::from_rows(&[&[0.0, -1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!(r.sub(&expected).unwrap().max_abs() < 1e-15);
        assert!(close(&r.matvec(&v(&[1.0, 0.0, 0.0])).unwrap(), &v(&[0.0, 1.0, 0.0]), 1e-15));
        assert_eq!(r.matvec(&v(&[0.0, 0.0, 1.0])).unwrap(), v(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn apply_rotation_examples() {
        let u = v(&[1.0, 0.0, 0.0]);
        let p = build_plane(&u, &v(&[0.0, 1.0, 0.0]), 1e-8).unwrap();
        assert!(close(&apply_rotation(&u, &p, FRAC_PI_2), &v(&[0.0, 1.0, 0.0]), 1e-15));
        assert_eq!(apply_rotation(&u, &p, 0.0), u);
        let p2 = build_plane(&u, &v(&[0.0, 0.0, 1.0]), 1e-8).unwrap();
        assert!(close(&apply_rotation(&u, &p2, PI), &v(&[-1.0, 0.0, 0.0]), 1e-15));
    }

    #[test]
    fn decomposition_examples() {
        let d = decompose_transform(&v(&[1.0, 0.0]), &v(&[0.0, 2.0]), 1e-8).unwrap();
        assert!((d.scale - 2.0).abs() < 1e-15);
        assert!((d.angle - FRAC_PI_2).abs() < 1e-15);
        let same = decompose_transform(&v(&[3.0, 4.0]), &v(&[3.0, 4.0]), 1e-8).unwrap();
        assert!((same.scale - 1.0).abs() < 1e-15);
        assert!(same.angle.abs() < 1e-15);
        assert!(decompose_transform(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 1e-8).is_err());
    }

    #[test]
    fn decomposition_of_antiparallel_pair() {
        let u = v(&[1.0, 2.0, -1.0]);
        let w = u.scaled(-0.5);
        let d = decompose_transform(&u, &w, 1e-8).unwrap();
        assert!((d.angle - PI).abs() < 1e-12);
        assert!((d.scale - 0.5).abs() < 1e-15);
        assert!(close(&d.reconstruct(&u), &w, 1e-12));
    }

    #[test]
    fn f32_plane_is_orthonormal() {
        let u = Vector::<f32>::from_f64(&[0.5, 1.0, -2.0]);
        let q = Vector::<f32>::from_f64(&[1.0, 0.0, 1.0]);
        let p = build_plane(&u, &q, 1e-6).unwrap();
        assert!((p.e1.l2_norm() - 1.0).abs() < 1e-6);
        assert!(p.e1.dot(&p.e2).abs() < 1e-6);
    }
}
