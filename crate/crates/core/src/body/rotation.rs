use autodiff::{Tape, Tensor, Var};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::skeleton::NUM_JOINTS;
use crate::error::{Error, Result};

const DEGENERATE_NORM: f64 = 1e-8;
/// Added under the square root on the tape so that norms stay differentiable
/// for the unconstrained rows seen mid-diffusion.
const TAPE_NORM_EPS: f64 = 1e-16;

/// Per-joint 6D rotations; row 0 is the global orientation.
///
/// Each row stores the first two columns `(u, v)` of a rotation matrix. Rows
/// of noisy intermediate states need not be orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub [[f64; 6]; NUM_JOINTS]);

impl Default for Pose {
    fn default() -> Self {
        Pose([IDENTITY_6D; NUM_JOINTS])
    }
}

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl Pose {
    pub fn from_matrices(rots: &[Matrix3<f64>; NUM_JOINTS]) -> Self {
        let mut p = [[0.0; 6]; NUM_JOINTS];
        for (row, r) in p.iter_mut().zip(rots) {
            *row = matrix_to_rot6d(r);
        }
        Pose(p)
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if data.len() != NUM_JOINTS * 6 {
            return Err(Error::InvalidArgument(format!(
                "pose needs {} values, got {}",
                NUM_JOINTS * 6,
                data.len()
            )));
        }
        let mut p = [[0.0; 6]; NUM_JOINTS];
        for (row, chunk) in p.iter_mut().zip(data.chunks(6)) {
            row.copy_from_slice(chunk);
        }
        Ok(Pose(p))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![NUM_JOINTS, 6], self.flat()).expect("fixed shape")
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Rotation matrices of every joint; fails on the first degenerate row.
    pub fn matrices(&self) -> Result<[Matrix3<f64>; NUM_JOINTS]> {
        let mut out = [Matrix3::identity(); NUM_JOINTS];
        for (j, row) in self.0.iter().enumerate() {
            out[j] = rot6d_to_matrix(row).map_err(|detail| Error::DegenerateRotation { joint: j, detail })?;
        }
        Ok(out)
    }
}

/// Gram–Schmidt on the two 3-vectors of a 6D row; the third column is their
/// cross product.
pub fn rot6d_to_matrix(row: &[f64; 6]) -> std::result::Result<Matrix3<f64>, &'static str> {
    let u = Vector3::new(row[0], row[1], row[2]);
    let v = Vector3::new(row[3], row[4], row[5]);
    let nu = u.norm();
    if !(nu > DEGENERATE_NORM) {
        return Err("first vector has near-zero norm");
    }
    let a = u / nu;
    let w = v - a * a.dot(&v);
    let nw = w.norm();
    if !(nw > DEGENERATE_NORM) {
        return Err("second vector is parallel to the first");
    }
    let b = w / nw;
    let c = a.cross(&b);
    Ok(Matrix3::from_columns(&[a, b, c]))
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

pub fn axis_angle(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let axis = Vector3::from(axis);
    if axis.norm() == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

/// Rotation about the vertical (y) axis.
pub fn yaw(angle: f64) -> Matrix3<f64> {
    axis_angle([0.0, 1.0, 0.0], angle)
}

/// Sum over rows of `(|u| - 1)^2 + (|v| - 1)^2 + (u.v)^2`.
pub fn orthonormal_penalty(pose: &Pose) -> f64 {
    pose.0
        .iter()
        .map(|r| {
            let u = Vector3::new(r[0], r[1], r[2]);
            let v = Vector3::new(r[3], r[4], r[5]);
            (u.norm() - 1.0).powi(2) + (v.norm() - 1.0).powi(2) + u.dot(&v).powi(2)
        })
        .sum()
}

/// Converts `[r, 6]` rows into `[r, 9]` column-major rotation matrices.
pub fn tape_rot6d_to_matrix(tape: &mut Tape, rows: Var) -> Result<Var> {
    let u = tape.slice_cols(rows, 0, 3)?;
    let v = tape.slice_cols(rows, 3, 6)?;
    let a = tape_normalize(tape, u)?;
    let av = tape.mul(a, v)?;
    let dot = tape.sum_last(av)?;
    let proj = tape.mul(a, dot)?;
    let w = tape.sub(v, proj)?;
    let b = tape_normalize(tape, w)?;
    let c = tape.cross3(a, b)?;
    Ok(tape.concat_cols(&[a, b, c])?)
}

fn tape_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape_norm(tape, x)?;
    Ok(tape.div(x, n)?)
}

fn tape_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let s = tape.sum_last(sq)?;
    let s = tape.add_scalar(s, TAPE_NORM_EPS)?;
    Ok(tape.sqrt(s)?)
}

/// Orthonormality penalty of `[r, 6]` rows, summed over rows.
pub fn tape_orthonormal_penalty(tape: &mut Tape, rows: Var) -> Result<Var> {
    let u = tape.slice_cols(rows, 0, 3)?;
    let v = tape.slice_cols(rows, 3, 6)?;
    let mut terms = Vec::with_capacity(3);
    for x in [u, v] {
        let sq = tape.square(x)?;
        let s = tape.sum_last(sq)?;
        // No epsilon here: the penalty must vanish exactly on unit rows.
        let n = tape.sqrt(s)?;
        let d = tape.add_scalar(n, -1.0)?;
        terms.push(tape.square(d)?);
    }
    let uv = tape.mul(u, v)?;
    let dot = tape.sum_last(uv)?;
    terms.push(tape.square(dot)?);
    let s01 = tape.add(terms[0], terms[1])?;
    let all = tape.add(s01, terms[2])?;
    Ok(tape.sum(all)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_row_gives_identity() {
        let r = rot6d_to_matrix(&IDENTITY_6D).unwrap();
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn swapped_axes_give_proper_rotation() {
        let r = rot6d_to_matrix(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let expected = Matrix3::from_columns(&[
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
        ]);
        assert_eq!(r, expected);
        assert!((r.determinant() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rows_are_errors() {
        assert!(rot6d_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
        let mut p = Pose::default();
        p.0[7] = [0.0; 6];
        match p.matrices() {
            Err(Error::DegenerateRotation { joint, .. }) => assert_eq!(joint, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matrix_round_trip() {
        let r = axis_angle([0.3, -0.5, 0.8], 1.1);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
        assert!((back - r).norm() < 1e-14);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(orthonormal_penalty(&Pose::default()), 0.0);
        let mut p = Pose::default();
        p.0[3] = [2.0, 0.0, 0.0, 0.0, 2.0, 0.0];
        assert_eq!(orthonormal_penalty(&p), 2.0);
    }

    #[test]
    fn tape_conversion_matches_numeric() {
        let rows = [[0.3, -1.2, 0.5, 0.9, 0.4, -0.1], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]];
        let mut tape = Tape::new();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::new(vec![2, 6], data).unwrap());
        let m = tape_rot6d_to_matrix(&mut tape, x).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let r = rot6d_to_matrix(row).unwrap();
            let got = &tape.value(m).data()[i * 9..i * 9 + 9];
            for (k, g) in got.iter().enumerate() {
                assert!((g - r.as_slice()[k]).abs() < 1e-14);
            }
        }
    }
}
