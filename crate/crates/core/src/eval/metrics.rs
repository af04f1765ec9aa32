//! Per-sample accuracy, plausibility and diversity measures. Distances are
//! returned in millimetres.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{contact, hard_collision_ratio, Joints, Skeleton};

const MM: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Global,
    Pelvis,
    Procrustes,
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Least-squares similarity transform taking `src` onto `dst` (orthogonal
/// alignment through the SVD of the cross-covariance, reflections
/// excluded). `None` for fewer than three points or a collinear source.
pub fn procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Similarity> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let (ms, md) = (centroid(src), centroid(dst));
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose();
        spread += a * a.transpose();
        var += a.norm_squared();
    }
    // a collinear source has a rank-1 scatter matrix
    let ev = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum();
    let scale = trace / var;
    Some(Similarity {
        scale,
        rotation,
        translation: md - scale * rotation * ms,
    })
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64 * MM
}

/// Mean error over the joints selected by `mask`, in mm. Pelvis mode
/// subtracts each body's root (joint 0) first; Procrustes mode fits the
/// similarity on the selected joints only. `None` when nothing is selected
/// or the alignment is degenerate.
pub fn mpjpe(pred: &Joints, gt: &Joints, mask: &[bool], mode: AlignMode) -> Option<f64> {
    let idx: Vec<usize> = (0..pred.len()).filter(|&j| mask[j]).collect();
    if idx.is_empty() {
        return None;
    }
    let pick = |p: &Joints, origin: Vector3<f64>| -> Vec<Vector3<f64>> { idx.iter().map(|&j| p[j] - origin).collect() };
    match mode {
        AlignMode::Global => Some(mean_distance(&pick(pred, Vector3::zeros()), &pick(gt, Vector3::zeros()))),
        AlignMode::Pelvis => Some(mean_distance(&pick(pred, pred[0]), &pick(gt, gt[0]))),
        AlignMode::Procrustes => {
            let (p, g) = (pick(pred, Vector3::zeros()), pick(gt, Vector3::zeros()));
            let sim = procrustes(&p, &g)?;
            let aligned: Vec<Vector3<f64>> = p.iter().map(|x| sim.apply(x)).collect();
            Some(mean_distance(&aligned, &g))
        }
    }
}

/// Best pelvis-aligned error over the `invisible` joints among `samples`.
pub fn min_of_n_mpjpe(samples: &[Joints], gt: &Joints, invisible: &[bool]) -> Option<f64> {
    samples
        .iter()
        .filter_map(|s| mpjpe(s, gt, invisible, AlignMode::Pelvis))
        .min_by(f64::total_cmp)
}

/// Hard collision ratio against `denominator` points and the contact flag.
pub fn collision_contact(
    skel: &Skeleton,
    joints: &Joints,
    points: &[Vector3<f64>],
    denominator: usize,
    threshold: f64,
) -> (f64, bool) {
    (
        hard_collision_ratio(skel, joints, points, denominator),
        contact(skel, joints, points, threshold),
    )
}

/// Spread of the selected joints across samples, in mm: the per-coordinate
/// population standard deviation averaged over joints and coordinates, and
/// the mean over unordered sample pairs of the mean per-joint distance.
/// `None` with fewer than two samples or no selected joint.
pub fn diversity(samples: &[Joints], mask: &[bool]) -> Option<(f64, f64)> {
    let n = samples.len();
    let idx: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    if n < 2 || idx.is_empty() {
        return None;
    }
    let mut std = 0.0;
    for &j in &idx {
        for c in 0..3 {
            let mean = samples.iter().map(|s| s[j][c]).sum::<f64>() / n as f64;
            let var = samples.iter().map(|s| (s[j][c] - mean).powi(2)).sum::<f64>() / n as f64;
            std += var.sqrt();
        }
    }
    std /= (idx.len() * 3) as f64;
    let mut apd = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            apd += idx.iter().map(|&j| (samples[a][j] - samples[b][j]).norm()).sum::<f64>() / idx.len() as f64;
            pairs += 1;
        }
    }
    Some((std * MM, apd / pairs as f64 * MM))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{axis_angle, NUM_JOINTS};

    fn body(seed: f64) -> Joints {
        let mut j = [Vector3::zeros(); NUM_JOINTS];
        for (k, p) in j.iter_mut().enumerate() {
            let x = k as f64 + seed;
            *p = Vector3::new((x * 0.7).sin(), (x * 1.3).cos(), (x * 0.37).sin() * 0.5);
        }
        j
    }

    #[test]
    fn identical_bodies_have_zero_error() {
        let b = body(0.0);
        let mask = [true; NUM_JOINTS];
        for mode in [AlignMode::Global, AlignMode::Pelvis, AlignMode::Procrustes] {
            assert!(mpjpe(&b, &b, &mask, mode).unwrap() < 1e-9);
        }
    }

    #[test]
    fn offset_and_rigid_motion() {
        let gt = body(0.0);
        let mask = [true; NUM_JOINTS];
        let off = Vector3::new(0.01, -0.02, 0.03);
        let shifted: Joints = gt.map(|p| p + off);
        assert!((mpjpe(&shifted, &gt, &mask, AlignMode::Global).unwrap() - off.norm() * MM).abs() < 1e-9);
        assert!(mpjpe(&shifted, &gt, &mask, AlignMode::Pelvis).unwrap() < 1e-9);
        let r = axis_angle([0.2, 1.0, -0.3], 0.8);
        let moved: Joints = gt.map(|p| 1.3 * r * p + off);
        assert!(mpjpe(&moved, &gt, &mask, AlignMode::Global).unwrap() > 1.0);
        assert!(mpjpe(&moved, &gt, &mask, AlignMode::Procrustes).unwrap() < 1e-6);
    }

    #[test]
    fn degenerate_alignment_is_skipped() {
        let gt = body(0.0);
        let mut mask = [false; NUM_JOINTS];
        mask[3] = true;
        mask[5] = true;
        assert!(mpjpe(&gt, &gt, &mask, AlignMode::Procrustes).is_none());
        let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(procrustes(&line, &line).is_none());
        assert!(mpjpe(&gt, &gt, &[false; NUM_JOINTS], AlignMode::Global).is_none());
    }

    #[test]
    fn min_of_n_properties() {
        let gt = body(0.0);
        let mask: Vec<bool> = (0..NUM_JOINTS).map(|j| j % 2 == 0).collect();
        let s: Vec<Joints> = (1..6).map(|k| body(0.05 * k as f64)).collect();
        let one = min_of_n_mpjpe(&s[..1], &gt, &mask).unwrap();
        assert_eq!(one, mpjpe(&s[0], &gt, &mask, AlignMode::Pelvis).unwrap());
        let all = min_of_n_mpjpe(&s, &gt, &mask).unwrap();
        assert!(all <= min_of_n_mpjpe(&s[1..3], &gt, &mask).unwrap());
        let doubled: Vec<Joints> = s.iter().chain(&s).copied().collect();
        assert_eq!(min_of_n_mpjpe(&doubled, &gt, &mask).unwrap(), all);
        assert!(min_of_n_mpjpe(&s, &gt, &[false; NUM_JOINTS]).is_none());
    }

    #[test]
    fn diversity_closed_forms() {
        let a = body(0.0);
        let (s0, a0) = diversity(&[a, a, a], &[true; NUM_JOINTS]).unwrap();
        assert!(s0 < 1e-9 && a0 == 0.0);
        let b: Joints = a.map(|p| p + Vector3::repeat(0.01));
        let (std, apd) = diversity(&[a, b], &[true; NUM_JOINTS]).unwrap();
        assert!((apd - 10.0 * 3f64.sqrt()).abs() < 1e-9);
        // two points 10 mm apart have a population std of 5 mm
        assert!((std - 5.0).abs() < 1e-9);
        let c = body(0.3);
        let fwd = diversity(&[a, b, c], &[true; NUM_JOINTS]).unwrap();
        let rev = diversity(&[c, a, b], &[true; NUM_JOINTS]).unwrap();
        assert!((fwd.0 - rev.0).abs() < 1e-12 && (fwd.1 - rev.1).abs() < 1e-12);
        assert!(diversity(&[a], &[true; NUM_JOINTS]).is_none());
    }
}
