use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 24;
pub const NUM_BONES: usize = NUM_JOINTS - 1;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

/// Parent of each joint; the pelvis is the root.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// Rest offsets of an average adult in meters: y up, facing +z, left is +x.
const REST_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.02],
    [0.04, -0.38, 0.0],
    [-0.04, -0.38, 0.0],
    [0.0, 0.13, 0.0],
    [-0.01, -0.40, -0.04],
    [0.01, -0.40, -0.04],
    [0.0, 0.05, 0.02],
    [0.02, -0.05, 0.12],
    [-0.02, -0.05, 0.12],
    [0.0, 0.21, -0.03],
    [0.07, 0.12, -0.01],
    [-0.07, 0.12, -0.01],
    [0.0, 0.09, 0.05],
    [0.11, 0.04, -0.01],
    [-0.11, 0.04, -0.01],
    [0.26, 0.0, -0.02],
    [-0.26, 0.0, -0.02],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
    [0.08, -0.01, -0.01],
    [-0.08, -0.01, -0.01],
];

/// Capsule radius of the bone ending at each joint (index 0 unused).
const BONE_RADII: [f64; NUM_JOINTS] = [
    0.0, 0.09, 0.09, 0.12, 0.07, 0.07, 0.12, 0.05, 0.05, 0.12, 0.04, 0.04, 0.06, 0.06, 0.06, 0.1, 0.06, 0.06,
    0.045, 0.045, 0.045, 0.045, 0.035, 0.035,
];

/// Kinematic tree plus the capsule geometry attached to its bones.
///
/// Bone `b` (for `b` in `0..NUM_BONES`) connects joint `b + 1` to its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Parent of each joint; stored as `-1` for the root in config files.
    #[serde(with = "parent_index")]
    pub parents: Vec<Option<usize>>,
    pub rest_offsets: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
    /// Softness of the occupancy boundary, in meters.
    pub tau: f64,
    /// Seed of the fixed linear map from shape coefficients to bone scales.
    pub shape_seed: u64,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self {
            parents: PARENTS.to_vec(),
            rest_offsets: REST_OFFSETS.to_vec(),
            radii: BONE_RADII[1..].to_vec(),
            tau: 0.05,
            shape_seed: 0x5eed_b0d1,
        }
    }
}

impl Skeleton {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("skeleton: {msg}")));
        if self.parents.len() != NUM_JOINTS || self.rest_offsets.len() != NUM_JOINTS {
            return bad(format!("expected {NUM_JOINTS} joints"));
        }
        if self.radii.len() != NUM_BONES {
            return bad(format!("expected {NUM_BONES} radii"));
        }
        if self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for j in 1..NUM_JOINTS {
            match self.parents[j] {
                Some(p) if p < j => {}
                _ => return bad(format!("joint {j} must have a parent with a smaller index")),
            }
            if self.rest_offsets[j].iter().all(|&v| v == 0.0) {
                return bad(format!("joint {j} has a zero rest offset"));
            }
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return bad("radii must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        Ok(())
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    /// Depth of every joint (root = 0).
    pub fn depths(&self) -> Vec<usize> {
        let mut d = vec![0; NUM_JOINTS];
        for j in 1..NUM_JOINTS {
            d[j] = d[self.parents[j].expect("non-root joint")] + 1;
        }
        d
    }

    /// Joints grouped by depth, each group in ascending index order.
    pub fn levels(&self) -> Vec<Vec<usize>> {
        let d = self.depths();
        let max = d.iter().copied().max().unwrap_or(0);
        (0..=max).map(|l| (0..NUM_JOINTS).filter(|&j| d[j] == l).collect()).collect()
    }

    /// Undirected skeleton edges `(parent, child)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..NUM_JOINTS).map(|j| (self.parents[j].expect("non-root joint"), j)).collect()
    }

    /// All-pairs hop distances over the skeleton graph.
    pub fn hop_distances(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); NUM_JOINTS];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        (0..NUM_JOINTS)
            .map(|s| {
                let mut dist = vec![usize::MAX; NUM_JOINTS];
                dist[s] = 0;
                let mut queue = std::collections::VecDeque::from([s]);
                while let Some(u) = queue.pop_front() {
                    for &v in &adj[u] {
                        if dist[v] == usize::MAX {
                            dist[v] = dist[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    /// Row-normalized adjacency with self loops, `D^-1 (A + I)`, row-major.
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        let mut a = vec![0.0; NUM_JOINTS * NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            a[j * NUM_JOINTS + j] = 1.0;
        }
        for (p, c) in self.edges() {
            a[p * NUM_JOINTS + c] = 1.0;
            a[c * NUM_JOINTS + p] = 1.0;
        }
        for row in a.chunks_mut(NUM_JOINTS) {
            let deg: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= deg);
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skeleton_is_a_valid_tree() {
        let s = Skeleton::default();
        s.validate().unwrap();
        assert_eq!(s.levels().iter().map(Vec::len).sum::<usize>(), NUM_JOINTS);
        assert_eq!(s.levels()[0], vec![0]);
        let hops = s.hop_distances();
        assert_eq!(hops[0][3], 1);
        assert_eq!(hops[10][11], 8);
        assert!(hops.iter().flatten().all(|&h| h < NUM_JOINTS));
    }

    #[test]
    fn normalized_adjacency_rows_sum_to_one() {
        let a = Skeleton::default().normalized_adjacency();
        for row in a.chunks(NUM_JOINTS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        // pelvis has three children plus itself
        assert_eq!(a[0], 0.25);
    }
}

mod parent_index {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(parents: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<i64> = parents.iter().map(|p| p.map_or(-1, |i| i as i64)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
        let v = Vec::<i64>::deserialize(d)?;
        v.into_iter()
            .map(|i| match i {
                -1 => Ok(None),
                i if i >= 0 => Ok(Some(i as usize)),
                i => Err(serde::de::Error::custom(format!("invalid parent index {i}"))),
            })
            .collect()
    }
}
