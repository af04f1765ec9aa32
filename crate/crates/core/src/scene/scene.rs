use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const SCENE_POINTS: usize = 20_000;
/// Half side of the square horizontal crop window, in meters.
pub const CROP_HALF_SIDE: f64 = 1.0;
const FLOOR_JITTER: f64 = 0.005;
const FLOOR_X: (f64, f64) = (-2.0, 2.0);
const FLOOR_Z: (f64, f64) = (-2.5, 1.5);
const WALL_HEIGHT: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneTemplate {
    #[serde(rename = "floor")]
    Floor,
    #[serde(rename = "floor+seat")]
    FloorSeat,
    #[serde(rename = "floor+box+wall")]
    FloorBoxWall,
}

impl SceneTemplate {
    pub const ALL: [SceneTemplate; 3] = [SceneTemplate::Floor, SceneTemplate::FloorSeat, SceneTemplate::FloorBoxWall];

    pub fn name(self) -> &'static str {
        match self {
            SceneTemplate::Floor => "floor",
            SceneTemplate::FloorSeat => "floor+seat",
            SceneTemplate::FloorBoxWall => "floor+box+wall",
        }
    }

    pub(crate) fn index(self) -> u64 {
        match self {
            SceneTemplate::Floor => 0,
            SceneTemplate::FloorSeat => 1,
            SceneTemplate::FloorBoxWall => 2,
        }
    }
}

impl std::str::FromStr for SceneTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneTemplate::ALL
            .into_iter()
            .find(|t| t.name() == s || format!("{t:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceTag {
    Floor,
    Seat,
    Wall,
    Clutter,
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Cuboid {
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    fn faces(&self) -> [(usize, f64, f64); 5] {
        // (normal axis, fixed coordinate, area) for the top and four sides;
        // the bottom rests on the floor and is not sampled.
        let [dx, dy, dz] = [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ];
        [
            (1, self.max[1], dx * dz),
            (0, self.min[0], dy * dz),
            (0, self.max[0], dy * dz),
            (2, self.min[2], dx * dy),
            (2, self.max[2], dx * dy),
        ]
    }

    fn area(&self) -> f64 {
        self.faces().iter().map(|f| f.2).sum()
    }

    fn sample(&self, r: &mut ChaCha8Rng) -> Vector3<f64> {
        let faces = self.faces();
        let mut pick = r.random::<f64>() * self.area();
        let mut face = faces[faces.len() - 1];
        for f in faces {
            if pick < f.2 {
                face = f;
                break;
            }
            pick -= f.2;
        }
        let mut p = [0.0; 3];
        for (k, v) in p.iter_mut().enumerate() {
            *v = if k == face.0 {
                face.1
            } else {
                r.random_range(self.min[k]..=self.max[k])
            };
        }
        Vector3::from(p)
    }
}

/// Object placement of one generated scene, in world coordinates (floor at
/// y = 0, interaction spot near the origin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub template: SceneTemplate,
    pub seat: Option<Cuboid>,
    pub table: Option<Cuboid>,
    /// The wall is the plane `z = wall_z`, facing -z.
    pub wall_z: Option<f64>,
}

impl SceneLayout {
    fn sample(template: SceneTemplate, r: &mut ChaCha8Rng) -> Self {
        let mut layout = SceneLayout {
            template,
            seat: None,
            table: None,
            wall_z: None,
        };
        match template {
            SceneTemplate::Floor => {}
            SceneTemplate::FloorSeat => {
                let h = r.random_range(0.38..0.46);
                let hw = r.random_range(0.22..0.28);
                layout.seat = Some(Cuboid {
                    min: [-hw, 0.0, r.random_range(-0.26..-0.2)],
                    max: [hw, h, r.random_range(0.22..0.28)],
                });
            }
            SceneTemplate::FloorBoxWall => {
                let x0 = r.random_range(0.45..0.55);
                layout.table = Some(Cuboid {
                    min: [x0, 0.0, r.random_range(-0.35..-0.25)],
                    max: [x0 + r.random_range(0.4..0.6), r.random_range(0.7..0.8), r.random_range(0.15..0.25)],
                });
                layout.wall_z = Some(r.random_range(0.25..0.35));
            }
        }
        layout
    }
}

/// Scene points with per-point surface tags. Points are in world
/// coordinates as generated; [`ScenePointCloud::translated`] moves them into
/// a camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointCloud {
    pub points: Vec<Vector3<f64>>,
    pub tags: Vec<SurfaceTag>,
}

impl ScenePointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point shifted by `-origin`.
    pub fn translated(&self, origin: &Vector3<f64>) -> ScenePointCloud {
        ScenePointCloud {
            points: self.points.iter().map(|p| p - origin).collect(),
            tags: self.tags.clone(),
        }
    }
}

/// Object layout of the scene [`generate_scene`] builds for the same inputs.
pub fn generate_layout(seed: u64, template: SceneTemplate) -> SceneLayout {
    let mut r = rng::stream(seed, rng::STREAM_SCENE, template.index(), 0);
    SceneLayout::sample(template, &mut r)
}

/// Deterministic scene of [`SCENE_POINTS`] points sampled uniformly by area
/// over the template's surfaces.
pub fn generate_scene(seed: u64, template: SceneTemplate) -> (ScenePointCloud, SceneLayout) {
    let mut r = rng::stream(seed, rng::STREAM_SCENE, template.index(), 0);
    let layout = SceneLayout::sample(template, &mut r);

    let floor_area = (FLOOR_X.1 - FLOOR_X.0) * (FLOOR_Z.1 - FLOOR_Z.0);
    let mut surfaces: Vec<(SurfaceTag, f64)> = vec![(SurfaceTag::Floor, floor_area)];
    if let Some(seat) = layout.seat {
        surfaces.push((SurfaceTag::Seat, seat.area()));
    }
    if let Some(table) = layout.table {
        surfaces.push((SurfaceTag::Clutter, table.area()));
    }
    if layout.wall_z.is_some() {
        surfaces.push((SurfaceTag::Wall, (FLOOR_X.1 - FLOOR_X.0) * WALL_HEIGHT));
    }
    let total: f64 = surfaces.iter().map(|s| s.1).sum();

    // Largest-remainder split of the point budget by area.
    let mut counts: Vec<usize> = surfaces
        .iter()
        .map(|s| (s.1 / total * SCENE_POINTS as f64).floor() as usize)
        .collect();
    let mut rem: Vec<(usize, f64)> = surfaces
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.1 / total * SCENE_POINTS as f64 - counts[i] as f64))
        .collect();
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let missing = SCENE_POINTS - counts.iter().sum::<usize>();
    for &(i, _) in rem.iter().take(missing) {
        counts[i] += 1;
    }

    let mut points = Vec::with_capacity(SCENE_POINTS);
    let mut tags = Vec::with_capacity(SCENE_POINTS);
    for ((tag, _), &n) in surfaces.iter().zip(&counts) {
        for _ in 0..n {
            let p = match tag {
                SurfaceTag::Floor => Vector3::new(
                    r.random_range(FLOOR_X.0..FLOOR_X.1),
                    r.random_range(-FLOOR_JITTER..=FLOOR_JITTER),
                    r.random_range(FLOOR_Z.0..FLOOR_Z.1),
                ),
                SurfaceTag::Seat => layout.seat.expect("seat surface").sample(&mut r),
                SurfaceTag::Clutter => layout.table.expect("table surface").sample(&mut r),
                SurfaceTag::Wall => Vector3::new(
                    r.random_range(FLOOR_X.0..FLOOR_X.1),
                    r.random_range(0.0..WALL_HEIGHT),
                    layout.wall_z.expect("wall surface"),
                ),
            };
            points.push(p);
            tags.push(*tag);
        }
    }
    (ScenePointCloud { points, tags }, layout)
}

/// Fixed-size crop around an estimated pelvis position.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCrop {
    /// Points shifted by `-gamma_hat`; empty when nothing fell in the window.
    pub points: Vec<Vector3<f64>>,
    /// Number of distinct points inside the window before resizing.
    pub unique: usize,
}

impl SceneCrop {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Keeps points within ±1 m of `gamma_hat` along x and z (vertical extent is
/// unbounded), re-centers them on `gamma_hat`, then resizes to `m` points by
/// an even stride when there are too many or by cyclic repetition when there
/// are too few.
pub fn crop_scene(points: &[Vector3<f64>], gamma_hat: &Vector3<f64>, m: usize) -> SceneCrop {
    let kept: Vec<Vector3<f64>> = points
        .iter()
        .filter(|p| {
            (p.x - gamma_hat.x).abs() <= CROP_HALF_SIDE && (p.z - gamma_hat.z).abs() <= CROP_HALF_SIDE
        })
        .map(|p| p - gamma_hat)
        .collect();
    SceneCrop {
        unique: kept.len(),
        points: resize_cloud(&kept, m),
    }
}

/// Deterministic resize to exactly `m` points (empty stays empty).
pub fn resize_cloud(points: &[Vector3<f64>], m: usize) -> Vec<Vector3<f64>> {
    let k = points.len();
    if k == 0 || m == 0 {
        return Vec::new();
    }
    if k >= m {
        (0..m).map(|i| points[i * k / m]).collect()
    } else {
        (0..m).map(|i| points[i % k]).collect()
    }
}
