//! Synthetic sample generation and the line-delimited JSON dataset format.
//!
//! A dataset directory holds `train.jsonl`, `val.jsonl`, `test.jsonl` and a
//! `manifest.json` with record counts and SHA-256 checksums. Each line is one
//! [`SampleRecord`]; scenes are stored by (template, seed) and regenerated on
//! load.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::camera::{bbox_feature, visibility_from_truncation, BBoxFeature, CameraModel};
use super::poses::{sample_body, Action};
use super::scene::{generate_scene, ScenePointCloud, SceneTemplate};
use crate::body::{pose_joints, BodyShape, Joints, Pose, ShapeMap, Skeleton, NUM_BETAS, NUM_JOINTS};
use crate::error::{io_err, Error, Result};
use crate::exec::Execution;
use crate::rng;

const MAX_ATTEMPTS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordTag {
    GroundTruth,
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// One observed person: body parameters in the camera frame, camera,
/// visibility and the observed 2D keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub tag: RecordTag,
    pub template: SceneTemplate,
    pub scene_seed: u64,
    /// Camera center in world coordinates; camera frame = world - this.
    pub camera_position: [f64; 3],
    pub camera: CameraModel,
    pub action: Action,
    /// Pelvis translation in the camera frame.
    pub gamma: [f64; 3],
    pub beta: [f64; NUM_BETAS],
    pub theta: Pose,
    pub visible: [bool; NUM_JOINTS],
    /// Observed keypoints in pixels; `None` for invisible joints.
    pub keypoints: Vec<Option<[f64; 2]>>,
}

impl SampleRecord {
    pub fn gamma_vec(&self) -> Vector3<f64> {
        Vector3::from(self.gamma)
    }

    pub fn shape(&self) -> BodyShape {
        BodyShape { beta: self.beta }
    }

    pub fn camera_origin(&self) -> Vector3<f64> {
        Vector3::from(self.camera_position)
    }

    /// Keypoints with zeros in place of invisible joints.
    pub fn keypoint_array(&self) -> [[f64; 2]; NUM_JOINTS] {
        let mut out = [[0.0; 2]; NUM_JOINTS];
        for (o, k) in out.iter_mut().zip(&self.keypoints) {
            if let Some(k) = k {
                *o = *k;
            }
        }
        out
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn bbox(&self) -> Result<BBoxFeature> {
        bbox_feature(&self.keypoint_array(), &self.visible, &self.camera)
    }

    /// Ground-truth joints in the camera frame.
    pub fn joints(&self, skel: &Skeleton, map: &ShapeMap) -> Result<Joints> {
        pose_joints(skel, map, &self.theta, &self.shape(), self.gamma_vec())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Dataset(format!("record {}: {what}", self.id)));
        if self.keypoints.len() != NUM_JOINTS {
            return bad("keypoint count");
        }
        if self.keypoints.iter().zip(&self.visible).any(|(k, &v)| k.is_some() != v) {
            return bad("keypoints disagree with the visibility mask");
        }
        if !self.theta.is_finite() || !self.gamma.iter().chain(&self.beta).all(|x| x.is_finite()) {
            return bad("non-finite body parameters");
        }
        self.camera.validate()
    }
}

/// Dataset size and sampling ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    pub templates: Vec<SceneTemplate>,
    /// Distinct scenes per template.
    pub scene_pool: usize,
    pub width: f64,
    pub height: f64,
    pub focal_range: [f64; 2],
    pub principal_jitter: f64,
    /// Camera distance in front of the pelvis along z.
    pub distance_range: [f64; 2],
    pub camera_height_range: [f64; 2],
    pub lateral_jitter: f64,
    pub keypoint_noise_px: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 5000,
            templates: SceneTemplate::ALL.to_vec(),
            scene_pool: 32,
            width: 640.0,
            height: 480.0,
            focal_range: [450.0, 600.0],
            principal_jitter: 10.0,
            distance_range: [0.9, 2.2],
            camera_height_range: [1.3, 1.75],
            lateral_jitter: 0.4,
            keypoint_noise_px: 1.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.size == 0 {
            return bad("size must be positive");
        }
        if self.templates.is_empty() || self.scene_pool == 0 {
            return bad("need at least one template and one scene per template");
        }
        let ranges = [self.focal_range, self.distance_range, self.camera_height_range];
        if ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1])) {
            return bad("ranges must be positive and ordered");
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("image size must be positive");
        }
        if !(self.principal_jitter >= 0.0 && self.lateral_jitter >= 0.0 && self.keypoint_noise_px >= 0.0) {
            return bad("jitters must be non-negative");
        }
        let f = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && f < 1.0) {
            return bad("split fractions must be non-negative and sum below 1");
        }
        Ok(())
    }

    /// Sample counts of the train / val / test splits.
    pub fn split_sizes(&self) -> [usize; 3] {
        let val = (self.size as f64 * self.val_fraction).round() as usize;
        let test = (self.size as f64 * self.test_fraction).round() as usize;
        [self.size - val - test, val, test]
    }
}

fn scene_seed(root: u64, template: SceneTemplate, slot: usize) -> u64 {
    rng::stream(root, rng::STREAM_SCENE, template.index(), slot as u64).random()
}

/// Generates sample `id`. Bodies and cameras are redrawn until at least one
/// joint is visible.
pub fn generate_sample(cfg: &DataConfig, root: u64, id: u64, skel: &Skeleton, map: &ShapeMap) -> Result<SampleRecord> {
    let mut r = rng::stream(root, rng::STREAM_DATA, id, 0);
    let template = cfg.templates[r.random_range(0..cfg.templates.len())];
    let seed = scene_seed(root, template, r.random_range(0..cfg.scene_pool));
    let layout = super::scene::generate_layout(seed, template);
    let px_noise = Normal::new(0.0, cfg.keypoint_noise_px).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_ATTEMPTS {
        let body = sample_body(skel, map, &layout, &mut r);
        let cam_pos = Vector3::new(
            body.pelvis.x + r.random_range(-cfg.lateral_jitter..=cfg.lateral_jitter),
            r.random_range(cfg.camera_height_range[0]..=cfg.camera_height_range[1]),
            body.pelvis.z - r.random_range(cfg.distance_range[0]..=cfg.distance_range[1]),
        );
        let camera = CameraModel {
            f: r.random_range(cfg.focal_range[0]..=cfg.focal_range[1]),
            cx: cfg.width / 2.0 + r.random_range(-cfg.principal_jitter..=cfg.principal_jitter),
            cy: cfg.height / 2.0 + r.random_range(-cfg.principal_jitter..=cfg.principal_jitter),
            width: cfg.width,
            height: cfg.height,
        };
        let gamma = body.pelvis - cam_pos;
        let joints = pose_joints(skel, map, &body.pose, &body.shape, gamma)?;
        let vis = visibility_from_truncation(&joints, &camera);
        if vis.fully_truncated() {
            continue;
        }
        let keypoints = (0..NUM_JOINTS)
            .map(|j| {
                vis.mask[j].then(|| {
                    let [u, v] = vis.keypoints[j];
                    [u + px_noise.sample(&mut r), v + px_noise.sample(&mut r)]
                })
            })
            .collect();
        return Ok(SampleRecord {
            id,
            tag: RecordTag::GroundTruth,
            template,
            scene_seed: seed,
            camera_position: cam_pos.into(),
            camera,
            action: body.action,
            gamma: gamma.into(),
            beta: body.shape.beta,
            theta: body.pose,
            visible: vis.mask,
            keypoints,
        });
    }
    Err(Error::Dataset(format!(
        "sample {id}: no visible joints after {MAX_ATTEMPTS} attempts"
    )))
}

/// Generated splits in train / val / test order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[SampleRecord] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_dataset(cfg: &DataConfig, root: u64, skel: &Skeleton, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    let map = ShapeMap::from_skeleton(skel);
    let mut all = exec.try_map_range(cfg.size, |i| generate_sample(cfg, root, i as u64, skel, &map))?;
    let [n_train, n_val, _] = cfg.split_sizes();
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Dataset { train: all, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: DataConfig,
    pub splits: Vec<ManifestEntry>,
}

pub fn encode_records(records: &[SampleRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Json {
            context: format!("record {}", r.id),
            source: e,
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_records(text: &str, context: &str) -> Result<Vec<SampleRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: SampleRecord = serde_json::from_str(l).map_err(|e| Error::Json {
                context: format!("{context}:{}", i + 1),
                source: e,
            })?;
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fails if `dir` exists and is non-empty unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_dataset(dir: &Path, data: &Dataset, cfg: &DataConfig, seed: u64, force: bool) -> Result<Manifest> {
    prepare_output_dir(dir, force)?;
    let mut splits = Vec::new();
    for s in Split::ALL {
        let text = encode_records(data.split(s))?;
        let path = dir.join(s.file_name());
        fs::write(&path, text.as_bytes()).map_err(io_err(&path))?;
        splits.push(ManifestEntry {
            file: s.file_name().to_string(),
            records: data.split(s).len(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        splits,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

/// Reads one split and checks it against the manifest checksum.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .splits
        .iter()
        .find(|e| e.file == split.file_name())
        .ok_or_else(|| Error::Dataset(format!("manifest lists no {}", split.file_name())))?;
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let sum = sha256_hex(&bytes);
    if sum != entry.sha256 {
        return Err(Error::Dataset(format!(
            "{} checksum mismatch: manifest {}, file {sum}",
            path.display(),
            entry.sha256
        )));
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let records = decode_records(&text, &path.display().to_string())?;
    if records.len() != entry.records {
        return Err(Error::Dataset(format!(
            "{}: {} records, manifest says {}",
            path.display(),
            records.len(),
            entry.records
        )));
    }
    Ok(records)
}

/// Appends records to a JSONL file.
pub fn append_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(encode_records(records)?.as_bytes()).map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.extend(decode_records(&line, &format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Memoized scene regeneration keyed by (template, seed).
#[derive(Debug, Default)]
pub struct SceneCache {
    scenes: Mutex<HashMap<(SceneTemplate, u64), Arc<ScenePointCloud>>>,
}

impl SceneCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// World-frame scene of a record.
    pub fn world(&self, template: SceneTemplate, seed: u64) -> Arc<ScenePointCloud> {
        if let Some(s) = self.scenes.lock().expect("scene cache lock").get(&(template, seed)) {
            return s.clone();
        }
        let scene = Arc::new(generate_scene(seed, template).0);
        self.scenes
            .lock()
            .expect("scene cache lock")
            .entry((template, seed))
            .or_insert(scene)
            .clone()
    }

    /// Scene of a record in its camera frame.
    pub fn camera_frame(&self, rec: &SampleRecord) -> ScenePointCloud {
        self.world(rec.template, rec.scene_seed).translated(&rec.camera_origin())
    }
}

/// Default location of a dataset split file.
pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.file_name())
}
