use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::metrics::{collision_contact, diversity, min_of_n_mpjpe, mpjpe, AlignMode};
use super::EvalConfig;
use crate::body::{pose_joints, BodyShape, Joints, Pose, ShapeMap, Skeleton};
use crate::diffusion::{NoiseSchedule, SampleRequest, ScheduleConfig, SampleTrace, Sampler, SamplerConfig};
use crate::error::{io_err, Error, Result};
use crate::exec::Execution;
use crate::model::{ConditionInput, Denoiser, HeadInput, Heads};
use crate::scene::{crop_scene, write_json, SampleRecord, SceneCache};
use crate::train::{checkpoint_path, load_denoiser, load_heads, Stage};

/// Trained networks of one run.
#[derive(Debug, Clone)]
pub struct Model {
    pub heads: Heads,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl Model {
    /// Loads the best checkpoints of both stages from a run directory.
    pub fn load(run: &Path, skel: &Skeleton, schedule: &ScheduleConfig) -> Result<Self> {
        let heads = load_heads(&checkpoint_path(run, Stage::Heads, "best"))?;
        let denoiser = load_denoiser(&checkpoint_path(run, Stage::Denoiser, "best"), skel)?;
        if denoiser.steps != schedule.steps {
            return Err(Error::Checkpoint(format!(
                "denoiser trained for {} steps, schedule has {}",
                denoiser.steps, schedule.steps
            )));
        }
        let schedule = NoiseSchedule::new(schedule)?;
        Ok(Self {
            heads,
            denoiser,
            schedule,
        })
    }
}

/// Source of pose hypotheses.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    /// Returns the ground truth `n` times.
    Oracle,
}

/// Hypotheses for one input. Joints are in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub gamma_hat: Vector3<f64>,
    pub shape: BodyShape,
    pub poses: Vec<Pose>,
    pub joints: Vec<Joints>,
    /// Soft collision score of each sample on the guidance crop.
    pub collision: Vec<f64>,
    pub traces: Vec<SampleTrace>,
}

/// Runs the heads and the sampler on one record. `scene` is the record's
/// scene in its camera frame.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    predictor: Predictor,
    skel: &Skeleton,
    map: &ShapeMap,
    sampler: &SamplerConfig,
    rec: &SampleRecord,
    scene: &[Vector3<f64>],
    n: usize,
    seed: u64,
    record_trace: bool,
) -> Result<Prediction> {
    let (gamma_hat, shape, poses, collision, traces) = match predictor {
        Predictor::Oracle => (rec.gamma_vec(), rec.shape(), vec![rec.theta; n], Vec::new(), Vec::new()),
        Predictor::Model(m) => {
            let head_in = HeadInput::from_record(rec, scene, m.heads.config.head_points)?;
            let h = m.heads.predict(&[&head_in])?[0];
            let cond = ConditionInput::from_record(rec, &h.gamma, scene, m.denoiser.config.crop_points)?;
            let guide = crop_scene(scene, &h.gamma, sampler.guidance_points).points;
            let out = Sampler {
                denoiser: &m.denoiser,
                schedule: &m.schedule,
                skel,
                map,
                config: sampler,
            }
            .sample(&SampleRequest {
                cond: &cond,
                guidance_cloud: &guide,
                shape: h.shape,
                n,
                seed,
                input_index: rec.id,
                record_trace,
            })?;
            (h.gamma, h.shape, out.poses, out.collision, out.traces)
        }
    };
    let joints = poses
        .iter()
        .map(|p| pose_joints(skel, map, p, &shape, gamma_hat))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction {
        gamma_hat,
        shape,
        poses,
        joints,
        collision,
        traces,
    })
}

/// Means over inputs of one hypothesis count `n`. Accuracy and diversity
/// values are in mm; a metric with no eligible input is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub n: usize,
    pub g_mpjpe_vis: Option<f64>,
    pub mpjpe_vis: Option<f64>,
    pub pa_mpjpe_vis: Option<f64>,
    pub min_mpjpe_invis: Option<f64>,
    pub collision: Option<f64>,
    pub contact: Option<f64>,
    pub std_invis: Option<f64>,
    pub apd_invis: Option<f64>,
    pub counts: BlockCounts,
}

/// Inputs contributing to each metric.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockCounts {
    pub inputs: usize,
    pub vis: usize,
    pub pa: usize,
    pub invis: usize,
    pub diversity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub blocks: Vec<EvalBlock>,
}

/// Per-input values for one `n`.
#[derive(Debug, Clone, Copy, Default)]
struct InputMetrics {
    g: Option<f64>,
    p: Option<f64>,
    pa: Option<f64>,
    min_invis: Option<f64>,
    coll: f64,
    contact: f64,
    div: Option<(f64, f64)>,
}

fn mean_some(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Global, pelvis and Procrustes MPJPE on visible joints, then collision
/// and contact, of one hypothesis.
type SampleScores = (Option<f64>, Option<f64>, Option<f64>, (f64, bool));

/// Scores the first `n` hypotheses of one input for each `n` in `ns`.
fn score_input(
    skel: &Skeleton,
    cfg: &EvalConfig,
    rec: &SampleRecord,
    gt: &Joints,
    pred: &Prediction,
    crop: &[Vector3<f64>],
    ns: &[usize],
) -> Vec<InputMetrics> {
    let vis = rec.visible;
    let invis: Vec<bool> = vis.iter().map(|v| !v).collect();
    let per_sample: Vec<SampleScores> = pred
        .joints
        .iter()
        .map(|j| {
            let rel: Joints = j.map(|p| p - pred.gamma_hat);
            (
                mpjpe(j, gt, &vis, AlignMode::Global),
                mpjpe(j, gt, &vis, AlignMode::Pelvis),
                mpjpe(j, gt, &vis, AlignMode::Procrustes),
                collision_contact(skel, &rel, crop, cfg.eval_points, cfg.contact_threshold),
            )
        })
        .collect();
    ns.iter()
        .map(|&n| {
            let s = &per_sample[..n];
            let pick = |f: &dyn Fn(&SampleScores) -> Option<f64>| -> Option<f64> {
                mean_some(&s.iter().filter_map(f).collect::<Vec<_>>())
            };
            InputMetrics {
                g: pick(&|x| x.0),
                p: pick(&|x| x.1),
                pa: pick(&|x| x.2),
                min_invis: min_of_n_mpjpe(&pred.joints[..n], gt, &invis),
                coll: s.iter().map(|x| x.3 .0).sum::<f64>() / n as f64,
                contact: s.iter().filter(|x| x.3 .1).count() as f64 / n as f64,
                div: diversity(&pred.joints[..n], &invis),
            }
        })
        .collect()
}

fn aggregate(n: usize, per_input: &[InputMetrics]) -> EvalBlock {
    let col = |f: &dyn Fn(&InputMetrics) -> Option<f64>| -> (Option<f64>, usize) {
        let v: Vec<f64> = per_input.iter().filter_map(f).collect();
        (mean_some(&v), v.len())
    };
    let (g, vis) = col(&|m| m.g);
    let (p, _) = col(&|m| m.p);
    let (pa, pa_n) = col(&|m| m.pa);
    let (mi, invis) = col(&|m| m.min_invis);
    let (coll, _) = col(&|m| Some(m.coll));
    let (contact, _) = col(&|m| Some(m.contact));
    let (std, div_n) = col(&|m| m.div.map(|d| d.0));
    let (apd, _) = col(&|m| m.div.map(|d| d.1));
    EvalBlock {
        n,
        g_mpjpe_vis: g,
        mpjpe_vis: p,
        pa_mpjpe_vis: pa,
        min_mpjpe_invis: mi,
        collision: coll,
        contact,
        std_invis: std,
        apd_invis: apd,
        counts: BlockCounts {
            inputs: per_input.len(),
            vis,
            pa: pa_n,
            invis,
            diversity: div_n,
        },
    }
}

/// Evaluates `records` with one shared pool of `max(n_list)` hypotheses per
/// input; each block scores the first `n` of them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    predictor: Predictor,
    method: &str,
    records: &[SampleRecord],
    skel: &Skeleton,
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let map = ShapeMap::from_skeleton(skel);
    let cache = SceneCache::new();
    let n_max = *cfg.n_list.iter().max().expect("validated non-empty");
    let per_input: Vec<Vec<InputMetrics>> = exec.try_map_range(records.len(), |i| {
        let rec = &records[i];
        let scene = cache.camera_frame(rec);
        let pred = predict(predictor, skel, &map, sampler, rec, &scene.points, n_max, seed, false)?;
        let gt = rec.joints(skel, &map)?;
        let crop = crop_scene(&scene.points, &pred.gamma_hat, cfg.eval_points).points;
        Ok::<_, Error>(score_input(skel, cfg, rec, &gt, &pred, &crop, &cfg.n_list))
    })?;
    let blocks = cfg
        .n_list
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let col: Vec<InputMetrics> = per_input.iter().map(|m| m[k]).collect();
            aggregate(n, &col)
        })
        .collect();
    Ok(EvalReport {
        method: method.to_string(),
        blocks,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub const RESULTS_HEADER: &str =
    "n,method,G-MPJPE-vis,MPJPE-vis,PA-MPJPE-vis,min-of-n-MPJPE-invis,coll,contact,std-invis,APD-invis";

/// One row per block in the column order of the results table.
pub fn results_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in reports {
        for b in &r.blocks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                b.n,
                r.method,
                cell(b.g_mpjpe_vis),
                cell(b.mpjpe_vis),
                cell(b.pa_mpjpe_vis),
                cell(b.min_mpjpe_invis),
                cell(b.collision),
                cell(b.contact),
                cell(b.std_invis),
                cell(b.apd_invis)
            );
        }
    }
    out
}

/// Writes `eval.json` and `eval.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("eval.json"), report)?;
    let csv = dir.join("eval.csv");
    fs::write(&csv, results_csv(std::slice::from_ref(report))).map_err(io_err(&csv))
}

/// Rows of the ablation grid, most complete first.
pub const ABLATION_ROWS: [&str; 4] = ["full", "no-guidance", "no-guidance-no-cf", "no-guidance-no-cf-no-coll"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub block: Option<EvalBlock>,
    pub note: Option<String>,
}

/// Sampler switches of an ablation row.
pub fn ablation_sampler(row: &str, base: &SamplerConfig) -> SamplerConfig {
    let mut c = base.clone();
    match row {
        "full" => {
            c.guidance = true;
            c.cf_fusion = true;
        }
        "no-guidance" => {
            c.guidance = false;
            c.cf_fusion = true;
        }
        _ => {
            c.guidance = false;
            c.cf_fusion = false;
        }
    }
    c
}

/// Evaluates the four-row grid at one `n`. The last row needs the model
/// trained without the collision loss; without it the row carries a note.
#[allow(clippy::too_many_arguments)]
pub fn ablation(
    full: &Model,
    no_coll: Option<&Model>,
    records: &[SampleRecord],
    skel: &Skeleton,
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    let single = EvalConfig {
        n_list: vec![n],
        ..cfg.clone()
    };
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (k, &name) in ABLATION_ROWS.iter().enumerate() {
        let model = if k == 3 { no_coll } else { Some(full) };
        let Some(model) = model else {
            rows.push(AblationRow {
                method: name.to_string(),
                block: None,
                note: Some("no checkpoint trained without the collision loss".into()),
            });
            continue;
        };
        let s = ablation_sampler(name, sampler);
        let report = evaluate(Predictor::Model(model), name, records, skel, &s, &single, seed, exec)?;
        rows.push(AblationRow {
            method: name.to_string(),
            block: report.blocks.into_iter().next(),
            note: None,
        });
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "method,MPJPE-vis,min-of-n-MPJPE-invis,coll,contact,std-invis,APD-invis,note";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let b = r.block.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            cell(b.and_then(|b| b.mpjpe_vis)),
            cell(b.and_then(|b| b.min_mpjpe_invis)),
            cell(b.and_then(|b| b.collision)),
            cell(b.and_then(|b| b.contact)),
            cell(b.and_then(|b| b.std_invis)),
            cell(b.and_then(|b| b.apd_invis)),
            r.note.as_deref().unwrap_or("")
        );
    }
    out
}
