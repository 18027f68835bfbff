//! Pose metrics, hypothesis aggregation, record files, and a synthetic
//! dataset generator for self-contained training and oracle tests.
//!
//! All 3D poses are root-relative millimeters. The report pipeline subtracts
//! the root joint (index 0) from predictions and ground truth before any
//! metric; the raw metric functions themselves do not re-center.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::HypothesisSet;
use crate::numerics::rng::{randn, stream};
use crate::numerics::tensor::{NumericsError, Tensor};
use crate::skeleton::Skeleton;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    ParseLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("record {id:?}: expected {expected} joints, got {got}")]
    JointCount {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("record {id:?} carries non-finite values")]
    NonFinite { id: String },
    #[error("duplicate record id {id:?}")]
    DuplicateId { id: String },
    #[error("record {id:?} is missing the ground-truth 3D pose")]
    MissingGroundTruth { id: String },
    #[error("prediction ids do not align with records; missing {missing:?}, unknown {unknown:?}")]
    IdMismatch {
        missing: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("records carry differing hypothesis counts ({first} vs {other})")]
    MixedHypotheses { first: usize, other: usize },
    #[error("ground-truth pose is degenerate (zero variance)")]
    DegenerateGroundTruth,
    #[error("empty evaluation set")]
    EmptySet,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One sample: 2D keypoints and, when known, the root-relative 3D pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub x: Tensor,
    pub y: Option<Tensor>,
}

/// One predicted hypothesis for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub hyp: usize,
    pub y_hat: Tensor,
}

impl PoseRecord {
    pub fn joint_count(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Mean per-joint Euclidean distance between two J x 3 poses.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64, EvalError> {
    if pred.shape() != gt.shape() || pred.rank() != 2 || pred.shape()[1] != 3 {
        return Err(EvalError::Numerics(NumericsError::ShapeMismatch {
            op: "mpjpe",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        }));
    }
    let joints = pred.shape()[0];
    let mut total = 0.0;
    for j in 0..joints {
        let mut sq = 0.0;
        for c in 0..3 {
            let d = pred.get(&[j, c]) - gt.get(&[j, c]);
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / joints as f64)
}

fn centroid(pose: &Tensor) -> [f64; 3] {
    let joints = pose.shape()[0] as f64;
    let mut mu = [0.0; 3];
    for (i, &v) in pose.data().iter().enumerate() {
        mu[i % 3] += v;
    }
    mu.map(|v| v / joints)
}

/// MPJPE after the optimal similarity alignment (rotation, translation,
/// uniform scale) of the prediction onto the ground truth.
pub fn p_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64, EvalError> {
    let aligned = procrustes_align(pred, gt)?;
    mpjpe(&aligned, gt)
}

fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor, EvalError> {
    if pred.shape() != gt.shape() || pred.rank() != 2 || pred.shape()[1] != 3 {
        return Err(EvalError::Numerics(NumericsError::ShapeMismatch {
            op: "p_mpjpe",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        }));
    }
    let joints = pred.shape()[0];
    let mu_x = centroid(gt);
    let mu_y = centroid(pred);

    let mut x0 = gt.clone();
    let mut y0 = pred.clone();
    for (i, v) in x0.data_mut().iter_mut().enumerate() {
        *v -= mu_x[i % 3];
    }
    for (i, v) in y0.data_mut().iter_mut().enumerate() {
        *v -= mu_y[i % 3];
    }
    let norm_x = x0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_y = y0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_x < 1e-12 {
        return Err(EvalError::DegenerateGroundTruth);
    }
    if norm_y < 1e-12 {
        // Collapsed prediction: the best similarity transform drops it on
        // the target centroid.
        let mut out = Tensor::zeros(&[joints, 3]);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = mu_x[i % 3];
        }
        return Ok(out);
    }
    let x0 = x0.scale(1.0 / norm_x);
    let y0 = y0.scale(1.0 / norm_y);

    // H = X0^T Y0, 3x3.
    let mut h = Matrix3::<f64>::zeros();
    for j in 0..joints {
        for a in 0..3 {
            for b in 0..3 {
                h[(a, b)] += x0.get(&[j, a]) * y0.get(&[j, b]);
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut v = v_t.transpose();
    let mut s = svd.singular_values;
    let r = v * u.transpose();
    if r.determinant() < 0.0 {
        // Proper rotation: flip the column tied to the smallest singular value.
        let k = (0..3).min_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap()).unwrap();
        for row in 0..3 {
            v[(row, k)] = -v[(row, k)];
        }
        s[k] = -s[k];
    }
    let r = v * u.transpose();
    let scale = s.sum() * norm_x / norm_y;

    // t = muX - scale * muY R; aligned = scale * pred R + t.
    let mut t = mu_x;
    for b in 0..3 {
        let mut acc = 0.0;
        for a in 0..3 {
            acc += mu_y[a] * r[(a, b)];
        }
        t[b] -= scale * acc;
    }
    let mut aligned = Tensor::zeros(&[joints, 3]);
    for j in 0..joints {
        for b in 0..3 {
            let mut acc = 0.0;
            for a in 0..3 {
                acc += pred.get(&[j, a]) * r[(a, b)];
            }
            aligned.set(&[j, b], scale * acc + t[b]);
        }
    }
    Ok(aligned)
}

/// Strict threshold comparison; an exactly-zero error counts as correct at
/// every threshold (so perfect predictions score 100 even at 0 mm).
fn joint_correct(err: f64, threshold: f64) -> bool {
    err < threshold || err == 0.0
}

fn joint_errors(preds: &[Tensor], gts: &[Tensor]) -> Result<Vec<f64>, EvalError> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(EvalError::EmptySet);
    }
    let mut errs = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        if p.shape() != g.shape() || p.rank() != 2 || p.shape()[1] != 3 {
            return Err(EvalError::Numerics(NumericsError::ShapeMismatch {
                op: "pck",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            }));
        }
        for j in 0..p.shape()[0] {
            let mut sq = 0.0;
            for c in 0..3 {
                let d = p.get(&[j, c]) - g.get(&[j, c]);
                sq += d * d;
            }
            errs.push(sq.sqrt());
        }
    }
    Ok(errs)
}

/// Percentage of joints with error under `threshold_mm` across the set.
pub fn pck(preds: &[Tensor], gts: &[Tensor], threshold_mm: f64) -> Result<f64, EvalError> {
    let errs = joint_errors(preds, gts)?;
    let correct = errs.iter().filter(|&&e| joint_correct(e, threshold_mm)).count();
    Ok(100.0 * correct as f64 / errs.len() as f64)
}

/// Mean PCK over thresholds 0..150 mm in 5 mm steps (31 points).
pub fn auc(preds: &[Tensor], gts: &[Tensor]) -> Result<f64, EvalError> {
    let errs = joint_errors(preds, gts)?;
    let mut total = 0.0;
    let points = 31;
    for i in 0..points {
        let threshold = 5.0 * i as f64;
        let correct = errs.iter().filter(|&&e| joint_correct(e, threshold)).count();
        total += 100.0 * correct as f64 / errs.len() as f64;
    }
    Ok(total / points as f64)
}

/// Per-joint average pose and, when ground truth is supplied, the index of
/// the hypothesis with the lowest MPJPE.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub mean_pose: Tensor,
    pub best_index: Option<usize>,
}

pub fn aggregate_hypotheses(
    hyps: &HypothesisSet,
    gt: Option<&Tensor>,
) -> Result<Aggregate, EvalError> {
    let count = hyps.count();
    let mean_pose = hyps.poses().mean_axes(&[0])?;
    let best_index = match gt {
        Some(gt) => {
            let mut best = (0usize, f64::INFINITY);
            for h in 0..count {
                let err = mpjpe(&hyps.pose(h), gt)?;
                if err < best.1 {
                    best = (h, err);
                }
            }
            Some(best.0)
        }
        None => None,
    };
    Ok(Aggregate {
        mean_pose,
        best_index,
    })
}

// ---------------------------------------------------------------------------
// Record and prediction files: one JSON document per line.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    x: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    hyp: usize,
    y_hat: Vec<[f64; 3]>,
}

fn rows2(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn tensor2(rows: &[[f64; 2]]) -> Result<Tensor, NumericsError> {
    Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect())
}

fn tensor3(rows: &[[f64; 3]]) -> Result<Tensor, NumericsError> {
    Tensor::new(&[rows.len(), 3], rows.iter().flatten().copied().collect())
}

pub fn save_records(records: &[PoseRecord], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = RecordLine {
            id: r.id.clone(),
            x: rows2(&r.x),
            y: r.y.as_ref().map(rows3),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("record serialization"))?;
    }
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>, EvalError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine =
            serde_json::from_str(&line).map_err(|source| EvalError::ParseLine {
                line: lineno + 1,
                source,
            })?;
        let record = PoseRecord {
            id: parsed.id,
            x: tensor2(&parsed.x)?,
            y: parsed.y.as_deref().map(tensor3).transpose()?,
        };
        if seen.insert(record.id.clone(), ()).is_some() {
            return Err(EvalError::DuplicateId { id: record.id });
        }
        if let Some(y) = &record.y {
            if y.shape()[0] != record.joint_count() {
                return Err(EvalError::JointCount {
                    id: record.id.clone(),
                    expected: record.joint_count(),
                    got: y.shape()[0],
                });
            }
        }
        let finite = record.x.is_finite() && record.y.as_ref().is_none_or(Tensor::is_finite);
        if !finite {
            return Err(EvalError::NonFinite { id: record.id });
        }
        records.push(record);
    }
    Ok(records)
}

/// Records must match the active skeleton's joint count.
pub fn check_joint_count(records: &[PoseRecord], joints: usize) -> Result<(), EvalError> {
    for r in records {
        if r.joint_count() != joints {
            return Err(EvalError::JointCount {
                id: r.id.clone(),
                expected: joints,
                got: r.joint_count(),
            });
        }
    }
    Ok(())
}

/// Flatten hypothesis sets into per-(record, hypothesis) predictions.
pub fn predictions_from(
    records: &[PoseRecord],
    sets: &[HypothesisSet],
) -> Vec<Prediction> {
    records
        .iter()
        .zip(sets)
        .flat_map(|(r, set)| {
            (0..set.count()).map(move |h| Prediction {
                id: r.id.clone(),
                hyp: h,
                y_hat: set.pose(h),
            })
        })
        .collect()
}

pub fn save_predictions(predictions: &[Prediction], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in predictions {
        let line = PredictionLine {
            id: p.id.clone(),
            hyp: p.hyp,
            y_hat: rows3(&p.y_hat),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("prediction serialization"))?;
    }
    Ok(())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, EvalError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut predictions = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(&line).map_err(|source| EvalError::ParseLine {
                line: lineno + 1,
                source,
            })?;
        predictions.push(Prediction {
            id: parsed.id,
            hyp: parsed.hyp,
            y_hat: tensor3(&parsed.y_hat)?,
        });
    }
    Ok(predictions)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Aggregated metrics over a record set.
///
/// `mpjpe_mean_hyp_mm` averages each record's per-hypothesis MPJPE (so the
/// best-hypothesis figure can never exceed it); `p_mpjpe_mm`, `pck150_pct`,
/// and `auc_pct` are computed on the per-joint mean pose across hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: usize,
    pub hypotheses: usize,
    pub mpjpe_mean_hyp_mm: f64,
    pub mpjpe_best_hyp_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck150_pct: f64,
    pub auc_pct: f64,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.records)?;
        writeln!(f, "hypotheses: {}", self.hypotheses)?;
        writeln!(f, "mpjpe_mean_hyp_mm: {}", self.mpjpe_mean_hyp_mm)?;
        writeln!(f, "mpjpe_best_hyp_mm: {}", self.mpjpe_best_hyp_mm)?;
        writeln!(f, "p_mpjpe_mm: {}", self.p_mpjpe_mm)?;
        writeln!(f, "pck150_pct: {}", self.pck150_pct)?;
        write!(f, "auc_pct: {}", self.auc_pct)
    }
}

/// Subtract the root joint (row 0) from every joint.
pub fn root_center(pose: &Tensor) -> Tensor {
    let mut out = pose.clone();
    let root = [pose.get(&[0, 0]), pose.get(&[0, 1]), pose.get(&[0, 2])];
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v -= root[i % 3];
    }
    out
}

/// Score predictions against records. Both sides are root-centered first;
/// records are processed in id order so the reduction is deterministic.
pub fn evaluate(
    records: &[PoseRecord],
    predictions: &[Prediction],
) -> Result<MetricReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let by_id: BTreeMap<&str, &PoseRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut groups: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry(p.id.as_str()).or_default().push(p);
    }
    let missing: Vec<String> = by_id
        .keys()
        .filter(|id| !groups.contains_key(**id))
        .map(|s| s.to_string())
        .collect();
    let unknown: Vec<String> = groups
        .keys()
        .filter(|id| !by_id.contains_key(**id))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(EvalError::IdMismatch { missing, unknown });
    }

    let mut hyp_count: Option<usize> = None;
    let mut mean_hyp_sum = 0.0;
    let mut best_hyp_sum = 0.0;
    let mut p_mpjpe_sum = 0.0;
    let mut mean_poses = Vec::with_capacity(records.len());
    let mut gts = Vec::with_capacity(records.len());

    for (id, mut preds) in groups {
        let record = by_id[id];
        let gt = record
            .y
            .as_ref()
            .ok_or_else(|| EvalError::MissingGroundTruth { id: id.to_string() })?;
        preds.sort_by_key(|p| p.hyp);
        match hyp_count {
            None => hyp_count = Some(preds.len()),
            Some(h) if h != preds.len() => {
                return Err(EvalError::MixedHypotheses {
                    first: h,
                    other: preds.len(),
                })
            }
            _ => {}
        }
        let gt_c = root_center(gt);
        let centered: Vec<Tensor> = preds.iter().map(|p| root_center(&p.y_hat)).collect();
        let errs: Vec<f64> = centered
            .iter()
            .map(|p| mpjpe(p, &gt_c))
            .collect::<Result<_, _>>()?;
        mean_hyp_sum += errs.iter().sum::<f64>() / errs.len() as f64;
        best_hyp_sum += errs.iter().cloned().fold(f64::INFINITY, f64::min);

        let refs: Vec<&Tensor> = centered.iter().collect();
        let mean_pose = Tensor::stack0(&refs)?.mean_axes(&[0])?;
        p_mpjpe_sum += p_mpjpe(&mean_pose, &gt_c)?;
        mean_poses.push(mean_pose);
        gts.push(gt_c);
    }

    let n = records.len() as f64;
    Ok(MetricReport {
        records: records.len(),
        hypotheses: hyp_count.unwrap_or(0),
        mpjpe_mean_hyp_mm: mean_hyp_sum / n,
        mpjpe_best_hyp_mm: best_hyp_sum / n,
        p_mpjpe_mm: p_mpjpe_sum / n,
        pck150_pct: pck(&mean_poses, &gts, 150.0)?,
        auc_pct: auc(&mean_poses, &gts)?,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Rest-pose bone vector (offset from parent, millimeters) by joint name.
fn rest_bone(name: &str) -> [f64; 3] {
    match name {
        "rhip" => [-130.0, 0.0, 0.0],
        "lhip" => [130.0, 0.0, 0.0],
        "rknee" | "lknee" => [0.0, -450.0, 0.0],
        "rfoot" | "lfoot" => [0.0, -450.0, 0.0],
        "spine" => [0.0, 230.0, 0.0],
        "thorax" => [0.0, 230.0, 0.0],
        "neck" => [0.0, 110.0, 0.0],
        "head" => [0.0, 120.0, 0.0],
        "lshoulder" => [150.0, 40.0, 0.0],
        "rshoulder" => [-150.0, 40.0, 0.0],
        "lelbow" => [60.0, -260.0, 0.0],
        "relbow" => [-60.0, -260.0, 0.0],
        "lwrist" => [40.0, -250.0, 0.0],
        "rwrist" => [-40.0, -250.0, 0.0],
        other => {
            // Unknown vocabulary: deterministic pseudo-random direction.
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for b in other.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            let a = crate::numerics::splitmix64(h) as f64 / u64::MAX as f64 - 0.5;
            let b = crate::numerics::splitmix64(h ^ 1) as f64 / u64::MAX as f64 - 0.5;
            let c = crate::numerics::splitmix64(h ^ 2) as f64 / u64::MAX as f64 - 0.5;
            let norm = (a * a + b * b + c * c).sqrt().max(1e-9);
            [300.0 * a / norm, 300.0 * b / norm, 300.0 * c / norm]
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat_vec(m: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i] += m[i][k] * v[k];
        }
    }
    out
}

/// Rodrigues rotation matrix about unit axis `k` by `angle`.
fn rotation(k: &[f64; 3], angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + k[0] * k[0] * t, k[0] * k[1] * t - k[2] * s, k[0] * k[2] * t + k[1] * s],
        [k[1] * k[0] * t + k[2] * s, c + k[1] * k[1] * t, k[1] * k[2] * t - k[0] * s],
        [k[2] * k[0] * t - k[1] * s, k[2] * k[1] * t + k[0] * s, c + k[2] * k[2] * t],
    ]
}

/// Generate `n` plausible poses by small joint-angle perturbations of a rest
/// pose along the kinematic tree (bone lengths fixed), projected to 2D by
/// dropping depth, with optional Gaussian pixel noise on the keypoints.
pub fn synth_dataset(
    n: usize,
    skeleton: &Skeleton,
    seed: u64,
    noise_2d: f64,
) -> Vec<PoseRecord> {
    let joints = skeleton.joint_count();
    // Children lists of the tree rooted at joint 0, in BFS order.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); joints];
    let mut parent: Vec<Option<usize>> = vec![None; joints];
    let mut order = vec![0usize];
    let mut visited = vec![false; joints];
    visited[0] = true;
    let mut head = 0;
    while head < order.len() {
        let cur = order[head];
        head += 1;
        for &(a, b) in skeleton.edges() {
            for (p, c) in [(a, b), (b, a)] {
                if p == cur && !visited[c] {
                    visited[c] = true;
                    parent[c] = Some(p);
                    children[p].push(c);
                    order.push(c);
                }
            }
        }
    }

    let mut rng = stream(seed, 5);
    use rand::Rng;
    let max_angle = 0.35;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut pos = vec![[0.0f64; 3]; joints];
        let mut rot: Vec<Mat3> = vec![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]; joints];
        for &joint in order.iter().skip(1) {
            let p = parent[joint].expect("non-root joint has a parent");
            let axis_raw = randn(&[3], &mut rng);
            let norm = axis_raw.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let axis = [
                axis_raw.data()[0] / norm,
                axis_raw.data()[1] / norm,
                axis_raw.data()[2] / norm,
            ];
            let angle = rng.gen_range(-max_angle..max_angle);
            rot[joint] = mat_mul(&rot[p], &rotation(&axis, angle));
            let bone = rest_bone(skeleton.joint_name(joint));
            let offset = mat_vec(&rot[joint], &bone);
            for c in 0..3 {
                pos[joint][c] = pos[p][c] + offset[c];
            }
        }
        let y_data: Vec<f64> = pos.iter().flatten().copied().collect();
        let y = Tensor::new(&[joints, 3], y_data).expect("pose shape");
        // Orthographic projection: keep the first two coordinates.
        let mut x_data: Vec<f64> = pos.iter().flat_map(|p| [p[0], p[1]]).collect();
        if noise_2d > 0.0 {
            let noise = randn(&[joints * 2], &mut rng);
            for (v, nz) in x_data.iter_mut().zip(noise.data()) {
                *v += noise_2d * nz;
            }
        }
        let x = Tensor::new(&[joints, 2], x_data).expect("keypoint shape");
        records.push(PoseRecord {
            id: format!("synth-{i:05}"),
            x,
            y: Some(y),
        });
    }
    records
}
