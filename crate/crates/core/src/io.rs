//! On-disk formats.
//!
//! Streams are line-delimited JSON, everything else is a single JSON
//! document. Angles are radians, lengths meters, timestamps seconds. Poses
//! are `[qw, qx, qy, qz, tx, ty, tz]` with `qw >= 0`.
//!
//! A dataset directory holds `dataset.jsonl` (marker and blob measurements),
//! `trajectory.jsonl` (unscaled keyframes) and `intrinsics.json`; the
//! simulator adds `ground_truth.json` and every command writes a
//! `manifest.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{FisheyeIntrinsics, Pose, TimedPose, Trajectory};
use crate::registration::{ArucoDetection, BlobDetection, CalibrationResult, PipelineOptions};
use crate::simulator::{CameraTruth, Dataset, ScenarioGroundTruth};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Schema {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn schema(path: &Path, line: Option<usize>, message: impl ToString) -> Self {
        IoError::Schema {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        }
    }
}

/// One line of `dataset.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementRecord {
    Aruco {
        camera_id: u32,
        stamp: f64,
        pose: Pose,
    },
    Blob {
        keyframe_id: u64,
        pixel: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub scale: f64,
    pub offset: Pose,
    pub cameras: Vec<CameraTruth>,
    pub trajectory_metric: Trajectory,
    /// Generating camera of each blob line, in file order.
    pub blob_labels: Vec<u32>,
}

impl GroundTruthFile {
    pub fn from_parts(gt: &ScenarioGroundTruth, blob_labels: &[u32]) -> Self {
        Self {
            scale: gt.scale,
            offset: gt.offset,
            cameras: gt.camera_poses_world.clone(),
            trajectory_metric: gt.robot_trajectory_metric.clone(),
            blob_labels: blob_labels.to_vec(),
        }
    }

    pub fn ground_truth(&self) -> ScenarioGroundTruth {
        ScenarioGroundTruth {
            camera_poses_world: self.cameras.clone(),
            robot_trajectory_metric: self.trajectory_metric.clone(),
            offset: self.offset,
            scale: self.scale,
        }
    }
}

/// `result.json`: the calibration plus what is needed to evaluate it alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub intrinsics: FisheyeIntrinsics,
    pub options: PipelineOptions,
    #[serde(flatten)]
    pub result: CalibrationResult,
}

/// Measurements of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub trajectory: Trajectory,
    pub arucos: Vec<ArucoDetection>,
    pub blobs: Vec<BlobDetection>,
    pub intrinsics: FisheyeIntrinsics,
}

impl From<&Dataset> for DatasetFiles {
    fn from(d: &Dataset) -> Self {
        Self {
            trajectory: d.trajectory_unscaled.clone(),
            arucos: d.arucos.clone(),
            blobs: d.blobs.clone(),
            intrinsics: d.intrinsics,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| IoError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::schema(path, None, e))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::schema(path, Some(e.line()), e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| IoError::schema(path, None, e))?;
        w.write_all(b"\n").map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::schema(path, Some(i + 1), e))?);
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, data: &DatasetFiles) -> Result<(), IoError> {
    let records = data
        .arucos
        .iter()
        .map(|d| MeasurementRecord::Aruco {
            camera_id: d.camera_id,
            stamp: d.stamp,
            pose: d.pose_marker_in_camera,
        })
        .chain(data.blobs.iter().map(|b| MeasurementRecord::Blob {
            keyframe_id: b.keyframe_id,
            pixel: [b.pixel.x, b.pixel.y],
        }));
    write_jsonl(&dir.join(DATASET_FILE), records)?;
    write_jsonl(&dir.join(TRAJECTORY_FILE), data.trajectory.samples())?;
    write_json(&dir.join(INTRINSICS_FILE), &data.intrinsics)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetFiles, IoError> {
    let intr_path = dir.join(INTRINSICS_FILE);
    let intrinsics: FisheyeIntrinsics = read_json(&intr_path)?;
    intrinsics
        .validate()
        .map_err(|e| IoError::schema(&intr_path, None, e))?;

    let traj_path = dir.join(TRAJECTORY_FILE);
    let samples: Vec<TimedPose> = read_jsonl(&traj_path)?;
    let trajectory = Trajectory::new(samples).map_err(|e| IoError::schema(&traj_path, None, e))?;

    let data_path = dir.join(DATASET_FILE);
    let mut arucos = Vec::new();
    let mut blobs = Vec::new();
    for (i, rec) in read_jsonl::<MeasurementRecord>(&data_path)?.into_iter().enumerate() {
        match rec {
            MeasurementRecord::Aruco { camera_id, stamp, pose } => {
                if !(stamp.is_finite() && stamp >= 0.0) {
                    return Err(IoError::schema(&data_path, Some(i + 1), format!("invalid stamp {stamp}")));
                }
                arucos.push(ArucoDetection {
                    camera_id,
                    stamp,
                    pose_marker_in_camera: pose,
                });
            }
            MeasurementRecord::Blob { keyframe_id, pixel } => {
                let pixel = nalgebra::Vector2::new(pixel[0], pixel[1]);
                if !intrinsics.contains_pixel(&pixel) {
                    return Err(IoError::schema(
                        &data_path,
                        Some(i + 1),
                        format!("pixel ({}, {}) outside the image", pixel.x, pixel.y),
                    ));
                }
                blobs.push(BlobDetection {
                    keyframe_id,
                    pixel,
                    camera_id: None,
                });
            }
        }
    }
    Ok(DatasetFiles {
        trajectory,
        arucos,
        blobs,
        intrinsics,
    })
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, IoError> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Record of one command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub stage_timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: None,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            stage_timings_ms: BTreeMap::new(),
        }
    }
}
