//! Dataset persistence: a directory holding `spec.json`, per-scene
//! `NNNNNN.bin` point files (little-endian float32 x,y,z triplets), and
//! `NNNNNN.labels.json` box records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DomainSpec, Split};
use crate::error::DatasetError;
use crate::geometry::Box3D;

/// Whether a reader loads ground truth or withholds it. Training on the
/// target domain must open with [`LabelMode::Withhold`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Load,
    Withhold,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    spec: DomainSpec,
    seed: u64,
    count: usize,
    split: Vec<Split>,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_dir(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let header = DatasetHeader {
        spec: dataset.spec.clone(),
        seed: dataset.seed,
        count: dataset.len(),
        split: dataset.split.clone(),
    };
    let spec_path = dir.join("spec.json");
    let body = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&spec_path, body).map_err(|e| io_err(&spec_path, e))?;

    for i in 0..dataset.len() {
        let bin_path = dir.join(format!("{i:06}.bin"));
        let mut out = BufWriter::new(File::create(&bin_path).map_err(|e| io_err(&bin_path, e))?);
        for p in dataset.points(i) {
            for c in p {
                out.write_all(&(*c as f32).to_le_bytes())
                    .map_err(|e| io_err(&bin_path, e))?;
            }
        }
        out.flush().map_err(|e| io_err(&bin_path, e))?;

        let labels = dataset
            .labels(i)
            .map_err(|_| DatasetError::Malformed {
                path: dir.display().to_string(),
                reason: "cannot persist a dataset whose labels are withheld".into(),
            })?;
        let label_path = dir.join(format!("{i:06}.labels.json"));
        let body = serde_json::to_string(&labels).expect("labels serialize");
        std::fs::write(&label_path, body).map_err(|e| io_err(&label_path, e))?;
    }
    Ok(())
}

pub fn load_dir(dir: &Path, mode: LabelMode) -> Result<Dataset, DatasetError> {
    let spec_path = dir.join("spec.json");
    let body = std::fs::read_to_string(&spec_path).map_err(|e| io_err(&spec_path, e))?;
    let header: DatasetHeader = serde_json::from_str(&body).map_err(|e| DatasetError::Malformed {
        path: spec_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let mut points = Vec::with_capacity(header.count);
    let mut labels = if mode == LabelMode::Load {
        Some(Vec::with_capacity(header.count))
    } else {
        None
    };
    for i in 0..header.count {
        let bin_path = dir.join(format!("{i:06}.bin"));
        let mut buf = Vec::new();
        BufReader::new(File::open(&bin_path).map_err(|e| io_err(&bin_path, e))?)
            .read_to_end(&mut buf)
            .map_err(|e| io_err(&bin_path, e))?;
        if buf.len() % 12 != 0 {
            return Err(DatasetError::Malformed {
                path: bin_path.display().to_string(),
                reason: format!("{} bytes is not a whole number of xyz triplets", buf.len()),
            });
        }
        let scene: Vec<[f64; 3]> = buf
            .chunks_exact(12)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[8..12].try_into().unwrap()) as f64,
                ]
            })
            .collect();
        points.push(scene);

        if let Some(labels) = labels.as_mut() {
            let label_path = dir.join(format!("{i:06}.labels.json"));
            let body = std::fs::read_to_string(&label_path).map_err(|e| io_err(&label_path, e))?;
            let boxes: Vec<Box3D> =
                serde_json::from_str(&body).map_err(|e| DatasetError::Malformed {
                    path: label_path.display().to_string(),
                    reason: e.to_string(),
                })?;
            labels.push(boxes);
        }
    }
    Ok(Dataset::from_parts(
        header.spec,
        header.seed,
        points,
        labels,
        header.split,
    ))
}
