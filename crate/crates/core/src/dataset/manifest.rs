use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    BoundingBox, DatasetError, DatasetManifest, DecoderRegistry, ImageSource, Label, Modality, Procedure, Sample,
};

pub const MANIFEST_HEADER: [&str; 6] = ["path", "procedure", "modality", "label", "patient_id", "case_id"];

#[derive(Deserialize)]
struct Row {
    path: String,
    procedure: String,
    modality: String,
    label: String,
    patient_id: String,
    case_id: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_enum<T: std::str::FromStr<Err = String>>(
    line: u64,
    column: &'static str,
    raw: &str,
) -> Result<T, DatasetError> {
    raw.parse()
        .map_err(|value| DatasetError::UnknownValue { line, column, value })
}

pub fn ingest_manifest(csv_path: &Path, image_root: &Path) -> Result<DatasetManifest, DatasetError> {
    ingest_manifest_with(csv_path, image_root, &DecoderRegistry::default())
}

/// Reads and validates a manifest CSV. Every image is decoded once (in
/// parallel) to check it; rows keep their file order and errors name the
/// CSV line of the first offending row.
pub fn ingest_manifest_with(
    csv_path: &Path,
    image_root: &Path,
    decoders: &DecoderRegistry,
) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read(csv_path).map_err(io_err(csv_path))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_slice());
    let header = reader.headers().map_err(|e| DatasetError::Csv {
        line: 1,
        detail: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(DatasetError::Csv {
            line: 1,
            detail: format!("header must be {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<Row>() {
        let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line());
        let row = record.map_err(|e| DatasetError::Csv {
            line: line_of(&e),
            detail: e.to_string(),
        })?;
        rows.push(row);
    }
    let samples: Vec<Result<Sample, DatasetError>> = rows
        .into_par_iter()
        .enumerate()
        .map(|(i, row)| {
            let line = i as u64 + 2;
            let procedure = parse_enum(line, Procedure::COLUMN, &row.procedure)?;
            let modality = parse_enum(line, Modality::COLUMN, &row.modality)?;
            let label = parse_enum(line, Label::COLUMN, &row.label)?;
            let path = image_root.join(&row.path);
            if !path.is_file() {
                return Err(DatasetError::MissingFile { line, path });
            }
            decoders.decode_file(&path).map_err(|detail| DatasetError::Decode {
                line,
                path: path.clone(),
                detail,
            })?;
            Ok(Sample {
                id: row.path,
                image: ImageSource::File(path),
                procedure,
                modality,
                label,
                patient_id: row.patient_id,
                case_id: row.case_id,
                lesion_box: None,
            })
        })
        .collect();
    Ok(DatasetManifest::new(samples.into_iter().collect::<Result<_, _>>()?))
}

/// Writes the manifest CSV; `path` column holds each sample's id.
pub fn write_manifest(manifest: &DatasetManifest, csv_path: &Path) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).expect("in-memory csv");
    for s in manifest.samples() {
        w.write_record([
            s.id.as_str(),
            s.procedure.as_str(),
            s.modality.as_str(),
            s.label.as_str(),
            &s.patient_id,
            &s.case_id,
        ])
        .expect("in-memory csv");
    }
    let bytes = w.into_inner().expect("in-memory csv");
    fs::write(csv_path, bytes).map_err(io_err(csv_path))
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRow {
    path: String,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

/// Lesion boxes as `path,x0,y0,x1,y1` (pixel coordinates, end-exclusive).
pub fn write_ground_truth(manifest: &DatasetManifest, csv_path: &Path) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in manifest.samples() {
        if let Some(b) = s.lesion_box {
            w.serialize(GroundTruthRow {
                path: s.id.clone(),
                x0: b.x0,
                y0: b.y0,
                x1: b.x1,
                y1: b.y1,
            })
            .expect("in-memory csv");
        }
    }
    let mut bytes = w.into_inner().expect("in-memory csv");
    if bytes.is_empty() {
        bytes = b"path,x0,y0,x1,y1\n".to_vec();
    }
    fs::write(csv_path, bytes).map_err(io_err(csv_path))
}

/// Returns a copy of `manifest` with lesion boxes attached from a
/// ground-truth CSV written by [`write_ground_truth`].
pub fn load_ground_truth(manifest: &DatasetManifest, csv_path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read(csv_path).map_err(io_err(csv_path))?;
    let mut boxes: HashMap<String, BoundingBox> = HashMap::new();
    for (i, rec) in csv::Reader::from_reader(text.as_slice())
        .deserialize::<GroundTruthRow>()
        .enumerate()
    {
        let r = rec.map_err(|e| DatasetError::Csv {
            line: i as u64 + 2,
            detail: e.to_string(),
        })?;
        if r.x1 <= r.x0 || r.y1 <= r.y0 {
            return Err(DatasetError::Csv {
                line: i as u64 + 2,
                detail: "empty bounding box".into(),
            });
        }
        boxes.insert(
            r.path,
            BoundingBox {
                x0: r.x0,
                y0: r.y0,
                x1: r.x1,
                y1: r.y1,
            },
        );
    }
    let samples = manifest
        .samples()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.lesion_box = boxes.get(&s.id).copied().or(s.lesion_box);
            s
        })
        .collect();
    Ok(DatasetManifest::new(samples))
}

/// Samples whose procedure is in `procedures`, order preserved.
pub fn domain_filter(manifest: &DatasetManifest, procedures: &[Procedure]) -> Result<DatasetManifest, DatasetError> {
    if procedures.is_empty() {
        return Err(DatasetError::EmptySubset);
    }
    let keep: BTreeSet<Procedure> = procedures.iter().copied().collect();
    Ok(DatasetManifest::new(
        manifest
            .samples()
            .iter()
            .filter(|s| keep.contains(&s.procedure))
            .cloned()
            .collect(),
    ))
}
