//! Corpus ingestion and per-sample preparation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{attribute_index, AttributeVector, CELEBA_COLUMNS, N_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::resample;

pub const CROP_SIZE: usize = 120;
pub const HR_SIZE: usize = 128;
pub const LR_SIZE: usize = 16;
pub const STAGE_SIZES: [usize; 3] = [32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub attributes: AttributeVector,
    pub split: Split,
}

/// One training example: the 16x16 input, the per-stage targets keyed by
/// resolution and the ground-truth attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub lr: Image,
    pub targets: BTreeMap<usize, Image>,
    pub attributes: AttributeVector,
}

impl TrainingSample {
    pub fn target(&self, size: usize) -> &Image {
        &self.targets[&size]
    }

    pub fn hr(&self) -> &Image {
        self.target(HR_SIZE)
    }
}

/// Reads a CelebA `list_attr_celeba` style file: an optional record-count
/// line, a header of attribute names, then `<file> <±1>...` rows. Every
/// row becomes a training record.
pub fn ingest_manifest(attribute_file: &Path, image_dir: &Path, limit: Option<usize>) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(fs::File::open(attribute_file)?);
    let mut columns: Option<[usize; N_ATTRIBUTES]> = None;
    let mut width = 0;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let parse_err = |line: usize, message: String| Error::Parse { path: attribute_file.to_path_buf(), line, message };

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let Some(cols) = columns else {
            if fields.len() == 1 && fields[0].parse::<usize>().is_ok() {
                continue;
            }
            columns = Some(resolve_header(&fields)?);
            width = fields.len();
            continue;
        };
        if limit.is_some_and(|n| records.len() >= n) {
            break;
        }
        // Rows carry the file name first, then one label per header column.
        if fields.len() != width + 1 {
            return Err(parse_err(lineno, format!("expected {} fields, found {}", width + 1, fields.len())));
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(lineno, format!("duplicate id `{id}`")));
        }
        let mut labels = Vec::with_capacity(width);
        for cell in &fields[1..] {
            labels.push(match *cell {
                "1" | "+1" => 1.0,
                "-1" | "0" => 0.0,
                other => return Err(parse_err(lineno, format!("label `{other}` is not ±1"))),
            });
        }
        let mut values = [0.0; N_ATTRIBUTES];
        for (slot, &col) in values.iter_mut().zip(cols.iter()) {
            *slot = labels[col];
        }
        let image_path = image_dir.join(&id);
        if !image_path.is_file() {
            return Err(Error::MissingImage { id, path: image_path });
        }
        records.push(SampleRecord {
            id,
            image_path,
            attributes: AttributeVector::new(values)?,
            split: Split::Train,
        });
    }
    Ok(records)
}

fn resolve_header(names: &[&str]) -> Result<[usize; N_ATTRIBUTES]> {
    let mut cols = [usize::MAX; N_ATTRIBUTES];
    for (col, name) in names.iter().enumerate() {
        if let Some(i) = attribute_index(name) {
            cols[i] = col;
        }
    }
    match cols.iter().position(|&c| c == usize::MAX) {
        Some(i) => Err(Error::MissingAttributeColumn(CELEBA_COLUMNS[i].to_string())),
        None => Ok(cols),
    }
}

/// Writes records as JSON lines.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines manifest. Relative image paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Parse { path: path.to_path_buf(), line: idx + 1, message: format!("duplicate id `{}`", rec.id) });
        }
        if rec.image_path.is_relative() {
            rec.image_path = base.join(&rec.image_path);
        }
        records.push(rec);
    }
    Ok(records)
}

/// Center 120x120 crop followed by a bilinear resize to 128x128.
pub fn prepare_hr(image: &Image) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if h < CROP_SIZE || w < CROP_SIZE {
        return Err(Error::ImageTooSmall { width: w, height: h, min: CROP_SIZE });
    }
    let crop = image.crop((h - CROP_SIZE) / 2, (w - CROP_SIZE) / 2, CROP_SIZE, CROP_SIZE);
    Ok(resample::resize_bilinear(&crop, HR_SIZE, HR_SIZE))
}

/// Area-weighted downsampling to one of the pipeline resolutions.
pub fn downsample(image: &Image, out_size: usize) -> Result<Image> {
    if ![LR_SIZE, 32, 64].contains(&out_size) {
        return Err(Error::Shape(format!("output size {out_size} is not one of 16, 32, 64")));
    }
    resample::downsample(image, out_size)
}

/// Builds all resolutions of one sample from an already prepared HR image.
pub fn sample_from_hr(id: impl Into<String>, hr: Image, attributes: AttributeVector) -> Result<TrainingSample> {
    if (hr.height(), hr.width()) != (HR_SIZE, HR_SIZE) {
        return Err(Error::Shape(format!("HR image must be {HR_SIZE}x{HR_SIZE}")));
    }
    let lr = downsample(&hr, LR_SIZE)?;
    let mut targets = BTreeMap::new();
    targets.insert(32, downsample(&hr, 32)?);
    targets.insert(64, downsample(&hr, 64)?);
    targets.insert(HR_SIZE, hr);
    Ok(TrainingSample { id: id.into(), lr, targets, attributes })
}

pub fn make_training_sample(record: &SampleRecord) -> Result<TrainingSample> {
    if !record.image_path.is_file() {
        return Err(Error::MissingImage { id: record.id.clone(), path: record.image_path.clone() });
    }
    let hr = prepare_hr(&Image::load(&record.image_path)?)?;
    sample_from_hr(record.id.clone(), hr, record.attributes)
}

pub fn load_samples(records: &[SampleRecord]) -> Result<Vec<TrainingSample>> {
    records.iter().map(make_training_sample).collect()
}

/// Seeded shuffle, then the first `train_count` records form the training
/// split and the rest the test split. Input order is irrelevant to
/// membership only through the seed; the output is a pure function of
/// `(records, train_count, seed)`.
pub fn split_dataset(records: &[SampleRecord], train_count: usize, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if train_count > records.len() {
        return Err(Error::Config(format!("train_count {train_count} exceeds {} records", records.len())));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize], split: Split| {
        idx.iter()
            .map(|&i| SampleRecord { split, ..records[i].clone() })
            .collect::<Vec<_>>()
    };
    Ok((pick(&order[..train_count], Split::Train), pick(&order[train_count..], Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_rejects_small_inputs_with_dimensions() {
        let err = prepare_hr(&Image::constant(119, 200, 0.5)).unwrap_err();
        assert!(err.to_string().contains("200x119"), "{err}");
    }

    #[test]
    fn constant_input_stays_constant() {
        let out = prepare_hr(&Image::constant(218, 178, 0.5)).unwrap();
        assert_eq!((out.height(), out.width()), (128, 128));
        assert!(out.pixels().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn downsample_sizes_are_restricted() {
        let img = Image::constant(128, 128, 0.3);
        assert!(downsample(&img, 8).is_err());
        assert!(downsample(&img, 128).is_err());
        assert_eq!(downsample(&img, 16).unwrap().width(), 16);
    }

    #[test]
    fn split_bounds_are_checked() {
        assert!(split_dataset(&[], 1, 0).is_err());
        let (a, b) = split_dataset(&[], 0, 0).unwrap();
        assert!(a.is_empty() && b.is_empty());
    }
}
