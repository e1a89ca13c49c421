//! Dataset directory layout:
//!
//! * `dataset.bin`: container with `images` (N×C×H×W) and `labels` (N)
//! * `index.csv`: `filename,label` per sample, in storage order
//! * `classes.txt`: one class name per line, in label order

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::tensor::Tensor;

pub const DATASET_FILE: &str = "dataset.bin";
pub const INDEX_FILE: &str = "index.csv";
pub const CLASSES_FILE: &str = "classes.txt";

fn sample_name(i: usize) -> String {
    format!("sample_{i:06}")
}

pub fn save_dataset(dir: &Path, ds: &LabeledDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = ds.image_shape();
    let images = Tensor::from_parts(vec![ds.len(), c, h, w], ds.pixels().to_vec());
    let labels = Tensor::from_parts(vec![ds.len()], ds.labels().iter().map(|&l| l as f64).collect());
    checkpoint::save(
        &dir.join(DATASET_FILE),
        &[("images".to_string(), &images), ("labels".to_string(), &labels)],
    )?;

    let index = dir.join(INDEX_FILE);
    let mut wtr = csv::Writer::from_path(&index)?;
    wtr.write_record(["filename", "label"])?;
    for (i, &l) in ds.labels().iter().enumerate() {
        wtr.write_record([sample_name(i), l.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io(&index, e))?;

    let classes = dir.join(CLASSES_FILE);
    let mut text = ds.class_names().join("\n");
    text.push('\n');
    fs::write(&classes, text).map_err(|e| Error::io(&classes, e))
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let bin = dir.join(DATASET_FILE);
    let mut tensors = checkpoint::load::<f64>(&bin)?;
    let parse = |detail: String| Error::Parse {
        path: bin.clone(),
        offset: 0,
        detail,
    };
    let mut take = |name: &str| {
        tensors
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| tensors.swap_remove(i).1)
            .ok_or_else(|| parse(format!("missing tensor {name:?}")))
    };
    let images = take("images")?;
    let labels = take("labels")?;
    let &[n, c, h, w] = images.shape() else {
        return Err(parse(format!(
            "images tensor has shape {:?}, expected N×C×H×W",
            images.shape()
        )));
    };
    if labels.shape() != [n] {
        return Err(parse(format!(
            "labels tensor has shape {:?}, expected [{n}]",
            labels.shape()
        )));
    }
    let labels: Vec<usize> = labels
        .data()
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 {
                Ok(l as usize)
            } else {
                Err(parse(format!("label {l} is not a class index")))
            }
        })
        .collect::<Result<_>>()?;

    let classes_path = dir.join(CLASSES_FILE);
    let classes: Vec<String> = fs::read_to_string(&classes_path)
        .map_err(|e| Error::io(&classes_path, e))?
        .lines()
        .map(str::to_string)
        .collect();

    let index = dir.join(INDEX_FILE);
    let mut rdr = csv::Reader::from_path(&index)?;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let label: Option<usize> = rec.get(1).and_then(|s| s.parse().ok());
        if rec.get(0) != Some(sample_name(i).as_str()) || label != labels.get(i).copied() {
            return Err(Error::Parse {
                path: index.clone(),
                offset,
                detail: format!("index row {i} disagrees with {DATASET_FILE}"),
            });
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse {
            path: index,
            offset: 0,
            detail: format!("{rows} index rows for {n} samples"),
        });
    }
    LabeledDataset::new((c, h, w), images.into_data(), labels, classes)
}
