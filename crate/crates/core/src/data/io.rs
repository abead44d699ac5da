//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.csv   subject_id,class_id,image_file,mask_file,height,width,channels
//! <dir>/classes.txt    one class name per line, in class-id order
//! <dir>/tensors/*.fstn tensor files
//! ```
//!
//! A tensor file is the magic `FSTN`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the values as little-endian `f64`. Datasets
//! are written with rank 2 (`[channels * height, width]`), so the header is
//! exactly 16 bytes; readers accept any rank whose element count matches the
//! manifest.

use std::fs;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSTN";
const MANIFEST: &str = "manifest.csv";
const CLASSES: &str = "classes.txt";
const HEADER: [&str; 7] = [
    "subject_id",
    "class_id",
    "image_file",
    "mask_file",
    "height",
    "width",
    "channels",
];

pub fn write_tensor_file(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * shape.len() + 8 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a tensor file, returning its header dims and values.
pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing FSTN header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let rank = word(4);
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i)).collect();
    let numel: usize = dims.iter().product();
    let expected = header + 8 * numel;
    if bytes.len() != expected {
        return Err(bad(format!(
            "truncated or oversized tensor data: {} bytes, expected {expected} for dims {dims:?}",
            bytes.len()
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let classes_path = dir.join(CLASSES);
    fs::write(&classes_path, dataset.class_names.join("\n") + "\n")
        .map_err(|e| Error::io(&classes_path, e))?;
    let manifest = dir.join(MANIFEST);
    let mut writer = csv::Writer::from_path(&manifest)
        .map_err(|e| Error::format(&manifest, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(&manifest, e.to_string());
    writer.write_record(HEADER).map_err(csv_err)?;
    for s in &dataset.samples {
        let (c, h, w) = (s.channels(), s.height(), s.width());
        let image_file = format!("tensors/{}_image.fstn", s.subject_id);
        let mask_file = format!("tensors/{}_mask.fstn", s.subject_id);
        write_tensor_file(&dir.join(&image_file), &[c * h, w], s.image.data())?;
        write_tensor_file(&dir.join(&mask_file), &[h, w], s.mask.data())?;
        writer
            .write_record([
                s.subject_id.clone(),
                s.class_id.to_string(),
                image_file,
                mask_file,
                h.to_string(),
                w.to_string(),
                c.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))
}

fn load_tensor(dir: &Path, file: &str, shape: Vec<usize>) -> Result<Tensor> {
    let path = dir.join(file);
    let (dims, data) = read_tensor_file(&path)?;
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(Error::format(
            &path,
            format!("dims {dims:?} do not match manifest shape {shape:?}"),
        ));
    }
    Tensor::new(shape, data)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let mut reader =
        csv::Reader::from_path(&manifest).map_err(|e| Error::format(&manifest, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::format(&manifest, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::format(
            &manifest,
            format!("expected columns {}, found {}", HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut samples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let row = line + 2;
        let record = record.map_err(|e| Error::format(&manifest, format!("row {row}: {e}")))?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let number = |i: usize| {
            field(i).parse::<usize>().map_err(|_| {
                Error::format(
                    &manifest,
                    format!("row {row}: field `{}` is not a non-negative integer: `{}`", HEADER[i], field(i)),
                )
            })
        };
        let subject_id = field(0).to_string();
        if subject_id.is_empty() {
            return Err(Error::format(&manifest, format!("row {row}: empty subject_id")));
        }
        let class_id = number(1)?;
        let (h, w, c) = (number(4)?, number(5)?, number(6)?);
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::format(&manifest, format!("row {row}: zero dimension")));
        }
        let image = load_tensor(dir, field(2), vec![c, h, w])?;
        let mask = load_tensor(dir, field(3), vec![1, h, w])?;
        samples.push(Sample {
            subject_id,
            image,
            mask,
            class_id,
        });
    }
    let classes_path = dir.join(CLASSES);
    let max_class = samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0);
    let class_names = match fs::read_to_string(&classes_path) {
        Ok(text) => text.lines().map(str::to_string).filter(|l| !l.is_empty()).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            (0..max_class).map(|i| format!("class{i}")).collect()
        }
        Err(e) => return Err(Error::io(&classes_path, e)),
    };
    let names: &Vec<String> = &class_names;
    if names.len() < max_class {
        return Err(Error::format(
            &classes_path,
            format!("{} class names but class id {} used", names.len(), max_class - 1),
        ));
    }
    Ok(Dataset {
        class_names,
        samples,
    })
}
