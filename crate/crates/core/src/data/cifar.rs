//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! 3072 pixel bytes in channel-major (R, G, B) order.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3072;
const RECORD_BYTES: usize = PIXELS + 1;

/// Load one or more binary batch files into a `[N, 3, 32, 32]` dataset.
pub fn load_cifar10(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Data("no CIFAR batch files given".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(Error::Data(format!(
                "{}: length {} is not a multiple of {RECORD_BYTES}",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(RECORD_BYTES) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(Error::Data(format!(
                    "{}: label byte {label} >= 10",
                    path.display()
                )));
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], data)?,
        labels,
        10,
        paths[0]
            .as_ref()
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cifar".into()),
    )
}

/// Write a `[N, 3, 32, 32]` dataset as one binary batch file. Pixels are
/// quantized to `round(v * 255)`.
pub fn write_cifar10(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.example_shape() != [3, 32, 32] {
        return Err(Error::Data(format!(
            "CIFAR records must be [3, 32, 32] per example, got {:?}",
            dataset.example_shape()
        )));
    }
    let mut bytes = Vec::with_capacity(dataset.len() * RECORD_BYTES);
    for i in 0..dataset.len() {
        bytes.push(dataset.labels[i] as u8);
        bytes.extend(
            dataset
                .examples
                .row(i)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(path, bytes)?;
    Ok(())
}
