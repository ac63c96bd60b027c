//! IDX image/label files (the MNIST distribution format).
//!
//! Big-endian headers: images carry magic `0x00000803` followed by count,
//! rows, cols; labels carry magic `0x00000801` followed by count. Pixels are
//! single bytes, scaled to `[0, 1]` on load.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Data(format!("{what}: file truncated at offset {offset}")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Load an images/labels IDX pair into a `[N, rows, cols]` dataset with
/// `C = 10`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)
        .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
    let label_bytes = fs::read(labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;

    let magic = read_u32_be(&image_bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "images: bad magic {magic:#010x} at offset 0 (expected {IMAGE_MAGIC:#010x})"
        )));
    }
    let count = read_u32_be(&image_bytes, 4, "images")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "images")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "images")? as usize;
    let pixel_bytes = &image_bytes[16..];
    if pixel_bytes.len() != count * rows * cols {
        return Err(Error::Data(format!(
            "images: expected {} pixel bytes for {count} x {rows} x {cols}, found {}",
            count * rows * cols,
            pixel_bytes.len()
        )));
    }

    let label_magic = read_u32_be(&label_bytes, 0, "labels")?;
    if label_magic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "labels: bad magic {label_magic:#010x} at offset 0 (expected {LABEL_MAGIC:#010x})"
        )));
    }
    let label_count = read_u32_be(&label_bytes, 4, "labels")? as usize;
    if label_bytes.len() != 8 + label_count {
        return Err(Error::Data(format!(
            "labels: expected {label_count} label bytes, found {}",
            label_bytes.len() - 8
        )));
    }
    if label_count != count {
        return Err(Error::Data(format!(
            "count mismatch: {count} images vs {label_count} labels"
        )));
    }

    let data: Vec<f64> = pixel_bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Data(format!("labels: label value {bad} >= 10")));
    }

    Dataset::new(
        Tensor::from_vec(&[count, rows, cols], data)?,
        labels,
        10,
        images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
    )
}

/// Write a `[N, rows, cols]` dataset as an IDX pair. Pixels are quantized to
/// `round(v * 255)`; data already on that grid round-trips exactly.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.example_shape();
    if shape.len() != 2 {
        return Err(Error::Data(format!(
            "IDX images must be [rows, cols] per example, got {shape:?}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let n = dataset.len();

    let mut image_bytes = Vec::with_capacity(16 + n * rows * cols);
    image_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in &dataset.examples.data {
        image_bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }

    let mut label_bytes = Vec::with_capacity(8 + n);
    label_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    label_bytes.extend(dataset.labels.iter().map(|&l| l as u8));

    fs::write(images_path, image_bytes)?;
    fs::write(labels_path, label_bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn hand_built_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        // Two 1x1 images: bytes 51 and 255.
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&[51, 255]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 7]);

        let ip = write_raw(dir.path(), "imgs", &images);
        let lp = write_raw(dir.path(), "lbls", &labels);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.class_count, 10);
        assert!((d.examples.data[0] - 51.0 / 255.0).abs() < 1e-15);
        assert!((d.examples.data[1] - 1.0).abs() < 1e-15);
        assert_eq!(d.labels, vec![3, 7]);
    }

    #[test]
    fn wrong_label_magic_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.push(0);
        let mut labels = Vec::new();
        labels.extend_from_slice(&0xdead_beefu32.to_be_bytes());
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(0);

        let ip = write_raw(dir.path(), "imgs", &images);
        let lp = write_raw(dir.path(), "lbls", &labels);
        let err = load_idx(&ip, &lp).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad magic"), "{msg}");
        assert!(msg.contains("offset 0"), "{msg}");
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&[0, 0]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(0);

        let ip = write_raw(dir.path(), "imgs", &images);
        let lp = write_raw(dir.path(), "lbls", &labels);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Data(_))));
    }

    #[test]
    fn truncated_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write_raw(dir.path(), "imgs", &[0, 0]);
        let lp = write_raw(dir.path(), "lbls", &[0, 0]);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
