//! IDX reader/writer (big-endian headers, unsigned-byte payloads).

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw image tensor as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::format(
            path,
            format!("bad magic: expected {expected:#010x}, found {magic:#010x}"),
        ));
    }
    Ok(())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let count = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let needed = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < needed {
        return Err(Error::format(
            path,
            format!("truncated file: header promises {needed} pixel bytes, found {}", payload.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..needed].to_vec(),
    })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let count = read_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::format(
            path,
            format!("truncated file: header promises {count} labels, found {}", payload.len()),
        ));
    }
    Ok(payload[..count].to_vec())
}

/// Loads an image/label IDX pair, scaling pixels by 1/255.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let img = read_idx_images(images.as_ref())?;
    let lab = read_idx_labels(labels.as_ref())?;
    if img.count != lab.len() {
        return Err(Error::format(
            labels.as_ref(),
            format!("count mismatch: {} images but {} labels", img.count, lab.len()),
        ));
    }
    if img.count == 0 {
        return Err(Error::Empty("IDX dataset"));
    }
    let inputs = img.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(inputs, labels, img.rows * img.cols, num_classes)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img.idx");
        let lab = dir.join("lab.idx");
        write_idx_images(
            &img,
            &IdxImages {
                count: 2,
                rows: 2,
                cols: 2,
                pixels: vec![0, 255, 51, 102, 255, 0, 0, 153],
            },
        )
        .unwrap();
        write_idx_labels(&lab, &[3, 7]).unwrap();
        (img, lab)
    }

    #[test]
    fn loads_two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.input_dim(), 4);
        assert_eq!(d.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.row(1), &[1.0, 0.0, 0.0, 0.6]);
        assert_eq!(d.labels(), &[3, 7]);
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture(dir.path());
        let bytes = fs::read(img).unwrap();
        assert_eq!(&bytes[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        // Images file where a labels file is expected.
        let err = load_idx(&img, &img).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        let err = load_idx(&lab, &lab).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_and_mismatched() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let mut bytes = fs::read(&img).unwrap();
        bytes.truncate(bytes.len() - 1);
        let cut = dir.path().join("cut.idx");
        fs::write(&cut, bytes).unwrap();
        assert!(load_idx(&cut, &lab).unwrap_err().to_string().contains("truncated"));

        let three = dir.path().join("three.idx");
        write_idx_labels(&three, &[1, 2, 3]).unwrap();
        assert!(load_idx(&img, &three).unwrap_err().to_string().contains("count mismatch"));
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture(dir.path());
        let raw = read_idx_images(&img).unwrap();
        let again = dir.path().join("again.idx");
        write_idx_images(&again, &raw).unwrap();
        assert_eq!(fs::read(&img).unwrap(), fs::read(&again).unwrap());
        assert_eq!(raw.pixels, vec![0, 255, 51, 102, 255, 0, 0, 153]);
    }
}
