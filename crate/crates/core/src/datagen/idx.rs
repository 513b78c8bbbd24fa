//! Reader for the IDX format used by MNIST-family files: a big-endian `u32`
//! magic (`0x00000803` for 3-d unsigned-byte images, `0x00000801` for 1-d
//! unsigned-byte labels), one big-endian `u32` per dimension, then raw bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Features, TaskKind, Targets};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.path,
                format!("byte {}", self.bytes.len()),
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse<'a>(path: &'a Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let mut r = Reader { path, bytes, pos: 0 };
    let found = r.u32()?;
    if found != magic {
        return Err(Error::format(
            path,
            "byte 0",
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "byte 4", "dimension product overflows"))?;
    let body = r.take(total)?;
    Ok((dims, body))
}

/// Images as `[count × rows·cols]` with bytes scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let (dims, body) = parse(path, &bytes, IMAGE_MAGIC)?;
    let (count, pixels) = (dims[0], dims[1] * dims[2]);
    if count == 0 || pixels == 0 {
        return Err(Error::format(path, "byte 4", "image file holds no pixels"));
    }
    let data = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![count, pixels], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let (_, body) = parse(path, &bytes, LABEL_MAGIC)?;
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label file pair as a classification dataset with
/// `max(label) + 1` classes (at least 2).
pub fn idx_load(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.rows() != y.len() {
        return Err(Error::format(
            labels,
            "byte 4",
            format!("{} labels for {} images", y.len(), x.rows()),
        ));
    }
    let classes = y.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(
        Features::Vectors(x),
        Targets::Classes(y),
        TaskKind::Classification { classes },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = IMAGE_MAGIC.to_be_bytes().to_vec();
        for d in [count, rows, cols] {
            v.extend(d.to_be_bytes());
        }
        v.extend(pixels);
        v
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut v = LABEL_MAGIC.to_be_bytes().to_vec();
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend(labels);
        v
    }

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn minimal_image_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &image_file(1, 2, 2, &[0, 128, 255, 64]));
        let lab = write(&dir, "lab", &label_file(&[1]));
        let d = idx_load(&img, &lab).unwrap();
        let Features::Vectors(x) = d.features() else { panic!() };
        let want = [0.0, 0.50196, 1.0, 0.25098];
        for (got, want) in x.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        for (got, b) in x.data().iter().zip([0u8, 128, 255, 64]) {
            assert!((got - f64::from(b) / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &image_file(1, 2, 2, &[0, 1, 2, 3]));
        let lab = write(&dir, "lab", &label_file(&[1, 0]));
        assert!(matches!(idx_load(&img, &lab), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &[]);
        assert!(matches!(read_idx_images(&img), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &label_file(&[1]));
        let err = read_idx_images(&img).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(&dir, "img", &image_file(2, 2, 2, &[1, 2, 3]));
        let err = read_idx_images(&img).unwrap_err().to_string();
        assert!(err.contains("offset 16"), "{err}");
    }
}
