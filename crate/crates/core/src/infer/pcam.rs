//! `PCAM` v1: normalized CAMs for a subset of classes.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "PCAM"
//! 4       1           version (1)
//! 5       2           class count C'   (u16, little-endian)
//! 7       2           height H         (u16)
//! 9       2           width W          (u16)
//! 11      2·C'        class ids        (u16 each)
//! ...     4·C'·H·W    values           (f32, class-major, row-major)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::cam::CamStack;
use crate::error::{Error, Result};

pub const PCAM_MAGIC: [u8; 4] = *b"PCAM";
pub const PCAM_VERSION: u8 = 1;
const HEADER_LEN: usize = 11;

/// Contents of a CAM file: `cams` holds one map per entry of `class_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcamFile {
    pub class_ids: Vec<u16>,
    pub cams: CamStack<f32>,
}

impl PcamFile {
    /// Expands to a `num_classes` stack with zeros for classes not stored.
    pub fn to_full_stack(&self, num_classes: usize) -> Result<CamStack<f32>> {
        let (h, w) = self.cams.spatial();
        let mut maps = Array3::<f32>::zeros((num_classes, h, w));
        for (map, &id) in self.cams.maps().outer_iter().zip(&self.class_ids) {
            let id = id as usize;
            if id >= num_classes {
                return Err(Error::Contract(format!(
                    "stored class id {id} out of range for {num_classes} classes"
                )));
            }
            maps.index_axis_mut(ndarray::Axis(0), id).assign(&map);
        }
        CamStack::normalized(maps)
    }
}

/// Writes normalized `cams`, one map per entry of `class_ids`.
pub fn export_cams(cams: &CamStack<f32>, class_ids: &[u16], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !cams.is_normalized() {
        return Err(Error::Contract("only normalized CAMs can be exported".into()));
    }
    let (c, h, w) = cams.maps().dim();
    if class_ids.len() != c {
        return Err(Error::shape("class ids", format!("{c} ids"), class_ids.len()));
    }
    let to_u16 = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit the CAM file header")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 2 * c + 4 * c * h * w);
    buf.extend_from_slice(&PCAM_MAGIC);
    buf.push(PCAM_VERSION);
    for (v, what) in [(c, "class count"), (h, "height"), (w, "width")] {
        buf.extend_from_slice(&to_u16(v, what)?.to_le_bytes());
    }
    for id in class_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for v in cams.maps().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn import_cams(path: impl AsRef<Path>) -> Result<PcamFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if bytes[..4] != PCAM_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes[4] != PCAM_VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let (c, h, w) = (u16_at(5), u16_at(7), u16_at(9));
    let expected = HEADER_LEN + 2 * c + 4 * c * h * w;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes for {c}x{h}x{w} maps, found {}", bytes.len()),
        ));
    }
    let class_ids: Vec<u16> = (0..c).map(|k| u16_at(HEADER_LEN + 2 * k) as u16).collect();
    let start = HEADER_LEN + 2 * c;
    let values: Vec<f32> = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let maps = Array3::from_shape_vec((c, h, w), values).expect("length checked");
    let cams = CamStack::normalized(maps).map_err(|e| fail(start, e.to_string()))?;
    Ok(PcamFile { class_ids, cams })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CamStack<f32> {
        let maps = Array3::from_shape_fn((2, 3, 5), |(c, y, x)| ((c * 15 + y * 5 + x) as f32 / 29.0).sqrt());
        CamStack::normalized(maps).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcam");
        let cams = sample();
        export_cams(&cams, &[4, 1], &path).unwrap();
        let back = import_cams(&path).unwrap();
        assert_eq!(back.class_ids, vec![4, 1]);
        let bits = |s: &CamStack<f32>| s.maps().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.cams), bits(&cams));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 11 + 4 + 4 * 30);
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcam");
        export_cams(&sample(), &[0, 2], &path).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(&b[..11], &[b'P', b'C', b'A', b'M', 1, 2, 0, 3, 0, 5, 0]);
        assert_eq!(&b[11..15], &[0, 0, 2, 0]);
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcam");
        export_cams(&sample(), &[0, 1], &path).unwrap();
        let mut b = std::fs::read(&path).unwrap();
        b[0] = b'X';
        std::fs::write(&path, &b).unwrap();
        assert!(matches!(import_cams(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_names_both_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcam");
        export_cams(&sample(), &[0, 1], &path).unwrap();
        let b = std::fs::read(&path).unwrap();
        std::fs::write(&path, &b[..b.len() - 3]).unwrap();
        let err = import_cams(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains(&b.len().to_string()) && msg.contains(&(b.len() - 3).to_string()),
            "{msg}"
        );
        std::fs::write(&path, &b[..6]).unwrap();
        assert!(matches!(import_cams(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unsupported_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcam");
        export_cams(&sample(), &[0, 1], &path).unwrap();
        let mut b = std::fs::read(&path).unwrap();
        b[4] = 2;
        std::fs::write(&path, &b).unwrap();
        assert!(matches!(import_cams(&path), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn raw_stacks_are_not_exported() {
        let dir = tempfile::tempdir().unwrap();
        let raw = CamStack::raw(Array3::<f32>::zeros((1, 2, 2)));
        assert!(export_cams(&raw, &[0], dir.path().join("a.pcam")).is_err());
    }

    #[test]
    fn subset_expands_with_zeros() {
        let file = PcamFile {
            class_ids: vec![2],
            cams: CamStack::normalized(Array3::from_elem((1, 2, 2), 0.5)).unwrap(),
        };
        let full = file.to_full_stack(3).unwrap();
        assert_eq!(full.maps().index_axis(ndarray::Axis(0), 2).sum(), 2.0);
        assert_eq!(full.maps().sum(), 2.0);
        assert!(file.to_full_stack(2).is_err());
    }
}
