//! Checkpoint container.
//!
//! A plain-text manifest followed by the raw parameter payload:
//!
//! ```text
//! puzzlecam-checkpoint
//! format_version = 1
//! backbone = {"kind":"tiny_cnn","widths":[16,32,64,128],"stride":16}
//! num_classes = 3
//! dtype = f64-le
//! param backbone.0.weight = 16x27
//! ...
//! end
//! <little-endian f64 values of every parameter, in manifest order>
//! ```
//!
//! Values are always stored as `f64`, which round-trips `f32` models exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayViewMutD;

use super::{BackboneSpec, Classifier};
use crate::error::{Error, Result};
use crate::Real;

pub const CHECKPOINT_MAGIC: &str = "puzzlecam-checkpoint";
const FORMAT_VERSION: u32 = 1;

struct Manifest {
    backbone: BackboneSpec,
    num_classes: usize,
    params: Vec<(String, Vec<usize>)>,
    payload_offset: usize,
}

impl<R: Real> Classifier<R> {
    /// Writes the manifest and parameters to `path`.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        let spec = serde_json::to_string(&self.spec()).expect("spec serializes");
        writeln!(buf, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(buf, "format_version = {FORMAT_VERSION}").unwrap();
        writeln!(buf, "backbone = {spec}").unwrap();
        writeln!(buf, "num_classes = {}", self.num_classes()).unwrap();
        writeln!(buf, "dtype = f64-le").unwrap();
        let params = self.parameters();
        for (name, t) in &params {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(buf, "param {name} = {}", shape.join("x")).unwrap();
        }
        writeln!(buf, "end").unwrap();
        for (_, t) in &params {
            for v in t.iter() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written for a built-in backbone.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest = parse_manifest(path, &bytes)?;
        if matches!(manifest.backbone, BackboneSpec::External { .. }) {
            return Err(Error::Config(format!(
                "{}: external backbones must be constructed by the caller; use load_checkpoint",
                path.display()
            )));
        }
        let mut model = Classifier::new(manifest.backbone.clone(), manifest.num_classes, 0)?;
        model.fill_from(path, &bytes, &manifest)?;
        Ok(model)
    }

    /// Overwrites this model's parameters from `path`. The stored backbone and
    /// class count must match.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest = parse_manifest(path, &bytes)?;
        if manifest.num_classes != self.num_classes() {
            return Err(Error::shape(
                format!("{}: class count", path.display()),
                format!("C = {}", self.num_classes()),
                format!("C = {}", manifest.num_classes),
            ));
        }
        if manifest.backbone != self.spec() {
            return Err(Error::shape(
                format!("{}: backbone", path.display()),
                self.spec(),
                &manifest.backbone,
            ));
        }
        self.fill_from(path, &bytes, &manifest)
    }

    fn fill_from(&mut self, path: &Path, bytes: &[u8], manifest: &Manifest) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected != manifest.params {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: "parameter list does not match the model architecture".into(),
            });
        }
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let payload = &bytes[manifest.payload_offset..];
        if payload.len() != total * 8 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (manifest.payload_offset + payload.len().min(total * 8)) as u64,
                message: format!("payload holds {} bytes, expected {}", payload.len(), total * 8),
            });
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut params: Vec<ArrayViewMutD<'_, R>> = self.parameters_mut();
        for t in params.iter_mut() {
            for v in t.iter_mut() {
                *v = R::lit(values.next().expect("length checked"));
            }
        }
        Ok(())
    }
}

fn parse_manifest(path: &Path, bytes: &[u8]) -> Result<Manifest> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let mut offset = 0;
    let next_line = |offset: &mut usize| -> Option<(usize, String)> {
        let rest = &bytes[*offset..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        let start = *offset;
        *offset += end + 1;
        Some((start, String::from_utf8_lossy(&rest[..end]).into_owned()))
    };
    match next_line(&mut offset) {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(fail(0, format!("missing `{CHECKPOINT_MAGIC}` header"))),
    }
    let mut backbone = None;
    let mut num_classes = None;
    let mut params = Vec::new();
    loop {
        let (at, line) =
            next_line(&mut offset).ok_or_else(|| fail(offset, "manifest is not terminated by `end`".into()))?;
        if line == "end" {
            break;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| fail(at, format!("malformed manifest line `{line}`")))?;
        match key {
            "format_version" => {
                if value != FORMAT_VERSION.to_string() {
                    return Err(fail(at, format!("unsupported format version {value}")));
                }
            }
            "backbone" => {
                backbone = Some(
                    serde_json::from_str::<BackboneSpec>(value)
                        .map_err(|e| fail(at, format!("bad backbone spec: {e}")))?,
                )
            }
            "num_classes" => {
                num_classes = Some(
                    value
                        .parse::<usize>()
                        .map_err(|e| fail(at, format!("bad class count: {e}")))?,
                )
            }
            "dtype" => {
                if value != "f64-le" {
                    return Err(fail(at, format!("unsupported dtype {value}")));
                }
            }
            k if k.starts_with("param ") => {
                let shape = value
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| fail(at, format!("bad shape `{value}`: {e}")))?;
                params.push((k["param ".len()..].to_string(), shape));
            }
            other => return Err(fail(at, format!("unknown manifest key `{other}`"))),
        }
    }
    Ok(Manifest {
        backbone: backbone.ok_or_else(|| fail(offset, "manifest lacks `backbone`".into()))?,
        num_classes: num_classes.ok_or_else(|| fail(offset, "manifest lacks `num_classes`".into()))?,
        params,
        payload_offset: offset,
    })
}
