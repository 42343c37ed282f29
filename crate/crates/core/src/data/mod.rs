//! Datasets: the on-disk layout, label masks, augmentation and a synthetic
//! shapes generator.
//!
//! Layout under a dataset root:
//!
//! ```text
//! classes.txt          one class name per line; line k (1-based) is mask value k
//! <split>.csv          image_id,rel_image_path,label_1;label_2[,rel_mask_path]
//! ```
//!
//! Mask pixels hold the class value, `0` for background and `255` for
//! pixels excluded from evaluation.

mod augment;
mod synthetic;

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array2, Array3};

pub use augment::{augment, AugmentationConfig};
pub use synthetic::{make_synthetic, SyntheticConfig, SHAPE_CATALOG};

use crate::cam::LabelVector;
use crate::error::{Error, Result};

/// Mask value for pixels that evaluation skips.
pub const IGNORE_INDEX: u8 = 255;

/// Where an item's pixels live.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

/// Where an item's ground-truth mask lives.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    Path(PathBuf),
    Memory(Arc<Array2<u8>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: ImageSource,
    pub labels: LabelVector,
    pub mask: Option<MaskSource>,
}

impl DatasetItem {
    pub fn load_image(&self) -> Result<RgbImage> {
        match &self.image {
            ImageSource::Memory(img) => Ok((**img).clone()),
            ImageSource::Path(p) => read_rgb(p).map_err(|e| Error::Load {
                item: self.id.clone(),
                message: e.to_string(),
            }),
        }
    }

    /// The image as a `(3, H, W)` tensor in `[0, 1]`.
    pub fn load_tensor(&self) -> Result<Array3<f32>> {
        Ok(image_to_tensor(&self.load_image()?))
    }

    pub fn load_mask(&self) -> Result<Option<Array2<u8>>> {
        match &self.mask {
            None => Ok(None),
            Some(MaskSource::Memory(m)) => Ok(Some((**m).clone())),
            Some(MaskSource::Path(p)) => read_mask(p).map(Some).map_err(|e| Error::Load {
                item: self.id.clone(),
                message: e.to_string(),
            }),
        }
    }
}

/// An immutable list of labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDescriptor {
    pub root: Option<PathBuf>,
    pub split: String,
    pub class_names: Vec<String>,
    items: Vec<DatasetItem>,
}

impl DatasetDescriptor {
    /// Checks that ids are unique and every item has a positive class.
    pub fn new(
        root: Option<PathBuf>,
        split: impl Into<String>,
        class_names: Vec<String>,
        items: Vec<DatasetItem>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(load_err(&item.id, "duplicate image id"));
            }
            if item.labels.len() != class_names.len() {
                return Err(load_err(
                    &item.id,
                    format!("{} labels for {} classes", item.labels.len(), class_names.len()),
                ));
            }
            if item.labels.present().is_empty() {
                return Err(load_err(&item.id, "no positive class"));
            }
        }
        Ok(Self {
            root,
            split: split.into(),
            class_names,
            items,
        })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

fn load_err(item: &str, message: impl Into<String>) -> Error {
    Error::Load {
        item: item.to_string(),
        message: message.into(),
    }
}

/// Reads `root/classes.txt` and `root/<split>.csv`.
pub fn load_dataset(root: impl AsRef<Path>, split: &str) -> Result<DatasetDescriptor> {
    let root = root.as_ref();
    let class_path = root.join("classes.txt");
    let class_names: Vec<String> = fs::read_to_string(&class_path)
        .map_err(|e| Error::io(&class_path, e))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if class_names.is_empty() {
        return Err(Error::Config(format!("{}: no classes listed", class_path.display())));
    }

    let csv_path = root.join(format!("{split}.csv"));
    let file = File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut items = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("{}: row {}: {e}", csv_path.display(), row + 1)))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let id = record.get(0).unwrap_or_default().to_string();
        if !(3..=4).contains(&record.len()) {
            return Err(load_err(
                &id,
                format!("expected 3 or 4 columns, found {}", record.len()),
            ));
        }
        let image_path = root.join(&record[1]);
        image::image_dimensions(&image_path)
            .map_err(|e| load_err(&id, format!("unreadable image {}: {e}", image_path.display())))?;

        let mut present = Vec::new();
        for name in record[2].split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let idx = class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| load_err(&id, format!("unknown class `{name}`")))?;
            present.push(idx);
        }
        if present.is_empty() {
            return Err(load_err(&id, "no positive class"));
        }
        let labels = LabelVector::from_present(class_names.len(), &present)?;

        let mask = match record.get(3).filter(|s| !s.is_empty()) {
            Some(rel) => {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(load_err(&id, format!("missing mask {}", p.display())));
                }
                Some(MaskSource::Path(p))
            }
            None => None,
        };
        items.push(DatasetItem {
            id,
            image: ImageSource::Path(image_path),
            labels,
            mask,
        });
    }
    DatasetDescriptor::new(Some(root.to_path_buf()), split, class_names, items)
}

/// Writes `dataset` under `root` in the standard layout (images to
/// `images/<id>.png`, masks to `masks/<id>.png`) and returns the descriptor
/// of the written copy.
pub fn write_dataset(dataset: &DatasetDescriptor, root: impl AsRef<Path>) -> Result<DatasetDescriptor> {
    let root = root.as_ref();
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let class_path = root.join("classes.txt");
    let mut classes = dataset.class_names.join("\n");
    classes.push('\n');
    fs::write(&class_path, classes).map_err(|e| Error::io(&class_path, e))?;

    let csv_path = root.join(format!("{}.csv", dataset.split));
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&csv_path)
        .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
    for item in dataset.items() {
        let rel_image = format!("images/{}.png", item.id);
        write_rgb(&root.join(&rel_image), &item.load_image()?)?;
        let labels: Vec<&str> = item
            .labels
            .present()
            .into_iter()
            .map(|c| dataset.class_names[c].as_str())
            .collect();
        let labels = labels.join(";");
        let mut row = vec![item.id.clone(), rel_image, labels];
        if let Some(mask) = item.load_mask()? {
            let rel_mask = format!("masks/{}.png", item.id);
            write_mask(&root.join(&rel_mask), &mask)?;
            row.push(rel_mask);
        }
        writer
            .write_record(&row)
            .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    load_dataset(root, &dataset.split)
}

/// Reads any supported image and converts it to 8-bit RGB (grayscale is
/// replicated across channels).
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// `(3, H, W)` tensor in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Inverse of [`image_to_tensor`], clamping to `[0, 1]`.
pub fn tensor_to_image(t: &Array3<f32>) -> RgbImage {
    let (_, h, w) = t.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Reads an 8-bit indexed or grayscale PNG as raw indices, without palette
/// expansion.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let bad = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(bad(format!(
            "masks must be 8-bit indexed or grayscale, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rows: Vec<u8> = buf
        .chunks(info.line_size)
        .take(h)
        .flat_map(|r| r[..w].iter().copied())
        .collect();
    Ok(Array2::from_shape_vec((h, w), rows).expect("row-major buffer"))
}

/// Writes `mask` as an 8-bit indexed PNG with the conventional
/// segmentation palette.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette());
    let fail = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(fail)?;
    let data: Vec<u8> = mask.iter().copied().collect();
    writer.write_image_data(&data).map_err(fail)?;
    writer.finish().map_err(fail)
}

/// 256-entry RGB palette: bit-interleaved colours per index, white for the
/// ignore value.
fn palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256usize {
        let mut rgb = [0u8; 3];
        let mut c = i;
        for j in 0..8 {
            for (k, ch) in rgb.iter_mut().enumerate() {
                *ch |= (((c >> k) & 1) as u8) << (7 - j);
            }
            c >>= 3;
        }
        if i == IGNORE_INDEX as usize {
            rgb = [255, 255, 255];
        }
        pal.extend_from_slice(&rgb);
    }
    pal
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_tree(dir: &Path, rows: &str) {
        fs::write(dir.join("classes.txt"), "cat\ndog\nbird\n").unwrap();
        fs::create_dir_all(dir.join("img")).unwrap();
        for id in ["a", "b", "c"] {
            write_rgb(&dir.join(format!("img/{id}.png")), &RgbImage::new(4, 3)).unwrap();
        }
        fs::write(dir.join("train.csv"), rows).unwrap();
    }

    #[test]
    fn loads_well_formed_tree() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), "a,img/a.png,cat\nb,img/b.png,dog;bird\nc,img/c.png,bird\n");
        let ds = load_dataset(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.items()[1].labels.present(), vec![1, 2]);
        assert_eq!(ds.items()[2].load_tensor().unwrap().dim(), (3, 3, 4));
    }

    #[test]
    fn unknown_class_is_named() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), "a,img/a.png,cat\nb,img/b.png,horse\n");
        let msg = load_dataset(dir.path(), "train").unwrap_err().to_string();
        assert!(msg.contains("horse") && msg.contains("`b`"), "{msg}");
    }

    #[test]
    fn empty_label_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), "a,img/a.png,\n");
        let msg = load_dataset(dir.path(), "train").unwrap_err().to_string();
        assert!(msg.contains("no positive class"), "{msg}");
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), "a,img/zzz.png,cat\n");
        let msg = load_dataset(dir.path(), "train").unwrap_err().to_string();
        assert!(msg.contains("`a`") && msg.contains("zzz.png"), "{msg}");
        assert!(matches!(load_dataset(dir.path(), "val"), Err(Error::Io { .. })));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy_tree(dir.path(), "a,img/a.png,cat\na,img/b.png,dog\n");
        assert!(load_dataset(dir.path(), "train")
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn mask_round_trip_keeps_raw_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Array2::from_shape_fn((5, 7), |(y, x)| if x == 6 { 255 } else { (y + x) as u8 % 4 });
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn rgb_masks_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_rgb(&path, &RgbImage::new(2, 2)).unwrap();
        assert!(read_mask(&path).is_err());
    }

    #[test]
    fn palette_has_distinct_low_entries() {
        let pal = palette();
        assert_eq!(pal.len(), 768);
        assert_eq!(&pal[0..3], &[0, 0, 0]);
        assert_eq!(&pal[3..6], &[128, 0, 0]);
        assert_eq!(&pal[6..9], &[0, 128, 0]);
        assert_eq!(&pal[765..768], &[255, 255, 255]);
    }

    #[test]
    fn tensor_image_round_trip() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([x as u8 * 40, y as u8 * 90, 7]));
        assert_eq!(tensor_to_image(&image_to_tensor(&img)), img);
    }
}
