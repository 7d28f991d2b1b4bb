//! PNG dataset directories: `<id>.png` holds the image and `<id>_label.png`
//! the 16-bit (or 8-bit) instance labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{check_dims, Error, Result};
use crate::grid::{Image, LabelMap};

pub const LABEL_SUFFIX: &str = "_label.png";

/// An (image, ground truth) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
}

fn unsupported(path: &Path, detail: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads an 8/16-bit grayscale or RGB PNG, scaled to `[0, 1]` by the
/// sample-type maximum.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::ImageReader::open(path)?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, samples): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        other => return Err(unsupported(path, format!("color type {:?}", other.color()))),
    };
    Image::new(h, w, channels, samples)
}

/// Writes the first channel of `image` (or the RGB triple) as an 8-bit PNG.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.dims();
    let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match image.channels() {
        1 => {
            let raw: Vec<u8> = image.samples().iter().map(|&v| quant(v)).collect();
            let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| Error::ShapeMismatch("image buffer".into()))?;
            buf.save(path)?;
        }
        3 => {
            let raw: Vec<u8> = image.samples().iter().map(|&v| quant(v)).collect();
            let buf = ImageBuffer::<image::Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| Error::ShapeMismatch("image buffer".into()))?;
            buf.save(path)?;
        }
        k => return Err(unsupported(path, format!("{k}-channel images cannot be written"))),
    }
    Ok(())
}

/// Reads a single-channel label PNG; 8-bit labels are widened losslessly.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::ImageReader::open(path)?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
        other => {
            return Err(unsupported(
                path,
                format!("labels must be 8- or 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    LabelMap::new(h, w, labels)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, labels.labels().to_vec())
        .ok_or_else(|| Error::ShapeMismatch("label buffer".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Writes `<id>.png` and `<id>_label.png` into `dir`.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_image(&dir.join(format!("{}.png", sample.id)), &sample.image)?;
    write_labels(&dir.join(format!("{}{LABEL_SUFFIX}", sample.id)), &sample.labels)
}

/// Pairs of `(image path, label path)` keyed by id. Files that are not PNGs
/// are ignored.
pub fn pair_files(dir: &Path) -> Result<BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)>> {
    let mut pairs: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !path.is_file() || !name.ends_with(".png") {
            continue;
        }
        if let Some(id) = name.strip_suffix(LABEL_SUFFIX) {
            pairs.entry(id.to_string()).or_default().1 = Some(path.clone());
        } else if let Some(id) = name.strip_suffix(".png") {
            pairs.entry(id.to_string()).or_default().0 = Some(path.clone());
        }
    }
    Ok(pairs)
}

/// Loads every pair in `dir`, ordered by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for (id, (img, lab)) in pair_files(dir)? {
        let (img, lab) = match (img, lab) {
            (Some(i), Some(l)) => (i, l),
            (Some(_), None) => return Err(Error::Dataset(format!("image {id} has no {id}{LABEL_SUFFIX}"))),
            (None, _) => return Err(Error::Dataset(format!("label {id}{LABEL_SUFFIX} has no image {id}.png"))),
        };
        let image = read_image(&img)?;
        let labels = read_labels(&lab)?;
        check_dims(image.dims(), labels.dims())
            .map_err(|e| Error::Dataset(format!("{id}: {e}")))?;
        out.push(Sample { id, image, labels });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str) -> Sample {
        Sample {
            id: id.into(),
            image: Image::new(2, 3, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap(),
            labels: LabelMap::new(2, 3, vec![0, 1, 1, 300, 300, 0]).unwrap(),
        }
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
        assert!(load_dataset(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn save_and_load_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        save_sample(dir.path(), &sample("b")).unwrap();
        save_sample(dir.path(), &sample("a")).unwrap();
        fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].id, "a");
        assert_eq!(ds[0].labels, sample("a").labels);
        let got = ds[0].image.samples();
        for (g, e) in got.iter().zip(sample("a").image.samples()) {
            assert!((g - e).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn eight_bit_labels_are_widened() {
        let dir = tempfile::tempdir().unwrap();
        write_image(&dir.path().join("x.png"), &sample("x").image).unwrap();
        let buf = ImageBuffer::<Luma<u8>, _>::from_raw(3, 2, vec![0u8, 1, 1, 7, 7, 0]).unwrap();
        buf.save(dir.path().join("x_label.png")).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds[0].labels.labels(), &[0, 1, 1, 7, 7, 0]);
    }

    #[test]
    fn missing_label_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        write_image(&dir.path().join("lonely.png"), &sample("x").image).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("lonely"), "{err}");
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_image(&dir.path().join("m.png"), &sample("x").image).unwrap();
        write_labels(&dir.path().join("m_label.png"), &LabelMap::zeros(3, 3)).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn rgb_images_have_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let path = dir.path().join("c.png");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        let rgba = ImageBuffer::<image::Rgba<u8>, _>::from_raw(1, 1, vec![0u8, 0, 0, 255]).unwrap();
        let p2 = dir.path().join("rgba.png");
        rgba.save(&p2).unwrap();
        assert!(matches!(read_image(&p2), Err(Error::UnsupportedFormat { .. })));
    }
}
