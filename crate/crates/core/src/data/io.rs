use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every value to the nearest of the 256 levels an 8-bit PNG stores.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    let data = t
        .data()
        .iter()
        .map(|&v| to_byte(v) as f32 / 255.0)
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes a `1×3×H×W` image as 8-bit RGB.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [n, c, h, w] = image.dims4("save_image")?;
    if n != 1 || c != 3 {
        return Err(Error::shape(
            "save_image",
            format!("expected 1x3xHxW, got {:?}", image.shape()),
        ));
    }
    let plane = h * w;
    let d = image.data();
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            buf.push(to_byte(d[ch * plane + p]));
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized for image");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads any PNG as RGB into a `1×3×H×W` tensor with values `byte / 255`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new([1, 3, h, w], data)
}

/// Writes a single label map as 8-bit grayscale class indices.
pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    if labels.n != 1 {
        return Err(Error::shape(
            "save_labels",
            format!("expected one map, got {}", labels.n),
        ));
    }
    let img = GrayImage::from_raw(labels.w as u32, labels.h as u32, labels.data.clone())
        .expect("sized buffer");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_labels(path: &Path, classes: usize) -> Result<LabelMap> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(image_err(
            path,
            format!("label PNG must be 8-bit grayscale, found {:?}", img.color()),
        ));
    }
    let img = img.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw();
    if let Some((index, &value)) = data
        .iter()
        .enumerate()
        .find(|(_, &v)| v as usize >= classes)
    {
        return Err(Error::LabelOutOfRange {
            index,
            value,
            classes,
        });
    }
    LabelMap::new(1, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn byte_endpoints() {
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(-0.5), 0);
        assert_eq!(to_byte(0.5 / 255.0 + 1e-4), 1);
    }

    #[test]
    fn image_roundtrip_within_half_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::from_fn([1, 3, 5, 7], |_| rng.gen::<f32>());
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
        assert_eq!(back, quantize(&img));
    }

    #[test]
    fn label_roundtrip_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let labels = LabelMap::new(1, 2, 3, vec![0, 1, 2, 3, 4, 0]).unwrap();
        save_labels(&path, &labels).unwrap();
        assert_eq!(load_labels(&path, 5).unwrap(), labels);
        assert!(matches!(
            load_labels(&path, 4),
            Err(Error::LabelOutOfRange {
                index: 4,
                value: 4,
                ..
            })
        ));
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(&dir.path().join("nope.png")),
            Err(Error::Io { .. })
        ));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Image { .. })));
    }
}
