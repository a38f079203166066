use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use super::FacePixels;
use crate::error::{MeerError, Result};

/// Reads an 8-bit RGB image and maps each channel value `v` to `v / 127.5 - 1`.
pub fn load_face_image(path: &Path) -> Result<FacePixels> {
    let img = image::open(path)
        .map_err(|e| MeerError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    FacePixels::new(h, w, data)
}

/// Writes pixels as an 8-bit RGB file; the format follows the extension.
pub fn save_face_image(pixels: &FacePixels, path: &Path) -> Result<()> {
    let (h, w) = (pixels.height(), pixels.width());
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| ((pixels.get(c, y as usize, x as usize) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        Rgb([q(0), q(1), q(2)])
    });
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| MeerError::io(parent, e))?;
        }
    }
    img.save(path).map_err(|e| MeerError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_data::synth_identity_face;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("face.png");
        let face = synth_identity_face(4, 0, 32).unwrap();
        save_face_image(&face.pixels, &path).unwrap();
        let back = load_face_image(&path).unwrap();
        assert_eq!((back.height(), back.width()), (32, 32));
        for (a, b) in face.pixels.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 127.5 + 1e-6);
        }
        // a second save/load cycle is exact
        save_face_image(&back, &path).unwrap();
        assert_eq!(load_face_image(&path).unwrap(), back);
    }

    #[test]
    fn unreadable_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = load_face_image(&path).unwrap_err();
        assert!(err.to_string().contains("broken.png"));
    }
}
