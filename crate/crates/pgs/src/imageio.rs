//! Reading, resizing and writing RGB images.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageReader, RgbImage};
use pgs_core::ImageTensor;

use crate::error::{PgsError, Result};

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| PgsError::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| PgsError::io(path, e))?;
    let img = reader.decode().map_err(|e| PgsError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn to_tensor(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px[ch] as f64 / 255.0;
        }
    }
    ImageTensor::from_vec(h, w, data).expect("8-bit values lie in [0, 1]")
}

pub fn to_rgb(img: &ImageTensor) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let d = img.tensor().data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            (d[(ch * h + y as usize) * w + x as usize] * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    })
}

/// Scales so the shorter side equals `side`, keeping the aspect ratio.
pub fn resize_shorter_side(img: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w.min(h) == side {
        return img.clone();
    }
    let (nw, nh) = if w <= h {
        (
            side,
            ((h as u64 * side as u64 + w as u64 / 2) / w as u64).max(side as u64) as u32,
        )
    } else {
        (
            ((w as u64 * side as u64 + h as u64 / 2) / h as u64).max(side as u64) as u32,
            side,
        )
    };
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// Central `w × h` window.
pub fn center_crop(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    let x = (img.width() - w) / 2;
    let y = (img.height() - h) / 2;
    imageops::crop_imm(img, x, y, w, h).to_image()
}

/// Training input: shorter side resized to `side`, then a centered `side × side` crop.
pub fn load_square(path: &Path, side: u32) -> Result<ImageTensor> {
    let img = resize_shorter_side(&read_rgb(path)?, side);
    Ok(to_tensor(&center_crop(&img, side, side)))
}

/// Inference input: optionally resized so the shorter side is `shorter`,
/// then center-cropped to the nearest multiples of 4.
pub fn load_for_stylize(path: &Path, shorter: Option<u32>) -> Result<ImageTensor> {
    let mut img = read_rgb(path)?;
    if let Some(side) = shorter {
        img = resize_shorter_side(&img, side);
    }
    let (w, h) = (img.width() / 4 * 4, img.height() / 4 * 4);
    if w == 0 || h == 0 {
        return Err(PgsError::Image {
            path: path.to_path_buf(),
            message: format!("{}x{} is smaller than 4x4", img.width(), img.height()),
        });
    }
    Ok(to_tensor(&center_crop(&img, w, h)))
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    to_rgb(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => PgsError::io(path, io),
            other => PgsError::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = RgbImage::from_fn(6, 5, |x, y| image::Rgb([(x * 40) as u8, (y * 50) as u8, 7]));
        let t = to_tensor(&img);
        assert_eq!((t.height(), t.width()), (5, 6));
        assert_eq!(to_rgb(&t), img);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&t, &p).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);
    }

    #[test]
    fn shorter_side_and_crop() {
        let img = RgbImage::new(100, 50);
        let r = resize_shorter_side(&img, 20);
        assert_eq!(r.dimensions(), (40, 20));
        let r = resize_shorter_side(&RgbImage::new(30, 90), 10);
        assert_eq!(r.dimensions(), (10, 30));
        assert_eq!(center_crop(&r, 10, 10).dimensions(), (10, 10));
    }

    #[test]
    fn stylize_inputs_are_multiples_of_four() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("odd.png");
        RgbImage::new(27, 18).save(&p).unwrap();
        let t = load_for_stylize(&p, None).unwrap();
        assert_eq!((t.height(), t.width()), (16, 24));
        let t = load_square(&p, 8).unwrap();
        assert_eq!((t.height(), t.width()), (8, 8));
        let missing = load_square(&dir.path().join("none.png"), 8).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }
}
