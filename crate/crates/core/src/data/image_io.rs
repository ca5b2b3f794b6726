//! Decoding, encoding and resampling of `[c, h, w]` images with values in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use microdiff_nn::Tensor;

use crate::{Error, Result};

/// Decodes PNG or PNM bytes. Grayscale stays single-channel; everything else
/// becomes RGB.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::data(format!("undecodable image: {e}")))?;
    Ok(from_dynamic(&img))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn from_dynamic(img: &DynamicImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = f64::from(p.0[c]);
            }
        }
        Tensor::new(vec![3, h, w], data)
    } else {
        let luma = img.to_luma32f();
        Tensor::new(vec![1, h, w], luma.into_raw().into_iter().map(f64::from).collect())
    }
}

fn to_dynamic(img: &Tensor) -> Result<DynamicImage> {
    if img.rank() != 3 || !(img.dim(0) == 1 || img.dim(0) == 3) {
        return Err(Error::shape(format!("expected [1|3, h, w], got {:?}", img.shape())));
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([q(img.data()[y as usize * w + x as usize])]));
        Ok(DynamicImage::ImageLuma8(buf))
    } else {
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([q(img.data()[i]), q(img.data()[h * w + i]), q(img.data()[2 * h * w + i])])
        });
        Ok(DynamicImage::ImageRgb8(buf))
    }
}

/// 8-bit PNG bytes.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_dynamic(img)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::format(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Writes PNG, or PGM/PPM when the extension is `.pgm`, `.ppm` or `.pnm`.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let format = match ext.as_str() {
        "pgm" | "ppm" | "pnm" => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    let mut out = Cursor::new(Vec::new());
    to_dynamic(img)?
        .write_to(&mut out, format)
        .map_err(|e| Error::format(format!("image encode: {e}")))?;
    std::fs::write(path, out.into_inner())?;
    Ok(())
}

/// Triangle-filter resampling of every channel to `(h, w)`. Same-size input
/// is returned unchanged.
pub fn resize(img: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, ih, iw) = (img.dim(0), img.dim(1), img.dim(2));
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    let mut out = Vec::with_capacity(c * h * w);
    for plane in img.data().chunks(ih * iw) {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(iw as u32, ih as u32, plane.iter().map(|&v| v as f32).collect()).unwrap();
        let r = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
        out.extend(r.into_raw().into_iter().map(f64::from));
    }
    Tensor::new(vec![c, h, w], out)
}

/// `[c, h, w]` window at `(top, left)`.
pub fn crop(img: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, ih, iw) = (img.dim(0), img.dim(1), img.dim(2));
    if top + h > ih || left + w > iw {
        return Err(Error::shape(format!("crop {h}x{w} at ({top}, {left}) exceeds {ih}x{iw}")));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for plane in img.data().chunks(ih * iw) {
        for row in top..top + h {
            out.extend_from_slice(&plane[row * iw + left..row * iw + left + w]);
        }
    }
    Ok(Tensor::new(vec![c, h, w], out))
}

/// Tiles equally sized `[c, h, w]` images into a `rows x cols` grid.
pub fn grid(images: &[Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    if images.len() != rows * cols || images.is_empty() {
        return Err(Error::invalid(format!("{} images for a {rows}x{cols} grid", images.len())));
    }
    let shape = images[0].shape().to_vec();
    if images.iter().any(|i| i.shape() != shape.as_slice()) {
        return Err(Error::shape("grid images differ in shape"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![0.0; c * gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (r, col) = (k / cols, k % cols);
        for ch in 0..c {
            for y in 0..h {
                let src = &img.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                let dst = ch * gh * gw + (r * h + y) * gw + col * w;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new(vec![c, gh, gw], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn png_round_trip_quantizes() {
        let img = Tensor::uniform(&[3, 5, 7], 0.5, &mut rng(0)).map(|v| v + 0.5);
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.sub(&img).max_abs() <= 0.5 / 255.0 + 1e-6);
        let gray = Tensor::full(&[1, 4, 4], 0.25);
        assert_eq!(decode_image(&encode_png(&gray).unwrap()).unwrap().shape(), &[1, 4, 4]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::randn(&[1, 6, 6], 1.0, &mut rng(1));
        assert_eq!(resize(&img, 6, 6), img);
        let c = resize(&Tensor::full(&[2, 4, 8], 0.3), 8, 16);
        assert!(c.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn crop_and_grid() {
        let img = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect());
        assert_eq!(crop(&img, 1, 1, 2, 2).unwrap().data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(crop(&img, 2, 0, 2, 2).is_err());
        let g = grid(&[Tensor::zeros(&[1, 2, 2]), Tensor::full(&[1, 2, 2], 1.0)], 1, 2).unwrap();
        assert_eq!(g.shape(), &[1, 2, 4]);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
