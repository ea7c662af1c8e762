use std::path::Path;

use halluface_autograd::Tensor;
use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// An RGB raster with values in `[0, 1]`, stored `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {}", pixels.dim().2)));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidImage("pixel values must be finite and within [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`
    /// (non-finite values become 0).
    pub fn from_clamped(mut pixels: Array3<f64>) -> Self {
        assert_eq!(pixels.dim().2, 3, "expected 3 channels");
        pixels.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self { pixels }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_clamped(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self { pixels }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.pixels[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Decodes any supported raster file; values are 8-bit samples / 255.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Lossless PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Decodes PNG bytes; other containers are refused because lossy
    /// compression wrecks 16x16 inputs.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let format = image::guess_format(bytes)?;
        if format != image::ImageFormat::Png {
            return Err(Error::InvalidImage(format!("expected a PNG payload, got {format:?}")));
        }
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        Self {
            pixels: self.pixels.slice(s![top..top + height, left..left + width, ..]).to_owned(),
        }
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        images_to_tensor(std::slice::from_ref(self))
    }
}

/// Stacks same-sized images into an NCHW tensor.
pub fn images_to_tensor(images: &[Image]) -> Tensor {
    assert!(!images.is_empty(), "cannot batch zero images");
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::<f64>::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!((img.height(), img.width()), (h, w), "images in a batch must share a size");
        out.slice_mut(s![i, .., .., ..])
            .assign(&img.pixels.view().permuted_axes([2, 0, 1]));
    }
    out.into_dyn()
}

/// Splits an NCHW tensor into images, clamping values into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Vec<Image> {
    assert_eq!(t.ndim(), 4, "expected NCHW tensor");
    t.axis_iter(Axis(0))
        .map(|chw| {
            let hwc = chw.permuted_axes(vec![1, 2, 0]);
            let pixels = hwc.to_owned().into_dimensionality().expect("rank 3");
            Image::from_clamped(pixels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(Array3::from_elem((2, 2, 3), 1.5)).is_err());
        assert!(Image::new(Array3::from_elem((2, 2, 3), f64::NAN)).is_err());
        assert!(Image::new(Array3::from_elem((2, 2, 1), 0.5)).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let img = Image::from_clamped(Array3::from_shape_fn((5, 7, 3), |(y, x, c)| {
            ((y * 7 + x) * 3 + c) as f64 / 255.0
        }));
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn tensor_layout_round_trip() {
        let img = Image::from_clamped(Array3::from_shape_fn((4, 6, 3), |(y, x, c)| {
            (y as f64 + 10.0 * x as f64 + 100.0 * c as f64) / 1000.0
        }));
        let t = images_to_tensor(&[img.clone(), img.clone()]);
        assert_eq!(t.shape(), &[2, 3, 4, 6]);
        assert_eq!(t[[1, 2, 3, 5]], img.pixels()[[3, 5, 2]]);
        assert_eq!(tensor_to_images(&t)[1], img);
    }

    #[test]
    fn lossy_payloads_are_refused() {
        let img = Image::constant(16, 16, 0.5).to_rgb8();
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Jpeg).unwrap();
        assert!(Image::decode_png(&buf.into_inner()).is_err());
    }
}
