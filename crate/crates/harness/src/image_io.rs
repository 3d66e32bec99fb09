//! 8-bit PNG previews of float images.

use std::path::Path;

use image::{ColorType, ImageFormat};

use semadv_core::{Error, Result, Tensor};

/// Writes a `[H, W]`, `[1, H, W]` or `[3, H, W]` image, mapping `lo..hi` to 0..255.
pub fn write_png(path: &Path, img: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let (c, h, w) = match *img.shape() {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("cannot write {:?} as an image", img.shape()))),
    };
    let data = img.data();
    let mut buf = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            let v = (data[ch * h * w + i] - lo) / (hi - lo);
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let color = if c == 1 { ColorType::L8 } else { ColorType::Rgb8 };
    image::save_buffer_with_format(path, &buf, w as u32, h as u32, color, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Places `[C, H, W]` images side by side.
pub fn strip(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Contract("no images to place".into()))?;
    let [c, h, w] = *first.shape() else {
        return Err(Error::Shape(format!("expected [C,H,W], got {:?}", first.shape())));
    };
    let n = images.len();
    let mut out = vec![0.0; c * h * w * n];
    for (k, img) in images.iter().enumerate() {
        img.expect_same_shape(first)?;
        for ch in 0..c {
            for r in 0..h {
                let src = &img.data()[(ch * h + r) * w..(ch * h + r + 1) * w];
                let dst = (ch * h + r) * w * n + k * w;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![c, h, w * n], out)
}
