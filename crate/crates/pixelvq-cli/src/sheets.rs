//! Contact-sheet assembly: originals paired with reconstructions, and tiled
//! sample grids.

use anyhow::{bail, Result};
use pixelvq::data::raster::Rgb8Image;
use pixelvq::tensor::Tensor;

fn paste(dst: &mut Rgb8Image, src: &Rgb8Image, x0: usize, y0: usize) {
    for y in 0..src.height {
        for x in 0..src.width {
            dst.set_pixel(x0 + x, y0 + y, src.pixel(x, y));
        }
    }
}

fn image_of(batch: &Tensor<f32>, i: usize) -> Result<Rgb8Image> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let stride = c * h * w;
    let t = Tensor::from_vec(&[c, h, w], batch.data()[i * stride..(i + 1) * stride].to_vec())?;
    Ok(Rgb8Image::from_tensor(&t)?)
}

/// Pairs originals (left) with reconstructions (right): rows*I tall, 2*I wide.
pub fn reconstruction_sheet(originals: &Tensor<f32>, recons: &Tensor<f32>, max_rows: usize) -> Result<Rgb8Image> {
    if originals.shape() != recons.shape() {
        bail!("sheet inputs disagree: {:?} vs {:?}", originals.shape(), recons.shape());
    }
    let n = originals.shape()[0].min(max_rows);
    if n == 0 {
        bail!("empty sheet");
    }
    let side = originals.shape()[2];
    let mut sheet = Rgb8Image::new(2 * side, n * side);
    for i in 0..n {
        paste(&mut sheet, &image_of(originals, i)?, 0, i * side);
        paste(&mut sheet, &image_of(recons, i)?, side, i * side);
    }
    Ok(sheet)
}

/// Tiles images row-major into ceil(sqrt(n)) columns.
pub fn tile_sheet(images: &[Rgb8Image]) -> Result<Rgb8Image> {
    if images.is_empty() {
        bail!("empty sheet");
    }
    let side = images[0].width;
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let mut sheet = Rgb8Image::new(cols * side, rows * side);
    for (i, img) in images.iter().enumerate() {
        paste(&mut sheet, img, (i % cols) * side, (i / cols) * side);
    }
    Ok(sheet)
}

/// Splits a decoded [N, 3, I, I] batch into per-item rasters.
pub fn batch_to_images(batch: &Tensor<f32>) -> Result<Vec<Rgb8Image>> {
    (0..batch.shape()[0]).map(|i| image_of(batch, i)).collect()
}
