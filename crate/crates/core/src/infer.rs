//! Generator inference on single radiographs.

use image::GrayImage;

use crate::codec::{normalize_gray, quantize_output, ClassPalette, IndexMask};
use crate::network::{Mode, NetworkError, NetworkGraph};
use crate::pipeline::{resize_bilinear, resize_nearest};
use crate::tensor::Tensor;

/// `1 x 1 x S x S` network input for a radiograph resized to `size`.
pub fn input_tensor(radiograph: &GrayImage, size: usize) -> Tensor {
    let (w, h) = radiograph.dimensions();
    let img = if (w as usize, h as usize) == (size, size) {
        radiograph.clone()
    } else {
        resize_bilinear(radiograph, size, size)
    };
    Tensor::from_vec(&[1, 1, size, size], normalize_gray(&img))
}

/// Eval-mode class map at the radiograph's own resolution.
pub fn predict_mask(
    generator: &NetworkGraph,
    radiograph: &GrayImage,
    palette: &ClassPalette,
) -> Result<IndexMask, NetworkError> {
    let size = generator.config.image_size;
    let out = generator.predict(&input_tensor(radiograph, size), Mode::Eval, 0)?;
    let mask = quantize_output(out.data(), size, size, palette);
    let (w, h) = (radiograph.width() as usize, radiograph.height() as usize);
    Ok(if (w, h) == (size, size) { mask } else { resize_nearest(&mask, w, h) })
}
