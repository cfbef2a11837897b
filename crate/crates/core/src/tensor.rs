//! Conversions between 8-bit images/masks and model tensors in [−1, 1].

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};

use crate::scalar::Scalar;

/// `H × W × 3` bytes to `3 × H × W` values `u/127.5 − 1`.
pub fn image_to_chw<T: Scalar>(img: &Array3<u8>) -> Array3<T> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        T::lit(img[[y, x, k]] as f64 / 127.5 - 1.0)
    })
}

/// Inverse of [`image_to_chw`] with clamping and round-to-nearest.
pub fn chw_to_image<T: Scalar>(x: ArrayView3<'_, T>) -> Array3<u8> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((h, w, c), |(y, xx, k)| quantize(x[[k, y, xx]]))
}

pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.f64().clamp(-1.0, 1.0);
    ((v + 1.0) * 127.5).round() as u8
}

pub fn stack_images<T: Scalar>(imgs: &[&Array3<u8>]) -> Array4<T> {
    let (h, w, c) = imgs[0].dim();
    let mut out = Array4::zeros((imgs.len(), c, h, w));
    for (i, img) in imgs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&image_to_chw::<T>(img));
    }
    out
}

pub fn unstack_images<T: Scalar>(x: &Array4<T>) -> Vec<Array3<u8>> {
    x.axis_iter(Axis(0)).map(chw_to_image).collect()
}

/// Binary masks to `[N, 1, H, W]`.
pub fn stack_masks<T: Scalar>(masks: &[&Array2<u8>]) -> Array4<T> {
    let (h, w) = masks[0].dim();
    Array4::from_shape_fn((masks.len(), 1, h, w), |(n, _, y, x)| {
        T::lit(masks[n][[y, x]] as f64)
    })
}
