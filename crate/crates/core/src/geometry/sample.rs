use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// The four bilinear taps `(flat pixel index, weight)` for continuous pixel
/// coordinates, or `None` outside `[0, width-1] x [0, height-1]`.
///
/// Pixel index is `row * width + col` with `v` indexing rows.
pub fn bilinear_taps(height: usize, width: usize, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
        return None;
    }
    let u0 = (u.floor() as usize).min(width.saturating_sub(2));
    let v0 = (v.floor() as usize).min(height.saturating_sub(2));
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    Some([
        (v0 * width + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * width + u1, fu * (1.0 - fv)),
        (v1 * width + u0, (1.0 - fu) * fv),
        (v1 * width + u1, fu * fv),
    ])
}

/// Bilinear interpolation of an `[Hc, Wc, D]` feature map; zero outside.
pub fn bilinear_sample(feature_map: &Tensor, u: f64, v: f64) -> Result<Vec<f64>> {
    let shape = feature_map.shape();
    if shape.len() != 3 || shape.contains(&0) {
        return Err(Error::shape("bilinear_sample", format!("expected non-empty [H, W, D], got {shape:?}")));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; d];
    if let Some(taps) = bilinear_taps(h, w, u, v) {
        let data = feature_map.data();
        for (pix, wt) in taps {
            if wt == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(&data[pix * d..(pix + 1) * d]) {
                *o += wt * x;
            }
        }
    }
    Ok(out)
}
