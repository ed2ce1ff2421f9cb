//! Fixed-size region extraction: bilinear ROI pooling over feature maps and
//! bilinear crop-and-resize over raster images.
//!
//! Both use half-pixel centres: cell `k` of an axis covers `[k, k+1)` and
//! its value sits at `k + 0.5`. Samples outside the outermost centres clamp
//! to the edge cell.

use crate::dataio::RasterImage;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::netcore::{Scalar, Tensor};

/// Default pooled grid.
pub const POOL_SIZE: usize = 7;
/// Bilinear samples per bin along each axis.
pub const SAMPLES_PER_BIN: usize = 2;

/// Bilinear taps at continuous position `(x, y)` on a `w × h` grid as
/// `(flat cell index, weight)` pairs.
fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Result of [`roi_pool`] with the bookkeeping its backward pass needs.
#[derive(Clone, Debug)]
pub struct RoiPooled<T> {
    pub output: Tensor<T>,
    taps: Vec<[(usize, T); 4]>,
    winner: Vec<u8>,
}

/// Pools `region` (feature-map coordinates) of an `[H, W, C]` feature map
/// into `[out_h, out_w, C]`: each output cell is the max over a 2×2 grid of
/// bilinear samples inside its bin.
pub fn roi_pool<T: Scalar>(feature: &Tensor<T>, region: &BBox, out_h: usize, out_w: usize) -> Result<RoiPooled<T>> {
    let (h, w, c) = feature.hwc("roi_pool")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("roi_pool output grid must be non-empty"));
    }
    let r = region
        .clip(w as f64, h as f64)
        .ok_or_else(|| Error::invalid(format!("region {region:?} does not intersect {h}x{w} feature map")))?;
    let (bin_w, bin_h) = (r.width() / out_w as f64, r.height() / out_h as f64);
    let s = SAMPLES_PER_BIN;
    let mut taps = Vec::with_capacity(out_h * out_w * s * s);
    for i in 0..out_h {
        for j in 0..out_w {
            for sy in 0..s {
                for sx in 0..s {
                    let y = r.y1 + (i as f64 + (sy as f64 + 0.5) / s as f64) * bin_h;
                    let x = r.x1 + (j as f64 + (sx as f64 + 0.5) / s as f64) * bin_w;
                    taps.push(bilinear_taps(x, y, w, h).map(|(k, wt)| (k, T::of(wt))));
                }
            }
        }
    }
    let f = feature.data();
    let mut out = vec![T::zero(); out_h * out_w * c];
    let mut winner = vec![0u8; out_h * out_w * c];
    let mut sample_vals = vec![T::zero(); c];
    for bin in 0..out_h * out_w {
        let dst = &mut out[bin * c..(bin + 1) * c];
        let win = &mut winner[bin * c..(bin + 1) * c];
        for k in 0..s * s {
            sample_vals.iter_mut().for_each(|v| *v = T::zero());
            for &(cell, wt) in &taps[bin * s * s + k] {
                let src = &f[cell * c..(cell + 1) * c];
                for (acc, &v) in sample_vals.iter_mut().zip(src) {
                    *acc = *acc + wt * v;
                }
            }
            for ch in 0..c {
                if k == 0 || sample_vals[ch] > dst[ch] {
                    dst[ch] = sample_vals[ch];
                    win[ch] = k as u8;
                }
            }
        }
    }
    Ok(RoiPooled {
        output: Tensor::from_vec(&[out_h, out_w, c], out)?,
        taps,
        winner,
    })
}

/// Accumulates the gradient of a pooled output into `grad_feature`
/// (flat `[H, W, C]` buffer of the pooled feature map).
pub fn roi_pool_backward<T: Scalar>(pooled: &RoiPooled<T>, grad_out: &Tensor<T>, grad_feature: &mut [T]) -> Result<()> {
    grad_out.ensure_shape("roi_pool backward", pooled.output.shape())?;
    let (oh, ow, c) = pooled.output.hwc("roi_pool backward")?;
    let s2 = SAMPLES_PER_BIN * SAMPLES_PER_BIN;
    let g = grad_out.data();
    for bin in 0..oh * ow {
        for ch in 0..c {
            let o = bin * c + ch;
            let k = pooled.winner[o] as usize;
            for &(cell, wt) in &pooled.taps[bin * s2 + k] {
                let idx = cell * c + ch;
                grad_feature[idx] = grad_feature[idx] + wt * g[o];
            }
        }
    }
    Ok(())
}

/// Bilinear resample of `bbox` (clipped to the image) to `out_w × out_h`.
pub fn crop_resize(image: &RasterImage, bbox: &BBox, out_w: usize, out_h: usize) -> Result<RasterImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("crop output must be non-empty"));
    }
    let (w, h) = (image.width(), image.height());
    let r = bbox
        .clip(w as f64, h as f64)
        .filter(|b| b.area() >= 1.0)
        .ok_or_else(|| Error::invalid(format!("crop box {bbox:?} has no area inside {w}x{h} image")))?;
    let (sx, sy) = (r.width() / out_w as f64, r.height() / out_h as f64);
    let src = image.data();
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for oy in 0..out_h {
        let y = r.y1 + (oy as f64 + 0.5) * sy;
        for ox in 0..out_w {
            let x = r.x1 + (ox as f64 + 0.5) * sx;
            let taps = bilinear_taps(x, y, w, h);
            for ch in 0..3 {
                let v: f64 = taps.iter().map(|&(k, wt)| wt * f64::from(src[k * 3 + ch])).sum();
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::new(out_w, out_h, out)
}

pub fn resize_image(image: &RasterImage, out_w: usize, out_h: usize) -> Result<RasterImage> {
    if image.width() == out_w && image.height() == out_h {
        return Ok(image.clone());
    }
    crop_resize(image, &image.bounds(), out_w, out_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::gradcheck::{numeric_gradient, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feature(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = Tensor::full(&[9, 11, 3], 2.5f64);
        let region = BBox::new(1.3, 0.7, 8.9, 6.2).unwrap();
        let p = roi_pool(&f, &region, 7, 7).unwrap();
        assert!(p.output.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn aligned_blocks_reproduce_grid_values() {
        // 14x14 map made of 7x7 constant 2x2 blocks with distinct values
        let mut data = vec![0.0f64; 14 * 14];
        for y in 0..14 {
            for x in 0..14 {
                data[y * 14 + x] = ((y / 2) * 7 + x / 2) as f64 + 0.125;
            }
        }
        let f = Tensor::from_vec(&[14, 14, 1], data).unwrap();
        let p = roi_pool(&f, &BBox::new(0.0, 0.0, 14.0, 14.0).unwrap(), 7, 7).unwrap();
        for (k, &v) in p.output.data().iter().enumerate() {
            assert_eq!(v, k as f64 + 0.125);
        }
    }

    #[test]
    fn aligned_region_is_classic_max_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_feature(&mut rng, 14, 14, 2);
        let p = roi_pool(&f, &BBox::new(0.0, 0.0, 14.0, 14.0).unwrap(), 7, 7).unwrap();
        let (mp, _) = crate::netcore::ops::maxpool2d(&f, 2, 2).unwrap();
        assert_eq!(p.output, mp);
    }

    #[test]
    fn disjoint_region_is_an_error() {
        let f = Tensor::<f32>::zeros(&[4, 4, 1]);
        assert!(roi_pool(&f, &BBox::new(5.0, 5.0, 9.0, 9.0).unwrap(), 7, 7).is_err());
    }

    #[test]
    fn channel_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_feature(&mut rng, 6, 5, 3);
        let perm = [2usize, 0, 1];
        let mut g = f.clone();
        for cell in 0..30 {
            for (dst, &src) in perm.iter().enumerate() {
                g.data_mut()[cell * 3 + dst] = f.data()[cell * 3 + src];
            }
        }
        let r = BBox::new(0.4, 1.1, 4.7, 5.9).unwrap();
        let a = roi_pool(&f, &r, 7, 7).unwrap().output;
        let b = roi_pool(&g, &r, 7, 7).unwrap().output;
        for bin in 0..49 {
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(b.data()[bin * 3 + dst], a.data()[bin * 3 + src]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (h, w, c) = (rng.random_range(3..8), rng.random_range(3..8), rng.random_range(1..4));
            let f = random_feature(&mut rng, h, w, c);
            let x1 = rng.random_range(0.0..w as f64 / 2.0);
            let y1 = rng.random_range(0.0..h as f64 / 2.0);
            let r = BBox::new(x1, y1, x1 + rng.random_range(1.0..w as f64), y1 + rng.random_range(1.0..h as f64)).unwrap();
            let upstream: Vec<f64> = (0..49 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |v: &[f64]| {
                let t = Tensor::from_vec(&[h, w, c], v.to_vec()).unwrap();
                let p = roi_pool(&t, &r, 7, 7).unwrap();
                p.output.data().iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
            };
            let p = roi_pool(&f, &r, 7, 7).unwrap();
            let mut analytic = vec![0.0; f.len()];
            let up = Tensor::from_vec(&[7, 7, c], upstream.clone()).unwrap();
            roi_pool_backward(&p, &up, &mut analytic).unwrap();
            let numeric = numeric_gradient(loss, f.data(), 1e-5);
            assert!(relative_error(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn full_box_same_dims_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..13 * 7 * 3).map(|_| rng.random()).collect();
        let img = RasterImage::new(13, 7, data).unwrap();
        assert_eq!(crop_resize(&img, &img.bounds(), 13, 7).unwrap(), img);
    }

    #[test]
    fn constant_blue_crop() {
        let img = RasterImage::filled(64, 48, [0, 0, 255]);
        let c = crop_resize(&img, &BBox::new(3.2, 5.5, 40.1, 33.3).unwrap(), 300, 250).unwrap();
        assert_eq!(c, RasterImage::filled(300, 250, [0, 0, 255]));
    }

    #[test]
    fn checkerboard_upsample_by_hand() {
        // 2x2 checkerboard, black (0) at (0,0) and (1,1), white (200) elsewhere
        let mut img = RasterImage::filled(2, 2, [0, 0, 0]);
        img.set_pixel(1, 0, [200, 200, 200]);
        img.set_pixel(0, 1, [200, 200, 200]);
        let up = resize_image(&img, 4, 4).unwrap();
        // output centre (ox+0.5)/2 - 0.5 -> source u in {-0.25, 0.25, 0.75, 1.25},
        // clamped to {0, 0.25, 0.75, 1}
        let u: [f64; 4] = [0.0, 0.25, 0.75, 1.0];
        let src = |x: usize, y: usize| if (x + y).is_multiple_of(2) { 0.0 } else { 200.0 };
        for oy in 0..4 {
            for ox in 0..4 {
                let (fx, fy) = (u[ox], u[oy]);
                let v = (1.0 - fx) * (1.0 - fy) * src(0, 0)
                    + fx * (1.0 - fy) * src(1, 0)
                    + (1.0 - fx) * fy * src(0, 1)
                    + fx * fy * src(1, 1);
                assert_eq!(up.pixel(ox, oy)[0], v.round() as u8, "({ox},{oy})");
            }
        }
        // the four centre samples by hand: 0.25/0.75 mixes give 75 or 125
        assert_eq!(up.pixel(1, 1)[0], 75);
        assert_eq!(up.pixel(2, 1)[0], 125);
        assert_eq!(up.pixel(1, 2)[0], 125);
        assert_eq!(up.pixel(2, 2)[0], 75);
    }

    #[test]
    fn horizontal_flip_commutes_with_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (9, 5);
        let img = RasterImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
        let flip = |im: &RasterImage| {
            let mut out = im.clone();
            for y in 0..im.height() {
                for x in 0..im.width() {
                    out.set_pixel(im.width() - 1 - x, y, im.pixel(x, y));
                }
            }
            out
        };
        let a = flip(&resize_image(&img, 14, 4).unwrap());
        let b = resize_image(&flip(&img), 14, 4).unwrap();
        // rounding of exact .5 ties can differ by one level
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((i16::from(*p) - i16::from(*q)).abs() <= 1);
        }
    }

    #[test]
    fn zero_area_crop_rejected() {
        let img = RasterImage::filled(10, 10, [1, 1, 1]);
        assert!(crop_resize(&img, &BBox::new(12.0, 0.0, 20.0, 5.0).unwrap(), 4, 4).is_err());
        assert!(crop_resize(&img, &BBox::new(2.0, 2.0, 2.5, 2.5).unwrap(), 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn crop_values_within_source_range(seed in any::<u64>(), x in 0.0..20.0f64, y in 0.0..20.0f64,
                                           bw in 1.0..12.0f64, bh in 1.0..12.0f64,
                                           ow in 1usize..20, oh in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RasterImage::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random()).collect()).unwrap();
            let b = BBox::new(x, y, x + bw, y + bh).unwrap();
            let crop = crop_resize(&img, &b, ow, oh).unwrap();
            // pixels that bilinear taps can reach
            let lo = |v: f64| (v - 0.5).floor().max(0.0) as usize;
            let hi = |v: f64| ((v - 0.5).ceil().max(0.0) as usize).min(31);
            for ch in 0..3 {
                let mut mn = 255u8;
                let mut mx = 0u8;
                for py in lo(b.y1)..=hi(b.y2) {
                    for px in lo(b.x1)..=hi(b.x2) {
                        mn = mn.min(img.pixel(px, py)[ch]);
                        mx = mx.max(img.pixel(px, py)[ch]);
                    }
                }
                for p in crop.data().chunks_exact(3) {
                    prop_assert!(p[ch] >= mn && p[ch] <= mx);
                }
            }
        }
    }
}
