//! Valid (unpadded) stride-1 2-D convolution via im2col + GEMM.

use super::{gemm, Element, Mat, Support, Tensor};
use crate::error::{Error, Result};

/// Below this fraction of active output positions the sparse paths are used.
const SPARSE_FRACTION: f64 = 0.5;

struct Geometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<T: Element>(x: &Tensor<T>, filters: &Tensor<T>) -> Result<Self> {
        let (batch, in_ch, h, w) = x.dims4()?;
        let (out_ch, f_in, kh, kw) = filters.dims4()?;
        if f_in != in_ch {
            return Err(Error::Config(format!(
                "input has {in_ch} channels but filters expect {f_in}"
            )));
        }
        if h < kh || w < kw {
            return Err(Error::Config(format!(
                "input {h}x{w} smaller than {kh}x{kw} filter"
            )));
        }
        Ok(Geometry {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·kh·kw, oh·ow]` row-major matrix.
fn im2col<T: Element>(g: &Geometry, image: &[T], cols: &mut [T]) {
    let plane = g.h * g.w;
    let npos = g.positions();
    for c in 0..g.in_ch {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.oh {
                    let s = (oy + ky) * g.w + kx;
                    dst[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(&src[s..s + g.ow]);
                }
            }
        }
    }
}

/// Folds a `[C·kh·kw, oh·ow]` matrix back onto a `[C, H, W]` image, summing overlaps.
fn col2im<T: Element>(g: &Geometry, cols: &[T], image: &mut [T]) {
    let plane = g.h * g.w;
    let npos = g.positions();
    for c in 0..g.in_ch {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.oh {
                    let d = (oy + ky) * g.w + kx;
                    for (o, s) in dst[d..d + g.ow]
                        .iter_mut()
                        .zip(&src[oy * g.ow..(oy + 1) * g.ow])
                    {
                        *o = *o + *s;
                    }
                }
            }
        }
    }
}

/// Valid convolution (cross-correlation) with stride 1.
///
/// `x` is `[B, C, H, W]`, `filters` is `[O, C, kh, kw]`, `bias` has `O` entries.
/// The result is `[B, O, H-kh+1, W-kw+1]`.
pub fn conv2d_valid<T: Element>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, filters)?;
    if bias.numel() != g.out_ch {
        return Err(Error::Config(format!(
            "bias has {} entries for {} output channels",
            bias.numel(),
            g.out_ch
        )));
    }
    let npos = g.positions();
    let k = g.patch_len();
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * npos;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = vec![T::zero(); k * npos];
    for b in 0..g.batch {
        im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (o, chunk) in dst.chunks_mut(npos).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        gemm(
            filters.data(),
            Mat::new(g.out_ch, k),
            &cols,
            Mat::new(k, npos),
            T::one(),
            dst,
        );
    }
    Tensor::new(vec![g.batch, g.out_ch, g.oh, g.ow], out)
}

/// Unfolds the output positions inside `region` into a `[C·kh·kw, area]` matrix.
fn im2col_region<T: Element>(g: &Geometry, image: &[T], region: &Support, cols: &mut [T]) {
    let plane = g.h * g.w;
    let (rh, rw) = (region.height(), region.width());
    let npos = rh * rw;
    for c in 0..g.in_ch {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for (i, oy) in (region.y0..region.y1).enumerate() {
                    let s = (oy + ky) * g.w + kx + region.x0;
                    dst[i * rw..(i + 1) * rw].copy_from_slice(&src[s..s + rw]);
                }
            }
        }
    }
}

/// [`conv2d_valid`] for inputs whose items are constant per channel outside
/// `supports`. Only output positions that see the support go through the GEMM;
/// the rest get the constant response. Returns the output supports too.
pub fn conv2d_valid_supported<T: Element>(
    x: &Tensor<T>,
    supports: &[Support],
    filters: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Support>)> {
    let g = Geometry::new(x, filters)?;
    if supports.len() != g.batch {
        return Err(Error::Config(format!(
            "{} supports for a batch of {}",
            supports.len(),
            g.batch
        )));
    }
    if bias.numel() != g.out_ch {
        return Err(Error::Config(format!(
            "bias has {} entries for {} output channels",
            bias.numel(),
            g.out_ch
        )));
    }
    let npos = g.positions();
    let k = g.patch_len();
    let khw = g.kh * g.kw;
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * npos;
    // Σ over the kernel of each (out, in) filter slice.
    let kernel_sums: Vec<f64> = filters
        .data()
        .chunks(khw)
        .map(|f| f.iter().map(|v| v.as_f64()).sum())
        .collect();
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut out_supports = Vec::with_capacity(g.batch);
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for (b, s) in supports.iter().enumerate() {
        let image = &x.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        let region = if g.kh == g.kw {
            s.after_window(g.kh, 1, g.oh, g.ow)
        } else {
            Support::full(g.oh, g.ow)
        };
        let outside = s.outside_point(g.h, g.w);
        let sparse = outside.is_some() && (region.area() as f64) < SPARSE_FRACTION * npos as f64;
        if !sparse {
            cols.resize(k * npos, T::zero());
            im2col(&g, image, &mut cols);
            for (o, chunk) in dst.chunks_mut(npos).enumerate() {
                chunk.fill(bias.data()[o]);
            }
            gemm(
                filters.data(),
                Mat::new(g.out_ch, k),
                &cols,
                Mat::new(k, npos),
                T::one(),
                dst,
            );
            out_supports.push(Support::full(g.oh, g.ow));
            continue;
        }
        let (py, px) = outside.expect("sparse implies an outside point");
        let level: Vec<f64> = (0..g.in_ch)
            .map(|c| image[c * g.h * g.w + py * g.w + px].as_f64())
            .collect();
        for (o, chunk) in dst.chunks_mut(npos).enumerate() {
            let v = bias.data()[o].as_f64()
                + (0..g.in_ch)
                    .map(|c| level[c] * kernel_sums[o * g.in_ch + c])
                    .sum::<f64>();
            chunk.fill(T::from_f64(v));
        }
        let area = region.area();
        if area > 0 {
            cols.resize(k * area, T::zero());
            im2col_region(&g, image, &region, &mut cols[..k * area]);
            tmp.clear();
            for o in 0..g.out_ch {
                tmp.extend(std::iter::repeat(bias.data()[o]).take(area));
            }
            gemm(
                filters.data(),
                Mat::new(g.out_ch, k),
                &cols[..k * area],
                Mat::new(k, area),
                T::one(),
                &mut tmp,
            );
            let rw = region.width();
            for (o, chunk) in dst.chunks_mut(npos).enumerate() {
                for (i, oy) in (region.y0..region.y1).enumerate() {
                    let src = &tmp[o * area + i * rw..o * area + (i + 1) * rw];
                    chunk[oy * g.ow + region.x0..oy * g.ow + region.x1].copy_from_slice(src);
                }
            }
        }
        out_supports.push(region);
    }
    Ok((Tensor::new(vec![g.batch, g.out_ch, g.oh, g.ow], out)?, out_supports))
}

/// Backward pass of [`conv2d_valid`].
///
/// Adds the filter and bias gradients into `d_filters` / `d_bias` and returns the
/// input gradient when `want_dx` is set.
pub fn conv2d_valid_backward<T: Element>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    dy: &Tensor<T>,
    d_filters: &mut [T],
    d_bias: &mut [T],
    want_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let g = Geometry::new(x, filters)?;
    if dy.shape() != [g.batch, g.out_ch, g.oh, g.ow] {
        return Err(Error::Config(format!(
            "upstream gradient shape {:?} does not match conv output",
            dy.shape()
        )));
    }
    if d_filters.len() != filters.numel() || d_bias.len() != g.out_ch {
        return Err(Error::Config("gradient buffer size mismatch".into()));
    }
    let npos = g.positions();
    let k = g.patch_len();
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * npos;
    let mut cols = vec![T::zero(); k * npos];
    let mut dcols = if want_dx {
        vec![T::zero(); k * npos]
    } else {
        Vec::new()
    };
    let mut dx = if want_dx {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };
    let mut bias_acc = vec![0.0f64; g.out_ch];
    let mut active = Vec::new();
    let mut dy_sel = Vec::new();
    for b in 0..g.batch {
        let dyb = &dy.data()[b * out_len..(b + 1) * out_len];
        for (o, row) in dyb.chunks(npos).enumerate() {
            bias_acc[o] += row.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        active.clear();
        active.extend((0..npos).filter(|&p| (0..g.out_ch).any(|o| dyb[o * npos + p] != T::zero())));
        if (active.len() as f64) < SPARSE_FRACTION * npos as f64 {
            if active.is_empty() {
                continue;
            }
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let dxb = if want_dx {
                Some(&mut dx[b * in_len..(b + 1) * in_len])
            } else {
                None
            };
            sparse_backward_item(
                &g,
                image,
                filters.data(),
                dyb,
                &active,
                &mut dy_sel,
                d_filters,
                dxb,
            );
            continue;
        }
        im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        // dW += dY · colsᵀ
        gemm(
            dyb,
            Mat::new(g.out_ch, npos),
            &cols,
            Mat::t(k, npos),
            T::one(),
            d_filters,
        );
        if want_dx {
            // dcols = Wᵀ · dY
            gemm(
                filters.data(),
                Mat::t(g.out_ch, k),
                dyb,
                Mat::new(g.out_ch, npos),
                T::zero(),
                &mut dcols,
            );
            col2im(&g, &dcols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    for (d, acc) in d_bias.iter_mut().zip(bias_acc) {
        *d = *d + T::from_f64(acc);
    }
    if want_dx {
        Ok(Some(Tensor::new(x.shape().to_vec(), dx)?))
    } else {
        Ok(None)
    }
}

/// Backward of one item restricted to the output positions in `active`.
#[allow(clippy::too_many_arguments)]
fn sparse_backward_item<T: Element>(
    g: &Geometry,
    image: &[T],
    filters: &[T],
    dyb: &[T],
    active: &[usize],
    dy_sel: &mut Vec<T>,
    d_filters: &mut [T],
    dx: Option<&mut [T]>,
) {
    let npos = g.positions();
    let n = active.len();
    let k = g.patch_len();
    let plane = g.h * g.w;
    dy_sel.clear();
    for o in 0..g.out_ch {
        dy_sel.extend(active.iter().map(|&p| dyb[o * npos + p]));
    }
    // Offsets of each active position's patch origin within a plane.
    let origin: Vec<usize> = active
        .iter()
        .map(|&p| (p / g.ow) * g.w + p % g.ow)
        .collect();
    let mut cols = vec![T::zero(); k * n];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let off = c * plane + ky * g.w + kx;
                for (d, &o) in cols[row * n..(row + 1) * n].iter_mut().zip(&origin) {
                    *d = image[off + o];
                }
            }
        }
    }
    gemm(
        dy_sel,
        Mat::new(g.out_ch, n),
        &cols,
        Mat::t(k, n),
        T::one(),
        d_filters,
    );
    if let Some(dx) = dx {
        gemm(
            filters,
            Mat::t(g.out_ch, k),
            dy_sel,
            Mat::new(g.out_ch, n),
            T::zero(),
            &mut cols,
        );
        for c in 0..g.in_ch {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let off = c * plane + ky * g.w + kx;
                    for (s, &o) in cols[row * n..(row + 1) * n].iter().zip(&origin) {
                        dx[off + o] = dx[off + o] + *s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (bn, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![0.0; bn * o * oh * ow];
        for n in 0..bn {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b.data()[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    s += x.data()[((n * c + ic) * h + y + ky) * wd + xx + kx]
                                        * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((n * o + oc) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform(&[2, 3, 9, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[4, 3, 5, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4], 1.0, &mut rng);
        let y = conv2d_valid(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 4]);
        for (a, e) in y.data().iter().zip(naive(&x, &w, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn sixty_pixel_input_gives_56() {
        let x = Tensor::<f32>::zeros(&[1, 1, 60, 60]);
        let w = Tensor::<f32>::zeros(&[32, 1, 5, 5]);
        let b = Tensor::<f32>::zeros(&[32]);
        let y = conv2d_valid(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 32, 56, 56]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_equal_to_filter_gives_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::uniform(&[1, 1, 5, 5], 1.0, &mut rng);
        let x = w.clone();
        let y = conv2d_valid(&x, &w, &Tensor::zeros(&[1])).unwrap();
        let expect: f64 = w.data().iter().map(|v| v * v).sum();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 3, 5, 5]);
        let b = Tensor::<f32>::zeros(&[4]);
        assert!(matches!(conv2d_valid(&x, &w, &b), Err(Error::Config(_))));
    }

    #[test]
    fn too_small_input_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 8]);
        let w = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d_valid(&x, &w, &Tensor::zeros(&[1])).is_err());
    }

    /// Constant `level[c]` per channel outside `s`, random inside.
    fn patchy(
        shape: [usize; 4],
        s: Support,
        level: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Tensor<f64> {
        use rand::Rng;
        let [b, c, h, w] = shape;
        let mut v = Vec::with_capacity(b * c * h * w);
        for _ in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        v.push(if s.contains(y, x) {
                            rng.gen_range(-1.0..1.0)
                        } else {
                            level[ch]
                        });
                    }
                }
            }
        }
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    fn naive_backward(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        dy: &Tensor<f64>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (bn, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut dw = vec![0.0; w.numel()];
        let mut db = vec![0.0; o];
        let mut dx = vec![0.0; x.numel()];
        for n in 0..bn {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let g = dy.data()[((n * o + oc) * oh + y) * ow + xx];
                        db[oc] += g;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let xi = ((n * c + ic) * h + y + ky) * wd + xx + kx;
                                    let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                    dw[wi] += g * x.data()[xi];
                                    dx[xi] += g * w.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dw, db, dx)
    }

    #[test]
    fn empty_support_gives_constant_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::uniform(&[3, 2, 5, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3], 1.0, &mut rng);
        let x = patchy([1, 2, 12, 12], Support::empty(), &[0.3, -0.2], &mut rng);
        let (y, s) = conv2d_valid_supported(&x, &[Support::empty()], &w, &b).unwrap();
        assert!(s[0].is_empty());
        for (a, e) in y.data().iter().zip(naive(&x, &w, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn supported_conv_matches_dense(
            seed in 0u64..1000,
            y0 in 0usize..16, hgt in 1usize..6, x0 in 0usize..16, wid in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Support { y0, y1: (y0 + hgt).min(18), x0, x1: (x0 + wid).min(18) };
            let level = [0.0, 0.7];
            let x = patchy([2, 2, 18, 18], s, &level, &mut rng);
            let w = Tensor::<f64>::uniform(&[3, 2, 5, 5], 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[3], 1.0, &mut rng);
            let (y, out) = conv2d_valid_supported(&x, &[s, Support::full(18, 18)], &w, &b).unwrap();
            for (a, e) in y.data().iter().zip(naive(&x, &w, &b)) {
                proptest::prop_assert!((a - e).abs() < 1e-10);
            }
            // outside the reported support every channel is constant
            let plane = 14 * 14;
            for ch in 0..3 {
                let p = &y.data()[ch * plane..(ch + 1) * plane];
                if let Some((py, px)) = out[0].outside_point(14, 14) {
                    let c0 = p[py * 14 + px];
                    for yy in 0..14 {
                        for xx in 0..14 {
                            if !out[0].contains(yy, xx) {
                                proptest::prop_assert_eq!(p[yy * 14 + xx], c0);
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn sparse_backward_matches_direct_sums(
            seed in 0u64..1000, active in 1usize..40, want_dx: bool,
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform(&[2, 2, 14, 14], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[3, 2, 5, 5], 1.0, &mut rng);
            let mut dyv = vec![0.0; 2 * 3 * 100];
            for _ in 0..active {
                let i = rng.gen_range(0..dyv.len());
                dyv[i] = rng.gen_range(-1.0..1.0);
            }
            let dy = Tensor::new(vec![2, 3, 10, 10], dyv).unwrap();
            let mut dw = vec![0.0; w.numel()];
            let mut db = vec![0.0; 3];
            let dx = conv2d_valid_backward(&x, &w, &dy, &mut dw, &mut db, want_dx).unwrap();
            let (ew, eb, ex) = naive_backward(&x, &w, &dy);
            for (a, e) in dw.iter().zip(&ew).chain(db.iter().zip(&eb)) {
                proptest::prop_assert!((a - e).abs() < 1e-10);
            }
            match dx {
                Some(dx) => {
                    for (a, e) in dx.data().iter().zip(&ex) {
                        proptest::prop_assert!((a - e).abs() < 1e-10);
                    }
                }
                None => proptest::prop_assert!(!want_dx),
            }
        }
    }
}
