//! Max pooling over space and across scales.
//!
//! All pools route the gradient to a single winner per output element: the first
//! maximum in row-major order (space) or in member order (scales).

use super::{Element, Support, Tensor};
use crate::error::{Error, Result};

/// Argmax bookkeeping of a spatial pool, needed by [`maxpool_backward`].
#[derive(Clone, Debug)]
pub struct PoolRoute {
    input_shape: Vec<usize>,
    /// Flat input index that won each output element.
    winners: Vec<u32>,
}

impl PoolRoute {
    pub fn winners(&self) -> &[u32] {
        &self.winners
    }
}

/// Output extent of a `window`-sized pool with the given stride.
pub fn pooled_extent(extent: usize, window: usize, stride: usize) -> usize {
    (extent - window) / stride + 1
}

fn pool_impl<T: Element>(
    x: &Tensor<T>,
    wh: usize,
    ww: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolRoute)> {
    pool_region(x, wh, ww, stride, None).map(|(y, r, _)| (y, r))
}

/// Pools every window; with `supports`, windows that miss an item's support
/// take their top-left value, which is what the scan would pick in a constant
/// window.
fn pool_region<T: Element>(
    x: &Tensor<T>,
    wh: usize,
    ww: usize,
    stride: usize,
    supports: Option<&[Support]>,
) -> Result<(Tensor<T>, PoolRoute, Vec<Support>)> {
    let (b, c, h, w) = x.dims4()?;
    if stride == 0 {
        return Err(Error::Config("pool stride must be at least 1".into()));
    }
    if wh == 0 || ww == 0 || wh > h || ww > w {
        return Err(Error::Config(format!(
            "pool window {wh}x{ww} does not fit a {h}x{w} map"
        )));
    }
    let oh = pooled_extent(h, wh, stride);
    let ow = pooled_extent(w, ww, stride);
    let regions: Vec<Support> = match supports {
        Some(s) if s.len() != b => {
            return Err(Error::Config(format!(
                "{} supports for a batch of {b}",
                s.len()
            )))
        }
        Some(s) if wh == ww => s
            .iter()
            .map(|s| s.after_window(wh, stride, oh, ow))
            .collect(),
        _ => vec![Support::full(oh, ow); b],
    };
    let data = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut winners = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        let region = &regions[plane / c];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * stride, ox * stride);
                let mut best = base + y0 * w + x0;
                if !region.contains(oy, ox) {
                    out.push(data[best]);
                    winners.push(best as u32);
                    continue;
                }
                for y in y0..y0 + wh {
                    let row = base + y * w;
                    for idx in row + x0..row + x0 + ww {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                winners.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        PoolRoute {
            input_shape: x.shape().to_vec(),
            winners,
        },
        regions,
    ))
}

/// Square max pool with the given window and stride over `[B, C, H, W]`.
pub fn maxpool2d<T: Element>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolRoute)> {
    pool_impl(x, window, window, stride)
}

/// [`maxpool2d`] for inputs that are constant per channel outside `supports`;
/// also returns the output supports. Results are identical to the dense pool.
pub fn maxpool2d_supported<T: Element>(
    x: &Tensor<T>,
    supports: &[Support],
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolRoute, Vec<Support>)> {
    pool_region(x, window, window, stride, Some(supports))
}

/// Per-channel maximum over the whole feature map: `[B, C, H, W] -> [B, C, 1, 1]`.
pub fn global_spatial_maxpool<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolRoute)> {
    let (_, _, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Config("cannot pool an empty feature map".into()));
    }
    pool_impl(x, h, w, 1)
}

/// Scatters the upstream gradient onto the winning input positions.
pub fn maxpool_backward<T: Element>(route: &PoolRoute, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.numel() != route.winners.len() {
        return Err(Error::Config(format!(
            "pool gradient has {} elements, route has {}",
            dy.numel(),
            route.winners.len()
        )));
    }
    let mut dx = Tensor::zeros(&route.input_shape);
    let buf = dx.data_mut();
    for (g, &idx) in dy.data().iter().zip(&route.winners) {
        buf[idx as usize] = buf[idx as usize] + *g;
    }
    Ok(dx)
}

/// A partition of scale indices into pooling groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleGroups {
    groups: Vec<Vec<usize>>,
    total: usize,
}

impl ScaleGroups {
    /// Checks that `groups` is a partition of `0..total`.
    pub fn new(groups: Vec<Vec<usize>>, total: usize) -> Result<Self> {
        let mut seen = vec![false; total];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Config("empty scale group".into()));
            }
            for &i in g {
                if i >= total || seen[i] {
                    return Err(Error::Config(format!(
                        "scale groups {groups:?} are not a partition of 0..{total}"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(format!(
                "scale groups {groups:?} do not cover 0..{total}"
            )));
        }
        Ok(ScaleGroups { groups, total })
    }

    /// Contiguous grouping from `from` scales down to `to`: group `g` holds
    /// indices `floor(g·from/to) .. floor((g+1)·from/to)`.
    pub fn contiguous(from: usize, to: usize) -> Result<Self> {
        if to == 0 || to > from {
            return Err(Error::Config(format!(
                "cannot pool {from} scales into {to}"
            )));
        }
        let groups = (0..to)
            .map(|g| (g * from / to..(g + 1) * from / to).collect())
            .collect();
        ScaleGroups::new(groups, from)
    }

    pub fn identity(n: usize) -> Self {
        ScaleGroups {
            groups: (0..n).map(|i| vec![i]).collect(),
            total: n,
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn inputs(&self) -> usize {
        self.total
    }

    pub fn outputs(&self) -> usize {
        self.groups.len()
    }
}

/// Argmax bookkeeping of a scale pool.
#[derive(Clone, Debug)]
pub struct ScaleRoute {
    groups: ScaleGroups,
    shape: Vec<usize>,
    /// For each group, the winning member (as input index) of every element.
    winners: Vec<Vec<u16>>,
}

impl ScaleRoute {
    pub fn winners(&self) -> &[Vec<u16>] {
        &self.winners
    }
}

/// Elementwise maximum across the members of each scale group.
pub fn scale_maxpool<T: Element>(
    stacks: &[Tensor<T>],
    groups: &ScaleGroups,
) -> Result<(Vec<Tensor<T>>, ScaleRoute)> {
    if stacks.len() != groups.inputs() {
        return Err(Error::Config(format!(
            "{} scales given, grouping expects {}",
            stacks.len(),
            groups.inputs()
        )));
    }
    let shape = stacks
        .first()
        .map(|t| t.shape().to_vec())
        .ok_or_else(|| Error::Config("scale pool over zero scales".into()))?;
    let mut outputs = Vec::with_capacity(groups.outputs());
    let mut winners = Vec::with_capacity(groups.outputs());
    for members in groups.groups() {
        for &m in members {
            if stacks[m].shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "scale {m} has shape {:?}, expected {shape:?}",
                    stacks[m].shape()
                )));
            }
        }
        let first = members[0];
        let mut out = stacks[first].data().to_vec();
        let mut win = vec![first as u16; out.len()];
        for &m in &members[1..] {
            for ((o, w), v) in out.iter_mut().zip(win.iter_mut()).zip(stacks[m].data()) {
                if *v > *o {
                    *o = *v;
                    *w = m as u16;
                }
            }
        }
        outputs.push(Tensor::new(shape.clone(), out)?);
        winners.push(win);
    }
    Ok((
        outputs,
        ScaleRoute {
            groups: groups.clone(),
            shape,
            winners,
        },
    ))
}

/// Routes each group's upstream gradient to the winning member scale.
pub fn scale_maxpool_backward<T: Element>(
    route: &ScaleRoute,
    dys: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    if dys.len() != route.groups.outputs() {
        return Err(Error::Config(format!(
            "{} group gradients for {} groups",
            dys.len(),
            route.groups.outputs()
        )));
    }
    let mut dxs: Vec<Tensor<T>> = (0..route.groups.inputs())
        .map(|_| Tensor::zeros(&route.shape))
        .collect();
    for (dy, win) in dys.iter().zip(&route.winners) {
        if dy.shape() != route.shape.as_slice() {
            return Err(Error::Config("scale pool gradient shape mismatch".into()));
        }
        for (i, (g, &m)) in dy.data().iter().zip(win).enumerate() {
            let buf = dxs[m as usize].data_mut();
            buf[i] = buf[i] + *g;
        }
    }
    Ok(dxs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn published_pool_extents() {
        assert_eq!(pooled_extent(56, 3, 1), 54);
        assert_eq!(pooled_extent(56, 3, 2), 27);
        assert_eq!(pooled_extent(23, 3, 2), 11);
        let (y, _) = maxpool2d(&Tensor::<f32>::zeros(&[1, 2, 56, 56]), 3, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 27, 27]);
    }

    #[test]
    fn window_larger_than_input_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(maxpool2d(&x, 3, 1), Err(Error::Config(_))));
        assert!(maxpool2d(&Tensor::<f32>::zeros(&[1, 1, 4, 4]), 3, 0).is_err());
    }

    #[test]
    fn constant_input_routes_gradient_to_first_cell() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 0.5);
        let (y, route) = maxpool2d(&x, 3, 1).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.5));
        // windows start at (0,0),(0,1),(1,0),(1,1): each winner is its top-left cell
        assert_eq!(route.winners(), &[0, 1, 4, 5]);
        let dx = maxpool_backward(&route, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(dx.data().iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn global_pool_finds_unique_max() {
        let mut v = vec![0.0f32; 44 * 44];
        v[44 * 10 + 7] = 3.0;
        let x = t(&[1, 1, 44, 44], v);
        let (y, route) = global_spatial_maxpool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 3.0);
        let dx = maxpool_backward(&route, &t(&[1, 1, 1, 1], vec![1.0])).unwrap();
        assert_eq!(dx.data()[44 * 10 + 7], 1.0);
        assert_eq!(dx.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn global_pool_of_single_pixel_is_identity() {
        let x = t(&[2, 1, 1, 1], vec![-1.0, 4.0]);
        let (y, _) = global_spatial_maxpool(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn contiguous_groups_eleven_to_seven() {
        let g = ScaleGroups::contiguous(11, 7).unwrap();
        assert_eq!(g.sizes(), vec![1, 2, 1, 2, 1, 2, 2]);
        assert_eq!(ScaleGroups::contiguous(11, 1).unwrap().sizes(), vec![11]);
        assert_eq!(ScaleGroups::contiguous(7, 5).unwrap().outputs(), 5);
        assert!(ScaleGroups::contiguous(3, 5).is_err());
    }

    #[test]
    fn non_partition_rejected() {
        assert!(ScaleGroups::new(vec![vec![0, 1], vec![1]], 2).is_err());
        assert!(ScaleGroups::new(vec![vec![0]], 2).is_err());
    }

    #[test]
    fn scale_pool_dominance_and_identity() {
        let a = t(&[1, 1, 1, 3], vec![3.0, 2.0, 5.0]);
        let b = t(&[1, 1, 1, 3], vec![1.0, 2.0, 4.0]);
        let (out, route) =
            scale_maxpool(&[a.clone(), b.clone()], &ScaleGroups::contiguous(2, 1).unwrap())
                .unwrap();
        assert_eq!(out[0].data(), a.data());
        // tie at index 1 goes to the first member
        assert_eq!(route.winners()[0], vec![0, 0, 0]);

        let (same, _) =
            scale_maxpool(&[a.clone(), b.clone()], &ScaleGroups::identity(2)).unwrap();
        assert_eq!(same[0].data(), a.data());
        assert_eq!(same[1].data(), b.data());
    }

    #[test]
    fn scale_pool_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            scale_maxpool(&[a, b], &ScaleGroups::contiguous(2, 1).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scale_pool_backward_routes_to_winner() {
        let a = t(&[1, 1, 1, 2], vec![1.0, 5.0]);
        let b = t(&[1, 1, 1, 2], vec![2.0, 0.0]);
        let (_, route) =
            scale_maxpool(&[a, b], &ScaleGroups::contiguous(2, 1).unwrap()).unwrap();
        let dxs = scale_maxpool_backward(&route, &[t(&[1, 1, 1, 2], vec![10.0, 20.0])]).unwrap();
        assert_eq!(dxs[0].data(), &[0.0, 20.0]);
        assert_eq!(dxs[1].data(), &[10.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn supported_pool_is_bitwise_dense(
            seed in 0u64..1000,
            y0 in 0usize..14, hgt in 0usize..6, x0 in 0usize..14, wid in 0usize..6,
            stride in 1usize..3,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (15, 15);
            let s = Support { y0, y1: (y0 + hgt).min(h), x0, x1: (x0 + wid).min(w) };
            let s = if s.is_empty() { Support::empty() } else { s };
            let level = [0.25f32, -0.5];
            let mut v = Vec::new();
            for ch in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        v.push(if s.contains(y, x) { rng.gen_range(-1.0..1.0) } else { level[ch] });
                    }
                }
            }
            let x = t(&[1, 2, h, w], v);
            let (dense, dr) = maxpool2d(&x, 3, stride).unwrap();
            let (sup, sr, _) = maxpool2d_supported(&x, &[s], 3, stride).unwrap();
            proptest::prop_assert_eq!(dense.data(), sup.data());
            proptest::prop_assert_eq!(dr.winners(), sr.winners());
        }
    }
}
