//! Rectangles outside of which a feature map is constant per channel.
//!
//! Stimuli are mostly black, so most of every feature map is a per-channel
//! constant. Ops that take a [`Support`] only compute inside it and fill the
//! rest from that constant.

use super::{Element, Tensor};

/// Half-open rectangle `[y0, y1) × [x0, x1)` of one `[C, H, W]` map. Every
/// channel is constant outside of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Support {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Support {
    pub fn full(h: usize, w: usize) -> Self {
        Support {
            y0: 0,
            y1: h,
            x0: 0,
            x1: w,
        }
    }

    pub fn empty() -> Self {
        Support {
            y0: 0,
            y1: 0,
            x0: 0,
            x1: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.y0 >= self.y1 || self.x0 >= self.x1
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_full(&self, h: usize, w: usize) -> bool {
        *self == Support::full(h, w)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    /// Bounding box of the non-zero entries of a `[C, H, W]` map, across channels.
    pub fn of_nonzero<T: Element>(map: &[T], h: usize, w: usize) -> Self {
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        for plane in map.chunks(h * w) {
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                if let Some(first) = row.iter().position(|v| *v != T::zero()) {
                    let last = row.iter().rposition(|v| *v != T::zero()).unwrap();
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                    x0 = x0.min(first);
                    x1 = x1.max(last + 1);
                }
            }
        }
        if y0 >= y1 {
            Support::empty()
        } else {
            Support { y0, y1, x0, x1 }
        }
    }

    /// Supports of every leading-axis item of a `[B, C, H, W]` tensor.
    pub fn of_tensor<T: Element>(x: &Tensor<T>) -> Vec<Support> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        x.data()
            .chunks(s[1] * h * w)
            .map(|m| Support::of_nonzero(m, h, w))
            .collect()
    }

    /// Smallest rectangle covering both.
    pub fn union(&self, other: &Support) -> Support {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        Support {
            y0: self.y0.min(other.y0),
            y1: self.y1.max(other.y1),
            x0: self.x0.min(other.x0),
            x1: self.x1.max(other.x1),
        }
    }

    /// Output positions of a sliding `window` (stride `stride`) that overlap the
    /// support, on an `oh × ow` output grid.
    pub fn after_window(&self, window: usize, stride: usize, oh: usize, ow: usize) -> Support {
        if self.is_empty() {
            return Support::empty();
        }
        let lo = |a: usize| (a + stride).saturating_sub(window) / stride;
        let lo = |a: usize| if a + 1 >= window { lo(a) } else { 0 };
        let hi = |b: usize, n: usize| ((b - 1) / stride + 1).min(n);
        let s = Support {
            y0: lo(self.y0),
            y1: hi(self.y1, oh),
            x0: lo(self.x0),
            x1: hi(self.x1, ow),
        };
        if s.is_empty() {
            Support::empty()
        } else {
            s
        }
    }

    /// A position outside the support of an `h × w` map, if there is one.
    pub fn outside_point(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if !self.contains(0, 0) {
            Some((0, 0))
        } else if self.y1 < h {
            Some((self.y1, 0))
        } else if self.x1 < w {
            Some((0, self.x1))
        } else {
            None
        }
    }
}
