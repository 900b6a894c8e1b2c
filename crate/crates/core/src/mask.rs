//! Binary segmentation masks with an ignore value for pixels excluded from
//! both loss and scoring.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel value marking regions excluded from loss and metrics.
pub const IGNORE: u8 = 255;

/// Row-major binary mask; entries are 0, 1, or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask size");
        debug_assert!(data.iter().all(|&v| v == 0 || v == 1 || v == IGNORE));
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Mask::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Count of foreground pixels (ignore pixels excluded).
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn hflip(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    /// Axis-aligned sub-rectangle.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Mask {
        assert!(top + h <= self.height && left + w <= self.width, "crop bounds");
        Mask::from_fn(h, w, |y, x| self.get(top + y, left + x))
    }

    /// Nearest-neighbor resize; keeps values in {0,1,IGNORE}.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Mask {
        Mask::from_fn(oh, ow, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / oh as f64 - 0.5)
                .round()
                .clamp(0.0, (self.height - 1) as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / ow as f64 - 0.5)
                .round()
                .clamp(0.0, (self.width - 1) as f64) as usize;
            self.get(sy, sx)
        })
    }

    /// Split into loss inputs: per-pixel class targets (ignore pixels read
    /// as 0) and a validity map that is 0 exactly on ignore pixels.
    pub fn to_loss_tensors<S: Scalar>(&self) -> (Tensor<S>, Tensor<S>) {
        let dims = vec![self.height, self.width];
        let target = Tensor::from_fn(dims.clone(), |i| {
            if self.data[i] == 1 {
                S::one()
            } else {
                S::zero()
            }
        });
        let valid = Tensor::from_fn(dims, |i| {
            if self.data[i] == IGNORE {
                S::zero()
            } else {
                S::one()
            }
        });
        (target, valid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hflip_is_an_involution() {
        let m = Mask::from_fn(3, 4, |y, x| ((y + x) % 2) as u8);
        assert_eq!(m.hflip().hflip(), m);
    }

    #[test]
    fn crop_takes_the_requested_window() {
        let m = Mask::from_fn(4, 4, |y, x| if y == 1 && x == 2 { 1 } else { 0 });
        let c = m.crop(1, 1, 2, 3);
        assert_eq!(c.get(0, 1), 1);
        assert_eq!(c.foreground_count(), 1);
    }

    #[test]
    fn nearest_resize_preserves_value_set() {
        let mut m = Mask::zeros(5, 5);
        m.set(2, 2, 1);
        m.set(0, 0, IGNORE);
        let r = m.resize_nearest(9, 7);
        assert!(r.data().iter().all(|&v| v == 0 || v == 1 || v == IGNORE));
        let back = r.resize_nearest(5, 5);
        assert_eq!(back.get(2, 2), 1);
    }

    #[test]
    fn loss_tensors_mark_ignore_pixels_invalid() {
        let mut m = Mask::zeros(2, 2);
        m.set(0, 0, 1);
        m.set(1, 1, IGNORE);
        let (target, valid) = m.to_loss_tensors::<f64>();
        assert_eq!(target.at2(0, 0), 1.0);
        assert_eq!(target.at2(1, 1), 0.0);
        assert_eq!(valid.at2(0, 0), 1.0);
        assert_eq!(valid.at2(1, 1), 0.0);
    }
}
