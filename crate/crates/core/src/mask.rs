//! Binary masks and integer label maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Object identifier; 0 is background.
pub type ObjectId = u8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(
                "mask",
                format!("{} values for a {height}×{width} mask", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    /// Pixels of a `1×h×w` (or `h×w`) tensor at or above `threshold`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, threshold: f64) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(Error::dim("mask", format!("expected 1×h×w, got {s:?}"))),
        };
        Ok(Self {
            height: h,
            width: w,
            data: t.data().iter().map(|v| v.as_f64() >= threshold).collect(),
        })
    }

    /// `1×h×w` tensor of zeros and ones.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn([1, self.height, self.width], |i| {
            if self.data[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Moves the content by `(dx, dy)` pixels, cropping at the borders.
    pub fn shifted(&self, dx: isize, dy: isize) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            let (sy, sx) = (y as isize - dy, x as isize - dx);
            sy >= 0
                && sx >= 0
                && (sy as usize) < self.height
                && (sx as usize) < self.width
                && self.get(sy as usize, sx as usize)
        })
    }

    /// Removes `k` layers of 4-connected boundary pixels.
    pub fn eroded(&self, k: usize) -> Self {
        let mut m = self.clone();
        for _ in 0..k {
            let b = m.inner_boundary();
            for (v, &edge) in m.data.iter_mut().zip(&b.data) {
                *v &= !edge;
            }
        }
        m
    }

    /// Foreground pixels with at least one 4-neighbour that is background
    /// or lies outside the image.
    pub fn inner_boundary(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(h, w, |y, x| {
            self.get(y, x)
                && (y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1))
        })
    }

    pub(crate) fn check_same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }
}

/// Per-pixel object ids, 0 for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<ObjectId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<ObjectId>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(
                "label_map",
                format!("{} values for a {height}×{width} map", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Paints masks in ascending id order; overlapping pixels go to the
    /// larger id.
    pub fn from_masks(height: usize, width: usize, masks: &BTreeMap<ObjectId, BinaryMask>) -> Result<Self> {
        let mut out = Self::background(height, width);
        for (&id, m) in masks {
            if m.dims() != (height, width) {
                return Err(Error::dim(
                    "label_map",
                    format!("mask {id} is {:?}, map is {:?}", m.dims(), (height, width)),
                ));
            }
            for (l, &v) in out.data.iter_mut().zip(m.data()) {
                if v {
                    *l = id;
                }
            }
        }
        Ok(out)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[ObjectId] {
        &self.data
    }

    /// Sorted non-background ids present in the map.
    pub fn object_ids(&self) -> Vec<ObjectId> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&i| seen[i as usize]).collect()
    }

    pub fn mask(&self, id: ObjectId) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == id).collect(),
        }
    }

    pub fn masks(&self) -> BTreeMap<ObjectId, BinaryMask> {
        self.object_ids().into_iter().map(|id| (id, self.mask(id))).collect()
    }
}
