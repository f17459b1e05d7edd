//! Dense per-site fields: the storage type behind prediction grids and
//! feature maps.
//!
//! A [`Field`] holds `channels` values at each of `h x w` spatial sites,
//! stored site-major (`data[(y*w + x)*channels + c]`) so a site's channel
//! vector is contiguous. Classification-mode vectors are `1 x 1` fields.

use crate::error::{Error, Result};

/// Half-open rectangle `[y1, y2) x [x1, x2)` in site coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y1: usize,
    pub y2: usize,
    pub x1: usize,
    pub x2: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y1..self.y2).contains(&y) && (self.x1..self.x2).contains(&x)
    }
}

/// A `channels x h x w` real field with contiguous per-site channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        assert!(channels >= 1 && h >= 1 && w >= 1);
        Self { channels, h, w, data: vec![0.0; channels * h * w] }
    }

    pub fn from_vec(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::Shape(format!(
                "field {channels}x{h}x{w} needs {} values, got {}",
                channels * h * w,
                data.len()
            )));
        }
        Ok(Self { channels, h, w, data })
    }

    /// Wrap a plain vector as a single-site field.
    pub fn from_vector(v: &[f64]) -> Self {
        Self { channels: v.len(), h: 1, w: 1, data: v.to_vec() }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_sites(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.h, self.w)
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.shape() == other.shape()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn site(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.w + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn site_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.w + x) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    /// Channel vector of the `i`-th site in row-major site order.
    pub fn site_by_index(&self, i: usize) -> &[f64] {
        let base = i * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn site_by_index_mut(&mut self, i: usize) -> &mut [f64] {
        let base = i * self.channels;
        &mut self.data[base..base + self.channels]
    }

    /// Copy of the sub-field covered by `rect`.
    pub fn crop(&self, rect: Rect) -> Field {
        assert!(rect.y2 <= self.h && rect.x2 <= self.w && rect.area() > 0);
        let mut out = Field::zeros(self.channels, rect.height(), rect.width());
        for y in rect.y1..rect.y2 {
            for x in rect.x1..rect.x2 {
                out.site_mut(y - rect.y1, x - rect.x1).copy_from_slice(self.site(y, x));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-site class indices for dense labels and pseudo-labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    h: usize,
    w: usize,
    labels: Vec<usize>,
}

impl LabelField {
    pub fn new(h: usize, w: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label field {h}x{w} needs {} entries, got {}",
                h * w,
                labels.len()
            )));
        }
        Ok(Self { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, class: usize) -> Self {
        Self { h, w, labels: vec![class; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_sites(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.w + x]
    }

    pub fn get_index(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn set(&mut self, y: usize, x: usize, class: usize) {
        self.labels[y * self.w + x] = class;
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sorted, deduplicated classes occurring in the field.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = self.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    /// One-hot expansion to a `classes x h x w` field.
    pub fn one_hot(&self, classes: usize) -> Field {
        let mut f = Field::zeros(classes, self.h, self.w);
        for (i, &c) in self.labels.iter().enumerate() {
            assert!(c < classes);
            f.site_by_index_mut(i)[c] = 1.0;
        }
        f
    }

    /// Per-site argmax of a prediction field.
    pub fn from_argmax(probs: &Field) -> Self {
        let mut labels = Vec::with_capacity(probs.num_sites());
        for i in 0..probs.num_sites() {
            let site = probs.site_by_index(i);
            let mut best = 0;
            for c in 1..site.len() {
                if site[c] > site[best] {
                    best = c;
                }
            }
            labels.push(best);
        }
        Self { h: probs.height(), w: probs.width(), labels }
    }
}

/// Check that every site of `f` is a valid probability vector within `tol`.
pub fn validate_prob_field(f: &Field, tol: f64) -> Result<()> {
    for i in 0..f.num_sites() {
        let site = f.site_by_index(i);
        let sum: f64 = site.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Invalid(format!("site {i} sums to {sum}, not 1")));
        }
        if site.iter().any(|&p| !(0.0..=1.0 + tol).contains(&p)) {
            return Err(Error::Invalid(format!("site {i} has an entry outside [0, 1]")));
        }
    }
    Ok(())
}
