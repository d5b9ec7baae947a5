//! Dense row-major tensors and class maps.
//!
//! Storage is `f32` (continuous data) or `u8` (categorical class maps).
//! Reductions elsewhere in the crate accumulate in `f64` so results do not
//! depend on platform-specific FMA contraction of long f32 chains.

use crate::error::{PhgError, Result};

// ── Tensor (f32) ────────────────────────────────────────────────────────────

/// Dense row-major f32 tensor of arbitrary rank.
///
/// Modality planes are rank-3 `[C, H, W]`; conv kernels are rank-4
/// `[C_out, C_in, kh, kw]`; vectors/scalars use rank 1/0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from dims + data; data length must match the dim product.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(PhgError::Shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    /// Tensor filled with a constant.
    pub fn full(dims: &[usize], value: f32) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the same data under new dims (product must match).
    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(PhgError::Shape(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    // Rank-3 [C,H,W] accessors. These are the hot paths, so no bounds
    // diagnostics beyond the slice's own check.

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x] = v;
    }

    /// Dims as (C, H, W); panics if rank != 3.
    #[inline]
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.dims[..] {
            [c, h, w] => (c, h, w),
            _ => panic!("expected rank-3 [C,H,W] tensor, got dims {:?}", self.dims),
        }
    }

    /// Borrow one channel plane of a [C,H,W] tensor as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let (_, h, w) = self.chw();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// Error if any element is NaN or +-Inf. `ctx` names the offending tensor
    /// in the message.
    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(PhgError::Numeric(format!(
                    "{ctx}: non-finite value {v} at flat index {i} (dims {:?})",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    /// Mean and population standard deviation, accumulated in f64.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Max absolute difference against another tensor of identical shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.dims != other.dims {
            return Err(PhgError::Shape(format!(
                "max_abs_diff dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    /// Crop a [C,H,W] tensor to the window starting at (y0,x0) of size (ch,cw).
    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw();
        if y0 + ch > h || x0 + cw > w || ch == 0 || cw == 0 {
            return Err(PhgError::Shape(format!(
                "crop ({y0},{x0})+({ch},{cw}) out of bounds for {h}x{w}"
            )));
        }
        let mut out = Tensor::zeros(&[c, ch, cw]);
        for ci in 0..c {
            for y in 0..ch {
                let src = &self.data[(ci * h + y0 + y) * w + x0..][..cw];
                out.data[(ci * ch + y) * cw..][..cw].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Bilinear resize of a [C,H,W] tensor (align-corners-false convention,
    /// edge-clamped). Used by the crop-and-rescale augmentation.
    pub fn resize_bilinear(&self, nh: usize, nw: usize) -> Tensor {
        let (c, h, w) = self.chw();
        let mut out = Tensor::zeros(&[c, nh, nw]);
        let sy = h as f64 / nh as f64;
        let sx = w as f64 / nw as f64;
        for ci in 0..c {
            for oy in 0..nh {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let wy = (fy - y0 as f64) as f32;
                for ox in 0..nw {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wx = (fx - x0 as f64) as f32;
                    let v00 = self.at3(ci, y0, x0);
                    let v01 = self.at3(ci, y0, x1);
                    let v10 = self.at3(ci, y1, x0);
                    let v11 = self.at3(ci, y1, x1);
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out.set3(ci, oy, ox, top + (bot - top) * wy);
                }
            }
        }
        out
    }
}

// ── ClassMap (u8) ───────────────────────────────────────────────────────────

/// Dense `[H, W]` map of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(PhgError::Shape(format!(
                "class map {}x{} needs {} entries, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(ClassMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        ClassMap { h, w, data: vec![class; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Error if any label is >= `num_classes`.
    pub fn check_labels(&self, num_classes: usize, ctx: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if (v as usize) >= num_classes {
                return Err(PhgError::Data(format!(
                    "{ctx}: label {v} at flat index {i} exceeds class count {num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// One-hot encode into a `[K, H, W]` tensor.
    pub fn to_one_hot(&self, num_classes: usize) -> Result<Tensor> {
        self.check_labels(num_classes, "one-hot")?;
        let mut t = Tensor::zeros(&[num_classes, self.h, self.w]);
        for y in 0..self.h {
            for x in 0..self.w {
                t.set3(self.at(y, x) as usize, y, x, 1.0);
            }
        }
        Ok(t)
    }

    /// Per-pixel argmax of a `[K, H, W]` tensor; ties resolve to the lowest
    /// class index (strict `>` while scanning upward).
    pub fn from_argmax(t: &Tensor) -> ClassMap {
        let (k, h, w) = t.chw();
        assert!(k <= u8::MAX as usize + 1, "too many classes for u8 map");
        let mut data = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut best_c = 0usize;
                let mut best_v = t.at3(0, y, x);
                for c in 1..k {
                    let v = t.at3(c, y, x);
                    if v > best_v {
                        best_v = v;
                        best_c = c;
                    }
                }
                data[y * w + x] = best_c as u8;
            }
        }
        ClassMap { h, w, data }
    }

    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<ClassMap> {
        if y0 + ch > self.h || x0 + cw > self.w || ch == 0 || cw == 0 {
            return Err(PhgError::Shape(format!(
                "crop ({y0},{x0})+({ch},{cw}) out of bounds for {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(ch * cw);
        for y in 0..ch {
            data.extend_from_slice(&self.data[(y0 + y) * self.w + x0..][..cw]);
        }
        Ok(ClassMap { h: ch, w: cw, data })
    }

    /// Nearest-neighbour resize (labels must not be interpolated).
    pub fn resize_nearest(&self, nh: usize, nw: usize) -> ClassMap {
        let mut data = vec![0u8; nh * nw];
        let sy = self.h as f64 / nh as f64;
        let sx = self.w as f64 / nw as f64;
        for oy in 0..nh {
            let y = (((oy as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(self.h - 1);
            for ox in 0..nw {
                let x = (((ox as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(self.w - 1);
                data[oy * nw + ox] = self.at(y, x);
            }
        }
        ClassMap { h: nh, w: nw, data }
    }

    /// Fraction of pixels whose label differs from `other`.
    pub fn disagreement(&self, other: &ClassMap) -> Result<f64> {
        if self.h != other.h || self.w != other.w {
            return Err(PhgError::Shape(format!(
                "disagreement between {}x{} and {}x{} maps",
                self.h, self.w, other.h, other.w
            )));
        }
        let diff = self.data.iter().zip(&other.data).filter(|(a, b)| a != b).count();
        Ok(diff as f64 / (self.h * self.w) as f64)
    }
}
