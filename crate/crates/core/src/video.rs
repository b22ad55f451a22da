//! Dense T x H x W x C clip of unit-interval intensities — the universal
//! input/output of the pipeline.

use crate::tensor::{Real, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct VideoBlock {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f32>,
}

impl VideoBlock {
    pub fn new(t: usize, h: usize, w: usize, c: usize) -> Self {
        VideoBlock {
            t,
            h,
            w,
            c,
            data: vec![0.0; t * h * w * c],
        }
    }

    pub fn filled(t: usize, h: usize, w: usize, c: usize, value: f32) -> Self {
        VideoBlock {
            t,
            h,
            w,
            c,
            data: vec![value; t * h * w * c],
        }
    }

    pub fn from_data(
        t: usize,
        h: usize,
        w: usize,
        c: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if data.len() != t * h * w * c {
            return Err(TensorError::ShapeMismatch(format!(
                "video data length {} vs {}x{}x{}x{}",
                data.len(),
                t,
                h,
                w,
                c
            )));
        }
        Ok(VideoBlock { t, h, w, c, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }

    /// Pixel count T*H*W (channels excluded), the denominator of bpp.
    pub fn pixels(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[((t * self.h + h) * self.w + w) * self.c + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, h: usize, w: usize, c: usize, v: f32) {
        self.data[((t * self.h + h) * self.w + w) * self.c + c] = v;
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.h * self.w * self.c;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f32(v)).collect();
        Tensor::from_vec(&[self.t, self.h, self.w, self.c], data).expect("sized")
    }

    /// Converts a [T, H, W, C] tensor back to a clip, clamping to [0, 1].
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self, TensorError> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "video tensor must be rank 4, got {:?}",
                s
            )));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| Real::to_f32(v).clamp(0.0, 1.0))
            .collect();
        VideoBlock::from_data(s[0], s[1], s[2], s[3], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_and_clamp() {
        let mut v = VideoBlock::new(1, 2, 2, 1);
        v.set(0, 0, 0, 0, 0.25);
        v.set(0, 1, 1, 0, 1.0);
        let t = v.to_tensor::<f64>();
        let back = VideoBlock::from_tensor(&t).unwrap();
        assert_eq!(v, back);

        let hot = Tensor::from_vec(&[1, 1, 1, 2], vec![1.5f64, -0.25]).unwrap();
        let clamped = VideoBlock::from_tensor(&hot).unwrap();
        assert_eq!(clamped.data(), &[1.0, 0.0]);
    }
}
