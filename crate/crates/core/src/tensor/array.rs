use crate::error::{shape_err, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// The first axis is the channel axis; remaining axes are spatial. A scalar
/// is represented with shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return shape_err(format!("invalid shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("non-empty vector")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per channel.
    pub fn site_count(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows `start..start + len` of the channel axis.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape[0] || len == 0 {
            return shape_err(format!(
                "channel slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            ));
        }
        let per = self.site_count();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(&shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let tail = &first.shape[1..];
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err(format!(
                    "concat spatial mismatch {:?} vs {:?}",
                    first.shape, p.shape
                ));
            }
            channels += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = channels;
        Self::new(&shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64);
        let top = a.channel_slice(0, 1).unwrap();
        let rest = a.channel_slice(1, 2).unwrap();
        let back = Tensor::concat_channels(&[&top, &rest]).unwrap();
        assert_eq!(a, back);
    }
}
