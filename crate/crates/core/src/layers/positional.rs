use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed sinusoidal table:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding<F: Scalar = f32> {
    table: Tensor<F>,
}

impl<F: Scalar> PositionalEncoding<F> {
    pub fn new(max_len: usize, d_model: usize) -> Result<Self> {
        if d_model == 0 || !d_model.is_multiple_of(2) {
            return Err(Error::config("d_model", format!("positional encoding needs an even width, got {d_model}")));
        }
        if max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        let mut data = vec![0.0f64; max_len * d_model];
        for pos in 0..max_len {
            for i in 0..d_model / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
                data[pos * d_model + 2 * i] = angle.sin();
                data[pos * d_model + 2 * i + 1] = angle.cos();
            }
        }
        Ok(PositionalEncoding { table: Tensor::from_f64(&[max_len, d_model], &data)? })
    }

    pub fn max_len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn table(&self) -> &Tensor<F> {
        &self.table
    }

    /// First `len` rows as a `[len, d_model]` tensor.
    pub fn rows(&self, len: usize) -> Result<Tensor<F>> {
        if len > self.max_len() {
            return Err(Error::config(
                "window_len",
                format!("sequence of {len} exceeds positional table of {}", self.max_len()),
            ));
        }
        let d = self.table.shape()[1];
        Tensor::from_vec(vec![len, d], self.table.data()[..len * d].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates() {
        let pe = PositionalEncoding::<f64>::new(4, 8).unwrap();
        assert_eq!(pe.table().row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.table().row(1)[0] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn bounded_and_odd_width_rejected() {
        let pe = PositionalEncoding::<f32>::new(512, 256).unwrap();
        assert!(pe.table().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(PositionalEncoding::<f32>::new(10, 7), Err(Error::Config { .. })));
        assert!(pe.rows(513).is_err());
    }
}
