//! Tape-free entry points for the core primitives. Each one records the
//! corresponding tape op on a throwaway tape, so both paths share one kernel.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let y = tape.softmax(x);
    tape.value(y).clone()
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let b = tape.constant(bias.clone());
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// `softmax(q·kᵀ/√d)·v` for `q: [n_q, d]`, `k: [n_k, d]`, `v: [n_k, d_v]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let o = tape.attention(q, k, v)?;
    Ok(tape.value(o).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_examples() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = Tensor::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.25, 4.0, -1.0]]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let z = Tensor::zeros(&[2, 2]);
        assert!(matmul(&z, &m).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(matmul(&m, &m), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::from_rows(&[vec![0.7; 5]]));
        for &v in y.data() {
            assert!((v - 0.2).abs() < 1e-7);
        }
        let y = softmax_rows(&Tensor::from_rows(&[vec![0.0, 3.0f32.ln()]]));
        assert!((y.data()[0] - 0.25).abs() < 1e-7);
        assert!((y.data()[1] - 0.75).abs() < 1e-7);
        let y = softmax_rows(&Tensor::from_rows(&[vec![1.0, 1e4 + 1.0, -3.0, 2.0]]));
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
        assert!(y.data()[0] < 1e-6 && y.data()[2] < 1e-6 && y.data()[3] < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::from_rows(&[vec![4.0; 3]]), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // mean 2, population variance 2/3 -> (x - 2) / sqrt(2/3)
        let y = layer_norm(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]), &ones, &zeros, 0.0).unwrap();
        let s = (1.5f64).sqrt();
        let expected = [-s, 0.0, s];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        let var: f64 = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);

        let bias = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let y = layer_norm(&Tensor::from_rows(&[vec![9.0, -3.0, 0.1]]), &zeros, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn attention_identities() {
        let q = Tensor::from_rows(&[vec![3.0, -1.0], vec![0.2, 0.4]]);
        let k = Tensor::from_rows(&[vec![0.5, 0.5]]);
        let v = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(o.row(0), v.row(0));
        assert_eq!(o.row(1), v.row(0));

        let q = Tensor::zeros(&[1, 2]);
        let k = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 7.0]]);
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, -3.0]]);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((o.data()[0] - 3.0).abs() < 1e-6);
        assert!(o.data()[1].abs() < 1e-6);
    }
}
