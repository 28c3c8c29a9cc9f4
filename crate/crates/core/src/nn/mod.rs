//! Minimal dense tensor engine with reverse-mode differentiation.

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{trunc_normal, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Which patches contribute to the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScope {
    /// Only the masked (label) patches.
    #[default]
    Masked,
    /// Every patch of the canvas.
    Full,
}

/// Mean squared error between `[seq, patch_dim]` tensors over the patches in `mask`.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, mask: &[usize]) -> Result<Var> {
    g.masked_mse(pred, target, mask)
}

/// Expands per-sample patch ids to row ids of a `[batch * seq, ..]` tensor.
pub fn batch_rows(mask: &[usize], seq: usize, batch: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| mask.iter().map(move |&m| b * seq + m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 5.0, -6.0, 7.0, 8.25]);
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let target = t(&[4, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let p = g.variable(target.clone());
        let tv = g.constant(target.clone());
        let l = mse_loss(&mut g, p, tv, &[0, 1, 2, 3]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let shifted = g.constant(target.map(|x| x + 1.0));
        let l = mse_loss(&mut g, shifted, tv, &[1, 3]).unwrap();
        assert!((g.value(l).item().unwrap() - 1.0).abs() < 1e-12);

        assert!(matches!(mse_loss(&mut g, p, tv, &[]), Err(Error::EmptyMask)));
        let other = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(mse_loss(&mut g, p, other, &[0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mse_direct_summation() {
        let pred = t(&[4, 3], &[0.5, -1.0, 2.0, 0.25, 0.0, 1.0, -0.75, 3.0, 0.5, 1.5, 1.0, -2.0]);
        let target = t(&[4, 3], &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 0.5, 0.5, 0.5]);
        // patches 0 and 3: (0.25 + 1 + 1 + 1 + 0.25 + 6.25) / 6
        let expected = (0.25 + 1.0 + 1.0 + 1.0 + 0.25 + 6.25) / 6.0;
        let mut g = Graph::new();
        let (p, q) = (g.constant(pred), g.constant(target));
        let l = mse_loss(&mut g, p, q, &[0, 3]).unwrap();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::<f64>::zeros(&[2]));
        let y = g.gelu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarBackward(_))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).is_err());
        assert!(g.slice(a, 1, 2, 4).is_err());
        assert!(g.concat(&[a, c], 0).is_err());
        assert!(g.attention(a, a, a, 2, 2).is_err());
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[5, 64], |i| ((i * 7919) % 101) as f64 / 10.0 - 5.0));
        let gamma = g.constant(Tensor::full(&[64], 1.0));
        let beta = g.constant(Tensor::zeros(&[64]));
        let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_row_expansion() {
        assert_eq!(batch_rows(&[1, 3], 4, 2), vec![1, 3, 5, 7]);
    }
}
