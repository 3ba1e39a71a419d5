//! Minimal reverse-mode differentiation engine.
//!
//! [`Graph`] records primitives over dense [`Tensor`]s; [`ParameterStore`]
//! owns learnable weights by name and [`grad_check`] compares analytic
//! gradients with central differences.

mod dd;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use dd::Dd;
pub use gradcheck::{grad_check, grad_check_where, GradCheckReport};
pub use graph::{Gradients, Graph, Unary, Var};
pub use params::{
    uniform_init, ParamEntry, ParamManifest, ParameterStore, PARAM_FORMAT_VERSION, PARAM_MAGIC,
};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; record a new computation first")]
    BackwardTwice,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("non-finite loss {value} while perturbing {param}[{index}]")]
    NonFiniteLoss {
        param: String,
        index: usize,
        value: f64,
    },
    #[error("corrupt parameter checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![0.0, 0.0, 0.0]]));
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_identity_and_negation() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[vec![0.3, -1.2, 2.0]]));
        let nv = g.scale(v, -1.0).unwrap();
        let c1 = g.cosine(v, v, 1e-8).unwrap();
        let c2 = g.cosine(v, nv, 1e-8).unwrap();
        assert!((g.scalar(c1) - 1.0).abs() < 1e-8);
        assert!((g.scalar(c2) + 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_lstm_gives_zero_hidden() {
        let mut g = Graph::<f64>::new();
        let pre = g.constant(Tensor::zeros(vec![1, 8]));
        let c = g.constant(Tensor::zeros(vec![1, 2]));
        let out = g.lstm_gates(pre, c).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn summed_softmax_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[vec![0.5, -1.0, 2.0, 0.1]]));
        let y = g.softmax(x, 1).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        // d/da cos(a, b) at a = [1, 0], b = [0, 1]; central differences, step 1e-6.
        let b = t(&[vec![0.0, 1.0]]);
        let cos_at = |a: [f64; 2]| {
            let mut g = Graph::<f64>::new();
            let av = g.constant(t(&[a.to_vec()]));
            let bv = g.constant(b.clone());
            let c = g.cosine(av, bv, 1e-8).unwrap();
            g.scalar(c)
        };
        let h = 1e-6;
        let fd = [
            (cos_at([1.0 + h, 0.0]) - cos_at([1.0 - h, 0.0])) / (2.0 * h),
            (cos_at([1.0, h]) - cos_at([1.0, -h])) / (2.0 * h),
        ];
        assert!(
            (fd[0] - 0.0).abs() < 1e-6 && (fd[1] - 1.0).abs() < 1e-6,
            "{fd:?}"
        );

        let mut g = Graph::<f64>::new();
        let av = g.variable(t(&[vec![1.0, 0.0]]));
        let bv = g.constant(b);
        let c = g.cosine(av, bv, 1e-8).unwrap();
        let grads = g.backward(c).unwrap();
        let an = grads.wrt(av).unwrap().data();
        assert!(
            (an[0] - fd[0]).abs() < 1e-6 && (an[1] - fd[1]).abs() < 1e-6,
            "{an:?}"
        );
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[vec![1.0, 2.0]]));
        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NonScalarLoss(_))
        ));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(AutodiffError::BackwardTwice)));
    }

    #[test]
    fn shape_errors_name_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[vec![1.0, 5.0, 5.0]]));
        let m = g.max(x, 1).unwrap();
        let s = g.sum_all(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[vec![0.0, 1.0, -1.0]]));
        let r = g.relu(x).unwrap();
        let s = g.sum_all(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut store = ParameterStore::<f64>::new(0);
        store.insert("used", Tensor::scalar(2.0)).unwrap();
        store.insert("unused", Tensor::zeros(vec![2, 2])).unwrap();
        let mut g = Graph::with_params(&store);
        let u = g.param("used").unwrap();
        let y = g.square(u).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("used").unwrap().data(), &[4.0]);
        assert_eq!(grads.param("unused").unwrap().shape(), &[2, 2]);
        assert!(grads
            .param("unused")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn gradcheck_quadratic() {
        let mut store = ParameterStore::<f64>::new(0);
        store.insert("x", t(&[vec![0.7, -1.3, 2.1]])).unwrap();
        store.insert("w", t(&[vec![1.5, 0.5, -0.25]])).unwrap();
        let report = grad_check(
            |g| {
                let x = g.param("x")?;
                let w = g.param("w")?;
                let xw = g.mul(x, w)?;
                let sq = g.square(xw)?;
                g.sum_all(sq)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 6);
    }

    #[test]
    fn gradcheck_reports_non_finite() {
        let mut store = ParameterStore::<f64>::new(0);
        store.insert("x", Tensor::scalar(0.0)).unwrap();
        let err = grad_check(
            |g| {
                let x = g.param("x")?;
                let r = g.recip(x)?;
                g.sum_all(r)
            },
            &store,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }
}
