//! Dense `f64` tensors and a tensor-level reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
pub(crate) use tensor::{l2, squared_l2};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("non-finite value in input tensor")]
    NonFiniteInput,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

/// Gradient of a scalar function with respect to each parameter tensor.
///
/// `loss_fn` receives a fresh tape and the parameter handles in the order of
/// `params`, and must return a scalar.
pub fn grad<F>(loss_fn: F, params: &[Tensor]) -> Result<Vec<Tensor>, NumericsError>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Evaluates `loss_fn` forward only and returns the scalar value.
pub fn eval_loss<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64, NumericsError>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss);
    value
        .item()
        .ok_or_else(|| NumericsError::NonScalarLoss(value.shape().to_vec()))
}

/// Central-difference gradient, one coordinate at a time.
pub fn finite_diff_grad<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>, NumericsError>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var, NumericsError>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(NumericsError::InvalidStep(h));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for (i, slot) in g.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p] = with_coord(&params[p], i, orig + h);
            let plus = eval_loss(&loss_fn, &work)?;
            work[p] = with_coord(&params[p], i, orig - h);
            let minus = eval_loss(&loss_fn, &work)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        work[p] = params[p].clone();
        out.push(Tensor::new(params[p].shape().to_vec(), g)?);
    }
    Ok(out)
}

fn with_coord(t: &Tensor, i: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = value;
    Tensor::from_raw(t.shape().to_vec(), data)
}

/// Largest per-coordinate relative error between two gradient lists.
///
/// The denominator is floored at `floor` so coordinates that are zero in
/// both do not divide by zero.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn sum_squares(t: &mut GradTape, p: &[Var]) -> Result<Var, NumericsError> {
        let sq = t.mul(p[0], p[0])?;
        t.sum(sq)
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let f = |t: &mut GradTape, _p: &[Var]| {
            let c = t.constant(Tensor::scalar(3.0)?);
            Ok(c)
        };
        let p = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let g = grad(f, &[p.clone()]).unwrap();
        assert_eq!(g[0], Tensor::zeros(vec![2, 3]));
        let fd = finite_diff_grad(f, &[p], 1e-5).unwrap();
        assert!(fd[0].data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sum_of_squares_gradient_is_two_p() {
        let g = grad(sum_squares, &[vec_t(&[1.0, -2.0])]).unwrap();
        assert_eq!(g[0].data(), &[2.0, -4.0]);
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let g = grad(|t, p| t.sum(p[0]), &[vec_t(&[5.0, 7.0])]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let fd = finite_diff_grad(sum_squares, &[vec_t(&[1.0])], 1e-5).unwrap();
        assert!((fd[0].data()[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_of_cubic() {
        let cube = |t: &mut GradTape, p: &[Var]| {
            let sq = t.mul(p[0], p[0])?;
            let cu = t.mul(sq, p[0])?;
            t.sum(cu)
        };
        let fd = finite_diff_grad(cube, &[vec_t(&[2.0])], 1e-4).unwrap();
        assert!((fd[0].data()[0] - 12.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step() {
        assert_eq!(
            finite_diff_grad(sum_squares, &[vec_t(&[1.0])], 0.0).unwrap_err(),
            NumericsError::InvalidStep(0.0)
        );
    }

    #[test]
    fn non_finite_intermediate_names_the_op() {
        let blowup = |t: &mut GradTape, p: &[Var]| {
            let big = t.scale(p[0], 1e300)?;
            let sq = t.mul(big, big)?;
            t.sum(sq)
        };
        let err = grad(blowup, &[vec_t(&[10.0])]).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite { op: "mul" });
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let err = grad(|t, p| t.scale(p[0], 2.0), &[vec_t(&[1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss(_)));
    }

    #[test]
    fn shape_mismatch_is_reported_at_tape_time() {
        let mut t = GradTape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(t.matmul(a, b), Err(NumericsError::ShapeMismatch { op: "matmul", .. })));
        assert!(matches!(t.add(a, b), Err(NumericsError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn cosine_of_zero_row_is_zero() {
        let mut t = GradTape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let c = t.cosine_matrix(a, 1e-8).unwrap();
        assert_eq!(t.value(c).data()[1], 0.0);
        assert!((t.value(c).data()[3] - 1.0).abs() < 1e-7);
    }

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    type LossFn = fn(&mut GradTape, &[Var]) -> Result<Var, NumericsError>;

    /// One composition per primitive, each reduced to a scalar through a
    /// fixed non-uniform weighting so that every output coordinate matters.
    fn compositions() -> Vec<(&'static str, Vec<Vec<usize>>, LossFn)> {
        fn weighted(t: &mut GradTape, v: Var) -> Result<Var, NumericsError> {
            let shape = t.value(v).shape().to_vec();
            let n = t.value(v).len();
            let w = t.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * i as f64).collect())?);
            let prod = t.mul(v, w)?;
            t.sum(prod)
        }
        vec![
            ("add", vec![vec![3, 4], vec![3, 4]], |t, p| {
                let s = t.add(p[0], p[1])?;
                let q = t.mul(s, s)?;
                weighted(t, q)
            }),
            ("sub", vec![vec![3, 4], vec![3, 4]], |t, p| {
                let s = t.sub(p[0], p[1])?;
                let q = t.mul(s, s)?;
                weighted(t, q)
            }),
            ("mul+scale", vec![vec![4, 4], vec![4, 4]], |t, p| {
                let m = t.mul(p[0], p[1])?;
                let s = t.scale(m, -1.7)?;
                weighted(t, s)
            }),
            ("matmul", vec![vec![3, 5], vec![5, 2]], |t, p| {
                let m = t.matmul(p[0], p[1])?;
                weighted(t, m)
            }),
            ("add_row", vec![vec![4, 3], vec![3]], |t, p| {
                let m = t.add_row(p[0], p[1])?;
                let q = t.mul(m, m)?;
                weighted(t, q)
            }),
            ("transpose", vec![vec![3, 4]], |t, p| {
                let m = t.transpose(p[0])?;
                let q = t.mul(m, m)?;
                weighted(t, q)
            }),
            ("softmax", vec![vec![3, 5]], |t, p| {
                let s = t.softmax(p[0])?;
                weighted(t, s)
            }),
            ("layer_norm", vec![vec![3, 6]], |t, p| {
                let s = t.layer_norm(p[0], 1e-5)?;
                weighted(t, s)
            }),
            ("gelu", vec![vec![4, 4]], |t, p| {
                let s = t.gelu(p[0])?;
                weighted(t, s)
            }),
            ("tanh", vec![vec![4, 4]], |t, p| {
                let s = t.tanh(p[0])?;
                weighted(t, s)
            }),
            ("cosine", vec![vec![5, 3]], |t, p| {
                let s = t.cosine_matrix(p[0], 1e-8)?;
                weighted(t, s)
            }),
            ("slice/concat cols", vec![vec![3, 6]], |t, p| {
                let a = t.slice_cols(p[0], 0, 2)?;
                let b = t.slice_cols(p[0], 3, 3)?;
                let c = t.concat_cols(&[b, a])?;
                let q = t.mul(c, c)?;
                weighted(t, q)
            }),
            ("slice/concat rows", vec![vec![5, 2], vec![2, 2]], |t, p| {
                let a = t.slice_rows(p[0], 1, 3)?;
                let c = t.concat_rows(&[p[1], a])?;
                let q = t.mul(c, c)?;
                weighted(t, q)
            }),
            ("attention block", vec![vec![4, 4], vec![4, 4], vec![4]], |t, p| {
                let x = t.layer_norm(p[0], 1e-5)?;
                let q = t.matmul(x, p[1])?;
                let kt = t.transpose(q)?;
                let s = t.matmul(q, kt)?;
                let a = t.softmax(s)?;
                let o = t.matmul(a, x)?;
                let o = t.add_row(o, p[2])?;
                let g = t.gelu(o)?;
                let c = t.cosine_matrix(g, 1e-8)?;
                weighted(t, c)
            }),
        ]
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, shapes, f) in compositions() {
            for _ in 0..5 {
                let params: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s.clone())).collect();
                let g = grad(f, &params).unwrap();
                let fd = finite_diff_grad(f, &params, 1e-5).unwrap();
                let err = max_relative_error(&g, &fd, 1e-6);
                assert!(err <= 1e-5, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn grad_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, shapes, f) in compositions() {
            let params: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s.clone())).collect();
            let a = grad(f, &params).unwrap();
            let b = grad(f, &params).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn backward_visits_only_recorded_prefix() {
        // nodes recorded after the loss do not contribute
        let mut t = GradTape::new();
        let p = t.param(vec_t(&[2.0]));
        let sq = t.mul(p, p).unwrap();
        let loss = t.sum(sq).unwrap();
        let _later = t.scale(p, 100.0).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p).data(), &[4.0]);
    }
}
