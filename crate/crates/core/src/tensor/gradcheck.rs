use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

/// Added to `|central difference|` in the relative-error denominator so that
/// near-zero gradients are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Result of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub elements: usize,
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights,
/// so that outputs whose plain sum is constant (normalizations) still get a
/// non-trivial gradient.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    if g.value(y).numel() == 1 {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let weights = Tensor::from_fn(g.shape(y), |_| rng.gen_range(-1.0..1.0));
    let w = g.constant(weights);
    let prod = g.mul(y, w)?;
    Ok(g.reduce_sum(prod))
}

/// Max relative error between the tape gradient of `f` at `point` and
/// central differences with perturbation `eps`, over every input element.
///
/// `f` receives one leaf per entry of `point`; a non-scalar result is
/// projected onto fixed random weights first.
pub fn grad_check<F, E>(f: F, point: &[Tensor<f64>], eps: f64) -> Result<GradCheck, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let loss = project(&mut g, y)?;
    let grads = g.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        let loss = project(&mut g, y)?;
        Ok(g.value(loss).item())
    };

    let mut work = point.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        elements: 0,
    };
    for (p, &var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(var) {
            Some(gr) => gr,
            None => {
                zeros = vec![0.0; point[p].numel()];
                &zeros
            }
        };
        for i in 0..point[p].numel() {
            let orig = point[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / (numeric.abs() + GRAD_CHECK_FLOOR);
            report.elements += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    //! Finite-difference checks of every primitive's adjoint on randomized
    //! inputs of several shapes.
    use super::*;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn check<F>(f: F, point: &[Tensor<f64>]) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
    {
        let r = grad_check(f, point, EPS).unwrap();
        assert!(r.max_rel_error < TOL, "rel error {} at {:?}", r.max_rel_error, r.worst);
        r.max_rel_error
    }

    const SHAPES: [&[usize]; 3] = [&[3, 4], &[1, 6], &[5, 2]];

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |g: &mut Graph<f64>, _v: &[Var]| -> Result<Var, TensorError> { Ok(g.constant(Tensor::scalar(3.0))) },
            &[rand_tensor(&[2, 2], 1)],
            EPS,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn elementwise_primitives() {
        for (s, shape) in SHAPES.iter().enumerate() {
            let p = [rand_tensor(shape, s as u64), rand_tensor(shape, 10 + s as u64)];
            check(|g, v| g.add(v[0], v[1]), &p);
            check(|g, v| g.sub(v[0], v[1]), &p);
            check(|g, v| g.mul(v[0], v[1]), &p);
            check(|g, v| Ok(g.scale(v[0], 0.7)), &p);
            check(|g, v| Ok(g.swish(v[0])), &p);
            check(|g, v| Ok(g.sigmoid(v[0])), &p);
            check(|g, v| Ok(g.relu(v[0])), &p);
            check(|g, v| g.softmax(v[0]), &p);
            check(|g, v| g.log_softmax(v[0]), &p);
            check(|g, v| Ok(g.reduce_sum(v[0])), &p);
            check(|g, v| Ok(g.reduce_mean(v[0])), &p);
        }
    }

    #[test]
    fn broadcast_bias() {
        let p = [rand_tensor(&[4, 3], 1), rand_tensor(&[3], 2)];
        check(|g, v| g.add(v[0], v[1]), &p);
        check(|g, v| g.sub(v[0], v[1]), &p);
        check(|g, v| g.mul(v[0], v[1]), &p);
    }

    #[test]
    fn matmul_2d_and_batched() {
        for (m, k, n) in [(2, 3, 4), (1, 5, 1), (4, 4, 2)] {
            check(|g, v| g.matmul(v[0], v[1]), &[rand_tensor(&[m, k], 1), rand_tensor(&[k, n], 2)]);
            check(|g, v| g.matmul(v[0], v[1]), &[rand_tensor(&[2, m, k], 3), rand_tensor(&[2, k, n], 4)]);
        }
    }

    #[test]
    fn structural_primitives() {
        for (s, shape) in [&[2usize, 3, 4][..], &[4, 1, 3], &[1, 2, 5]].iter().enumerate() {
            let p = [rand_tensor(shape, s as u64)];
            check(|g, v| g.permute(v[0], &[2, 0, 1]), &p);
            check(|g, v| g.transpose(v[0]), &p);
            check(|g, v| g.reshape(v[0], &[shape.iter().product()]), &p);
            check(|g, v| g.slice(v[0], 2, 1, shape[2]).or_else(|_| g.slice(v[0], 2, 0, 1)), &p);
            check(|g, v| g.pad(v[0], 1, 1, 2), &p);
            check(
                |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    g.concat(&[v[0], sq], 2)
                },
                &p,
            );
        }
    }

    #[test]
    fn layer_norm_random_inputs() {
        for (s, shape) in [&[4usize, 8][..], &[1, 5], &[3, 2, 6]].iter().enumerate() {
            let d = *shape.last().unwrap();
            let p = [
                rand_tensor(shape, s as u64),
                rand_tensor(&[d], 20 + s as u64),
                rand_tensor(&[d], 40 + s as u64),
            ];
            check(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &p);
        }
    }

    #[test]
    fn batch_norm_random_inputs() {
        for (s, (t, c)) in [(5, 3), (2, 4), (7, 1)].into_iter().enumerate() {
            let p = [rand_tensor(&[t, c], s as u64), rand_tensor(&[c], 5), rand_tensor(&[c], 6)];
            check(|g, v| g.batch_norm_1d(v[0], v[1], v[2], 1e-5), &p);
        }
    }

    #[test]
    fn glu_random_inputs() {
        for (s, shape) in SHAPES.iter().enumerate() {
            check(|g, v| g.glu(v[0]), &[rand_tensor(shape, s as u64)]);
        }
    }

    #[test]
    fn conv1d_random_inputs() {
        for (t, cin, cout, k, stride, pad) in [(9, 3, 2, 3, 2, 1), (6, 2, 3, 3, 1, 1), (4, 1, 2, 2, 1, 0)] {
            let p = [
                rand_tensor(&[t, cin], 1),
                rand_tensor(&[cout, cin, k], 2),
                rand_tensor(&[cout], 3),
            ];
            check(|g, v| g.conv1d(v[0], v[1], v[2], stride, pad), &p);
        }
    }

    #[test]
    fn depthwise_random_inputs() {
        for (t, c, k) in [(6, 3, 3), (2, 2, 5), (8, 1, 1)] {
            let p = [rand_tensor(&[t, c], 1), rand_tensor(&[c, k], 2), rand_tensor(&[c], 3)];
            check(|g, v| g.depthwise_conv1d(v[0], v[1], v[2], (k - 1) / 2), &p);
        }
    }

    #[test]
    fn sampling_random_inputs() {
        for (t, k) in [(5, 2), (6, 3), (4, 1)] {
            let p = [rand_tensor(&[t, 3], t as u64)];
            check(|g, v| g.mean_pool_frames(v[0], k), &p);
            check(
                |g, v| {
                    let down = g.mean_pool_frames(v[0], k)?;
                    g.repeat_frames(down, k, t)
                },
                &p,
            );
        }
    }

    #[test]
    fn dropout_fixed_mask() {
        for (s, shape) in SHAPES.iter().enumerate() {
            check(
                |g, v| {
                    let mut rng = ChaCha8Rng::seed_from_u64(7);
                    Ok(g.dropout(v[0], 0.3, &mut rng))
                },
                &[rand_tensor(shape, s as u64)],
            );
        }
    }

    #[test]
    fn composite_graph() {
        let p = [rand_tensor(&[5, 4], 1), rand_tensor(&[4, 6], 2), rand_tensor(&[3], 3), rand_tensor(&[3], 4)];
        check(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.glu(h)?;
                let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
                let h = g.swish(h);
                let h = g.mean_pool_frames(h, 2)?;
                g.log_softmax(h)
            },
            &p,
        );
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.param(rand_tensor(&[6, 4], 9));
            let w = g.param(rand_tensor(&[4, 4], 10));
            let h = g.matmul(x, w).unwrap();
            let h = g.softmax(h).unwrap();
            let s = g.reduce_sum(h);
            let s = g.mul(s, s).unwrap();
            let grads = g.backward(s).unwrap();
            (grads.get(x).unwrap().to_vec(), grads.get(w).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }
}
