use contraction_observer::optimize::{Adam, Lbfgs};
use contraction_observer::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (a, b) = (x[0], x[1]);
    let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
    let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
    Ok((f, g))
}

/// Runs L-BFGS until `done(loss, grad)` or `max_iter`; returns iterations used.
fn minimize<F>(x: &mut Vec<f64>, mut eval: F, max_iter: usize, done: impl Fn(f64, &[f64]) -> bool) -> usize
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut opt = Lbfgs::new(10);
    let (mut f, mut g) = eval(x).unwrap();
    for it in 0..max_iter {
        if done(f, &g) {
            return it;
        }
        let step = opt.step(x, f, &g, 1.0, &mut eval).unwrap();
        f = step.loss;
        g = step.grad;
    }
    if done(f, &g) {
        max_iter
    } else {
        usize::MAX
    }
}

#[test]
fn adam_minimizes_squared_norm() {
    let mut x = vec![5.0, 5.0];
    let mut adam = Adam::new(2);
    let mut steps = 0;
    while x.iter().map(|v| v * v).sum::<f64>() >= 1e-6 {
        assert!(steps < 1000, "no convergence, x = {x:?}");
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        adam.step(&mut x, &g, 0.1).unwrap();
        steps += 1;
    }
}

#[test]
fn adam_first_step_moves_by_alpha() {
    // bias correction makes the first update exactly alpha * sign(g)
    let mut x = vec![1.0, -2.0, 3.0];
    let mut adam = Adam::new(3);
    adam.step(&mut x, &[0.5, -7.0, 1e-3], 0.01).unwrap();
    let expected = [0.99, -1.99, 2.99];
    for (a, b) in x.iter().zip(expected) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut x = vec![1.0];
    assert!(Adam::new(1).step(&mut x, &[f64::NAN], 0.1).is_err());
    assert_eq!(x, vec![1.0]);
}

#[test]
fn lbfgs_solves_rosenbrock() {
    let mut x = vec![-1.2, 1.0];
    let iters = minimize(&mut x, rosenbrock, 200, |f, _| f < 1e-8);
    assert!(iters <= 200, "did not reach 1e-8, x = {x:?}");
}

#[test]
fn lbfgs_solves_spd_quadratic() {
    let n = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // A = M^T M + I
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
        }
    }
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
        let f = 0.5 * x.iter().zip(&ax).map(|(u, v)| u * v).sum::<f64>() - x.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>();
        Ok((f, ax.iter().zip(&b).map(|(u, v)| u - v).collect()))
    };
    let mut x = vec![0.0; n];
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let iters = minimize(&mut x, eval, 30, |_, g| norm(g) < 1e-8);
    assert!(iters <= 30, "gradient still large at x = {x:?}");
}

#[test]
fn lbfgs_rejects_step_when_nothing_decreases() {
    // a loss that reports NaN everywhere except the start point
    let mut opt = Lbfgs::new(5);
    let mut x = vec![1.0];
    let step = opt
        .step(&mut x, 1.0, &[2.0], 1.0, |_| Ok((f64::NAN, vec![f64::NAN])))
        .unwrap();
    assert!(!step.accepted);
    assert_eq!(x, vec![1.0]);
    assert_eq!(opt.stored_pairs(), 0);
}
