use dipole_core::nn_core::{ParamKind, ParamStore};
use dipole_core::train_eval::Adadelta;
use dipole_core::Tensor;

/// Runs the optimizer on x^2 from x = 5; returns the whole trajectory.
fn trajectory(eps: f64, steps: usize) -> Vec<f64> {
    let mut store = ParamStore::new();
    let id = store.insert("x", ParamKind::Weight, Tensor::vector(vec![5.0])).unwrap();
    let mut opt = Adadelta::new(&store, 0.95, eps);
    let mut path = vec![5.0];
    for _ in 0..steps {
        let x = store.get(id).data()[0];
        let mut grads = store.zero_grads();
        grads.get_mut(id).data_mut()[0] = 2.0 * x;
        opt.step(&mut store, &grads);
        path.push(store.get(id).data()[0]);
    }
    path
}

/// Scalar recurrence written out directly.
fn reference(eps: f64, steps: usize) -> Vec<f64> {
    let (rho, mut x, mut eg, mut ed) = (0.95, 5.0f64, 0.0f64, 0.0f64);
    let mut path = vec![x];
    for _ in 0..steps {
        let g = 2.0 * x;
        eg = rho * eg + (1.0 - rho) * g * g;
        let dx = -((ed + eps).sqrt() / (eg + eps).sqrt()) * g;
        ed = rho * ed + (1.0 - rho) * dx * dx;
        x += dx;
        path.push(x);
    }
    path
}

fn first_below(path: &[f64], bound: f64) -> Option<usize> {
    path.iter().position(|x| x.abs() < bound)
}

#[test]
fn quadratic_trajectory_matches_the_scalar_recurrence() {
    for eps in [1e-6, 1e-4] {
        let (got, want) = (trajectory(eps, 2000), reference(eps, 2000));
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "eps {eps}: {a} vs {b}");
        }
    }
}

#[test]
fn quadratic_convergence_speed() {
    // The small default epsilon makes early steps tiny: about 1e-3 * |g| / sqrt(E[g^2]).
    let slow = trajectory(1e-6, 2000);
    assert!(slow[200].abs() > 4.0);
    let n = first_below(&slow, 0.5).expect("converges eventually");
    assert!((1000..1200).contains(&n), "{n} steps");
    let fast = trajectory(1e-4, 200);
    assert!(first_below(&fast, 0.5).is_some());
}

#[test]
fn first_steps_match_the_closed_form() {
    // E[g^2] = (1 - rho) g^2, dx = -sqrt(eps) / sqrt(E[g^2] + eps) * g
    let (rho, eps) = (0.95f64, 1e-6f64);
    let g = 10.0f64;
    let eg = (1.0 - rho) * g * g;
    let dx = -(eps.sqrt() / (eg + eps).sqrt()) * g;
    let path = trajectory(1e-6, 1);
    assert!((path[1] - (5.0 + dx)).abs() < 1e-15);
}
