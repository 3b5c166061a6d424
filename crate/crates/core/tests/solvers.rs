//! ODE solvers on problems with known solutions.

use flowcast_core::ode::{integrate, Method, SolverConfig};
use flowcast_core::tensor::Tensor;

/// Rotation `dz/dt = (−z₁, z₀)` scaled to a full turn over unit time.
fn rotation(z: &Tensor, _t: f64) -> flowcast_core::Result<Tensor> {
    let w = 2.0 * std::f64::consts::PI;
    Tensor::new([2], vec![-w * z.data()[1], w * z.data()[0]])
}

fn error(method: Method, steps: usize) -> f64 {
    let z0 = Tensor::new([2], vec![1.0, 0.0]).unwrap();
    let r = integrate(rotation, &z0, &SolverConfig::fixed(method, steps)).unwrap();
    ((r.z.data()[0] - 1.0).powi(2) + r.z.data()[1].powi(2)).sqrt()
}

#[test]
fn fixed_step_orders_on_a_rotation() {
    for (method, order) in [(Method::Euler, 1), (Method::Midpoint, 2), (Method::Rk4, 4)] {
        let ratio = error(method, 200) / error(method, 400);
        let observed = ratio.log2();
        assert!((observed - order as f64).abs() < 0.2, "{method}: {observed}");
    }
}

#[test]
fn adaptive_solvers_meet_tolerance_on_a_rotation() {
    // Heun's embedded estimate is first order, so it gets a looser tolerance.
    for (method, rtol, bound) in [(Method::Dopri5, 1e-7, 1e-4), (Method::AdaptiveHeun, 1e-5, 1e-2)] {
        let cfg = SolverConfig { rtol, atol: rtol * 1e-2, ..SolverConfig::adaptive(method) };
        let z0 = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let r = integrate(rotation, &z0, &cfg).unwrap();
        let err = ((r.z.data()[0] - 1.0).powi(2) + r.z.data()[1].powi(2)).sqrt();
        assert!(err < bound, "{method}: {err}");
        assert!(r.accepted > 0);
    }
}

#[test]
fn time_dependent_field_is_evaluated_at_stage_times() {
    // dz/dt = 3t² integrates to exactly t³ for rk4 and dopri5.
    let z0 = Tensor::new([1], vec![0.0]).unwrap();
    let f = |_: &Tensor, t: f64| Tensor::new([1], vec![3.0 * t * t]);
    for cfg in [SolverConfig::fixed(Method::Rk4, 3), SolverConfig::adaptive(Method::Dopri5)] {
        let r = integrate(f, &z0, &cfg).unwrap();
        assert!((r.z.item() - 1.0).abs() < 1e-12, "{}", r.z.item());
    }
}
