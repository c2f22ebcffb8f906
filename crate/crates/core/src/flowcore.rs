//! Flow-matching kinematics on the linear path between data (`t = 0`) and
//! noise (`t = 1`), and a fixed-grid sampler that integrates from noise to data.

use crate::error::{check_same_len, Error, Result};
use crate::rng::RngStream;
use crate::schedule::{ConditionContext, Provenance};

/// One point on the interpolation path with all five quantities populated.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
    pub v: Vec<f64>,
}

impl SamplePoint {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        let v = target_velocity(&x0, &x1)?;
        Ok(Self { x0, x1, t, xt, v })
    }
}

/// Anything that produces a velocity at `(x_t, t, c)`.
pub trait VelocityModel {
    fn dim(&self) -> usize;
    fn velocity(&self, xt: &[f64], t: f64, cond: &ConditionContext) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(t_i, x_i)` with `t` running 1 -> 0.
    pub states: Vec<(f64, Vec<f64>)>,
    pub conditions_used: Vec<Provenance>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        &self.states.last().expect("trajectory has at least one state").1
    }

    pub fn steps(&self) -> usize {
        self.conditions_used.len()
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_same_len("interpolate", x0.len(), x1.len())?;
    check_t(t)?;
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect())
}

/// `x1 - x0`.
pub fn target_velocity(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_same_len("target_velocity", x0.len(), x1.len())?;
    Ok(x0.iter().zip(x1).map(|(&a, &b)| b - a).collect())
}

/// `x_t - t v`, the data point implied by velocity `v` at `(x_t, t)`.
pub fn predict_x0(xt: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_same_len("predict_x0", xt.len(), v.len())?;
    check_t(t)?;
    Ok(xt.iter().zip(v).map(|(&x, &vi)| x - t * vi).collect())
}

/// Uniform grid `1 = t_0 > t_1 > ... > t_steps = 0`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| (steps - i) as f64 / steps as f64)
        .collect()
}

/// Integrate from `x1` at `t = 1` down to `t = 0` with first-order steps.
///
/// With `noise_scale > 0` each step adds `noise_scale * sqrt(dt) * N(0, I)`
/// (Euler-Maruyama with additive noise). `cond_fn(step, t)` supplies the
/// condition used for the step starting at `t`.
pub fn sample_trajectory<M, F>(
    model: &M,
    x1: &[f64],
    mut cond_fn: F,
    steps: usize,
    noise_scale: f64,
    rng: &mut RngStream,
) -> Result<Trajectory>
where
    M: VelocityModel + ?Sized,
    F: FnMut(usize, f64) -> Result<ConditionContext>,
{
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::invalid(format!("noise_scale must be finite and >= 0, got {noise_scale}")));
    }
    check_same_len("sample_trajectory", x1.len(), model.dim())?;

    let grid = time_grid(steps);
    let mut states = Vec::with_capacity(steps + 1);
    let mut conditions_used = Vec::with_capacity(steps);
    let mut x = x1.to_vec();
    states.push((grid[0], x.clone()));

    for step in 0..steps {
        let t = grid[step];
        let dt = t - grid[step + 1];
        let cond = cond_fn(step, t)?;
        let v = model.velocity(&x, t, &cond)?;
        if let Some(bad) = v.iter().position(|vi| !vi.is_finite()) {
            return Err(Error::numeric(
                "sample_trajectory",
                step,
                format!("velocity component {bad} is not finite"),
            ));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
        if noise_scale > 0.0 {
            let amp = noise_scale * dt.sqrt();
            for xi in x.iter_mut() {
                *xi += amp * rng.normal();
            }
        }
        conditions_used.push(cond.provenance);
        states.push((grid[step + 1], x.clone()));
    }

    Ok(Trajectory {
        states,
        conditions_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Constant(Vec<f64>);

    impl VelocityModel for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, _: &[f64], _: f64, _: &ConditionContext) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    /// v(x, t) = a x + b (independent of t)
    struct Linear {
        a: f64,
        b: f64,
    }

    impl VelocityModel for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn velocity(&self, x: &[f64], _: f64, _: &ConditionContext) -> Result<Vec<f64>> {
            Ok(vec![self.a * x[0] + self.b])
        }
    }

    struct Blowup;

    impl VelocityModel for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn velocity(&self, _: &[f64], t: f64, _: &ConditionContext) -> Result<Vec<f64>> {
            Ok(vec![if t < 0.55 { f64::NAN } else { 1.0 }])
        }
    }

    fn anchor(_: usize, _: f64) -> Result<ConditionContext> {
        Ok(ConditionContext::original(vec![]))
    }

    #[test]
    fn interpolate_examples() {
        assert_eq!(interpolate(&[0.0], &[1.0], 0.0).unwrap(), vec![0.0]);
        assert_eq!(interpolate(&[0.0], &[1.0], 1.0).unwrap(), vec![1.0]);
        assert_eq!(interpolate(&[2.0, -2.0], &[0.0, 0.0], 0.5).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(interpolate(&[0.0], &[1.0, 2.0], 0.5), Err(Error::InvalidArgument(_))));
        assert!(interpolate(&[0.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn target_velocity_examples() {
        assert_eq!(target_velocity(&[1.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(target_velocity(&[0.0, 0.0], &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(target_velocity(&[2.0], &[5.0]).unwrap(), vec![3.0]);
        assert!(target_velocity(&[2.0], &[]).is_err());
    }

    #[test]
    fn predict_x0_examples() {
        assert_eq!(predict_x0(&[0.5], 0.5, &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(predict_x0(&[7.0], 0.0, &[99.0]).unwrap(), vec![7.0]);
        assert!(predict_x0(&[7.0, 1.0], 0.0, &[99.0]).is_err());
    }

    #[test]
    fn sample_point_invariants() {
        let p = SamplePoint::new(vec![1.0, -2.0], vec![0.5, 0.5], 0.25).unwrap();
        assert_eq!(p.xt, vec![0.875, -1.375]);
        assert_eq!(p.v, vec![-0.5, 2.5]);
        assert_eq!(SamplePoint::new(vec![3.0], vec![9.0], 0.0).unwrap().xt, vec![3.0]);
        assert_eq!(SamplePoint::new(vec![3.0], vec![9.0], 1.0).unwrap().xt, vec![9.0]);
    }

    #[test]
    fn constant_field_single_step_and_many_steps() {
        let mut rng = RngStream::from_seed(0);
        let traj = sample_trajectory(&Constant(vec![1.0]), &[1.0], anchor, 1, 0.0, &mut rng).unwrap();
        assert_eq!(traj.final_state(), &[0.0]);
        let traj = sample_trajectory(&Constant(vec![1.0]), &[1.0], anchor, 10, 0.0, &mut rng).unwrap();
        assert!(traj.final_state()[0].abs() < 1e-12);
        assert_eq!(traj.steps(), 10);
    }

    #[test]
    fn grid_is_strictly_decreasing_from_one_to_zero() {
        for steps in [1, 3, 10, 40] {
            let g = time_grid(steps);
            assert_eq!(g[0], 1.0);
            assert_eq!(*g.last().unwrap(), 0.0);
            assert!(g.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let model = Linear { a: 0.3, b: -0.2 };
        for noise in [0.0, 0.5] {
            let a = sample_trajectory(&model, &[0.7], anchor, 16, noise, &mut RngStream::from_seed(9)).unwrap();
            let b = sample_trajectory(&model, &[0.7], anchor, 16, noise, &mut RngStream::from_seed(9)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn noise_changes_the_endpoint() {
        let model = Constant(vec![1.0]);
        let traj = sample_trajectory(&model, &[1.0], anchor, 10, 1.0, &mut RngStream::from_seed(3)).unwrap();
        assert!(traj.final_state()[0].abs() > 1e-6);
    }

    #[test]
    fn non_finite_velocity_reports_step() {
        let err = sample_trajectory(&Blowup, &[0.0], anchor, 10, 0.0, &mut RngStream::from_seed(0)).unwrap_err();
        match err {
            Error::NumericalFailure { index, .. } => assert_eq!(index, 5),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(sample_trajectory(&Constant(vec![1.0]), &[1.0], anchor, 0, 0.0, &mut RngStream::from_seed(0)).is_err());
    }

    #[test]
    fn euler_error_shrinks_with_refinement_on_linear_field() {
        // dx/dt = a x + b integrated backwards from t = 1 to t = 0.
        let (a, b, x1): (f64, f64, f64) = (1.3, 0.4, 0.9);
        let exact = {
            let c = x1 + b / a;
            c * (-a).exp() - b / a
        };
        let model = Linear { a, b };
        let mut prev = f64::INFINITY;
        for steps in [2, 4, 8, 16, 32, 64] {
            let traj = sample_trajectory(&model, &[x1], anchor, steps, 0.0, &mut RngStream::from_seed(0)).unwrap();
            let err = (traj.final_state()[0] - exact).abs();
            assert!(err < prev, "steps={steps} err={err} prev={prev}");
            prev = err;
        }
    }

    proptest! {
        #[test]
        fn round_trip_recovers_x0(
            x0 in prop::collection::vec(-10.0f64..10.0, 1..6),
            seed in 0u64..1000,
            t in 0.0f64..=1.0,
        ) {
            let mut r = RngStream::from_seed(seed);
            let x1 = r.normal_vec(x0.len());
            let xt = interpolate(&x0, &x1, t).unwrap();
            let v = target_velocity(&x0, &x1).unwrap();
            let back = predict_x0(&xt, t, &v).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }
}
