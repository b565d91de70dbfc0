//! Rectified-flow objective and Euler sampler.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng;

pub const DEFAULT_SAMPLER_STEPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_SAMPLER_STEPS,
            seed: 0,
            scheme: Scheme::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("sampler.steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: ImageGrid,
    pub x1: ImageGrid,
    pub t: f64,
    pub xt: ImageGrid,
}

fn check_shapes(a: &ImageGrid, b: &ImageGrid, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − t)·x0 + t·x1`; exact at both endpoints.
pub fn sample_path(x0: &ImageGrid, x1: &ImageGrid, t: f64) -> Result<ImageGrid> {
    check_shapes(x0, x1, "path endpoints")?;
    check_time(t)?;
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let mut out = x0.values() * (1.0 - t);
    out.scaled_add(t, x1.values());
    Ok(ImageGrid::from_array(out))
}

pub fn flow_sample(x0: ImageGrid, x1: ImageGrid, t: f64) -> Result<FlowSample> {
    let xt = sample_path(&x0, &x1, t)?;
    Ok(FlowSample { x0, x1, t, xt })
}

/// Target velocity of the linear path.
pub fn target_velocity(x0: &ImageGrid, x1: &ImageGrid) -> Result<ImageGrid> {
    check_shapes(x0, x1, "path endpoints")?;
    Ok(ImageGrid::from_array(x1.values() - x0.values()))
}

/// Mean over elements of `(v_pred − (x1 − x0))²`.
pub fn fm_loss(v_pred: &ImageGrid, x0: &ImageGrid, x1: &ImageGrid) -> Result<f64> {
    check_shapes(v_pred, x0, "prediction vs x0")?;
    check_shapes(x0, x1, "path endpoints")?;
    let n = v_pred.as_slice().len();
    let sum: f64 = v_pred
        .as_slice()
        .iter()
        .zip(x0.as_slice())
        .zip(x1.as_slice())
        .map(|((v, a), b)| {
            let e = v - (b - a);
            e * e
        })
        .sum();
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// `fm_loss` together with its gradient with respect to `v_pred`.
pub fn fm_loss_grad(v_pred: &ImageGrid, x0: &ImageGrid, x1: &ImageGrid) -> Result<(f64, ImageGrid)> {
    let loss = fm_loss(v_pred, x0, x1)?;
    let n = v_pred.as_slice().len().max(1) as f64;
    let grad = (v_pred.values() - &(x1.values() - x0.values())) * (2.0 / n);
    Ok((loss, ImageGrid::from_array(grad)))
}

/// Standard-normal grid of the given shape, reproducible per seed.
pub fn draw_prior(shape: (usize, usize, usize), seed: u64) -> ImageGrid {
    let mut rng = rng::stream(seed, 0x9A10);
    let (h, w, c) = shape;
    ImageGrid::from_array(ndarray::Array3::from_shape_simple_fn((h, w, c), || {
        StandardNormal.sample(&mut rng)
    }))
}

/// Euler integration of `dx/dt = v(x, t)` from t = 0 to 1 on a uniform grid,
/// starting at `draw_prior(shape, cfg.seed)`.
pub fn sample_ode<F>(mut velocity: F, shape: (usize, usize, usize), cfg: &SamplerConfig) -> Result<ImageGrid>
where
    F: FnMut(&ImageGrid, f64) -> Result<ImageGrid>,
{
    cfg.validate()?;
    let x = draw_prior(shape, cfg.seed);
    integrate(&mut velocity, x, cfg.steps)
}

/// Euler integration from a given starting point.
pub fn integrate<F>(velocity: &mut F, mut x: ImageGrid, steps: usize) -> Result<ImageGrid>
where
    F: FnMut(&ImageGrid, f64) -> Result<ImageGrid>,
{
    if steps < 1 {
        return Err(Error::config("sampler.steps", "must be at least 1"));
    }
    let dt = 1.0 / steps as f64;
    for step in 0..steps {
        let t = step as f64 * dt;
        let v = velocity(&x, t).map_err(|e| Error::Integration {
            step,
            reason: e.to_string(),
        })?;
        if !v.same_shape(&x) {
            return Err(Error::Integration {
                step,
                reason: format!("velocity shape {:?} != state shape {:?}", v.dim(), x.dim()),
            });
        }
        if !v.is_finite() {
            return Err(Error::Integration {
                step,
                reason: "non-finite velocity".into(),
            });
        }
        x.values_mut().scaled_add(dt, v.values());
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: f64) -> ImageGrid {
        ImageGrid::filled(4, 4, 3, v)
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let x0 = draw_prior((4, 4, 3), 1);
        let x1 = draw_prior((4, 4, 3), 2);
        assert_eq!(sample_path(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(sample_path(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(sample_path(&grid(0.0), &grid(2.0), 0.5).unwrap(), grid(1.0));
        assert!(matches!(sample_path(&x0, &x1, 1.5), Err(Error::Domain(_))));
        assert!(matches!(
            sample_path(&x0, &ImageGrid::zeros(2, 2, 3), 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn loss_trivial_cases() {
        let x0 = draw_prior((4, 4, 3), 3);
        let x1 = grid(0.8);
        let exact = target_velocity(&x0, &x1).unwrap();
        assert_eq!(fm_loss(&exact, &x0, &x1).unwrap(), 0.0);
        let shifted = ImageGrid::from_array(exact.values() + 0.1);
        assert!((fm_loss(&shifted, &x0, &x1).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn prior_is_reproducible() {
        assert_eq!(draw_prior((3, 5, 2), 9), draw_prior((3, 5, 2), 9));
        assert_ne!(draw_prior((3, 5, 2), 9), draw_prior((3, 5, 2), 10));
    }

    #[test]
    fn zero_field_returns_start() {
        let cfg = SamplerConfig {
            steps: 7,
            ..SamplerConfig::default()
        };
        let out = sample_ode(
            |x, _| Ok(ImageGrid::zeros(x.height(), x.width(), x.channels())),
            (4, 4, 3),
            &cfg,
        )
        .unwrap();
        assert_eq!(out, draw_prior((4, 4, 3), cfg.seed));
    }

    #[test]
    fn wrong_velocity_shape_reports_step() {
        let cfg = SamplerConfig::default();
        let mut calls = 0;
        let err = sample_ode(
            |x, _| {
                calls += 1;
                if calls == 3 {
                    Ok(ImageGrid::zeros(1, 1, 1))
                } else {
                    Ok(x.clone())
                }
            },
            (4, 4, 3),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integration { step: 2, .. }));
    }
}
