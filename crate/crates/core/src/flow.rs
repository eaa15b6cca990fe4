//! Masked rectified-flow completion.
//!
//! Time is normalized: step `k` of `T` sits at `t_k = k / T`, so `t = 1` is
//! pure noise and `t = 0` is clean data. The forward-noise operator is
//!
//! ```text
//! forward_step(x, t) = (1 - t) x + (sigma_min + (1 - sigma_min) t) eps
//! ```
//!
//! and completion follows the repaint scheme: at every step the unknown part
//! takes an Euler step along the flow field, the known part is re-noised to
//! the new time level and merged back through the mask, and the merged state
//! is optionally pushed forward one step again and resampled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::Voxel;
use crate::protocol::AdapterError;
use crate::rng::NoiseSource;
use crate::tiler::CropRect;

/// Denominators below this are treated as a division by zero.
const MIN_NOISE_SCALE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("noise scale {scale:e} at t={t} is too small to invert")]
    DivisionNearZero { t: f64, scale: f64 },
    #[error("field returned shape {got:?} for input shape {expected:?}")]
    ShapeClosure {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("field returned a non-finite value")]
    NonFinite,
    #[error("field target has shape {target:?}, input has {input:?}")]
    TargetShape {
        target: Vec<usize>,
        input: Vec<usize>,
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("invalid step: t={t}, dt={dt}")]
    InvalidStep { t: f64, dt: f64 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("tensor shape {shape:?} does not match {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("tensor holds a non-finite value at {0}")]
    NonFinite(usize),
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Sampler settings. Defaults: 50 steps, 2 resamples, guidance 7.5 / 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub steps: u32,
    pub resamples: u32,
    pub sigma_min: f64,
    pub guidance_structure: f32,
    pub guidance_latent: f32,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            resamples: 2,
            sigma_min: 0.0,
            guidance_structure: 7.5,
            guidance_latent: 5.0,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.resamples == 0 {
            return Err(FlowError::InvalidConfig("resamples must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(FlowError::InvalidConfig(format!(
                "sigma_min {} outside [0, 1)",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl FlowTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, FlowError> {
        if shape.iter().product::<usize>() != values.len()
            || shape.contains(&0) && !values.is_empty()
        {
            return Err(FlowError::BadTensor {
                len: values.len(),
                shape,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite(i));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs_diff(&self, other: &FlowTensor) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// One flag per tensor element: `true` regenerates, `false` preserves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegenMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl RegenMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self, FlowError> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(FlowError::BadTensor {
                len: bits.len(),
                shape,
            });
        }
        Ok(Self { shape, bits })
    }

    pub fn all(shape: Vec<usize>, regenerate: bool) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            bits: vec![regenerate; n],
        }
    }

    /// Expands a per-row mask over `channels` columns.
    pub fn from_rows(rows: &[bool], channels: usize) -> Self {
        let bits = rows
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, channels))
            .collect();
        Self {
            shape: vec![rows.len(), channels],
            bits,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_regenerate(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Structure,
    Latent,
}

/// Conditioning passed through to a flow field, untouched by the sampler.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Condition {
    pub stage: Stage,
    /// Classifier-free guidance scale, applied by the field implementation.
    pub guidance: f32,
    /// Region origin in scene voxels.
    pub origin: [u32; 3],
    pub region_shape: [u32; 3],
    pub crop: Option<CropRect>,
    /// Region-local voxel of each feature row (latent stage only).
    pub rows: Vec<Voxel>,
    /// Handle returned by the adapter's image encoder, if any.
    pub condition_id: Option<String>,
}

/// A velocity field `v(x, t | condition)`.
///
/// Implementations must return a tensor of the input's shape and be
/// deterministic in `(x, t, condition)`.
pub trait FlowField {
    fn evaluate(
        &self,
        x: &FlowTensor,
        t: f64,
        condition: &Condition,
    ) -> Result<FlowTensor, FieldError>;
}

impl<F: FlowField + ?Sized> FlowField for &F {
    fn evaluate(
        &self,
        x: &FlowTensor,
        t: f64,
        condition: &Condition,
    ) -> Result<FlowTensor, FieldError> {
        (**self).evaluate(x, t, condition)
    }
}

impl<F: FlowField + ?Sized> FlowField for Box<F> {
    fn evaluate(
        &self,
        x: &FlowTensor,
        t: f64,
        condition: &Condition,
    ) -> Result<FlowTensor, FieldError> {
        (**self).evaluate(x, t, condition)
    }
}

/// `(1 - t, sigma_min + (1 - sigma_min) t)`, written so both endpoints are exact.
fn noise_coefficients(t: f64, sigma_min: f64) -> (f64, f64) {
    (1.0 - t, 1.0 - (1.0 - sigma_min) * (1.0 - t))
}

/// Scalar reference for [`blend_slices`].
#[cfg(test)]
fn blend(a: f64, x: f32, b: f64, eps: f32) -> f32 {
    if b == 0.0 {
        (a * x as f64) as f32
    } else if a == 0.0 {
        (b * eps as f64) as f32
    } else {
        (a * x as f64 + b * eps as f64) as f32
    }
}

#[inline(always)]
fn blend_kernel<F: Fn(f32, f32) -> f32>(
    x: &[f32],
    eps: &[f32],
    select: Option<&[bool]>,
    out: &mut [f32],
    f: F,
) {
    match select {
        None => {
            for ((o, &xv), &e) in out.iter_mut().zip(x).zip(eps) {
                *o = f(xv, e);
            }
        }
        Some(sel) => {
            for (((o, &xv), &e), &keep) in out.iter_mut().zip(x).zip(eps).zip(sel) {
                let v = f(xv, e);
                *o = if keep { v } else { *o };
            }
        }
    }
}

/// `out[i] = blend(a, x[i], b, eps[i])`, only where `select[i]` if given.
/// Same values as [`blend`], with the coefficient cases split outside the loop.
fn blend_slices(a: f64, x: &[f32], b: f64, eps: &[f32], select: Option<&[bool]>, out: &mut [f32]) {
    if b == 0.0 {
        blend_kernel(x, eps, select, out, |xv, _| (a * xv as f64) as f32)
    } else if a == 0.0 {
        blend_kernel(x, eps, select, out, |_, e| (b * e as f64) as f32)
    } else {
        blend_kernel(x, eps, select, out, |xv, e| {
            (a * xv as f64 + b * e as f64) as f32
        })
    }
}

/// Forward-noise operator.
pub fn forward_step(
    x: &FlowTensor,
    t: f64,
    sigma_min: f64,
    noise: &mut dyn NoiseSource,
) -> Result<FlowTensor, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    let (a, b) = noise_coefficients(t, sigma_min);
    let mut eps = vec![0.0f32; x.len()];
    noise.fill_normal(&mut eps);
    let mut values = vec![0.0f32; x.len()];
    blend_slices(a, &x.values, b, &eps, None, &mut values);
    Ok(FlowTensor {
        shape: x.shape.clone(),
        values,
    })
}

fn check_closure(x: &FlowTensor, v: &FlowTensor) -> Result<(), FieldError> {
    if v.shape != x.shape || v.values.len() != x.values.len() {
        return Err(FieldError::ShapeClosure {
            expected: x.shape.clone(),
            got: v.shape.clone(),
        });
    }
    if v.values.iter().any(|f| !f.is_finite()) {
        return Err(FieldError::NonFinite);
    }
    Ok(())
}

/// `x - dt * v(x, t)`.
pub fn euler_step(
    x: &FlowTensor,
    t: f64,
    dt: f64,
    field: &dyn FlowField,
    condition: &Condition,
) -> Result<FlowTensor, FlowError> {
    if !(t > 0.0 && t <= 1.0) || !(dt > 0.0 && dt <= t) {
        return Err(FlowError::InvalidStep { t, dt });
    }
    let v = field.evaluate(x, t, condition)?;
    check_closure(x, &v)?;
    let values = x
        .values
        .iter()
        .zip(&v.values)
        .map(|(&xv, &vv)| (xv as f64 - dt * vv as f64) as f32)
        .collect();
    Ok(FlowTensor {
        shape: x.shape.clone(),
        values,
    })
}

/// Velocity that transports any state at time `t` straight to `target`.
///
/// Along `x_t = (1-t) x0 + (sigma_min + (1-sigma_min) t) eps` the velocity is
/// `-x0 + (1-sigma_min) eps`; the noise is recovered from `x` itself, so every
/// state lies on some straight line into the target and Euler steps are exact.
pub fn oracle_velocity(
    x: &[f32],
    target: &[f32],
    t: f64,
    sigma_min: f64,
    out: &mut [f32],
) -> Result<(), FieldError> {
    let (a, scale) = noise_coefficients(t, sigma_min);
    if scale.abs() < MIN_NOISE_SCALE {
        return Err(FieldError::DivisionNearZero { t, scale });
    }
    for ((o, &xv), &x0) in out.iter_mut().zip(x).zip(target) {
        let eps = (xv as f64 - a * x0 as f64) / scale;
        *o = (-(x0 as f64) + (1.0 - sigma_min) * eps) as f32;
    }
    Ok(())
}

/// Flow field whose exact solution ends at a fixed target tensor.
#[derive(Debug, Clone)]
pub struct OracleField {
    target: FlowTensor,
    sigma_min: f64,
}

impl OracleField {
    pub fn new(target: FlowTensor, sigma_min: f64) -> Self {
        Self { target, sigma_min }
    }

    pub fn target(&self) -> &FlowTensor {
        &self.target
    }
}

pub fn oracle_field(target: FlowTensor, sigma_min: f64) -> OracleField {
    OracleField::new(target, sigma_min)
}

impl FlowField for OracleField {
    fn evaluate(
        &self,
        x: &FlowTensor,
        t: f64,
        _condition: &Condition,
    ) -> Result<FlowTensor, FieldError> {
        if x.shape != self.target.shape {
            return Err(FieldError::TargetShape {
                target: self.target.shape.clone(),
                input: x.shape.clone(),
            });
        }
        let mut out = vec![0.0; x.len()];
        oracle_velocity(&x.values, &self.target.values, t, self.sigma_min, &mut out)?;
        Ok(FlowTensor {
            shape: x.shape.clone(),
            values: out,
        })
    }
}

/// I.i.d. standard normal tensor drawn from `noise`.
pub fn gaussian_tensor(shape: Vec<usize>, noise: &mut dyn NoiseSource) -> FlowTensor {
    let mut t = FlowTensor::zeros(shape);
    noise.fill_normal(&mut t.values);
    t
}

/// Regenerates the masked part of `x_known` with `field`, preserving the rest.
///
/// At the final step (`k = 1`) the resample loop runs once: no re-noise is
/// possible there, and further passes would step past `t = 0`.
pub fn masked_complete(
    x_known: &FlowTensor,
    mask: &RegenMask,
    field: &dyn FlowField,
    condition: &Condition,
    cfg: &FlowConfig,
    noise: &mut dyn NoiseSource,
) -> Result<FlowTensor, FlowError> {
    cfg.validate()?;
    if x_known.shape != mask.shape {
        return Err(FlowError::ShapeMismatch {
            left: x_known.shape.clone(),
            right: mask.shape.clone(),
        });
    }
    let n = x_known.len();
    let steps = cfg.steps;
    let sigma_min = cfg.sigma_min;
    let preserve: Vec<bool> = mask.bits.iter().map(|&b| !b).collect();
    let known = &x_known.values;

    let mut x = gaussian_tensor(x_known.shape.clone(), noise);
    let mut eps = vec![0.0f32; n];
    let mut scratch = vec![0.0f32; n];

    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let t_prev = (k - 1) as f64 / steps as f64;
        let dt = t - t_prev;
        let passes = if k > 1 { cfg.resamples } else { 1 };
        for pass in 1..=passes {
            let v = field.evaluate(&x, t, condition)?;
            check_closure(&x, &v)?;
            for ((xv, &vv), &regen) in x.values.iter_mut().zip(&v.values).zip(&mask.bits) {
                let stepped = (*xv as f64 - dt * vv as f64) as f32;
                *xv = if regen { stepped } else { *xv };
            }

            let (a, b) = noise_coefficients(t_prev, sigma_min);
            noise.fill_normal_selected(&mut eps, &preserve);
            blend_slices(a, known, b, &eps, Some(&preserve), &mut x.values);

            if pass < passes {
                let (a, b) = noise_coefficients(dt, sigma_min);
                noise.fill_normal(&mut eps);
                blend_slices(a, &x.values, b, &eps, None, &mut scratch);
                std::mem::swap(&mut x.values, &mut scratch);
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{ConstantNoise, PhiloxRng};

    struct Constant(f32);
    impl FlowField for Constant {
        fn evaluate(
            &self,
            x: &FlowTensor,
            _t: f64,
            _c: &Condition,
        ) -> Result<FlowTensor, FieldError> {
            Ok(FlowTensor::filled(x.shape.to_vec(), self.0))
        }
    }

    struct WrongShape;
    impl FlowField for WrongShape {
        fn evaluate(
            &self,
            _x: &FlowTensor,
            _t: f64,
            _c: &Condition,
        ) -> Result<FlowTensor, FieldError> {
            Ok(FlowTensor::zeros(vec![1]))
        }
    }

    fn tensor(values: &[f32]) -> FlowTensor {
        FlowTensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    fn random(shape: Vec<usize>, seed: u64) -> FlowTensor {
        gaussian_tensor(shape, &mut PhiloxRng::new(seed))
    }

    #[test]
    fn blend_slices_match_scalar_blend() {
        let x = [0.0, -0.0, 1.5, -2.25, f32::MIN_POSITIVE, 3.0e7];
        let eps = [0.5, -0.0, -1.0, 0.25, 2.0, -0.0];
        let select = [true, false, true, true, false, true];
        for (a, b) in [(1.0, 0.0), (0.0, 1.0), (0.3, 0.7), (0.98, 0.02)] {
            let mut all = [9.0f32; 6];
            blend_slices(a, &x, b, &eps, None, &mut all);
            let mut some = [9.0f32; 6];
            blend_slices(a, &x, b, &eps, Some(&select), &mut some);
            for i in 0..6 {
                let expected = blend(a, x[i], b, eps[i]);
                assert_eq!(all[i].to_bits(), expected.to_bits());
                let kept = if select[i] { expected } else { 9.0 };
                assert_eq!(some[i].to_bits(), kept.to_bits());
            }
        }
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = FlowConfig::default();
        assert_eq!((c.steps, c.resamples), (50, 2));
        assert_eq!((c.guidance_structure, c.guidance_latent), (7.5, 5.0));
        assert_eq!(c.sigma_min, 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            FlowConfig {
                steps: 0,
                ..Default::default()
            },
            FlowConfig {
                resamples: 0,
                ..Default::default()
            },
            FlowConfig {
                sigma_min: 1.0,
                ..Default::default()
            },
            FlowConfig {
                sigma_min: -0.1,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(FlowError::InvalidConfig(_))));
        }
    }

    #[test]
    fn forward_step_closed_forms() {
        let x = random(vec![7, 3], 1);
        let out = forward_step(&x, 0.0, 0.0, &mut PhiloxRng::new(2)).unwrap();
        assert_eq!(out, x);

        let mut eps = vec![0.0; 21];
        PhiloxRng::new(3).fill_normal(&mut eps);
        for sigma in [0.0, 0.1, 0.5] {
            let out = forward_step(&x, 1.0, sigma, &mut PhiloxRng::new(3)).unwrap();
            assert_eq!(out.values(), &eps[..]);
        }

        let out = forward_step(&tensor(&[2.0]), 0.5, 0.0, &mut ConstantNoise(1.0)).unwrap();
        assert_eq!(out.values(), &[1.5]);

        // eps = 0 leaves the deterministic interpolation toward zero
        let out = forward_step(&x, 0.3, 0.2, &mut ConstantNoise(0.0)).unwrap();
        for (o, v) in out.values().iter().zip(x.values()) {
            assert_eq!(*o, (0.7 * *v as f64) as f32);
        }

        assert!(matches!(
            forward_step(&x, 1.5, 0.0, &mut ConstantNoise(0.0)),
            Err(FlowError::TimeOutOfRange(_))
        ));
    }

    #[test]
    fn euler_step_examples() {
        let x = tensor(&[1.0, -2.0, 0.5]);
        let c = Condition::default();
        assert_eq!(euler_step(&x, 0.5, 0.1, &Constant(0.0), &c).unwrap(), x);
        let out = euler_step(&x, 0.5, 0.1, &Constant(2.0), &c).unwrap();
        for (o, v) in out.values().iter().zip(x.values()) {
            assert_eq!(*o, (*v as f64 - 0.2) as f32);
        }
        assert!(matches!(
            euler_step(&x, 0.5, 0.6, &Constant(0.0), &c),
            Err(FlowError::InvalidStep { .. })
        ));
        assert!(matches!(
            euler_step(&x, 0.0, 0.0, &Constant(0.0), &c),
            Err(FlowError::InvalidStep { .. })
        ));
        assert!(matches!(
            euler_step(&x, 1.0, 0.1, &WrongShape, &c),
            Err(FlowError::Field(FieldError::ShapeClosure { .. }))
        ));
    }

    #[test]
    fn oracle_field_is_constant_on_trajectory() {
        let x0 = random(vec![64], 10);
        let eps = random(vec![64], 11);
        let field = oracle_field(x0.clone(), 0.0);
        for t in [0.1, 0.5, 1.0] {
            let xt: Vec<f32> = x0
                .values()
                .iter()
                .zip(eps.values())
                .map(|(&a, &e)| ((1.0 - t) * a as f64 + t * e as f64) as f32)
                .collect();
            let v = field
                .evaluate(&tensor(&xt), t, &Condition::default())
                .unwrap();
            for ((vv, a), e) in v.values().iter().zip(x0.values()).zip(eps.values()) {
                assert!((vv - (e - a)).abs() < 1e-5, "t={t}");
            }
        }
        // one Euler step from pure noise lands on the target
        let out = euler_step(&eps, 1.0, 1.0, &field, &Condition::default()).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn oracle_toward_zero_contracts() {
        let field = oracle_field(FlowTensor::zeros(vec![3]), 0.0);
        let x = tensor(&[1.0, -4.0, 2.5]);
        let v = field.evaluate(&x, 0.25, &Condition::default()).unwrap();
        assert_eq!(v.values(), &[4.0, -16.0, 10.0]);
        assert!(matches!(
            field.evaluate(&x, 0.0, &Condition::default()),
            Err(FieldError::DivisionNearZero { .. })
        ));
    }

    #[test]
    fn masked_complete_preserves_and_regenerates() {
        let shape = vec![40, 8];
        let known = random(shape.clone(), 20);
        let target = random(shape.clone(), 21);
        let bits: Vec<bool> = (0..320).map(|i| (i * 7) % 5 < 2).collect();
        let mask = RegenMask::new(shape.clone(), bits.clone()).unwrap();
        let cfg = FlowConfig {
            seed: 4,
            ..Default::default()
        };
        let field = oracle_field(target.clone(), 0.0);
        let out = masked_complete(
            &known,
            &mask,
            &field,
            &Condition::default(),
            &cfg,
            &mut PhiloxRng::new(4),
        )
        .unwrap();
        for i in 0..320 {
            if bits[i] {
                assert!((out.values()[i] - target.values()[i]).abs() <= 1e-4);
            } else {
                assert_eq!(out.values()[i].to_bits(), known.values()[i].to_bits());
            }
        }

        let none = RegenMask::all(shape.clone(), false);
        let out = masked_complete(
            &known,
            &none,
            &Constant(3.0),
            &Condition::default(),
            &cfg,
            &mut PhiloxRng::new(5),
        )
        .unwrap();
        assert_eq!(out, known);
    }

    #[test]
    fn masked_complete_rejects_mismatched_mask() {
        let known = FlowTensor::zeros(vec![4]);
        let mask = RegenMask::all(vec![5], true);
        let err = masked_complete(
            &known,
            &mask,
            &Constant(0.0),
            &Condition::default(),
            &FlowConfig::default(),
            &mut PhiloxRng::new(0),
        );
        assert!(matches!(err, Err(FlowError::ShapeMismatch { .. })));
    }

    #[test]
    fn masked_complete_is_seed_deterministic() {
        let known = random(vec![10, 4], 1);
        let mask = RegenMask::all(vec![10, 4], true);
        let cfg = FlowConfig {
            steps: 5,
            ..Default::default()
        };
        let run = |seed| {
            masked_complete(
                &known,
                &mask,
                &Constant(0.5),
                &Condition::default(),
                &cfg,
                &mut PhiloxRng::new(seed),
            )
            .unwrap()
        };
        assert_eq!(run(8), run(8));
        assert_ne!(run(8), run(9));
    }

    #[test]
    fn gaussian_moments() {
        let t = random(vec![1_000_000], 123);
        let n = t.len() as f64;
        let mean = t.values().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .values()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        assert_eq!(t, random(vec![1_000_000], 123));
        assert_ne!(t, random(vec![1_000_000], 124));
    }
}
