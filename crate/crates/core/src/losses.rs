//! Reconstruction and gaze objectives, their weighted sum, and the angular
//! error metric.
//!
//! Angle convention: pitch is vertical (positive up), yaw horizontal, and
//! the camera looks along +z, so `(0, 0)` maps to `(0, 0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GazeAngles {
    /// Radians.
    pub pitch: f64,
    /// Radians.
    pub yaw: f64,
}

impl GazeAngles {
    pub fn new(pitch: f64, yaw: f64) -> Self {
        Self { pitch, yaw }
    }

    pub fn from_degrees(pitch: f64, yaw: f64) -> Self {
        Self::new(pitch.to_radians(), yaw.to_radians())
    }

    /// `(pitch, yaw)` in degrees.
    pub fn degrees(&self) -> (f64, f64) {
        (self.pitch.to_degrees(), self.yaw.to_degrees())
    }
}

/// `(cos p · sin y, sin p, cos p · cos y)`, a unit vector.
pub fn angles_to_vector(a: GazeAngles) -> [f64; 3] {
    let (sp, cp) = a.pitch.sin_cos();
    let (sy, cy) = a.yaw.sin_cos();
    [cp * sy, sp, cp * cy]
}

/// Inverse of [`angles_to_vector`] for any non-zero vector.
pub fn vector_to_angles(v: [f64; 3]) -> Result<GazeAngles> {
    let [x, y, z] = v;
    let horiz = (x * x + z * z).sqrt();
    if horiz == 0.0 && y == 0.0 {
        return Err(Error::Metric("zero-length gaze vector".into()));
    }
    Ok(GazeAngles::new(y.atan2(horiz), x.atan2(z)))
}

/// Angle between two gaze vectors in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(‖g × g*‖, g · g*)`, which is exactly zero for
/// parallel inputs and well conditioned near 0° and 180°.
pub fn angular_error(g: [f64; 3], g_true: [f64; 3]) -> Result<f64> {
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm(g) == 0.0 || norm(g_true) == 0.0 {
        return Err(Error::Metric(
            "angular error of a zero-length vector".into(),
        ));
    }
    let [a, b] = [g, g_true];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    Ok(norm(cross).atan2(dot).to_degrees().clamp(0.0, 180.0))
}

pub fn angular_error_angles(pred: GazeAngles, truth: GazeAngles) -> Result<f64> {
    angular_error(angles_to_vector(pred), angles_to_vector(truth))
}

/// Two-decimal degrees, as reported in result tables.
pub fn format_degrees(deg: f64) -> String {
    format!("{deg:.2}")
}

/// Mean over all elements of `(a − b)²`.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "mse: prediction {:?} vs target {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// `MSE(Î^l, I^l) + MSE(Î^r, I^r)`.
pub fn eye_recon_loss(
    tape: &mut Tape,
    recon_l: Var,
    recon_r: Var,
    eye_l: Var,
    eye_r: Var,
) -> Result<Var> {
    let l = mse(tape, recon_l, eye_l)?;
    let r = mse(tape, recon_r, eye_r)?;
    tape.add(l, r)
}

/// Sum of the top, middle and bottom region MSEs.
pub fn region_recon_loss(tape: &mut Tape, recons: [Var; 3], targets: [Var; 3]) -> Result<Var> {
    let mut total = mse(tape, recons[0], targets[0])?;
    for i in 1..3 {
        let m = mse(tape, recons[i], targets[i])?;
        total = tape.add(total, m)?;
    }
    Ok(total)
}

/// `(1/N) Σ_i (|Δpitch_i| + |Δyaw_i|)` for `[N, 2]` predictions and targets.
pub fn gaze_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 2 || tape.shape(truth) != shape.as_slice() {
        return Err(Error::dim(format!(
            "gaze_loss expects matching [N, 2] tensors, got {shape:?} and {:?}",
            tape.shape(truth)
        )));
    }
    let d = tape.sub(pred, truth)?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / shape[0] as f64))
}

/// Value-level form of [`gaze_loss`].
pub fn gaze_loss_value(pred: &[GazeAngles], truth: &[GazeAngles]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(format!(
            "gaze_loss over {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.pitch - t.pitch).abs() + (p.yaw - t.yaw).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// `Lg + λ_eye·L1 + λ_region·L2`.
pub fn total_loss(
    tape: &mut Tape,
    l1: Var,
    l2: Var,
    lg: Var,
    lambda_eye: f64,
    lambda_region: f64,
) -> Result<Var> {
    let a = tape.scale(l1, lambda_eye);
    let b = tape.scale(l2, lambda_region);
    let s = tape.add(lg, a)?;
    tape.add(s, b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub l2: f64,
    pub lg: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn vector_examples() {
        assert_eq!(angles_to_vector(GazeAngles::new(0.0, 0.0)), [0.0, 0.0, 1.0]);
        let pole = angles_to_vector(GazeAngles::new(FRAC_PI_2, 0.7));
        assert!(pole[0].abs() < 1e-15 && (pole[1] - 1.0).abs() < 1e-15 && pole[2].abs() < 1e-15);
    }

    #[test]
    fn angular_error_examples() {
        assert_eq!(
            angular_error([0.3, 0.2, 0.9], [0.3, 0.2, 0.9]).unwrap(),
            0.0
        );
        assert!((angular_error([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap() - 90.0).abs() < 1e-12);
        let s = 0.5f64.sqrt();
        assert!((angular_error([1.0, 0.0, 0.0], [s, s, 0.0]).unwrap() - 45.0).abs() < 1e-12);
        assert!(matches!(
            angular_error([0.0; 3], [1.0, 0.0, 0.0]),
            Err(Error::Metric(_))
        ));
        assert_eq!(format_degrees(3.7449), "3.74");
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let one = tape.constant(Tensor::ones(&[1, 3, 2, 2]));
        let l1 = eye_recon_loss(&mut tape, zero, zero, one, one).unwrap();
        assert_eq!(tape.value(l1).data(), &[2.0]);
        let perfect = eye_recon_loss(&mut tape, one, one, one, one).unwrap();
        assert_eq!(tape.value(perfect).data(), &[0.0]);
        let l2 = region_recon_loss(&mut tape, [one, zero, zero], [zero, zero, zero]).unwrap();
        assert_eq!(tape.value(l2).data(), &[1.0]);

        let p = tape.constant(Tensor::new(&[1, 2], vec![0.1, 0.2]).unwrap());
        let t = tape.constant(Tensor::zeros(&[1, 2]));
        let lg = gaze_loss(&mut tape, p, t).unwrap();
        assert!((tape.value(lg).data()[0] - 0.3).abs() < 1e-15);
        let v = gaze_loss_value(&[GazeAngles::new(0.1, 0.2)], &[GazeAngles::default()]).unwrap();
        assert!((v - 0.3).abs() < 1e-15);

        let unit = tape.constant(Tensor::scalar(1.0));
        let tot = total_loss(&mut tape, unit, unit, unit, 1.0, 1.0).unwrap();
        assert_eq!(tape.value(tot).data(), &[3.0]);
        let only_g = total_loss(&mut tape, unit, unit, lg, 0.0, 0.0).unwrap();
        assert_eq!(tape.value(only_g).data(), tape.value(lg).data());
    }

    #[test]
    fn total_loss_gradients_are_the_weights() {
        let mut tape = Tape::new();
        let l1 = tape.variable(Tensor::scalar(0.4));
        let l2 = tape.variable(Tensor::scalar(0.9));
        let lg = tape.variable(Tensor::scalar(0.2));
        let t = total_loss(&mut tape, l1, l2, lg, 0.25, 3.0).unwrap();
        let g = tape.backward(t).unwrap();
        assert_eq!(g.get(l1).unwrap(), &[0.25]);
        assert_eq!(g.get(l2).unwrap(), &[3.0]);
        assert_eq!(g.get(lg).unwrap(), &[1.0]);
    }
}
