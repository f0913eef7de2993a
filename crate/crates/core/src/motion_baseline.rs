//! Constant-velocity 3D Kalman filter over
//! `(x, y, z, yaw, w, l, h, vx, vy, vz)` with `(x, y, z, yaw, w, l, h)`
//! observed.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::Box3D;
use crate::geometry::{wrap_angle, Vec3};

pub type State = SVector<f64, 10>;
pub type Covariance = SMatrix<f64, 10, 10>;
type Obs = SVector<f64, 7>;
type ObsMatrix = SMatrix<f64, 7, 10>;

#[derive(Debug, Error, PartialEq)]
pub enum KalmanError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("innovation covariance is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    /// Process variance on the seven box states.
    pub q_state: f64,
    /// Process variance on the three velocities.
    pub q_velocity: f64,
    /// Observation variance on each observed component.
    pub r: f64,
    /// Initial variance on the box states.
    pub p0_state: f64,
    /// Initial variance on the velocities.
    pub p0_velocity: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            q_state: 1.0,
            q_velocity: 0.01,
            r: 1.0,
            p0_state: 10.0,
            p0_velocity: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrack {
    pub state: State,
    pub covariance: Covariance,
    pub config: KalmanConfig,
}

fn diag(box_part: f64, vel_part: f64) -> Covariance {
    let mut m = Covariance::zeros();
    for i in 0..10 {
        m[(i, i)] = if i < 7 { box_part } else { vel_part };
    }
    m
}

fn observation_matrix() -> ObsMatrix {
    let mut h = ObsMatrix::zeros();
    for i in 0..7 {
        h[(i, i)] = 1.0;
    }
    h
}

fn observe(b: &Box3D) -> Obs {
    Obs::from_column_slice(&[b.center[0], b.center[1], b.center[2], b.yaw, b.size[0], b.size[1], b.size[2]])
}

impl KalmanTrack {
    pub fn new(obs: &Box3D, config: KalmanConfig) -> Self {
        let mut state = State::zeros();
        state.fixed_rows_mut::<7>(0).copy_from(&observe(obs));
        Self {
            state,
            covariance: diag(config.p0_state, config.p0_velocity),
            config,
        }
    }

    pub fn location(&self) -> Vec3 {
        Vec3::new(self.state[0], self.state[1], self.state[2])
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::new(self.state[7], self.state[8], self.state[9])
    }

    pub fn as_box(&self) -> Box3D {
        Box3D::new(self.location(), [self.state[4], self.state[5], self.state[6]], self.state[3])
    }

    pub fn predict(&self, dt: f64) -> Result<Self, KalmanError> {
        if dt <= 0.0 || dt.is_nan() {
            return Err(KalmanError::NonPositiveDt(dt));
        }
        let mut f = Covariance::identity();
        for i in 0..3 {
            f[(i, i + 7)] = dt;
        }
        let mut state = f * self.state;
        state[3] = wrap_angle(state[3]);
        let q = diag(self.config.q_state, self.config.q_velocity);
        let covariance = f * self.covariance * f.transpose() + q;
        Ok(Self {
            state,
            covariance: symmetrize(covariance),
            config: self.config,
        })
    }

    /// Innovation, its covariance, and the Mahalanobis distance.
    fn innovation(&self, obs: &Box3D) -> Result<(Obs, SMatrix<f64, 7, 7>, f64), KalmanError> {
        let h = observation_matrix();
        let mut y = observe(obs) - h * self.state;
        y[3] = wrap_angle(y[3]);
        let s = h * self.covariance * h.transpose() + SMatrix::<f64, 7, 7>::identity() * self.config.r;
        let chol = s.cholesky().ok_or(KalmanError::NotPositiveDefinite)?;
        let d2 = y.dot(&chol.solve(&y));
        Ok((y, s, d2.max(0.0).sqrt()))
    }

    pub fn mahalanobis(&self, obs: &Box3D) -> Result<f64, KalmanError> {
        Ok(self.innovation(obs)?.2)
    }

    /// Kalman update; returns the new track and the Mahalanobis distance of
    /// the innovation.
    pub fn update(&self, obs: &Box3D) -> Result<(Self, f64), KalmanError> {
        let h = observation_matrix();
        let (y, s, d) = self.innovation(obs)?;
        let chol = s.cholesky().ok_or(KalmanError::NotPositiveDefinite)?;
        // K = P Hᵀ S⁻¹, solved as S Kᵀ = H P
        let k = chol.solve(&(h * self.covariance)).transpose();
        let mut state = self.state + k * y;
        state[3] = wrap_angle(state[3]);
        let ikh = Covariance::identity() - k * h;
        let r = SMatrix::<f64, 7, 7>::identity() * self.config.r;
        let covariance = ikh * self.covariance * ikh.transpose() + k * r * k.transpose();
        Ok((
            Self {
                state,
                covariance: symmetrize(covariance),
                config: self.config,
            },
            d,
        ))
    }
}

fn symmetrize(m: Covariance) -> Covariance {
    (m + m.transpose()) * 0.5
}
