//! Kinematic bicycle model, integrated with explicit Euler steps.

use serde::{Deserialize, Serialize};

use crate::scene::wrap_angle;

/// Actuator and geometry limits of a passenger car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleLimits {
    pub wheelbase: f64,
    pub max_accel: f64,
    pub max_steer: f64,
    pub max_speed: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_accel: 3.0,
            max_steer: 0.6,
            max_speed: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub accel: f64,
    pub steer: f64,
}

impl ControlCommand {
    pub const ZERO: ControlCommand = ControlCommand { accel: 0.0, steer: 0.0 };

    pub fn clamped(self, limits: &VehicleLimits) -> Self {
        Self {
            accel: self.accel.clamp(-limits.max_accel, limits.max_accel),
            steer: self.steer.clamp(-limits.max_steer, limits.max_steer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicVehicle {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub wheelbase: f64,
}

impl DynamicVehicle {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, wheelbase: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            v,
            wheelbase,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// One Euler step. Position and heading use the speed at the start of
    /// the step; speed is clamped to `[0, max_speed]` afterwards.
    pub fn step(&self, u: ControlCommand, dt: f64, max_speed: f64) -> DynamicVehicle {
        let (s, c) = self.theta.sin_cos();
        DynamicVehicle {
            x: self.x + self.v * c * dt,
            y: self.y + self.v * s * dt,
            theta: wrap_angle(self.theta + self.v * u.steer.tan() / self.wheelbase * dt),
            v: (self.v + u.accel * dt).clamp(0.0, max_speed),
            wheelbase: self.wheelbase,
        }
    }
}

pub fn step_bicycle(s: &DynamicVehicle, u: ControlCommand, dt: f64, limits: &VehicleLimits) -> DynamicVehicle {
    s.step(u, dt, limits.max_speed)
}
