use serde::{Deserialize, Serialize};

use super::{Result, SimError};

/// Triangular fundamental diagram, per lane.
///
/// Densities are veh/km/lane, flows veh/h/lane, speeds km/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FundamentalDiagram {
    pub free_speed: f64,
    pub critical_density: f64,
    pub jam_density: f64,
}

impl Default for FundamentalDiagram {
    fn default() -> Self {
        Self {
            free_speed: 120.0,
            critical_density: 15.0,
            jam_density: 115.0,
        }
    }
}

impl FundamentalDiagram {
    pub fn validate(&self) -> Result<()> {
        let ok = self.free_speed > 0.0
            && self.critical_density > 0.0
            && self.jam_density > self.critical_density
            && [self.free_speed, self.critical_density, self.jam_density]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SimError::Invalid(format!("inconsistent fundamental diagram {self:?}")))
        }
    }

    /// Capacity in veh/h/lane.
    pub fn capacity(&self) -> f64 {
        self.free_speed * self.critical_density
    }

    /// Backward wave speed of the congested branch, km/h.
    pub fn wave_speed(&self) -> f64 {
        self.capacity() / (self.jam_density - self.critical_density)
    }

    /// Equilibrium flow `Q(ρ)`.
    pub fn flux(&self, rho: f64) -> f64 {
        self.demand(rho).min(self.supply(rho))
    }

    /// Sending function: `min(v_f ρ, capacity)`.
    pub fn demand(&self, rho: f64) -> f64 {
        (self.free_speed * rho).min(self.capacity())
    }

    /// Receiving function: `min(capacity, w (ρ_jam − ρ))`.
    pub fn supply(&self, rho: f64) -> f64 {
        self.capacity().min(self.wave_speed() * (self.jam_density - rho)).max(0.0)
    }

    /// Equilibrium speed; free speed on an empty road.
    pub fn speed(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            self.free_speed
        } else {
            self.flux(rho) / rho
        }
    }

    /// Congested-branch density carrying flow `q`.
    pub fn congested_density(&self, q: f64) -> f64 {
        self.jam_density - q / self.wave_speed()
    }

    /// Rankine–Hugoniot speed (km/h) of a discontinuity between `left` and `right`.
    pub fn shock_speed(&self, left: f64, right: f64) -> f64 {
        (self.flux(left) - self.flux(right)) / (left - right)
    }
}
