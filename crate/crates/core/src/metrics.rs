//! Energy, cost, latency statistics and per-device queue telemetry.
//!
//! Utilization is piecewise constant between events, so the integrals
//! `E = ∫ p(u) dt` and `C = ∫ r·u·MIPS dt` are accumulated exactly segment by
//! segment with the linear power model `p(u) = idle + (busy - idle)·u`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;
use crate::topology::Device;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("clock moved backwards: {now} < {last}")]
    ClockRegression { now: SimTime, last: SimTime },
}

/// Linear power model.
pub fn power_watts(device: &Device, utilization: f64) -> f64 {
    device.power_idle_w + (device.power_busy_w - device.power_idle_w) * utilization
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnergyAccount {
    pub device_id: String,
    pub last_update: SimTime,
    pub last_utilization: f64,
    /// A device that is down draws nothing.
    pub last_powered: bool,
    pub total_joules: f64,
}

impl EnergyAccount {
    pub fn new(device_id: impl Into<String>, start: SimTime) -> Self {
        EnergyAccount {
            device_id: device_id.into(),
            last_update: start,
            last_utilization: 0.0,
            last_powered: true,
            total_joules: 0.0,
        }
    }
}

pub fn update_energy(
    account: &mut EnergyAccount,
    now: SimTime,
    new_utilization: f64,
    device: &Device,
) -> Result<(), MetricsError> {
    let dt = now
        .checked_sub(account.last_update)
        .ok_or(MetricsError::ClockRegression {
            now,
            last: account.last_update,
        })?;
    if account.last_powered {
        account.total_joules += power_watts(device, account.last_utilization) * dt.as_secs_f64();
    }
    account.last_utilization = new_utilization;
    account.last_powered = device.is_up();
    account.last_update = now;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostAccount {
    pub device_id: String,
    pub last_update: SimTime,
    pub last_utilization: f64,
    pub total_cost: f64,
}

impl CostAccount {
    pub fn new(device_id: impl Into<String>, start: SimTime) -> Self {
        CostAccount {
            device_id: device_id.into(),
            last_update: start,
            last_utilization: 0.0,
            total_cost: 0.0,
        }
    }
}

/// Accrues `ratePerMips · u · mips · Δt` for the segment ending at `now`,
/// where `u` is the utilization in force since the previous update.
pub fn update_cost(
    account: &mut CostAccount,
    now: SimTime,
    utilization: f64,
    device: &Device,
) -> Result<(), MetricsError> {
    let dt = now
        .checked_sub(account.last_update)
        .ok_or(MetricsError::ClockRegression {
            now,
            last: account.last_update,
        })?;
    account.total_cost +=
        device.rate_per_mips * account.last_utilization * device.mips * dt.as_secs_f64();
    account.last_utilization = utilization;
    account.last_update = now;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyStats {
    pub loop_id: String,
    pub samples_ms: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    /// Unbiased (n − 1) sample variance.
    pub variance: f64,
    /// Normal-approximation 95% interval; `None` when n < 2.
    pub ci95: Option<(f64, f64)>,
}

pub fn loop_stats(loop_id: impl Into<String>, samples_ms: &[f64]) -> LatencyStats {
    let n = samples_ms.len();
    // shifted by the first sample so identical samples give an exact mean
    let mean = match samples_ms.first() {
        None => f64::NAN,
        Some(&k) => k + samples_ms.iter().map(|x| x - k).sum::<f64>() / n as f64,
    };
    let variance = if n < 2 {
        0.0
    } else {
        samples_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    let ci95 = (n >= 2).then(|| {
        let half = 1.96 * (variance / n as f64).sqrt();
        (mean - half, mean + half)
    });
    LatencyStats {
        loop_id: loop_id.into(),
        samples_ms: samples_ms.to_vec(),
        n,
        mean,
        variance,
        ci95,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueueSample {
    pub at: SimTime,
    pub queue_length: u32,
    pub in_service: u32,
}

/// Per-device queue lengths and service statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueueTelemetry {
    pub device_id: String,
    pub parallelism_degree: u32,
    pub samples: Vec<QueueSample>,
    pub completed: u64,
    pub total_service: SimTime,
    /// ∫ inService dt, in slot-nanoseconds.
    pub busy_slot_nanos: u128,
    pub max_queue_length: u32,
    last_at: SimTime,
    last_in_service: u32,
    record_samples: bool,
}

impl QueueTelemetry {
    pub fn new(
        device_id: impl Into<String>,
        parallelism_degree: u32,
        record_samples: bool,
    ) -> Self {
        QueueTelemetry {
            device_id: device_id.into(),
            parallelism_degree,
            samples: Vec::new(),
            completed: 0,
            total_service: SimTime::ZERO,
            busy_slot_nanos: 0,
            max_queue_length: 0,
            last_at: SimTime::ZERO,
            last_in_service: 0,
            record_samples,
        }
    }

    pub fn observe(&mut self, at: SimTime, queue_length: u32, in_service: u32) {
        debug_assert!(in_service <= self.parallelism_degree);
        self.advance(at);
        self.last_in_service = in_service;
        self.max_queue_length = self.max_queue_length.max(queue_length);
        if self.record_samples {
            self.samples.push(QueueSample {
                at,
                queue_length,
                in_service,
            });
        }
    }

    pub fn record_completion(&mut self, service: SimTime) {
        self.completed += 1;
        self.total_service += service;
    }

    /// Closes the busy-time integral at `at`.
    pub fn advance(&mut self, at: SimTime) {
        let dt = at.saturating_sub(self.last_at).as_nanos() as u128;
        self.busy_slot_nanos += dt * u128::from(self.last_in_service);
        if at > self.last_at {
            self.last_at = at;
        }
    }

    /// Service rate of one slot, tuples per second.
    pub fn mean_service_rate(&self) -> f64 {
        if self.completed == 0 || self.total_service == SimTime::ZERO {
            return 0.0;
        }
        self.completed as f64 / self.total_service.as_secs_f64()
    }

    pub fn mean_service_time_secs(&self) -> f64 {
        if self.completed == 0 {
            return 0.0;
        }
        self.total_service.as_secs_f64() / self.completed as f64
    }

    /// Time-averaged number of busy slots over `[0, horizon]`.
    pub fn mean_in_service(&self, horizon: SimTime) -> f64 {
        if horizon == SimTime::ZERO {
            return 0.0;
        }
        self.busy_slot_nanos as f64 / horizon.as_nanos() as f64
    }

    pub fn throughput(&self, horizon: SimTime) -> f64 {
        if horizon == SimTime::ZERO {
            return 0.0;
        }
        self.completed as f64 / horizon.as_secs_f64()
    }
}

/// Battery report for one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SensorEnergyReport {
    pub sensor_id: String,
    pub emissions: u64,
    pub energy_spent_milli_j: f64,
    pub remaining_milli_j: Option<f64>,
    pub depleted_at: Option<SimTime>,
}
