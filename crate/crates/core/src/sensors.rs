//! Physical conversions for the weather-station sensors and the synthetic
//! signal generator that drives simulated nodes.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pyranometer output per W/m².
pub const DAVIS_6450_VOLTS_PER_WM2: f64 = 0.00167;
/// Full-scale analog output of the pyranometer.
pub const DAVIS_6450_MAX_VOLTS: f64 = 3.0;
/// Rain collected per bucket tip.
pub const RAIN_MM_PER_TIP: f64 = 0.2794;
/// Wind speed for one anemometer closure per second.
pub const ANEMOMETER_KMH_PER_HZ: f64 = 2.4;
/// Default wind-vane divider reference.
pub const VANE_VREF: f64 = 3.3;

/// Noise half-widths of the synthetic generator, from the sensor accuracies.
pub const TEMPERATURE_NOISE_C: f64 = 0.1;
pub const HUMIDITY_NOISE_RH: f64 = 2.0;

pub const COMPASS_POINTS: [&str; 16] = [
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE", "S", "SSW", "SW", "WSW", "W", "WNW", "NW",
    "NNW",
];

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum SensorError {
    #[error("CRC mismatch: computed {computed:#06x}, payload carries {carried:#06x}")]
    CrcMismatch { computed: u16, carried: u16 },
    #[error("malformed AM2315 response header {0:#04x} {1:#04x}")]
    BadHeader(u8, u8),
    #[error("humidity {0} %RH above 100")]
    HumidityOutOfRange(f64),
    #[error("voltage {volts} V outside [0, {max}] V")]
    VoltageOutOfRange { volts: f64, max: f64 },
    #[error("counting window must be positive")]
    ZeroWindow,
}

/// Calibration constants, overridable from a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    pub anemometer_kmh_per_hz: f64,
    pub rain_mm_per_tip: f64,
    pub davis_volts_per_wm2: f64,
    pub vane_vref: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            anemometer_kmh_per_hz: ANEMOMETER_KMH_PER_HZ,
            rain_mm_per_tip: RAIN_MM_PER_TIP,
            davis_volts_per_wm2: DAVIS_6450_VOLTS_PER_WM2,
            vane_vref: VANE_VREF,
        }
    }
}

impl Calibration {
    pub fn irradiance(&self, volts: f64) -> Result<f64, SensorError> {
        if !(0.0..=DAVIS_6450_MAX_VOLTS).contains(&volts) {
            return Err(SensorError::VoltageOutOfRange { volts, max: DAVIS_6450_MAX_VOLTS });
        }
        Ok(volts / self.davis_volts_per_wm2)
    }

    /// Rounded to 4 decimals, the resolution of the per-tip volume.
    pub fn rain_mm(&self, tips: u64) -> f64 {
        (tips as f64 * self.rain_mm_per_tip * 1e4).round() / 1e4
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn wind_kmh(&self, closures: u64, window_s: f64) -> Result<f64, SensorError> {
        if !(window_s > 0.0) {
            return Err(SensorError::ZeroWindow);
        }
        Ok(closures as f64 / window_s * self.anemometer_kmh_per_hz)
    }
}

/// CRC-16/MODBUS (reflected 0x8005, init 0xFFFF).
pub fn crc16_modbus(bytes: &[u8]) -> u16 {
    let mut crc = 0xFFFFu16;
    for &b in bytes {
        crc ^= u16::from(b);
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xA001 } else { crc >> 1 };
        }
    }
    crc
}

/// AM2315 register-read response: `03 04 RHh RHl Th Tl CRCl CRCh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Am2315Payload(pub [u8; 8]);

impl Am2315Payload {
    /// Builds the response a sensor would return for the given conditions,
    /// quantized to 0.1 units.
    pub fn from_reading(temperature_c: f64, humidity_rh: f64) -> Self {
        let rh = (humidity_rh.clamp(0.0, 100.0) * 10.0).round() as u16;
        let t_mag = ((temperature_c.abs() * 10.0).round() as u16).min(0x7FFF);
        let t = if temperature_c < 0.0 && t_mag != 0 { t_mag | 0x8000 } else { t_mag };
        let mut bytes = [0x03, 0x04, (rh >> 8) as u8, rh as u8, (t >> 8) as u8, t as u8, 0, 0];
        let crc = crc16_modbus(&bytes[..6]);
        bytes[6] = crc as u8;
        bytes[7] = (crc >> 8) as u8;
        Self(bytes)
    }
}

/// Returns `(temperature °C, humidity %RH)`.
pub fn am2315_decode(p: &Am2315Payload) -> Result<(f64, f64), SensorError> {
    let b = &p.0;
    let computed = crc16_modbus(&b[..6]);
    let carried = u16::from_le_bytes([b[6], b[7]]);
    if computed != carried {
        return Err(SensorError::CrcMismatch { computed, carried });
    }
    if b[0] != 0x03 || b[1] != 0x04 {
        return Err(SensorError::BadHeader(b[0], b[1]));
    }
    let humidity = f64::from(u16::from_be_bytes([b[2], b[3]])) / 10.0;
    if humidity > 100.0 {
        return Err(SensorError::HumidityOutOfRange(humidity));
    }
    let magnitude = f64::from(u16::from_be_bytes([b[4] & 0x7F, b[5]])) / 10.0;
    let temperature = if b[4] & 0x80 != 0 { -magnitude } else { magnitude };
    Ok((temperature, humidity))
}

/// Pyranometer voltage to irradiance in W/m².
pub fn davis6450_convert(volts: f64) -> Result<f64, SensorError> {
    Calibration::default().irradiance(volts)
}

pub fn rain_tips_to_mm(tips: u64) -> f64 {
    Calibration::default().rain_mm(tips)
}

pub fn anemometer_to_kmh(closures: u64, window_s: f64) -> Result<f64, SensorError> {
    Calibration::default().wind_kmh(closures, window_s)
}

/// Sector index 0..16 (0 = N, clockwise) for a divider voltage.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
pub fn vane_sector(volts: f64, vref: f64) -> Result<usize, SensorError> {
    if !(vref > 0.0) || !(0.0..=vref).contains(&volts) {
        return Err(SensorError::VoltageOutOfRange { volts, max: vref });
    }
    Ok(((volts / vref * 16.0 + 0.5).floor() as usize) % 16)
}

pub fn vane_direction(volts: f64, vref: f64) -> Result<&'static str, SensorError> {
    vane_sector(volts, vref).map(|i| COMPASS_POINTS[i])
}

/// One instant of simulated station conditions. `rain_tips` and
/// `wind_closures` are running counters since scenario start, the way the
/// interrupt counters on a real node behave; readers take differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherSample {
    pub temperature: f64,
    pub humidity: f64,
    pub irradiance: f64,
    pub rain_tips: u64,
    pub wind_closures: u64,
    pub vane_voltage: f64,
    pub vref: f64,
}

fn mix(seed: u64, t: f64) -> u64 {
    // splitmix64 over the seed and the time bits
    let mut z = seed ^ t.to_bits().rotate_left(17) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const RAIN_MM_PER_HOUR: f64 = 6.0;
const WIND_MEAN_KMH: f64 = 8.0;
const WIND_GUST_KMH: f64 = 3.0;
const WIND_GUST_PERIOD_S: f64 = 240.0;

/// Deterministic conditions at `t` seconds after scenario start. The seed
/// only drives the noise terms, so two seeds describe two co-located stations.
pub fn synth_weather(t: f64, seed: u64) -> WeatherSample {
    let t = t.max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, t));

    let base_temp = 17.0 + 4.0 * (TAU * t / 86_400.0 + 0.3).sin() + 0.6 * (TAU * t / 900.0).sin();
    let temperature = base_temp + rng.random_range(-TEMPERATURE_NOISE_C..=TEMPERATURE_NOISE_C);

    let base_rh = 70.0 - 1.5 * (base_temp - 17.0);
    let humidity =
        (base_rh + rng.random_range(-HUMIDITY_NOISE_RH..=HUMIDITY_NOISE_RH)).clamp(0.0, 100.0);

    let irradiance = (650.0 + 150.0 * (TAU * t / 600.0).sin() + rng.random_range(-5.0..=5.0))
        .clamp(0.0, DAVIS_6450_MAX_VOLTS / DAVIS_6450_VOLTS_PER_WM2);

    let rain_tips = (t * RAIN_MM_PER_HOUR / RAIN_MM_PER_TIP / 3600.0).floor() as u64;

    // Closed-form integral of the wind speed, converted to rotations.
    let w = TAU / WIND_GUST_PERIOD_S;
    let km_h_seconds = WIND_MEAN_KMH * t + WIND_GUST_KMH * (1.0 - (w * t).cos()) / w;
    let wind_closures = (km_h_seconds / ANEMOMETER_KMH_PER_HZ).floor() as u64;

    let heading = (200.0 + 25.0 * (TAU * t / 360.0).sin() + rng.random_range(-5.0..=5.0))
        .rem_euclid(360.0);
    let vane_voltage = heading / 360.0 * VANE_VREF;

    WeatherSample {
        temperature,
        humidity,
        irradiance,
        rain_tips,
        wind_closures,
        vane_voltage,
        vref: VANE_VREF,
    }
}
