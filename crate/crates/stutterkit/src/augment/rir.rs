//! Image-source room impulse response simulation.
//!
//! A shoebox room is mirrored along each axis; every image source
//! contributes an impulse attenuated by the wall reflection coefficient per
//! bounce and by 1/distance, at a delay of distance over the speed of sound
//! rounded to the nearest sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of sound used for delays, in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// A shoebox room with one source and one microphone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomConfig {
    /// Room dimensions in meters (x, y, z).
    pub dims: [f64; 3],
    /// Source position in meters, strictly inside the room.
    pub source: [f64; 3],
    /// Microphone position in meters, strictly inside the room.
    pub mic: [f64; 3],
    /// Wall energy absorption in (0, 1]; reflection coeff = sqrt(1 - a).
    pub absorption: f64,
    /// Maximum number of reflections per axis.
    pub max_order: u32,
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.dims[axis] > 0.0) {
                return Err(Error::Config(format!(
                    "room dimension {axis} must be positive, got {}",
                    self.dims[axis]
                )));
            }
            for (what, pos) in [("source", self.source), ("mic", self.mic)] {
                if !(pos[axis] > 0.0 && pos[axis] < self.dims[axis]) {
                    return Err(Error::Config(format!(
                        "{what} coordinate {axis} = {} is not strictly inside the room (0, {})",
                        pos[axis], self.dims[axis]
                    )));
                }
            }
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(Error::Config(format!(
                "absorption must lie in (0, 1], got {}",
                self.absorption
            )));
        }
        let dist = distance(self.source, self.mic);
        if dist < 1e-9 {
            return Err(Error::Config(
                "source and microphone coincide; direct-path distance is zero".into(),
            ));
        }
        Ok(())
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| (a[i] - b[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-axis image positions and their reflection counts.
///
/// Images along one axis sit at `(1 - 2q) * s + 2 m L` for integer `m` and
/// `q in {0, 1}`; such an image's path reflects `|m - q| + |m|` times off
/// the two walls of that axis.
fn axis_images(s: f64, l: f64, max_order: u32) -> Vec<(f64, u32)> {
    let r = max_order as i64;
    let mut out = Vec::new();
    for m in -r..=r + 1 {
        for q in 0..=1i64 {
            let refl = (m - q).unsigned_abs() + m.unsigned_abs();
            if refl <= max_order as u64 {
                out.push(((1 - 2 * q) as f64 * s + 2.0 * m as f64 * l, refl as u32));
            }
        }
    }
    out
}

/// Simulate the impulse response of `room` at sampling rate `rate`.
///
/// The response length covers the farthest admitted image. Amplitudes are
/// `reflection_coeff^order / distance`; coincident integer delays add.
pub fn simulate_rir(room: &RoomConfig, rate: u32) -> Result<Vec<f64>> {
    room.validate()?;
    if rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let beta = (1.0 - room.absorption).sqrt();
    let xs = axis_images(room.source[0], room.dims[0], room.max_order);
    let ys = axis_images(room.source[1], room.dims[1], room.max_order);
    let zs = axis_images(room.source[2], room.dims[2], room.max_order);

    let mut taps: Vec<(usize, f64)> = Vec::new();
    let mut max_delay = 0usize;
    for &(px, rx) in &xs {
        for &(py, ry) in &ys {
            for &(pz, rz) in &zs {
                let order = rx + ry + rz;
                let dist = distance([px, py, pz], room.mic);
                let delay = (dist / SPEED_OF_SOUND * rate as f64).round() as usize;
                let amp = beta.powi(order as i32) / dist;
                if amp != 0.0 {
                    max_delay = max_delay.max(delay);
                    taps.push((delay, amp));
                }
            }
        }
    }
    let mut rir = vec![0.0; max_delay + 1];
    for (delay, amp) in taps {
        rir[delay] += amp;
    }
    Ok(rir)
}

/// A small set of plausible rooms used when no measured RIRs are supplied.
pub fn default_rooms() -> Vec<RoomConfig> {
    let presets: [([f64; 3], [f64; 3], [f64; 3], f64); 6] = [
        ([4.0, 5.0, 2.8], [1.2, 1.5, 1.4], [2.8, 3.6, 1.5], 0.45),
        ([6.0, 4.0, 3.0], [1.0, 2.0, 1.6], [4.5, 2.9, 1.3], 0.35),
        ([8.0, 6.5, 3.2], [2.5, 1.8, 1.5], [5.9, 4.7, 1.7], 0.30),
        ([3.2, 3.0, 2.5], [0.8, 1.1, 1.2], [2.3, 2.1, 1.4], 0.55),
        ([5.5, 7.0, 2.9], [1.7, 5.2, 1.5], [3.9, 1.6, 1.6], 0.40),
        ([7.0, 3.5, 3.0], [5.5, 1.0, 1.3], [1.4, 2.6, 1.7], 0.25),
    ];
    presets
        .iter()
        .map(|&(dims, source, mic, absorption)| RoomConfig {
            dims,
            source,
            mic,
            absorption,
            max_order: 4,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_room() -> RoomConfig {
        RoomConfig {
            dims: [4.0, 5.0, 3.0],
            source: [1.0, 1.0, 1.0],
            mic: [3.0, 4.0, 2.0],
            absorption: 0.4,
            max_order: 0,
        }
    }

    #[test]
    fn max_order_zero_is_the_direct_path_only() {
        let room = simple_room();
        let rir = simulate_rir(&room, 16_000).unwrap();
        let dist = (4.0f64 + 9.0 + 1.0).sqrt();
        let delay = (dist / SPEED_OF_SOUND * 16_000.0).round() as usize;
        assert_eq!(rir.len(), delay + 1);
        let nonzero: Vec<(usize, f64)> = rir
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(i, &a)| (i, a))
            .collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].0, delay);
        assert!((nonzero[0].1 - 1.0 / dist).abs() < 1e-12);
    }

    #[test]
    fn full_absorption_equals_direct_path() {
        let mut absorbing = simple_room();
        absorbing.absorption = 1.0;
        absorbing.max_order = 5;
        let with_orders = simulate_rir(&absorbing, 16_000).unwrap();
        let direct = simulate_rir(&simple_room(), 16_000).unwrap();
        // All reflected taps vanish; only the direct tap remains.
        assert_eq!(&with_orders[..direct.len()], direct.as_slice());
        assert!(with_orders[direct.len()..].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn doubling_distances_halves_amplitude_and_doubles_delay() {
        // Direct path of 4.2875 m = exactly 200 samples at 16 kHz and 343 m/s,
        // so sample rounding cannot blur the doubling law.
        let room = RoomConfig {
            dims: [6.0, 5.0, 3.0],
            source: [0.5, 1.0, 1.0],
            mic: [4.7875, 1.0, 1.0],
            absorption: 0.4,
            max_order: 0,
        };
        let doubled = RoomConfig {
            dims: [12.0, 10.0, 6.0],
            source: [1.0, 2.0, 2.0],
            mic: [9.575, 2.0, 2.0],
            ..room
        };
        let a = simulate_rir(&room, 16_000).unwrap();
        let b = simulate_rir(&doubled, 16_000).unwrap();
        let tap_a = a.iter().enumerate().find(|(_, &v)| v != 0.0).unwrap();
        let tap_b = b.iter().enumerate().find(|(_, &v)| v != 0.0).unwrap();
        assert_eq!(tap_b.0, 2 * tap_a.0);
        assert!((tap_b.1 - tap_a.1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn higher_orders_add_reflected_taps() {
        let mut room = simple_room();
        room.max_order = 2;
        let rir = simulate_rir(&room, 16_000).unwrap();
        let nonzero = rir.iter().filter(|&&a| a != 0.0).count();
        assert!(nonzero > 1, "expected reflections beyond the direct path");
    }

    #[test]
    fn invalid_rooms_are_rejected() {
        let mut outside = simple_room();
        outside.source = [5.0, 1.0, 1.0];
        assert!(simulate_rir(&outside, 16_000).is_err());

        let mut coincident = simple_room();
        coincident.mic = coincident.source;
        assert!(simulate_rir(&coincident, 16_000).is_err());

        let mut bad_absorption = simple_room();
        bad_absorption.absorption = 0.0;
        assert!(simulate_rir(&bad_absorption, 16_000).is_err());
    }

    #[test]
    fn default_rooms_all_validate() {
        for room in default_rooms() {
            room.validate().unwrap();
            let rir = simulate_rir(&room, 16_000).unwrap();
            assert!(rir.iter().any(|&a| a != 0.0));
        }
    }
}
