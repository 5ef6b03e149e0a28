use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trajectory::{Profile, RideSpec, Segment, SensorModel, MAX_CENTRIPETAL, MIN_RADIUS};

/// Knobs for randomly planned rides.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanConfig {
    /// Ride length, s.
    pub duration: f64,
    pub roughness: f64,
    pub rate_hz: f64,
    /// Standstill at the start, used for static alignment, s.
    pub lead_stop: f64,
    pub min_speed: f64,
    pub max_speed: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            duration: 120.0,
            roughness: 1.0,
            rate_hz: 100.0,
            lead_stop: 3.0,
            min_speed: 2.5,
            max_speed: 7.5,
        }
    }
}

/// A ride of straights, turns and stops lasting `cfg.duration` seconds.
pub fn random_ride(cfg: &PlanConfig, profile: Profile, sensor: SensorModel, seed: u64) -> RideSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = profile.speed_scale;
    // segment durations are stretched by the profile's speed scale
    let total = cfg.duration * k;
    let lead = cfg.lead_stop.min(cfg.duration) * k;
    let mut segments = vec![Segment::Stop { duration: lead }];
    let mut left = total - lead;
    let mut speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
    let mut after_stop = true;
    while left > 1e-9 {
        let roll: f64 = rng.random();
        let seg = if after_stop || roll < 0.5 {
            if !after_stop && rng.random_bool(0.3) {
                speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
            }
            after_stop = false;
            Segment::Straight {
                duration: rng.random_range(4.0..15.0f64).min(left),
                speed,
            }
        } else if roll < 0.9 {
            let min_r = MIN_RADIUS.max(1.5 * k.max(1.0).powi(2) * speed * speed / MAX_CENTRIPETAL);
            let radius = rng.random_range(min_r..min_r.max(30.0) + 1.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut angle = rng.random_range(0.5..2.5f64);
            angle = angle.min(left * speed / radius);
            Segment::Turn {
                radius,
                angle: sign * angle,
                speed,
            }
        } else {
            after_stop = true;
            speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
            Segment::Stop {
                duration: rng.random_range(2.0..5.0f64).min(left),
            }
        };
        left -= seg.duration();
        segments.push(seg);
    }
    RideSpec {
        segments,
        roughness: cfg.roughness,
        rate_hz: cfg.rate_hz,
        profile,
        blend: 1.0,
        sensor,
        seed,
    }
}
