//! Event camera model: the event stream, ground-truth event integrals,
//! predicted event counts from rendered colors, and an idealized
//! threshold-crossing simulator.
//!
//! Sign convention: a brightness increase over (t_i, t_j] yields positive
//! polarity events and a positive predicted count.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Luminance floor applied before the log so black pixels stay finite.
pub const LUMA_FLOOR: f64 = 1e-3;

/// Rec. 709 luma from linear rgb, floored.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    (0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]).max(LUMA_FLOOR)
}

pub fn log_luminance(rgb: [f64; 3]) -> f64 {
    luminance(rgb).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    pub u: u32,
    pub v: u32,
    /// +1 or -1.
    pub polarity: i8,
}

/// Time-ordered per-pixel polarity events over an observation window.
#[derive(Debug, Clone)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    /// Threshold used at generation.
    pub theta: f64,
    /// Sorted by (t, v, u) for deterministic serialization.
    events: Vec<Event>,
    /// Per-pixel event lists (t, polarity), each sorted by t.
    per_pixel: Vec<Vec<(f64, i8)>>,
}

impl EventStream {
    pub fn new(width: usize, height: usize, theta: f64, mut events: Vec<Event>) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::config("event threshold must be positive"));
        }
        for e in &events {
            if (e.u as usize) >= width || (e.v as usize) >= height {
                return Err(Error::data(format!(
                    "event pixel ({},{}) outside {width}x{height}",
                    e.u, e.v
                )));
            }
            if !e.t.is_finite() {
                return Err(Error::data("event timestamp is not finite"));
            }
        }
        events.sort_by(|a, b| {
            a.t.partial_cmp(&b.t)
                .unwrap()
                .then(a.v.cmp(&b.v))
                .then(a.u.cmp(&b.u))
        });
        let mut per_pixel = vec![Vec::new(); width * height];
        for e in &events {
            per_pixel[e.v as usize * width + e.u as usize].push((e.t, e.polarity));
        }
        Ok(EventStream { width, height, theta, events, per_pixel })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Signed polarity sum at `pixel` over the half-open interval (t_i, t_j]:
    /// events exactly at t_i are excluded, at t_j included.
    pub fn event_integral(&self, pixel: (usize, usize), t_i: f64, t_j: f64) -> Result<i64> {
        if t_i >= t_j {
            return Err(Error::usage("event_integral requires t_i < t_j"));
        }
        let (u, v) = pixel;
        if u >= self.width || v >= self.height {
            return Err(Error::usage("event_integral pixel out of bounds"));
        }
        let list = &self.per_pixel[v * self.width + u];
        // First index with t > t_i, then sum while t <= t_j.
        let start = list.partition_point(|&(t, _)| t <= t_i);
        let mut sum = 0i64;
        for &(t, p) in &list[start..] {
            if t > t_j {
                break;
            }
            sum += p as i64;
        }
        Ok(sum)
    }

    /// CSV with a single metadata header line, then `t_us,u,v,p` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "# width={} height={} theta={:.17e}\n",
            self.width, self.height, self.theta
        ));
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{}\n",
                (e.t * 1e6).round() as i64,
                e.u,
                e.v,
                e.polarity
            ));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<EventStream> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("events csv: empty file"))??;
        let mut width = None;
        let mut height = None;
        let mut theta = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                match k {
                    "width" => width = v.parse::<usize>().ok(),
                    "height" => height = v.parse::<usize>().ok(),
                    "theta" => theta = v.parse::<f64>().ok(),
                    _ => {}
                }
            }
        }
        let (width, height, theta) = match (width, height, theta) {
            (Some(w), Some(h), Some(t)) => (w, h, t),
            _ => return Err(Error::data("events csv: bad metadata header")),
        };
        let mut events = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::data(format!("events csv: bad row `{line}`")));
            }
            let t_us: i64 = cols[0]
                .parse()
                .map_err(|_| Error::data("events csv: bad timestamp"))?;
            events.push(Event {
                t: t_us as f64 / 1e6,
                u: cols[1].parse().map_err(|_| Error::data("events csv: bad u"))?,
                v: cols[2].parse().map_err(|_| Error::data("events csv: bad v"))?,
                polarity: cols[3]
                    .parse()
                    .map_err(|_| Error::data("events csv: bad polarity"))?,
            });
        }
        EventStream::new(width, height, theta, events)
    }
}

/// Real-valued event-count estimate between two rendered colors:
/// (log Y(c_j) - log Y(c_i)) / theta.
pub fn predicted_events(c_ti: [f64; 3], c_tj: [f64; 3], theta: f64) -> f64 {
    (log_luminance(c_tj) - log_luminance(c_ti)) / theta
}

/// Idealized threshold-crossing simulator over per-pixel log-intensity
/// samples: the signal is linearly interpolated between samples, one event
/// fires at each crossing of the reference level +- theta, and the reference
/// steps by theta per event.
///
/// `frames[k]` holds the log intensity of every pixel (row-major) at
/// `timestamps[k]`. Optional zero-mean Gaussian threshold noise (off by
/// default) perturbs each crossing test deterministically under `seed`.
pub struct SimulatorConfig {
    pub theta: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SimulatorConfig {
    pub fn ideal(theta: f64) -> Self {
        SimulatorConfig { theta, noise_std: 0.0, seed: 0 }
    }
}

pub fn simulate_events(
    log_frames: &[Vec<f64>],
    timestamps: &[f64],
    width: usize,
    height: usize,
    cfg: &SimulatorConfig,
) -> Result<EventStream> {
    if log_frames.len() < 2 {
        return Err(Error::usage("simulate_events needs at least 2 frames"));
    }
    if log_frames.len() != timestamps.len() {
        return Err(Error::usage("frame/timestamp count mismatch"));
    }
    if !(cfg.theta > 0.0) {
        return Err(Error::config("event threshold must be positive"));
    }
    let n_px = width * height;
    for f in log_frames {
        if f.len() != n_px {
            return Err(Error::data("log frame size mismatch"));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite log intensity"));
        }
    }
    let mut rng_state = cfg.seed;
    let mut events = Vec::new();
    for px in 0..n_px {
        let (u, v) = ((px % width) as u32, (px / width) as u32);
        let mut l_ref = log_frames[0][px];
        for k in 1..log_frames.len() {
            let (t0, t1) = (timestamps[k - 1], timestamps[k]);
            let (a, b) = (log_frames[k - 1][px], log_frames[k][px]);
            if b == a {
                continue;
            }
            loop {
                let noise = if cfg.noise_std > 0.0 {
                    rng_state = crate::math::splitmix64(rng_state ^ px as u64);
                    let u1 = (rng_state >> 11) as f64 / (1u64 << 53) as f64;
                    rng_state = crate::math::splitmix64(rng_state);
                    let u2 = (rng_state >> 11) as f64 / (1u64 << 53) as f64;
                    // Box-Muller.
                    cfg.noise_std
                        * (-2.0 * u1.max(1e-300).ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos()
                } else {
                    0.0
                };
                let up_level = l_ref + cfg.theta + noise;
                let dn_level = l_ref - cfg.theta - noise;
                let (level, polarity) = if b > a { (up_level, 1i8) } else { (dn_level, -1i8) };
                // Does the segment reach the level?
                let reached = if polarity == 1 { b >= level } else { b <= level };
                if !reached {
                    break;
                }
                let frac = (level - a) / (b - a);
                let t_ev = t0 + frac * (t1 - t0);
                events.push(Event { t: t_ev, u, v, polarity });
                l_ref += polarity as f64 * cfg.theta;
                if events.len() > 50_000_000 {
                    return Err(Error::numeric("event simulation exploded"));
                }
            }
        }
    }
    EventStream::new(width, height, cfg.theta, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn ev(t: f64, p: i8) -> Event {
        Event { t, u: 0, v: 0, polarity: p }
    }

    #[test]
    fn integral_of_empty_stream_is_zero() {
        let s = EventStream::new(2, 2, 0.2, vec![]).unwrap();
        assert_eq!(s.event_integral((0, 0), 0.0, 1.0).unwrap(), 0);
    }

    #[test]
    fn integral_counts_polarities_in_interval() {
        let s = EventStream::new(1, 1, 0.2, vec![ev(0.5, 1), ev(0.7, 1), ev(0.9, -1)]).unwrap();
        assert_eq!(s.event_integral((0, 0), 0.4, 0.8).unwrap(), 2);
        assert_eq!(s.event_integral((0, 0), 0.4, 1.0).unwrap(), 1);
    }

    #[test]
    fn integral_boundaries_are_left_exclusive_right_inclusive() {
        let s = EventStream::new(1, 1, 0.2, vec![ev(0.5, 1)]).unwrap();
        // Event exactly at t_i excluded; exactly at t_j included.
        assert_eq!(s.event_integral((0, 0), 0.5, 0.6).unwrap(), 0);
        assert_eq!(s.event_integral((0, 0), 0.4, 0.5).unwrap(), 1);
    }

    #[test]
    fn integral_rejects_bad_interval() {
        let s = EventStream::new(1, 1, 0.2, vec![]).unwrap();
        assert!(s.event_integral((0, 0), 0.5, 0.5).is_err());
        assert!(s.event_integral((0, 0), 0.7, 0.5).is_err());
    }

    #[test]
    fn predicted_events_zero_for_identical_colors() {
        let c = [0.4, 0.3, 0.2];
        assert_eq!(predicted_events(c, c, 0.2), 0.0);
    }

    #[test]
    fn predicted_events_log_ratio_is_analytic() {
        // Y(c_tj) = Y(c_ti) * e^theta gives exactly one event.
        let theta = 0.2f64;
        let c_ti = [0.3, 0.3, 0.3];
        let y_i = luminance(c_ti);
        let scale = theta.exp();
        let c_tj = [0.3 * scale, 0.3 * scale, 0.3 * scale];
        let y_j = luminance(c_tj);
        assert!((y_j / y_i - scale).abs() < 1e-12);
        let e = predicted_events(c_ti, c_tj, theta);
        assert!((e - 1.0).abs() < 1e-12, "got {e}");
    }

    #[test]
    fn simulator_constant_intensity_is_silent() {
        let frames = vec![vec![0.3; 4]; 10];
        let ts: Vec<f64> = (0..10).map(|k| k as f64 * 0.01).collect();
        let s = simulate_events(&frames, &ts, 2, 2, &SimulatorConfig::ideal(0.2)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn simulator_ramp_fires_two_evenly_spaced_events() {
        // Log intensity ramps +0.4 over one interval with theta = 0.2:
        // crossings at 50% and 100% of the interval.
        let frames = vec![vec![0.0], vec![0.4]];
        let ts = vec![0.0, 1.0];
        let s = simulate_events(&frames, &ts, 1, 1, &SimulatorConfig::ideal(0.2)).unwrap();
        assert_eq!(s.len(), 2);
        let evs = s.events();
        assert_eq!(evs[0].polarity, 1);
        assert_eq!(evs[1].polarity, 1);
        assert!((evs[0].t - 0.5).abs() < 1e-12);
        assert!((evs[1].t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simulator_total_polarity_tracks_net_change() {
        // Over the whole window the polarity sum must equal the net log
        // change over theta, within one quantum.
        let mut rng = StdRng::seed_from_u64(50);
        let theta = 0.2f64;
        for _ in 0..50 {
            let n = rng.gen_range(5..40);
            let mut val: f64 = rng.gen_range(-1.0..1.0);
            let mut frames = Vec::new();
            for _ in 0..n {
                frames.push(vec![val]);
                val += rng.gen_range(-0.5..0.5);
            }
            let ts: Vec<f64> = (0..n).map(|k| k as f64 * 0.01).collect();
            let s = simulate_events(&frames, &ts, 1, 1, &SimulatorConfig::ideal(theta)).unwrap();
            let total: i64 = s.events().iter().map(|e| e.polarity as i64).sum();
            let net = (frames[n - 1][0] - frames[0][0]) / theta;
            // Reference tracking keeps |L - L_ref| < theta, so the count
            // equals the真 net change truncated toward zero, within 1.
            assert!(
                (total as f64 - net).abs() < 1.0 + 1e-9,
                "total {total} vs net {net}"
            );
        }
    }

    #[test]
    fn round_trip_prediction_vs_integral_within_one_quantum() {
        // Simulate from a known log-luminance trace, then compare the
        // analytic count E between t=0 (the simulator's reference anchor)
        // and each sample time against the event integral.
        let mut rng = StdRng::seed_from_u64(51);
        let theta = 0.2f64;
        let n = 60;
        let mut val: f64 = 0.0;
        let mut frames = Vec::new();
        for _ in 0..n {
            frames.push(vec![val]);
            val += rng.gen_range(-0.35..0.35);
        }
        let ts: Vec<f64> = (0..n).map(|k| k as f64 * 0.01).collect();
        let s = simulate_events(&frames, &ts, 1, 1, &SimulatorConfig::ideal(theta)).unwrap();
        for k in 1..n {
            let e = (frames[k][0] - frames[0][0]) / theta;
            let e_hat = s.event_integral((0, 0), ts[0], ts[k]).unwrap();
            assert!(
                (e - e_hat as f64).abs() <= 1.0 + 1e-9,
                "k={k}: analytic {e} vs integral {e_hat}"
            );
        }
    }

    #[test]
    fn csv_round_trip_preserves_stream() {
        let s = EventStream::new(
            3,
            2,
            0.2,
            vec![
                Event { t: 0.125, u: 2, v: 1, polarity: -1 },
                Event { t: 0.025, u: 0, v: 0, polarity: 1 },
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        s.save_csv(&path).unwrap();
        let t = EventStream::load_csv(&path).unwrap();
        assert_eq!(t.width, 3);
        assert_eq!(t.height, 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.events()[0].t, 0.025);
        assert_eq!(t.events()[1].polarity, -1);
        // Re-saving is byte-identical.
        let path2 = dir.path().join("events2.csv");
        t.save_csv(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    proptest! {
        /// Integral additivity over adjacent intervals, exactly.
        #[test]
        fn integral_is_additive(
            times in proptest::collection::vec(0.0f64..1.0, 0..30),
            t1 in 0.0f64..0.3,
            mid in 0.35f64..0.6,
            t3 in 0.65f64..1.0,
        ) {
            let events: Vec<Event> = times
                .iter()
                .enumerate()
                .map(|(i, &t)| Event { t, u: 0, v: 0, polarity: if i % 2 == 0 { 1 } else { -1 } })
                .collect();
            let s = EventStream::new(1, 1, 0.2, events).unwrap();
            let a = s.event_integral((0, 0), t1, mid).unwrap();
            let b = s.event_integral((0, 0), mid, t3).unwrap();
            let c = s.event_integral((0, 0), t1, t3).unwrap();
            prop_assert_eq!(a + b, c);
        }

        /// Negating the trace negates polarities and keeps timestamps.
        #[test]
        fn simulator_polarity_symmetry(values in proptest::collection::vec(-1.0f64..1.0, 2..20)) {
            let ts: Vec<f64> = (0..values.len()).map(|k| k as f64 * 0.01).collect();
            let frames: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
            let neg: Vec<Vec<f64>> = values.iter().map(|&v| vec![-v]).collect();
            let cfg = SimulatorConfig::ideal(0.2);
            let a = simulate_events(&frames, &ts, 1, 1, &cfg).unwrap();
            let b = simulate_events(&neg, &ts, 1, 1, &cfg).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.events().iter().zip(b.events().iter()) {
                prop_assert_eq!(x.polarity, -y.polarity);
                prop_assert!((x.t - y.t).abs() < 1e-12);
            }
        }

        /// Predicted count is antisymmetric in its endpoints.
        #[test]
        fn predicted_events_antisymmetric(
            r1 in 0.0f64..1.0, g1 in 0.0f64..1.0, b1 in 0.0f64..1.0,
            r2 in 0.0f64..1.0, g2 in 0.0f64..1.0, b2 in 0.0f64..1.0,
        ) {
            let a = [r1, g1, b1];
            let b = [r2, g2, b2];
            let fwd = predicted_events(a, b, 0.2);
            let bwd = predicted_events(b, a, 0.2);
            prop_assert!((fwd + bwd).abs() < 1e-12);
        }
    }
}
