//! Seeded synthetic corridor: a line of segments with a daily sinusoidal
//! speed cycle, sensor noise, scheduled work zones that slow the segment and its
//! neighbours, and short unscheduled incidents that look the same but end
//! quickly.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::{format_timestamp, rbf, Calendar, FeatureMap, SpeedSeries, WorkZoneEvent};
use crate::graph::RoadNetwork;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub segments: usize,
    pub days: usize,
    pub step_minutes: u32,
    /// Distance between consecutive segments, miles.
    pub spacing_miles: f64,
    pub free_flow_mph: f64,
    /// Peak-to-trough depth of the daily cycle; slowest at 17:00.
    pub daily_swing_mph: f64,
    pub noise_mph: f64,
    pub work_zones: usize,
    /// Inclusive duration range in steps.
    pub work_zone_steps: (usize, usize),
    /// Slowdown on the work-zone segment; neighbours get `drop * rbf(d)`.
    pub work_zone_drop_mph: f64,
    pub incidents: usize,
    pub incident_steps: (usize, usize),
    pub incident_drop_mph: f64,
    /// Fraction of cells reported as missing.
    pub missing_rate: f64,
    pub seed: u64,
    pub start: NaiveDateTime,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            days: 14,
            step_minutes: 15,
            spacing_miles: 1.0,
            free_flow_mph: 65.0,
            daily_swing_mph: 15.0,
            noise_mph: 1.5,
            work_zones: 12,
            work_zone_steps: (16, 32),
            work_zone_drop_mph: 20.0,
            incidents: 120,
            incident_steps: (1, 4),
            incident_drop_mph: 20.0,
            missing_rate: 0.01,
            seed: 0,
            start: chrono::NaiveDate::from_ymd_opt(2019, 1, 7)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .unwrap_or_default(),
        }
    }
}

/// A generated corridor and everything needed to build features from it.
#[derive(Debug, Clone)]
pub struct SyntheticCorridor {
    pub network: RoadNetwork,
    pub series: SpeedSeries,
    pub calendar: Calendar,
    pub events: Vec<WorkZoneEvent>,
}

/// 0 at 05:00, 1 at 17:00.
fn daily_profile(minute_of_day: f64) -> f64 {
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * (minute_of_day - 300.0) / 1440.0).cos())
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorridor> {
    let n = config.segments;
    if n == 0 || config.days == 0 {
        return Err(Error::Parameter("synthetic corridor needs segments and days".into()));
    }
    let (lo, hi) = config.work_zone_steps;
    let (ilo, ihi) = config.incident_steps;
    if lo == 0 || lo > hi || ilo == 0 || ilo > ihi {
        return Err(Error::Parameter("event duration ranges must be non-empty and positive".into()));
    }
    let noise = Normal::new(0.0, config.noise_mph.max(0.0))
        .map_err(|e| Error::Parameter(format!("noise: {e}")))?;
    let steps_per_day = (1440 / config.step_minutes) as usize;
    let steps = config.days * steps_per_day;
    let calendar = Calendar::new(config.start, config.step_minutes, steps)?;

    let ids: Vec<String> = (0..n).map(|i| format!("seg{i:03}")).collect();
    let dist = (0..n)
        .map(|i| (0..n).map(|j| (i as f64 - j as f64).abs() * config.spacing_miles).collect())
        .collect();
    let network = RoadNetwork::new(ids.clone(), dist, config.spacing_miles * 1.5)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut drop = vec![0.0f64; n * steps];

    let mut events = Vec::with_capacity(config.work_zones);
    for _ in 0..config.work_zones {
        let seg = rng.gen_range(0..n);
        let len = rng.gen_range(lo..=hi).min(steps);
        let start = rng.gen_range(0..=steps - len);
        for i in 0..n {
            let k = config.work_zone_drop_mph * rbf(network.distance(i, seg), 1.0);
            for t in start..start + len {
                drop[i * steps + t] = drop[i * steps + t].max(k);
            }
        }
        events.push(WorkZoneEvent {
            segment_id: ids[seg].clone(),
            start: calendar.time_at(start),
            end: calendar.time_at(start + len),
        });
    }
    for _ in 0..config.incidents {
        let seg = rng.gen_range(0..n);
        let len = rng.gen_range(ilo..=ihi).min(steps);
        let start = rng.gen_range(0..=steps - len);
        for t in start..start + len {
            let cell = &mut drop[seg * steps + t];
            *cell = cell.max(config.incident_drop_mph);
        }
    }

    let mut values = vec![0.0; n * steps];
    for i in 0..n {
        let offset = rng.gen_range(-3.0..3.0);
        for t in 0..steps {
            let minute = ((t % steps_per_day) as u32 * config.step_minutes) as f64;
            let v = config.free_flow_mph + offset - config.daily_swing_mph * daily_profile(minute) - drop[i * steps + t]
                + noise.sample(&mut rng);
            let missing = rng.gen_bool(config.missing_rate.clamp(0.0, 1.0));
            values[i * steps + t] = if missing { 0.0 } else { v.max(1.0) };
        }
    }
    events.sort_by(|a, b| (a.start, &a.segment_id).cmp(&(b.start, &b.segment_id)));
    let series = SpeedSeries::new(ids, FeatureMap::new(n, steps, values)?)?;
    Ok(SyntheticCorridor {
        network,
        series,
        calendar,
        events,
    })
}

impl SyntheticCorridor {
    /// Writes `speeds.csv`, `distances.csv` and `workzones.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let ids = self.network.segment_ids();

        let mut w = csv::Writer::from_path(dir.join("speeds.csv"))?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(ids.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.calendar.len {
            let mut row = vec![format_timestamp(self.calendar.time_at(t))];
            row.extend((0..ids.len()).map(|i| {
                if self.series.observed(i, t) {
                    format!("{:.2}", self.series.values.at(i, t))
                } else {
                    String::new()
                }
            }));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("distances.csv"))?;
        let mut header = vec!["segment_id".to_string()];
        header.extend(ids.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..ids.len()).map(|j| format!("{}", self.network.distance(i, j))));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut f = std::fs::File::create(dir.join("workzones.csv"))?;
        writeln!(f, "segment_id,start,end")?;
        for e in &self.events {
            writeln!(f, "{},{},{}", e.segment_id, format_timestamp(e.start), format_timestamp(e.end))?;
        }
        Ok(())
    }
}
