//! Dataset ids mapped to a data source, a split rule and prompt labels.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::PathBuf;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use timesaf::preprocess::{load_csv, Series, SplitRatios};

use crate::HarnessError;

/// A CSV dataset registered from the experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataset {
    pub id: String,
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Use the 6:2:2 split instead of 7:1:2.
    #[serde(default)]
    pub ett_split: bool,
    pub frequency: String,
    #[serde(default = "default_domain")]
    pub domain: String,
}

fn default_delimiter() -> char {
    ','
}

fn default_domain() -> String {
    "time series".into()
}

/// Deterministic stand-in generators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Synthetic {
    /// Daily, weekly and half-daily cycles with trend, seeded noise and a
    /// last channel that mixes the others.
    Mixed {
        channels: usize,
        steps: usize,
        step_minutes: i64,
        seed: u64,
    },
    /// Two noiseless sinusoids on integer steps.
    Sine { steps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(Synthetic),
    Csv { path: PathBuf, delimiter: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub source: DataSource,
    pub ett_split: bool,
    pub frequency: String,
    pub domain: String,
}

impl DatasetEntry {
    pub fn ratios(&self) -> SplitRatios {
        if self.ett_split {
            SplitRatios::ETT
        } else {
            SplitRatios::STANDARD
        }
    }

    pub fn load(&self) -> Result<Series, HarnessError> {
        match &self.source {
            DataSource::Synthetic(gen) => Ok(gen.generate()),
            DataSource::Csv { path, delimiter } => Ok(load_csv(path, *delimiter)?),
        }
    }
}

const ETT_CHANNELS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];

impl Synthetic {
    pub fn generate(&self) -> Series {
        match *self {
            Synthetic::Mixed {
                channels,
                steps,
                step_minutes,
                seed,
            } => mixed(channels, steps, step_minutes, seed),
            Synthetic::Sine { steps } => {
                let ts = (0..steps).map(|t| t.to_string()).collect();
                let a = (0..steps).map(|t| (t as f64 * 0.3).sin()).collect();
                let b = (0..steps).map(|t| 2.0 * (t as f64 * 0.17 + 1.0).cos()).collect();
                Series::new(ts, vec!["a".into(), "b".into()], vec![a, b]).expect("sine series is well formed")
            }
        }
    }
}

fn mixed(channels: usize, steps: usize, step_minutes: i64, seed: u64) -> Series {
    let origin = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid origin");
    let timestamps = (0..steps)
        .map(|t| {
            (origin + Duration::minutes(step_minutes * t as i64))
                .format("%Y-%m-%d %H:%M:%S")
                .to_string()
        })
        .collect();
    let names = if channels == ETT_CHANNELS.len() {
        ETT_CHANNELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..channels).map(|c| format!("ch{c}")).collect()
    };

    // Shape parameters depend only on the seed so that two sampling rates
    // of the same seed describe the same underlying process.
    let mut shape = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ step_minutes as u64);
    let hours: Vec<f64> = (0..steps).map(|t| (t as i64 * step_minutes) as f64 / 60.0).collect();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(channels);
    for c in 0..channels {
        let level = shape.random_range(-2.0..5.0);
        let daily = shape.random_range(0.5..2.0);
        let weekly = shape.random_range(0.2..1.0);
        let half = shape.random_range(0.0..0.6);
        let slope = shape.random_range(-0.5..0.5) / 1000.0;
        let phases: [f64; 3] = [
            shape.random_range(0.0..TAU),
            shape.random_range(0.0..TAU),
            shape.random_range(0.0..TAU),
        ];
        let sd = 0.1 * daily;
        let dist = Normal::new(0.0, sd).expect("positive noise scale");
        let mixes_others = c + 1 == channels && channels > 1;
        let values = hours
            .iter()
            .enumerate()
            .map(|(t, &h)| {
                let mut v = level
                    + daily * (TAU * h / 24.0 + phases[0]).sin()
                    + weekly * (TAU * h / 168.0 + phases[1]).sin()
                    + half * (TAU * h / 12.0 + phases[2]).sin()
                    + slope * h
                    + noise.sample(dist);
                if mixes_others {
                    v += 0.4 * out.iter().map(|ch| ch[t]).sum::<f64>() / out.len() as f64;
                }
                v
            })
            .collect();
        out.push(values);
    }
    Series::new(timestamps, names, out).expect("synthetic series is well formed")
}

#[derive(Clone, Debug)]
pub struct Registry {
    entries: BTreeMap<String, DatasetEntry>,
}

pub const SYNTH_STEPS: usize = 4000;

impl Registry {
    /// Bundled synthetic datasets.
    ///
    /// `synth-h1` and `synth-m1` are hourly and 15-minute samplings of the
    /// same 7-channel process, `synth-3c` has 3 channels and `sine` is a
    /// small 2-channel set for smoke tests.
    pub fn builtin() -> Self {
        let synth = |id: &str, channels, step_minutes, frequency: &str| DatasetEntry {
            id: id.into(),
            source: DataSource::Synthetic(Synthetic::Mixed {
                channels,
                steps: SYNTH_STEPS,
                step_minutes,
                seed: 1,
            }),
            ett_split: true,
            frequency: frequency.into(),
            domain: "electricity transformer".into(),
        };
        let entries = [
            synth("synth-h1", 7, 60, "1 hour"),
            synth("synth-m1", 7, 15, "15 minutes"),
            synth("synth-3c", 3, 60, "1 hour"),
            DatasetEntry {
                id: "sine".into(),
                source: DataSource::Synthetic(Synthetic::Sine { steps: 400 }),
                ett_split: false,
                frequency: "1 step".into(),
                domain: "synthetic signal".into(),
            },
        ];
        Self {
            entries: entries.into_iter().map(|e| (e.id.clone(), e)).collect(),
        }
    }

    pub fn with_csv(mut self, extra: &[CsvDataset]) -> Result<Self, HarnessError> {
        for d in extra {
            let delimiter = u8::try_from(d.delimiter)
                .map_err(|_| HarnessError::Config(format!("dataset {}: delimiter must be ASCII", d.id)))?;
            self.entries.insert(
                d.id.clone(),
                DatasetEntry {
                    id: d.id.clone(),
                    source: DataSource::Csv {
                        path: d.path.clone(),
                        delimiter,
                    },
                    ett_split: d.ett_split,
                    frequency: d.frequency.clone(),
                    domain: d.domain.clone(),
                },
            );
        }
        Ok(self)
    }

    pub fn get(&self, id: &str) -> Result<&DatasetEntry, HarnessError> {
        self.entries.get(id).ok_or_else(|| HarnessError::UnknownDataset {
            id: id.into(),
            known: self.ids().join(", "),
        })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_deterministic() {
        let r = Registry::builtin();
        for id in r.ids() {
            let e = r.get(id).unwrap();
            assert_eq!(e.load().unwrap(), e.load().unwrap(), "{id}");
        }
    }

    #[test]
    fn bundled_shapes_and_clock() {
        let r = Registry::builtin();
        let h1 = r.get("synth-h1").unwrap().load().unwrap();
        let m1 = r.get("synth-m1").unwrap().load().unwrap();
        assert_eq!((h1.num_channels(), h1.len()), (7, SYNTH_STEPS));
        assert_eq!(h1.timestamps[1], "2016-07-01 01:00:00");
        assert_eq!(m1.timestamps[1], "2016-07-01 00:15:00");
        assert_eq!(r.get("synth-3c").unwrap().load().unwrap().num_channels(), 3);
        assert!(h1.channels.iter().all(|c| c.iter().all(|v| v.is_finite())));
        assert_ne!(h1.channels[0], h1.channels[1]);
    }

    #[test]
    fn unknown_id_names_known_ones() {
        let err = Registry::builtin().get("etth9").unwrap_err().to_string();
        assert!(err.contains("etth9") && err.contains("synth-h1"), "{err}");
    }

    #[test]
    fn split_rule_follows_flag() {
        let r = Registry::builtin();
        assert_eq!(r.get("synth-h1").unwrap().ratios(), SplitRatios::ETT);
        assert_eq!(r.get("sine").unwrap().ratios(), SplitRatios::STANDARD);
    }
}
