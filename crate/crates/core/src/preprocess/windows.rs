use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

use super::{PreprocessError, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Chronological train/val/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    /// 6:2:2, used for the ETT family.
    pub const ETT: Self = Self {
        train: 6.0,
        val: 2.0,
        test: 2.0,
    };
    /// 7:1:2, used for every other benchmark.
    pub const STANDARD: Self = Self {
        train: 7.0,
        val: 1.0,
        test: 2.0,
    };

    /// Step counts `(train, val, test)` for a series of length `n`.
    /// Train and test are floored; validation takes the remainder.
    pub fn borders(&self, n: usize) -> (usize, usize, usize) {
        let total = self.train + self.val + self.test;
        let n_train = (n as f64 * self.train / total).floor() as usize;
        let n_test = (n as f64 * self.test / total).floor() as usize;
        (n_train, n - n_train - n_test, n_test)
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn from_prefix(series: &Series, len: usize) -> Self {
        let (mean, std) = series
            .channels
            .iter()
            .map(|c| {
                let c = &c[..len];
                let m = c.iter().sum::<f64>() / len as f64;
                let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / len as f64;
                let s = v.sqrt();
                (m, if s > 1e-12 { s } else { 1.0 })
            })
            .unzip();
        Self { mean, std }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct WindowOptions {
    pub lookback: usize,
    pub horizon: usize,
    pub ratios: SplitRatios,
    pub few_shot_fraction: Option<f64>,
    pub zscore: bool,
}

/// Sliding-window view of a series with chronological split tags.
///
/// Training windows lie entirely inside the train region. Validation and
/// test windows may reach back `lookback` steps into the previous region
/// for their history, but their targets stay inside their own split.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    values: Arc<Series>,
    lookback: usize,
    horizon: usize,
    windows: Vec<Window>,
    stats: ChannelStats,
    borders: (usize, usize, usize),
}

pub fn build_windows(series: &Series, opts: &WindowOptions) -> Result<WindowedDataset, PreprocessError> {
    let stats = if opts.zscore {
        let (n_train, _, _) = opts.ratios.borders(series.len());
        if n_train == 0 {
            return Err(PreprocessError::EmptySplit {
                split: Split::Train,
                detail: format!("series of {} steps has no train region", series.len()),
            });
        }
        ChannelStats::from_prefix(series, n_train)
    } else {
        ChannelStats::identity(series.num_channels())
    };
    build_windows_with_stats(series, opts, stats)
}

/// Like [`build_windows`] but with externally supplied z-score statistics.
pub fn build_windows_with_stats(
    series: &Series,
    opts: &WindowOptions,
    stats: ChannelStats,
) -> Result<WindowedDataset, PreprocessError> {
    let (l, h) = (opts.lookback, opts.horizon);
    if l == 0 || h == 0 {
        return Err(PreprocessError::Config("lookback and horizon must be positive".into()));
    }
    if let Some(f) = opts.few_shot_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(PreprocessError::Config(format!("few-shot fraction {f} outside (0, 1]")));
        }
    }
    if stats.mean.len() != series.num_channels() {
        return Err(PreprocessError::Config(format!(
            "stats for {} channels, series has {}",
            stats.mean.len(),
            series.num_channels()
        )));
    }
    let n = series.len();
    let borders = opts.ratios.borders(n);
    let (n_train, n_val, _) = borders;
    let regions = [
        (Split::Train, 0usize, n_train),
        (Split::Val, n_train, n_train + n_val),
        (Split::Test, n_train + n_val, n),
    ];
    let mut windows = Vec::new();
    for (split, begin, end) in regions {
        // history may start before `begin` except for train
        let first = if split == Split::Train {
            0
        } else {
            begin.saturating_sub(l)
        };
        let target_floor = begin.max(l);
        let mut starts: Vec<usize> = (first..)
            .take_while(|&s| s + l + h <= end)
            .filter(|&s| s + l >= target_floor)
            .collect();
        if starts.is_empty() {
            return Err(PreprocessError::EmptySplit {
                split,
                detail: format!(
                    "{} steps in region [{begin}, {end}) cannot hold lookback {l} + horizon {h}",
                    end - begin
                ),
            });
        }
        if split == Split::Train {
            if let Some(f) = opts.few_shot_fraction {
                let keep = ((starts.len() as f64 * f).ceil() as usize).clamp(1, starts.len());
                starts.truncate(keep);
            }
        }
        windows.extend(starts.into_iter().map(|start| Window { start, split }));
    }

    let channels = series
        .channels
        .iter()
        .enumerate()
        .map(|(c, vals)| vals.iter().map(|v| (v - stats.mean[c]) / stats.std[c]).collect())
        .collect();
    let values = Series::new(series.timestamps.clone(), series.names.clone(), channels)?;
    Ok(WindowedDataset {
        values: Arc::new(values),
        lookback: l,
        horizon: h,
        windows,
        stats,
        borders,
    })
}

impl WindowedDataset {
    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_channels(&self) -> usize {
        self.values.num_channels()
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// Step counts of the train, val and test regions.
    pub fn borders(&self) -> (usize, usize, usize) {
        self.borders
    }

    /// The (possibly z-scored) series the windows index into.
    pub fn values(&self) -> &Series {
        &self.values
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn starts(&self, split: Split) -> Vec<usize> {
        self.windows
            .iter()
            .filter(|w| w.split == split)
            .map(|w| w.start)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.windows.iter().filter(|w| w.split == split).count()
    }

    /// Train starts in a seeded order for one epoch.
    pub fn shuffled_train(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut starts = self.starts(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        starts.shuffle(&mut rng);
        starts
    }

    /// History `[B, L, N]` and target `[B, H, N]` for the given window starts.
    pub fn batch(&self, starts: &[usize]) -> Result<(Tensor, Tensor), PreprocessError> {
        let (l, h, n) = (self.lookback, self.horizon, self.num_channels());
        let mut x = Vec::with_capacity(starts.len() * l * n);
        let mut y = Vec::with_capacity(starts.len() * h * n);
        for &s in starts {
            if s + l + h > self.values.len() {
                return Err(PreprocessError::Config(format!("window start {s} out of range")));
            }
            for t in s..s + l {
                x.extend(self.values.channels.iter().map(|c| c[t]));
            }
            for t in s + l..s + l + h {
                y.extend(self.values.channels.iter().map(|c| c[t]));
            }
        }
        let b = starts.len();
        Ok((Tensor::new(&[b, l, n], x)?, Tensor::new(&[b, h, n], y)?))
    }

    /// History values of one channel for the window at `start`.
    pub fn history(&self, start: usize, channel: usize) -> &[f64] {
        &self.values.channels[channel][start..start + self.lookback]
    }

    /// First and last timestamps of the history at `start`.
    pub fn history_span(&self, start: usize) -> (&str, &str) {
        let ts = &self.values.timestamps;
        (&ts[start], &ts[start + self.lookback - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize, channels: usize) -> Series {
        Series::new(
            (0..n).map(|t| t.to_string()).collect(),
            (0..channels).map(|c| format!("c{c}")).collect(),
            (0..channels)
                .map(|c| (0..n).map(|t| (t * (c + 1)) as f64).collect())
                .collect(),
        )
        .unwrap()
    }

    fn opts(l: usize, h: usize, f: Option<f64>) -> WindowOptions {
        WindowOptions {
            lookback: l,
            horizon: h,
            ratios: SplitRatios::ETT,
            few_shot_fraction: f,
            zscore: true,
        }
    }

    #[test]
    fn ett_split_counts() {
        let ds = build_windows(&ramp(1000, 1), &opts(96, 96, None)).unwrap();
        assert_eq!(ds.borders(), (600, 200, 200));
        // brute force: every start with history and target inside [0, 600)
        let brute = (0..1000).filter(|s| s + 96 + 96 <= 600).count();
        assert_eq!(brute, 409);
        assert_eq!(ds.count(Split::Train), brute);
        assert_eq!(ds.count(Split::Val), 200 - 96 + 1);
    }

    #[test]
    fn full_fraction_matches_no_fraction() {
        let a = build_windows(&ramp(1000, 2), &opts(96, 96, None)).unwrap();
        let b = build_windows(&ramp(1000, 2), &opts(96, 96, Some(1.0))).unwrap();
        assert_eq!(a.windows(), b.windows());
    }

    #[test]
    fn benchmark_horizons_accepted() {
        for h in [96, 192, 336, 720] {
            build_windows(&ramp(5000, 1), &opts(96, h, None)).unwrap();
        }
    }

    #[test]
    fn short_series_is_empty_split_error() {
        let err = build_windows(&ramp(150, 1), &opts(96, 96, None)).unwrap_err();
        assert!(matches!(
            err,
            PreprocessError::EmptySplit {
                split: Split::Train,
                ..
            }
        ));
    }

    #[test]
    fn zscore_uses_train_region_only() {
        let s = ramp(1000, 1);
        let ds = build_windows(&s, &opts(96, 96, None)).unwrap();
        let train: Vec<f64> = s.channels[0][..600].to_vec();
        let m = train.iter().sum::<f64>() / 600.0;
        assert!((ds.stats().mean[0] - m).abs() < 1e-12);
    }

    #[test]
    fn batch_layout() {
        let ds = build_windows(
            &ramp(1000, 2),
            &WindowOptions {
                zscore: false,
                ..opts(4, 2, None)
            },
        )
        .unwrap();
        let (x, y) = ds.batch(&[10]).unwrap();
        assert_eq!(x.shape(), &[1, 4, 2]);
        assert_eq!(x.data(), &[10., 20., 11., 22., 12., 24., 13., 26.]);
        assert_eq!(y.data(), &[14., 28., 15., 30.]);
    }

    #[test]
    fn test_targets_never_in_train_region() {
        let ds = build_windows(&ramp(1000, 1), &opts(96, 96, None)).unwrap();
        let (n_train, n_val, _) = ds.borders();
        for w in ds.windows() {
            let target = w.start + 96..w.start + 192;
            match w.split {
                Split::Train => assert!(target.end <= n_train),
                Split::Val => assert!(target.start >= n_train && target.end <= n_train + n_val),
                Split::Test => assert!(target.start >= n_train + n_val),
            }
        }
    }

    proptest! {
        #[test]
        fn few_shot_is_monotone(f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let s = ramp(800, 1);
            let a = build_windows(&s, &opts(24, 12, Some(lo))).unwrap();
            let b = build_windows(&s, &opts(24, 12, Some(hi))).unwrap();
            prop_assert!(a.count(Split::Train) <= b.count(Split::Train));
            prop_assert_eq!(a.starts(Split::Train)[0], 0);
        }
    }
}
