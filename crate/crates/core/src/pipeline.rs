//! Dataset preparation: TTC filtering, splitting, and standardization with
//! statistics fitted on the training split only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::io::{ValueSpace, WindowDataset};
use crate::ssm::{split_dataset_indexed, ChannelStats, DatasetSplit, DEFAULT_MIN_TTC_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    /// Keep windows whose minimum TTC is at most this many seconds; `None` keeps all.
    #[serde(default = "default_threshold")]
    pub filter_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> Option<f64> {
    Some(DEFAULT_MIN_TTC_THRESHOLD)
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            filter_threshold: default_threshold(),
            seed: 0,
        }
    }
}

/// Standardized splits plus the statistics that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub stats: ChannelStats,
    pub ttc_cap: f64,
    /// Source tags per split, when the input carried them.
    pub origins: Option<[Vec<u32>; 3]>,
    pub filter_threshold: Option<f64>,
    pub seed: u64,
    /// Windows before and after filtering.
    pub counts: (usize, usize),
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

pub fn prepare(dataset: &WindowDataset, config: &PrepareConfig) -> Result<PreparedData> {
    if dataset.meta.space != ValueSpace::Physical {
        return Err(Error::Data("prepare expects a dataset in physical units".into()));
    }
    let before = dataset.windows.len();
    let keep: Vec<usize> = (0..before)
        .filter(|i| config.filter_threshold.is_none_or(|th| dataset.windows[*i].min_ttc() <= th))
        .collect();
    let windows: Vec<_> = keep.iter().map(|i| dataset.windows[*i].clone()).collect();
    let (raw, idx) = split_dataset_indexed(windows, config.seed)?;
    let stats = ChannelStats::fit(&raw.train)?;
    let split = DatasetSplit {
        train: crate::ssm::standardize(&raw.train, &stats),
        validation: crate::ssm::standardize(&raw.validation, &stats),
        test: crate::ssm::standardize(&raw.test, &stats),
    };
    let origins = dataset.meta.origins.as_ref().map(|o| idx.map(|part| part.iter().map(|i| o[keep[*i]]).collect()));
    Ok(PreparedData {
        split,
        stats,
        ttc_cap: dataset.meta.ttc_cap,
        origins,
        filter_threshold: config.filter_threshold,
        seed: config.seed,
        counts: (before, keep.len()),
    })
}

impl PreparedData {
    fn parts(&self) -> [&Vec<crate::ssm::InteractionWindow>; 3] {
        [&self.split.train, &self.split.validation, &self.split.test]
    }

    /// Writes `train`, `validation` and `test` datasets into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (i, (name, part)) in SPLIT_NAMES.iter().zip(self.parts()).enumerate() {
            let mut meta = crate::ssm::io::DatasetMeta::new(part.len(), ValueSpace::Standardized, self.ttc_cap);
            meta.stats = Some(self.stats.clone());
            meta.filter_threshold = self.filter_threshold;
            meta.seed = Some(self.seed);
            meta.origins = self.origins.as_ref().map(|o| o[i].clone());
            WindowDataset::new(part.clone(), meta).write(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut sets = Vec::with_capacity(3);
        for name in SPLIT_NAMES {
            let ds = WindowDataset::read(&dir.join(name))?;
            if ds.meta.space != ValueSpace::Standardized || ds.meta.stats.is_none() {
                return Err(Error::Data(format!("split `{name}` is not a standardized dataset")));
            }
            sets.push(ds);
        }
        let stats = sets[0].meta.stats.clone().expect("checked");
        if sets.iter().any(|s| s.meta.stats.as_ref() != Some(&stats)) {
            return Err(Error::Data("splits disagree on channel statistics".into()));
        }
        let origins = if sets.iter().all(|s| s.meta.origins.is_some()) {
            Some([0, 1, 2].map(|i| sets[i].meta.origins.clone().expect("checked")))
        } else {
            None
        };
        let n: usize = sets.iter().map(|s| s.windows.len()).sum();
        let (ttc_cap, filter_threshold, seed) = (sets[0].meta.ttc_cap, sets[0].meta.filter_threshold, sets[0].meta.seed.unwrap_or(0));
        let mut it = sets.into_iter().map(|s| s.windows);
        Ok(Self {
            split: DatasetSplit {
                train: it.next().expect("three"),
                validation: it.next().expect("three"),
                test: it.next().expect("three"),
            },
            stats,
            ttc_cap,
            origins,
            filter_threshold,
            seed,
            counts: (n, n),
        })
    }
}
