//! On-disk formats: trajectory CSV input and the windowed dataset
//! (`<stem>.bin` little-endian `f64` array plus a `<stem>.json` sidecar).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    compute_ttc, differentiate_speed, ChannelStats, InteractionWindow, CHANNELS, CHANNEL_NAMES, DT, OBSERVED_LEN,
    WINDOW_LEN,
};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One row of the trajectory CSV (`vehicle_id,timestamp,x,y,vx,vy,yaw`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: String,
    pub timestamp: f64,
    #[serde(rename = "x")]
    pub position_x: f64,
    #[serde(rename = "y")]
    pub position_y: f64,
    #[serde(rename = "vx")]
    pub velocity_x: f64,
    #[serde(rename = "vy")]
    pub velocity_y: f64,
    pub yaw: f64,
}

impl TrajectoryRecord {
    /// Speed projected on the heading, floored at zero.
    pub fn longitudinal_speed(&self) -> f64 {
        (self.velocity_x * self.yaw.cos() + self.velocity_y * self.yaw.sin()).max(0.0)
    }

    fn frame(&self) -> i64 {
        (self.timestamp / DT).round() as i64
    }
}

/// Reads and validates a trajectory CSV, grouped by vehicle in time order.
pub fn read_trajectories(path: &Path) -> Result<BTreeMap<String, Vec<TrajectoryRecord>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["vehicle_id", "timestamp", "x", "y", "vx", "vy", "yaw"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "trajectory header must be `{}`, got `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut by_vehicle: BTreeMap<String, Vec<TrajectoryRecord>> = BTreeMap::new();
    for row in reader.deserialize() {
        let rec: TrajectoryRecord = row?;
        if !(rec.velocity_x.is_finite() && rec.velocity_y.is_finite()) {
            return Err(Error::Data(format!("non-finite velocity for vehicle {}", rec.vehicle_id)));
        }
        by_vehicle.entry(rec.vehicle_id.clone()).or_default().push(rec);
    }
    for (id, recs) in &by_vehicle {
        for pair in recs.windows(2) {
            let step = pair[1].timestamp - pair[0].timestamp;
            if (step - DT).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "vehicle {id}: timestamps must increase in steps of {DT} s, saw {:.4} -> {:.4}",
                    pair[0].timestamp, pair[1].timestamp
                )));
            }
        }
    }
    Ok(by_vehicle)
}

/// Gap model used to derive TTC from a follower/leader pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtcGeometry {
    /// Straight-line distance with the longitudinal closing-speed model.
    #[default]
    Longitudinal,
    /// Conflicting paths at intersections and roundabouts.
    General2d,
}

/// Builds the `L x 5` channel stream for a follower/leader pair over their
/// longest run of shared consecutive frames.
pub fn pair_stream(
    follower: &[TrajectoryRecord],
    leader: &[TrajectoryRecord],
    ttc_cap: f64,
    geometry: TtcGeometry,
) -> Result<Array2<f64>> {
    if geometry == TtcGeometry::General2d {
        return Err(Error::Unimplemented(
            "TTC for general 2-D conflicting paths is not implemented; use the longitudinal model".into(),
        ));
    }
    let leader_by_frame: BTreeMap<i64, &TrajectoryRecord> = leader.iter().map(|r| (r.frame(), r)).collect();
    let mut best: Vec<(&TrajectoryRecord, &TrajectoryRecord)> = Vec::new();
    let mut run: Vec<(&TrajectoryRecord, &TrajectoryRecord)> = Vec::new();
    let mut last_frame = None;
    for f in follower {
        match leader_by_frame.get(&f.frame()) {
            Some(l) if last_frame.is_none_or(|p: i64| p + 1 == f.frame()) => run.push((f, l)),
            Some(l) => {
                if run.len() > best.len() {
                    best = std::mem::take(&mut run);
                }
                run = vec![(f, l)];
            }
            None => {
                if run.len() > best.len() {
                    best = std::mem::take(&mut run);
                }
                run.clear();
            }
        }
        last_frame = Some(f.frame());
    }
    if run.len() > best.len() {
        best = run;
    }
    if best.len() < 3 {
        return Ok(Array2::zeros((0, CHANNELS)));
    }
    let vi: Vec<f64> = best.iter().map(|(f, _)| f.longitudinal_speed()).collect();
    let vj: Vec<f64> = best.iter().map(|(_, l)| l.longitudinal_speed()).collect();
    let ai = differentiate_speed(&vi, DT)?;
    let aj = differentiate_speed(&vj, DT)?;
    let mut out = Array2::zeros((best.len(), CHANNELS));
    for (t, (f, l)) in best.iter().enumerate() {
        let gap = ((l.position_x - f.position_x).powi(2) + (l.position_y - f.position_y).powi(2)).sqrt();
        out[[t, 0]] = vi[t];
        out[[t, 1]] = vj[t];
        out[[t, 2]] = ai[t];
        out[[t, 3]] = aj[t];
        out[[t, 4]] = compute_ttc(gap, vi[t], vj[t], ttc_cap)?;
    }
    Ok(out)
}

/// Whether stored values are physical units or standardised model space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpace {
    Physical,
    Standardized,
}

/// JSON sidecar describing a windowed dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub shape: [usize; 3],
    pub channels: Vec<String>,
    pub dt: f64,
    pub observed_len: usize,
    pub space: ValueSpace,
    pub ttc_cap: f64,
    pub stats: Option<ChannelStats>,
    pub filter_threshold: Option<f64>,
    pub seed: Option<u64>,
    /// Per-window source tag (e.g. scenario index), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origins: Option<Vec<u32>>,
}

impl DatasetMeta {
    pub fn new(n: usize, space: ValueSpace, ttc_cap: f64) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            shape: [n, WINDOW_LEN, CHANNELS],
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            dt: DT,
            observed_len: OBSERVED_LEN,
            space,
            ttc_cap,
            stats: None,
            filter_threshold: None,
            seed: None,
            origins: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub windows: Vec<InteractionWindow>,
    pub meta: DatasetMeta,
}

pub fn dataset_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

impl WindowDataset {
    pub fn new(windows: Vec<InteractionWindow>, mut meta: DatasetMeta) -> Self {
        meta.shape = [windows.len(), WINDOW_LEN, CHANNELS];
        Self { windows, meta }
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let (bin, json) = dataset_paths(stem);
        if let Some(dir) = bin.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = Vec::with_capacity(self.windows.len() * WINDOW_LEN * CHANNELS * 8);
        for w in &self.windows {
            for v in w.values().iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&bin, bytes)?;
        fs::write(&json, serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (bin, json) = dataset_paths(stem);
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&json)?)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported dataset format version {}", meta.format_version)));
        }
        if meta.shape[1..] != [WINDOW_LEN, CHANNELS] {
            return Err(Error::Data(format!("unexpected window shape {:?}", meta.shape)));
        }
        let bytes = fs::read(&bin)?;
        let per_window = WINDOW_LEN * CHANNELS * 8;
        if bytes.len() != meta.shape[0] * per_window {
            return Err(Error::Data(format!(
                "{} holds {} bytes but the sidecar declares {} windows",
                bin.display(),
                bytes.len(),
                meta.shape[0]
            )));
        }
        let windows = bytes
            .chunks_exact(per_window)
            .map(|chunk| {
                let vals: Vec<f64> = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                InteractionWindow::new(Array2::from_shape_vec((WINDOW_LEN, CHANNELS), vals).expect("shape"))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(origins) = &meta.origins {
            if origins.len() != windows.len() {
                return Err(Error::Data("origin tags do not match the window count".into()));
            }
        }
        Ok(Self { windows, meta })
    }
}
