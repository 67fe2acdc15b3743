//! Loading a corridor (network plus feature bundle) from the configured files,
//! and the binary feature cache written by `ingest`.
//!
//! Cache layout, little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `GCNRWZFC` |
//! | 4     | version (u32) |
//! | 8     | header length `L` (u64) |
//! | L     | JSON header: segment ids, calendar, normalizer, options, events |
//! | 6·N·T·8 | maps as f64: speed, mask, history, diff, construction, binary construction |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::features::{
    load_speed_csv, load_workzones_csv, Calendar, FeatureBundle, FeatureMap, FeatureOptions, Normalizer, WorkZoneEvent,
};
use crate::graph::RoadNetwork;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"GCNRWZFC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Corridor {
    pub network: RoadNetwork,
    pub bundle: FeatureBundle,
}

pub fn load_network(data: &DataConfig) -> Result<RoadNetwork> {
    match (&data.distances, &data.coordinates) {
        (Some(d), _) => RoadNetwork::from_distance_csv(d, data.adjacency_radius),
        (None, Some(c)) => RoadNetwork::from_coordinates_csv(c, data.adjacency_radius),
        (None, None) => Err(Error::Config("no distance or coordinate file configured".into())),
    }
}

impl Corridor {
    /// Parses the CSV inputs and builds every feature map.
    pub fn from_files(data: &DataConfig, options: FeatureOptions) -> Result<Self> {
        let network = load_network(data)?;
        let (series, calendar) = load_speed_csv(&data.speeds, Some(&network))?;
        let events = match &data.workzones {
            Some(p) => load_workzones_csv(p)?,
            None => Vec::new(),
        };
        let bundle = FeatureBundle::build(&series, &calendar, &network, &events, options)?;
        Ok(Self { network, bundle })
    }

    /// Uses the feature cache when it exists and was built with the same
    /// options and segments; otherwise parses the CSVs.
    pub fn load(data: &DataConfig, options: FeatureOptions) -> Result<Self> {
        if let Some(cache) = data.cache.as_deref().filter(|p| p.exists()) {
            let network = load_network(data)?;
            match read_cache(cache) {
                Ok(bundle) if bundle.options == options && bundle.segment_ids == network.segment_ids() => {
                    log::info!("features loaded from cache {}", cache.display());
                    return Ok(Self { network, bundle });
                }
                Ok(_) => log::warn!("feature cache {} is stale; rebuilding", cache.display()),
                Err(e) => log::warn!("feature cache {} unreadable ({e}); rebuilding", cache.display()),
            }
        }
        Self::from_files(data, options)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    segment_ids: Vec<String>,
    calendar: Calendar,
    normalizer: Normalizer,
    plan_train_end: usize,
    options: FeatureOptions,
    events: Vec<WorkZoneEvent>,
}

pub fn write_cache(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let header = serde_json::to_vec(&CacheHeader {
        segment_ids: bundle.segment_ids.clone(),
        calendar: bundle.calendar,
        normalizer: bundle.normalizer,
        plan_train_end: bundle.plan_train_end,
        options: bundle.options,
        events: bundle.events.clone(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_u64::<LittleEndian>(header.len() as u64)?;
    w.write_all(&header)?;
    for map in maps(bundle) {
        for &v in map.values() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn maps(b: &FeatureBundle) -> [&FeatureMap; 6] {
    [&b.speed, &b.mask, &b.history, &b.diff, &b.construction, &b.binary_construction]
}

pub fn read_cache(path: &Path) -> Result<FeatureBundle> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Schema(format!("{} is not a feature cache", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(Error::Schema(format!("feature cache version {version} is not supported")));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let h: CacheHeader = serde_json::from_slice(&header)?;
    let (n, t) = (h.segment_ids.len(), h.calendar.len);
    let mut read_map = || -> Result<FeatureMap> {
        let mut v = vec![0.0; n * t];
        r.read_f64_into::<LittleEndian>(&mut v)?;
        FeatureMap::new(n, t, v)
    };
    let speed = read_map()?;
    let mask = read_map()?;
    let history = read_map()?;
    let diff = read_map()?;
    let construction = read_map()?;
    let binary_construction = read_map()?;
    Ok(FeatureBundle {
        segment_ids: h.segment_ids,
        calendar: h.calendar,
        speed,
        mask,
        history,
        diff,
        construction,
        binary_construction,
        time_slots: h.calendar.slots(),
        normalizer: h.normalizer,
        plan_train_end: h.plan_train_end,
        options: h.options,
        events: h.events,
    })
}
