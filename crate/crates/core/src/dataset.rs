//! Random ITU-style rooms, their simulated fields, and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.toml` plus one `room_<id>.f32` per room:
//! `32 * 32 * 40` little-endian f32 values ordered `[k][j][i]` (204 800 bytes).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldTensor, FrequencyGrid, GridSpec};
use crate::modal::{ModalModel, RoomSpec, DEFAULT_T60, SPEED_OF_SOUND};
use crate::rng::{self, Rng};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.75;
const MAX_REJECTIONS: usize = 10_000;

/// `1.1 l_y/l_z <= l_x/l_z <= 4.5 l_y/l_z - 4`.
pub fn itu_ratio_ok(l_x: f64, l_y: f64, l_z: f64) -> bool {
    let rx = l_x / l_z;
    let ry = l_y / l_z;
    1.1 * ry <= rx && rx <= 4.5 * ry - 4.0
}

/// Proposal ranges for the rejection sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSampler {
    pub floor_area: (f64, f64),
    pub height: (f64, f64),
    pub aspect: (f64, f64),
    pub t60: f64,
    pub c: f64,
}

impl Default for RoomSampler {
    fn default() -> Self {
        Self {
            floor_area: (20.0, 60.0),
            height: (2.2, 3.5),
            aspect: (1.0, 4.0),
            t60: DEFAULT_T60,
            c: SPEED_OF_SOUND,
        }
    }
}

impl RoomSampler {
    /// One proposal: `(l_x, l_y, l_z)` with `l_x >= l_y`, not yet filtered.
    pub fn propose(&self, rng: &mut Rng) -> (f64, f64, f64) {
        let area = rng.random_range(self.floor_area.0..=self.floor_area.1);
        let l_z = rng.random_range(self.height.0..=self.height.1);
        let aspect = rng.random_range(self.aspect.0..=self.aspect.1);
        let l_x = (area * aspect).sqrt();
        let l_y = (area / aspect).sqrt();
        (l_x, l_y, l_z)
    }

    /// Draws a room geometry satisfying the ITU ratio constraint. The source is
    /// left at the floor centre; see [`sample_source`].
    pub fn sample_room(&self, rng: &mut Rng) -> Result<RoomSpec> {
        for _ in 0..MAX_REJECTIONS {
            let (l_x, l_y, l_z) = self.propose(rng);
            if itu_ratio_ok(l_x, l_y, l_z) {
                let room = RoomSpec {
                    l_x,
                    l_y,
                    l_z,
                    t60: self.t60,
                    c: self.c,
                    source: (0.5 * l_x, 0.5 * l_y),
                };
                room.validate()?;
                return Ok(room);
            }
        }
        Err(Error::RejectionLimit(MAX_REJECTIONS))
    }
}

pub fn sample_room(rng: &mut Rng) -> Result<RoomSpec> {
    RoomSampler::default().sample_room(rng)
}

/// Uniform point in the open floor rectangle.
pub fn sample_source(rng: &mut Rng, room: &RoomSpec) -> (f64, f64) {
    let open = |rng: &mut Rng, l: f64| loop {
        let v = rng.random::<f64>() * l;
        if v > 0.0 && v < l {
            return v;
        }
    };
    let x = open(rng, room.l_x);
    let y = open(rng, room.l_y);
    (x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomRecord {
    pub id: usize,
    pub split: Split,
    pub file: String,
    pub room: RoomSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_rooms: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub grid: GridSpec,
    pub model: ModalModel,
    pub sampler: RoomSampler,
    pub frequencies: Vec<f64>,
    pub rooms: Vec<RoomRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.rooms
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id)
            .collect()
    }

    pub fn all_ids(&self) -> Vec<usize> {
        self.rooms.iter().map(|r| r.id).collect()
    }

    pub fn record(&self, room_id: usize) -> Result<&RoomRecord> {
        self.rooms
            .iter()
            .find(|r| r.id == room_id)
            .ok_or(Error::RoomNotFound(room_id))
    }

    pub fn freqs(&self) -> FrequencyGrid {
        FrequencyGrid {
            frequencies: self.frequencies.clone(),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        manifest.root = dir.to_path_buf();
        Ok(manifest)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_rooms: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub grid: GridSpec,
    pub model: ModalModel,
    pub sampler: RoomSampler,
}

impl DatasetConfig {
    pub fn new(n_rooms: usize, seed: u64) -> Self {
        Self {
            n_rooms,
            seed,
            split_fraction: DEFAULT_SPLIT_FRACTION,
            grid: GridSpec::default(),
            model: ModalModel::default(),
            sampler: RoomSampler::default(),
        }
    }
}

pub fn field_file_name(room_id: usize) -> String {
    format!("room_{room_id:04}.f32")
}

/// Room `room_id` of a dataset seeded with `seed`: geometry and source come from
/// the room's own RNG stream, so rooms can be produced in any order.
pub fn synthesize_room(
    config: &DatasetConfig,
    freqs: &FrequencyGrid,
    room_id: usize,
) -> Result<FieldTensor> {
    let mut rng = rng::stream(config.seed, room_id as u64 + 1);
    let mut room = config.sampler.sample_room(&mut rng)?;
    room.source = sample_source(&mut rng, &room);
    config.model.magnitude_field(&room, &config.grid, freqs)
}

/// Simulates `n_rooms` fields into `out_dir` and writes the manifest.
pub fn generate_dataset(config: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if config.n_rooms < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rooms, got {}",
            config.n_rooms
        )));
    }
    if !(config.split_fraction > 0.0 && config.split_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {} outside (0, 1)",
            config.split_fraction
        )));
    }
    config.grid.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let freqs = FrequencyGrid::standard();

    let rooms: Vec<RoomSpec> = (0..config.n_rooms)
        .into_par_iter()
        .map(|id| {
            let field = synthesize_room(config, &freqs, id)?;
            write_field(&out_dir.join(field_file_name(id)), &field)?;
            Ok(field.room)
        })
        .collect::<Result<_>>()?;

    let n_train = (config.split_fraction * config.n_rooms as f64).floor() as usize;
    let mut order: Vec<usize> = (0..config.n_rooms).collect();
    order.shuffle(&mut rng::stream(config.seed, 0));
    let mut split = vec![Split::Validation; config.n_rooms];
    for &id in &order[..n_train] {
        split[id] = Split::Train;
    }

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        n_rooms: config.n_rooms,
        seed: config.seed,
        split_fraction: config.split_fraction,
        n_train,
        n_validation: config.n_rooms - n_train,
        grid: config.grid,
        model: config.model,
        sampler: config.sampler,
        frequencies: freqs.frequencies.clone(),
        rooms: rooms
            .into_iter()
            .enumerate()
            .map(|(id, room)| RoomRecord {
                id,
                split: split[id],
                file: field_file_name(id),
                room,
            })
            .collect(),
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

pub fn write_field(path: &Path, field: &FieldTensor) -> Result<()> {
    let bytes: Vec<u8> = field
        .values()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path, n: usize, n_freq: usize, room: RoomSpec) -> Result<FieldTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = n * n * n_freq * 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FieldTensor::new(n, n_freq, values, room).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_field(manifest: &DatasetManifest, room_id: usize) -> Result<FieldTensor> {
    let record = manifest.record(room_id)?;
    read_field(
        &manifest.root.join(&record.file),
        manifest.grid.fine_n,
        manifest.frequencies.len(),
        record.room,
    )
}

/// Loads every listed room in order.
pub fn load_fields(manifest: &DatasetManifest, ids: &[usize]) -> Result<Vec<FieldTensor>> {
    ids.iter().map(|&id| load_field(manifest, id)).collect()
}
