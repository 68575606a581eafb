//! Dataset directory format.
//!
//! ```text
//! <dir>/routes.jsonl   one route per line, with its split label
//! <dir>/schema.json    FeatureSchema
//! <dir>/dataset.json   format version, generator seed, vehicle fleet
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, LatentConditions, Route, Segment, Split, VehicleModel};
use crate::error::{CoreError, Result};
use crate::schema::FeatureSchema;

pub const DATASET_FORMAT_VERSION: &str = "evroute-dataset/1";

pub const ROUTES_FILE: &str = "routes.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";
pub const META_FILE: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteLine {
    route_id: String,
    vehicle_id: usize,
    split: Split,
    segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy_wh: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latents: Option<LatentConditions>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format_version: String,
    generator_seed: u64,
    fleet: Vec<VehicleModel>,
}

pub fn routes_path(dir: &Path) -> PathBuf {
    dir.join(ROUTES_FILE)
}

pub fn schema_path(dir: &Path) -> PathBuf {
    dir.join(SCHEMA_FILE)
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join(META_FILE)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Parse { line: e.line(), msg: format!("{}: {e}", path.display()) })
}

pub fn write_schema(schema: &FeatureSchema, path: &Path) -> Result<()> {
    write_json(path, schema)
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let raw: serde_json::Value = read_json(path)?;
    check_version(&raw, "version", "feature schema", crate::schema::SCHEMA_VERSION)?;
    let schema: FeatureSchema =
        serde_json::from_value(raw).map_err(|e| CoreError::Parse { line: 0, msg: format!("{}: {e}", path.display()) })?;
    schema.validate()?;
    Ok(schema)
}

fn check_version(raw: &serde_json::Value, key: &str, what: &'static str, expected: &str) -> Result<()> {
    match raw.get(key).and_then(|v| v.as_str()) {
        Some(v) if v == expected => Ok(()),
        other => Err(CoreError::Version {
            what,
            found: other.unwrap_or("<missing>").to_string(),
            expected: expected.to_string(),
        }),
    }
}

/// Writes `dataset` into `dir`, creating it if needed. Output is a pure
/// function of the dataset contents.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;

    let path = routes_path(dir);
    let file = File::create(&path).map_err(|e| CoreError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in &dataset.routes {
        let line = RouteLine {
            route_id: r.route_id.clone(),
            vehicle_id: r.vehicle_id,
            split: dataset.split[&r.route_id],
            segments: r.segments.clone(),
            energy_wh: r.actual_energy.clone(),
            latents: r.latents,
        };
        serde_json::to_writer(&mut w, &line).expect("plain data serializes");
        w.write_all(b"\n").map_err(|e| CoreError::io(&path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(&path, e))?;

    write_schema(&dataset.schema, &schema_path(dir))?;
    write_json(
        &meta_path(dir),
        &DatasetMeta {
            format_version: DATASET_FORMAT_VERSION.into(),
            generator_seed: dataset.generator_seed,
            fleet: dataset.fleet.clone(),
        },
    )
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_raw: serde_json::Value = read_json(&meta_path(dir))?;
    check_version(&meta_raw, "format_version", "dataset", DATASET_FORMAT_VERSION)?;
    let meta: DatasetMeta = serde_json::from_value(meta_raw)
        .map_err(|e| CoreError::Parse { line: 0, msg: format!("{}: {e}", meta_path(dir).display()) })?;
    let schema = read_schema(&schema_path(dir))?;

    let path = routes_path(dir);
    let file = File::open(&path).map_err(|e| CoreError::io(&path, e))?;
    let mut routes = Vec::new();
    let mut split = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RouteLine =
            serde_json::from_str(&line).map_err(|e| CoreError::Parse { line: i + 1, msg: e.to_string() })?;
        if split.insert(parsed.route_id.clone(), parsed.split).is_some() {
            return Err(CoreError::Parse { line: i + 1, msg: format!("duplicate route id `{}`", parsed.route_id) });
        }
        let route = Route {
            route_id: parsed.route_id,
            vehicle_id: parsed.vehicle_id,
            segments: parsed.segments,
            actual_energy: parsed.energy_wh,
            latents: parsed.latents,
        };
        route.validate().map_err(|e| CoreError::Parse { line: i + 1, msg: e.to_string() })?;
        routes.push(route);
    }
    let dataset = Dataset { routes, split, generator_seed: meta.generator_seed, schema, fleet: meta.fleet };
    dataset.validate()?;
    Ok(dataset)
}
