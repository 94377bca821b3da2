//! Cartesian parameter sweeps over one base scenario.
//!
//! The grid file lists dotted key paths into the base config and the values
//! each one takes; array elements are addressed by index:
//!
//! ```toml
//! jobs = 4
//! [axes]
//! "params.network.epsilon" = [0.0, 1.0, 2.0]
//! "params.packets.0.offset" = [-25.0, -30.0]
//! "seed" = [1, 2]
//! ```
//!
//! Every point is parsed and checked before anything runs. Points run on a
//! worker pool, each in its own `point-NNNN` directory, and `sweep.csv`
//! indexes them.

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

use super::output::{fmt_f64, write_atomic, Table};
use super::{run, CliError, Format, Scenario, Source};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    /// Worker threads; defaults to the available parallelism.
    #[serde(default)]
    pub jobs: Option<usize>,
    pub axes: BTreeMap<String, Vec<Value>>,
}

impl Grid {
    pub fn parse(src: &Source) -> Result<Self, CliError> {
        let g: Grid = match src.format {
            Format::Toml => toml::from_str(&src.text).map_err(|e| CliError::Sweep(format!("{}: {e}", src.origin)))?,
            Format::Json => serde_json::from_str(&src.text).map_err(|e| CliError::Sweep(format!("{}: {e}", src.origin)))?,
        };
        if g.axes.is_empty() || g.axes.values().any(|v| v.is_empty()) {
            return Err(CliError::Sweep(format!("{}: every axis needs at least one value", src.origin)));
        }
        if g.jobs == Some(0) {
            return Err(CliError::Sweep(format!("{}: jobs must be positive", src.origin)));
        }
        Ok(g)
    }

    /// All combinations, the last axis varying fastest.
    pub fn points(&self) -> Vec<Vec<(&str, &Value)>> {
        let mut out: Vec<Vec<(&str, &Value)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((key.as_str(), v));
                        q
                    })
                })
                .collect();
        }
        out
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| format!("`{path}`: no table `{part}` in the base config"))?
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("`{path}`: `{part}` is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| format!("`{path}`: index {idx} beyond {len} elements"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("`{path}`: `{part}` is not inside a table or array")),
        };
    }
    Err(format!("empty key path `{path}`"))
}

fn cell(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => fmt_f64(n.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Point status as recorded in sweep.csv.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub index: usize,
    pub dir: String,
    pub error: Option<String>,
}

pub fn sweep(base: &Source, grid: &Grid, root: &Path) -> Result<Vec<PointResult>, CliError> {
    let tree = base.tree()?;
    let points = grid.points();
    let mut scenarios = Vec::with_capacity(points.len());
    let mut problems = Vec::new();
    for (i, point) in points.iter().enumerate() {
        let mut t = tree.clone();
        let mut ok = true;
        for (key, value) in point {
            if let Err(e) = set_path(&mut t, key, (*value).clone()) {
                problems.push(format!("point {i}: {e}"));
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        let src = Source {
            origin: format!("{} [point {i}]", base.origin),
            format: Format::Json,
            text: serde_json::to_string_pretty(&t).expect("json tree serializes"),
        };
        match Scenario::parse(&src) {
            Ok(s) => {
                for d in s.check() {
                    problems.push(format!("point {i}: {d}"));
                }
                scenarios.push(s);
            }
            Err(e) => problems.push(format!("point {i}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Sweep(problems.join("\n")));
    }
    std::fs::create_dir_all(root).map_err(|e| CliError::Io {
        path: root.to_path_buf(),
        source: e,
    })?;

    let jobs = grid
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Sweep(e.to_string()))?;
    let results: Vec<PointResult> = pool.install(|| {
        scenarios
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let dir = format!("point-{i:04}");
                let error = run(s, &root.join(&dir)).err().map(|e| e.to_string());
                PointResult {
                    index: i,
                    dir,
                    error,
                }
            })
            .collect()
    });

    let mut header = vec!["point".to_string(), "dir".to_string()];
    header.extend(grid.axes.keys().cloned());
    header.extend(["status".to_string(), "error".to_string()]);
    let mut table = Table::with_header(header);
    for (r, point) in results.iter().zip(&points) {
        let mut row = vec![r.index.to_string(), r.dir.clone()];
        row.extend(point.iter().map(|(_, v)| cell(v)));
        row.push(if r.error.is_some() { "error" } else { "ok" }.into());
        row.push(r.error.clone().unwrap_or_default());
        table.push(row);
    }
    write_atomic(&root.join("sweep.csv"), &table.to_bytes())?;
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.dir)))
        .collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Sweep(failed.join("\n")))
    }
}
