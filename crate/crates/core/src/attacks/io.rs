//! Poison-set persistence: JSON metadata plus one little-endian float32
//! array file per delta (12-byte shape header, then row-major data).
//! Craft reports are stored as JSON lines, one record per iteration.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attacks::{CraftReport, PoisonAlgorithm, PoisonDelta, PoisonSet, RegMode};
use crate::datamodel::{PoisonBudget, PoisonPair};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct PoisonMeta {
    pair: PoisonPair,
    budget: PoisonBudget,
    algorithm: PoisonAlgorithm,
    reg_mode: RegMode,
    deltas: Vec<DeltaMeta>,
}

#[derive(Serialize, Deserialize)]
struct DeltaMeta {
    sample_id: String,
    final_objective: f64,
    iterations_run: usize,
    file: String,
}

pub fn save_poison_set(ps: &PoisonSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let mut metas = Vec::with_capacity(ps.deltas.len());
    for (i, d) in ps.deltas.iter().enumerate() {
        let file = format!("delta_{i:04}.f32");
        write_f32_array(&dir.join(&file), &d.delta)?;
        metas.push(DeltaMeta {
            sample_id: d.sample_id.clone(),
            final_objective: d.final_objective,
            iterations_run: d.iterations_run,
            file,
        });
    }
    let meta = PoisonMeta {
        pair: ps.pair,
        budget: ps.budget,
        algorithm: ps.algorithm,
        reg_mode: ps.reg_mode,
        deltas: metas,
    };
    let path = dir.join("poisons.json");
    let raw = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, raw).map_err(|e| Error::io(path, e))
}

pub fn load_poison_set(dir: &Path) -> Result<PoisonSet> {
    let path = dir.join("poisons.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    let meta: PoisonMeta = serde_json::from_str(&raw).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let mut deltas = Vec::with_capacity(meta.deltas.len());
    for d in meta.deltas {
        deltas.push(PoisonDelta {
            delta: read_f32_array(&dir.join(&d.file))?,
            sample_id: d.sample_id,
            final_objective: d.final_objective,
            iterations_run: d.iterations_run,
        });
    }
    Ok(PoisonSet {
        deltas,
        pair: meta.pair,
        budget: meta.budget,
        algorithm: meta.algorithm,
        reg_mode: meta.reg_mode,
    })
}

pub(crate) fn write_f32_array(path: &Path, arr: &Array3<f32>) -> Result<()> {
    let (h, w, c) = arr.dim();
    let mut bytes = Vec::with_capacity(12 + arr.len() * 4);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(c as u32).to_le_bytes());
    for v in arr.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub(crate) fn read_f32_array(path: &Path) -> Result<Array3<f32>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut header = [0u8; 12];
    f.read_exact(&mut header)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let h = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    if bytes.len() != h * w * c * 4 {
        return Err(Error::precondition(format!(
            "array file {} has {} payload bytes, expected {}",
            path.display(),
            bytes.len(),
            h * w * c * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().expect("4 bytes")))
        .collect();
    Array3::from_shape_vec((h, w, c), data)
        .map_err(|e| Error::precondition(format!("bad array shape in {}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    iter: usize,
    objective: f64,
    core: f64,
    delta_l2: f64,
}

#[derive(Serialize, Deserialize)]
struct FooterLine {
    wall_time_secs: f64,
}

pub fn save_craft_report(report: &CraftReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    for i in 0..report.objective_trace.len() {
        let line = TraceLine {
            iter: i,
            objective: report.objective_trace[i],
            core: report.core_trace[i],
            delta_l2: report.delta_l2_trace[i],
        };
        let raw = serde_json::to_string(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        writeln!(f, "{raw}").map_err(|e| Error::io(path.to_path_buf(), e))?;
    }
    let footer = serde_json::to_string(&FooterLine {
        wall_time_secs: report.wall_time_secs,
    })
    .map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    writeln!(f, "{footer}").map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn load_craft_report(path: &Path) -> Result<CraftReport> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut report = CraftReport::default();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path.to_path_buf(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(t) = serde_json::from_str::<TraceLine>(&line) {
            report.objective_trace.push(t.objective);
            report.core_trace.push(t.core);
            report.delta_l2_trace.push(t.delta_l2);
        } else if let Ok(foot) = serde_json::from_str::<FooterLine>(&line) {
            report.wall_time_secs = foot.wall_time_secs;
        } else {
            return Err(Error::precondition(format!(
                "unrecognized trace line in {}",
                path.display()
            )));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poison_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = PoisonSet::empty_for_tests();
        ps.deltas.push(PoisonDelta {
            sample_id: "a".into(),
            delta: Array3::from_shape_fn((3, 2, 3), |(y, x, c)| (y + x + c) as f32 * 0.01),
            final_objective: 0.5,
            iterations_run: 7,
        });
        ps.deltas.push(PoisonDelta {
            sample_id: "b".into(),
            delta: Array3::from_elem((3, 2, 3), -0.02),
            final_objective: 0.25,
            iterations_run: 7,
        });
        save_poison_set(&ps, dir.path()).unwrap();
        let loaded = load_poison_set(dir.path()).unwrap();
        assert_eq!(loaded.deltas.len(), 2);
        assert_eq!(loaded.algorithm, ps.algorithm);
        assert_eq!(loaded.deltas[0].sample_id, "a");
        assert_eq!(loaded.deltas[0].delta, ps.deltas[0].delta);
        assert_eq!(loaded.deltas[1].final_objective, 0.25);
    }

    #[test]
    fn craft_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let report = CraftReport {
            objective_trace: vec![1.0, 0.5, 0.25],
            core_trace: vec![0.9, 0.4, 0.2],
            delta_l2_trace: vec![0.0, 0.1, 0.2],
            wall_time_secs: 1.5,
        };
        save_craft_report(&report, &path).unwrap();
        let loaded = load_craft_report(&path).unwrap();
        assert_eq!(loaded.objective_trace, report.objective_trace);
        assert_eq!(loaded.core_trace, report.core_trace);
        assert_eq!(loaded.wall_time_secs, 1.5);
    }
}
