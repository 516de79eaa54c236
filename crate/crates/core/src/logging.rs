//! Tabular logs in CSV and a compact binary form.
//!
//! Both formats carry the schema version and a table kind. CSV files start
//! with a `# flapsim <kind> schema <version>` line followed by a header row.
//! Binary files hold the magic bytes, the version, the kind, the column
//! names and then little-endian `f64` rows.

use std::io::{BufRead, BufReader, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::training::{EpisodeRecord, Rollout, TerminationReason, UpdateMetrics};
use crate::trajectory::POLICY_DT;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FLAPLOG\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTable {
    pub kind: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LogTable {
    pub fn new(kind: &str, columns: Vec<String>) -> Self {
        Self { kind: kind.to_string(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::DimensionMismatch { expected: self.columns.len(), got: row.len() });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# flapsim {} schema {SCHEMA_VERSION}", self.kind)?;
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| Error::Csv("empty log".into()))??;
        let kind = parse_banner(&first)?;
        let header = lines.next().ok_or_else(|| Error::Csv("missing header row".into()))??;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut table = Self::new(&kind, columns);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Csv(format!("row {}: {e}", i + 3))))
                .collect::<Result<Vec<f64>>>()?;
            table.push(row).map_err(|_| Error::Csv(format!("row {} has the wrong number of cells", i + 3)))?;
        }
        Ok(table)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(SCHEMA_VERSION)?;
        write_str(&mut w, &self.kind)?;
        w.write_u32::<LittleEndian>(self.columns.len() as u32)?;
        for c in &self.columns {
            write_str(&mut w, c)?;
        }
        w.write_u64::<LittleEndian>(self.rows.len() as u64)?;
        for row in &self.rows {
            for v in row {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Csv("not a binary flapsim log".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SCHEMA_VERSION {
            return Err(Error::Csv(format!("schema version {version}; this build reads {SCHEMA_VERSION}")));
        }
        let kind = read_str(&mut r)?;
        let ncols = r.read_u32::<LittleEndian>()? as usize;
        let columns = (0..ncols).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let nrows = r.read_u64::<LittleEndian>()? as usize;
        let mut table = Self::new(&kind, columns);
        for _ in 0..nrows {
            let row = (0..ncols).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<f64>>>()?;
            table.rows.push(row);
        }
        Ok(table)
    }
}

fn parse_banner(line: &str) -> Result<String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["#", "flapsim", kind, "schema", v] => {
            let v: u32 = v.parse().map_err(|_| Error::Csv(format!("bad schema version {v}")))?;
            if v != SCHEMA_VERSION {
                return Err(Error::Csv(format!("schema version {v}; this build reads {SCHEMA_VERSION}")));
            }
            Ok(kind.to_string())
        }
        _ => Err(Error::Csv(format!("missing schema line, found {line:?}"))),
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Csv(e.to_string()))
}

fn indexed(prefix: &str, n: usize, unit: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}_{unit}")).collect()
}

/// Column names of [`rollout_table`].
pub fn rollout_columns() -> Vec<String> {
    let mut c: Vec<String> = ["step", "t_s", "x_m", "y_m", "z_m", "roll_rad", "pitch_rad", "yaw_rad"].map(String::from).to_vec();
    c.extend(["vx_m_s", "vy_m_s", "vz_m_s", "wx_rad_s", "wy_rad_s", "wz_rad_s"].map(String::from));
    c.extend(indexed("q", 5, "rad"));
    c.extend(indexed("qd", 5, "rad_s"));
    c.extend(indexed("action", 5, "unit"));
    c.extend(indexed("tau", 5, "nm"));
    c.extend(["target_x_m", "target_y_m", "target_z_m", "r_pos", "r_rates", "r_level", "r_energy", "reward"].map(String::from));
    c
}

/// One row per policy step with the state reached at the end of that step.
pub fn rollout_table(rollout: &Rollout) -> LogTable {
    let mut t = LogTable::new("rollout", rollout_columns());
    for k in 0..rollout.steps() {
        let s = &rollout.states[k + 1];
        let (roll, pitch, yaw) = s.euler_angles();
        let mut row = vec![(k + 1) as f64, (k + 1) as f64 * POLICY_DT];
        row.extend(s.base_position.iter());
        row.extend([roll, pitch, yaw]);
        row.extend(s.base_linear_velocity.iter());
        row.extend(s.base_angular_velocity.iter());
        row.extend(s.joint_positions.iter());
        row.extend(s.joint_velocities.iter());
        row.extend(rollout.actions[k].iter());
        row.extend(rollout.torques[k].iter());
        row.extend(rollout.targets[k].iter());
        let r = &rollout.rewards[k];
        row.extend([r.r_pos, r.r_rates, r.r_level, r.r_energy, r.total]);
        t.rows.push(row);
    }
    t
}

/// Per-update learning curve.
pub fn training_table(metrics: &[UpdateMetrics]) -> LogTable {
    let mut columns: Vec<String> = [
        "update",
        "env_steps",
        "stage",
        "episodes",
        "mean_return",
        "mean_length",
        "mean_r_pos",
        "mean_r_rates",
        "mean_r_level",
        "mean_r_energy",
        "policy_loss",
        "value_loss",
        "entropy",
        "approx_kl",
        "clip_fraction",
    ]
    .map(String::from)
    .to_vec();
    columns.extend(TerminationReason::ALL.iter().map(|r| format!("term_{}", r.name())));
    let mut t = LogTable::new("training", columns);
    for m in metrics {
        let mut row = vec![
            m.update as f64,
            m.env_steps as f64,
            m.stage as f64,
            m.episodes as f64,
            m.mean_return,
            m.mean_length,
            m.mean_r_pos,
            m.mean_r_rates,
            m.mean_r_level,
            m.mean_r_energy,
            m.policy_loss,
            m.value_loss,
            m.entropy,
            m.approx_kl,
            m.clip_fraction,
        ];
        row.extend(TerminationReason::ALL.iter().map(|r| *m.terminations.get(r.name()).unwrap_or(&0) as f64));
        t.rows.push(row);
    }
    t
}

/// One row per finished episode.
pub fn episode_table(episodes: &[EpisodeRecord]) -> LogTable {
    let columns = ["env_steps", "stage", "episode_return", "length", "termination"].map(String::from).to_vec();
    let mut t = LogTable::new("episodes", columns);
    for e in episodes {
        let term = TerminationReason::ALL.iter().position(|r| *r == e.termination).unwrap_or(0) as f64;
        t.rows.push(vec![e.env_steps as f64, e.stage as f64, e.episode_return, e.length as f64, term]);
    }
    t
}
