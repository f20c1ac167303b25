use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training losses of the step that reached `iteration` plus held-out metrics
/// after it. Row 0 is measured before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub task: f64,
    pub out_kd: f64,
    pub feat_kd: f64,
    pub total: f64,
    pub eval_teacher_mse: Option<f64>,
    pub eval_denoise_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(Error::Domain(format!("log iteration {} after {}", row.iteration, last.iteration)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn first(&self) -> Option<&LogRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Domain(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["iteration", "task", "out_kd", "feat_kd", "total", "eval_teacher_mse", "eval_denoise_loss", "wall_time"])
                .map_err(|e| Error::Domain(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Domain(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `train_log.csv` and `train_log.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_log.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("train_log.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
