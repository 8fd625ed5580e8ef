use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// One logged optimizer step. Rejected log-probability and margin are only
/// defined for preference training and are left empty otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub logp_preferred: f64,
    pub logp_rejected: Option<f64>,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn push(&mut self, row: TraceRow) {
        debug_assert!(self.rows.last().map_or(true, |r| r.step < row.step));
        self.rows.push(row);
    }

    pub fn first(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["step", "loss", "logp_preferred", "logp_rejected", "margin"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<Result<Vec<TraceRow>, _>>()?;
        Ok(TrainingTrace { rows })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = TrainingTrace::default();
        t.push(TraceRow {
            step: 0,
            loss: 0.6931471805599453,
            logp_preferred: -12.5,
            logp_rejected: Some(-20.25),
            margin: Some(0.0),
        });
        t.push(TraceRow { step: 10, loss: 0.5, logp_preferred: -11.0, logp_rejected: None, margin: None });
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,loss,logp_preferred,logp_rejected,margin\n"));
        assert_eq!(TrainingTrace::read_csv(buf.as_slice()).unwrap(), t);
    }
}
