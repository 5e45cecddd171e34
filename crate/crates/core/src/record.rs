//! Per-tick run record and its CSV form.
//!
//! Layout: `# key=value` metadata lines, then a header `time_s` followed by
//! one value column and one `.quality` column per catalog signal. Floats use
//! the shortest representation that round-trips, so parse → emit is
//! byte-identical.

use std::path::Path;

use thiserror::Error;

use crate::signal::{Quality, SignalDescriptor};

pub const QUALITY_SUFFIX: &str = ".quality";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed record: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub value: f64,
    pub quality: Quality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub time_s: f64,
    /// One entry per column; `None` when the signal was never written.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub metadata: Vec<(String, String)>,
    /// Signal keys (`ns/name`) in catalog order.
    pub columns: Vec<String>,
    pub rows: Vec<RecordRow>,
}

impl RunRecord {
    pub fn new(catalog: &[SignalDescriptor]) -> Self {
        Self {
            metadata: Vec::new(),
            columns: catalog.iter().map(SignalDescriptor::key).collect(),
            rows: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta(key).and_then(|v| v.parse().ok())
    }

    pub fn column(&self, key: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == key)
    }

    pub fn series(&self, key: &str) -> Option<Vec<Option<f64>>> {
        let col = self.column(key)?;
        Some(self.rows.iter().map(|r| r.cells[col].map(|c| c.value)).collect())
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.time_s).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec!["time_s".to_string()];
        for c in &self.columns {
            header.push(c.clone());
            header.push(format!("{c}{QUALITY_SUFFIX}"));
        }
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut fields = vec![row.time_s.to_string()];
            for cell in &row.cells {
                match cell {
                    Some(c) => {
                        fields.push(c.value.to_string());
                        fields.push(c.quality.to_string());
                    }
                    None => {
                        fields.push(String::new());
                        fields.push(String::new());
                    }
                }
            }
            w.write_record(&fields).expect("in-memory write");
        }
        let body = w.into_inner().expect("in-memory flush");
        out.push_str(std::str::from_utf8(&body).expect("utf-8 fields"));
        out
    }

    pub fn parse(text: &str) -> Result<Self, RecordError> {
        let mut record = RunRecord::default();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let Some(meta) = line.strip_prefix("# ") else { break };
            let (k, v) = meta
                .trim_end_matches('\n')
                .split_once('=')
                .ok_or_else(|| RecordError::Malformed(format!("metadata line '{}'", line.trim_end())))?;
            record.metadata.push((k.to_string(), v.to_string()));
            offset += line.len();
        }
        let mut reader = csv::ReaderBuilder::new().from_reader(text[offset..].as_bytes());
        let header = reader.headers()?.clone();
        if header.get(0) != Some("time_s") || header.len() % 2 != 1 {
            return Err(RecordError::Malformed("header must be time_s then value/quality pairs".into()));
        }
        for pair in 0..(header.len() - 1) / 2 {
            let key = &header[1 + 2 * pair];
            if header[2 + 2 * pair] != format!("{key}{QUALITY_SUFFIX}") {
                return Err(RecordError::Malformed(format!("missing quality column for {key}")));
            }
            record.columns.push(key.to_string());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| RecordError::Malformed(format!("number '{s}'")));
        for rec in reader.records() {
            let rec = rec?;
            let time_s = num(&rec[0])?;
            if record.rows.last().is_some_and(|r| r.time_s >= time_s) {
                return Err(RecordError::Malformed(format!("time {time_s} not increasing")));
            }
            let mut cells = Vec::with_capacity(record.columns.len());
            for pair in 0..record.columns.len() {
                let (v, q) = (&rec[1 + 2 * pair], &rec[2 + 2 * pair]);
                cells.push(if v.is_empty() {
                    None
                } else {
                    Some(Cell {
                        value: num(v)?,
                        quality: q.parse().map_err(|_| RecordError::Malformed(format!("quality '{q}'")))?,
                    })
                });
            }
            record.rows.push(RecordRow { time_s, cells });
        }
        Ok(record)
    }

    pub fn write(&self, path: &Path) -> Result<(), RecordError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, RecordError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::default_catalog;

    fn sample() -> RunRecord {
        let mut r = RunRecord::new(&default_catalog()[..3]);
        r.set_meta("kind", "overvoltage");
        r.set_meta("seed", 7);
        let cell = |v| Some(Cell { value: v, quality: Quality::Ok });
        r.rows.push(RecordRow { time_s: 0.0, cells: vec![None, cell(0.1), cell(-0.0)] });
        r.rows.push(RecordRow {
            time_s: 0.5,
            cells: vec![cell(1.0 / 3.0), Some(Cell { value: 5.0, quality: Quality::Clamped }), cell(1e-300)],
        });
        r
    }

    #[test]
    fn csv_roundtrip_is_byte_identical() {
        let text = sample().to_csv();
        let parsed = RunRecord::parse(&text).unwrap();
        assert_eq!(parsed.to_csv(), text);
        assert_eq!(parsed.meta("seed"), Some("7"));
        assert_eq!(parsed.series("SIN/Q_el_SIN").unwrap()[1], Some(5.0));
    }

    #[test]
    fn rejects_non_increasing_time() {
        let mut r = sample();
        r.rows[1].time_s = 0.0;
        assert!(RunRecord::parse(&r.to_csv()).is_err());
    }

    #[test]
    fn empty_record_roundtrips() {
        let r = RunRecord::new(&default_catalog());
        let text = r.to_csv();
        assert_eq!(RunRecord::parse(&text).unwrap(), r);
    }
}
