//! CSV encoding of step records.

use std::io::{Read, Write};

use warpflow_core::StepRecord;

/// Header of every run CSV.
pub const HEADER: [&str; 15] = StepRecord::COLUMNS;

/// Full-precision decimal: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(w: W) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &StepRecord) -> csv::Result<()> {
        self.inner.write_record(rec.values().iter().map(|v| fmt_f64(*v)))
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> Result<W, String> {
        self.inner.into_inner().map_err(|e| e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
}

/// Parses a run CSV back into records.
pub fn read_records<R: Read>(r: R) -> Result<Vec<StepRecord>, ReadError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(ReadError::Header(header));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != HEADER.len() {
            return Err(ReadError::Row {
                row: row + 1,
                message: format!("{} fields, expected {}", rec.len(), HEADER.len()),
            });
        }
        let mut vals = [0.0; 15];
        for (k, field) in rec.iter().enumerate() {
            vals[k] = field.parse().map_err(|_| ReadError::Row {
                row: row + 1,
                message: format!("column {}: bad number {field:?}", HEADER[k]),
            })?;
        }
        out.push(StepRecord::from_values(vals));
    }
    Ok(out)
}
