//! CSV event tables.
//!
//! The canonical schema is `mass, score, label, weight` with `mass`
//! mandatory; unknown columns pass through writes untouched (cells are kept
//! as their original strings).

use std::path::Path;

use crate::error::{Error, Result};
use crate::simulate::LabeledEvent;

#[derive(Debug, Clone)]
pub struct EventTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    masses: Vec<f64>,
    scores: Option<Vec<f64>>,
    labels: Option<Vec<Option<u8>>>,
}

impl EventTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn scores(&self) -> Result<&[f64]> {
        self.scores
            .as_deref()
            .ok_or_else(|| Error::Schema("input is missing the 'score' column".into()))
    }

    pub fn labels(&self) -> Result<&[Option<u8>]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Schema("input is missing the 'label' column".into()))
    }

    /// Append a column; `values` must align with the rows.
    pub fn add_column(&mut self, name: &str, values: Vec<String>) -> Result<()> {
        if values.len() != self.rows.len() {
            return Err(Error::InvalidArgument(format!(
                "add_column: {} values for {} rows",
                values.len(),
                self.rows.len()
            )));
        }
        self.headers.push(name.to_string());
        for (row, value) in self.rows.iter_mut().zip(values) {
            row.push(value);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(&self.headers)?;
        for row in &self.rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn parse_f64(cell: &str, column: &str, row: usize) -> Result<f64> {
    cell.trim().parse().map_err(|_| {
        Error::Schema(format!("row {}: cannot parse {column} value {cell:?}", row + 1))
    })
}

/// Read an event table; requires a `mass` column, parses `score` and
/// `label` when present.
pub fn read_events(path: &Path) -> Result<EventTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mass_idx =
        find("mass").ok_or_else(|| Error::Schema("input is missing the 'mass' column".into()))?;
    let score_idx = find("score");
    let label_idx = find("label");

    let mut rows = Vec::new();
    let mut masses = Vec::new();
    let mut scores = score_idx.map(|_| Vec::new());
    let mut labels = label_idx.map(|_| Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row: Vec<String> = record.iter().map(|c| c.to_string()).collect();
        masses.push(parse_f64(&row[mass_idx], "mass", i)?);
        if let (Some(idx), Some(scores)) = (score_idx, scores.as_mut()) {
            scores.push(parse_f64(&row[idx], "score", i)?);
        }
        if let (Some(idx), Some(labels)) = (label_idx, labels.as_mut()) {
            let cell = row[idx].trim();
            labels.push(if cell.is_empty() {
                None
            } else {
                match cell {
                    "0" => Some(0),
                    "1" => Some(1),
                    other => {
                        return Err(Error::Schema(format!(
                            "row {}: label must be 0, 1 or empty, got {other:?}",
                            i + 1
                        )))
                    }
                }
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Schema("input holds no event rows".into()));
    }
    Ok(EventTable { headers, rows, masses, scores, labels })
}

/// Write generated events with the canonical header.
pub fn write_events(path: &Path, events: &[LabeledEvent]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["mass", "score", "label", "weight"])?;
    for e in events {
        writer.write_record([
            format!("{}", e.mass),
            format!("{}", e.score),
            e.label.map(|l| l.to_string()).unwrap_or_default(),
            e.weight.map(|w| w.to_string()).unwrap_or_default(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_unknown_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(
            &path,
            "mass,score,extra,label\n0.5,0.25,keep-me,1\n0.25,0.75,and-me,0\n",
        )
        .unwrap();
        let mut table = read_events(&path).unwrap();
        assert_eq!(table.masses(), &[0.5, 0.25]);
        assert_eq!(table.scores().unwrap(), &[0.25, 0.75]);
        assert_eq!(table.labels().unwrap(), &[Some(1), Some(0)]);
        table.add_column("new", vec!["a".into(), "b".into()]).unwrap();
        let out = dir.path().join("out.csv");
        table.write(&out).unwrap();
        let written = std::fs::read_to_string(&out).unwrap();
        assert_eq!(written, "mass,score,extra,label,new\n0.5,0.25,keep-me,1,a\n0.25,0.75,and-me,0,b\n");
    }

    #[test]
    fn schema_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "score\n0.5\n").unwrap();
        let err = read_events(&path).unwrap_err();
        assert!(err.to_string().contains("mass"), "{err}");

        std::fs::write(&path, "mass,label\n0.5,2\n").unwrap();
        let err = read_events(&path).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn generated_events_round_trip() {
        let events = vec![
            LabeledEvent { mass: 0.125, score: 0.5, label: Some(1), weight: None },
            LabeledEvent { mass: 0.75, score: 0.0625, label: Some(0), weight: Some(2.0) },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.csv");
        write_events(&path, &events).unwrap();
        let table = read_events(&path).unwrap();
        assert_eq!(table.masses(), &[0.125, 0.75]);
        assert_eq!(table.scores().unwrap(), &[0.5, 0.0625]);
        assert_eq!(table.labels().unwrap(), &[Some(1), Some(0)]);
    }
}
