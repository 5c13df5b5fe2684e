//! Labeled sequence datasets and their line-oriented CSV interchange format.
//!
//! One row per sample, header required:
//!
//! ```text
//! id,time_ms,value,label,anomaly_at_ms
//! ```
//!
//! `time_ms` is an integer millisecond offset (1 kHz sampling, so it doubles
//! as the sample index), `label` is `0` or `1` and constant per id, and
//! `anomaly_at_ms` is either empty or an integer constant per id. Rows of
//! different ids may interleave; each id must cover `0..n` without gaps or
//! duplicates.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "id,time_ms,value,label,anomaly_at_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            _ => None,
        }
    }
}

/// One device recording. Sample `i` was taken at `i` milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSequence {
    pub id: String,
    pub samples: Vec<f64>,
    pub label: Label,
    pub anomaly_at_ms: Option<usize>,
}

impl RawSequence {
    pub fn new(
        id: impl Into<String>,
        samples: Vec<f64>,
        label: Label,
        anomaly_at_ms: Option<usize>,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            samples,
            label,
            anomaly_at_ms,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(',') || self.id.contains('\n') {
            return Err(Error::invalid(format!("bad sequence id {:?}", self.id)));
        }
        if self.samples.is_empty() {
            return Err(Error::invalid(format!("sequence {} has no samples", self.id)));
        }
        if let Some(at) = self.anomaly_at_ms {
            if self.label != Label::Anomalous {
                return Err(Error::invalid(format!(
                    "sequence {} has an anomaly onset but is labeled normal",
                    self.id
                )));
            }
            if at >= self.samples.len() {
                return Err(Error::invalid(format!(
                    "sequence {}: anomaly onset {} beyond length {}",
                    self.id,
                    at,
                    self.samples.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<RawSequence>,
    pub source_name: String,
}

impl Dataset {
    pub fn new(source_name: impl Into<String>, sequences: Vec<RawSequence>) -> Result<Self> {
        let ds = Self {
            sequences,
            source_name: source_name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.sequences.len());
        for seq in &self.sequences {
            seq.validate()?;
            if !seen.insert(seq.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sequence id {}", seq.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.sequences.iter().filter(|s| s.label == label).count()
    }
}

struct Pending {
    rows: Vec<(u64, f64, usize)>,
    label: Label,
    anomaly_at_ms: Option<usize>,
    first_line: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses an interchange stream into a dataset. Sequences keep the order in
/// which their ids first appear.
pub fn parse_sequences<R: Read>(reader: R, source_name: &str) -> Result<Dataset> {
    let reader = BufReader::new(reader);
    let mut lines = reader.lines();

    let header = match lines.next() {
        None => return Err(Error::NoSequences),
        Some(h) => h?,
    };
    if header.trim_end_matches('\r') != HEADER {
        return Err(parse_err(1, format!("expected header {HEADER:?}")));
    }

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();

    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                line_no,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(parse_err(line_no, "empty id"));
        }
        let time_ms: u64 = fields[1]
            .parse()
            .map_err(|_| parse_err(line_no, format!("time_ms {:?} is not a non-negative integer", fields[1])))?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("value {:?} is not a number", fields[2])))?;
        if !value.is_finite() {
            return Err(parse_err(line_no, "value must be finite"));
        }
        let label = match fields[3] {
            "0" => Label::Normal,
            "1" => Label::Anomalous,
            other => return Err(parse_err(line_no, format!("label {other:?} must be 0 or 1"))),
        };
        let anomaly_at_ms = match fields[4] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| {
                parse_err(line_no, format!("anomaly_at_ms {s:?} is not a non-negative integer"))
            })?),
        };

        let entry = pending.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            Pending {
                rows: Vec::new(),
                label,
                anomaly_at_ms,
                first_line: line_no,
            }
        });
        if entry.label != label {
            return Err(parse_err(line_no, format!("label changes within id {id}")));
        }
        if entry.anomaly_at_ms != anomaly_at_ms {
            return Err(parse_err(line_no, format!("anomaly_at_ms changes within id {id}")));
        }
        entry.rows.push((time_ms, value, line_no));
    }

    if order.is_empty() {
        return Err(Error::NoSequences);
    }

    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let mut p = pending.remove(&id).expect("id recorded in order");
        p.rows.sort_by_key(|r| r.0);
        for (expected, &(t, _, line)) in p.rows.iter().enumerate() {
            let expected = expected as u64;
            if t < expected {
                return Err(parse_err(line, format!("duplicate timestamp {t} for id {id}")));
            }
            if t > expected {
                return Err(parse_err(
                    line,
                    format!("id {id} has a gap: missing time_ms {expected}"),
                ));
            }
        }
        let samples = p.rows.iter().map(|r| r.1).collect();
        let seq = RawSequence::new(id, samples, p.label, p.anomaly_at_ms)
            .map_err(|e| parse_err(p.first_line, e.to_string()))?;
        sequences.push(seq);
    }

    Ok(Dataset {
        sequences,
        source_name: source_name.to_string(),
    })
}

/// Writes a dataset in the interchange format. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_sequences<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    dataset.validate()?;
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "{HEADER}")?;
    for seq in &dataset.sequences {
        let label = seq.label.as_u8();
        let at = seq.anomaly_at_ms.map(|a| a.to_string()).unwrap_or_default();
        for (t, v) in seq.samples.iter().enumerate() {
            writeln!(w, "{},{},{:?},{},{}", seq.id, t, v, label, at)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_file(path: &std::path::Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_sequences(file, &name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_sequences(s.as_bytes(), "test")
    }

    #[test]
    fn minimal_stream() {
        let ds = parse("id,time_ms,value,label,anomaly_at_ms\na,0,1.5,0,\na,1,2,0,\na,2,-3e-2,0,\n").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sequences[0].samples, vec![1.5, 2.0, -0.03]);
        assert_eq!(ds.sequences[0].label, Label::Normal);
    }

    #[test]
    fn interleaved_rows_are_grouped_and_sorted() {
        let ds = parse(
            "id,time_ms,value,label,anomaly_at_ms\nb,1,20,1,1\na,1,2,0,\nb,0,10,1,1\na,0,1,0,\n",
        )
        .unwrap();
        assert_eq!(ds.sequences[0].id, "b");
        assert_eq!(ds.sequences[0].samples, vec![10.0, 20.0]);
        assert_eq!(ds.sequences[0].anomaly_at_ms, Some(1));
        assert_eq!(ds.sequences[1].samples, vec![1.0, 2.0]);
    }

    #[test]
    fn empty_stream_has_no_sequences() {
        assert!(matches!(parse(""), Err(Error::NoSequences)));
        assert!(matches!(parse("id,time_ms,value,label,anomaly_at_ms\n"), Err(Error::NoSequences)));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let cases = [
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,0,\na,1,x,0,\n", 3),
            ("id,time_ms,value,label,anomaly_at_ms\na,0.5,1,0,\n", 2),
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,2,\n", 2),
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,0\n", 2),
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,0,\na,0,2,0,\n", 3),
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,0,\na,2,2,0,\n", 3),
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,0,\na,1,2,1,\n", 3),
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,0,0\n", 2),
            ("id,time_ms,value,label,anomaly_at_ms\na,0,1,1,5\n", 2),
            ("wrong,header\n", 1),
        ];
        for (text, line) in cases {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn write_rejects_invariant_violations() {
        let ds = Dataset {
            sequences: vec![RawSequence {
                id: "a".into(),
                samples: vec![],
                label: Label::Normal,
                anomaly_at_ms: None,
            }],
            source_name: "x".into(),
        };
        assert!(write_sequences(&ds, Vec::new()).is_err());
    }

    #[test]
    fn round_trip_single_sequence() {
        let ds = Dataset::new(
            "test",
            vec![RawSequence::new("s1", vec![0.1, 1e-300, -7.25, 1.0 / 3.0], Label::Anomalous, Some(2)).unwrap()],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_sequences(&ds, &mut buf).unwrap();
        assert_eq!(parse_sequences(buf.as_slice(), "test").unwrap(), ds);
    }
}
