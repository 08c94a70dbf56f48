//! Preference records and their line-delimited file format.
//!
//! One record per line, each a self-contained JSON object with exactly the
//! fields `prompt`, `chosen`, `rejected`, `label_source`, `confidence`,
//! `iteration`. Malformed lines abort the read with their line number.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a record's preference label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    #[serde(rename = "seed-gold")]
    SeedGold,
    #[serde(rename = "self-judged")]
    SelfJudged,
    #[serde(rename = "oracle-gold")]
    OracleGold,
}

/// One preference pair: prompt, ordered responses, label provenance, and the
/// judge's confidence when self-judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub label_source: LabelSource,
    pub confidence: Option<f64>,
    pub iteration: u32,
}

impl PreferenceRecord {
    /// Structural invariants: distinct responses, confidence present iff
    /// self-judged.
    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::invalid_input(
                "record",
                format!("chosen equals rejected for prompt {:?}", self.prompt),
            ));
        }
        match (self.label_source, self.confidence) {
            (LabelSource::SelfJudged, None) => Err(Error::invalid_input(
                "record.confidence",
                "self-judged records carry a confidence",
            )),
            (LabelSource::SelfJudged, Some(c)) if !(0.0..=1.0).contains(&c) => Err(
                Error::invalid_input("record.confidence", format!("{c} outside [0, 1]")),
            ),
            (LabelSource::SeedGold | LabelSource::OracleGold, Some(_)) => Err(
                Error::invalid_input(
                    "record.confidence",
                    "gold-labeled records carry no confidence",
                ),
            ),
            _ => Ok(()),
        }
    }
}

/// Writes records as one JSON object per line.
pub fn write_records(path: impl AsRef<Path>, records: &[PreferenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        rec.validate()?;
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a record file; the first malformed line aborts with its number.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<PreferenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreferenceRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Dataset {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// An unlabeled response pair, the input format of the judging command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponsePair {
    pub prompt: String,
    pub first: String,
    pub second: String,
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<ResponsePair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ResponsePair = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[ResponsePair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<PreferenceRecord> {
        vec![
            PreferenceRecord {
                prompt: "rabc=".into(),
                chosen: "cba".into(),
                rejected: "abc".into(),
                label_source: LabelSource::SeedGold,
                confidence: None,
                iteration: 0,
            },
            PreferenceRecord {
                prompt: "rba=".into(),
                chosen: "ab".into(),
                rejected: "ba".into(),
                label_source: LabelSource::SelfJudged,
                confidence: Some(0.625),
                iteration: 1,
            },
        ]
    }

    #[test]
    fn round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let records = sample_records();
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_records(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_field_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&sample_records()[0]).unwrap();
        std::fs::write(
            &path,
            format!("{good}\n{{\"prompt\":\"p\",\"chosen\":\"a\"}}\n"),
        )
        .unwrap();
        match read_records(&path) {
            Err(Error::Dataset { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("rejected"), "reason: {reason}");
            }
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.jsonl");
        std::fs::write(
            &path,
            "{\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\",\"label_source\":\"seed-gold\",\"confidence\":null,\"iteration\":0,\"extra\":1}\n",
        )
        .unwrap();
        assert!(matches!(read_records(&path), Err(Error::Dataset { line: 1, .. })));
    }

    #[test]
    fn invariant_violations_rejected() {
        let mut rec = sample_records().remove(0);
        rec.rejected = rec.chosen.clone();
        assert!(rec.validate().is_err());

        let mut rec = sample_records().remove(1);
        rec.confidence = None;
        assert!(rec.validate().is_err());

        let mut rec = sample_records().remove(0);
        rec.confidence = Some(0.9);
        assert!(rec.validate().is_err());
    }

    #[test]
    fn confidence_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut records = Vec::new();
        for i in 0..64u64 {
            let p = 0.5 + (i as f64 + 1.0) / 1e3 + 1.0 / (3.0 * (i + 1) as f64);
            records.push(PreferenceRecord {
                prompt: format!("p{i}"),
                chosen: "a".into(),
                rejected: "b".into(),
                label_source: LabelSource::SelfJudged,
                confidence: Some(p.min(1.0)),
                iteration: 1,
            });
        }
        write_records(&path, &records).unwrap();
        for (a, b) in read_records(&path).unwrap().iter().zip(&records) {
            assert_eq!(a.confidence.unwrap().to_bits(), b.confidence.unwrap().to_bits());
        }
    }
}
