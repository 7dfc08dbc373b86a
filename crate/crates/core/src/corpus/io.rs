//! Line-delimited JSON dataset files: one stay per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Event, Labels, Stay};
use crate::{Error, Result, N_LABELS};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StayRecord {
    stay_id: String,
    patient_id: String,
    documents: Vec<Vec<String>>,
    events: Vec<(String, f64, f64)>,
    labels: Vec<u8>,
    tags: Vec<String>,
}

impl From<&Stay> for StayRecord {
    fn from(s: &Stay) -> Self {
        StayRecord {
            stay_id: s.stay_id.clone(),
            patient_id: s.patient_id.clone(),
            documents: s.documents.clone(),
            events: s
                .events
                .iter()
                .map(|e| (e.feature.clone(), e.value, e.time))
                .collect(),
            labels: s.labels.to_vec(),
            tags: s.tags.iter().cloned().collect(),
        }
    }
}

impl TryFrom<StayRecord> for Stay {
    type Error = Error;

    fn try_from(r: StayRecord) -> Result<Stay> {
        let labels: Labels = r.labels.as_slice().try_into().map_err(|_| {
            Error::Integrity(format!(
                "stay {}: labels has length {}, expected {N_LABELS}",
                r.stay_id,
                r.labels.len()
            ))
        })?;
        let stay = Stay {
            stay_id: r.stay_id,
            patient_id: r.patient_id,
            documents: r.documents,
            events: r
                .events
                .into_iter()
                .map(|(feature, value, time)| Event {
                    feature,
                    value,
                    time,
                })
                .collect(),
            labels,
            tags: r.tags.into_iter().collect(),
        };
        stay.validate()?;
        Ok(stay)
    }
}

/// Serializes one stay as a single JSON line (no trailing newline).
pub fn stay_to_json(stay: &Stay) -> String {
    serde_json::to_string(&StayRecord::from(stay)).expect("stay serializes")
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for stay in &dataset.stays {
        writeln!(out, "{}", stay_to_json(stay)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut stays = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StayRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let stay = Stay::try_from(record).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("line {line_no}: {m}")),
            other => other,
        })?;
        if !seen.insert(stay.stay_id.clone()) {
            return Err(Error::Integrity(format!(
                "line {line_no}: duplicate stay_id `{}`",
                stay.stay_id
            )));
        }
        stays.push(stay);
    }
    Dataset::new(stays, path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, GeneratorConfig};

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_round_trip() {
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(&Dataset::default(), f.path()).unwrap();
        assert_eq!(std::fs::read(f.path()).unwrap().len(), 0);
        assert!(read_dataset(f.path()).unwrap().is_empty());
    }

    #[test]
    fn generated_round_trip_is_exact() {
        let d = generate_synthetic(&GeneratorConfig {
            n_patients: 30,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(&d, f.path()).unwrap();
        let back = read_dataset(f.path()).unwrap();
        assert_eq!(back.stays, d.stays);
    }

    #[test]
    fn fractional_values_round_trip() {
        let mut d = generate_synthetic(&GeneratorConfig {
            n_patients: 1,
            ..GeneratorConfig::default()
        })
        .unwrap();
        d.stays[0].events.push(Event {
            feature: "dose".into(),
            value: 0.1 + 0.2,
            time: std::f64::consts::PI,
        });
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(&d, f.path()).unwrap();
        assert_eq!(read_dataset(f.path()).unwrap().stays, d.stays);
    }

    #[test]
    fn short_labels_are_integrity_error() {
        let labels18 = vec!["0"; 18].join(",");
        let line = format!(
            r#"{{"stay_id":"s1","patient_id":"p1","documents":[],"events":[],"labels":[{labels18}],"tags":[]}}"#
        );
        let f = write_lines(&[&line]);
        let err = read_dataset(f.path()).unwrap_err();
        assert!(
            matches!(err, Error::Integrity(ref m) if m.contains("line 1")),
            "{err}"
        );
    }

    #[test]
    fn malformed_line_names_line_number() {
        let good = stay_to_json(&crate::corpus::tests::stay("s1", "p1", &[2]));
        let f = write_lines(&[&good, "{not json"]);
        match read_dataset(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_stay_is_integrity_error() {
        let good = stay_to_json(&crate::corpus::tests::stay("s1", "p1", &[2]));
        let f = write_lines(&[&good, &good]);
        assert!(matches!(
            read_dataset(f.path()).unwrap_err(),
            Error::Integrity(ref m) if m.contains("duplicate")
        ));
    }
}
