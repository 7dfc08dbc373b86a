use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{Dataset, Stay};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Integrity(format!("unknown split `{other}`"))),
        }
    }
}

/// Patient → split. Every stay of a patient lands in the same split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitAssignment {
    pub patients: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, patient_id: &str) -> Option<Split> {
        self.patients.get(patient_id).copied()
    }

    /// Stays of `dataset` whose patient belongs to one of `splits`, in
    /// dataset order.
    pub fn stays<'a>(&self, dataset: &'a Dataset, splits: &[Split]) -> Result<Vec<&'a Stay>> {
        let mut out = Vec::new();
        for stay in &dataset.stays {
            let split = self.get(&stay.patient_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "patient `{}` has no split assignment",
                    stay.patient_id
                ))
            })?;
            if splits.contains(&split) {
                out.push(stay);
            }
        }
        Ok(out)
    }

    pub fn count(&self, split: Split) -> usize {
        self.patients.values().filter(|&&s| s == split).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        w.write_record(["patient_id", "split"]).map_err(to_err)?;
        for (p, s) in &self.patients {
            w.write_record([p.as_str(), &s.to_string()])
                .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut patients = BTreeMap::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 2 columns, found {}", rec.len()),
                });
            }
            let split: Split = rec[1].parse()?;
            if patients.insert(rec[0].to_string(), split).is_some() {
                return Err(Error::Integrity(format!(
                    "line {line}: patient `{}` assigned twice",
                    &rec[0]
                )));
            }
        }
        Ok(SplitAssignment { patients })
    }
}

/// Samples validation and test patients among those with at least one stay
/// carrying `min_distinct_codes` active labels; everyone else trains.
pub fn split_patients(
    dataset: &Dataset,
    n_val_patients: usize,
    n_test_patients: usize,
    min_distinct_codes: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    let by_patient = dataset.patients();
    let mut eligible: Vec<&str> = by_patient
        .iter()
        .filter(|(_, stays)| {
            stays
                .iter()
                .any(|s| s.n_active_labels() >= min_distinct_codes)
        })
        .map(|(p, _)| *p)
        .collect();
    let requested = n_val_patients + n_test_patients;
    if eligible.len() < requested {
        return Err(Error::Split {
            eligible: eligible.len(),
            requested,
        });
    }
    eligible.shuffle(&mut seed::rng(seed, &[0x5917]));

    let mut patients: BTreeMap<String, Split> = by_patient
        .keys()
        .map(|p| (p.to_string(), Split::Train))
        .collect();
    for (i, p) in eligible.iter().take(requested).enumerate() {
        let split = if i < n_val_patients {
            Split::Validation
        } else {
            Split::Test
        };
        patients.insert(p.to_string(), split);
    }
    Ok(SplitAssignment { patients })
}
