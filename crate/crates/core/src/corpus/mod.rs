//! Visit data model, synthetic corpus generation, dataset files and
//! patient-level splits.

mod generate;
mod io;
mod split;

use std::collections::{BTreeMap, BTreeSet, HashSet};

pub use generate::{generate_synthetic, ConceptSpec, GeneratorConfig, DEFAULT_PRESENCE};
pub use io::{read_dataset, stay_to_json, write_dataset};
pub use split::{split_patients, Split, SplitAssignment};

use crate::{Error, Result, N_LABELS};

pub type Labels = [u8; N_LABELS];

/// One timestamped structured observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub feature: String,
    pub value: f64,
    pub time: f64,
}

/// One visit.
#[derive(Clone, Debug, PartialEq)]
pub struct Stay {
    pub stay_id: String,
    pub patient_id: String,
    pub documents: Vec<Vec<String>>,
    pub events: Vec<Event>,
    pub labels: Labels,
    pub tags: BTreeSet<String>,
}

impl Stay {
    pub fn n_active_labels(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stay_id.is_empty() {
            return Err(Error::Integrity("empty stay_id".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Integrity(format!(
                "stay {}: label value {l} is not 0 or 1",
                self.stay_id
            )));
        }
        for e in &self.events {
            if !e.value.is_finite() || e.value < 0.0 {
                return Err(Error::Integrity(format!(
                    "stay {}: event `{}` has invalid value {}",
                    self.stay_id, e.feature, e.value
                )));
            }
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::Integrity(format!(
                    "stay {}: event `{}` has invalid time {}",
                    self.stay_id, e.feature, e.time
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub stays: Vec<Stay>,
    /// Generator config hash or source path.
    pub provenance: String,
}

impl Dataset {
    /// Builds a dataset, rejecting invalid stays and duplicate ids.
    pub fn new(stays: Vec<Stay>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(stays.len());
        for stay in &stays {
            stay.validate()?;
            if !seen.insert(stay.stay_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate stay_id `{}`",
                    stay.stay_id
                )));
            }
        }
        Ok(Dataset {
            stays,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.stays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stays.is_empty()
    }

    /// Stays grouped by patient, patients in lexicographic order.
    pub fn patients(&self) -> BTreeMap<&str, Vec<&Stay>> {
        let mut map: BTreeMap<&str, Vec<&Stay>> = BTreeMap::new();
        for stay in &self.stays {
            map.entry(stay.patient_id.as_str()).or_default().push(stay);
        }
        map
    }
}
