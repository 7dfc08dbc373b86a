use std::path::Path;

use super::{embed_encoded, ModelConfig, ModelParams};
use crate::corpus::Stay;
use crate::featurize::Preprocessing;
use crate::{Error, Result};

/// `[mlp hidden ‖ cnn pooled]` for one stay, computed in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitEmbedding {
    pub stay_id: String,
    pub vector: Vec<f64>,
}

pub fn extract_embedding(
    config: &ModelConfig,
    params: &ModelParams,
    preprocessing: &Preprocessing,
    stay: &Stay,
) -> Result<VisitEmbedding> {
    let encoded = preprocessing.apply(stay)?;
    Ok(VisitEmbedding {
        stay_id: stay.stay_id.clone(),
        vector: embed_encoded(config, params, &encoded)?,
    })
}

/// Header `stay_id,e0,…,e{n-1}`, one row per stay.
pub fn write_embeddings_csv(path: &Path, embeddings: &[VisitEmbedding]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let width = embeddings.first().map_or(0, |e| e.vector.len());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["stay_id".to_string()];
    header.extend((0..width).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(io)?;
    for e in embeddings {
        if e.vector.len() != width {
            return Err(Error::Shape(format!(
                "embedding of {} has width {}",
                e.stay_id,
                e.vector.len()
            )));
        }
        let mut row = vec![e.stay_id.clone()];
        row.extend(e.vector.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<VisitEmbedding>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let width = r
        .headers()
        .map_err(|e| Error::io(path, e.into()))?
        .len()
        .saturating_sub(1);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let vector = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("`{v}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if vector.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("{} values, header has {width}", vector.len()),
            });
        }
        out.push(VisitEmbedding {
            stay_id: rec[0].to_string(),
            vector,
        });
    }
    Ok(out)
}
