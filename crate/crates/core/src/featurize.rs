//! Preprocessing fitted on the training split: vocabulary, truncation
//! length, time-summed structured aggregation and chi-square feature
//! selection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Labels, Stay};
use crate::{Error, Result, N_LABELS};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";
pub const PREPROCESSING_VERSION: u32 = 1;

/// Word → index map. Indices 0 and 1 are reserved for padding and unknown
/// words; real words start at 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    min_count: usize,
}

impl Vocabulary {
    /// Keeps the words seen at least `min_count` times, most frequent first
    /// (ties lexicographic).
    pub fn build(stays: &[&Stay], min_count: usize) -> Vocabulary {
        let min_count = min_count.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stay in stays {
            for w in stay.documents.iter().flatten() {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(
            kept.into_iter().map(|(w, _)| w.to_string()).collect(),
            min_count,
        )
        .expect("counted words are distinct")
    }

    /// Builds from words in index order (excluding the reserved entries).
    pub fn from_words(words: Vec<String>, min_count: usize) -> Result<Vocabulary> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32 + 2).is_some() {
                return Err(Error::Integrity(format!("vocabulary word `{w}` repeated")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            min_count,
        })
    }

    /// Size including the two reserved ids.
    pub fn len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        match id {
            PAD => Some(PAD_TOKEN),
            UNK => Some(UNK_TOKEN),
            i => self.words.get(i as usize - 2).map(String::as_str),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Total word count of a stay's concatenated documents.
pub fn text_length(stay: &Stay) -> usize {
    stay.documents.iter().map(Vec::len).sum()
}

/// Nearest-rank percentile of concatenated text lengths. Never below 1.
pub fn compute_truncation_length(stays: &[&Stay], percentile: f64) -> Result<usize> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!(
            "percentile {percentile} outside (0, 100]"
        )));
    }
    if stays.is_empty() {
        return Err(Error::Config(
            "cannot compute truncation length of an empty training set".into(),
        ));
    }
    let mut lengths: Vec<usize> = stays.iter().map(|s| text_length(s)).collect();
    lengths.sort_unstable();
    let n = lengths.len();
    let rank = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(lengths[rank - 1].max(1))
}

/// Concatenates documents in order, maps words to ids and keeps the first
/// `max_len` ids. No padding is added.
pub fn encode_text(stay: &Stay, vocabulary: &Vocabulary, max_len: usize) -> Vec<u32> {
    stay.documents
        .iter()
        .flatten()
        .take(max_len)
        .map(|w| vocabulary.id(w))
        .collect()
}

/// Sums event values per feature over the whole stay.
pub fn aggregate_structured(stay: &Stay) -> Result<BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for e in &stay.events {
        if !e.value.is_finite() || e.value < 0.0 {
            return Err(Error::Integrity(format!(
                "stay {}: event `{}` has negative or non-finite value {}",
                stay.stay_id, e.feature, e.value
            )));
        }
        *out.entry(e.feature.clone()).or_default() += e.value;
    }
    Ok(out)
}

/// Count-based chi-square statistic of each feature against each label,
/// reduced by max over labels.
///
/// For label `l` the stays split into two classes. The observed mass of a
/// class is the sum of the feature over its stays; the expected mass is the
/// class frequency times the feature total.
pub fn chi2_scores(
    aggregated: &[BTreeMap<String, f64>],
    labels: &[Labels],
) -> Result<BTreeMap<String, f64>> {
    if aggregated.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} label rows",
            aggregated.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut positives = [0usize; N_LABELS];
    for y in labels {
        for (c, &v) in positives.iter_mut().zip(y) {
            *c += v as usize;
        }
    }

    struct Mass {
        total: f64,
        positive: [f64; N_LABELS],
    }
    let mut mass: BTreeMap<&str, Mass> = BTreeMap::new();
    for (row, y) in aggregated.iter().zip(labels) {
        for (name, &v) in row {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Integrity(format!("feature `{name}` has value {v}")));
            }
            let m = mass.entry(name.as_str()).or_insert(Mass {
                total: 0.0,
                positive: [0.0; N_LABELS],
            });
            m.total += v;
            for (p, &yl) in m.positive.iter_mut().zip(y) {
                if yl == 1 {
                    *p += v;
                }
            }
        }
    }

    let term = |obs: f64, exp: f64| {
        if exp > 0.0 {
            (obs - exp).powi(2) / exp
        } else {
            0.0
        }
    };
    let scores = mass
        .into_iter()
        .map(|(name, m)| {
            let mut best = 0.0f64;
            if m.total > 0.0 {
                for l in 0..N_LABELS {
                    let frac1 = positives[l] as f64 / n;
                    let exp1 = frac1 * m.total;
                    let exp0 = (1.0 - frac1) * m.total;
                    let obs1 = m.positive[l];
                    let obs0 = m.total - obs1;
                    best = best.max(term(obs1, exp1) + term(obs0, exp0));
                }
            }
            (name.to_string(), best)
        })
        .collect();
    Ok(scores)
}

/// The kept structured features and their column order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSelector {
    columns: Vec<(String, f64)>,
    index: HashMap<String, usize>,
}

impl FeatureSelector {
    fn from_columns(columns: Vec<(String, f64)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(columns.len());
        for (i, (name, _)) in columns.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Integrity(format!("feature `{name}` selected twice")));
            }
        }
        Ok(FeatureSelector { columns, index })
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, feature: &str) -> Option<usize> {
        self.index.get(feature).copied()
    }

    /// (feature, score) in column order.
    pub fn columns(&self) -> &[(String, f64)] {
        &self.columns
    }
}

/// Keeps the `k` best-scoring features (ties by name); column order follows
/// the ranking.
pub fn select_features(scores: &BTreeMap<String, f64>, k: usize) -> Result<FeatureSelector> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "k_features = {k} exceeds the {} candidate features",
            scores.len()
        )));
    }
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(n, &s)| (n, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    FeatureSelector::from_columns(
        ranked
            .into_iter()
            .take(k)
            .map(|(n, s)| (n.clone(), s))
            .collect(),
    )
}

/// Model-ready form of one stay.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStay {
    pub stay_id: String,
    pub token_ids: Vec<u32>,
    /// Selector column → time-summed value; absent columns are zero.
    pub structured: BTreeMap<usize, f64>,
    pub labels: Labels,
}

impl EncodedStay {
    pub fn dense_structured(&self, width: usize) -> Vec<f64> {
        let mut v = vec![0.0; width];
        for (&i, &x) in &self.structured {
            if i < width {
                v[i] = x;
            }
        }
        v
    }
}

pub fn apply(
    selector: &FeatureSelector,
    vocabulary: &Vocabulary,
    max_len: usize,
    stay: &Stay,
) -> Result<EncodedStay> {
    let structured = aggregate_structured(stay)?
        .into_iter()
        .filter_map(|(name, v)| selector.column(&name).map(|c| (c, v)))
        .collect();
    Ok(EncodedStay {
        stay_id: stay.stay_id.clone(),
        token_ids: encode_text(stay, vocabulary, max_len),
        structured,
        labels: stay.labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizeConfig {
    pub min_count: usize,
    pub percentile: f64,
    pub k_features: usize,
    /// Explicit truncation length; the nearest-rank percentile is used when
    /// absent.
    pub max_len: Option<usize>,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        FeaturizeConfig {
            min_count: 5,
            percentile: 90.0,
            k_features: 64,
            max_len: Some(256),
        }
    }
}

/// Everything fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessing {
    pub vocabulary: Vocabulary,
    pub max_len: usize,
    pub percentile_length: usize,
    pub selector: FeatureSelector,
    pub config: FeaturizeConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreprocessingFile {
    version: u32,
    vocabulary: Vec<String>,
    truncation_length: usize,
    percentile_length: usize,
    selector: Vec<(String, f64)>,
    config: FeaturizeConfig,
}

impl Preprocessing {
    pub fn fit(train: &[&Stay], config: &FeaturizeConfig) -> Result<Preprocessing> {
        if config.min_count == 0 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let percentile_length = compute_truncation_length(train, config.percentile)?;
        let max_len = match config.max_len {
            Some(0) => return Err(Error::Config("max_len must be positive".into())),
            Some(m) => m,
            None => percentile_length,
        };
        let vocabulary = Vocabulary::build(train, config.min_count);
        let aggregated = train
            .iter()
            .map(|s| aggregate_structured(s))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<Labels> = train.iter().map(|s| s.labels).collect();
        let scores = chi2_scores(&aggregated, &labels)?;
        let selector = select_features(&scores, config.k_features)?;
        Ok(Preprocessing {
            vocabulary,
            max_len,
            percentile_length,
            selector,
            config: config.clone(),
        })
    }

    pub fn apply(&self, stay: &Stay) -> Result<EncodedStay> {
        apply(&self.selector, &self.vocabulary, self.max_len, stay)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut vocabulary = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        vocabulary.extend(self.vocabulary.words().iter().cloned());
        let file = PreprocessingFile {
            version: PREPROCESSING_VERSION,
            vocabulary,
            truncation_length: self.max_len,
            percentile_length: self.percentile_length,
            selector: self.selector.columns().to_vec(),
            config: self.config.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("preprocessing serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Preprocessing> {
        let file: PreprocessingFile = serde_json::from_slice(bytes)?;
        if file.version != PREPROCESSING_VERSION {
            return Err(Error::Integrity(format!(
                "preprocessing version {} (expected {PREPROCESSING_VERSION})",
                file.version
            )));
        }
        if file.vocabulary.len() < 2
            || file.vocabulary[0] != PAD_TOKEN
            || file.vocabulary[1] != UNK_TOKEN
        {
            return Err(Error::Integrity(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        if file.truncation_length == 0 {
            return Err(Error::Integrity(
                "truncation_length must be positive".into(),
            ));
        }
        let words = file.vocabulary.into_iter().skip(2).collect();
        Ok(Preprocessing {
            vocabulary: Vocabulary::from_words(words, file.config.min_count)?,
            max_len: file.truncation_length,
            percentile_length: file.percentile_length,
            selector: FeatureSelector::from_columns(file.selector)?,
            config: file.config,
        })
    }

    /// SHA-256 of the serialized form, used to tie checkpoints to the
    /// preprocessing they were trained with.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Preprocessing> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::stay;
    use crate::corpus::Event;

    fn with_docs(id: &str, docs: &[&[&str]]) -> Stay {
        let mut s = stay(id, "p", &[]);
        s.documents = docs
            .iter()
            .map(|d| d.iter().map(|w| w.to_string()).collect())
            .collect();
        s
    }

    #[test]
    fn empty_corpus_vocabulary_is_reserved_only() {
        let v = Vocabulary::build(&[], 5);
        assert_eq!(v.len(), 2);
        assert_eq!(v.word(PAD), Some("<pad>"));
        assert_eq!(v.word(UNK), Some("<unk>"));
    }

    #[test]
    fn min_count_threshold() {
        let s = with_docs("a", &[&["fever"; 5], &["rare"; 4]]);
        let v = Vocabulary::build(&[&s], 5);
        assert_eq!(v.id("fever"), 2);
        assert_eq!(v.id("rare"), UNK);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocabulary_order_frequency_then_name() {
        let s = with_docs("a", &[&["b", "a", "c", "c", "b"]]);
        let v = Vocabulary::build(&[&s], 1);
        assert_eq!(v.words(), &["b", "c", "a"]);
    }

    #[test]
    fn truncation_nearest_rank() {
        let stays: Vec<Stay> = (1..=10)
            .map(|n| with_docs(&n.to_string(), &[&vec!["x"; n]]))
            .collect();
        let refs: Vec<&Stay> = stays.iter().collect();
        assert_eq!(compute_truncation_length(&refs, 90.0).unwrap(), 9);
        assert_eq!(compute_truncation_length(&refs, 100.0).unwrap(), 10);
        assert_eq!(compute_truncation_length(&refs, 1.0).unwrap(), 1);
        let single = with_docs("s", &[&["a", "b"], &["c"]]);
        for p in [0.5, 50.0, 100.0] {
            assert_eq!(compute_truncation_length(&[&single], p).unwrap(), 3);
        }
        assert!(matches!(
            compute_truncation_length(&[], 90.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            compute_truncation_length(&refs, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encode_maps_unknown_and_truncates() {
        let v = Vocabulary::from_words(vec!["known".into()], 1).unwrap();
        let s = with_docs("a", &[&["known", "mystery"], &["known"]]);
        assert_eq!(encode_text(&s, &v, 100), vec![2, UNK, 2]);
        assert!(encode_text(&with_docs("e", &[]), &v, 10).is_empty());

        let words: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let v = Vocabulary::from_words(words.clone(), 1).unwrap();
        let long = with_docs(
            "l",
            &[&words.iter().map(String::as_str).collect::<Vec<_>>()],
        );
        let full = encode_text(&long, &v, 100);
        assert_eq!(encode_text(&long, &v, 16), full[..16].to_vec());
    }

    fn ev(f: &str, value: f64, time: f64) -> Event {
        Event {
            feature: f.into(),
            value,
            time,
        }
    }

    #[test]
    fn aggregation_sums_over_time() {
        let mut s = stay("a", "p", &[]);
        assert!(aggregate_structured(&s).unwrap().is_empty());
        s.events = vec![
            ev("lab_x", 1.0, 0.0),
            ev("lab_x", 2.0, 5.0),
            ev("rx", 0.5, 1.0),
        ];
        let agg = aggregate_structured(&s).unwrap();
        assert_eq!(agg["lab_x"], 3.0);
        let mut rev = s.clone();
        rev.events.reverse();
        assert_eq!(aggregate_structured(&rev).unwrap(), agg);
        s.events.push(ev("bad", -1.0, 0.0));
        assert!(matches!(aggregate_structured(&s), Err(Error::Integrity(_))));
    }

    fn labels_col0(col: &[u8]) -> Vec<Labels> {
        col.iter()
            .map(|&y| {
                let mut l = [0u8; N_LABELS];
                l[0] = y;
                l
            })
            .collect()
    }

    #[test]
    fn chi2_hand_table() {
        // obs = (2, 0), exp = (1, 1) for label 0; other labels have one empty class.
        let rows: Vec<BTreeMap<String, f64>> = [1.0, 1.0, 0.0, 0.0]
            .iter()
            .map(|&v| BTreeMap::from([("f".to_string(), v), ("zero".to_string(), 0.0)]))
            .collect();
        let scores = chi2_scores(&rows, &labels_col0(&[1, 1, 0, 0])).unwrap();
        assert!((scores["f"] - 2.0).abs() < 1e-12);
        assert_eq!(scores["zero"], 0.0);
    }

    #[test]
    fn select_top_k_with_name_ties() {
        let scores = BTreeMap::from([
            ("a".to_string(), 5.0),
            ("b".to_string(), 2.0),
            ("c".to_string(), 9.0),
        ]);
        let sel = select_features(&scores, 2).unwrap();
        assert_eq!(
            sel.columns()
                .iter()
                .map(|c| c.0.as_str())
                .collect::<Vec<_>>(),
            vec!["c", "a"]
        );
        assert_eq!(sel.column("c"), Some(0));
        assert_eq!(sel.column("b"), None);
        assert_eq!(select_features(&scores, 3).unwrap().k(), 3);
        assert!(matches!(select_features(&scores, 4), Err(Error::Config(_))));

        let tied = BTreeMap::from([
            ("z".to_string(), 1.0),
            ("m".to_string(), 1.0),
            ("a".to_string(), 0.5),
        ]);
        let sel = select_features(&tied, 2).unwrap();
        assert_eq!(sel.columns()[0].0, "m");
        assert_eq!(sel.columns()[1].0, "z");
    }

    #[test]
    fn apply_composes_and_drops_unselected() {
        let v = Vocabulary::from_words(vec!["w".into()], 1).unwrap();
        let sel = select_features(&BTreeMap::from([("keep".to_string(), 1.0)]), 1).unwrap();
        let empty = stay("e", "p", &[3]);
        let enc = apply(&sel, &v, 10, &empty).unwrap();
        assert!(enc.token_ids.is_empty() && enc.structured.is_empty());
        assert_eq!(enc.labels, empty.labels);

        let mut s = stay("s", "p", &[]);
        s.events = vec![ev("drop", 2.0, 0.0)];
        assert!(apply(&sel, &v, 10, &s).unwrap().structured.is_empty());
        s.events.push(ev("keep", 4.0, 1.0));
        let a = apply(&sel, &v, 10, &s).unwrap();
        assert_eq!(a, apply(&sel, &v, 10, &s).unwrap());
        assert_eq!(a.dense_structured(1), vec![4.0]);
    }

    #[test]
    fn preprocessing_file_round_trip() {
        let mut a = with_docs("a", &[&["x", "y", "x"]]);
        a.events = vec![ev("f1", 1.0, 0.0), ev("f2", 3.0, 0.0)];
        a.labels[0] = 1;
        let mut b = with_docs("b", &[&["y"]]);
        b.events = vec![ev("f2", 1.0, 0.0)];
        let cfg = FeaturizeConfig {
            min_count: 1,
            k_features: 2,
            max_len: None,
            ..FeaturizeConfig::default()
        };
        let p = Preprocessing::fit(&[&a, &b], &cfg).unwrap();
        assert_eq!(p.max_len, 3);
        let back = Preprocessing::from_json_bytes(&p.to_json_bytes()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.hash(), p.hash());
    }
}
