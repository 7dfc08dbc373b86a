use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Event, Labels, Stay};
use crate::{seed, Error, Result, N_LABELS};

/// Per-chapter presence fractions, most to least frequent chapter.
pub const DEFAULT_PRESENCE: [f64; N_LABELS] = [
    0.718, 0.595, 0.572, 0.418, 0.387, 0.366, 0.354, 0.341, 0.325, 0.279, 0.278, 0.263, 0.245,
    0.168, 0.151, 0.101, 0.093, 0.051, 0.003,
];

const ENTITY_WORDS: usize = 3;
const MODIFIER_WORDS: usize = 3;
const ENTITY_FEATURES: usize = 2;
const MODIFIER_FEATURES: usize = 2;
// Per-token mixing weight of topic words per unit of text signal.
const TOPIC_MIX: f64 = 0.08;
const CONCEPT_TOKEN_PROB: f64 = 0.04;
// Extra expected events per unit of structured signal.
const LABEL_EVENT_BOOST: f64 = 2.0;
const CONCEPT_EVENT_BOOST: f64 = 2.0;

/// A planted concept: several entities, each observed in one of two
/// modifier states. The second state shifts word and event rates the same
/// way for every entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub entities: Vec<String>,
    pub states: [String; 2],
    /// The second state is more likely when this label is active.
    pub linked_label: usize,
}

impl ConceptSpec {
    pub fn tag(&self, entity: &str, state: usize) -> String {
        format!("{}:{}:{}", self.name, entity, self.states[state])
    }

    /// Tag prefix naming one entity, e.g. `bact:enterococcus`.
    pub fn entity_tag(&self, entity: &str) -> String {
        format!("{}:{}", self.name, entity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    /// Stays per patient are `1 + Poisson(extra_stays_mean)`.
    pub extra_stays_mean: f64,
    pub label_prevalences: Vec<f64>,
    pub vocab_size: usize,
    /// Documents per stay are `1 + Poisson(docs_per_stay_mean - 1)`.
    pub docs_per_stay_mean: f64,
    /// Mean words per document.
    pub doc_length: usize,
    pub n_structured_features: usize,
    pub background_rate_min: f64,
    pub background_rate_max: f64,
    pub signal_strength: f64,
    /// Multiplier of `signal_strength` for the text channel.
    pub text_signal: f64,
    /// Multiplier of `signal_strength` for the structured channel.
    pub structured_signal: f64,
    pub topic_words_per_label: usize,
    pub features_per_label: usize,
    /// Probability that a stay carries a tag of a given concept.
    pub concept_rate: f64,
    pub concept_label_link: f64,
    pub concept_pairs: Vec<ConceptSpec>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1600,
            extra_stays_mean: 0.25,
            label_prevalences: DEFAULT_PRESENCE.to_vec(),
            vocab_size: 500,
            docs_per_stay_mean: 3.0,
            doc_length: 40,
            n_structured_features: 200,
            background_rate_min: 0.005,
            background_rate_max: 0.5,
            signal_strength: 3.0,
            text_signal: 1.0,
            structured_signal: 1.0,
            topic_words_per_label: 4,
            features_per_label: 2,
            concept_rate: 0.4,
            concept_label_link: 0.5,
            concept_pairs: vec![
                ConceptSpec {
                    name: "bact".into(),
                    entities: vec!["enterococcus".into(), "staph_aureus".into()],
                    states: ["sensitive".into(), "resistant".into()],
                    linked_label: 12,
                },
                ConceptSpec {
                    name: "shock".into(),
                    entities: vec!["sepsis".into(), "ami".into()],
                    states: ["no_shock".into(), "shock".into()],
                    linked_label: 0,
                },
            ],
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    fn planted_words(&self) -> usize {
        N_LABELS * self.topic_words_per_label
            + self
                .concept_pairs
                .iter()
                .map(|c| c.entities.len() * ENTITY_WORDS + MODIFIER_WORDS)
                .sum::<usize>()
    }

    fn planted_features(&self) -> usize {
        N_LABELS * self.features_per_label
            + self
                .concept_pairs
                .iter()
                .map(|c| c.entities.len() * ENTITY_FEATURES + MODIFIER_FEATURES)
                .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.label_prevalences.len() != N_LABELS {
            return cfg(format!(
                "label_prevalences has {} entries, expected {N_LABELS}",
                self.label_prevalences.len()
            ));
        }
        if let Some((i, p)) = self
            .label_prevalences
            .iter()
            .enumerate()
            .find(|(_, &p)| !(p > 0.0 && p < 1.0))
        {
            return cfg(format!("label prevalence {i} = {p} is outside (0, 1)"));
        }
        if self.doc_length == 0 || self.docs_per_stay_mean < 1.0 {
            return cfg("doc_length must be positive and docs_per_stay_mean >= 1".into());
        }
        if self.vocab_size < self.planted_words() + 1 {
            return cfg(format!(
                "vocab_size {} leaves no background words ({} planted)",
                self.vocab_size,
                self.planted_words()
            ));
        }
        if self.n_structured_features < self.planted_features() {
            return cfg(format!(
                "n_structured_features {} is below the {} planted features",
                self.n_structured_features,
                self.planted_features()
            ));
        }
        let nonneg = [
            ("extra_stays_mean", self.extra_stays_mean),
            ("signal_strength", self.signal_strength),
            ("text_signal", self.text_signal),
            ("structured_signal", self.structured_signal),
            ("concept_label_link", self.concept_label_link),
            ("background_rate_min", self.background_rate_min),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return cfg(format!("{name} = {v} must be a finite value >= 0"));
        }
        if !(self.background_rate_max >= self.background_rate_min) {
            return cfg("background_rate_max must be >= background_rate_min".into());
        }
        if !(0.0..=1.0).contains(&self.concept_rate) {
            return cfg(format!("concept_rate {} outside [0, 1]", self.concept_rate));
        }
        for c in &self.concept_pairs {
            if c.entities.len() < 2 {
                return cfg(format!("concept `{}` needs at least two entities", c.name));
            }
            if c.linked_label >= N_LABELS {
                return cfg(format!(
                    "concept `{}` links to label {}",
                    c.name, c.linked_label
                ));
            }
            let all = std::iter::once(&c.name)
                .chain(&c.entities)
                .chain(c.states.iter());
            if let Some(bad) = all.clone().find(|s| s.is_empty() || s.contains(':')) {
                return cfg(format!(
                    "concept name part `{bad}` is empty or contains ':'"
                ));
            }
        }
        Ok(())
    }

    /// Stable hash of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn word_name(id: usize) -> String {
    format!("w{id:04}")
}

pub fn feature_name(id: usize) -> String {
    format!("feat_{id:04}")
}

struct ConceptLayout {
    entity_words: Vec<Vec<usize>>,
    modifier_words: Vec<usize>,
    entity_features: Vec<Vec<usize>>,
    modifier_features: Vec<usize>,
}

/// Fixed assignment of planted words/features plus background rates.
struct World {
    topic_words: Vec<Vec<usize>>,
    label_features: Vec<Vec<usize>>,
    concepts: Vec<ConceptLayout>,
    background_words: Vec<usize>,
    background: WeightedIndex<f64>,
    base_rates: Vec<f64>,
}

impl World {
    fn build(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<World> {
        let mut next_word = 0usize;
        let mut take_words = |n: usize| {
            let ids: Vec<usize> = (next_word..next_word + n).collect();
            next_word += n;
            ids
        };
        let topic_words = (0..N_LABELS)
            .map(|_| take_words(cfg.topic_words_per_label))
            .collect();
        let mut concept_words = Vec::new();
        for c in &cfg.concept_pairs {
            let entity: Vec<Vec<usize>> = c
                .entities
                .iter()
                .map(|_| take_words(ENTITY_WORDS))
                .collect();
            concept_words.push((entity, take_words(MODIFIER_WORDS)));
        }
        let first_background = next_word;

        let mut next_feature = 0usize;
        let mut take_features = |n: usize| {
            let ids: Vec<usize> = (next_feature..next_feature + n).collect();
            next_feature += n;
            ids
        };
        let label_features = (0..N_LABELS)
            .map(|_| take_features(cfg.features_per_label))
            .collect();
        let concepts = cfg
            .concept_pairs
            .iter()
            .zip(concept_words)
            .map(|(c, (entity_words, modifier_words))| ConceptLayout {
                entity_words,
                modifier_words,
                entity_features: c
                    .entities
                    .iter()
                    .map(|_| take_features(ENTITY_FEATURES))
                    .collect(),
                modifier_features: take_features(MODIFIER_FEATURES),
            })
            .collect();

        let background_words: Vec<usize> = (first_background..cfg.vocab_size).collect();
        // Zipf-like background frequencies.
        let weights: Vec<f64> = (0..background_words.len())
            .map(|r| 1.0 / (r as f64 + 1.0))
            .collect();
        let background = WeightedIndex::new(&weights)
            .map_err(|e| Error::Config(format!("background word weights: {e}")))?;

        let (lo, hi) = (cfg.background_rate_min, cfg.background_rate_max);
        let base_rates = (0..cfg.n_structured_features)
            .map(|_| {
                if lo <= 0.0 || hi <= lo {
                    lo
                } else {
                    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
                }
            })
            .collect();

        Ok(World {
            topic_words,
            label_features,
            concepts,
            background_words,
            background,
            base_rates,
        })
    }
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate)
        .map(|d| d.sample(rng) as usize)
        .unwrap_or(0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// (concept index, entity index, state) for each concept a stay carries.
type ConceptDraw = (usize, usize, usize);

/// Builds a dataset whose labels, words and events follow `config`.
///
/// Labels are independent Bernoulli draws at the configured prevalences.
/// Active labels mix their topic words into the notes and raise the event
/// rates of their associated features, both scaled by the signal strength.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut world_rng = seed::rng(config.seed, &[0]);
    let world = World::build(config, &mut world_rng)?;
    let text_strength = config.signal_strength * config.text_signal;
    let topic_prob = text_strength * TOPIC_MIX / (1.0 + text_strength * TOPIC_MIX);
    let event_boost = config.signal_strength * config.structured_signal * LABEL_EVENT_BOOST;

    let mut rng = seed::rng(config.seed, &[1]);
    let mut stays = Vec::new();
    for p in 0..config.n_patients {
        let patient_id = format!("P{p:06}");
        let n_stays = 1 + poisson(&mut rng, config.extra_stays_mean);
        for _ in 0..n_stays {
            let stay_id = format!("S{:07}", stays.len());
            stays.push(generate_stay(
                config,
                &world,
                &mut rng,
                stay_id,
                patient_id.clone(),
                topic_prob,
                event_boost,
            ));
        }
    }
    Dataset::new(stays, format!("generator:{}", config.hash()))
}

fn generate_stay(
    cfg: &GeneratorConfig,
    world: &World,
    rng: &mut ChaCha8Rng,
    stay_id: String,
    patient_id: String,
    topic_prob: f64,
    event_boost: f64,
) -> Stay {
    let mut labels: Labels = [0; N_LABELS];
    for (l, &p) in labels.iter_mut().zip(&cfg.label_prevalences) {
        *l = u8::from(rng.random::<f64>() < p);
    }
    let active: Vec<usize> = (0..N_LABELS).filter(|&i| labels[i] == 1).collect();

    let mut concepts: Vec<ConceptDraw> = Vec::new();
    let mut tags = BTreeSet::new();
    for (ci, c) in cfg.concept_pairs.iter().enumerate() {
        if rng.random::<f64>() >= cfg.concept_rate {
            continue;
        }
        let entity = rng.random_range(0..c.entities.len());
        let sign = if labels[c.linked_label] == 1 {
            1.0
        } else {
            -1.0
        };
        let p_second = sigmoid(cfg.signal_strength * cfg.concept_label_link * sign);
        let state = usize::from(rng.random::<f64>() < p_second);
        tags.insert(c.tag(&c.entities[entity], state));
        concepts.push((ci, entity, state));
    }

    // Concept word pools active for this stay, each with its own mixing weight.
    let mut concept_pools: Vec<&[usize]> = Vec::new();
    for &(ci, entity, state) in &concepts {
        let layout = &world.concepts[ci];
        concept_pools.push(&layout.entity_words[entity]);
        if state == 1 {
            concept_pools.push(&layout.modifier_words);
        }
    }
    let topic_prob = if active.is_empty() { 0.0 } else { topic_prob };

    let n_docs = 1 + poisson(rng, cfg.docs_per_stay_mean - 1.0);
    let mut documents = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let len = 1 + poisson(rng, cfg.doc_length as f64 - 1.0);
        let mut doc = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = rng.random();
            let word = if u < topic_prob {
                let label = active[rng.random_range(0..active.len())];
                let pool = &world.topic_words[label];
                pool[rng.random_range(0..pool.len())]
            } else {
                let k = ((u - topic_prob) / CONCEPT_TOKEN_PROB) as usize;
                match concept_pools.get(k) {
                    Some(pool) => pool[rng.random_range(0..pool.len())],
                    None => world.background_words[world.background.sample(rng)],
                }
            };
            doc.push(word_name(word));
        }
        documents.push(doc);
    }

    let mut rates = world.base_rates.clone();
    for &l in &active {
        for &f in &world.label_features[l] {
            rates[f] += event_boost;
        }
    }
    for &(ci, entity, state) in &concepts {
        let layout = &world.concepts[ci];
        for &f in &layout.entity_features[entity] {
            rates[f] += CONCEPT_EVENT_BOOST;
        }
        if state == 1 {
            for &f in &layout.modifier_features {
                rates[f] += CONCEPT_EVENT_BOOST;
            }
        }
    }
    let length_of_stay = 24.0 + 24.0 * poisson(rng, 4.0) as f64;
    let mut events = Vec::new();
    for (f, &rate) in rates.iter().enumerate() {
        for _ in 0..poisson(rng, rate) {
            let time = (rng.random::<f64>() * length_of_stay * 100.0).floor() / 100.0;
            events.push(Event {
                feature: feature_name(f),
                value: 1.0,
                time,
            });
        }
    }
    events.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then_with(|| a.feature.cmp(&b.feature))
    });

    Stay {
        stay_id,
        patient_id,
        documents,
        events,
        labels,
        tags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_patients: 50,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn zero_patients_gives_empty_dataset() {
        let d = generate_synthetic(&GeneratorConfig {
            n_patients: 0,
            ..GeneratorConfig::default()
        })
        .unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn invalid_prevalence_is_config_error() {
        let mut cfg = small();
        cfg.label_prevalences[3] = 1.0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        cfg.label_prevalences[3] = 0.0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        cfg.label_prevalences.pop();
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn seed_determines_output() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.stays, b.stays);
        let c = generate_synthetic(&GeneratorConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.stays, c.stays);
    }

    #[test]
    fn structured_events_are_sparse() {
        let d = generate_synthetic(&small()).unwrap();
        let cfg = small();
        let mut present = 0usize;
        for s in &d.stays {
            let distinct: BTreeSet<&str> = s.events.iter().map(|e| e.feature.as_str()).collect();
            present += distinct.len();
        }
        let density = present as f64 / (d.len() * cfg.n_structured_features) as f64;
        assert!(density < 0.3, "density {density}");
    }

    #[test]
    fn concept_tags_follow_format() {
        let d = generate_synthetic(&small()).unwrap();
        let tagged = d.stays.iter().filter(|s| !s.tags.is_empty()).count();
        assert!(tagged > 0);
        for s in &d.stays {
            for t in &s.tags {
                assert_eq!(t.split(':').count(), 3, "{t}");
            }
        }
    }

    #[test]
    fn active_labels_plant_topic_words() {
        let cfg = GeneratorConfig {
            n_patients: 200,
            ..GeneratorConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        // Topic words of label 0 are w0000..w0003.
        let topic: BTreeSet<String> = (0..4).map(word_name).collect();
        let rate = |want: u8| {
            let (mut hits, mut n) = (0usize, 0usize);
            for s in d.stays.iter().filter(|s| s.labels[0] == want) {
                n += 1;
                hits += usize::from(s.documents.iter().flatten().any(|w| topic.contains(w)));
            }
            hits as f64 / n as f64
        };
        assert!(rate(1) > 0.9);
        assert!(rate(0) < 0.1);
    }
}
