//! Centroid-difference directions in embedding space.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::corpus::Dataset;
use crate::{seed, Error, Result};

/// Difference vectors shorter than this have no direction.
pub const DEGENERACY_TOL: f64 = 1e-12;
pub const DEFAULT_MIN_GROUP_SIZE: usize = 25;

/// Stays carrying every tag in `tags`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub tags: BTreeSet<String>,
    pub min_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub name: String,
    pub members: Vec<String>,
}

impl GroupSpec {
    pub fn new(
        name: impl Into<String>,
        tags: impl IntoIterator<Item = impl Into<String>>,
    ) -> GroupSpec {
        GroupSpec {
            name: name.into(),
            tags: tags.into_iter().map(Into::into).collect(),
            min_size: 1,
        }
    }

    pub fn resolve(&self, dataset: &Dataset) -> Group {
        Group {
            name: self.name.clone(),
            members: dataset
                .stays
                .iter()
                .filter(|s| self.tags.iter().all(|t| s.has_tag(t)))
                .map(|s| s.stay_id.clone())
                .collect(),
        }
    }
}

pub type EmbeddingTable = BTreeMap<String, Vec<f64>>;

pub fn centroid(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("centroid of an empty group".into()))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != out.len() {
            return Err(Error::Shape(format!(
                "vector of width {} among width {}",
                v.len(),
                out.len()
            )));
        }
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += x);
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

fn group_centroid(group: &Group, embeddings: &EmbeddingTable) -> Result<Vec<f64>> {
    if group.members.is_empty() {
        return Err(Error::Empty(format!(
            "group `{}` has no members",
            group.name
        )));
    }
    let vectors = group
        .members
        .iter()
        .map(|id| {
            embeddings.get(id).map(Vec::as_slice).ok_or_else(|| {
                Error::Integrity(format!(
                    "no embedding for stay {id} (group `{}`)",
                    group.name
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    centroid(&vectors)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionResult {
    /// Names of the two directions being compared.
    pub first: String,
    pub second: String,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub cosine: f64,
    /// Sizes of groups A, B, C, D.
    pub sizes: [usize; 4],
}

/// Cosine between `v1 = c(B) − c(A)` and `v2 = c(D) − c(C)`.
pub fn direction_cosine(
    a: &Group,
    b: &Group,
    c: &Group,
    d: &Group,
    embeddings: &EmbeddingTable,
) -> Result<DirectionResult> {
    let diff = |from: &Group, to: &Group| -> Result<Vec<f64>> {
        let (f, t) = (
            group_centroid(from, embeddings)?,
            group_centroid(to, embeddings)?,
        );
        if f.len() != t.len() {
            return Err(Error::Shape(
                "groups have embeddings of different widths".into(),
            ));
        }
        let v: Vec<f64> = t.iter().zip(&f).map(|(x, y)| x - y).collect();
        if norm(&v) < DEGENERACY_TOL {
            return Err(Error::DegenerateDirection(format!(
                "`{}` -> `{}`",
                from.name, to.name
            )));
        }
        Ok(v)
    };
    let v1 = diff(a, b)?;
    let v2 = diff(c, d)?;
    if v1.len() != v2.len() {
        return Err(Error::Shape("directions have different widths".into()));
    }
    Ok(DirectionResult {
        first: format!("{}->{}", a.name, b.name),
        second: format!("{}->{}", c.name, d.name),
        cosine: cosine(&v1, &v2),
        v1,
        v2,
        sizes: [
            a.members.len(),
            b.members.len(),
            c.members.len(),
            d.members.len(),
        ],
    })
}

/// Cosines between `n_samples` pairs of independent standard-normal vectors.
pub fn random_cosines(dim: usize, n_samples: usize, seed_value: u64) -> Vec<f64> {
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed_value, &[0xC05, i as u64]);
            let mut draw =
                || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let (a, b) = (draw(), draw());
            cosine(&a, &b)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomBaseline {
    pub dim: usize,
    pub n_samples: usize,
    pub mean: f64,
    pub std: f64,
    pub variance: f64,
}

pub fn random_cosine_baseline(
    dim: usize,
    n_samples: usize,
    seed_value: u64,
) -> Result<RandomBaseline> {
    if dim < 2 {
        return Err(Error::Config(format!("dim must be at least 2, got {dim}")));
    }
    if n_samples < 1000 {
        return Err(Error::Config(format!(
            "need at least 1000 samples, got {n_samples}"
        )));
    }
    let c = random_cosines(dim, n_samples, seed_value);
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let variance = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RandomBaseline {
        dim,
        n_samples,
        mean,
        std: variance.sqrt(),
        variance,
    })
}

/// For every unordered pair of entities whose two modifier groups both
/// reach `min_size`, the cosine between their modifier directions. An
/// entity's group for a state is the stays tagged `{entity}:{state}`.
/// Sorted by cosine, descending.
pub fn concept_scan(
    entity_tags: &[String],
    modifier: (&str, &str),
    dataset: &Dataset,
    embeddings: &EmbeddingTable,
    min_size: usize,
) -> Result<Vec<DirectionResult>> {
    let groups: Vec<(Group, Group)> = entity_tags
        .iter()
        .map(|e| {
            let g = |state: &str| {
                GroupSpec::new(format!("{e}:{state}"), [format!("{e}:{state}")]).resolve(dataset)
            };
            (g(modifier.0), g(modifier.1))
        })
        .filter(|(a, b)| a.members.len() >= min_size && b.members.len() >= min_size)
        .collect();
    if groups.len() < 2 {
        return Err(Error::Empty(format!(
            "{} entities have both modifier groups with at least {min_size} stays; need 2",
            groups.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..groups.len())
        .flat_map(|i| (i + 1..groups.len()).map(move |j| (i, j)))
        .collect();
    let mut out = pairs
        .par_iter()
        .map(|&(i, j)| {
            direction_cosine(
                &groups[i].0,
                &groups[i].1,
                &groups[j].0,
                &groups[j].1,
                embeddings,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|x, y| {
        y.cosine
            .total_cmp(&x.cosine)
            .then_with(|| (&x.first, &x.second).cmp(&(&y.first, &y.second)))
    });
    Ok(out)
}

fn entity_of(direction: &str) -> &str {
    let from = direction.split("->").next().unwrap_or(direction);
    from.rsplit_once(':').map_or(from, |(e, _)| e)
}

pub fn scan_to_csv(results: &[DirectionResult]) -> String {
    let mut s =
        String::from("entity_a,entity_b,cosine,n_a_state0,n_a_state1,n_b_state0,n_b_state1\n");
    for r in results {
        let [a0, a1, b0, b1] = r.sizes;
        writeln!(
            s,
            "{},{},{:.6},{a0},{a1},{b0},{b1}",
            entity_of(&r.first),
            entity_of(&r.second),
            r.cosine
        )
        .unwrap();
    }
    s
}

pub fn write_scan_csv(path: &Path, results: &[DirectionResult]) -> Result<()> {
    std::fs::write(path, scan_to_csv(results)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn group(name: &str, ids: &[&str]) -> Group {
        Group {
            name: name.into(),
            members: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn table(rows: &[(&str, Vec<f64>)]) -> EmbeddingTable {
        rows.iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[&[3.0, -1.0]]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(
            centroid(&[&[2.0, -5.0], &[-2.0, 5.0]]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            centroid(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(matches!(centroid(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn identical_and_orthogonal_directions() {
        let e = table(&[
            ("a", vec![0.0, 0.0, 0.0]),
            ("b", vec![1.0, 0.0, 0.0]),
            ("c", vec![5.0, 5.0, 5.0]),
            ("d", vec![6.0, 5.0, 5.0]),
            ("f", vec![5.0, 7.0, 5.0]),
        ]);
        let (a, b, c, d, f) = (
            group("a", &["a"]),
            group("b", &["b"]),
            group("c", &["c"]),
            group("d", &["d"]),
            group("f", &["f"]),
        );
        assert!((direction_cosine(&a, &b, &c, &d, &e).unwrap().cosine - 1.0).abs() < 1e-12);
        assert!(direction_cosine(&a, &b, &c, &f, &e).unwrap().cosine.abs() < 1e-9);
    }

    #[test]
    fn degenerate_direction_names_the_pair() {
        let e = table(&[
            ("a", vec![1.0, 2.0]),
            ("b", vec![1.0, 2.0]),
            ("c", vec![0.0, 0.0]),
        ]);
        let (a, b, c) = (
            group("left", &["a"]),
            group("right", &["b"]),
            group("c", &["c"]),
        );
        match direction_cosine(&a, &b, &c, &a, &e) {
            Err(Error::DegenerateDirection(m)) => {
                assert!(m.contains("left") && m.contains("right"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_embedding_is_reported() {
        let e = table(&[("a", vec![1.0])]);
        let (a, z) = (group("a", &["a"]), group("z", &["zz"]));
        assert!(matches!(
            direction_cosine(&a, &z, &a, &z, &e),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn swapping_pairs() {
        let mut rng = seed::rng(4, &[]);
        let e: EmbeddingTable = (0..8)
            .map(|i| {
                (
                    format!("s{i}"),
                    (0..6).map(|_| rng.random::<f64>()).collect(),
                )
            })
            .collect();
        let g: Vec<Group> = (0..4)
            .map(|i| {
                group(
                    &format!("g{i}"),
                    &[&format!("s{}", 2 * i), &format!("s{}", 2 * i + 1)],
                )
            })
            .collect();
        let base = direction_cosine(&g[0], &g[1], &g[2], &g[3], &e)
            .unwrap()
            .cosine;
        let both = direction_cosine(&g[1], &g[0], &g[3], &g[2], &e)
            .unwrap()
            .cosine;
        let one = direction_cosine(&g[1], &g[0], &g[2], &g[3], &e)
            .unwrap()
            .cosine;
        assert!((base - both).abs() < 1e-12);
        assert!((base + one).abs() < 1e-12);
    }

    #[test]
    fn random_baseline_matches_analytic_std() {
        let b = random_cosine_baseline(448, 20_000, 1).unwrap();
        assert!(b.mean.abs() < 0.005, "{b:?}");
        assert!((b.std - 1.0 / 448f64.sqrt()).abs() < 0.005, "{b:?}");
        assert!((b.variance - b.std * b.std).abs() < 1e-15);
        let b2 = random_cosine_baseline(2, 20_000, 1).unwrap();
        assert!((b2.std - 0.5f64.sqrt()).abs() < 0.02, "{b2:?}");
        assert_eq!(random_cosines(10, 50, 7), random_cosines(10, 50, 7));
        assert!(random_cosine_baseline(1, 2000, 0).is_err());
        assert!(random_cosine_baseline(4, 999, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = DirectionResult {
            first: "bact:a:s->bact:a:r".into(),
            second: "bact:b:s->bact:b:r".into(),
            v1: vec![],
            v2: vec![],
            cosine: 0.5,
            sizes: [30, 31, 40, 41],
        };
        let csv = scan_to_csv(&[r]);
        assert_eq!(
            csv,
            "entity_a,entity_b,cosine,n_a_state0,n_a_state1,n_b_state0,n_b_state1\nbact:a,bact:b,0.500000,30,31,40,41\n"
        );
    }
}
