use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use visitembed::corpus::{
    generate_synthetic, read_dataset, split_patients, write_dataset, Dataset, Split,
    SplitAssignment,
};
use visitembed::featurize::Preprocessing;
use visitembed::hybridnet::{
    extract_embedding, load_checkpoint, read_embeddings_csv, save_checkpoint, train,
    write_embeddings_csv, Checkpoint,
};
use visitembed::metrics::three_way_protocol;
use visitembed::probe::{concept_scan, random_cosine_baseline, write_scan_csv, EmbeddingTable};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{artifact, ArtifactRef, Manifest};

pub const DATASET: &str = "dataset.jsonl";
pub const SPLITS: &str = "splits.csv";
pub const PREPROCESSING: &str = "preprocessing.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const METRICS: &str = "metrics.csv";
pub const METRICS_TABLE: &str = "metrics_table.txt";
pub const PROBE: &str = "probe.csv";
pub const PROBE_BASELINE: &str = "probe_baseline.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Split,
    Featurize,
    Train,
    Embed,
    Eval,
    Probe,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Split,
        Stage::Featurize,
        Stage::Train,
        Stage::Embed,
        Stage::Eval,
        Stage::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Split => "split",
            Stage::Featurize => "featurize",
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::Eval => "eval",
            Stage::Probe => "probe",
        }
    }

    fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Generate => &[],
            Stage::Split => &[DATASET],
            Stage::Featurize => &[DATASET, SPLITS],
            Stage::Train => &[DATASET, SPLITS, PREPROCESSING],
            Stage::Embed => &[DATASET, PREPROCESSING, CHECKPOINT],
            Stage::Eval => &[DATASET, SPLITS, PREPROCESSING, CHECKPOINT],
            Stage::Probe => &[DATASET, EMBEDDINGS],
        }
    }

    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Generate => &[DATASET],
            Stage::Split => &[SPLITS],
            Stage::Featurize => &[PREPROCESSING],
            Stage::Train => &[CHECKPOINT, HISTORY],
            Stage::Embed => &[EMBEDDINGS],
            Stage::Eval => &[METRICS, METRICS_TABLE],
            Stage::Probe => &[PROBE, PROBE_BASELINE],
        }
    }
}

fn producer(artifact: &str) -> &'static str {
    Stage::ALL
        .iter()
        .find(|s| s.outputs().contains(&artifact))
        .map_or("pipeline", |s| s.name())
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingUpstream {
                path,
                producer: producer(name),
            })
        }
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        Ok(read_dataset(&self.require(DATASET)?)?)
    }

    fn splits(&self) -> Result<SplitAssignment, CliError> {
        Ok(SplitAssignment::read_csv(&self.require(SPLITS)?)?)
    }

    fn preprocessing(&self) -> Result<Preprocessing, CliError> {
        Ok(Preprocessing::load(&self.require(PREPROCESSING)?)?)
    }

    /// Loads the checkpoint and checks it was trained on `preprocessing`.
    fn checkpoint(&self, preprocessing: &Preprocessing) -> Result<Checkpoint, CliError> {
        let ck = load_checkpoint(&self.require(CHECKPOINT)?)?;
        if ck.preprocessing_hash != preprocessing.hash() {
            return Err(CliError::Validation(format!(
                "{CHECKPOINT} was trained with a different {PREPROCESSING}; rerun `visitembed train`"
            )));
        }
        Ok(ck)
    }
}

pub fn run(stage: Stage, cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let ctx = Ctx { cfg, dir };
    for name in stage.inputs() {
        ctx.require(name)?;
    }
    let inputs = stage
        .inputs()
        .iter()
        .map(|n| artifact(dir, n))
        .collect::<Result<Vec<ArtifactRef>, _>>()?;

    let started = Instant::now();
    eprintln!("[{}] running", stage.name());
    match stage {
        Stage::Generate => generate(&ctx)?,
        Stage::Split => split(&ctx)?,
        Stage::Featurize => featurize(&ctx)?,
        Stage::Train => train_stage(&ctx)?,
        Stage::Embed => embed(&ctx)?,
        Stage::Eval => eval(&ctx)?,
        Stage::Probe => probe(&ctx)?,
    }
    let wall_time_seconds = started.elapsed().as_secs_f64();

    let outputs = stage
        .outputs()
        .iter()
        .map(|n| artifact(dir, n))
        .collect::<Result<Vec<ArtifactRef>, _>>()?;
    Manifest {
        stage: stage.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        inputs,
        outputs,
        config: cfg.clone(),
        wall_time_seconds,
    }
    .write(dir)?;
    eprintln!("[{}] done in {wall_time_seconds:.1}s", stage.name());
    Ok(())
}

fn generate(ctx: &Ctx) -> Result<(), CliError> {
    let data = generate_synthetic(&ctx.cfg.generator())?;
    eprintln!("[generate] {} stays", data.len());
    Ok(write_dataset(&data, &ctx.path(DATASET))?)
}

fn split(ctx: &Ctx) -> Result<(), CliError> {
    let data = ctx.dataset()?;
    let cfg = ctx.cfg;
    let splits = split_patients(
        &data,
        cfg.n_val_patients,
        cfg.n_test_patients,
        cfg.min_distinct_codes,
        cfg.split_seed(),
    )?;
    eprintln!(
        "[split] train {} / validation {} / test {} patients",
        splits.count(Split::Train),
        splits.count(Split::Validation),
        splits.count(Split::Test)
    );
    Ok(splits.write_csv(&ctx.path(SPLITS))?)
}

fn featurize(ctx: &Ctx) -> Result<(), CliError> {
    let data = ctx.dataset()?;
    let splits = ctx.splits()?;
    let train_stays = splits.stays(&data, &[Split::Train])?;
    let pre = Preprocessing::fit(&train_stays, &ctx.cfg.featurize())?;
    eprintln!(
        "[featurize] vocabulary {} words, max_len {} (percentile length {}), {} structured features",
        pre.vocabulary.len(),
        pre.max_len,
        pre.percentile_length,
        pre.selector.k()
    );
    Ok(pre.save(&ctx.path(PREPROCESSING))?)
}

fn train_stage(ctx: &Ctx) -> Result<(), CliError> {
    let data = ctx.dataset()?;
    let splits = ctx.splits()?;
    let pre = ctx.preprocessing()?;
    let model = ctx.cfg.model(pre.vocabulary.len(), pre.selector.k());
    let outcome = train(&data, &splits, &pre, &model, &ctx.cfg.train())?;

    let mut history = String::from("epoch,train_loss,val_loss,improved\n");
    for r in &outcome.history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(history, "{},{},{val},{}", r.epoch, r.train_loss, r.improved).unwrap();
        eprintln!(
            "[train] epoch {} train_loss {:.4} val_loss {val}",
            r.epoch, r.train_loss
        );
    }
    let path = ctx.path(HISTORY);
    std::fs::write(&path, history).map_err(|e| CliError::io(&path, e))?;
    Ok(save_checkpoint(
        &outcome.params,
        &model,
        &pre.hash(),
        &ctx.path(CHECKPOINT),
    )?)
}

fn embed(ctx: &Ctx) -> Result<(), CliError> {
    let data = ctx.dataset()?;
    let pre = ctx.preprocessing()?;
    let ck = ctx.checkpoint(&pre)?;
    let embeddings = data
        .stays
        .par_iter()
        .map(|s| extract_embedding(&ck.config, &ck.params, &pre, s))
        .collect::<Result<Vec<_>, _>>()?;
    eprintln!(
        "[embed] {} stays x {} values",
        embeddings.len(),
        ck.config.embedding_width()
    );
    Ok(write_embeddings_csv(&ctx.path(EMBEDDINGS), &embeddings)?)
}

fn eval(ctx: &Ctx) -> Result<(), CliError> {
    let data = ctx.dataset()?;
    let splits = ctx.splits()?;
    let pre = ctx.preprocessing()?;
    let ck = ctx.checkpoint(&pre)?;
    let report = three_way_protocol(
        &data,
        &splits,
        &pre,
        &ck.config,
        &ck.params,
        &ctx.cfg.forest(),
    )?;
    let table = report.table();
    print!("{table}");
    for (name, content) in [(METRICS, report.to_csv()), (METRICS_TABLE, table)] {
        let path = ctx.path(name);
        std::fs::write(&path, content).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn probe(ctx: &Ctx) -> Result<(), CliError> {
    let data = ctx.dataset()?;
    let table: EmbeddingTable = read_embeddings_csv(&ctx.require(EMBEDDINGS)?)?
        .into_iter()
        .map(|e| (e.stay_id, e.vector))
        .collect();
    let dim = table.values().next().map_or(0, Vec::len);

    let mut results = Vec::new();
    for concept in &ctx.cfg.generator().concept_pairs {
        let entities: Vec<String> = concept
            .entities
            .iter()
            .map(|e| concept.entity_tag(e))
            .collect();
        let states = (concept.states[0].as_str(), concept.states[1].as_str());
        match concept_scan(&entities, states, &data, &table, ctx.cfg.min_group_size) {
            Ok(r) => results.extend(r),
            Err(visitembed::Error::Empty(why)) => {
                eprintln!("[probe] skipping `{}`: {why}", concept.name)
            }
            Err(e) => return Err(e.into()),
        }
    }
    results.sort_by(|a, b| {
        b.cosine
            .total_cmp(&a.cosine)
            .then_with(|| (&a.first, &a.second).cmp(&(&b.first, &b.second)))
    });
    for r in &results {
        eprintln!(
            "[probe] {} vs {}: cosine {:.3}",
            r.first, r.second, r.cosine
        );
    }
    write_scan_csv(&ctx.path(PROBE), &results)?;

    let baseline = random_cosine_baseline(dim, ctx.cfg.baseline_samples, ctx.cfg.probe_seed())?;
    eprintln!(
        "[probe] random baseline dim {dim}: mean {:.4}, std {:.4}, variance {:.5}",
        baseline.mean, baseline.std, baseline.variance
    );
    let json = serde_json::json!({
        "dim": baseline.dim,
        "n_samples": baseline.n_samples,
        "mean": baseline.mean,
        "std": baseline.std,
        "variance": baseline.variance,
    });
    let path = ctx.path(PROBE_BASELINE);
    let mut text = serde_json::to_string_pretty(&json).expect("baseline serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}
