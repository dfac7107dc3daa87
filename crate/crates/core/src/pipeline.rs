//! File-level workflows behind the command-line subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::dump_config;
use crate::convergence::{scatter_experiment, ScatterConfig, ScatterFrame, SlackTrace};
use crate::encoder::{CodeMatrix, HashModel, PackedCodes};
use crate::error::{Error, Result};
use crate::io::{self, LabelTable, Vocab};
use crate::mutual_info::{mi_report, pair_index, PairStats};
use crate::retrieval::{evaluate, map_at_k, utilization_histogram, EvalReport, HammingIndex, LabelSet, TopK};
use crate::synthetic::{gaussian_clusters, ClusterSpec};
use crate::tensor::{Matrix, SeededRng};
use crate::training::{train, EpochLog, TrainConfig, LOG_HEADER};

pub const MODEL_FILE: &str = "model.bin";
pub const CODES_FILE: &str = "codes.mihc";
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.txt";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn flush(w: &mut impl Write, path: &Path) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:05}.bin")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HashModel,
    pub codes: CodeMatrix,
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Model initialized from the config's seed.
pub fn initial_model(feature_dim: usize, config: &TrainConfig) -> Result<HashModel> {
    HashModel::init(feature_dim, config.code_len, &mut SeededRng::new(config.seed))
}

/// Trains on `features` and writes into `out`: the config dump, `log.csv`
/// (one row per epoch, flushed as training goes), a checkpoint at every
/// learning-rate decay boundary, the final model and the training set's codes.
pub fn train_to_dir(features: &Matrix, config: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    io::ensure_dir(out)?;
    io::write_bytes(&out.join(CONFIG_FILE), dump_config(config).as_bytes())?;
    let log_path = out.join(LOG_FILE);
    let mut log = create(&log_path)?;
    write_line(&mut log, &log_path, LOG_HEADER)?;
    let mut model = initial_model(features.cols(), config)?;
    let mut checkpoints = Vec::new();
    let logs = train(&mut model, features, config, |row, m| {
        write_line(&mut log, &log_path, &row.csv_row())?;
        flush(&mut log, &log_path)?;
        let done = row.epoch + 1;
        if done % config.lr_decay_every == 0 && done < config.epochs {
            let p = out.join(checkpoint_name(done));
            io::save_model(&p, m)?;
            checkpoints.push(p);
        }
        Ok(())
    })?;
    let codes = model.encode(features)?;
    io::save_model(&out.join(MODEL_FILE), &model)?;
    io::save_codes(&out.join(CODES_FILE), &codes.pack())?;
    Ok(TrainOutcome {
        model,
        codes,
        logs,
        checkpoints,
    })
}

/// Encodes a feature file with a saved model.
pub fn encode_file(model: &Path, features: &Path, out: &Path) -> Result<PackedCodes> {
    let model = io::load_model(model)?;
    let codes = model.encode(&io::load_features(features)?)?.pack();
    io::save_codes(out, &codes)?;
    Ok(codes)
}

/// Builds an index from codes, taking ids and labels from a label file when
/// one is given.
pub fn build_index(codes: PackedCodes, labels: Option<&Path>) -> Result<(HammingIndex, Vocab)> {
    let mut vocab = Vocab::new();
    let index = match labels {
        None => HammingIndex::new(codes),
        Some(p) => {
            let table = io::load_labels(p, &mut vocab)?;
            table.expect_rows(codes.rows(), p)?;
            HammingIndex::with_ids(codes, table.ids)?.with_labels(table.sets)?
        }
    };
    Ok((index, vocab))
}

pub const QUERY_HEADER: [&str; 4] = ["query", "rank", "id", "distance"];

/// Top-`k` results for every query row, as CSV rows.
pub fn query_rows(index: &HammingIndex, queries: &PackedCodes, k: usize) -> Result<Vec<[String; 4]>> {
    let mut rows = Vec::new();
    for q in 0..queries.rows() {
        let TopK { hits, .. } = index.query_topk(queries.row(q), k)?;
        for (rank, h) in hits.iter().enumerate() {
            rows.push([q.to_string(), (rank + 1).to_string(), h.id.to_string(), h.distance.to_string()]);
        }
    }
    Ok(rows)
}

/// Query label sets interned in the index's vocabulary.
pub fn load_query_labels(path: &Path, vocab: &Vocab, rows: usize) -> Result<Vec<LabelSet>> {
    let mut v = vocab.clone();
    let table: LabelTable = io::load_labels(path, &mut v)?;
    table.expect_rows(rows, path)?;
    Ok(table.sets)
}

/// Runs every metric and writes `map.csv`, `pr.csv` and `utilization.csv`.
pub fn evaluate_to_dir(
    index: &HammingIndex,
    queries: &PackedCodes,
    query_labels: &[LabelSet],
    k: usize,
    out: &Path,
) -> Result<EvalReport> {
    let report = evaluate(index, queries, query_labels, k)?;
    write_report(&report, out)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    io::ensure_dir(out)?;
    io::write_csv(
        &out.join("map.csv"),
        &["k", "map"],
        [[report.k.to_string(), report.map_at_k.to_string()]],
    )?;
    io::write_csv(
        &out.join("pr.csv"),
        &["recall", "precision"],
        report.pr_points.iter().map(|p| [p.recall.to_string(), p.precision.to_string()]),
    )?;
    io::write_csv(
        &out.join("utilization.csv"),
        &["code", "count"],
        report.utilization.iter().map(|(key, c)| [key.to_string(), c.to_string()]),
    )
}

pub const STATS_HEADER: [&str; 10] = ["pair", "i", "j", "p_i", "p_j", "p_pp", "p_pn", "p_np", "p_nn", "mi"];

/// One row per bit pair `i < j`: marginals `P(B=+1)`, the oriented joint
/// table and the pair's mutual information.
pub fn stats_rows(stats: &PairStats) -> Vec<[String; 10]> {
    let k = stats.bits();
    let report = mi_report(stats);
    let mut rows = Vec::with_capacity(report.per_pair.len());
    for i in 0..k {
        for j in i + 1..k {
            let t = stats.joint(i, j);
            rows.push([
                pair_index(k, i, j).to_string(),
                i.to_string(),
                j.to_string(),
                stats.marginal(i).to_string(),
                stats.marginal(j).to_string(),
                t[0].to_string(),
                t[1].to_string(),
                t[2].to_string(),
                t[3].to_string(),
                report.get(i, j).to_string(),
            ]);
        }
    }
    rows
}

pub const SLACK_HEADER: [&str; 5] = ["step", "epsilon", "lr", "delta_i", "delta_j"];

/// Row `t` holds `ε^t` and the step taken from it; the final row has no step.
pub fn slack_rows(trace: &SlackTrace) -> Vec<[String; 5]> {
    trace
        .epsilon_series
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let step = |v: &Vec<f64>| v.get(t).map(f64::to_string).unwrap_or_default();
            [
                t.to_string(),
                e.to_string(),
                step(&trace.lr_series),
                step(&trace.delta_i),
                step(&trace.delta_j),
            ]
        })
        .collect()
}

/// Runs the scatter experiment and writes `frame_NNNN.csv` (sample, x, y)
/// per step plus `distinct.csv`.
pub fn scatter_to_dir(features: &Matrix, config: &ScatterConfig, out: &Path) -> Result<Vec<ScatterFrame>> {
    let frames = scatter_experiment(features, config)?;
    io::ensure_dir(out)?;
    for f in &frames {
        io::write_csv(
            &out.join(format!("frame_{:04}.csv", f.step)),
            &["sample", "x", "y"],
            f.points
                .iter()
                .enumerate()
                .map(|(s, (x, y))| [s.to_string(), x.to_string(), y.to_string()]),
        )?;
    }
    io::write_csv(
        &out.join("distinct.csv"),
        &["step", "distinct"],
        frames.iter().map(|f| [f.step.to_string(), f.distinct_points().to_string()]),
    )?;
    Ok(frames)
}

/// Cluster labels as a label table with tokens `c0`, `c1`, …
pub fn cluster_label_table(labels: &[usize], vocab: &mut Vocab) -> LabelTable {
    LabelTable {
        ids: (0..labels.len() as u64).collect(),
        sets: labels
            .iter()
            .map(|&c| LabelSet::single(vocab.intern(&format!("c{c}"))))
            .collect(),
    }
}

/// Writes a synthetic feature file and its label file.
pub fn gen_synthetic(spec: &ClusterSpec, features: &Path, labels: &Path) -> Result<()> {
    if spec.samples == 0 || spec.dim == 0 || spec.clusters == 0 {
        return Err(Error::InvalidArgument("samples, dim and clusters must be positive".into()));
    }
    let (x, l) = gaussian_clusters(spec);
    io::save_features(features, &x)?;
    let mut vocab = Vocab::new();
    io::save_labels(labels, &cluster_label_table(&l, &mut vocab), &vocab)
}

/// Result of training on a labeled dataset and retrieving a held-out prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutResult {
    pub map: f64,
    /// Samples sharing the most-used code, over the whole dataset.
    pub max_code_count: usize,
    pub distinct_codes: usize,
}

/// Trains in memory on all samples, then uses the first `queries` samples as
/// queries against the rest and reports MAP@`k`.
pub fn holdout_run(
    features: &Matrix,
    labels: &[LabelSet],
    config: &TrainConfig,
    queries: usize,
    k: usize,
) -> Result<HoldoutResult> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::dim("holdout_run", n, labels.len()));
    }
    if queries == 0 || queries >= n {
        return Err(Error::InvalidArgument(format!("need 0 < queries < {n}, got {queries}")));
    }
    let mut model = initial_model(features.cols(), config)?;
    train(&mut model, features, config, |_, _| Ok(()))?;
    let codes = model.encode(features)?;
    let hist = utilization_histogram(&codes);
    let packed = codes.pack();
    let q: Vec<usize> = (0..queries).collect();
    let db: Vec<usize> = (queries..n).collect();
    let index = HammingIndex::with_ids(packed.select_rows(&db), db.iter().map(|&i| i as u64).collect())?
        .with_labels(labels[queries..].to_vec())?;
    Ok(HoldoutResult {
        map: map_at_k(&index, &packed.select_rows(&q), &labels[..queries], k)?,
        max_code_count: hist[0].1,
        distinct_codes: hist.len(),
    })
}
