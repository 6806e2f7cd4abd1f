use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use circuitcl::augment::{self, AugmentError, AugmentedSample, RelationIndex};
use circuitcl::autodiff::Checkpoint;
use circuitcl::contrastive::{self, ContrastiveError, PretrainData, RelationStats};
use circuitcl::corpus::{self, bundled_graphs, bundled_labels, CorpusError, LabelFile};
use circuitcl::downstream::{
    self, DownstreamError, FrozenEncoder, RegressionMetrics, RunMetrics, Task1Data, Task1Metrics, TaskTrainConfig,
};
use circuitcl::graph::CircuitGraph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::ZeroMaxChain => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ContrastiveError> for CliError {
    fn from(e: ContrastiveError) -> Self {
        match e {
            ContrastiveError::NanLoss { .. } => CliError::Numeric(e.to_string()),
            ContrastiveError::BadTemperature => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<DownstreamError> for CliError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::NanLoss { .. } => CliError::Numeric(e.to_string()),
            DownstreamError::MissingCheckpoint(_) | DownstreamError::FrozenDepth { .. } => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

pub fn parse(input: &Path, emit: Option<&Path>) -> Result<(), CliError> {
    let graph = corpus::load_netlist(input)?;
    let json = graph.to_json();
    match emit {
        Some(path) => {
            write_text(path, &json)?;
            let counts = graph.type_counts();
            eprintln!(
                "{}: {} nodes ({} nets, {} devices), {} arcs",
                graph.name,
                graph.num_nodes(),
                counts[..3].iter().sum::<usize>(),
                graph.device_nodes().len(),
                graph.num_arcs()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

pub fn augment(corpus_dir: &Path, n_pos: usize, n_neg: usize, max_chain: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let corpus = corpus::load_netlist_dir(corpus_dir)?;
    let (samples, index) = augment::generate_dataset(&corpus, n_pos, n_neg, max_chain, seed)?;
    augment::write_dataset(out, &samples, &index)?;
    eprintln!("{} samples from {} circuits written to {}", samples.len(), corpus.len(), out.display());
    Ok(())
}

/// Splits `fraction` of each origin's augmented samples off as a held-out
/// set; originals always stay in training.
fn split_heldout(
    samples: Vec<AugmentedSample>,
    fraction: f64,
    seed: u64,
) -> (Vec<AugmentedSample>, Vec<AugmentedSample>) {
    let mut by_origin: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if !s.chain.is_empty() {
            by_origin.entry(s.origin_id.clone()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; samples.len()];
    for members in by_origin.values_mut() {
        members.shuffle(&mut rng);
        let k = (members.len() as f64 * fraction).round() as usize;
        for &i in &members[..k] {
            held[i] = true;
        }
    }
    let (h, t): (Vec<_>, Vec<_>) = samples.into_iter().zip(held).partition(|(_, h)| *h);
    (t.into_iter().map(|x| x.0).collect(), h.into_iter().map(|x| x.0).collect())
}

pub fn pretrain(cfg: &RunConfig, dataset: &Path, out: &Path, metrics_path: Option<&Path>) -> Result<(), CliError> {
    let (samples, _) = augment::read_dataset(dataset)?;
    let (train, heldout) = match &cfg.data.heldout {
        Some(dir) => (samples, augment::read_dataset(dir)?.0),
        None => split_heldout(samples, cfg.data.heldout_fraction, cfg.seed),
    };
    let train_index = RelationIndex::new(&train);
    let heldout_index = RelationIndex::new(&heldout);
    let train_cfg = cfg.train.pretrain(cfg.seed);
    let data = PretrainData {
        train: &train,
        train_index: &train_index,
        heldout: (!heldout.is_empty()).then_some((heldout.as_slice(), &heldout_index)),
    };
    let output = contrastive::pretrain(data, &cfg.encoder, &cfg.loss, &train_cfg, |m| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  pos {:.3}  non-equal {:.3}  neg {:.3}",
            m.epoch, m.mean_loss, m.stats.pos_mean, m.stats.noneq_mean, m.stats.neg_mean
        );
    })?;
    let header = serde_json::json!({
        "encoder": cfg.encoder,
        "loss": cfg.loss,
        "train": train_cfg,
    });
    write_text(out, &output.params.to_checkpoint(header).to_json())?;
    let metrics_path = metrics_path.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("metrics.csv"));
    contrastive::write_metrics_csv(create(&metrics_path)?, &output.metrics)?;
    Ok(())
}

fn load_encoder(ckpt: &Path) -> Result<FrozenEncoder, CliError> {
    let text = fs::read_to_string(ckpt).map_err(io_err(ckpt))?;
    let checkpoint = Checkpoint::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", ckpt.display())))?;
    FrozenEncoder::from_checkpoint(&checkpoint).map_err(|e| CliError::Input(format!("{}: {e}", ckpt.display())))
}

pub fn eval_relations(dataset: &Path, ckpt: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let (samples, index) = augment::read_dataset(dataset)?;
    let enc = load_encoder(ckpt)?;
    let stats: RelationStats = contrastive::relation_stats(&enc.spec, &enc.params, &samples, &index)?;
    println!("relation    mean     std      pairs");
    println!("positive    {:<8.4} {:<8.4} {}", stats.pos_mean, stats.pos_std, stats.pos_pairs);
    println!("non-equal   {:<8.4} {:<8.4} {}", stats.noneq_mean, stats.noneq_std, stats.noneq_pairs);
    println!("negative    {:<8.4} {:<8.4} {}", stats.neg_mean, stats.neg_std, stats.neg_pairs);
    if let Some(path) = out {
        write_text(path, &to_json(&stats))?;
    }
    Ok(())
}

fn embed_inputs(inputs: &[PathBuf]) -> Result<Vec<AugmentedSample>, CliError> {
    let mut samples = Vec::new();
    for path in inputs {
        if path.is_dir() {
            samples.extend(augment::read_dataset(path)?.0);
        } else if path.extension().is_some_and(|e| e == "sp") {
            samples.push(AugmentedSample::original(corpus::load_netlist(path)?));
        } else {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let graph = CircuitGraph::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            samples.push(AugmentedSample::original(graph));
        }
    }
    Ok(samples)
}

pub fn embed(inputs: &[PathBuf], ckpt: &Path, out: &Path) -> Result<(), CliError> {
    let samples = embed_inputs(inputs)?;
    let enc = load_encoder(ckpt)?;
    let graphs: Vec<&CircuitGraph> = samples.iter().map(|s| &s.graph).collect();
    let z = enc.spec.embed_many(&enc.params, &graphs).map_err(|e| CliError::Input(e.to_string()))?;
    downstream::write_embeddings_csv(create(out)?, &samples, &z)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TaskRunConfig {
    encoder: downstream::EncoderConfig,
    decoder: downstream::DecoderConfig,
    train: TaskTrainConfig,
    data: String,
    checkpoint: Option<String>,
}

pub fn train_task(
    cfg: &RunConfig,
    task: u8,
    data: Option<&Path>,
    sidecar: Option<&Path>,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let ds = &cfg.downstream;
    let frozen = match (ds.encoder.d_d, ckpt) {
        (0, _) => None,
        (_, Some(path)) => Some(load_encoder(path)?),
        (d, None) => return Err(DownstreamError::MissingCheckpoint(d).into()),
    };
    let run_config = |train: TaskTrainConfig, data: String| TaskRunConfig {
        encoder: ds.encoder,
        decoder: ds.decoder,
        train,
        data,
        checkpoint: ckpt.map(|p| p.display().to_string()),
    };
    let json = if task == 1 {
        let train = ds.task1.task(TaskTrainConfig::task1(), cfg.seed);
        let (labels, graphs): (LabelFile, Vec<CircuitGraph>) = match data {
            Some(path) => corpus::load_labeled(path)?,
            None => (bundled_labels(), bundled_graphs()),
        };
        let data_name = data.map_or("bundled".to_string(), |p| p.display().to_string());
        let (_, metrics) = downstream::train_task1(&Task1Data { labels, graphs }, ds.encoder, ds.decoder, frozen, &train)?;
        eprintln!("test accuracy {:.4} over {} triplets", metrics.test_accuracy, metrics.test_triplets);
        RunMetrics::<_, Task1Metrics> { task: "task1".into(), config: run_config(train, data_name), seed: cfg.seed, metrics }
            .to_json()
    } else {
        let (defaults, section, width) = if task == 2 {
            (TaskTrainConfig::task2(), ds.task2, 2)
        } else {
            (TaskTrainConfig::task3(), ds.task3, 5)
        };
        let train = section.task(defaults, cfg.seed);
        let csv = data.ok_or_else(|| CliError::Input(format!("task {task} needs --data <csv>")))?;
        let sidecar = sidecar.map(Path::to_path_buf).unwrap_or_else(|| csv.with_file_name("sidecar.json"));
        let dataset = downstream::read_regression_csv(csv, &sidecar)?;
        if dataset.out_dim() != width {
            return Err(CliError::Input(format!("task {task} expects {width} targets, found {}", dataset.out_dim())));
        }
        let (_, _, metrics) = downstream::train_regression(&dataset, ds.encoder, ds.decoder, frozen, &train)?;
        for (name, r2) in dataset.target_names.iter().zip(&metrics.test_r2) {
            eprintln!("{name}: test R2 {r2:.4}");
        }
        RunMetrics::<_, RegressionMetrics> {
            task: format!("task{task}"),
            config: run_config(train, csv.display().to_string()),
            seed: cfg.seed,
            metrics,
        }
        .to_json()
    };
    write_text(out, &json)
}

pub fn surrogate(rows: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let data = downstream::rc_surrogate(rows, seed);
    downstream::write_regression_csv(out, &data)?;
    Ok(())
}
