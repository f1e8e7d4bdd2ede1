//! SGD training, evaluation and the architecture comparison harness.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, Label, NormStats, Plane, SplitResult, SubjectRecord};
use crate::error::{Error, Result};
use crate::graph::{Features, Gradients, ModelGraph};
use crate::kernels::argmax;
use crate::layers::{self, Mode};
use crate::rng;
use crate::tensor::{Shape2D, Tensor};
use crate::zoo::{self, ArchitectureId, ZooConfig};

/// Freeze-boundary value resolved to the architecture's backbone end.
pub const BACKBONE: &str = "backbone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub shuffle: u64,
    pub init: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            split: 42,
            shuffle: 42,
            init: 42,
            dropout: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Node id to freeze through, [`BACKBONE`], or `None` to train everything.
    pub freeze_boundary: Option<String>,
    pub seeds: Seeds,
    /// Compute frozen-prefix activations once per sample instead of every
    /// epoch. Results are identical either way.
    pub cache_frozen_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 16,
            freeze_boundary: Some(String::from(BACKBONE)),
            seeds: Seeds::default(),
            cache_frozen_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be a positive number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// The freeze boundary with [`BACKBONE`] replaced by `arch`'s backbone end.
    pub fn resolved_boundary(&self, arch: ArchitectureId) -> Option<String> {
        self.freeze_boundary.as_deref().map(|b| {
            if b == BACKBONE {
                String::from(arch.backbone_end())
            } else {
                String::from(b)
            }
        })
    }
}

/// `v ← μ·v − lr·(g + wd·w); w ← w + v`.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *w);
        *w += *v;
    }
}

/// Momentum buffers keyed by node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Velocity {
    buffers: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One optimizer step over the trainable nodes present in `grads`.
pub fn sgd_momentum_step(
    g: &mut ModelGraph,
    grads: &Gradients,
    velocity: &mut Velocity,
    cfg: &TrainConfig,
) -> Result<()> {
    for (id, pg) in &grads.params {
        let trainable = g.node(id).is_some_and(|n| n.trainable);
        if !trainable {
            continue;
        }
        let p = g.params_mut(id).ok_or_else(|| Error::UnknownNode(id.clone()))?;
        if p.weights.shape() != pg.weights.shape() || p.bias.len() != pg.bias.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_momentum_step",
                left: p.weights.shape().to_vec(),
                right: pg.weights.shape().to_vec(),
            });
        }
        let (vw, vb) = velocity
            .buffers
            .entry(id.clone())
            .or_insert_with(|| (vec![0.0; pg.weights.len()], vec![0.0; pg.bias.len()]));
        sgd_update(
            p.weights.data_mut(),
            pg.weights.data(),
            vw,
            cfg.learning_rate,
            cfg.momentum,
            cfg.weight_decay,
        );
        sgd_update(
            &mut p.bias,
            &pg.bias,
            vb,
            cfg.learning_rate,
            cfg.momentum,
            cfg.weight_decay,
        );
    }
    Ok(())
}

/// One network-ready slice: input is 1×3×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub label: Label,
    pub plane: Plane,
    pub input: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Seconds source for history timing; [`no_clock`] makes histories
/// reproducible byte for byte.
pub type Clock<'a> = &'a mut dyn FnMut() -> f64;

pub fn no_clock() -> impl FnMut() -> f64 {
    || 0.0
}

enum Inputs {
    Raw,
    Cached(Vec<Features>),
}

/// Mini-batch SGD for `cfg.epochs` epochs. The freeze boundary, if any, must
/// already be a node id (see [`TrainConfig::resolved_boundary`]).
pub fn train(g: &mut ModelGraph, samples: &[Sample], cfg: &TrainConfig, clock: Clock<'_>) -> Result<TrainHistory> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if let Some(boundary) = &cfg.freeze_boundary {
        if boundary == BACKBONE {
            return Err(Error::InvalidConfig(
                "freeze boundary `backbone` must be resolved to a node id".into(),
            ));
        }
        g.freeze_through(boundary)?;
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    for &l in &labels {
        if l >= g.class_count() {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: g.class_count(),
            });
        }
    }
    let inputs = if cfg.cache_frozen_features && g.features_cover_input() {
        Inputs::Cached(
            samples
                .iter()
                .map(|s| g.static_features(&s.input))
                .collect::<Result<_>>()?,
        )
    } else {
        Inputs::Raw
    };
    let mut velocity = Velocity::default();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let start = clock();
        let order = data::batch_indices(
            samples.len(),
            cfg.batch_size,
            rng::derive_seed(cfg.seeds.shuffle, epoch as u64),
        )?;
        let epoch_seed = rng::derive_seed(cfg.seeds.dropout, epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, idx) in order.iter().enumerate() {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let dropout_seed = rng::derive_seed(epoch_seed, bi as u64);
            let (logits, cache) = match &inputs {
                Inputs::Raw => {
                    let parts: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].input).collect();
                    let (y, c) = g.forward(&Tensor::stack(&parts)?, Mode::Train, dropout_seed)?;
                    (y, c.expect("train mode keeps a cache"))
                }
                Inputs::Cached(features) => {
                    let parts: Vec<&Features> = idx.iter().map(|&i| &features[i]).collect();
                    g.forward_train_features(&Features::stack(&parts)?, dropout_seed)?
                }
            };
            let (loss, probs) = layers::softmax_cross_entropy(&logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss });
            }
            loss_sum += loss * idx.len() as f64;
            let (_, k) = probs.batch_view();
            for (row, &label) in probs.data().chunks_exact(k).zip(&batch_labels) {
                if argmax(row)? == label {
                    correct += 1;
                }
            }
            if g.trainable_ids().is_empty() {
                continue;
            }
            let d_logits = layers::softmax_cross_entropy_backward(&probs, &batch_labels)?;
            let grads = g.backward(&cache, &d_logits, false)?;
            sgd_momentum_step(g, &grads, &mut velocity, cfg)?;
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
            seconds: clock() - start,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePrediction {
    pub plane: Plane,
    pub predicted: Label,
    /// Softmax probability of the predicted class.
    pub probability: f64,
    /// Softmax probability of mci.
    pub mci_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub truth: Label,
    pub predicted: Label,
    /// Mean mci probability over the subject's slices.
    pub mci_probability: f64,
    pub slices: Vec<SlicePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slice_accuracy: f64,
    pub subject_accuracy: f64,
    /// Rows are the true class, columns the predicted one; order normal, mci.
    pub confusion_matrix: [[usize; 2]; 2],
    pub slice_count: usize,
    pub subject_count: usize,
    pub subjects: Vec<SubjectPrediction>,
}

/// Decision for one logits row: argmax class (lowest index on ties) and the
/// softmax probabilities.
fn decide(logits_row: &[f64]) -> Result<(Label, f64, f64)> {
    let row = Tensor::new(vec![1, logits_row.len()], logits_row.to_vec())?;
    let probs = layers::softmax(&row)?;
    let i = argmax(probs.data())?;
    let mci = probs.data().get(Label::Mci.index()).copied().unwrap_or(0.0);
    Ok((Label::from_index(i)?, probs.data()[i], mci))
}

/// Single-slice prediction: class and its probability. `input` is 1×3×H×W
/// and already normalized.
pub fn predict(g: &ModelGraph, input: &Tensor) -> Result<(Label, f64)> {
    let logits = g.forward_eval(input)?;
    let (label, p, _) = decide(logits.data())?;
    Ok((label, p))
}

/// Eval-mode pass over `samples`; subject decisions by majority vote over
/// planes (ties to mci). The confusion matrix counts subjects.
pub fn evaluate(g: &ModelGraph, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut slices: Vec<SlicePrediction> = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = g.forward_eval(&s.input)?;
        let (predicted, probability, mci_probability) = decide(logits.data())?;
        slices.push(SlicePrediction {
            plane: s.plane,
            predicted,
            probability,
            mci_probability,
        });
    }
    let slice_correct = samples
        .iter()
        .zip(&slices)
        .filter(|(s, p)| s.label == p.predicted)
        .count();
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: BTreeMap<&str, (Label, Vec<SlicePrediction>)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(slices) {
        let entry = grouped.entry(&s.subject_id).or_insert_with(|| {
            order.push(&s.subject_id);
            (s.label, Vec::new())
        });
        entry.1.push(p);
    }
    let mut matrix = [[0usize; 2]; 2];
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let (truth, preds) = grouped.remove(id).expect("grouped above");
        let votes: Vec<Label> = preds.iter().map(|p| p.predicted).collect();
        let predicted = data::majority_vote(&votes);
        matrix[truth.index()][predicted.index()] += 1;
        subjects.push(SubjectPrediction {
            subject_id: String::from(id),
            truth,
            predicted,
            mci_probability: preds.iter().map(|p| p.mci_probability).sum::<f64>() / preds.len() as f64,
            slices: preds,
        });
    }
    let total = subjects.len();
    Ok(EvalReport {
        slice_accuracy: slice_correct as f64 / samples.len() as f64,
        subject_accuracy: (matrix[0][0] + matrix[1][1]) as f64 / total as f64,
        confusion_matrix: matrix,
        slice_count: samples.len(),
        subject_count: total,
        subjects,
    })
}

/// Normalized train and test samples for one input size.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub stats: NormStats,
    pub split_fingerprint: u64,
}

impl PreparedData {
    /// Loads every record through `load` (1×C×H×W in [0, 1]), resizes to
    /// `size`, and standardizes both sides with statistics of the train side
    /// only.
    pub fn from_split(
        split: &SplitResult,
        size: usize,
        load: &mut dyn FnMut(&SubjectRecord) -> Result<Tensor>,
    ) -> Result<Self> {
        let shape = Shape2D::square(size)?;
        let mut prepare = |m: &DatasetManifest| -> Result<Vec<(SubjectRecord, Tensor)>> {
            m.records()
                .iter()
                .map(|r| Ok((r.clone(), data::prepare_image(&load(r)?, shape)?)))
                .collect()
        };
        let train_raw = prepare(&split.train)?;
        if train_raw.is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
        let images: Vec<Tensor> = train_raw.iter().map(|(_, t)| t.clone()).collect();
        let stats = NormStats::from_images(&images)?;
        drop(images);
        let finish = |raw: Vec<(SubjectRecord, Tensor)>, stats: &NormStats| -> Result<Vec<Sample>> {
            raw.into_iter()
                .map(|(r, t)| {
                    let x = data::normalize(&t, stats)?;
                    let dims = x.shape().to_vec();
                    Ok(Sample {
                        subject_id: r.subject_id,
                        label: r.label,
                        plane: r.plane,
                        input: x.reshape(&[1, dims[0], dims[1], dims[2]])?,
                    })
                })
                .collect()
        };
        let train = finish(train_raw, &stats)?;
        let test = finish(prepare(&split.test)?, &stats)?;
        Ok(PreparedData {
            train,
            test,
            stats,
            split_fingerprint: split.fingerprint(),
        })
    }
}

/// How the comparison builds each network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareOptions {
    /// Square input extent for every architecture; `None` means native.
    pub input_size: Option<usize>,
    pub width_divisor: usize,
    /// Head size of the source network before transfer.
    pub source_classes: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            input_size: None,
            width_divisor: 1,
            source_classes: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub architecture: ArchitectureId,
    pub subject_accuracy: f64,
    pub slice_accuracy: f64,
    pub params: usize,
    pub trainable_params: usize,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Sorted by subject accuracy, highest first.
    pub rows: Vec<ComparisonRow>,
    pub split_fingerprint: u64,
    pub config_fingerprint: u64,
}

/// Outcome of one architecture's build → transfer → train → evaluate run.
#[derive(Debug, Clone)]
pub struct TransferRun {
    pub row: ComparisonRow,
    pub graph: ModelGraph,
    pub history: TrainHistory,
    pub eval: EvalReport,
}

/// Builds `arch` with a `source_classes` head, optionally loads pretrained
/// tensors, swaps in a 2-class head, freezes per `cfg`, trains, evaluates.
pub fn transfer_run(
    arch: ArchitectureId,
    data: &PreparedData,
    opts: &CompareOptions,
    cfg: &TrainConfig,
    pretrained: Option<&BTreeMap<String, Tensor>>,
    clock: Clock<'_>,
) -> Result<TransferRun> {
    let zoo_cfg = ZooConfig {
        class_count: opts.source_classes,
        input_size: opts.input_size,
        width_divisor: opts.width_divisor,
        seed: cfg.seeds.init,
    };
    let mut g = zoo::build(arch, &zoo_cfg)?;
    if let Some(tensors) = pretrained {
        g.load_tensors(tensors)?;
    }
    g.replace_head(Label::ALL.len(), rng::derive_seed(cfg.seeds.init, 0x4ead))?;
    let mut run_cfg = cfg.clone();
    run_cfg.freeze_boundary = cfg.resolved_boundary(arch);
    let history = train(&mut g, &data.train, &run_cfg, clock)?;
    let eval = evaluate(&g, &data.test)?;
    let census = g.census();
    Ok(TransferRun {
        row: ComparisonRow {
            architecture: arch,
            subject_accuracy: eval.subject_accuracy,
            slice_accuracy: eval.slice_accuracy,
            params: census.total_params,
            trainable_params: census.trainable_params,
            train_seconds: history.total_seconds(),
        },
        graph: g,
        history,
        eval,
    })
}

/// Runs [`transfer_run`] for every architecture on the same prepared split.
/// `load` supplies data for a given input size; it is called once per
/// distinct size.
pub fn compare(
    archs: &[ArchitectureId],
    opts: &CompareOptions,
    cfg: &TrainConfig,
    pretrained: &BTreeMap<ArchitectureId, BTreeMap<String, Tensor>>,
    load: &mut dyn FnMut(usize) -> Result<PreparedData>,
    clock: Clock<'_>,
) -> Result<(ComparisonReport, Vec<TransferRun>)> {
    if archs.is_empty() {
        return Err(Error::EmptyInput("architecture list"));
    }
    let mut prepared: BTreeMap<usize, PreparedData> = BTreeMap::new();
    let mut runs = Vec::with_capacity(archs.len());
    let mut split_fingerprint = None;
    for &arch in archs {
        let size = opts.input_size.unwrap_or(arch.native_input());
        if let alloc::collections::btree_map::Entry::Vacant(e) = prepared.entry(size) {
            e.insert(load(size)?);
        }
        let data = &prepared[&size];
        match split_fingerprint {
            None => split_fingerprint = Some(data.split_fingerprint),
            Some(f) if f != data.split_fingerprint => {
                return Err(Error::Dataset("architectures were given different splits".into()));
            }
            Some(_) => {}
        }
        runs.push(transfer_run(arch, data, opts, cfg, pretrained.get(&arch), &mut *clock)?);
    }
    let mut rows: Vec<ComparisonRow> = runs.iter().map(|r| r.row.clone()).collect();
    rows.sort_by(|a, b| b.subject_accuracy.total_cmp(&a.subject_accuracy));
    Ok((
        ComparisonReport {
            rows,
            split_fingerprint: split_fingerprint.expect("at least one architecture"),
            config_fingerprint: config_fingerprint(cfg, opts),
        },
        runs,
    ))
}

/// Hash of the training and build configuration.
pub fn config_fingerprint(cfg: &TrainConfig, opts: &CompareOptions) -> u64 {
    rng::fnv1a(format!("{cfg:?}|{opts:?}").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthParams;
    use crate::graph::{GraphBuilder, LayerSpec};

    #[test]
    fn sgd_hand_trace() {
        // loss ½w², gradient w
        let (mut w, mut v) = ([1.0], [0.0]);
        let mut trace = Vec::new();
        for _ in 0..3 {
            let g = [w[0]];
            sgd_update(&mut w, &g, &mut v, 0.1, 0.9, 0.0);
            trace.push(w[0]);
        }
        // v1 = −0.1, w1 = 0.9; v2 = −0.09 − 0.09 = −0.18, w2 = 0.72;
        // v3 = −0.162 − 0.072 = −0.234, w3 = 0.486
        let expected = [0.9, 0.72, 0.486];
        for (a, b) in trace.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{trace:?}");
        }
        let (mut w, mut v) = ([2.0, -1.0], [0.0, 0.0]);
        sgd_update(&mut w, &[0.0, 0.0], &mut v, 0.5, 0.9, 0.0);
        assert_eq!(w, [2.0, -1.0]);
        sgd_update(&mut w, &[1.0, 2.0], &mut v, 0.5, 0.0, 0.0);
        assert_eq!(w, [1.5, -2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for f in [
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.momentum = 1.0,
            |c: &mut TrainConfig| c.weight_decay = -1.0,
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.batch_size = 0,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
        assert_eq!(
            TrainConfig::default()
                .resolved_boundary(ArchitectureId::Resnet18)
                .as_deref(),
            Some("gap")
        );
    }

    fn tiny_net(seed: u64) -> ModelGraph {
        let mut b = GraphBuilder::new([3, 12, 12], 2);
        b.conv("conv1", "", 4, 3, 1, 1);
        b.relu("relu1", "conv1");
        b.maxpool("pool1", "relu1", 2, 2, 0);
        b.fc("fc1", "pool1", 8);
        b.relu("relu2", "fc1");
        b.add("drop", LayerSpec::Dropout { rate: 0.2 }, &["relu2"]);
        b.fc("fc2", "drop", 2);
        b.add("output", LayerSpec::SoftmaxOutput, &["fc2"]);
        b.build(seed).unwrap()
    }

    fn synth_samples(n_per_class: usize, size: usize) -> Vec<Sample> {
        let p = SynthParams {
            size: 24,
            ..SynthParams::default()
        };
        let shape = Shape2D::square(size).unwrap();
        data::synth_manifest(n_per_class)
            .records()
            .iter()
            .map(|r| {
                let bytes = data::synth_slice(&r.subject_id, r.label, r.plane, 3, &p);
                let img = data::gray_to_tensor(&bytes, 24, 24).unwrap();
                let x = data::prepare_image(&img, shape).unwrap().map(|v| v - 0.5);
                Sample {
                    subject_id: r.subject_id.clone(),
                    label: r.label,
                    plane: r.plane,
                    input: x.reshape(&[1, 3, size, size]).unwrap(),
                }
            })
            .collect()
    }

    fn short_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            freeze_boundary: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let samples = synth_samples(3, 12);
        let run = || {
            let mut g = tiny_net(1);
            let h = train(&mut g, &samples, &short_cfg(), &mut no_clock()).unwrap();
            (g, h)
        };
        let (g1, h1) = run();
        let (g2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(g1, g2);
        assert_eq!(h1.epochs.len(), 3);
        assert_ne!(g1, tiny_net(1));
    }

    #[test]
    fn frozen_graph_is_untouched_and_cache_is_transparent() {
        let samples = synth_samples(3, 12);
        let mut g = tiny_net(2);
        let before = g.clone();
        let cfg = TrainConfig {
            freeze_boundary: Some("output".into()),
            ..short_cfg()
        };
        train(&mut g, &samples, &cfg, &mut no_clock()).unwrap();
        for n in before.nodes() {
            assert_eq!(g.node(&n.id).unwrap().params, n.params);
        }

        let cfg = TrainConfig {
            freeze_boundary: Some("pool1".into()),
            ..short_cfg()
        };
        let mut cached = tiny_net(2);
        let mut raw = tiny_net(2);
        let h1 = train(&mut cached, &samples, &cfg, &mut no_clock()).unwrap();
        let h2 = train(
            &mut raw,
            &samples,
            &TrainConfig {
                cache_frozen_features: false,
                ..cfg
            },
            &mut no_clock(),
        )
        .unwrap();
        assert_eq!(h1, h2);
        assert_eq!(cached, raw);
        assert_eq!(cached.params("conv1"), before.params("conv1"));
        assert_ne!(cached.params("fc1"), before.params("fc1"));
    }

    #[test]
    fn training_errors() {
        let mut g = tiny_net(0);
        assert!(matches!(
            train(&mut g, &[], &short_cfg(), &mut no_clock()),
            Err(Error::EmptyInput(_))
        ));
        let samples = synth_samples(1, 12);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            momentum: 0.0,
            ..short_cfg()
        };
        let err = train(&mut g, &samples, &cfg, &mut no_clock()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err:?}");
        let cfg = TrainConfig {
            freeze_boundary: Some(BACKBONE.into()),
            ..short_cfg()
        };
        assert!(train(&mut tiny_net(0), &samples, &cfg, &mut no_clock()).is_err());
    }

    #[test]
    fn evaluation_counts_and_predict_agree() {
        let samples = synth_samples(4, 12);
        let g = tiny_net(5);
        let r = evaluate(&g, &samples).unwrap();
        let total: usize = r.confusion_matrix.iter().flatten().sum();
        assert_eq!(total, 8);
        assert_eq!(r.subject_count, 8);
        assert_eq!(r.slice_count, 24);
        assert_eq!(
            r.subject_accuracy,
            (r.confusion_matrix[0][0] + r.confusion_matrix[1][1]) as f64 / 8.0
        );
        for (s, subject) in samples.chunks(3).zip(&r.subjects) {
            for (sample, slice) in s.iter().zip(&subject.slices) {
                let (label, p) = predict(&g, &sample.input).unwrap();
                assert_eq!(label, slice.predicted);
                assert_eq!(p.to_bits(), slice.probability.to_bits());
                assert!(p > 0.0 && (0.5..1.0).contains(&p));
            }
        }
        assert!(evaluate(&g, &[]).is_err());
    }

    #[test]
    fn constant_predictor_scores_half() {
        // all-zero head weights and bias: equal logits, argmax picks normal
        let mut g = tiny_net(1);
        let p = g.params_mut("fc2").unwrap();
        p.weights = Tensor::zeros(p.weights.shape());
        let samples = synth_samples(3, 12);
        let r = evaluate(&g, &samples).unwrap();
        assert_eq!(r.subject_accuracy, 0.5);
        assert_eq!(r.confusion_matrix, [[3, 0], [3, 0]]);
        assert_eq!(predict(&g, &samples[0].input).unwrap(), (Label::Normal, 0.5));
    }

    #[test]
    fn single_architecture_compare_matches_standalone_run() {
        let split = data::subject_split(&data::synth_manifest(4), 0.5, 1).unwrap();
        let p = SynthParams {
            size: 64,
            ..SynthParams::default()
        };
        let mut load = |size: usize| {
            PreparedData::from_split(&split, size, &mut |r: &SubjectRecord| {
                data::gray_to_tensor(&data::synth_slice(&r.subject_id, r.label, r.plane, 0, &p), 64, 64)
            })
        };
        let opts = CompareOptions {
            input_size: Some(64),
            width_divisor: 16,
            source_classes: 10,
        };
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (report, runs) = compare(
            &[ArchitectureId::Alexnet],
            &opts,
            &cfg,
            &BTreeMap::new(),
            &mut load,
            &mut no_clock(),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 1);
        let data = load(64).unwrap();
        let alone = transfer_run(ArchitectureId::Alexnet, &data, &opts, &cfg, None, &mut no_clock()).unwrap();
        assert_eq!(report.rows[0], alone.row);
        assert_eq!(runs[0].history, alone.history);
        assert_eq!(alone.graph.trainable_ids(), ["fc6", "fc7", "fc8"]);
        assert_eq!(report.split_fingerprint, split.fingerprint());
    }
}
