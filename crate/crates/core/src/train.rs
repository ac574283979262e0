//! Training loop, evaluation and metric logging.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ForwardCtx;
use crate::checkpoint;
use crate::data::{corrupt_labels, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{build_pair_set, total_loss, LossWeights, Pair, PairSet, Strategy};
use crate::model::MultiHeadModel;
use crate::optim::{lr_at, DecayEpochs, Sgd, SgdConfig};
use crate::params::HeadId;
use crate::tensor::{Scalar, Tensor};

pub const METRICS_VERSION: &str = "dks-metrics v1";
pub const METRICS_HEADER: &str =
    "epoch,lr,loss_total,loss_c,loss_a,loss_s,train_error,test_error,head_test_errors";

/// Which of the compared objectives to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `C1` only.
    Baseline,
    /// Hard-label losses on every head.
    Ds,
    /// Hard-label losses plus knowledge matching.
    Dks,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Baseline => "baseline",
            Scheme::Ds => "ds",
            Scheme::Dks => "dks",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub scheme: Scheme,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    /// Explicit pairs, only with the `custom` strategy.
    pub pairs: Option<Vec<Pair>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Dks,
            strategy: Strategy::BiDirectional,
            alpha: 1.0,
            beta: 1.0,
            pairs: None,
        }
    }
}

/// Loss terms resolved against a model's heads.
#[derive(Debug, Clone)]
pub struct ResolvedLoss {
    /// Number of leading heads (`C1, C2, …`) that enter the loss.
    pub active_heads: usize,
    pub weights: LossWeights,
    pub pairs: PairSet,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::uniform(self.alpha, self.beta).validate()?;
        let has_pairs = self.pairs.as_ref().is_some_and(|p| !p.is_empty());
        match self.scheme {
            Scheme::Baseline | Scheme::Ds if has_pairs => Err(Error::config(format!(
                "loss.pairs: scheme {} trains without matching pairs",
                self.scheme
            ))),
            Scheme::Dks if self.strategy == Strategy::Custom && self.pairs.is_none() => Err(
                Error::config("loss.pairs: the custom strategy needs an explicit pair list"),
            ),
            Scheme::Dks if self.strategy != Strategy::Custom && self.pairs.is_some() => Err(
                Error::config("loss.pairs: explicit pairs require strategy \"custom\""),
            ),
            _ => Ok(()),
        }
    }

    pub fn resolve(&self, heads: &[HeadId]) -> Result<ResolvedLoss> {
        self.validate()?;
        let weights = LossWeights::uniform(self.alpha, self.beta);
        let (active_heads, pairs) = match self.scheme {
            Scheme::Baseline => (1, PairSet::empty()),
            Scheme::Ds => (heads.len(), PairSet::empty()),
            Scheme::Dks => {
                let pairs = match &self.pairs {
                    Some(p) => PairSet::custom(p.clone())?,
                    None => build_pair_set(heads, self.strategy)?,
                };
                (heads.len(), pairs)
            }
        };
        Ok(ResolvedLoss {
            active_heads,
            weights,
            pairs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: DecayEpochs,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub noise_ratio: f64,
    /// Pad-and-crop plus horizontal flip on training batches.
    pub augment: bool,
    /// Also checkpoint every `k` epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr0: 0.1,
            lr_decay_factor: 10.0,
            lr_decay_epochs: DecayEpochs::Milestones(vec![15, 25]),
            momentum: 0.9,
            nesterov: false,
            weight_decay: 1e-4,
            seed: 0,
            loss: LossConfig::default(),
            noise_ratio: 0.0,
            augment: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("{field}: {msg}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("{} must be positive", self.lr0));
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                format!(
                    "{} is too small; batch normalization needs at least 2",
                    self.batch_size
                ),
            );
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(
                "lr_decay_factor",
                format!("{} must be positive", self.lr_decay_factor),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("{} must be non-negative", self.weight_decay),
            );
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return bad(
                "noise_ratio",
                format!("{} must lie in [0, 1]", self.noise_ratio),
            );
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every", "must be positive".into());
        }
        self.lr_decay_epochs
            .validate()
            .map_err(|e| Error::config(format!("lr_decay_epochs: {e}")))?;
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr0, self.lr_decay_factor, &self.lr_decay_epochs)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
        }
    }
}

/// One epoch of metrics. Errors are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_c: f64,
    pub loss_a: f64,
    pub loss_s: f64,
    /// `C1` error on the (possibly corrupted) training labels, measured
    /// on the fly during the epoch.
    pub train_error: f64,
    pub test_error: f64,
    pub head_test_errors: Vec<(HeadId, f64)>,
    pub wall_secs: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let heads: Vec<String> = self
            .head_test_errors
            .iter()
            .map(|(h, e)| format!("{h}:{e}"))
            .collect();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_total,
            self.loss_c,
            self.loss_a,
            self.loss_s,
            self.train_error,
            self.test_error,
            heads.join(";")
        )
    }
}

/// Where training artifacts go. Metrics are appended as epochs finish.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }

    fn create(&self) -> Result<(File, File)> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let open = |p: PathBuf, header: &str| -> Result<File> {
            let mut f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            f.write_all(header.as_bytes())
                .map_err(|e| Error::io(&p, e))?;
            Ok(f)
        };
        let m = open(
            self.metrics_path(),
            &format!("# {METRICS_VERSION}\n{METRICS_HEADER}\n"),
        )?;
        let t = open(self.timing_path(), "epoch,wall_secs\n")?;
        Ok((m, t))
    }
}

fn append(path: &Path, line: String) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    /// Indices whose training label was corrupted.
    pub corrupted: Vec<usize>,
}

/// Splits a permutation into batches of `size`; a trailing single sample
/// joins the previous batch so every batch has at least two samples.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows of an `N x K` logit tensor whose argmax differs from the label.
pub fn count_wrong<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count()
}

/// Top-1 error in percent of an `N x K` logit tensor.
pub fn top1_error<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    100.0 * count_wrong(logits, labels) as f64 / labels.len().max(1) as f64
}

/// Eval-mode top-1 error of every head, `C1` first, in percent.
pub fn evaluate<T: Scalar>(
    model: &MultiHeadModel<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<(HeadId, f64)>> {
    let ids = model.head_ids();
    let mut wrong = vec![0usize; ids.len()];
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk, None)?;
        let out = model.predict(&x)?;
        for (w, logits) in wrong.iter_mut().zip(&out) {
            *w += count_wrong(logits, &labels);
        }
    }
    let n = data.len().max(1) as f64;
    Ok(ids
        .into_iter()
        .zip(wrong)
        .map(|(id, w)| (id, 100.0 * w as f64 / n))
        .collect())
}

/// Trains `model` in place. With `run`, writes `metrics.csv`, `timing.csv`
/// and checkpoints (`final.ckpt`, plus `epoch<k>.ckpt` at the configured
/// cadence) into its directory.
pub fn train<T: Scalar>(
    model: &mut MultiHeadModel<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::data("training needs at least two samples"));
    }
    if train_set.num_classes != model.spec().num_classes
        || train_set.shape != model.spec().input_shape
        || test_set.shape != model.spec().input_shape
    {
        return Err(Error::config(format!(
            "dataset ({} classes, {:?}) does not fit the model ({} classes, {:?})",
            train_set.num_classes,
            train_set.shape,
            model.spec().num_classes,
            model.spec().input_shape
        )));
    }
    let loss = cfg.loss.resolve(&model.head_ids())?;

    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let mut shuffle_rng = stream(1);
    let mut dropout_rng = stream(2);
    let mut augment_rng = stream(3);
    let (noisy, corrupted) = corrupt_labels(train_set, cfg.noise_ratio, cfg.seed ^ 0x9e37_79b9)?;

    if let Some(r) = run {
        r.create()?;
    }
    let mut opt = Sgd::<T>::new(cfg.sgd());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..noisy.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let (mut sums, mut seen, mut wrong) = ([0.0f64; 4], 0usize, 0usize);
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let aug = cfg.augment.then_some(&mut augment_rng);
            let (x, labels) = noisy.batch::<T>(idx, aug)?;
            let mut g = Graph::new();
            let xv = g.input(x, false);
            let mut ctx = ForwardCtx::train(model.spec().dropout, Some(&mut dropout_rng));
            let logits = model.forward_all(&mut g, xv, &mut ctx)?;
            let (l, rep) = total_loss(
                &mut g,
                &labels,
                &logits[..loss.active_heads],
                &loss.weights,
                &loss.pairs,
            )?;
            if !rep.total.is_finite() {
                return Err(Error::TrainingAborted {
                    epoch: epoch + 1,
                    batch: b,
                    reason: format!("loss is {}", rep.total),
                });
            }
            let grads = g.backward(l)?;
            if !grads.all_finite() {
                return Err(Error::TrainingAborted {
                    epoch: epoch + 1,
                    batch: b,
                    reason: "non-finite gradient".into(),
                });
            }
            let store = model.params_mut();
            store.zero_grads();
            grads.accumulate_into(store);
            ctx.apply_stat_updates(store);
            opt.step(store, lr);

            let n = labels.len();
            for (s, v) in sums.iter_mut().zip([rep.total, rep.l_c, rep.l_a, rep.l_s]) {
                *s += v * n as f64;
            }
            seen += n;
            wrong += count_wrong(g.value(logits[0]), &labels);
        }

        let heads = evaluate(model, test_set, cfg.batch_size.max(64))?;
        let wall = start.elapsed().as_secs_f64();
        let row = MetricsRow {
            epoch: epoch + 1,
            lr,
            loss_total: sums[0] / seen as f64,
            loss_c: sums[1] / seen as f64,
            loss_a: sums[2] / seen as f64,
            loss_s: sums[3] / seen as f64,
            train_error: 100.0 * wrong as f64 / seen as f64,
            test_error: heads[0].1,
            head_test_errors: heads,
            wall_secs: wall,
        };
        if let Some(r) = run {
            append(&r.metrics_path(), row.csv_line() + "\n")?;
            append(&r.timing_path(), format!("{},{}\n", row.epoch, wall))?;
            if cfg.checkpoint_every.is_some_and(|k| (epoch + 1) % k == 0) && epoch + 1 != cfg.epochs
            {
                let p = r.dir.join(format!("epoch{}.ckpt", epoch + 1));
                checkpoint::save(model, &p)?;
                checkpoints.push(p);
            }
        }
        metrics.push(row);
    }

    if let Some(r) = run {
        let p = r.dir.join("final.ckpt");
        checkpoint::save(model, &p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        metrics,
        checkpoints,
        corrupted,
    })
}
