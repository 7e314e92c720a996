//! Pair sampling, SGD with momentum and weight decay, the step learning-rate
//! schedule, He initialisation and the training loop.

use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::data::manifest::{Role, Split};
use crate::error::{Error, Result};
use crate::pyramid::PyramidFeatures;
use crate::reasoning::GrNet;
use crate::retrieval::{evaluate_protocol, score_all, Protocol, Scorer};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;

/// One labelled query/gallery pair; ids index the dataset's items.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub query: usize,
    pub gallery: usize,
    /// 1 when both items share an identity.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub identities: usize,
    /// Must be 2: one query and one gallery image.
    pub images_per_identity: usize,
    /// Negatives per positive.
    pub negative_ratio: usize,
    /// Emit every cross-identity negative instead of `negative_ratio` of them.
    pub full_cross: bool,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            identities: 32,
            images_per_identity: 2,
            negative_ratio: 1,
            full_cross: false,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 {
            return Err(Error::Config("batch needs at least one identity".into()));
        }
        if self.images_per_identity != 2 {
            return Err(Error::Config(format!(
                "images_per_identity must be 2 (one query, one gallery), got {}",
                self.images_per_identity
            )));
        }
        let combos = self.identities * (self.identities - 1);
        if !self.full_cross && self.negative_ratio * self.identities > combos {
            return Err(Error::Config(format!(
                "{} negatives requested but only {combos} cross-identity combinations exist",
                self.negative_ratio * self.identities
            )));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.identities * self.images_per_identity
    }
}

/// Per-identity query and gallery item indices of one split.
#[derive(Clone, Debug)]
pub struct PairPool {
    groups: Vec<(Vec<usize>, Vec<usize>)>,
}

impl PairPool {
    /// Identities lacking either role are skipped.
    pub fn from_dataset<T: Scalar>(data: &Dataset<T>, split: Split) -> Self {
        let mut by_identity: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, r) in data.records().iter().enumerate() {
            if r.split != split {
                continue;
            }
            let e = by_identity.entry(r.identity.as_str()).or_default();
            match r.role {
                Role::Query => e.0.push(i),
                Role::Gallery => e.1.push(i),
            }
        }
        PairPool {
            groups: by_identity
                .into_values()
                .filter(|(q, g)| !q.is_empty() && !g.is_empty())
                .collect(),
        }
    }

    /// Pool from explicit `(queries, galleries)` groups, one per identity.
    pub fn from_groups(groups: Vec<(Vec<usize>, Vec<usize>)>) -> Self {
        PairPool {
            groups: groups
                .into_iter()
                .filter(|(q, g)| !q.is_empty() && !g.is_empty())
                .collect(),
        }
    }

    pub fn identities(&self) -> usize {
        self.groups.len()
    }
}

/// Draws identities without replacement, one positive per identity and
/// negatives crossing one drawn identity's query with another's gallery.
pub fn sample_batch<R: Rng + ?Sized>(
    pool: &PairPool,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<PairSample>> {
    spec.validate()?;
    let n = spec.identities;
    if pool.identities() < n {
        return Err(Error::Data(format!(
            "batch needs {n} identities with query and gallery images, only {} available (short by {})",
            pool.identities(),
            n - pool.identities()
        )));
    }
    let drawn = index::sample(rng, pool.identities(), n).into_vec();
    let picks: Vec<(usize, usize)> = drawn
        .iter()
        .map(|&g| {
            let (qs, gs) = &pool.groups[g];
            (*qs.choose(rng).expect("non-empty"), *gs.choose(rng).expect("non-empty"))
        })
        .collect();

    let mut out: Vec<PairSample> = picks
        .iter()
        .map(|&(q, g)| PairSample {
            query: q,
            gallery: g,
            label: 1,
        })
        .collect();
    let combos = n * (n - 1);
    let chosen: Vec<usize> = if spec.full_cross {
        (0..combos).collect()
    } else {
        let mut c = index::sample(rng, combos, spec.negative_ratio * n).into_vec();
        c.sort_unstable();
        c
    };
    for c in chosen {
        let a = c / (n - 1);
        let mut b = c % (n - 1);
        if b >= a {
            b += 1;
        }
        out.push(PairSample {
            query: picks[a].0,
            gallery: picks[b].1,
            label: 0,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate drops.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_every: 20,
            decay_factor: 10.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.decay_every > 0
            && self.decay_factor >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// `base · factor^(−floor(epoch / every))`.
pub fn lr_at(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    let drops = (epoch / cfg.decay_every) as i32;
    cfg.base_lr / cfg.decay_factor.powi(drops)
}

/// SGD with momentum; decay applies only to parameters flagged for it.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    buffers: Vec<Vec<T>>,
    steps: usize,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamSet<T>, cfg: &OptimizerConfig) -> Self {
        Sgd {
            momentum: T::lit(cfg.momentum),
            weight_decay: T::lit(cfg.weight_decay),
            buffers: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            steps: 0,
        }
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.buffers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Any non-finite gradient aborts the step with parameters untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: T) -> Result<()> {
        if self.buffers.len() != params.len() {
            return Err(Error::Logic("optimizer built for a different parameter set".into()));
        }
        for p in params.iter() {
            if let Some(k) = p.gradient.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    step: self.steps,
                    message: format!("gradient of `{}` is {} at {k}", p.identifier, p.gradient.data()[k]),
                });
            }
        }
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            let wd = if p.decay { self.weight_decay } else { T::zero() };
            let grad = p.gradient.data();
            for ((v, g), b) in p.value.data_mut().iter_mut().zip(grad).zip(buf.iter_mut()) {
                let g = *g + wd * *v;
                *b = self.momentum * *b + g;
                *v -= lr * *b;
            }
            p.zero_grad();
        }
        self.steps += 1;
        Ok(())
    }
}

/// Weights ~ N(0, 2/fan_in) with fan_in the column count; biases zero.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, rng: &mut R) {
    for p in params.iter_mut() {
        if p.decay {
            let fan_in = p.value.shape().last().copied().unwrap_or(1);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in p.value.data_mut() {
                *v = T::lit(normal.sample(rng));
            }
        } else {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        p.zero_grad();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// `None` means one pass over the training identities per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Evaluate on the validation split every this many epochs; 0 disables.
    pub validate_every: usize,
    pub ks: Vec<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 60,
            steps_per_epoch: None,
            validate_every: 1,
            ks: crate::retrieval::DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub lines: Vec<String>,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
}

impl TrainLog {
    fn push(&mut self, line: String, sink: &mut dyn FnMut(&str)) {
        sink(&line);
        self.lines.push(line);
    }
}

/// Mean loss of `batch`; gradients of the mean are accumulated into the
/// model's parameters.
pub fn batch_loss_and_grads<T: Scalar>(
    model: &mut GrNet<T>,
    pyramids: &[PyramidFeatures<T>],
    batch: &[PairSample],
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut total = T::zero();
    for s in batch {
        let (loss, _, g) = model.loss_and_grads(&pyramids[s.query], &pyramids[s.gallery], s.label)?;
        total += loss;
        g.accumulate_into(model.params_mut(), scale);
    }
    Ok(total * scale)
}

/// Mean loss of `batch` without touching gradients.
pub fn batch_loss<T: Scalar>(
    model: &GrNet<T>,
    pyramids: &[PyramidFeatures<T>],
    batch: &[PairSample],
) -> Result<T> {
    let mut total = T::zero();
    for s in batch {
        let r = model.score_features(&pyramids[s.query], &pyramids[s.gallery])?;
        total += crate::reasoning::loss(&r, s.label)?;
    }
    Ok(total / T::lit(batch.len() as f64))
}

/// Runs the configured epochs of sample → forward → mean loss → backward →
/// SGD step. Every log line is also passed to `sink`.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    model: &mut GrNet<T>,
    data: &Dataset<T>,
    batch: &BatchSpec,
    optimizer: &OptimizerConfig,
    schedule: &TrainSchedule,
    rng: &mut R,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainLog> {
    batch.validate()?;
    optimizer.validate()?;
    let pool = PairPool::from_dataset(data, Split::Train);
    let steps = schedule
        .steps_per_epoch
        .unwrap_or_else(|| (pool.identities() / batch.identities).max(1));
    let pyramids = data.pyramids(model.shape().pyramid.clone())?;
    let val_split = data.records().iter().any(|r| r.split == Split::Val);
    let mut sgd = Sgd::new(model.params(), optimizer);
    let mut log = TrainLog::default();
    model.params_mut().zero_grad();

    for epoch in 0..schedule.epochs {
        let lr = lr_at(epoch, optimizer);
        for _ in 0..steps {
            let step = sgd.steps();
            let pairs = sample_batch(&pool, batch, rng)?;
            let loss = batch_loss_and_grads(model, &pyramids, &pairs).map_err(|e| match e {
                Error::Numeric { message, .. } => Error::Numeric { step, message },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    step,
                    message: format!("batch loss is {loss}"),
                });
            }
            sgd.step(model.params_mut(), T::lit(lr))?;
            let loss = loss.to_f64_lossless();
            log.losses.push(loss);
            log.push(format!("step={step} epoch={epoch} lr={lr:?} loss={loss:?}"), sink);
        }
        if val_split && schedule.validate_every > 0 && (epoch + 1) % schedule.validate_every == 0 {
            let (queries, gallery, attrs) = data.retrieval_sets(Split::Val);
            let scores = score_all(&queries, &gallery, &Scorer::Grnet(model))?;
            for p in Protocol::ALL {
                match evaluate_protocol(&scores, &attrs, p, &schedule.ks) {
                    Ok(report) => {
                        for line in report.lines() {
                            log.push(format!("epoch={epoch} split=val {line}"), sink);
                        }
                    }
                    Err(Error::EmptyProtocol(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(log)
}
