//! Seeded train-and-evaluate runs and the scale / connectivity ablation grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::config::RunConfig;
use crate::data::dataset::Dataset;
use crate::data::manifest::Split;
use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::pyramid::PyramidConfig;
use crate::reasoning::GrNet;
use crate::retrieval::{evaluate_protocol, score_all, topk_accuracy, Protocol, ProtocolReport, ScoreMatrix, Scorer, TopK};
use crate::scalar::Scalar;
use crate::simgraph::EdgeMaskConfig;
use crate::autodiff::{grad_check, objective, GradCheckConfig, GradCheckReport, Tape};
use crate::pyramid::{extract_pyramid, FeatureMap};
use crate::reasoning::ModelShape;
use crate::training::{init_params, train, TrainLog};
use rand::Rng;

/// He-initialises a model for `cfg` and trains it on the train split. All
/// randomness comes from one generator seeded with `cfg.seed`.
pub fn fit<T: Scalar>(
    cfg: &RunConfig,
    data: &Dataset<T>,
    sink: &mut dyn FnMut(&str),
) -> Result<(GrNet<T>, TrainLog)> {
    cfg.validate()?;
    let channels = data
        .channels()
        .ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GrNet::zeros(cfg.model_shape(channels))?;
    init_params(model.params_mut(), &mut rng);
    let log = train(&mut model, data, &cfg.batch, &cfg.optimizer, &cfg.schedule, &mut rng, sink)?;
    Ok((model, log))
}

/// Small-model, 200-step configuration sized for the synthetic task.
pub fn synthetic_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.reasoning.hidden = 16;
    cfg.reasoning.proj_dim = 16;
    cfg.optimizer.base_lr = 0.2;
    cfg.optimizer.decay_every = 7;
    cfg.schedule.epochs = 10;
    cfg.schedule.steps_per_epoch = Some(20);
    cfg.schedule.validate_every = 0;
    cfg
}

/// Default planted-patch task with occluded and cropped queries.
pub fn synthetic_task(seed: u64) -> SynthSpec {
    SynthSpec {
        occlusion_rate: 0.4,
        cropping_rate: 0.4,
        seed,
        ..SynthSpec::default()
    }
}

/// Finite-difference check of every model parameter on one random labelled
/// pair. Weights are He-initialised, head biases and maps uniform.
pub fn model_grad_check(shape: ModelShape, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GrNet::<f64>::zeros(shape)?;
    init_params(model.params_mut(), &mut rng);
    for p in model.params_mut().iter_mut().filter(|p| !p.decay) {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let side = 2 * model
        .shape()
        .pyramid
        .scales()
        .iter()
        .map(|s| s.rows.max(s.cols))
        .max()
        .unwrap_or(1);
    let c = model.shape().channels;
    let mut map = || FeatureMap::new(c, side, side, (0..c * side * side).map(|_| rng.random_range(0.0..1.0)).collect());
    let (q, g) = (map()?, map()?);
    let label = 1;
    let pyr = &model.shape().pyramid;
    let qf = extract_pyramid(&q, pyr)?.matrix().clone();
    let gf = extract_pyramid(&g, pyr)?.matrix().clone();
    let frozen = model.clone();
    let f = objective(move |tape: &mut Tape<'_, f64>, p| {
        let qv = tape.leaf(qf.clone());
        let gv = tape.leaf(gf.clone());
        let trace = frozen.forward_with_params(p, tape, qv, gv)?;
        tape.cross_entropy(trace.logits, label)
    });
    grad_check(f, model.params_mut(), cfg)
}

/// Mean of the last `n` entries (all of them when fewer exist).
pub fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scorer: String,
    /// Top-k over every query of the split.
    pub overall: Vec<TopK>,
    /// Protocols that select at least one query.
    pub protocols: Vec<ProtocolReport>,
}

impl Evaluation {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.overall.iter().find(|r| r.k == k).map(|r| r.accuracy)
    }

    pub fn protocol(&self, p: Protocol) -> Option<&ProtocolReport> {
        self.protocols.iter().find(|r| r.protocol == p)
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .overall
            .iter()
            .map(|r| format!("scorer={} protocol=all k={} accuracy={:.4}", self.scorer, r.k, r.accuracy))
            .collect();
        for p in &self.protocols {
            out.extend(p.lines().into_iter().map(|l| format!("scorer={} {l}", self.scorer)));
        }
        out
    }
}

/// Scores every query of `split` against its gallery and reports top-k.
pub fn evaluate<T: Scalar>(
    data: &Dataset<T>,
    split: Split,
    scorer: &Scorer<'_, T>,
    ks: &[usize],
) -> Result<(ScoreMatrix<T>, Evaluation)> {
    let (queries, gallery, attrs) = data.retrieval_sets(split);
    let scores = score_all(&queries, &gallery, scorer)?;
    let overall = ks.iter().map(|&k| topk_accuracy(&scores, k)).collect::<Result<_>>()?;
    let mut protocols = Vec::new();
    for p in Protocol::ALL {
        match evaluate_protocol(&scores, &attrs, p, ks) {
            Ok(r) => protocols.push(r),
            Err(Error::EmptyProtocol(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let eval = Evaluation {
        scorer: scorer.name().to_string(),
        overall,
        protocols,
    };
    Ok((scores, eval))
}

/// One row of the ablation grid: a pyramid and an edge mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub pyramid: PyramidConfig,
    pub mask: EdgeMaskConfig,
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.pyramid = self.pyramid.clone();
        cfg.reasoning.mask = self.mask.clone();
        cfg
    }
}

/// Scale subsets first, then connectivity removals on the seven-scale
/// pyramid (global links kept so the global node still sees local nodes),
/// then full connectivity.
pub fn ablation_variants() -> Vec<Variant> {
    let full = EdgeMaskConfig::full();
    let seven = PyramidConfig::seven_scale;
    let parse = |s: &str| s.parse::<PyramidConfig>().expect("built-in pyramid");
    vec![
        Variant {
            name: "global-only",
            pyramid: PyramidConfig::global(),
            mask: full.clone(),
        },
        Variant {
            name: "scales-2",
            pyramid: parse("1x1,1x2,2x1,2x2"),
            mask: full.clone(),
        },
        Variant {
            name: "scales-3",
            pyramid: parse("1x1,1x3,3x1,3x3"),
            mask: full.clone(),
        },
        Variant {
            name: "no-intra-no-inter",
            pyramid: seven(),
            mask: EdgeMaskConfig {
                intra_scale: false,
                inter_scale: false,
                ..full.clone()
            }
            .with_global_links(true),
        },
        Variant {
            name: "inter-only",
            pyramid: seven(),
            mask: EdgeMaskConfig::inter_only().with_global_links(true),
        },
        Variant {
            name: "intra-only",
            pyramid: seven(),
            mask: EdgeMaskConfig::intra_only().with_global_links(true),
        },
        Variant {
            name: "full",
            pyramid: seven(),
            mask: full,
        },
    ]
}

pub fn variant(name: &str) -> Result<Variant> {
    ablation_variants()
        .into_iter()
        .find(|v| v.name == name)
        .ok_or_else(|| {
            let known: Vec<&str> = ablation_variants().iter().map(|v| v.name).collect();
            Error::Config(format!("unknown variant `{name}` (known: {})", known.join(", ")))
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// `per_seed[s][i]` is top-`ks[i]` accuracy for seed `s`.
    pub per_seed: Vec<Vec<f64>>,
    pub final_losses: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self, i: usize) -> f64 {
        self.per_seed.iter().map(|r| r[i]).sum::<f64>() / self.per_seed.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Mean top-`k` of a row, `None` when either is absent.
    pub fn mean(&self, name: &str, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(self.row(name)?.mean(i))
    }

    /// A header line and one whitespace-aligned line per variant.
    pub fn lines(&self) -> Vec<String> {
        let mut head = format!("{:<20} {:>5}", "variant", "seeds");
        for k in &self.ks {
            head.push_str(&format!(" {:>8}", format!("top{k}")));
        }
        head.push_str(&format!(" {:>10}", "loss"));
        let mut out = vec![head];
        for r in &self.rows {
            let mut line = format!("{:<20} {:>5}", r.name, r.per_seed.len());
            for i in 0..self.ks.len() {
                line.push_str(&format!(" {:>8.4}", r.mean(i)));
            }
            line.push_str(&format!(" {:>10.4}", tail_mean(&r.final_losses, r.final_losses.len())));
            out.push(line);
        }
        out
    }
}

/// Trains and evaluates every variant once per seed on the test split.
/// `data_for(seed)` supplies the dataset; the run config seed is replaced by
/// the same value.
pub fn ablate<T: Scalar>(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    data_for: &mut dyn FnMut(u64) -> Result<Dataset<T>>,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let ks = base.schedule.ks.clone();
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|v| AblationRow {
            name: v.name.to_string(),
            per_seed: Vec::new(),
            final_losses: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let data = data_for(seed)?;
        for (v, row) in variants.iter().zip(&mut rows) {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let (model, log) = fit(&cfg, &data, &mut |_| {})?;
            let (_, eval) = evaluate(&data, Split::Test, &Scorer::Grnet(&model), &ks)?;
            let accs: Vec<f64> = eval.overall.iter().map(|r| r.accuracy).collect();
            let loss = tail_mean(&log.losses, 10);
            progress(&format!(
                "seed={seed} variant={} loss={loss:.4} top{}={:.4}",
                v.name, ks[0], accs[0]
            ));
            row.per_seed.push(accs);
            row.final_losses.push(loss);
        }
    }
    Ok(AblationTable {
        ks,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoning::{EdgeMode, ReasoningConfig};

    #[test]
    fn variants_have_distinct_names_and_valid_shapes() {
        let vs = ablation_variants();
        assert_eq!(vs.len(), 7);
        for v in &vs {
            let cfg = v.apply(&RunConfig::default());
            cfg.validate().unwrap();
            assert_eq!(variant(v.name).unwrap(), *v);
        }
        assert_eq!(vs[0].pyramid.node_count(), 1);
        assert_eq!(vs[1].pyramid.node_count(), 1 + 4 + 4 + 16);
        assert!(matches!(variant("nope"), Err(Error::Config(_))));
        synthetic_run_config(3).validate().unwrap();
        synthetic_task(3).validate().unwrap();
    }

    #[test]
    fn model_gradients_pass_in_both_edge_modes() {
        for mode in [EdgeMode::RecomputePerLayer, EdgeMode::FrozenFirstLayer] {
            let shape = ModelShape {
                channels: 3,
                pyramid: "1x1,2x2".parse().unwrap(),
                reasoning: ReasoningConfig {
                    layers: 2,
                    hidden: 3,
                    proj_dim: 4,
                    edge_mode: mode,
                    ..Default::default()
                },
            };
            let report = model_grad_check(shape, 1, &GradCheckConfig::default()).unwrap();
            assert_eq!(report.params.len(), if mode == EdgeMode::RecomputePerLayer { 9 } else { 7 });
            assert!(report.max_rel_error() < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn tail_mean_cases() {
        assert_eq!(tail_mean(&[1.0, 2.0, 3.0], 2), 2.5);
        assert_eq!(tail_mean(&[4.0], 10), 4.0);
        assert!(tail_mean(&[], 3).is_nan());
    }

    #[test]
    fn table_lines_align() {
        let t = AblationTable {
            ks: vec![1, 20],
            seeds: vec![0, 1],
            rows: vec![AblationRow {
                name: "full".into(),
                per_seed: vec![vec![0.5, 1.0], vec![0.25, 0.5]],
                final_losses: vec![0.1, 0.3],
            }],
        };
        let lines = t.lines();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("variant"));
        assert!(lines[1].contains("0.3750") && lines[1].contains("0.7500") && lines[1].contains("0.2000"));
        assert_eq!(t.mean("full", 20), Some(0.75));
        assert_eq!(t.mean("full", 50), None);
    }
}
