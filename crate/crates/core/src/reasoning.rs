//! Iterative similarity reasoning and the match classifier.
//!
//! Each layer computes edge weights on its input node vectors, propagates
//! `ŝ = W_edge · s`, then applies `h = ReLU(ŝ · Wᵀ)`. After the last layer the
//! global node's vector feeds an affine two-class head; the ranking score is
//! the softmax probability of the "same item" class.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_slice, Tape, Var};
use crate::error::{Error, Result};
use crate::pyramid::{extract_pyramid, FeatureMap, PyramidConfig, PyramidFeatures};
use crate::scalar::Scalar;
use crate::simgraph::{
    edge_weights_on_tape, similarity_nodes_on_tape, EdgeMaskConfig, GraphLayout,
};
use crate::tensor::{ParamId, ParamSet, Parameter, Tensor};

/// How later layers obtain their edge weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    /// Every layer has its own `T_in`/`T_out` sized to its input.
    #[default]
    RecomputePerLayer,
    /// Layer-1 weights are reused by all layers.
    FrozenFirstLayer,
}

impl std::str::FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute-per-layer" | "recompute" => Ok(EdgeMode::RecomputePerLayer),
            "frozen-first-layer" | "frozen" => Ok(EdgeMode::FrozenFirstLayer),
            other => Err(Error::Config(format!("unknown edge mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasoningConfig {
    /// Number of graph convolution layers `T`.
    pub layers: usize,
    /// Hidden channels `C′`.
    pub hidden: usize,
    /// Similarity vector dimension `D`.
    pub proj_dim: usize,
    pub edge_mode: EdgeMode,
    pub mask: EdgeMaskConfig,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        ReasoningConfig {
            layers: 3,
            hidden: 128,
            proj_dim: 512,
            edge_mode: EdgeMode::RecomputePerLayer,
            mask: EdgeMaskConfig::full(),
        }
    }
}

/// Everything that fixes parameter shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub channels: usize,
    pub pyramid: PyramidConfig,
    pub reasoning: ReasoningConfig,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let r = &self.reasoning;
        if self.channels == 0 || r.layers == 0 || r.hidden == 0 || r.proj_dim == 0 {
            return Err(Error::Config(
                "channels, layers, hidden and proj_dim must all be positive".into(),
            ));
        }
        if !self.pyramid.has_global_first() {
            return Err(Error::Config(format!(
                "pyramid {} must start with the 1x1 scale that carries the classified node",
                self.pyramid
            )));
        }
        r.mask.matrix(&GraphLayout::new(&self.pyramid))?;
        Ok(())
    }

    /// Input width of layer `t` (0-based).
    pub fn layer_input(&self, t: usize) -> usize {
        if t == 0 {
            self.reasoning.proj_dim
        } else {
            self.reasoning.hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub t_in: Option<ParamId>,
    pub t_out: Option<ParamId>,
    pub weight: ParamId,
}

/// Logits and ranking score of one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult<T> {
    pub logits: [T; 2],
    /// Probability of the "same item" class.
    pub score: T,
}

impl<T: Scalar> MatchResult<T> {
    pub fn from_logits(logits: [T; 2]) -> Self {
        let p = softmax_slice(&logits);
        MatchResult { logits, score: p[1] }
    }
}

/// Tape handles of one forward evaluation. The final layer is evaluated for
/// the global node only, so its edge weights and output have a single row.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub nodes: Var,
    pub edge_weights: Vec<Var>,
    pub layer_outputs: Vec<Var>,
    pub logits: Var,
}

/// Graph reasoning network parameters together with the fixed graph layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GrNet<T> {
    shape: ModelShape,
    params: ParamSet<T>,
    projection: ParamId,
    layers: Vec<GcnLayer>,
    head_weight: ParamId,
    head_bias: ParamId,
    layout: GraphLayout,
    mask: Vec<bool>,
}

impl<T: Scalar> GrNet<T> {
    /// All-zero parameters of the right shapes.
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let r = &shape.reasoning;
        let mut params = ParamSet::new();
        let projection = params.add(Parameter::new(
            "projection",
            Tensor::zeros(&[r.proj_dim, shape.channels]),
            true,
        ));
        let mut layers = Vec::with_capacity(r.layers);
        for t in 0..r.layers {
            let d = shape.layer_input(t);
            let has_edges = t == 0 || r.edge_mode == EdgeMode::RecomputePerLayer;
            let (t_in, t_out) = if has_edges {
                (
                    Some(params.add(Parameter::new(
                        format!("layer{t}.t_in"),
                        Tensor::zeros(&[d, d]),
                        true,
                    ))),
                    Some(params.add(Parameter::new(
                        format!("layer{t}.t_out"),
                        Tensor::zeros(&[d, d]),
                        true,
                    ))),
                )
            } else {
                (None, None)
            };
            let weight = params.add(Parameter::new(
                format!("layer{t}.w"),
                Tensor::zeros(&[r.hidden, d]),
                true,
            ));
            layers.push(GcnLayer {
                t_in,
                t_out,
                weight,
            });
        }
        let head_weight = params.add(Parameter::new(
            "head.weight",
            Tensor::zeros(&[2, r.hidden]),
            true,
        ));
        let head_bias = params.add(Parameter::new("head.bias", Tensor::zeros(&[2]), false));
        let layout = GraphLayout::new(&shape.pyramid);
        let mask = r.mask.matrix(&layout)?;
        Ok(GrNet {
            shape,
            params,
            projection,
            layers,
            head_weight,
            head_bias,
            layout,
            mask,
        })
    }

    /// Rebuilds a model from stored parameters, matched by identifier.
    pub fn from_params(shape: ModelShape, stored: ParamSet<T>) -> Result<Self> {
        let mut model = Self::zeros(shape)?;
        if stored.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for p in stored.iter() {
            let id = model.params.find(&p.identifier).ok_or_else(|| {
                Error::Format(format!("unexpected parameter `{}`", p.identifier))
            })?;
            let slot = model.params.get_mut(id);
            if slot.value.shape() != p.value.shape() {
                return Err(Error::dimension("from_params", slot.value.shape(), p.value.shape()));
            }
            slot.value = p.value.clone();
        }
        Ok(model)
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &GraphLayout {
        &self.layout
    }

    pub fn projection(&self) -> ParamId {
        self.projection
    }

    pub fn layers(&self) -> &[GcnLayer] {
        &self.layers
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_weight, self.head_bias)
    }

    pub fn pyramid(&self, fm: &FeatureMap<T>) -> Result<PyramidFeatures<T>> {
        if fm.channels() != self.shape.channels {
            return Err(Error::dimension(
                "forward",
                &[self.shape.channels],
                &[fm.channels()],
            ));
        }
        extract_pyramid(fm, &self.shape.pyramid)
    }

    /// Records the full network on `tape` for stacked window features
    /// `query`, `gallery` (`[Σ windows, C]`).
    pub fn forward_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        query: Var,
        gallery: Var,
    ) -> Result<ForwardTrace> {
        self.forward_with_params(&self.params, tape, query, gallery)
    }

    /// [`Self::forward_on_tape`] reading parameter values from `params`,
    /// which must have this model's layout.
    pub fn forward_with_params<'p>(
        &self,
        params: &'p ParamSet<T>,
        tape: &mut Tape<'p, T>,
        query: Var,
        gallery: Var,
    ) -> Result<ForwardTrace> {
        if params.len() != self.params.len() {
            return Err(Error::dimension("forward", &[self.params.len()], &[params.len()]));
        }
        let p = tape.param(params, self.projection);
        let nodes = similarity_nodes_on_tape(tape, query, gallery, p, &self.layout)?;
        let mut current = nodes;
        let mut edge_weights = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let n = self.layout.len();
        let last = self.layers.len() - 1;
        for (t, layer) in self.layers.iter().enumerate() {
            // only the global node's row of the final layer reaches the head
            let targets = if t == last { 1 } else { n };
            let weights = match (layer.t_in, layer.t_out) {
                (Some(ti), Some(to)) => {
                    let ti = tape.param(params, ti);
                    let to = tape.param(params, to);
                    let target_rows = if targets == n {
                        current
                    } else {
                        tape.gather_rows(current, &[0])?
                    };
                    let outgoing = tape.matmul_t(target_rows, to)?;
                    let incoming = tape.matmul_t(current, ti)?;
                    let logits = tape.matmul_t(outgoing, incoming)?;
                    tape.softmax_rows(logits, Some(&self.mask[..targets * n]))?
                }
                _ => {
                    let first = *edge_weights
                        .first()
                        .ok_or_else(|| Error::Logic("first layer has no edge transforms".into()))?;
                    if targets == n {
                        first
                    } else {
                        tape.gather_rows(first, &[0])?
                    }
                }
            };
            let w = tape.param(params, layer.weight);
            current = gcn_layer_on_tape(tape, current, weights, w)?;
            edge_weights.push(weights);
            layer_outputs.push(current);
        }
        let global = current;
        let hw = tape.param(params, self.head_weight);
        let hb = tape.param(params, self.head_bias);
        let projected = tape.matmul_t(global, hw)?;
        let bias = tape.reshape(hb, &[1, 2])?;
        let logits = tape.add(projected, bias)?;
        let logits = tape.reshape(logits, &[2])?;
        Ok(ForwardTrace {
            nodes,
            edge_weights,
            layer_outputs,
            logits,
        })
    }

    fn check_pair(&self, q: &PyramidFeatures<T>, g: &PyramidFeatures<T>) -> Result<()> {
        for f in [q, g] {
            if f.config() != &self.shape.pyramid {
                return Err(Error::Logic(format!(
                    "features use pyramid {}, model expects {}",
                    f.config(),
                    self.shape.pyramid
                )));
            }
            if f.channels() != self.shape.channels {
                return Err(Error::dimension(
                    "forward",
                    &[self.shape.channels],
                    &[f.channels()],
                ));
            }
        }
        Ok(())
    }

    pub fn score_features(
        &self,
        q: &PyramidFeatures<T>,
        g: &PyramidFeatures<T>,
    ) -> Result<MatchResult<T>> {
        self.check_pair(q, g)?;
        let mut tape = Tape::new();
        let qv = tape.leaf(q.matrix().clone());
        let gv = tape.leaf(g.matrix().clone());
        let trace = self.forward_on_tape(&mut tape, qv, gv)?;
        let l = tape.value(trace.logits).data();
        Ok(MatchResult::from_logits([l[0], l[1]]))
    }

    /// Full pipeline from two feature maps.
    pub fn forward(&self, q: &FeatureMap<T>, g: &FeatureMap<T>) -> Result<MatchResult<T>> {
        let qf = self.pyramid(q)?;
        let gf = self.pyramid(g)?;
        self.score_features(&qf, &gf)
    }

    /// Cross-entropy loss of one labelled pair and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        q: &PyramidFeatures<T>,
        g: &PyramidFeatures<T>,
        label: u8,
    ) -> Result<(T, MatchResult<T>, crate::autodiff::Gradients<T>)> {
        let label = check_label(label)?;
        self.check_pair(q, g)?;
        let mut tape = Tape::new();
        let qv = tape.leaf(q.matrix().clone());
        let gv = tape.leaf(g.matrix().clone());
        let trace = self.forward_on_tape(&mut tape, qv, gv)?;
        let loss = tape.cross_entropy(trace.logits, label)?;
        let grads = tape.backward(loss)?;
        let l = tape.value(trace.logits).data();
        Ok((
            tape.value(loss).data()[0],
            MatchResult::from_logits([l[0], l[1]]),
            grads,
        ))
    }
}

fn check_label(label: u8) -> Result<usize> {
    match label {
        0 | 1 => Ok(label as usize),
        other => Err(Error::Input(format!("label must be 0 or 1, got {other}"))),
    }
}

/// `ŝ = weights · nodes`; `weights` may cover a subset of target rows.
pub fn propagate_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, nodes: Var, weights: Var) -> Result<Var> {
    let n = tape.value(nodes).rows();
    if tape.value(weights).cols() != n || tape.value(weights).shape().len() != 2 {
        return Err(Error::dimension(
            "propagate",
            tape.value(weights).shape(),
            tape.value(nodes).shape(),
        ));
    }
    tape.matmul(weights, nodes)
}

/// `ReLU(propagate(nodes) · Wᵀ)`.
pub fn gcn_layer_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    nodes: Var,
    weights: Var,
    w: Var,
) -> Result<Var> {
    let s_hat = propagate_on_tape(tape, nodes, weights)?;
    let lin = tape.matmul_t(s_hat, w)?;
    Ok(tape.relu(lin))
}

/// Value-level propagation of `[N, d]` node vectors.
pub fn propagate<T: Scalar>(nodes: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let n = tape.leaf(nodes.clone());
    let w = tape.leaf(weights.clone());
    let out = propagate_on_tape(&mut tape, n, w)?;
    Ok(tape.value(out).clone())
}

/// Value-level graph convolution layer with its own edge transforms.
pub fn gcn_layer<T: Scalar>(
    nodes: &Tensor<T>,
    t_in: &Tensor<T>,
    t_out: &Tensor<T>,
    w: &Tensor<T>,
    layout: &GraphLayout,
    mask: &EdgeMaskConfig,
) -> Result<Tensor<T>> {
    let flags = mask.matrix(layout)?;
    let mut tape = Tape::new();
    let v = tape.leaf(nodes.clone());
    let (ti, to, wv) = (
        tape.leaf(t_in.clone()),
        tape.leaf(t_out.clone()),
        tape.leaf(w.clone()),
    );
    let weights = edge_weights_on_tape(&mut tape, v, ti, to, &flags)?;
    let h = gcn_layer_on_tape(&mut tape, v, weights, wv)?;
    Ok(tape.value(h).clone())
}

/// Cross-entropy of a match result against `label ∈ {0, 1}`.
pub fn loss<T: Scalar>(result: &MatchResult<T>, label: u8) -> Result<T> {
    let label = check_label(label)?;
    crate::autodiff::ops::cross_entropy_with_logits(&Tensor::vector(result.logits.to_vec())?, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_shape() -> ModelShape {
        ModelShape {
            channels: 4,
            pyramid: "1x1,2x2".parse().unwrap(),
            reasoning: ReasoningConfig {
                layers: 2,
                hidden: 3,
                proj_dim: 5,
                ..Default::default()
            },
        }
    }

    fn randomized(shape: ModelShape, seed: u64) -> GrNet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = GrNet::zeros(shape).unwrap();
        for p in m.params_mut().iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = rand_tensor(&mut rng, &shape);
        }
        m
    }

    fn rand_map(rng: &mut ChaCha8Rng, c: usize) -> FeatureMap<f64> {
        FeatureMap::new(c, 4, 4, (0..c * 16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn propagate_uniform_and_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = rand_tensor(&mut rng, &[4, 3]);
        let w = Tensor::full(&[4, 4], 0.25);
        let out = propagate(&v, &w).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..4).map(|r| v.get2(r, c)).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((out.get2(r, c) - mean).abs() < 1e-15);
            }
        }
        let v = rand_tensor(&mut rng, &[1, 3]);
        assert_eq!(propagate(&v, &Tensor::full(&[1, 1], 1.0)).unwrap(), v);
        assert!(propagate(&v, &Tensor::full(&[2, 2], 0.5)).is_err());
    }

    #[test]
    fn gcn_layer_zero_and_identity_cases() {
        let layout = GraphLayout::new(&"1x1,2x2".parse().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_tensor(&mut rng, &[17, 3]);
        let t = rand_tensor(&mut rng, &[3, 3]);
        let out = gcn_layer(&v, &t, &t, &Tensor::zeros(&[2, 3]), &layout, &EdgeMaskConfig::full()).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));

        let single = GraphLayout::new(&PyramidConfig::global());
        let v = Tensor::matrix(1, 3, vec![-0.5, 0.2, 1.5]).unwrap();
        let z = Tensor::zeros(&[3, 3]);
        let out = gcn_layer(&v, &z, &z, &Tensor::identity(3), &single, &EdgeMaskConfig::full()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.2, 1.5]);
    }

    #[test]
    fn spatially_constant_identical_pair_collapses_to_bias() {
        // every window pair is identical, so every node is the zero vector
        let model = randomized(toy_shape(), 9);
        let mut q = FeatureMap::filled(4, 4, 4, 0.0).unwrap();
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    q.set(c, y, x, 0.1 + c as f64);
                }
            }
        }
        let r = model.forward(&q, &q).unwrap();
        let bias = model.params().get(model.head().1).value.data();
        assert_eq!(r.logits, [bias[0], bias[1]]);
        let p = softmax_slice(bias);
        assert_eq!(r.score, p[1]);
    }

    #[test]
    fn swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = randomized(toy_shape(), 10);
        let q = rand_map(&mut rng, 4);
        let g = rand_map(&mut rng, 4);
        let a = model.forward(&q, &g).unwrap();
        let b = model.forward(&g, &q).unwrap();
        for k in 0..2 {
            assert!((a.logits[k] - b.logits[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_cases() {
        let r = MatchResult::from_logits([0.0f64, 0.0]);
        assert!((loss(&r, 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((loss(&r, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        let r = MatchResult::from_logits([-20.0f64, 20.0]);
        assert!(loss(&r, 1).unwrap() < 1e-8);
        assert!(matches!(loss(&r, 2), Err(Error::Input(_))));
        // lowering the true-class logit raises the loss
        let mut prev = 0.0;
        for k in 0..10 {
            let r = MatchResult::from_logits([0.3f64, 2.0 - k as f64 * 0.5]);
            let l = loss(&r, 1).unwrap();
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn pyramid_must_start_global() {
        let shape = ModelShape {
            pyramid: "2x2,1x1".parse().unwrap(),
            ..toy_shape()
        };
        assert!(matches!(GrNet::<f64>::zeros(shape), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_mode_has_single_edge_transform_pair() {
        let mut shape = toy_shape();
        shape.reasoning.edge_mode = EdgeMode::FrozenFirstLayer;
        let model = GrNet::<f64>::zeros(shape).unwrap();
        assert!(model.layers()[0].t_in.is_some());
        assert!(model.layers()[1].t_in.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, g) = (rand_map(&mut rng, 4), rand_map(&mut rng, 4));
        model.forward(&q, &g).unwrap();
    }
}
