//! Query/gallery scoring, ranking and protocol-filtered top-k accuracy.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{extract_pyramid, global_aggregate, FeatureMap, PyramidConfig, Scale};
use crate::reasoning::GrNet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    #[default]
    Front,
    Side,
    Back,
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(View::Front),
            "side" => Ok(View::Side),
            "back" => Ok(View::Back),
            other => Err(Error::Input(format!("unknown view `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryAttributes {
    pub view: View,
    pub occluded: bool,
    pub cropped: bool,
}

/// Query subsets; the gallery is never filtered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Front view, neither occluded nor cropped.
    E,
    /// Non-front view.
    HV,
    HO,
    HC,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::E, Protocol::HV, Protocol::HO, Protocol::HC];

    pub fn selects(self, a: &QueryAttributes) -> bool {
        match self {
            Protocol::E => a.view == View::Front && !a.occluded && !a.cropped,
            Protocol::HV => a.view != View::Front,
            Protocol::HO => a.occluded,
            Protocol::HC => a.cropped,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::E => "E",
            Protocol::HV => "HV",
            Protocol::HO => "HO",
            Protocol::HC => "HC",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E" => Ok(Protocol::E),
            "HV" => Ok(Protocol::HV),
            "HO" => Ok(Protocol::HO),
            "HC" => Ok(Protocol::HC),
            _ => Err(Error::Input(format!("unknown protocol `{s}`"))),
        }
    }
}

/// Cosine with zero-norm inputs scoring 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (mut ab, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == T::zero() || bb == T::zero() {
        return T::zero();
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Cosine of the globally max-pooled descriptors.
pub fn global_cosine<T: Scalar>(x: &FeatureMap<T>, y: &FeatureMap<T>) -> Result<T> {
    if x.channels() != y.channels() {
        return Err(Error::dimension("global_cosine", &[x.channels()], &[y.channels()]));
    }
    Ok(cosine(&global_aggregate(x), &global_aggregate(y)))
}

/// `Σ_i max_j cos(x_i, y_j)`; the first maximal `j` is selected.
pub fn greedy_local_vectors<T: Scalar, V: AsRef<[T]>>(xs: &[V], ys: &[V]) -> T {
    let mut total = T::zero();
    for x in xs {
        let mut best: Option<T> = None;
        for y in ys {
            let c = cosine(x.as_ref(), y.as_ref());
            if best.is_none_or(|b| c > b) {
                best = Some(c);
            }
        }
        total += best.unwrap_or_else(T::zero);
    }
    total
}

fn scale_windows<T: Scalar>(fm: &FeatureMap<T>, scale: Scale) -> Result<Vec<Vec<T>>> {
    let cfg = PyramidConfig::new(vec![scale])?;
    let feats = extract_pyramid(fm, &cfg)?;
    Ok(feats.scale(0).into_iter().map(<[T]>::to_vec).collect())
}

/// Greedy local matching over the windows of one pyramid scale.
pub fn greedy_local<T: Scalar>(x: &FeatureMap<T>, y: &FeatureMap<T>, scale: Scale) -> Result<T> {
    if x.channels() != y.channels() {
        return Err(Error::dimension("greedy_local", &[x.channels()], &[y.channels()]));
    }
    Ok(greedy_local_vectors(
        &scale_windows(x, scale)?,
        &scale_windows(y, scale)?,
    ))
}

#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a, T> {
    Grnet(&'a GrNet<T>),
    GlobalCosine,
    GreedyLocal { scale: Scale },
}

impl<T> Scorer<'_, T> {
    /// Finest scale of the default pyramid.
    pub const DEFAULT_GREEDY_SCALE: Scale = Scale::new(3, 3);

    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Grnet(_) => "grnet",
            Scorer::GlobalCosine => "global-cosine",
            Scorer::GreedyLocal { .. } => "greedy-local",
        }
    }
}

/// One scorable item.
#[derive(Clone, Copy, Debug)]
pub struct Item<'a, T> {
    pub id: &'a str,
    pub identity: &'a str,
    pub map: &'a FeatureMap<T>,
}

/// Dense `Q × G` score matrix; gallery columns are in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    /// Row-major, higher is more similar.
    pub scores: Vec<T>,
    /// Ground-truth gallery columns per query.
    pub truth: Vec<Vec<usize>>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn new(
        query_ids: Vec<String>,
        gallery_ids: Vec<String>,
        scores: Vec<T>,
        truth: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let (q, g) = (query_ids.len(), gallery_ids.len());
        if scores.len() != q * g || truth.len() != q {
            return Err(Error::dimension("score_matrix", &[q, g], &[scores.len(), truth.len()]));
        }
        for (i, t) in truth.iter().enumerate() {
            if t.is_empty() || t.iter().any(|&j| j >= g) {
                return Err(Error::Data(format!(
                    "query `{}` has no ground-truth item in the gallery",
                    query_ids[i]
                )));
            }
        }
        Ok(ScoreMatrix {
            query_ids,
            gallery_ids,
            scores,
            truth,
        })
    }

    pub fn queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn row(&self, q: usize) -> &[T] {
        let g = self.gallery();
        &self.scores[q * g..(q + 1) * g]
    }

    /// Gallery columns of query `q` from best to worst; equal scores keep
    /// ascending column (= id) order.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| match row[b].partial_cmp(&row[a]) {
            Some(Ordering::Equal) | None => a.cmp(&b),
            Some(o) => o,
        });
        order
    }

    /// Keeps only the listed query rows.
    pub fn select_queries(&self, rows: &[usize]) -> Self {
        let g = self.gallery();
        ScoreMatrix {
            query_ids: rows.iter().map(|&r| self.query_ids[r].clone()).collect(),
            gallery_ids: self.gallery_ids.clone(),
            scores: rows
                .iter()
                .flat_map(|&r| self.scores[r * g..(r + 1) * g].iter().copied())
                .collect(),
            truth: rows.iter().map(|&r| self.truth[r].clone()).collect(),
        }
    }

    /// `query_id<TAB>gallery ids best-first` per line.
    pub fn ranking_dump(&self) -> String {
        let mut out = String::new();
        for q in 0..self.queries() {
            out.push_str(&self.query_ids[q]);
            out.push('\t');
            let ids: Vec<&str> = self
                .ranking(q)
                .into_iter()
                .map(|j| self.gallery_ids[j].as_str())
                .collect();
            out.push_str(&ids.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Scores every query against every gallery item.
pub fn score_all<T: Scalar>(
    queries: &[Item<'_, T>],
    gallery: &[Item<'_, T>],
    scorer: &Scorer<'_, T>,
) -> Result<ScoreMatrix<T>> {
    let mut gallery: Vec<&Item<'_, T>> = gallery.iter().collect();
    gallery.sort_by(|a, b| a.id.cmp(b.id));

    let truth = queries
        .iter()
        .map(|q| {
            gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| g.identity == q.identity)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    let mut scores = Vec::with_capacity(queries.len() * gallery.len());
    match scorer {
        Scorer::Grnet(model) => {
            let gp = gallery
                .iter()
                .map(|g| model.pyramid(g.map))
                .collect::<Result<Vec<_>>>()?;
            for q in queries {
                let qp = model.pyramid(q.map)?;
                for g in &gp {
                    scores.push(model.score_features(&qp, g)?.score);
                }
            }
        }
        Scorer::GlobalCosine => {
            let gv: Vec<Vec<T>> = gallery.iter().map(|g| global_aggregate(g.map)).collect();
            for q in queries {
                let qv = global_aggregate(q.map);
                if let Some(g) = gv.first() {
                    if g.len() != qv.len() {
                        return Err(Error::dimension("global_cosine", &[qv.len()], &[g.len()]));
                    }
                }
                scores.extend(gv.iter().map(|g| cosine(&qv, g)));
            }
        }
        Scorer::GreedyLocal { scale } => {
            let gw = gallery
                .iter()
                .map(|g| scale_windows(g.map, *scale))
                .collect::<Result<Vec<_>>>()?;
            for q in queries {
                let qw = scale_windows(q.map, *scale)?;
                scores.extend(gw.iter().map(|g| greedy_local_vectors(&qw, g)));
            }
        }
    }
    ScoreMatrix::new(
        queries.iter().map(|q| q.id.to_string()).collect(),
        gallery.iter().map(|g| g.id.to_string()).collect(),
        scores,
        truth,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub k: usize,
    /// `k` after clamping to the gallery size.
    pub k_used: usize,
    pub accuracy: f64,
    pub warning: Option<String>,
}

/// Fraction of queries with a ground-truth item among the `k` best.
pub fn topk_accuracy<T: Scalar>(scores: &ScoreMatrix<T>, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if scores.queries() == 0 {
        return Err(Error::Input("score matrix has no queries".into()));
    }
    let g = scores.gallery();
    let (k_used, warning) = if k > g {
        (g, Some(format!("k={k} exceeds gallery size {g}; clamped to {g}")))
    } else {
        (k, None)
    };
    let mut hits = 0usize;
    for q in 0..scores.queries() {
        let top = &scores.ranking(q)[..k_used];
        if top.iter().any(|j| scores.truth[q].contains(j)) {
            hits += 1;
        }
    }
    Ok(TopK {
        k,
        k_used,
        accuracy: hits as f64 / scores.queries() as f64,
        warning,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub queries: usize,
    pub results: Vec<TopK>,
}

impl ProtocolReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.results.iter().find(|r| r.k == k).map(|r| r.accuracy)
    }

    /// `protocol=E k=1 queries=N accuracy=0.xxxx`, one line per k.
    pub fn lines(&self) -> Vec<String> {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "protocol={} k={} queries={} accuracy={:.4}",
                    self.protocol, r.k, self.queries, r.accuracy
                )
            })
            .collect()
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 20, 50];

/// Top-k accuracies on the queries selected by `protocol`.
pub fn evaluate_protocol<T: Scalar>(
    scores: &ScoreMatrix<T>,
    attributes: &[QueryAttributes],
    protocol: Protocol,
    ks: &[usize],
) -> Result<ProtocolReport> {
    if attributes.len() != scores.queries() {
        return Err(Error::dimension(
            "evaluate_protocol",
            &[scores.queries()],
            &[attributes.len()],
        ));
    }
    let rows: Vec<usize> = attributes
        .iter()
        .enumerate()
        .filter(|(_, a)| protocol.selects(a))
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyProtocol(protocol.to_string()));
    }
    let subset = scores.select_queries(&rows);
    let results = ks
        .iter()
        .map(|&k| topk_accuracy(&subset, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolReport {
        protocol,
        queries: rows.len(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: Vec<Vec<f64>>, truth: Vec<Vec<usize>>) -> ScoreMatrix<f64> {
        let g = rows[0].len();
        ScoreMatrix::new(
            (0..rows.len()).map(|i| format!("q{i}")).collect(),
            (0..g).map(|j| format!("g{j:02}")).collect(),
            rows.concat(),
            truth,
        )
        .unwrap()
    }

    #[test]
    fn hand_counted_ranks() {
        // truths at rank 1, 2 and 5
        let m = matrix(
            vec![
                vec![0.9, 0.1, 0.2, 0.3, 0.4],
                vec![0.5, 0.9, 0.1, 0.2, 0.3],
                vec![0.5, 0.6, 0.7, 0.8, 0.1],
            ],
            vec![vec![0], vec![0], vec![4]],
        );
        let acc = |k| topk_accuracy(&m, k).unwrap().accuracy;
        assert_eq!(acc(1), 1.0 / 3.0);
        assert_eq!(acc(2), 2.0 / 3.0);
        assert_eq!(acc(4), 2.0 / 3.0);
        assert_eq!(acc(5), 1.0);
    }

    #[test]
    fn ties_go_to_lower_gallery_id() {
        let m = matrix(vec![vec![0.5, 0.5, 0.5]], vec![vec![1]]);
        assert_eq!(m.ranking(0), vec![0, 1, 2]);
        assert_eq!(topk_accuracy(&m, 1).unwrap().accuracy, 0.0);
        assert_eq!(topk_accuracy(&m, 2).unwrap().accuracy, 1.0);
    }

    #[test]
    fn oversized_k_is_clamped_with_warning() {
        let m = matrix(vec![vec![0.1, 0.2]], vec![vec![0]]);
        let r = topk_accuracy(&m, 50).unwrap();
        assert_eq!((r.k_used, r.accuracy), (2, 1.0));
        assert!(r.warning.is_some());
        assert!(topk_accuracy(&m, 0).is_err());
    }

    #[test]
    fn missing_truth_is_rejected() {
        let err = ScoreMatrix::new(vec!["q".into()], vec!["g".into()], vec![0.0], vec![vec![]]);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn protocol_predicates() {
        let front = QueryAttributes::default();
        let all_front = vec![front; 3];
        let m = matrix(vec![vec![1.0, 0.0]; 3], vec![vec![0]; 3]);
        assert_eq!(evaluate_protocol(&m, &all_front, Protocol::E, &[1]).unwrap().queries, 3);
        for p in [Protocol::HV, Protocol::HO, Protocol::HC] {
            assert!(matches!(
                evaluate_protocol(&m, &all_front, p, &[1]),
                Err(Error::EmptyProtocol(_))
            ));
        }
        let hard = QueryAttributes {
            view: View::Side,
            occluded: true,
            cropped: true,
        };
        for p in [Protocol::HV, Protocol::HO, Protocol::HC] {
            assert!(p.selects(&hard));
        }
        assert!(!Protocol::E.selects(&hard));
    }

    #[test]
    fn report_line_format() {
        let m = matrix(vec![vec![0.9, 0.1]], vec![vec![0]]);
        let r = evaluate_protocol(&m, &[QueryAttributes::default()], Protocol::E, &[1]).unwrap();
        assert_eq!(r.lines(), vec!["protocol=E k=1 queries=1 accuracy=1.0000"]);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]) - 1.0f64).abs() < 1e-15);
    }

    #[test]
    fn greedy_collapses_and_counts() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| ((i * 7) % 5) as f64 + 0.5).collect();
        let x = FeatureMap::new(2, 3, 3, data).unwrap();
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = 6.0 - *v);
        let single = greedy_local(&x, &y, Scale::new(1, 1)).unwrap();
        assert_eq!(single, global_cosine(&x, &y).unwrap());
        let self_score = greedy_local(&x, &x, Scale::new(3, 3)).unwrap();
        assert!((self_score - 9.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn accuracy_monotone_in_k(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..9).map(|_| rng.random_range(0..4) as f64).collect()).collect();
            let truth = (0..6).map(|_| vec![rng.random_range(0..9)]).collect();
            let m = matrix(rows, truth);
            let mut prev = 0.0;
            for k in 1..=9 {
                let a = topk_accuracy(&m, k).unwrap().accuracy;
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn rank_only_dependence(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let truth: Vec<Vec<usize>> = (0..4).map(|_| vec![rng.random_range(0..7)]).collect();
            let base = matrix(rows.clone(), truth.clone());
            let warped = matrix(rows.iter().map(|r| r.iter().map(|x| (3.0 * x).exp() + 1.0).collect()).collect(), truth);
            for k in 1..=7 {
                prop_assert_eq!(topk_accuracy(&base, k).unwrap().accuracy, topk_accuracy(&warped, k).unwrap().accuracy);
            }
        }
    }
}
