//! Random-forest regression with across-tree uncertainty.
//!
//! Trees split on axis-aligned thresholds over encoded coordinates and pick
//! the split with the lowest weighted sum of child variances. A prediction
//! reports the mean of the per-tree outputs and their population standard
//! deviation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::EncodedPoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("cannot fit a forest on an empty training set")]
    EmptyTrainingSet,
    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("training target {0} is not finite")]
    NonFiniteTarget(f64),
}

/// How many coordinates each split considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    /// `max(1, floor(d / 3))`.
    #[default]
    Third,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, dim: usize) -> usize {
        match self {
            MaxFeatures::Third => (dim / 3).max(1),
            MaxFeatures::All => dim.max(1),
            MaxFeatures::Count(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Third,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self, dim: usize) -> Result<(), SurrogateError> {
        if self.n_trees == 0 {
            return Err(SurrogateError::InvalidParams("n_trees must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(SurrogateError::InvalidParams(
                "min_samples_leaf must be >= 1".into(),
            ));
        }
        if let MaxFeatures::Count(n) = self.max_features {
            if n == 0 || (dim > 0 && n > dim) {
                return Err(SurrogateError::InvalidParams(format!(
                    "max_features {n} outside 1..={dim}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        coord: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    coord,
                    threshold,
                    left,
                    right,
                } => at = if x[coord] <= threshold { left } else { right },
            }
        }
    }

    /// Coordinate and threshold of the root split, if the root is not a leaf.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes[0] {
            Node::Split {
                coord, threshold, ..
            } => Some((coord, threshold)),
            Node::Leaf(_) => None,
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }
}

/// Arithmetic mean clamped to the sample range, so rounding can never push
/// it outside `[min, max]` (and a constant sample returns that constant).
fn bounded_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    (sum / n as f64).clamp(lo, hi)
}

struct TreeBuilder<'a> {
    xs: &'a [&'a [f64]],
    ys: &'a [f64],
    dim: usize,
    min_leaf: usize,
    max_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    score: f64,
    coord: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn build(&mut self, rows: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let leaf = || bounded_mean(rows.iter().map(|&r| self.ys[r]));

        let constant = rows.iter().all(|&r| self.ys[r] == self.ys[rows[0]]);
        if rows.len() < 2 * self.min_leaf || constant {
            self.nodes[id] = Node::Leaf(leaf());
            return id;
        }
        let Some(best) = self.best_split(&rows) else {
            self.nodes[id] = Node::Leaf(leaf());
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&row| self.xs[row][best.coord] <= best.threshold);
        let left = self.build(l);
        let right = self.build(r);
        self.nodes[id] = Node::Split {
            coord: best.coord,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    /// Draws coordinates in random order, skipping ones that are constant in
    /// this node, until `max_features` usable ones are found; then scores
    /// them in ascending coordinate order so ties go to the lowest
    /// coordinate, then the lowest threshold.
    fn best_split(&mut self, rows: &[usize]) -> Option<BestSplit> {
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.shuffle(&mut self.rng);
        let mut chosen = Vec::with_capacity(self.max_features);
        for c in order {
            if chosen.len() == self.max_features {
                break;
            }
            let first = self.xs[rows[0]][c];
            if rows.iter().any(|&r| self.xs[r][c] != first) {
                chosen.push(c);
            }
        }
        chosen.sort_unstable();

        let offset = bounded_mean(rows.iter().map(|&r| self.ys[r]));
        let mut best: Option<BestSplit> = None;
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(rows.len());
        for coord in chosen {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.xs[r][coord], self.ys[r] - offset)));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let n = sorted.len();
            let (total, total_sq) = sorted
                .iter()
                .fold((0.0, 0.0), |(s, q), &(_, y)| (s + y, q + y * y));
            let (mut sum_l, mut sq_l) = (0.0, 0.0);
            for i in 0..n - 1 {
                let y = sorted[i].1;
                sum_l += y;
                sq_l += y * y;
                let n_l = i + 1;
                let n_r = n - n_l;
                if sorted[i].0 == sorted[i + 1].0 || n_l < self.min_leaf || n_r < self.min_leaf {
                    continue;
                }
                let sse_l = sq_l - sum_l * sum_l / n_l as f64;
                let sum_r = total - sum_l;
                let sse_r = (total_sq - sq_l) - sum_r * sum_r / n_r as f64;
                let score = sse_l.max(0.0) + sse_r.max(0.0);
                if best.as_ref().is_none_or(|b| score < b.score) {
                    best = Some(BestSplit {
                        score,
                        coord,
                        threshold: 0.5 * (sorted[i].0 + sorted[i + 1].0),
                    });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    trees: Vec<RegressionTree>,
    dim: usize,
    training: Vec<(EncodedPoint, f64)>,
}

impl SurrogateModel {
    /// Fits `params.n_trees` trees. Tree `t` draws from its own stream seeded
    /// with `params.seed + t`, so the result depends only on the inputs.
    pub fn fit(
        points: &[(EncodedPoint, f64)],
        params: &ForestParams,
    ) -> Result<Self, SurrogateError> {
        let (first, _) = points.first().ok_or(SurrogateError::EmptyTrainingSet)?;
        let dim = first.dim();
        params.validate(dim)?;
        for (x, y) in points {
            if x.dim() != dim {
                return Err(SurrogateError::DimensionMismatch {
                    expected: dim,
                    got: x.dim(),
                });
            }
            if !y.is_finite() {
                return Err(SurrogateError::NonFiniteTarget(*y));
            }
        }
        let xs: Vec<&[f64]> = points.iter().map(|(x, _)| x.coords()).collect();
        let ys: Vec<f64> = points.iter().map(|(_, y)| *y).collect();
        let n = points.len();
        let max_features = params.max_features.resolve(dim).min(dim);

        let trees = (0..params.n_trees)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(t as u64));
                let rows: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut builder = TreeBuilder {
                    xs: &xs,
                    ys: &ys,
                    dim,
                    min_leaf: params.min_samples_leaf,
                    max_features,
                    rng,
                    nodes: Vec::new(),
                };
                builder.build(rows);
                RegressionTree {
                    nodes: builder.nodes,
                }
            })
            .collect();

        Ok(Self {
            trees,
            dim,
            training: points.to_vec(),
        })
    }

    pub fn predict(&self, x: &EncodedPoint) -> Result<Prediction, SurrogateError> {
        if x.dim() != self.dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.dim,
                got: x.dim(),
            });
        }
        Ok(aggregate(
            &self
                .trees
                .iter()
                .map(|t| t.predict(x.coords()))
                .collect::<Vec<_>>(),
        ))
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn training_set(&self) -> &[(EncodedPoint, f64)] {
        &self.training
    }
}

/// Mean and population standard deviation of per-tree outputs.
pub fn aggregate(per_tree: &[f64]) -> Prediction {
    let mean = bounded_mean(per_tree.iter().copied());
    let var = per_tree.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per_tree.len() as f64;
    Prediction {
        mean,
        std: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(coords: &[f64], y: f64) -> (EncodedPoint, f64) {
        (EncodedPoint(coords.to_vec()), y)
    }

    fn exact() -> ForestParams {
        ForestParams {
            n_trees: 1,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            bootstrap: false,
            seed: 0,
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert_eq!(
            SurrogateModel::fit(&[], &ForestParams::default()),
            Err(SurrogateError::EmptyTrainingSet)
        );
        let pts = [pt(&[0.0, 1.0], 1.0), pt(&[0.0], 2.0)];
        assert!(matches!(
            SurrogateModel::fit(&pts, &ForestParams::default()),
            Err(SurrogateError::DimensionMismatch { .. })
        ));
        let m = SurrogateModel::fit(&pts[..1], &ForestParams::default()).unwrap();
        assert!(m.predict(&EncodedPoint(vec![1.0])).is_err());
    }

    #[test]
    fn bad_params_rejected() {
        let pts = [pt(&[0.0, 1.0], 1.0)];
        for p in [
            ForestParams { n_trees: 0, ..Default::default() },
            ForestParams { min_samples_leaf: 0, ..Default::default() },
            ForestParams { max_features: MaxFeatures::Count(3), ..Default::default() },
        ] {
            assert!(matches!(
                SurrogateModel::fit(&pts, &p),
                Err(SurrogateError::InvalidParams(_))
            ));
        }
    }

    #[test]
    fn max_features_default_is_a_third() {
        assert_eq!(MaxFeatures::Third.resolve(2), 1);
        assert_eq!(MaxFeatures::Third.resolve(9), 3);
        assert_eq!(MaxFeatures::All.resolve(9), 9);
    }

    #[test]
    fn constant_targets_predict_constant() {
        let pts: Vec<_> = (0..20).map(|i| pt(&[i as f64, (i % 3) as f64], 7.0)).collect();
        let m = SurrogateModel::fit(&pts, &ForestParams::default()).unwrap();
        assert_eq!(m.trees().len(), 50);
        for x in [[0.0, 0.0], [100.0, -3.0], [5.5, 1.0]] {
            let p = m.predict(&EncodedPoint(x.to_vec())).unwrap();
            assert_eq!((p.mean, p.std), (7.0, 0.0));
        }
    }

    #[test]
    fn single_point_predicts_its_target() {
        let m = SurrogateModel::fit(&[pt(&[3.0], 4.5)], &ForestParams::default()).unwrap();
        let p = m.predict(&EncodedPoint(vec![-10.0])).unwrap();
        assert_eq!((p.mean, p.std), (4.5, 0.0));
    }

    #[test]
    fn two_point_exact_tree() {
        let m = SurrogateModel::fit(&[pt(&[0.0], 0.0), pt(&[1.0], 10.0)], &exact()).unwrap();
        let p0 = m.predict(&EncodedPoint(vec![0.0])).unwrap();
        let p1 = m.predict(&EncodedPoint(vec![1.0])).unwrap();
        assert_eq!((p0.mean, p0.std), (0.0, 0.0));
        assert_eq!((p1.mean, p1.std), (10.0, 0.0));
        assert_eq!(m.trees()[0].root_split(), Some((0, 0.5)));
    }

    #[test]
    fn aggregate_two_trees() {
        let p = aggregate(&[2.0, 4.0]);
        assert_eq!((p.mean, p.std), (3.0, 1.0));
    }

    #[test]
    fn step_function_root_split_between_middle_points() {
        // Six points on a line, step from 1 to 5 between x=2 and x=3.
        let pts: Vec<_> = (0..6)
            .map(|i| pt(&[i as f64], if i < 3 { 1.0 } else { 5.0 }))
            .collect();
        let m = SurrogateModel::fit(&pts, &exact()).unwrap();
        assert_eq!(m.trees()[0].root_split(), Some((0, 2.5)));
        assert_eq!(m.trees()[0].leaf_count(), 2);
    }

    #[test]
    fn ties_prefer_lowest_coordinate() {
        // Both coordinates separate the targets identically.
        let pts = [pt(&[0.0, 0.0], 1.0), pt(&[1.0, 1.0], 2.0)];
        let m = SurrogateModel::fit(&pts, &exact()).unwrap();
        assert_eq!(m.trees()[0].root_split(), Some((0, 0.5)));
    }

    #[test]
    fn min_samples_leaf_respected() {
        let pts: Vec<_> = (0..4).map(|i| pt(&[i as f64], i as f64)).collect();
        let p = ForestParams {
            min_samples_leaf: 2,
            ..exact()
        };
        let m = SurrogateModel::fit(&pts, &p).unwrap();
        assert_eq!(m.trees()[0].leaf_count(), 2);
        assert_eq!(m.predict(&EncodedPoint(vec![0.0])).unwrap().mean, 0.5);
    }

    #[test]
    fn fit_is_deterministic() {
        let pts: Vec<_> = (0..30)
            .map(|i| {
                let a = (i * 7 % 11) as f64;
                let b = (i % 4) as f64;
                pt(&[a, b, (i % 2) as f64], (a - 4.0).powi(2) + b)
            })
            .collect();
        let params = ForestParams {
            seed: 42,
            ..Default::default()
        };
        let a = SurrogateModel::fit(&pts, &params).unwrap();
        let b = SurrogateModel::fit(&pts, &params).unwrap();
        for i in 0..11 {
            for j in 0..4 {
                let x = EncodedPoint(vec![i as f64, j as f64, 1.0]);
                assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mean_within_target_range(
                data in proptest::collection::vec(
                    (proptest::collection::vec(0u8..5, 3), -1e3f64..1e3), 1..40),
                seed in any::<u64>(),
                probe in proptest::collection::vec(-1.0f64..6.0, 3),
            ) {
                let pts: Vec<_> = data
                    .iter()
                    .map(|(x, y)| pt(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), *y))
                    .collect();
                let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                let params = ForestParams { n_trees: 10, seed, ..Default::default() };
                let m = SurrogateModel::fit(&pts, &params).unwrap();
                let p = m.predict(&EncodedPoint(probe)).unwrap();
                prop_assert!(p.mean >= lo && p.mean <= hi);
                prop_assert!(p.std >= 0.0);
            }

            #[test]
            fn single_exact_tree_interpolates(
                ys in proptest::collection::vec(-100f64..100.0, 1..30),
            ) {
                let pts: Vec<_> = ys.iter().enumerate().map(|(i, &y)| pt(&[i as f64], y)).collect();
                let m = SurrogateModel::fit(&pts, &exact()).unwrap();
                for (x, y) in &pts {
                    prop_assert_eq!(m.predict(x).unwrap().mean, *y);
                }
            }
        }
    }
}
