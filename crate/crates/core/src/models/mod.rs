//! Base recommenders (BPR-MF and NeuMF), their losses, hidden-layer taps and
//! ranking helpers.

mod bpr;
mod neumf;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Grads, ParamStore, TensorId, Values};

pub use bpr::{bpr_loss, BprModel};
pub use neumf::{neumf_bce_loss, NeumfModel, NeumfTrace, LOGIT_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseModelKind {
    Bpr,
    NeuMf,
}

impl FromStr for BaseModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpr" => Ok(BaseModelKind::Bpr),
            "neumf" => Ok(BaseModelKind::NeuMf),
            other => Err(Error::Config(format!("unknown base model `{other}`"))),
        }
    }
}

impl fmt::Display for BaseModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseModelKind::Bpr => "bpr",
            BaseModelKind::NeuMf => "neumf",
        })
    }
}

/// Shape of a model: family, catalogue size and last-hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: BaseModelKind,
    pub num_users: usize,
    pub num_items: usize,
    /// Width of the last hidden layer (the distillation tap).
    pub width: usize,
    pub neumf_layers: usize,
}

/// Student width for size ratio `phi`: `round(phi * teacher_width)`, at least 1.
pub fn student_width(phi: f64, teacher_width: usize) -> usize {
    ((phi * teacher_width as f64).round() as usize).max(1)
}

/// How a model exposes its last hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapLayout {
    /// Separate user and item representations (BPR).
    Separate { width: usize },
    /// One representation per `(user, item)` pair (NeuMF).
    Joint { width: usize },
}

impl TapLayout {
    pub fn width(self) -> usize {
        match self {
            TapLayout::Separate { width } | TapLayout::Joint { width } => width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Bpr(BprModel),
    NeuMf(NeumfModel),
}

impl Model {
    /// Register and initialize the model's tensors in `params` under `prefix`.
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, params: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        if spec.width == 0 {
            return Err(Error::Config("model width must be at least 1".into()));
        }
        let model = match spec.kind {
            BaseModelKind::Bpr => Model::Bpr(BprModel::build(params, prefix, spec.num_users, spec.num_items, spec.width, rng)?),
            BaseModelKind::NeuMf => Model::NeuMf(NeumfModel::build(
                params,
                prefix,
                spec.num_users,
                spec.num_items,
                spec.width,
                spec.neumf_layers,
                rng,
            )?),
        };
        debug_assert_eq!(model.tap_layout().width(), spec.width);
        Ok(model)
    }

    /// Rebind to tensors with the same names in another store.
    pub fn rebind(&self, from: &ParamStore, to: &ParamStore) -> Result<Self> {
        let map = |id: TensorId| {
            to.id(from.name(id))
                .ok_or_else(|| Error::Snapshot(format!("missing tensor `{}`", from.name(id))))
        };
        Ok(match self {
            Model::Bpr(m) => Model::Bpr(BprModel {
                user: map(m.user)?,
                item: map(m.item)?,
                ..m.clone()
            }),
            Model::NeuMf(m) => {
                let mut tower = m.tower.clone();
                for l in &mut tower {
                    l.weight = map(l.weight)?;
                    l.bias = map(l.bias)?;
                }
                Model::NeuMf(NeumfModel {
                    gmf_user: map(m.gmf_user)?,
                    gmf_item: map(m.gmf_item)?,
                    mlp_user: map(m.mlp_user)?,
                    mlp_item: map(m.mlp_item)?,
                    tower,
                    out_weight: map(m.out_weight)?,
                    out_bias: map(m.out_bias)?,
                    ..m.clone()
                })
            }
        })
    }

    pub fn kind(&self) -> BaseModelKind {
        match self {
            Model::Bpr(_) => BaseModelKind::Bpr,
            Model::NeuMf(_) => BaseModelKind::NeuMf,
        }
    }

    pub fn num_items(&self) -> usize {
        match self {
            Model::Bpr(m) => m.num_items,
            Model::NeuMf(m) => m.num_items,
        }
    }

    pub fn num_users(&self) -> usize {
        match self {
            Model::Bpr(m) => m.num_users,
            Model::NeuMf(m) => m.num_users,
        }
    }

    pub fn tensors(&self) -> Vec<TensorId> {
        match self {
            Model::Bpr(m) => m.tensors(),
            Model::NeuMf(m) => m.tensors(),
        }
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            Model::Bpr(m) => m.param_count(),
            Model::NeuMf(m) => m.param_count(),
        }
    }

    pub fn tap_layout(&self) -> TapLayout {
        match self {
            Model::Bpr(m) => TapLayout::Separate { width: m.dim },
            Model::NeuMf(m) => TapLayout::Joint { width: m.hidden_width() },
        }
    }

    pub fn score(&self, v: &Values<'_>, u: usize, i: usize) -> f64 {
        match self {
            Model::Bpr(m) => m.score(v, u, i),
            Model::NeuMf(m) => m.score(v, u, i),
        }
    }

    pub fn score_all(&self, v: &Values<'_>, u: usize, out: &mut [f64]) {
        match self {
            Model::Bpr(m) => m.score_all(v, u, out),
            Model::NeuMf(m) => {
                let mut trace = NeumfTrace::default();
                for (i, s) in out.iter_mut().enumerate() {
                    m.forward_into(v, u, i, &mut trace);
                    *s = trace.logit;
                }
            }
        }
    }

    /// Add `dscore · ∂score(u,i)/∂θ` into the gradients.
    pub fn accumulate_score(&self, v: &Values<'_>, g: &mut Grads<'_>, u: usize, i: usize, dscore: f64) {
        if dscore == 0.0 {
            return;
        }
        match self {
            Model::Bpr(m) => m.accumulate_score(v, g, u, i, dscore),
            Model::NeuMf(m) => {
                let trace = m.forward(v, u, i);
                m.backward(v, g, u, i, &trace, dscore, None);
            }
        }
    }

    /// Separate taps: `(user) -> U[u]`. Only valid for BPR.
    pub fn user_tap<'a>(&self, v: &Values<'a>, u: usize) -> &'a [f64] {
        match self {
            Model::Bpr(m) => v.row(m.user, u),
            Model::NeuMf(_) => panic!("NeuMF has a joint tap"),
        }
    }

    pub fn item_tap<'a>(&self, v: &Values<'a>, i: usize) -> &'a [f64] {
        match self {
            Model::Bpr(m) => v.row(m.item, i),
            Model::NeuMf(_) => panic!("NeuMF has a joint tap"),
        }
    }

    /// Joint tap of `(u, i)`. For BPR this is not defined.
    pub fn joint_tap(&self, v: &Values<'_>, u: usize, i: usize) -> Vec<f64> {
        match self {
            Model::NeuMf(m) => m.forward(v, u, i).hidden,
            Model::Bpr(_) => panic!("BPR has separate taps"),
        }
    }

    /// Ranked list of all items not excluded, by descending score with ties
    /// broken by ascending item id.
    pub fn full_ranking(&self, v: &Values<'_>, u: usize, exclude: impl Fn(usize) -> bool) -> Vec<usize> {
        let mut scores = vec![0.0; self.num_items()];
        self.score_all(v, u, &mut scores);
        rank_items(&scores, exclude)
    }
}

/// Descending score, ascending id on ties.
pub fn score_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// All non-excluded item ids sorted by [`score_order`].
pub fn rank_items(scores: &[f64], exclude: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| !exclude(i)).collect();
    ids.sort_unstable_by(|&a, &b| score_order(scores, a, b));
    ids
}

/// The `k` best non-excluded items, in ranked order.
pub fn top_k(scores: &[f64], k: usize, exclude: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| !exclude(i)).collect();
    if k < ids.len() {
        ids.select_nth_unstable_by(k, |&a, &b| score_order(scores, a, b));
        ids.truncate(k);
    }
    ids.sort_unstable_by(|&a, &b| score_order(scores, a, b));
    ids
}

/// Anything that can score `(user, item)` pairs for ranking.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;

    fn score(&self, user: usize, item: usize) -> f64;

    fn score_all(&self, user: usize, out: &mut [f64]) {
        for (i, s) in out.iter_mut().enumerate() {
            *s = self.score(user, i);
        }
    }
}

/// A model bound to the store holding its parameters.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

impl<'a> Bound<'a> {
    pub fn new(model: &'a Model, params: &'a ParamStore) -> Self {
        Bound { model, params }
    }
}

impl Scorer for Bound<'_> {
    fn num_items(&self) -> usize {
        self.model.num_items()
    }

    fn score(&self, user: usize, item: usize) -> f64 {
        self.model.score(&self.params.values(), user, item)
    }

    fn score_all(&self, user: usize, out: &mut [f64]) {
        self.model.score_all(&self.params.values(), user, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{finite_diff_check, sigmoid, GradCheckConfig};
    use crate::rng::Rng as ChaRng;
    use rand::SeedableRng;

    fn spec(kind: BaseModelKind, width: usize) -> ModelSpec {
        ModelSpec {
            kind,
            num_users: 5,
            num_items: 5,
            width,
            neumf_layers: 2,
        }
    }

    fn build(kind: BaseModelKind, width: usize, seed: u64) -> (Model, ParamStore) {
        let mut params = ParamStore::new();
        let mut rng = ChaRng::seed_from_u64(seed);
        let model = Model::build(&spec(kind, width), &mut params, "m", &mut rng).unwrap();
        // inflate the 0.01-std init so losses are not all near ln 2
        for id in params.ids().collect::<Vec<_>>() {
            for x in params.value_mut(id) {
                *x *= 50.0;
            }
        }
        (model, params)
    }

    #[test]
    fn bpr_loss_equal_scores_is_ln2() {
        let mut p = ParamStore::new();
        let model = BprModel {
            user: p.add("u", &[1, 2], vec![1.0, 1.0]).unwrap(),
            item: p.add("i", &[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap(),
            dim: 2,
            num_users: 1,
            num_items: 2,
        };
        let loss = bpr_loss(&model, &mut p, &[(0, 0, 1)], 0.0, 1.0);
        assert!((loss - 2f64.ln()).abs() < 1e-15);

        p.value_mut(model.item).copy_from_slice(&[400.0, 400.0, -400.0, -400.0]);
        let loss = bpr_loss(&model, &mut p, &[(0, 0, 1)], 0.0, 1.0);
        assert!(loss.abs() < 1e-300);
    }

    #[test]
    fn bpr_loss_matches_direct_formula() {
        let (model, mut p) = build(BaseModelKind::Bpr, 3, 1);
        let Model::Bpr(bpr) = &model else { unreachable!() };
        let triples = [(0, 1, 2), (3, 4, 0), (2, 2, 3), (4, 0, 1)];
        let l2 = 0.01;
        let got = bpr_loss(bpr, &mut p, &triples, l2, 1.0);
        let v = p.values();
        let row = |t, r| v.row(t, r).to_vec();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut expected = 0.0;
        for &(u, i, j) in &triples {
            let (pu, qi, qj) = (row(bpr.user, u), row(bpr.item, i), row(bpr.item, j));
            expected += -(sigmoid(d(&pu, &qi) - d(&pu, &qj))).ln() + l2 * (d(&pu, &pu) + d(&qi, &qi) + d(&qj, &qj));
        }
        expected /= triples.len() as f64;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn bpr_loss_gradient() {
        let (model, mut p) = build(BaseModelKind::Bpr, 3, 2);
        let Model::Bpr(bpr) = model else { unreachable!() };
        let triples = [(0, 1, 2), (1, 0, 2), (2, 2, 1)];
        let mut rng = ChaRng::seed_from_u64(0);
        let report = finite_diff_check(
            &mut p,
            |p| bpr_loss(&bpr, p, &triples, 0.05, 1.0),
            None,
            GradCheckConfig::default(),
            &mut rng,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn neumf_bce_limits() {
        let (model, mut p) = build(BaseModelKind::NeuMf, 4, 3);
        let Model::NeuMf(m) = &model else { unreachable!() };
        // zero output weights and bias -> logit 0
        p.value_mut(m.out_weight).iter_mut().for_each(|x| *x = 0.0);
        let loss = neumf_bce_loss(m, &mut p, &[(0, 0, true)], 0.0, 1.0);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        p.value_mut(m.out_bias)[0] = 40.0;
        let loss = neumf_bce_loss(m, &mut p, &[(0, 0, true)], 0.0, 1.0);
        assert!(loss < 1e-17);
        // clamped region: loss finite, gradient zero
        p.value_mut(m.out_bias)[0] = 1e6;
        p.zero_grads();
        let loss = neumf_bce_loss(m, &mut p, &[(0, 0, false)], 0.0, 1.0);
        assert!((loss - 40.0).abs() < 1e-12);
        assert!(p.grad(m.out_bias)[0] == 0.0);
    }

    #[test]
    fn neumf_one_layer_forward_by_hand() {
        let mut p = ParamStore::new();
        let mut rng = ChaRng::seed_from_u64(0);
        let m = NeumfModel::build(&mut p, "n", 1, 1, 2, 1, &mut rng).unwrap();
        assert_eq!((m.gmf_dim, m.top_dim, m.mlp_embed_dim), (1, 1, 1));
        p.value_mut(m.gmf_user).copy_from_slice(&[2.0]);
        p.value_mut(m.gmf_item).copy_from_slice(&[3.0]);
        p.value_mut(m.mlp_user).copy_from_slice(&[1.0]);
        p.value_mut(m.mlp_item).copy_from_slice(&[-2.0]);
        p.value_mut(m.tower[0].weight).copy_from_slice(&[0.5, -1.0]);
        p.value_mut(m.tower[0].bias).copy_from_slice(&[0.25]);
        p.value_mut(m.out_weight).copy_from_slice(&[0.1, 2.0]);
        p.value_mut(m.out_bias).copy_from_slice(&[-0.3]);
        // gmf = 6; tower = relu(0.5 + 2 + 0.25) = 2.75; logit = 0.6 + 5.5 - 0.3
        let t = m.forward(&p.values(), 0, 0);
        assert_eq!(t.hidden, vec![6.0, 2.75]);
        assert!((t.logit - 5.8).abs() < 1e-12);
        let loss = neumf_bce_loss(&m, &mut p, &[(0, 0, true)], 0.0, 1.0);
        assert!((loss - (1.0 + (-5.8f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn neumf_gradients_all_depths() {
        for layers in 1..=4 {
            let mut p = ParamStore::new();
            let mut rng = ChaRng::seed_from_u64(layers as u64);
            let m = NeumfModel::build(&mut p, "n", 4, 5, 6, layers, &mut rng).unwrap();
            for id in [m.gmf_user, m.gmf_item, m.mlp_user, m.mlp_item] {
                for x in p.value_mut(id) {
                    *x *= 60.0;
                }
            }
            let pairs = [(0, 1, true), (1, 2, false), (3, 4, true), (2, 0, false)];
            let report = finite_diff_check(
                &mut p,
                |p| neumf_bce_loss(&m, p, &pairs, 0.02, 1.0),
                None,
                GradCheckConfig {
                    max_coords: 400,
                    ..Default::default()
                },
                &mut rng,
            );
            assert!(report.passed, "layers={layers}: {report:?}");
            assert_eq!(p.count(&m.tensors()), m.param_count());
        }
    }

    #[test]
    fn neumf_joint_tap_gradient() {
        let (model, mut p) = build(BaseModelKind::NeuMf, 6, 9);
        let Model::NeuMf(m) = model.clone() else { unreachable!() };
        let target: Vec<f64> = (0..6).map(|k| k as f64 * 0.1).collect();
        let mut rng = ChaRng::seed_from_u64(1);
        let report = finite_diff_check(
            &mut p,
            |p| {
                let (v, mut g) = p.split();
                let t = m.forward(&v, 1, 3);
                let r: Vec<f64> = t.hidden.iter().zip(&target).map(|(h, y)| h - y).collect();
                m.backward(&v, &mut g, 1, 3, &t, 0.7, Some(&r));
                0.5 * r.iter().map(|x| x * x).sum::<f64>() + 0.7 * t.logit
            },
            None,
            GradCheckConfig::default(),
            &mut rng,
        );
        assert!(report.passed, "{report:?}");
        assert_eq!(model.tap_layout(), TapLayout::Joint { width: 6 });
    }

    #[test]
    fn param_counts() {
        let mut p = ParamStore::new();
        let mut rng = ChaRng::seed_from_u64(0);
        let spec = ModelSpec {
            kind: BaseModelKind::Bpr,
            num_users: 10,
            num_items: 20,
            width: 4,
            neumf_layers: 1,
        };
        let m = Model::build(&spec, &mut p, "b", &mut rng).unwrap();
        assert_eq!(m.param_count(), 120);
        // the published BPR teacher: (5220 + 25182) * 200
        let big = BprModel {
            user: TensorId(0),
            item: TensorId(0),
            dim: 200,
            num_users: 5220,
            num_items: 25182,
        };
        assert_eq!(big.param_count(), 6_080_400);
        assert_eq!(student_width(0.1, 200), 20);
        assert_eq!(student_width(0.1, 64), 6);
        assert_eq!(student_width(0.001, 64), 1);
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_items(&[0.9, 0.1, 0.5], |_| false), vec![0, 2, 1]);
        assert_eq!(rank_items(&[0.9, 0.1, 0.5], |i| i != 1), vec![1]);
        assert_eq!(rank_items(&[0.5, 0.5, 0.7], |_| false), vec![2, 0, 1]);
        assert_eq!(top_k(&[0.1, 0.4, 0.3, 0.9, 0.4], 3, |i| i == 3), vec![1, 4, 2]);
        assert_eq!(top_k(&[0.1, 0.4], 5, |_| false), vec![1, 0]);
    }

    #[test]
    fn bpr_full_ranking_matches_brute_force() {
        let (model, p) = build(BaseModelKind::Bpr, 4, 5);
        let v = p.values();
        for u in 0..5 {
            let got = model.full_ranking(&v, u, |i| i == u);
            let Model::Bpr(m) = &model else { unreachable!() };
            let mut brute: Vec<(f64, usize)> = (0..5)
                .filter(|&i| i != u)
                .map(|i| {
                    let s: f64 = v.row(m.user, u).iter().zip(v.row(m.item, i)).map(|(a, b)| a * b).sum();
                    (s, i)
                })
                .collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(got, brute.into_iter().map(|x| x.1).collect::<Vec<_>>());
        }
    }

    proptest::proptest! {
        #[test]
        fn ranking_is_a_monotone_permutation(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..40),
            bump in 0.001f64..3.0,
            pick in 0usize..40,
        ) {
            let n = scores.len();
            let ranked = rank_items(&scores, |i| i % 7 == 3);
            let mut sorted = ranked.clone();
            sorted.sort_unstable();
            let expected: Vec<usize> = (0..n).filter(|i| i % 7 != 3).collect();
            proptest::prop_assert_eq!(sorted, expected);

            let target = pick % n;
            if target % 7 != 3 {
                let before = ranked.iter().position(|&i| i == target).unwrap();
                let mut raised = scores.clone();
                raised[target] += bump;
                let after = rank_items(&raised, |i| i % 7 == 3).iter().position(|&i| i == target).unwrap();
                proptest::prop_assert!(after <= before);
            }
        }
    }
}
