use rand::Rng;

use crate::error::Result;
use crate::gradcore::nn::gaussian;
use crate::gradcore::{axpy, dot, softplus, sigmoid, Grads, ParamStore, TensorId, Values};

/// Matrix factorization: `score(u, i) = U[u] · V[i]`. The last hidden layer
/// is the embedding itself, so the user tap is `U[u]` and the item tap `V[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BprModel {
    pub user: TensorId,
    pub item: TensorId,
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
}

impl BprModel {
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamStore,
        prefix: &str,
        num_users: usize,
        num_items: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let user = params.add(format!("{prefix}.user"), &[num_users, dim], gaussian(rng, 0.01, num_users * dim))?;
        let item = params.add(format!("{prefix}.item"), &[num_items, dim], gaussian(rng, 0.01, num_items * dim))?;
        Ok(BprModel {
            user,
            item,
            dim,
            num_users,
            num_items,
        })
    }

    pub fn tensors(&self) -> Vec<TensorId> {
        vec![self.user, self.item]
    }

    pub fn param_count(&self) -> usize {
        (self.num_users + self.num_items) * self.dim
    }

    pub fn score(&self, v: &Values<'_>, u: usize, i: usize) -> f64 {
        dot(v.row(self.user, u), v.row(self.item, i))
    }

    pub fn score_all(&self, v: &Values<'_>, u: usize, out: &mut [f64]) {
        let pu = v.row(self.user, u);
        for (i, s) in out.iter_mut().enumerate() {
            *s = dot(pu, v.row(self.item, i));
        }
    }

    pub fn accumulate_score(&self, v: &Values<'_>, g: &mut Grads<'_>, u: usize, i: usize, dscore: f64) {
        if dscore == 0.0 {
            return;
        }
        axpy(dscore, v.row(self.item, i), g.row_mut(self.user, u));
        axpy(dscore, v.row(self.user, u), g.row_mut(self.item, i));
    }
}

/// Mean over `(u, i⁺, i⁻)` triples of `-ln σ(s(u,i⁺) - s(u,i⁻))` plus
/// `l2 · (‖U[u]‖² + ‖V[i⁺]‖² + ‖V[i⁻]‖²)`. Gradients scaled by `weight`
/// are added to `params`.
pub fn bpr_loss(
    model: &BprModel,
    params: &mut ParamStore,
    triples: &[(usize, usize, usize)],
    l2: f64,
    weight: f64,
) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let n = triples.len() as f64;
    let (v, mut g) = params.split();
    let mut total = 0.0;
    for &(u, i, j) in triples {
        let pu = v.row(model.user, u);
        let qi = v.row(model.item, i);
        let qj = v.row(model.item, j);
        let x = dot(pu, qi) - dot(pu, qj);
        let sq = dot(pu, pu) + dot(qi, qi) + dot(qj, qj);
        total += softplus(-x) + l2 * sq;

        // d/dx -ln σ(x) = -(1 - σ(x)) = -σ(-x)
        let dx = -sigmoid(-x) * weight / n;
        let r = 2.0 * l2 * weight / n;
        let gu = g.row_mut(model.user, u);
        for k in 0..model.dim {
            gu[k] += dx * (qi[k] - qj[k]) + r * pu[k];
        }
        let gi = g.row_mut(model.item, i);
        for k in 0..model.dim {
            gi[k] += dx * pu[k] + r * qi[k];
        }
        let gj = g.row_mut(model.item, j);
        for k in 0..model.dim {
            gj[k] += -dx * pu[k] + r * qj[k];
        }
    }
    total / n
}
