use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::nn::{gaussian, relu_in_place, xavier_uniform, Linear};
use crate::gradcore::{axpy, dot, sigmoid, softplus, Grads, ParamStore, TensorId, Values};

/// Logits are clamped to this range before the sigmoid cross-entropy.
pub const LOGIT_CLAMP: f64 = 40.0;

/// NeuMF: a GMF branch (element-wise product of embeddings) and an MLP tower
/// over concatenated embeddings, joined by an output weight vector.
///
/// The hidden tap is the concatenation `[gmf ; mlp_top]`, the vector the
/// output layer reads. Its width is `gmf_dim + top_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeumfModel {
    pub gmf_user: TensorId,
    pub gmf_item: TensorId,
    pub mlp_user: TensorId,
    pub mlp_item: TensorId,
    pub tower: Vec<Linear>,
    pub out_weight: TensorId,
    pub out_bias: TensorId,
    pub gmf_dim: usize,
    pub mlp_embed_dim: usize,
    pub top_dim: usize,
    pub num_users: usize,
    pub num_items: usize,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct NeumfTrace {
    pub gmf: Vec<f64>,
    /// `layers[0]` is the concatenated embedding; `layers[l]` the output of
    /// tower layer `l` after ReLU.
    pub layers: Vec<Vec<f64>>,
    pub hidden: Vec<f64>,
    pub logit: f64,
}

impl NeumfModel {
    /// `hidden_width` is split into `top_dim = hidden_width / 2` for the tower
    /// and the remainder for GMF. Tower layers halve their width on the way
    /// up, the NCF convention.
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamStore,
        prefix: &str,
        num_users: usize,
        num_items: usize,
        hidden_width: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden_width < 2 {
            return Err(Error::Config(format!(
                "NeuMF hidden width must be at least 2, got {hidden_width}"
            )));
        }
        if !(1..=4).contains(&layers) {
            return Err(Error::Config(format!("NeuMF layers must be in 1..=4, got {layers}")));
        }
        let top_dim = hidden_width / 2;
        let gmf_dim = hidden_width - top_dim;
        let mlp_embed_dim = top_dim << (layers - 1);

        let emb = |params: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R| {
            params.add(format!("{prefix}.{name}"), &[rows, cols], gaussian(rng, 0.01, rows * cols))
        };
        let gmf_user = emb(params, "gmf_user", num_users, gmf_dim, rng)?;
        let gmf_item = emb(params, "gmf_item", num_items, gmf_dim, rng)?;
        let mlp_user = emb(params, "mlp_user", num_users, mlp_embed_dim, rng)?;
        let mlp_item = emb(params, "mlp_item", num_items, mlp_embed_dim, rng)?;

        let mut tower = Vec::with_capacity(layers);
        let mut width = 2 * mlp_embed_dim;
        for l in 0..layers {
            let out = width / 2;
            tower.push(Linear::new(params, &format!("{prefix}.tower{l}"), width, out, rng)?);
            width = out;
        }
        debug_assert_eq!(width, top_dim);
        let out_weight = params.add(
            format!("{prefix}.out.weight"),
            &[hidden_width],
            xavier_uniform(rng, hidden_width, 1, hidden_width),
        )?;
        let out_bias = params.add(format!("{prefix}.out.bias"), &[1], vec![0.0])?;
        Ok(NeumfModel {
            gmf_user,
            gmf_item,
            mlp_user,
            mlp_item,
            tower,
            out_weight,
            out_bias,
            gmf_dim,
            mlp_embed_dim,
            top_dim,
            num_users,
            num_items,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.gmf_dim + self.top_dim
    }

    pub fn tensors(&self) -> Vec<TensorId> {
        let mut t = vec![self.gmf_user, self.gmf_item, self.mlp_user, self.mlp_item];
        for l in &self.tower {
            t.extend(l.tensors());
        }
        t.push(self.out_weight);
        t.push(self.out_bias);
        t
    }

    pub fn param_count(&self) -> usize {
        (self.num_users + self.num_items) * (self.gmf_dim + self.mlp_embed_dim)
            + self.tower.iter().map(Linear::param_count).sum::<usize>()
            + self.hidden_width()
            + 1
    }

    pub fn forward(&self, v: &Values<'_>, u: usize, i: usize) -> NeumfTrace {
        let mut trace = NeumfTrace::default();
        self.forward_into(v, u, i, &mut trace);
        trace
    }

    pub fn forward_into(&self, v: &Values<'_>, u: usize, i: usize, t: &mut NeumfTrace) {
        let pu = v.row(self.gmf_user, u);
        let qi = v.row(self.gmf_item, i);
        t.gmf.clear();
        t.gmf.extend(pu.iter().zip(qi).map(|(a, b)| a * b));

        t.layers.resize_with(self.tower.len() + 1, Vec::new);
        let input = &mut t.layers[0];
        input.clear();
        input.extend_from_slice(v.row(self.mlp_user, u));
        input.extend_from_slice(v.row(self.mlp_item, i));
        for (l, lin) in self.tower.iter().enumerate() {
            let (done, rest) = t.layers.split_at_mut(l + 1);
            let out = &mut rest[0];
            out.resize(lin.out_dim, 0.0);
            lin.forward(v, &done[l], out);
            relu_in_place(out);
        }

        t.hidden.clear();
        t.hidden.extend_from_slice(&t.gmf);
        t.hidden.extend_from_slice(t.layers.last().expect("at least the input"));
        t.logit = dot(v.get(self.out_weight), &t.hidden) + v.get(self.out_bias)[0];
    }

    pub fn score(&self, v: &Values<'_>, u: usize, i: usize) -> f64 {
        self.forward(v, u, i).logit
    }

    /// Backpropagate `dlogit` (through the output layer) plus an optional
    /// gradient arriving directly at the hidden tap.
    pub fn backward(
        &self,
        v: &Values<'_>,
        g: &mut Grads<'_>,
        u: usize,
        i: usize,
        trace: &NeumfTrace,
        dlogit: f64,
        dhidden: Option<&[f64]>,
    ) {
        let w = v.get(self.out_weight);
        let mut dh: Vec<f64> = w.iter().map(|x| x * dlogit).collect();
        if let Some(extra) = dhidden {
            axpy(1.0, extra, &mut dh);
        }
        if dlogit != 0.0 {
            axpy(dlogit, &trace.hidden, g.get_mut(self.out_weight));
            g.get_mut(self.out_bias)[0] += dlogit;
        }

        let (dgmf, dtop) = dh.split_at(self.gmf_dim);
        let pu = v.row(self.gmf_user, u);
        let qi = v.row(self.gmf_item, i);
        {
            let gu = g.row_mut(self.gmf_user, u);
            for k in 0..self.gmf_dim {
                gu[k] += dgmf[k] * qi[k];
            }
        }
        {
            let gi = g.row_mut(self.gmf_item, i);
            for k in 0..self.gmf_dim {
                gi[k] += dgmf[k] * pu[k];
            }
        }

        let mut dout = dtop.to_vec();
        for (l, lin) in self.tower.iter().enumerate().rev() {
            let out = &trace.layers[l + 1];
            for (d, &o) in dout.iter_mut().zip(out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut dx = vec![0.0; lin.in_dim];
            lin.backward(v, g, &trace.layers[l], &dout, Some(&mut dx));
            dout = dx;
        }
        let (du, di) = dout.split_at(self.mlp_embed_dim);
        axpy(1.0, du, g.row_mut(self.mlp_user, u));
        axpy(1.0, di, g.row_mut(self.mlp_item, i));
    }

    fn embedding_l2(&self, v: &Values<'_>, g: &mut Grads<'_>, u: usize, i: usize, scale: f64) -> f64 {
        let mut sq = 0.0;
        for (t, r) in [
            (self.gmf_user, u),
            (self.mlp_user, u),
            (self.gmf_item, i),
            (self.mlp_item, i),
        ] {
            let row = v.row(t, r);
            sq += dot(row, row);
            if scale != 0.0 {
                axpy(2.0 * scale, row, g.row_mut(t, r));
            }
        }
        sq
    }

    fn dense_l2(&self, v: &Values<'_>, g: &mut Grads<'_>, scale: f64) -> f64 {
        let mut sq = 0.0;
        for t in self.tower.iter().map(|l| l.weight).chain([self.out_weight]) {
            let w = v.get(t);
            sq += dot(w, w);
            if scale != 0.0 {
                axpy(2.0 * scale, w, g.get_mut(t));
            }
        }
        sq
    }
}

/// Mean sigmoid cross-entropy over `(u, i, label)` pairs, logits clamped to
/// `±LOGIT_CLAMP`, plus `l2` times the mean squared norm of the touched
/// embedding rows and `l2` times the squared norm of the dense weights.
pub fn neumf_bce_loss(
    model: &NeumfModel,
    params: &mut ParamStore,
    pairs: &[(usize, usize, bool)],
    l2: f64,
    weight: f64,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let (v, mut g) = params.split();
    let mut total = 0.0;
    let mut trace = NeumfTrace::default();
    for &(u, i, label) in pairs {
        model.forward_into(&v, u, i, &mut trace);
        let z = trace.logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let y = if label { 1.0 } else { 0.0 };
        total += if label { softplus(-z) } else { softplus(z) };
        let dz = if trace.logit.abs() < LOGIT_CLAMP {
            (sigmoid(z) - y) * weight / n
        } else {
            0.0
        };
        model.backward(&v, &mut g, u, i, &trace, dz, None);
        total += l2 * model.embedding_l2(&v, &mut g, u, i, l2 * weight / n);
    }
    total / n + l2 * model.dense_l2(&v, &mut g, l2 * weight)
}
