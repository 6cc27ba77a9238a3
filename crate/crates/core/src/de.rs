//! Distillation experts: reconstruct the frozen teacher's last hidden
//! representation from the student's through a bank of small expert networks.
//!
//! A selection network reads the *teacher* representation and produces
//! specialization scores `α = softmax(S(h_t))` over the experts. During
//! training one expert is picked per entity with a Gumbel-Softmax relaxed
//! sample whose temperature is annealed geometrically towards zero, so the
//! selection hardens into a one-hot choice. The loss is the Euclidean distance
//! between `h_t` and the selected expert's reconstruction.

use std::borrow::Cow;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::nn::Linear;
use crate::gradcore::{axpy, dot, log_sum_exp, softmax_in_place, Grads, ParamStore, TensorId, Values};
use crate::models::{Model, TapLayout};
use crate::par::Execution;

/// How expert outputs are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectionMode {
    /// Relaxed one-hot sample `softmax((log α + g) / τ)`.
    Gumbel,
    /// Soft attention `s = α`.
    Attention,
    /// Uniform average `s = 1/M`.
    Average,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" | "selection" => Ok(SelectionMode::Gumbel),
            "attention" => Ok(SelectionMode::Attention),
            "average" | "one_expert_large" => Ok(SelectionMode::Average),
            other => Err(Error::Config(format!("unknown expert selection mode `{other}`"))),
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Gumbel => "gumbel",
            SelectionMode::Attention => "attention",
            SelectionMode::Average => "average",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeConfig {
    pub num_experts: usize,
    pub mode: SelectionMode,
    /// Use `‖·‖²` instead of `‖·‖`.
    pub squared: bool,
    pub lambda: f64,
    pub tau0: f64,
    pub tau_end: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            num_experts: 5,
            mode: SelectionMode::Gumbel,
            squared: false,
            lambda: 1e-2,
            tau0: 1.0,
            tau_end: 1e-10,
        }
    }
}

/// Geometric decay `τ(p) = τ0 · (τP / τ0)^(p / P)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_end: f64,
    pub total_epochs: usize,
}

impl TemperatureSchedule {
    pub fn new(tau0: f64, tau_end: f64, total_epochs: usize) -> Self {
        TemperatureSchedule {
            tau0,
            tau_end,
            total_epochs,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        anneal(self, epoch)
    }
}

pub fn anneal(schedule: &TemperatureSchedule, epoch: usize) -> f64 {
    let p_total = schedule.total_epochs;
    if epoch > p_total {
        warn!("epoch {epoch} beyond schedule length {p_total}; using the final temperature");
        return schedule.tau_end;
    }
    if epoch == 0 {
        return schedule.tau0;
    }
    if epoch == p_total {
        return schedule.tau_end;
    }
    schedule.tau0 * (schedule.tau_end / schedule.tau0).powf(epoch as f64 / p_total as f64)
}

/// One standard Gumbel draw, `-ln(-ln r)` with `r ~ Uniform(0, 1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let r: f64 = rng.random();
        if r > 0.0 {
            return -(-r.ln()).ln();
        }
    }
}

/// Relaxed one-hot `s_m = softmax((log α_m + g_m) / τ)`, computed from
/// unnormalized `logits` (`log α = logits - lse(logits)`).
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    let mut s: Vec<f64> = logits.iter().zip(noise).map(|(e, g)| ((e - lse) + g) / tau).collect();
    softmax_in_place(&mut s);
    s
}

/// Result of routing one entity through the selection network.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// Selection-network output before the softmax.
    pub logits: Vec<f64>,
    /// Normalized specialization scores.
    pub alpha: Vec<f64>,
    /// Mixing weights actually applied to the experts.
    pub weights: Vec<f64>,
    /// Gumbel noise used (zeros unless the mode is `Gumbel`).
    pub noise: Vec<f64>,
}

/// Two-layer expert `d_s → round((d_s + d_t) / 2) → d_t` with ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankSide {
    User,
    Item,
    Joint,
}

impl BankSide {
    pub fn as_str(self) -> &'static str {
        match self {
            BankSide::User => "user",
            BankSide::Item => "item",
            BankSide::Joint => "pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub side: BankSide,
    pub experts: Vec<Expert>,
    pub selector: Linear,
    pub student_width: usize,
    pub teacher_width: usize,
    pub mode: SelectionMode,
    pub squared: bool,
}

/// Scratch buffers reused across entities.
#[derive(Debug, Default)]
struct Scratch {
    hidden: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl ExpertBank {
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamStore,
        prefix: &str,
        side: BankSide,
        student_width: usize,
        teacher_width: usize,
        cfg: &DeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.num_experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        let hidden_width = ((student_width + teacher_width) as f64 / 2.0).round() as usize;
        let experts = (0..cfg.num_experts)
            .map(|m| {
                Ok(Expert {
                    hidden: Linear::new(params, &format!("{prefix}.expert{m}.l0"), student_width, hidden_width, rng)?,
                    output: Linear::new(params, &format!("{prefix}.expert{m}.l1"), hidden_width, teacher_width, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let selector = Linear::new(params, &format!("{prefix}.selector"), teacher_width, cfg.num_experts, rng)?;
        Ok(ExpertBank {
            side,
            experts,
            selector,
            student_width,
            teacher_width,
            mode: cfg.mode,
            squared: cfg.squared,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn hidden_width(&self) -> usize {
        self.experts[0].hidden.out_dim
    }

    pub fn tensors(&self) -> Vec<TensorId> {
        let mut t: Vec<TensorId> = self
            .experts
            .iter()
            .flat_map(|e| e.hidden.tensors().into_iter().chain(e.output.tensors()))
            .collect();
        t.extend(self.selector.tensors());
        t
    }

    /// Selection logits and `α` for a teacher representation.
    pub fn specialization(&self, v: &Values<'_>, h_t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut logits = vec![0.0; self.num_experts()];
        self.selector.forward(v, h_t, &mut logits);
        let mut alpha = logits.clone();
        softmax_in_place(&mut alpha);
        (logits, alpha)
    }

    fn check_widths(&self, h_t: &[f64], h_s: &[f64]) -> Result<()> {
        if h_t.len() != self.teacher_width || h_s.len() != self.student_width {
            return Err(Error::Config(format!(
                "tap widths ({}, {}) do not match expert bank ({}, {})",
                h_t.len(),
                h_s.len(),
                self.teacher_width,
                self.student_width
            )));
        }
        Ok(())
    }

    /// Route `h_t` through the selector and mix the expert reconstructions of
    /// `h_s`. `noise` is only read in `Gumbel` mode.
    pub fn select(&self, v: &Values<'_>, h_t: &[f64], tau: f64, noise: Vec<f64>) -> Result<SelectionOutcome> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let (logits, alpha) = self.specialization(v, h_t);
        let m = self.num_experts();
        let (weights, noise) = match self.mode {
            SelectionMode::Gumbel => (gumbel_softmax(&logits, &noise, tau), noise),
            SelectionMode::Attention => (alpha.clone(), vec![0.0; m]),
            SelectionMode::Average => (vec![1.0 / m as f64; m], vec![0.0; m]),
        };
        Ok(SelectionOutcome {
            logits,
            alpha,
            weights,
            noise,
        })
    }

    fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.mode {
            SelectionMode::Gumbel => (0..self.num_experts()).map(|_| gumbel_noise(rng)).collect(),
            _ => vec![0.0; self.num_experts()],
        }
    }

    fn expert_forward(&self, v: &Values<'_>, m: usize, h_s: &[f64], hidden: &mut Vec<f64>, out: &mut Vec<f64>) {
        let e = &self.experts[m];
        hidden.resize(e.hidden.out_dim, 0.0);
        e.hidden.forward(v, h_s, hidden);
        crate::gradcore::nn::relu_in_place(hidden);
        out.resize(self.teacher_width, 0.0);
        e.output.forward(v, hidden, out);
    }

    /// Sample a selection and return the reconstruction of `h_t` from `h_s`.
    pub fn select_and_reconstruct<R: Rng + ?Sized>(
        &self,
        v: &Values<'_>,
        h_t: &[f64],
        h_s: &[f64],
        tau: f64,
        rng: &mut R,
    ) -> Result<(Vec<f64>, SelectionOutcome)> {
        self.check_widths(h_t, h_s)?;
        let noise = self.draw_noise(rng);
        let outcome = self.select(v, h_t, tau, noise)?;
        let mut recon = vec![0.0; self.teacher_width];
        let (mut hidden, mut out) = (Vec::new(), Vec::new());
        for (m, &s) in outcome.weights.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            self.expert_forward(v, m, h_s, &mut hidden, &mut out);
            axpy(s, &out, &mut recon);
        }
        Ok((recon, outcome))
    }

    /// Loss of one entity; adds `scale`-weighted gradients for the experts and
    /// the selector to `g` and the gradient w.r.t. `h_s` to `dh_s`. Nothing
    /// flows to `h_t`.
    fn entity_loss(
        &self,
        v: &Values<'_>,
        g: &mut Grads<'_>,
        h_t: &[f64],
        h_s: &[f64],
        outcome: &SelectionOutcome,
        tau: f64,
        scale: f64,
        dh_s: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        let m_count = self.num_experts();
        scratch.hidden.resize_with(m_count, Vec::new);
        scratch.outputs.resize_with(m_count, Vec::new);
        let s = &outcome.weights;

        let mut residual = h_t.to_vec();
        for m in 0..m_count {
            if s[m] == 0.0 {
                continue;
            }
            let (hidden, out) = (&mut scratch.hidden[m], &mut scratch.outputs[m]);
            self.expert_forward(v, m, h_s, hidden, out);
            axpy(-s[m], out, &mut residual);
        }
        let sq = dot(&residual, &residual);
        let norm = sq.sqrt();
        let loss = if self.squared { sq } else { norm };

        // ∂loss/∂reconstruction
        let gy_scale = if self.squared {
            -2.0 * scale
        } else if norm > 0.0 {
            -scale / norm
        } else {
            0.0
        };
        if gy_scale == 0.0 {
            return loss;
        }
        let gy: Vec<f64> = residual.iter().map(|r| r * gy_scale).collect();

        let mut ds = vec![0.0; m_count];
        for m in 0..m_count {
            if s[m] == 0.0 {
                continue;
            }
            let e = &self.experts[m];
            let out = &scratch.outputs[m];
            let hidden = &scratch.hidden[m];
            ds[m] = dot(out, &gy);
            let dout: Vec<f64> = gy.iter().map(|x| x * s[m]).collect();
            let mut dhidden = vec![0.0; e.hidden.out_dim];
            e.output.backward(v, g, hidden, &dout, Some(&mut dhidden));
            for (d, &a) in dhidden.iter_mut().zip(hidden.iter()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            e.hidden.backward(v, g, h_s, &dhidden, Some(dh_s));
        }

        let dlogits: Option<Vec<f64>> = match self.mode {
            SelectionMode::Gumbel => {
                let inner = dot(s, &ds);
                Some(s.iter().zip(&ds).map(|(sm, dm)| sm * (dm - inner) / tau).collect())
            }
            SelectionMode::Attention => {
                let inner = dot(s, &ds);
                Some(s.iter().zip(&ds).map(|(sm, dm)| sm * (dm - inner)).collect())
            }
            SelectionMode::Average => None,
        };
        if let Some(de) = dlogits {
            self.selector.backward(v, g, h_t, &de, None);
        }
        loss
    }
}

/// Source of the frozen teacher's hidden representations.
pub trait TeacherTaps: Sync {
    fn tap_layout(&self) -> TapLayout;
    fn user_tap(&self, user: usize) -> Cow<'_, [f64]>;
    fn item_tap(&self, item: usize) -> Cow<'_, [f64]>;
    fn joint_tap(&self, user: usize, item: usize) -> Cow<'_, [f64]>;
}

/// Entities of one minibatch to distill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeBatch {
    /// Distinct users and items (BPR).
    Separate { users: Vec<usize>, items: Vec<usize> },
    /// `(user, item)` pairs (NeuMF).
    Joint { pairs: Vec<(usize, usize)> },
}

impl DeBatch {
    pub fn len(&self) -> usize {
        match self {
            DeBatch::Separate { users, items } => users.len() + items.len(),
            DeBatch::Joint { pairs } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The expert banks attached to one student: a user-side and an item-side
/// bank for separately encoded models, one joint bank otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum DistillationExperts {
    Separate { user: ExpertBank, item: ExpertBank },
    Joint { bank: ExpertBank },
}

impl DistillationExperts {
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamStore,
        student: TapLayout,
        teacher: TapLayout,
        cfg: &DeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (ds, dt) = (student.width(), teacher.width());
        match (student, teacher) {
            (TapLayout::Separate { .. }, TapLayout::Separate { .. }) => Ok(DistillationExperts::Separate {
                user: ExpertBank::build(params, "de.user", BankSide::User, ds, dt, cfg, rng)?,
                item: ExpertBank::build(params, "de.item", BankSide::Item, ds, dt, cfg, rng)?,
            }),
            (TapLayout::Joint { .. }, TapLayout::Joint { .. }) => Ok(DistillationExperts::Joint {
                bank: ExpertBank::build(params, "de.joint", BankSide::Joint, ds, dt, cfg, rng)?,
            }),
            _ => Err(Error::Config("teacher and student tap layouts differ".into())),
        }
    }

    pub fn banks(&self) -> Vec<&ExpertBank> {
        match self {
            DistillationExperts::Separate { user, item } => vec![user, item],
            DistillationExperts::Joint { bank } => vec![bank],
        }
    }

    pub fn tensors(&self) -> Vec<TensorId> {
        self.banks().into_iter().flat_map(ExpertBank::tensors).collect()
    }

    /// Mean over the batch entities of `‖h_t − Σ_m s_m E_m(h_s)‖₂`.
    ///
    /// Gradients times `scale` reach the student (through its taps), the
    /// experts and the selection networks. Gumbel noise is drawn fresh per
    /// entity from `rng`, in batch order: users first, then items.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<R: Rng + ?Sized>(
        &self,
        student: &Model,
        params: &mut ParamStore,
        teacher: &dyn TeacherTaps,
        batch: &DeBatch,
        tau: f64,
        rng: &mut R,
        scale: f64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let n = batch.len() as f64;
        let entity_scale = scale / n;
        let mut scratch = Scratch::default();
        let (v, mut g) = params.split();
        let mut total = 0.0;
        match (self, batch, student) {
            (DistillationExperts::Separate { user, item }, DeBatch::Separate { users, items }, Model::Bpr(m)) => {
                let sides = [(user, users, m.user), (item, items, m.item)];
                for (bank, ids, table) in sides {
                    for &id in ids {
                        let h_t = match bank.side {
                            BankSide::User => teacher.user_tap(id),
                            _ => teacher.item_tap(id),
                        };
                        let h_s = v.row(table, id);
                        bank.check_widths(&h_t, h_s)?;
                        let outcome = bank.select(&v, &h_t, tau, bank.draw_noise(rng))?;
                        let mut dh = vec![0.0; bank.student_width];
                        total += bank.entity_loss(&v, &mut g, &h_t, h_s, &outcome, tau, entity_scale, &mut dh, &mut scratch);
                        axpy(1.0, &dh, g.row_mut(table, id));
                    }
                }
            }
            (DistillationExperts::Joint { bank }, DeBatch::Joint { pairs }, Model::NeuMf(m)) => {
                for &(u, i) in pairs {
                    let h_t = teacher.joint_tap(u, i);
                    let trace = m.forward(&v, u, i);
                    bank.check_widths(&h_t, &trace.hidden)?;
                    let outcome = bank.select(&v, &h_t, tau, bank.draw_noise(rng))?;
                    let mut dh = vec![0.0; bank.student_width];
                    total += bank.entity_loss(&v, &mut g, &h_t, &trace.hidden, &outcome, tau, entity_scale, &mut dh, &mut scratch);
                    m.backward(&v, &mut g, u, i, &trace, 0.0, Some(&dh));
                }
            }
            _ => return Err(Error::Config("expert banks do not match the student or batch layout".into())),
        }
        Ok(total / n)
    }
}

/// One row of the expert-assignment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAssignment {
    pub entity_type: &'static str,
    pub entity_id: String,
    pub expert: usize,
    pub alpha: Vec<f64>,
}

fn assign(bank: &ExpertBank, v: &Values<'_>, h_t: &[f64], entity_id: String) -> ExpertAssignment {
    let (_, alpha) = bank.specialization(v, h_t);
    let expert = alpha
        .iter()
        .enumerate()
        .fold(0, |best, (m, &a)| if a > alpha[best] { m } else { best });
    ExpertAssignment {
        entity_type: bank.side.as_str(),
        entity_id,
        expert,
        alpha,
    }
}

/// Deterministic expert assignment (`argmax α`, no noise) for every user and
/// item, or for every listed pair when the bank is joint.
pub fn export_expert_assignments(
    experts: &DistillationExperts,
    params: &ParamStore,
    teacher: &dyn TeacherTaps,
    num_users: usize,
    num_items: usize,
    pairs: &[(usize, usize)],
    exec: Execution,
) -> Vec<ExpertAssignment> {
    let v = params.values();
    match experts {
        DistillationExperts::Separate { user, item } => {
            let mut rows = exec.map(num_users, |u| assign(user, &v, &teacher.user_tap(u), u.to_string()));
            rows.extend(exec.map(num_items, |i| assign(item, &v, &teacher.item_tap(i), i.to_string())));
            rows
        }
        DistillationExperts::Joint { bank } => exec.map(pairs.len(), |k| {
            let (u, i) = pairs[k];
            assign(bank, &v, &teacher.joint_tap(u, i), format!("{u}:{i}"))
        }),
    }
}

/// CSV with header `entity_type,entity_id,expert,alpha_0..alpha_{M-1}`.
pub fn write_assignments_csv<W: Write>(rows: &[ExpertAssignment], mut out: W) -> std::io::Result<()> {
    let m = rows.first().map_or(0, |r| r.alpha.len());
    let mut header = String::from("entity_type,entity_id,expert");
    for k in 0..m {
        header.push_str(&format!(",alpha_{k}"));
    }
    writeln!(out, "{header}")?;
    for r in rows {
        write!(out, "{},{},{}", r.entity_type, r.entity_id, r.expert)?;
        for a in &r.alpha {
            write!(out, ",{a:.9}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
