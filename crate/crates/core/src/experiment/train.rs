//! The seeded training loop shared by teachers and students.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::SliceRandom;

use super::config::{ExperimentConfig, Method};
use crate::data::{build_negative_pool_with, sample_one_negative, sample_train_negatives, InteractionDataset, NegativePool};
use crate::de::{DeBatch, DistillationExperts, TemperatureSchedule};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EarlyStopper, Metric, Phase};
use crate::gradcore::{Adam, ParamStore, TensorId};
use crate::kd::{cd_loss, cd_sample, minmax_targets, probability_targets, rd_discrepancy, rd_loss, rd_weights};
use crate::models::{bpr_loss, neumf_bce_loss, student_width, BaseModelKind, Bound, Model, ModelSpec};
use crate::par::Execution;
use crate::rng::{stream_rng, Stream};
use crate::rrd::{resample_epoch, rrd_loss, DistillSample, TeacherSnapshot};

use super::snapshot::{quantize_f32, MODEL_PREFIX};

/// A dataset with its evaluation pool, shared by every run of one seed.
#[derive(Debug, Clone)]
pub struct Session {
    pub ds: InteractionDataset,
    pub pool: NegativePool,
    pub exec: Execution,
}

impl Session {
    pub fn new(ds: InteractionDataset, pool_seed: u64, exec: Execution) -> Self {
        let pool = build_negative_pool_with(&ds, pool_seed, exec);
        Session { ds, pool, exec }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

/// Per-epoch training record. Losses are means over the epoch's minibatches,
/// before any distillation weight is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub base_loss: f64,
    pub de_loss: f64,
    pub rrd_loss: f64,
    /// RD or CD loss.
    pub kd_loss: f64,
    /// Weighted distillation loss over base loss.
    pub kd_ratio: f64,
    pub tau: f64,
    pub val_h5: f64,
}

pub const HISTORY_HEADER: &str = "epoch,base_loss,de_loss,rrd_loss,kd_loss,kd_ratio,tau,val_h5";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.6},{:e},{:.6}",
            self.epoch, self.base_loss, self.de_loss, self.rrd_loss, self.kd_loss, self.kd_ratio, self.tau, self.val_h5
        )
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub role: Role,
    pub method: Method,
    pub model: Model,
    /// Holds the model and, for DE methods, the experts. Values are the
    /// best-epoch values rounded to `f32`.
    pub params: ParamStore,
    pub experts: Option<DistillationExperts>,
    pub width: usize,
    pub teacher_width: usize,
    /// 1-based.
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

fn numerical(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteGradient { tensor, index } => Error::Numerical {
            epoch,
            message: format!("non-finite gradient in `{tensor}` at index {index}"),
        },
        other => other,
    }
}

struct Weights {
    de: f64,
    rrd: f64,
    kd: f64,
}

/// Train a teacher (`role = Teacher`, plain base loss at `teacher_width`) or
/// a student of the configured method against `teacher`.
pub fn train(cfg: &ExperimentConfig, session: &Session, teacher: Option<&TeacherSnapshot>, role: Role) -> Result<Trained> {
    cfg.validate()?;
    let ds = &session.ds;
    let exec = session.exec;
    let method = match role {
        Role::Teacher => Method::None,
        Role::Student => cfg.method,
    };
    if method.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("method {method} needs a teacher snapshot")));
    }
    if let Some(t) = teacher {
        t.verify(ds)?;
        if t.model.kind() != cfg.base_model {
            return Err(Error::Config(format!(
                "teacher is {} but base_model = {}",
                t.model.kind(),
                cfg.base_model
            )));
        }
    }
    let teacher_width = teacher.map_or(cfg.teacher_width, |t| t.model.tap_layout().width());
    let width = match role {
        Role::Teacher => cfg.teacher_width,
        Role::Student => student_width(cfg.phi, teacher_width),
    };
    let spec = ModelSpec {
        kind: cfg.base_model,
        num_users: ds.num_users,
        num_items: ds.num_items,
        width,
        neumf_layers: cfg.neumf_layers,
    };
    let role_tag = match role {
        Role::Teacher => 0,
        Role::Student => 1,
    };
    let mut params = ParamStore::new();
    let model = Model::build(&spec, &mut params, MODEL_PREFIX, &mut stream_rng(cfg.seed, Stream::Init, &[role_tag]))?;
    let experts = if method.uses_de() {
        let t = teacher.expect("checked above");
        Some(DistillationExperts::build(
            &mut params,
            model.tap_layout(),
            t.model.tap_layout(),
            &cfg.de,
            &mut stream_rng(cfg.seed, Stream::ExpertInit, &[]),
        )?)
    } else {
        None
    };
    for k in [method.uses_rrd().then_some(cfg.rrd.k), (method == Method::Rd).then_some(cfg.rd.k), (method == Method::Cd).then_some(cfg.cd.k)]
        .into_iter()
        .flatten()
    {
        teacher.expect("checked above").require_depth(k)?;
    }
    let weights = Weights {
        de: cfg.de.lambda,
        rrd: cfg.rrd.lambda,
        kd: if method == Method::Cd { cfg.cd.lambda } else { cfg.rd.lambda },
    };

    let tracked: Vec<TensorId> = model
        .tensors()
        .into_iter()
        .chain(experts.iter().flat_map(|e| e.tensors()))
        .collect();
    let mut best_values: Vec<Vec<f64>> = tracked.iter().map(|&id| params.value(id).to_vec()).collect();
    let mut adam = Adam::new(cfg.adam());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let schedule = TemperatureSchedule::new(cfg.de.tau0, cfg.de.tau_end, cfg.epochs);
    let pairs = ds.train_pairs();
    let mut history = Vec::new();
    let mut stopped_early = false;

    info!(
        "training {} ({}, method {method}, width {width}, {} parameters)",
        role.as_str(),
        cfg.base_model,
        model.param_count()
    );
    for epoch in 0..cfg.epochs {
        let mut neg_rng = stream_rng(cfg.seed, Stream::TrainNegatives, &[epoch as u64]);
        let mut order: Vec<(usize, usize, usize)> = Vec::with_capacity(pairs.len());
        for &(u, i) in &pairs {
            let j = sample_one_negative(ds, u, &mut neg_rng)?;
            order.push((u, i, j));
        }
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, &[epoch as u64]));

        let tau = schedule.at(epoch);
        let rrd_samples: Vec<DistillSample> = if method.uses_rrd() {
            resample_epoch(teacher.unwrap(), ds, &cfg.rrd, cfg.seed, epoch, exec)?
        } else {
            Vec::new()
        };
        let cd_lists: Vec<(Vec<usize>, Vec<f64>)> = if method == Method::Cd {
            let t = teacher.unwrap();
            let lists = exec.map(ds.num_users, |u| -> Result<(Vec<usize>, Vec<f64>)> {
                let mut rng = stream_rng(cfg.seed, Stream::CdSampling, &[epoch as u64, u as u64]);
                let items = cd_sample(t.ranked(u), cfg.cd.k, cfg.cd.temperature, &mut rng)?;
                let scores: Vec<f64> = items.iter().map(|&i| t.score(u, i)).collect();
                let targets = match cfg.base_model {
                    BaseModelKind::Bpr => minmax_targets(&scores, t.ranked_scores(u)),
                    BaseModelKind::NeuMf => probability_targets(&scores),
                };
                Ok((items, targets))
            });
            lists.into_iter().collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut gumbel_rng = stream_rng(cfg.seed, Stream::Gumbel, &[epoch as u64]);
        let mut rd_rng = stream_rng(cfg.seed, Stream::RdDynamic, &[epoch as u64]);

        let mut sums = [0.0f64; 4];
        let batches = order.chunks(cfg.batch_size);
        let num_batches = batches.len() as f64;
        for batch in batches {
            params.zero_grads();
            let base = match &model {
                Model::Bpr(m) => bpr_loss(m, &mut params, batch, cfg.l2, 1.0),
                Model::NeuMf(m) => {
                    let labeled: Vec<(usize, usize, bool)> =
                        batch.iter().flat_map(|&(u, i, j)| [(u, i, true), (u, j, false)]).collect();
                    neumf_bce_loss(m, &mut params, &labeled, cfg.l2, 1.0)
                }
            };
            let users: Vec<usize> = batch.iter().map(|t| t.0).collect::<BTreeSet<_>>().into_iter().collect();
            let per_user = 1.0 / users.len() as f64;

            let mut de = 0.0;
            if let Some(experts) = &experts {
                let de_batch = match cfg.base_model {
                    BaseModelKind::Bpr => DeBatch::Separate {
                        users: users.clone(),
                        items: batch.iter().flat_map(|t| [t.1, t.2]).collect::<BTreeSet<_>>().into_iter().collect(),
                    },
                    BaseModelKind::NeuMf => DeBatch::Joint {
                        pairs: batch.iter().flat_map(|&(u, i, j)| [(u, i), (u, j)]).collect(),
                    },
                };
                de = experts.loss(&model, &mut params, teacher.unwrap(), &de_batch, tau, &mut gumbel_rng, weights.de)?;
            }
            let mut rrd = 0.0;
            if method.uses_rrd() {
                let samples: Vec<DistillSample> = users.iter().map(|&u| rrd_samples[u].clone()).collect();
                rrd = rrd_loss(&model, &mut params, &samples, cfg.rrd.mode, weights.rrd);
            }
            let mut kd = 0.0;
            if method == Method::Rd {
                let t = teacher.unwrap();
                for &u in &users {
                    let topk = &t.ranked(u)[..cfg.rd.k];
                    let discrepancy = if epoch >= cfg.rd.warmup_epochs {
                        let v = params.values();
                        let sampled = sample_train_negatives(ds, u, cfg.rd.dyn_negatives, &mut rd_rng)?;
                        let sampled_scores: Vec<f64> = sampled.iter().map(|&j| model.score(&v, u, j)).collect();
                        let topk_scores: Vec<f64> = topk.iter().map(|&i| model.score(&v, u, i)).collect();
                        Some(rd_discrepancy(&topk_scores, &sampled_scores))
                    } else {
                        None
                    };
                    let w = rd_weights(&cfg.rd, epoch, discrepancy.as_deref());
                    kd += per_user * rd_loss(&model, &mut params, u, topk, &w, weights.kd * per_user)?;
                }
            } else if method == Method::Cd {
                for &u in &users {
                    let (items, targets) = &cd_lists[u];
                    kd += per_user * cd_loss(&model, &mut params, u, items, targets, weights.kd * per_user);
                }
            }
            if ![base, de, rrd, kd].iter().all(|x| x.is_finite()) {
                return Err(Error::Numerical {
                    epoch: epoch + 1,
                    message: format!("non-finite loss: base {base}, de {de}, rrd {rrd}, kd {kd}"),
                });
            }
            adam.step(&mut params).map_err(|e| numerical(epoch + 1, e))?;
            for (s, x) in sums.iter_mut().zip([base, de, rrd, kd]) {
                *s += x;
            }
        }
        let [base, de, rrd, kd] = sums.map(|s| s / num_batches);
        let weighted = weights.de * de + weights.rrd * rrd + weights.kd * kd;

        let val = evaluate(&Bound::new(&model, &params), ds, &session.pool, Phase::Validation, exec);
        let val_h5 = val.mean(Metric::Hit, 5);
        let log = EpochLog {
            epoch: epoch + 1,
            base_loss: base,
            de_loss: de,
            rrd_loss: rrd,
            kd_loss: kd,
            kd_ratio: if base > 0.0 { weighted / base } else { 0.0 },
            tau,
            val_h5,
        };
        debug!("{}", log.csv_row());
        if (epoch + 1) % 10 == 0 {
            info!(
                "epoch {}: base {:.5} kd/base {:.3} val H@5 {:.4}",
                epoch + 1,
                base,
                log.kd_ratio,
                val_h5
            );
        }
        history.push(log);
        let decision = stopper.observe(epoch + 1, val_h5);
        if decision.improved {
            for (dst, &id) in best_values.iter_mut().zip(&tracked) {
                dst.copy_from_slice(params.value(id));
            }
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    for (src, &id) in best_values.iter().zip(&tracked) {
        params.value_mut(id).copy_from_slice(src);
    }
    quantize_f32(&mut params, &tracked);
    let best_epoch = stopper.best().map_or(0, |b| b.0);
    info!("{} done: best epoch {best_epoch} of {}", role.as_str(), history.len());
    Ok(Trained {
        role,
        method,
        model,
        params,
        experts,
        width,
        teacher_width,
        best_epoch,
        history,
        stopped_early,
    })
}
