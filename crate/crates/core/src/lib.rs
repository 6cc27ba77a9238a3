//! Knowledge distillation for top-N recommendation from implicit feedback.
//!
//! A large teacher recommender (BPR matrix factorization or NeuMF) is trained
//! first. A compact student of the same family is then trained against the
//! ground-truth interactions plus one or both of:
//!
//! * [`de`]: reconstruction of the teacher's last hidden representation through
//!   a bank of small expert networks, one of which is picked per entity by a
//!   Gumbel-Softmax relaxed selection;
//! * [`rrd`]: a relaxed list-wise likelihood over items sampled from the
//!   teacher's ranking, which keeps the order among "interesting" items and
//!   only pushes "uninteresting" items below them.
//!
//! The ranking-distillation (RD) and collaborative-distillation (CD) arms live
//! in [`kd`] and serve as baselines. [`eval`] implements leave-one-out ranking
//! metrics, early stopping, paired t-tests and a latency benchmark, and
//! [`experiment`] wires everything into seeded training runs with on-disk
//! snapshots.

pub mod data;
pub mod de;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcore;
pub mod kd;
pub mod models;
pub mod par;
pub mod rng;
pub mod rrd;

pub use error::{Error, Result};
