//! Open-set episode construction.
//!
//! Few-shot episodes draw N seen classes with K support and Q query samples
//! each, plus M unseen classes contributing open queries. Large-scale
//! episodes partition the full training class set into M unseen and the
//! rest seen, with balanced per-class query batches and no support set
//! (prototypes are learned parameters in that regime).
//!
//! The sampler is pure given (dataset, config, rng), so episodes built from
//! per-index generators are independent of execution order across workers.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{draw_distinct, shuffled_indices};

/// Episode shape: N-way K-shot with Q closed queries per seen class and
/// Q_o open queries per each of M unseen classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub open_way: usize,
    pub open_query_per_class: usize,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Invalid(format!("way must be >= 2, got {}", self.way)));
        }
        if self.shot < 1 {
            return Err(Error::Invalid("shot must be >= 1".into()));
        }
        if self.query_per_class < 1 {
            return Err(Error::Invalid("query_per_class must be >= 1".into()));
        }
        if self.open_way > 0 && self.open_query_per_class < 1 {
            return Err(Error::Invalid(
                "open_query_per_class must be >= 1 when open_way > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled task. Episode-local labels index into `seen_classes`; open
/// queries carry no labels (they are all "unseen").
#[derive(Debug, Clone)]
pub struct Episode {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    /// `[N*K, d]`; empty (0 rows) in large-scale episodes.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `[N*Q, d]`
    pub closed_query: Tensor,
    pub closed_labels: Vec<usize>,
    /// `[M*Q_o, d]`, possibly 0 rows.
    pub open_query: Tensor,
}

impl Episode {
    pub fn has_open(&self) -> bool {
        self.open_query.dims2().map(|(r, _)| r > 0).unwrap_or(false)
    }
}

/// Sample a few-shot open-set episode from `pool` classes.
///
/// N+M distinct classes are drawn in one pass and split, so seen and unseen
/// sets are disjoint by construction. Support and closed-query samples of a
/// seen class come from one draw without replacement, so they never overlap.
pub fn sample_fewshot_episode<R: Rng>(
    dataset: &LabeledDataset,
    pool: &[usize],
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    let need = cfg.way + cfg.open_way;
    if pool.len() < need {
        return Err(Error::Episode(format!(
            "pool has {} classes, need way + open_way = {need}",
            pool.len()
        )));
    }
    let drawn = draw_distinct(pool, need, rng);
    let seen_classes = drawn[..cfg.way].to_vec();
    let unseen_classes = drawn[cfg.way..].to_vec();

    let d = dataset.dim();
    let mut support_rows = Vec::with_capacity(cfg.way * cfg.shot);
    let mut support_labels = Vec::with_capacity(cfg.way * cfg.shot);
    let mut closed_rows = Vec::with_capacity(cfg.way * cfg.query_per_class);
    let mut closed_labels = Vec::with_capacity(cfg.way * cfg.query_per_class);
    for (local, &class) in seen_classes.iter().enumerate() {
        let samples = dataset.class_samples(class);
        let need_s = cfg.shot + cfg.query_per_class;
        if samples.len() < need_s {
            return Err(Error::Episode(format!(
                "class {class} has {} samples, need shot + query = {need_s}",
                samples.len()
            )));
        }
        let order = shuffled_indices(samples.len(), rng);
        for &o in &order[..cfg.shot] {
            support_rows.push(samples[o]);
            support_labels.push(local);
        }
        for &o in &order[cfg.shot..need_s] {
            closed_rows.push(samples[o]);
            closed_labels.push(local);
        }
    }

    let mut open_rows = Vec::with_capacity(cfg.open_way * cfg.open_query_per_class);
    for &class in &unseen_classes {
        let samples = dataset.class_samples(class);
        if samples.len() < cfg.open_query_per_class {
            return Err(Error::Episode(format!(
                "class {class} has {} samples, need open_query = {}",
                samples.len(),
                cfg.open_query_per_class
            )));
        }
        let order = shuffled_indices(samples.len(), rng);
        for &o in &order[..cfg.open_query_per_class] {
            open_rows.push(samples[o]);
        }
    }

    Ok(Episode {
        seen_classes,
        unseen_classes,
        support: dataset.gather(&support_rows),
        support_labels,
        closed_query: dataset.gather(&closed_rows),
        closed_labels,
        open_query: if open_rows.is_empty() {
            Tensor::matrix(0, d, Vec::new()).expect("empty matrix")
        } else {
            dataset.gather(&open_rows)
        },
    })
}

/// Sample a large-scale episode: M classes out of `pool` become unseen, the
/// rest stay seen; every class contributes a balanced batch of queries and
/// the support set is empty.
pub fn sample_largescale_batch<R: Rng>(
    dataset: &LabeledDataset,
    pool: &[usize],
    open_way: usize,
    batch_per_class: usize,
    rng: &mut R,
) -> Result<Episode> {
    if open_way < 1 {
        return Err(Error::Invalid("large-scale episodes need open_way >= 1".into()));
    }
    if open_way >= pool.len() {
        return Err(Error::Episode(format!(
            "open_way {open_way} must be smaller than the {} pool classes",
            pool.len()
        )));
    }
    if batch_per_class < 1 {
        return Err(Error::Invalid("batch_per_class must be >= 1".into()));
    }
    let order = draw_distinct(pool, pool.len(), rng);
    let unseen_classes = order[..open_way].to_vec();
    let seen_classes = order[open_way..].to_vec();

    let d = dataset.dim();
    let draw_batch = |class: usize, rng: &mut R| -> Result<Vec<usize>> {
        let samples = dataset.class_samples(class);
        if samples.len() < batch_per_class {
            return Err(Error::Episode(format!(
                "class {class} has {} samples, need batch_per_class = {batch_per_class}",
                samples.len()
            )));
        }
        let order = shuffled_indices(samples.len(), rng);
        Ok(order[..batch_per_class].iter().map(|&o| samples[o]).collect())
    };

    let mut closed_rows = Vec::new();
    let mut closed_labels = Vec::new();
    for (local, &class) in seen_classes.iter().enumerate() {
        for r in draw_batch(class, rng)? {
            closed_rows.push(r);
            closed_labels.push(local);
        }
    }
    let mut open_rows = Vec::new();
    for &class in &unseen_classes {
        open_rows.extend(draw_batch(class, rng)?);
    }

    Ok(Episode {
        seen_classes,
        unseen_classes,
        support: Tensor::matrix(0, d, Vec::new()).expect("empty matrix"),
        support_labels: Vec::new(),
        closed_query: dataset.gather(&closed_rows),
        closed_labels,
        open_query: dataset.gather(&open_rows),
    })
}
