//! Adam with milestone learning-rate decay, and the episodic training loop
//! for both recognition regimes.
//!
//! One episode per gradient step. The step uses the query-set loss only;
//! support samples influence it through the estimated prototypes and
//! precisions. A non-finite loss aborts the run naming the episode; a
//! non-finite gradient skips the step, leaves parameters untouched, and
//! logs an incident.

use std::time::Instant;

use crate::autodiff::{Tape, Tensor};
use crate::config::{Mode, TrainConfig};
use crate::data::{ClassSplit, LabeledDataset};
use crate::episode::{sample_fewshot_episode, sample_largescale_batch};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossBreakdown};
use crate::model::{
    forward_fewshot, forward_largescale, DistanceHead, EmbeddingNet, ModelParams, PrecSource,
    PrecisionNet, ProtoSource,
};
use crate::report::ProgressRecord;
use crate::rng::derive_rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor, in
/// `ModelParams::named_tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new_for(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adam update over `params` (matched positionally with the state).
/// If any gradient entry is non-finite the step is rejected and nothing,
/// including the optimizer state, changes.
pub fn adam_step(params: &mut [(String, &mut Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "adam_step: {} parameters but state tracks {}",
            params.len(),
            state.m.len()
        )));
    }
    for (name, t) in params.iter() {
        match t.grad() {
            None => {
                return Err(Error::Invalid(format!("adam_step: parameter {name} has no gradient")))
            }
            Some(g) => {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let g = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = tensor.data_mut();
        for e in 0..g.len() {
            m[e] = ADAM_BETA1 * m[e] + (1.0 - ADAM_BETA1) * g[e];
            v[e] = ADAM_BETA2 * v[e] + (1.0 - ADAM_BETA2) * g[e] * g[e];
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            data[e] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// A no-op when the norm is already within the cap or `max_norm` is 0.
pub fn clip_grad_norm(params: &mut [(String, &mut Tensor)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = params
        .iter()
        .flat_map(|(_, t)| t.grad().into_iter().flatten())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * (scale - 1.0)).collect();
                t.accumulate_grad(&scaled);
            }
        }
    }
}

/// Milestone decay: the base rate is multiplied by `factor` at each
/// milestone episode (inclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub milestones: Vec<u64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(milestones: Vec<u64>, factor: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "milestones must be strictly increasing, got {milestones:?}"
            )));
        }
        Ok(LrSchedule { milestones, factor })
    }

    pub fn lr_at(&self, base_lr: f64, episode: u64) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= episode).count();
        base_lr * self.factor.powi(hits as i32)
    }
}

/// Rolling mean of the total loss, checkpointed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        RunningStats { count: 0, mean: 0.0 }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }
}

impl Default for RunningStats {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything needed to continue training from an exact point.
#[derive(Debug, Clone)]
pub struct TrainLoopState {
    /// Episodes completed so far; also the next episode index.
    pub episode: u64,
    pub params: ModelParams,
    pub adam: AdamState,
    pub loss_stats: RunningStats,
}

/// Callbacks the training loop reports through. All methods default to
/// no-ops so tests can observe only what they need.
pub trait TrainObserver {
    fn on_progress(&mut self, _record: &ProgressRecord) {}
    /// Called every `checkpoint_every` episodes with the current state.
    fn on_checkpoint(&mut self, _state: &TrainLoopState) -> Result<()> {
        Ok(())
    }
    fn on_incident(&mut self, _episode: u64, _message: &str) {}
}

/// A no-op observer.
pub struct SilentObserver;

impl TrainObserver for SilentObserver {}

/// Initialize model parameters for a config. Embedding and precision nets
/// get their own derived init streams; large-scale heads size their tables
/// to the training classes.
pub fn init_params(cfg: &TrainConfig, d_in: usize, train_classes: &[usize]) -> Result<ModelParams> {
    let mut sizes = vec![d_in];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(cfg.embed_dim);

    let mut f_rng = derive_rng(cfg.seed, "init-embed", 0);
    let embed = EmbeddingNet::new(&sizes, &mut f_rng)?;

    let prec_source = cfg.prec_source()?;
    let precision = if prec_source == PrecSource::Estimated {
        let mut g_rng = derive_rng(cfg.seed, "init-precision", 0);
        Some(PrecisionNet::new(&sizes, cfg.embed_dim, &mut g_rng)?)
    } else {
        None
    };

    let head = match cfg.proto_source() {
        ProtoSource::Estimated => DistanceHead::fewshot(cfg.head),
        ProtoSource::Learned => {
            let mut h_rng = derive_rng(cfg.seed, "init-head", 0);
            DistanceHead::largescale(cfg.head, train_classes.to_vec(), cfg.embed_dim, &mut h_rng)?
        }
    };
    let params = ModelParams { embed, precision, head };
    params.head.validate()?;
    Ok(params)
}

/// Run one episode's forward/backward and return the loss breakdown.
/// Gradients are accumulated into the parameter tensors.
pub fn episode_gradients(
    params: &mut ModelParams,
    dataset: &LabeledDataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
    episode_index: u64,
) -> Result<LossBreakdown> {
    let mut rng = derive_rng(cfg.seed, "episode", episode_index);
    let episode = match cfg.mode {
        Mode::Fewshot => {
            sample_fewshot_episode(dataset, &split.train, &cfg.episode_config(), &mut rng)?
        }
        Mode::Largescale => sample_largescale_batch(
            dataset,
            &split.train,
            cfg.open_way,
            cfg.batch_per_class,
            &mut rng,
        )?,
    };

    let mut tape = Tape::new();
    let vars = params.push_params(&mut tape);
    let scores = match cfg.mode {
        Mode::Fewshot => forward_fewshot(&mut tape, params, &vars, &episode)?,
        Mode::Largescale => forward_largescale(&mut tape, params, &vars, &episode)?,
    };
    let (total, breakdown) = combined_loss(
        &mut tape,
        scores.closed,
        &episode.closed_labels,
        scores.open,
        cfg.lambda,
        cfg.reduction,
    )?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} at episode {episode_index} (episode seed ({}, \"episode\", {episode_index}))",
            breakdown.total, cfg.seed
        )));
    }
    tape.backward(total)?;
    params.pull_grads(&tape, &vars);
    Ok(breakdown)
}

/// The episodic training loop. Deterministic in `cfg.seed`: episode `i`
/// draws from the stream `(seed, "episode", i)` regardless of history.
pub fn train(
    dataset: &LabeledDataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
    resume: Option<TrainLoopState>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLoopState> {
    cfg.validate()?;
    let mut state = match resume {
        Some(s) => {
            if s.episode > cfg.episodes {
                return Err(Error::Invalid(format!(
                    "resume state is at episode {} but the run wants {}",
                    s.episode, cfg.episodes
                )));
            }
            s
        }
        None => {
            let params = init_params(cfg, dataset.dim(), &split.train)?;
            let adam = AdamState::new_for(&params);
            TrainLoopState { episode: 0, params, adam, loss_stats: RunningStats::new() }
        }
    };

    let schedule = LrSchedule::new(cfg.milestones.clone(), cfg.lr_factor)?;
    let started = Instant::now();
    let mut window = RunningStats::new();

    while state.episode < cfg.episodes {
        let ep = state.episode;
        let lr = schedule.lr_at(cfg.base_lr, ep);
        let breakdown = episode_gradients(&mut state.params, dataset, split, cfg, ep)?;

        let mut named = state.params.named_tensors_mut();
        clip_grad_norm(&mut named, cfg.grad_clip);
        match adam_step(&mut named, &mut state.adam, lr) {
            Ok(()) => {}
            Err(Error::NonFinite(what)) => {
                observer.on_incident(ep, &format!("skipped update: non-finite {what}"));
            }
            Err(e) => return Err(e),
        }
        drop(named);
        state.params.zero_grads();

        state.loss_stats.push(breakdown.total);
        window.push(breakdown.total);
        state.episode += 1;

        if state.episode % cfg.log_every == 0 || state.episode == cfg.episodes {
            observer.on_progress(&ProgressRecord {
                episode: state.episode,
                lr,
                breakdown,
                window_mean: window.mean,
                wall_ms: started.elapsed().as_millis(),
            });
            window = RunningStats::new();
        }
        if state.episode % cfg.checkpoint_every == 0 && state.episode < cfg.episodes {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gaussian_mixture, split_classes, SyntheticSpec};
    use crate::model::HeadKind;

    fn scalar_param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.accumulate_grad(&[g]);
        t
    }

    fn one_param_state() -> AdamState {
        AdamState { t: 0, m: vec![vec![0.0]], v: vec![vec![0.0]] }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut t = scalar_param(1.5, 0.0);
        let mut st = one_param_state();
        let mut params = vec![("p".to_string(), &mut t)];
        adam_step(&mut params, &mut st, 1e-3).unwrap();
        assert_eq!(t.data()[0], 1.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // Fresh state, g = 1: m_hat = 1, v_hat = 1, update = -lr / (1 + eps).
        let mut t = scalar_param(0.0, 1.0);
        let mut st = one_param_state();
        let mut params = vec![("p".to_string(), &mut t)];
        adam_step(&mut params, &mut st, 1e-3).unwrap();
        let expect = -1e-3 / (1.0 + ADAM_EPS);
        assert!((t.data()[0] - expect).abs() < 1e-18, "{}", t.data()[0]);
    }

    #[test]
    fn trajectory_matches_recurrence_oracle() {
        // Hand-rolled recurrence for constant gradient.
        let g = 0.3;
        let lr = 0.01;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x_oracle = 2.0;
        let mut t = scalar_param(2.0, g);
        let mut st = one_param_state();
        for step in 1..=25 {
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(step));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(step));
            x_oracle -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);

            let mut params = vec![("p".to_string(), &mut t)];
            adam_step(&mut params, &mut st, lr).unwrap();
            drop(params);
            t.zero_grad();
            t.accumulate_grad(&[g]);
            assert!(
                (t.data()[0] - x_oracle).abs() < 1e-12,
                "step {step}: {} vs {x_oracle}",
                t.data()[0]
            );
        }
    }

    #[test]
    fn non_finite_gradient_rejects_the_whole_step() {
        let mut a = scalar_param(1.0, 1.0);
        let mut b = scalar_param(2.0, f64::NAN);
        let mut st = AdamState { t: 0, m: vec![vec![0.0], vec![0.0]], v: vec![vec![0.0], vec![0.0]] };
        let mut params = vec![("a".to_string(), &mut a), ("b".to_string(), &mut b)];
        let err = adam_step(&mut params, &mut st, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        drop(params);
        // Nothing moved, not even the step counter.
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 2.0);
        assert_eq!(st.t, 0);
        assert_eq!(st.m[0][0], 0.0);
    }

    #[test]
    fn zero_lr_updates_only_optimizer_state() {
        let mut t = scalar_param(1.0, 0.7);
        let mut st = one_param_state();
        let mut params = vec![("p".to_string(), &mut t)];
        adam_step(&mut params, &mut st, 0.0).unwrap();
        drop(params);
        assert_eq!(t.data()[0], 1.0);
        assert!(st.m[0][0] != 0.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut a = scalar_param(0.0, 3.0);
        let mut b = scalar_param(0.0, 4.0);
        let mut params = vec![("a".to_string(), &mut a), ("b".to_string(), &mut b)];
        clip_grad_norm(&mut params, 1.0);
        drop(params);
        // Norm was 5; gradients shrink by 5x.
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clipping_is_inert_below_the_cap_and_when_disabled() {
        let mut a = scalar_param(0.0, 0.3);
        let mut params = vec![("a".to_string(), &mut a)];
        clip_grad_norm(&mut params, 1.0);
        drop(params);
        assert_eq!(a.grad().unwrap()[0], 0.3);
        let mut b = scalar_param(0.0, 100.0);
        let mut params = vec![("b".to_string(), &mut b)];
        clip_grad_norm(&mut params, 0.0);
        drop(params);
        assert_eq!(b.grad().unwrap()[0], 100.0);
    }

    #[test]
    fn schedule_reproduces_published_decay_points() {
        let s = LrSchedule::new(vec![10_000, 20_000], 0.1).unwrap();
        assert_eq!(s.lr_at(1e-3, 0), 1e-3);
        assert_eq!(s.lr_at(1e-3, 9_999), 1e-3);
        assert!((s.lr_at(1e-3, 10_000) - 1e-4).abs() < 1e-19);
        assert!((s.lr_at(1e-3, 19_999) - 1e-4).abs() < 1e-19);
        assert!((s.lr_at(1e-3, 20_000) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let s = LrSchedule::new(vec![5, 17, 40], 0.5).unwrap();
        let mut prev = f64::INFINITY;
        for ep in 0..60 {
            let lr = s.lr_at(1.0, ep);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn schedule_rejects_unsorted_milestones() {
        assert!(LrSchedule::new(vec![10, 10], 0.1).is_err());
        assert!(LrSchedule::new(vec![20, 10], 0.1).is_err());
    }

    fn quick_cfg() -> TrainConfig {
        let mut cfg = TrainConfig {
            synthetic: SyntheticSpec {
                n_classes: 12,
                dim: 4,
                samples_per_class: 30,
                center_scale: 1.5,
                within_std: 0.05,
                seed: 3,
            },
            ..TrainConfig::default()
        };
        cfg.hidden = vec![16];
        cfg.embed_dim = 8;
        cfg.episodes = 300;
        cfg.milestones = vec![200];
        cfg.log_every = 100;
        cfg.checkpoint_every = 150;
        cfg.query_per_class = 5;
        cfg.open_query_per_class = 5;
        cfg.way = 3;
        cfg.open_way = 2;
        cfg.split_fractions = (0.5, 0.25, 0.25);
        cfg
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = quick_cfg();
        let run = || {
            let ds = generate_gaussian_mixture(&cfg.synthetic).unwrap();
            let split = split_classes(&ds, cfg.split_fractions, cfg.split_seed, false).unwrap();
            let state = train(&ds, &split, &cfg, None, &mut SilentObserver).unwrap();
            state
                .params
                .named_tensors()
                .into_iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run_exactly() {
        let cfg = quick_cfg();
        let ds = generate_gaussian_mixture(&cfg.synthetic).unwrap();
        let split = split_classes(&ds, cfg.split_fractions, cfg.split_seed, false).unwrap();

        let full = train(&ds, &split, &cfg, None, &mut SilentObserver).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.episodes = 150;
        let half = train(&ds, &split, &half_cfg, None, &mut SilentObserver).unwrap();
        let resumed = train(&ds, &split, &cfg, Some(half), &mut SilentObserver).unwrap();

        assert_eq!(full.episode, resumed.episode);
        assert_eq!(full.adam.t, resumed.adam.t);
        assert_eq!(full.loss_stats, resumed.loss_stats);
        for ((na, ta), (nb, tb)) in
            full.params.named_tensors().iter().zip(resumed.params.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "parameter {na} differs");
        }
        assert_eq!(full.adam.m, resumed.adam.m);
        assert_eq!(full.adam.v, resumed.adam.v);
    }

    #[test]
    fn closed_set_training_learns_separable_tasks() {
        // Near-separable classes and no open-set loss: closed accuracy must
        // exceed 90% quickly. Checked via the evaluation module's accuracy
        // on fresh episodes in the eval tests; here we check the loss fell.
        let mut cfg = quick_cfg();
        cfg.lambda = 0.0;
        cfg.open_way = 0;
        cfg.head = HeadKind::Euclidean;
        let ds = generate_gaussian_mixture(&cfg.synthetic).unwrap();
        let split = split_classes(&ds, cfg.split_fractions, cfg.split_seed, false).unwrap();

        struct Capture {
            first: Option<f64>,
            last: f64,
        }
        impl TrainObserver for Capture {
            fn on_progress(&mut self, r: &ProgressRecord) {
                if self.first.is_none() {
                    self.first = Some(r.window_mean);
                }
                self.last = r.window_mean;
            }
        }
        let mut cap = Capture { first: None, last: f64::INFINITY };
        train(&ds, &split, &cfg, None, &mut cap).unwrap();
        let first = cap.first.unwrap();
        assert!(
            cap.last < first * 0.5 && cap.last < 0.2,
            "loss did not fall: first {first}, last {}",
            cap.last
        );
    }

    #[test]
    fn largescale_training_runs_and_improves() {
        let mut cfg = quick_cfg();
        cfg.mode = Mode::Largescale;
        cfg.open_way = 2;
        cfg.batch_per_class = 4;
        cfg.episodes = 400;
        cfg.milestones = vec![300];
        let ds = generate_gaussian_mixture(&cfg.synthetic).unwrap();
        let split = split_classes(&ds, cfg.split_fractions, cfg.split_seed, false).unwrap();
        let state = train(&ds, &split, &cfg, None, &mut SilentObserver).unwrap();
        assert_eq!(state.episode, 400);
        // The learned head has one prototype row per training class.
        let protos = state.params.head.prototypes.as_ref().unwrap();
        assert_eq!(protos.dims2().unwrap().0, split.train.len());
        assert!(state.loss_stats.mean.is_finite());
    }
}
