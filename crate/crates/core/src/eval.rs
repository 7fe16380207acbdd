//! Closed-set accuracy, rejection scoring, AUROC, and aggregation over
//! repeated evaluation episodes.
//!
//! Convention: seen-class queries are the positive (high-score) population
//! and the score is the maximum seen-class probability, so AUROC is the
//! probability that a random seen query outscores a random unseen one,
//! ties counting one half. The rank-based computation uses midranks, which
//! makes `auroc(s, u) + auroc(u, s) = 1` hold exactly.

use crate::config::Mode;
use crate::data::{ClassSplit, LabeledDataset};
use crate::episode::{sample_fewshot_episode, Episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::model::{forward_fewshot, forward_largescale, ModelParams, Posterior, ProtoSource};
use crate::report::EvalRecord;
use crate::rng::{derive_rng, draw_distinct, shuffled_indices};
use crate::{Tape, Tensor};

/// Max seen-class probability of one posterior row of log-probabilities.
pub fn rejection_score(log_prob_row: &[f64]) -> f64 {
    log_prob_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp()
}

/// Fraction of queries whose argmax matches the label; argmax ties break
/// toward the lowest class index.
pub fn accuracy(posterior: &Posterior, labels: &[usize]) -> Result<f64> {
    if labels.len() != posterior.n_queries() {
        return Err(Error::Eval(format!(
            "{} labels for {} queries",
            labels.len(),
            posterior.n_queries()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= posterior.n_classes()) {
        return Err(Error::Eval(format!(
            "label {bad} out of range for {} classes",
            posterior.n_classes()
        )));
    }
    let hits = posterior
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Rank-based (Mann-Whitney) AUROC with midranks for ties.
///
/// The complement is computed from whichever numerator is smaller, so the
/// two argument orders return floats that sum to exactly one.
pub fn auroc(seen_scores: &[f64], unseen_scores: &[f64]) -> Result<f64> {
    if seen_scores.is_empty() || unseen_scores.is_empty() {
        return Err(Error::Eval("auroc needs both score populations nonempty".into()));
    }
    if seen_scores.iter().chain(unseen_scores).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("auroc scores".into()));
    }
    let n_s = seen_scores.len();
    let n_u = unseen_scores.len();
    let mut all: Vec<(f64, bool)> = seen_scores
        .iter()
        .map(|&v| (v, true))
        .chain(unseen_scores.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN scores"));

    let mut rank_sum_seen = 0.0_f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_seen += midrank;
            }
        }
        i = j;
    }
    let num = rank_sum_seen - (n_s * (n_s + 1) / 2) as f64;
    let den = (n_s * n_u) as f64;
    Ok(if 2.0 * num <= den { num / den } else { 1.0 - (den - num) / den })
}

/// Metrics of one evaluation episode.
#[derive(Debug, Clone)]
pub struct EvalEpisodeResult {
    pub accuracy: f64,
    pub seen_scores: Vec<f64>,
    pub unseen_scores: Vec<f64>,
    pub auroc: Option<f64>,
}

/// Aggregate over evaluation episodes with 95% normal-approximation
/// half-widths (`1.96 * sample std / sqrt(n)`).
#[derive(Debug, Clone)]
pub struct AggregateReport {
    pub n_episodes: u64,
    pub accuracy_mean: f64,
    pub accuracy_half_width: f64,
    pub auroc_mean: Option<f64>,
    pub auroc_half_width: Option<f64>,
    pub episodes: Vec<EvalEpisodeResult>,
}

fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

impl AggregateReport {
    fn from_episodes(episodes: Vec<EvalEpisodeResult>) -> Self {
        let accs: Vec<f64> = episodes.iter().map(|e| e.accuracy).collect();
        let (accuracy_mean, accuracy_half_width) = mean_and_half_width(&accs);
        let aurocs: Option<Vec<f64>> = episodes.iter().map(|e| e.auroc).collect();
        let (auroc_mean, auroc_half_width) = match aurocs {
            Some(a) if !a.is_empty() => {
                let (m, h) = mean_and_half_width(&a);
                (Some(m), Some(h))
            }
            _ => (None, None),
        };
        AggregateReport {
            n_episodes: episodes.len() as u64,
            accuracy_mean,
            accuracy_half_width,
            auroc_mean,
            auroc_half_width,
            episodes,
        }
    }

    /// Human summary block. States the scoring convention so the sign of
    /// AUROC is never ambiguous.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        s.push_str("osml evaluation summary\n");
        s.push_str("convention: seen queries are positives, score = max seen-class probability\n");
        s.push_str("interval: 95% normal approximation, 1.96 * sample std / sqrt(n)\n");
        s.push_str(&format!("n_episodes {}\n", self.n_episodes));
        s.push_str(&format!(
            "accuracy {} half_width {}\n",
            self.accuracy_mean, self.accuracy_half_width
        ));
        match (self.auroc_mean, self.auroc_half_width) {
            (Some(m), Some(h)) => s.push_str(&format!("auroc {m} half_width {h}\n")),
            _ => s.push_str("auroc absent (no open queries)\n"),
        }
        s
    }

    pub fn episode_lines(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.episodes.iter().enumerate() {
            let rec = EvalRecord { episode: i as u64, accuracy: e.accuracy, auroc: e.auroc };
            out.push_str(&rec.to_line());
            out.push('\n');
        }
        out
    }
}

/// Evaluation-time knobs, independent of the training config.
///
/// `episode.way` and `episode.shot` shape few-shot evaluation tasks; a
/// learned (large-scale) head always answers for all of its trained
/// classes and only `episode.open_way` applies.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episode: EpisodeConfig,
    /// Queries per class in large-scale evaluation batches.
    pub batch_per_class: usize,
    pub n_episodes: u64,
    pub base_seed: u64,
    pub workers: usize,
}

/// Score one already-sampled evaluation episode.
fn eval_episode(params: &ModelParams, mode: Mode, episode: &Episode) -> Result<EvalEpisodeResult> {
    let mut tape = Tape::new();
    let vars = params.push_leaves(&mut tape);
    let scores = match mode {
        Mode::Fewshot => forward_fewshot(&mut tape, params, &vars, episode)?,
        Mode::Largescale => forward_largescale(&mut tape, params, &vars, episode)?,
    };
    let closed = Posterior::from_tape(&tape, scores.closed);
    let acc = accuracy(&closed, &episode.closed_labels)?;
    let seen_scores = closed.max_probabilities();
    let (unseen_scores, auroc_val) = match scores.open {
        Some(olp) => {
            let open = Posterior::from_tape(&tape, olp);
            let unseen = open.max_probabilities();
            let a = auroc(&seen_scores, &unseen)?;
            (unseen, Some(a))
        }
        None => (Vec::new(), None),
    };
    Ok(EvalEpisodeResult { accuracy: acc, seen_scores, unseen_scores, auroc: auroc_val })
}

/// Build the large-scale evaluation episode for one index: a balanced batch
/// from every trained class (closed) and from `open_way` test classes
/// (open), scored against the full learned head.
fn sample_largescale_eval<R: rand::Rng>(
    dataset: &LabeledDataset,
    params: &ModelParams,
    test_pool: &[usize],
    opts: &EvalOptions,
    rng: &mut R,
) -> Result<Episode> {
    let seen_classes = params.head.class_ids.clone();
    let open_way = opts.episode.open_way;
    if open_way > test_pool.len() {
        return Err(Error::Eval(format!(
            "open_way {open_way} exceeds the {} test classes",
            test_pool.len()
        )));
    }
    let unseen_classes = draw_distinct(test_pool, open_way, rng);
    let batch = opts.batch_per_class;
    let draw = |class: usize, rng: &mut R| -> Result<Vec<usize>> {
        let samples = dataset.class_samples(class);
        if samples.len() < batch {
            return Err(Error::Eval(format!(
                "class {class} has {} samples, need batch_per_class = {batch}",
                samples.len()
            )));
        }
        let order = shuffled_indices(samples.len(), rng);
        Ok(order[..batch].iter().map(|&o| samples[o]).collect())
    };
    let mut closed_rows = Vec::new();
    let mut closed_labels = Vec::new();
    for (local, &class) in seen_classes.iter().enumerate() {
        for r in draw(class, rng)? {
            closed_rows.push(r);
            closed_labels.push(local);
        }
    }
    let mut open_rows = Vec::new();
    for &class in &unseen_classes {
        open_rows.extend(draw(class, rng)?);
    }
    let d = dataset.dim();
    Ok(Episode {
        seen_classes,
        unseen_classes,
        support: Tensor::matrix(0, d, Vec::new()).expect("empty matrix"),
        support_labels: Vec::new(),
        closed_query: dataset.gather(&closed_rows),
        closed_labels,
        open_query: if open_rows.is_empty() {
            Tensor::matrix(0, d, Vec::new()).expect("empty matrix")
        } else {
            dataset.gather(&open_rows)
        },
    })
}

fn eval_one_index(
    params: &ModelParams,
    dataset: &LabeledDataset,
    split: &ClassSplit,
    opts: &EvalOptions,
    index: u64,
) -> Result<EvalEpisodeResult> {
    let mut rng = derive_rng(opts.base_seed, "eval", index);
    match params.head.proto_source {
        ProtoSource::Estimated => {
            let ep = sample_fewshot_episode(dataset, &split.test, &opts.episode, &mut rng)?;
            eval_episode(params, Mode::Fewshot, &ep)
        }
        ProtoSource::Learned => {
            let ep = sample_largescale_eval(dataset, params, &split.test, opts, &mut rng)?;
            eval_episode(params, Mode::Largescale, &ep)
        }
    }
}

/// Evaluate a trained model over repeated episodes.
///
/// Episode `i` always draws from the stream `(base_seed, "eval", i)` and
/// results are folded in index order, so the report is identical for any
/// worker count.
pub fn evaluate(
    params: &ModelParams,
    dataset: &LabeledDataset,
    split: &ClassSplit,
    opts: &EvalOptions,
) -> Result<AggregateReport> {
    if opts.n_episodes == 0 {
        return Err(Error::Eval("n_episodes must be positive".into()));
    }
    if params.head.proto_source == ProtoSource::Estimated {
        let need = opts.episode.way + opts.episode.open_way;
        if split.test.len() < need {
            return Err(Error::Eval(format!(
                "{} test classes cannot host way + open_way = {need}",
                split.test.len()
            )));
        }
    }
    let n = opts.n_episodes;
    let workers = opts.workers.max(1).min(n as usize);
    let mut slots: Vec<Option<EvalEpisodeResult>> = vec![None; n as usize];

    if workers <= 1 {
        for i in 0..n {
            slots[i as usize] = Some(eval_one_index(params, dataset, split, opts, i)?);
        }
    } else {
        let results: Vec<Result<Vec<(u64, EvalEpisodeResult)>>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for w in 0..workers {
                    let opts_ref = &*opts;
                    let handle = scope.spawn(move || {
                        let mut out = Vec::new();
                        let mut i = w as u64;
                        while i < n {
                            out.push((i, eval_one_index(params, dataset, split, opts_ref, i)?));
                            i += workers as u64;
                        }
                        Ok(out)
                    });
                    handles.push(handle);
                }
                handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
            });
        for r in results {
            for (i, res) in r? {
                slots[i as usize] = Some(res);
            }
        }
    }
    let episodes: Vec<EvalEpisodeResult> =
        slots.into_iter().map(|s| s.expect("every episode filled")).collect();
    Ok(AggregateReport::from_episodes(episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::data::{generate_gaussian_mixture, split_classes, SyntheticSpec};
    use crate::model::{DistanceHead, EmbeddingNet, HeadKind};
    use crate::optim::init_params;

    #[test]
    fn rejection_score_examples() {
        let uniform = vec![0.2_f64.ln(); 5];
        assert!((rejection_score(&uniform) - 0.2).abs() < 1e-15);
        let onehot = vec![0.0, -1e9, -1e9];
        assert_eq!(rejection_score(&onehot), 1.0);
        let mixed = vec![0.5_f64.ln(), 0.3_f64.ln(), 0.2_f64.ln()];
        assert!((rejection_score(&mixed) - 0.5).abs() < 1e-15);
    }

    fn posterior_from_rows(rows: &[Vec<f64>]) -> Posterior {
        // Rows are probabilities; convert to log space.
        let logs: Vec<Vec<f64>> =
            rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        let t = Tensor::from_rows(&logs).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&t);
        Posterior::from_tape(&tape, v)
    }

    #[test]
    fn accuracy_examples() {
        let p = posterior_from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.2, 0.6],
            vec![0.5, 0.3, 0.2],
        ]);
        assert_eq!(accuracy(&p, &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 0, 0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&p, &[0, 1, 2, 1]).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_breaks_ties_toward_low_index() {
        let p = posterior_from_rows(&[vec![0.4, 0.4, 0.2]]);
        assert_eq!(accuracy(&p, &[0]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn auroc_perfect_separation() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.7, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        assert_eq!(auroc(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_pairwise_hand_count() {
        // 3 of 4 pairs ordered correctly.
        assert_eq!(auroc(&[0.9, 0.3], &[0.5, 0.1]).unwrap(), 0.75);
    }

    #[test]
    fn auroc_rejects_empty_population() {
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
    }

    fn pairwise_oracle(seen: &[f64], unseen: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &s in seen {
            for &u in unseen {
                if s > u {
                    acc += 1.0;
                } else if s == u {
                    acc += 0.5;
                }
            }
        }
        acc / (seen.len() * unseen.len()) as f64
    }

    #[test]
    fn auroc_equals_quadratic_oracle_with_ties() {
        use rand::Rng;
        let mut rng = derive_rng(5, "auroc-oracle", 0);
        for _ in 0..300 {
            let n_s = 1 + (rng.gen::<u64>() % 30) as usize;
            let n_u = 1 + (rng.gen::<u64>() % 30) as usize;
            // Quantized scores force ties.
            let q = 1.0 + (rng.gen::<u64>() % 9) as f64;
            let mk = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..n).map(|_| (rng.gen::<f64>() * q).round() / q).collect()
            };
            let seen = mk(n_s, &mut rng);
            let unseen = mk(n_u, &mut rng);
            let fast = auroc(&seen, &unseen).unwrap();
            let slow = pairwise_oracle(&seen, &unseen);
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
            // Exact rank symmetry.
            assert_eq!(fast + auroc(&unseen, &seen).unwrap(), 1.0);
        }
    }

    #[test]
    fn auroc_is_invariant_under_increasing_transforms() {
        use rand::Rng;
        let mut rng = derive_rng(6, "auroc-mono", 0);
        for _ in 0..50 {
            let seen: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
            let unseen: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
            let base = auroc(&seen, &unseen).unwrap();
            let map = |v: f64| (3.0 * v).exp() + 1.0;
            let a = auroc(
                &seen.iter().map(|&v| map(v)).collect::<Vec<_>>(),
                &unseen.iter().map(|&v| map(v)).collect::<Vec<_>>(),
            )
            .unwrap();
            assert!((base - a).abs() <= 1e-12);
        }
    }

    /// One-hot classes with near-zero within-class noise and an identity
    /// embedding: the separable limit.
    fn perfect_setup() -> (ModelParams, LabeledDataset, ClassSplit) {
        let n_classes = 8;
        let per_class = 20;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n_classes {
            for s in 0..per_class {
                let mut row = vec![0.0; n_classes];
                row[c] = 1.0 + (s as f64) * 1e-9;
                rows.push(row);
                labels.push(c as i64);
            }
        }
        let ds =
            LabeledDataset::from_parts(Tensor::from_rows(&rows).unwrap(), labels).unwrap();
        let split = split_classes(&ds, (0.5, 0.0, 0.5), 3, true).unwrap();

        let mut rng = derive_rng(1, "perfect", 0);
        let mut embed = EmbeddingNet::new(&[n_classes, n_classes], &mut rng).unwrap();
        let mut w = vec![0.0; n_classes * n_classes];
        for i in 0..n_classes {
            w[i * n_classes + i] = 1.0;
        }
        embed.layers[0].w = Tensor::matrix(n_classes, n_classes, w).unwrap();
        embed.layers[0].b = Tensor::vector(vec![0.0; n_classes]);
        let params = ModelParams {
            embed,
            precision: None,
            head: DistanceHead::fewshot(HeadKind::Euclidean),
        };
        (params, ds, split)
    }

    #[test]
    fn separable_limit_reaches_perfect_scores() {
        let (params, ds, split) = perfect_setup();
        let opts = EvalOptions {
            episode: EpisodeConfig {
                way: 2,
                shot: 1,
                query_per_class: 5,
                open_way: 2,
                open_query_per_class: 5,
            },
            batch_per_class: 4,
            n_episodes: 40,
            base_seed: 11,
            workers: 1,
        };
        let report = evaluate(&params, &ds, &split, &opts).unwrap();
        assert_eq!(report.accuracy_mean, 1.0);
        assert_eq!(report.auroc_mean, Some(1.0));
        // Identical per-episode values collapse the interval.
        assert_eq!(report.accuracy_half_width, 0.0);
        assert_eq!(report.auroc_half_width, Some(0.0));
    }

    #[test]
    fn evaluate_is_deterministic_across_worker_counts() {
        let (params, ds, split) = perfect_setup();
        let mk = |workers: usize| EvalOptions {
            episode: EpisodeConfig {
                way: 2,
                shot: 1,
                query_per_class: 3,
                open_way: 1,
                open_query_per_class: 3,
            },
            batch_per_class: 4,
            n_episodes: 25,
            base_seed: 13,
            workers,
        };
        let a = evaluate(&params, &ds, &split, &mk(1)).unwrap();
        let b = evaluate(&params, &ds, &split, &mk(4)).unwrap();
        assert_eq!(a.accuracy_mean, b.accuracy_mean);
        assert_eq!(a.auroc_mean, b.auroc_mean);
        for (ea, eb) in a.episodes.iter().zip(&b.episodes) {
            assert_eq!(ea.accuracy, eb.accuracy);
            assert_eq!(ea.auroc, eb.auroc);
            assert_eq!(ea.seen_scores, eb.seen_scores);
        }
    }

    #[test]
    fn no_open_way_reports_accuracy_only() {
        let (params, ds, split) = perfect_setup();
        let opts = EvalOptions {
            episode: EpisodeConfig {
                way: 2,
                shot: 1,
                query_per_class: 4,
                open_way: 0,
                open_query_per_class: 1,
            },
            batch_per_class: 4,
            n_episodes: 10,
            base_seed: 7,
            workers: 1,
        };
        let report = evaluate(&params, &ds, &split, &opts).unwrap();
        assert!(report.auroc_mean.is_none());
        assert!(report.summary_text().contains("auroc absent"));
    }

    #[test]
    fn too_few_test_classes_is_rejected() {
        let (params, ds, split) = perfect_setup();
        let opts = EvalOptions {
            episode: EpisodeConfig {
                way: 4,
                shot: 1,
                query_per_class: 2,
                open_way: 4,
                open_query_per_class: 2,
            },
            batch_per_class: 4,
            n_episodes: 5,
            base_seed: 7,
            workers: 1,
        };
        assert!(evaluate(&params, &ds, &split, &opts).is_err());
    }

    #[test]
    fn largescale_evaluation_runs_against_the_learned_head() {
        let mut cfg = TrainConfig::preset("paper-largescale").unwrap();
        cfg.synthetic = SyntheticSpec {
            n_classes: 10,
            dim: 4,
            samples_per_class: 20,
            center_scale: 1.0,
            within_std: 0.2,
            seed: 5,
        };
        let ds = generate_gaussian_mixture(&cfg.synthetic).unwrap();
        let split = split_classes(&ds, cfg.split_fractions, cfg.split_seed, true).unwrap();
        let params = init_params(&cfg, ds.dim(), &split.train).unwrap();
        let opts = EvalOptions {
            episode: cfg.episode_config(),
            batch_per_class: 4,
            n_episodes: 6,
            base_seed: 2,
            workers: 2,
        };
        let report = evaluate(&params, &ds, &split, &opts).unwrap();
        assert_eq!(report.n_episodes, 6);
        assert!(report.auroc_mean.is_some());
        // Fresh init: nothing learned yet, so metrics are merely valid.
        assert!(report.accuracy_mean >= 0.0 && report.accuracy_mean <= 1.0);
    }
}
