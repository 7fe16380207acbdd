//! Embedding networks and distance-softmax heads.
//!
//! A feature embedding `f` maps inputs to a small latent space where each
//! class is summarized by a prototype. Class posteriors are a softmax over
//! negated squared distances to the prototypes. The Euclidean head treats
//! every class as an isotropic Gaussian; the Mahalanobis head gives each
//! class its own diagonal precision, estimated by a second embedding `g`
//! from the support set (few-shot) or learned directly (large-scale).
//!
//! Squared distances are used as written, with no square root; gradients
//! stay smooth at zero. Precisions pass through `softplus(u) + 1e-6` so the
//! metric stays positive definite no matter what the raw values do.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::rng::normal;

/// Floor added to softplus outputs so precision entries stay positive.
pub const PRECISION_EPS: f64 = 1e-6;

/// Scale of the random init for learned prototype tables.
const PROTO_INIT_SCALE: f64 = 0.01;

// ── embedding networks ──────────────────────────────────────────────────

/// One dense layer: weights `[d_in, d_out]` and bias `[d_out]`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Multilayer perceptron with relu between layers and a linear output.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    sizes: Vec<usize>,
    pub layers: Vec<AffineLayer>,
}

/// Tape handles for a network's parameters within one episode.
#[derive(Debug, Clone)]
pub struct EmbeddingVars {
    layers: Vec<(Var, Var)>,
}

impl EmbeddingNet {
    /// Glorot-uniform weights, zero biases. `sizes` chains input width,
    /// hidden widths, and the embedding width.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Invalid(format!(
                "embedding net needs at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Invalid(format!("zero-width layer in {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for win in sizes.windows(2) {
            let (d_in, d_out) = (win[0], win[1]);
            let limit = (6.0 / (d_in + d_out) as f64).sqrt();
            let w: Vec<f64> = (0..d_in * d_out)
                .map(|_| rng.gen::<f64>() * 2.0 * limit - limit)
                .collect();
            layers.push(AffineLayer {
                w: Tensor::matrix(d_in, d_out, w)?,
                b: Tensor::vector(vec![0.0; d_out]),
            });
        }
        Ok(EmbeddingNet { sizes: sizes.to_vec(), layers })
    }

    /// Rebuild a net from checkpointed layer tensors.
    pub fn from_layers(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("embedding net needs at least one layer".into()));
        }
        let mut sizes = vec![layers[0].w.dims2()?.0];
        for l in &layers {
            let (d_in, d_out) = l.w.dims2()?;
            if d_in != *sizes.last().unwrap() {
                return Err(Error::Shape(format!(
                    "layer input {d_in} does not chain from previous output {}",
                    sizes.last().unwrap()
                )));
            }
            if l.b.shape() != [d_out] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match layer output {d_out}",
                    l.b.shape()
                )));
            }
            sizes.push(d_out);
        }
        Ok(EmbeddingNet { sizes, layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn d_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn d_out(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Push every layer onto the tape as parameters (trainable).
    pub fn push_params(&self, tape: &mut Tape) -> EmbeddingVars {
        EmbeddingVars {
            layers: self.layers.iter().map(|l| (tape.param(&l.w), tape.param(&l.b))).collect(),
        }
    }

    /// Push every layer as constants (evaluation only).
    pub fn push_leaves(&self, tape: &mut Tape) -> EmbeddingVars {
        EmbeddingVars {
            layers: self.layers.iter().map(|l| (tape.leaf(&l.w), tape.leaf(&l.b))).collect(),
        }
    }
}

/// Forward pass: alternating affine and relu, no activation after the last
/// affine. Rejects inputs whose width differs from the net's.
pub fn embed(tape: &mut Tape, net: &EmbeddingNet, vars: &EmbeddingVars, x: Var) -> Result<Var> {
    let (_, width) = match tape.shape(x) {
        [r, c] => (*r, *c),
        other => return Err(Error::Shape(format!("embed input must be a matrix, got {other:?}"))),
    };
    if width != net.d_in() {
        return Err(Error::Shape(format!(
            "embed input width {width} does not match net input {}",
            net.d_in()
        )));
    }
    let mut h = x;
    let last = vars.layers.len() - 1;
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        h = tape.affine(h, w, b)?;
        if i != last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Second embedding whose per-class mean becomes the diagonal precision.
/// Output width must equal the feature embedding width.
#[derive(Debug, Clone)]
pub struct PrecisionNet(pub EmbeddingNet);

impl PrecisionNet {
    pub fn new<R: Rng>(sizes: &[usize], embed_dim: usize, rng: &mut R) -> Result<Self> {
        let net = EmbeddingNet::new(sizes, rng)?;
        if net.d_out() != embed_dim {
            return Err(Error::Shape(format!(
                "precision net output {} must equal embedding width {embed_dim}",
                net.d_out()
            )));
        }
        Ok(PrecisionNet(net))
    }
}

// ── prototypes and precisions ───────────────────────────────────────────

/// Per-class mean of support features: the Gaussian mean estimate.
pub fn compute_prototypes(
    tape: &mut Tape,
    support_features: Var,
    labels: &[usize],
    n_classes: usize,
) -> Result<Var> {
    for class in 0..n_classes {
        if !labels.contains(&class) {
            return Err(Error::Invalid(format!("class {class} has no support samples")));
        }
    }
    tape.group_mean_rows(support_features, labels, n_classes)
}

/// Per-class mean of `g` outputs mapped through `softplus(u) + eps`,
/// yielding strictly positive diagonal precision entries.
pub fn compute_precisions(
    tape: &mut Tape,
    g_outputs: Var,
    labels: &[usize],
    n_classes: usize,
) -> Result<Var> {
    for class in 0..n_classes {
        if !labels.contains(&class) {
            return Err(Error::Invalid(format!("class {class} has no support samples")));
        }
    }
    let raw = tape.group_mean_rows(g_outputs, labels, n_classes)?;
    let sp = tape.softplus(raw);
    Ok(tape.add_scalar(sp, PRECISION_EPS))
}

/// Squared Euclidean distance from each query embedding to each prototype.
pub fn distance_euclidean(tape: &mut Tape, f: Var, protos: Var) -> Result<Var> {
    tape.sq_dist(f, protos)
}

/// Squared Mahalanobis distance with per-class diagonal precisions.
pub fn distance_mahalanobis(tape: &mut Tape, f: Var, protos: Var, precisions: Var) -> Result<Var> {
    tape.weighted_sq_dist(f, protos, precisions)
}

/// Log-posteriors over seen classes: `log_softmax(-distances)`.
pub fn posteriors(tape: &mut Tape, distances: Var) -> Result<Var> {
    let neg = tape.neg(distances);
    tape.log_softmax(neg)
}

/// Reference linear-softmax baseline: log-posteriors from inner products
/// with per-class weight columns (no bias) instead of distances to
/// prototypes. Kept only as a comparison point for the distance heads.
pub fn linear_baseline_log_probs(
    tape: &mut Tape,
    f: Var,
    class_weight_cols: Var,
) -> Result<Var> {
    let d_out = match tape.shape(class_weight_cols) {
        [_, c] => *c,
        other => {
            return Err(Error::Shape(format!(
                "linear baseline weights must be [d_embed, classes], got {other:?}"
            )))
        }
    };
    let zero_bias = tape.leaf(&Tensor::zeros(vec![d_out]));
    let logits = tape.affine(f, class_weight_cols, zero_bias)?;
    tape.log_softmax(logits)
}

/// Materialized per-query log-probabilities over an episode's seen classes.
#[derive(Debug, Clone)]
pub struct Posterior {
    log_probs: Tensor,
}

impl Posterior {
    pub fn from_tape(tape: &Tape, log_probs: Var) -> Self {
        let t = tape.to_tensor(log_probs);
        t.dims2().expect("posterior log-probs are a matrix");
        Posterior { log_probs: t }
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn n_queries(&self) -> usize {
        self.log_probs.dims2().unwrap().0
    }

    pub fn n_classes(&self) -> usize {
        self.log_probs.dims2().unwrap().1
    }

    /// Max seen-class probability per query, the rejection score.
    pub fn max_probabilities(&self) -> Vec<f64> {
        (0..self.n_queries())
            .map(|q| {
                self.log_probs
                    .row(q)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
                    .exp()
            })
            .collect()
    }

    /// Predicted class per query; ties break toward the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.n_queries())
            .map(|q| {
                let row = self.log_probs.row(q);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

// ── distance head ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Euclidean,
    Mahalanobis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoSource {
    /// Per-episode mean of support embeddings.
    Estimated,
    /// A learned `[n_classes, d_embed]` parameter table.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecSource {
    /// Unit precisions; the head is Euclidean.
    Identity,
    /// Per-episode mean of `g` outputs through the positivity map.
    Estimated,
    /// Learned raw parameters through the positivity map.
    Learned,
}

/// Head configuration plus the learned tables of the large-scale regime.
///
/// `class_ids` keeps the original dataset class id of every table row, so a
/// restricted head still answers for the same classes and restricting twice
/// with the same ids is a no-op.
#[derive(Debug, Clone)]
pub struct DistanceHead {
    pub kind: HeadKind,
    pub proto_source: ProtoSource,
    pub prec_source: PrecSource,
    pub class_ids: Vec<usize>,
    pub prototypes: Option<Tensor>,
    pub raw_precisions: Option<Tensor>,
}

impl DistanceHead {
    pub fn fewshot(kind: HeadKind) -> Self {
        DistanceHead {
            kind,
            proto_source: ProtoSource::Estimated,
            prec_source: match kind {
                HeadKind::Euclidean => PrecSource::Identity,
                HeadKind::Mahalanobis => PrecSource::Estimated,
            },
            class_ids: Vec::new(),
            prototypes: None,
            raw_precisions: None,
        }
    }

    /// Large-scale head with one learned prototype (and, for Mahalanobis,
    /// one learned raw precision row) per class in `class_ids`. Prototypes
    /// start near zero; raw precisions start at zero, which the positivity
    /// map sends to ln 2, a near-Euclidean metric.
    pub fn largescale<R: Rng>(
        kind: HeadKind,
        class_ids: Vec<usize>,
        d_embed: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::Invalid("large-scale head needs at least one class".into()));
        }
        let n = class_ids.len();
        let protos: Vec<f64> =
            (0..n * d_embed).map(|_| PROTO_INIT_SCALE * normal(rng, 0.0, 1.0)).collect();
        Ok(DistanceHead {
            kind,
            proto_source: ProtoSource::Learned,
            prec_source: match kind {
                HeadKind::Euclidean => PrecSource::Identity,
                HeadKind::Mahalanobis => PrecSource::Learned,
            },
            class_ids,
            prototypes: Some(Tensor::matrix(n, d_embed, protos)?),
            raw_precisions: match kind {
                HeadKind::Euclidean => None,
                HeadKind::Mahalanobis => Some(Tensor::zeros(vec![n, d_embed])),
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let euclid = self.kind == HeadKind::Euclidean;
        let identity = self.prec_source == PrecSource::Identity;
        if euclid != identity {
            return Err(Error::Invalid(
                "euclidean heads use identity precisions and mahalanobis heads must not".into(),
            ));
        }
        if self.proto_source == ProtoSource::Learned && self.prototypes.is_none() {
            return Err(Error::Invalid("learned head is missing its prototype table".into()));
        }
        if self.prec_source == PrecSource::Learned && self.raw_precisions.is_none() {
            return Err(Error::Invalid("learned head is missing its precision table".into()));
        }
        Ok(())
    }

    /// Table row for an original class id.
    pub fn row_of(&self, class_id: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == class_id)
            .ok_or_else(|| Error::Invalid(format!("class {class_id} is not in the learned head")))
    }

    /// A head whose tables contain only the rows of `seen_classes`, in that
    /// order. Original class ids are preserved, so restriction is
    /// idempotent. Only meaningful for learned heads.
    pub fn restrict_to_seen(&self, seen_classes: &[usize]) -> Result<DistanceHead> {
        if seen_classes.is_empty() {
            return Err(Error::Invalid("restriction needs at least one seen class".into()));
        }
        let protos = self
            .prototypes
            .as_ref()
            .ok_or_else(|| Error::Invalid("restrict_to_seen needs a learned prototype table".into()))?;
        let rows: Vec<usize> =
            seen_classes.iter().map(|&c| self.row_of(c)).collect::<Result<_>>()?;
        let d = protos.dims2()?.1;
        let take = |t: &Tensor| -> Tensor {
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in &rows {
                data.extend_from_slice(t.row(r));
            }
            Tensor::matrix(rows.len(), d, data).expect("restricted table shape")
        };
        Ok(DistanceHead {
            kind: self.kind,
            proto_source: self.proto_source,
            prec_source: self.prec_source,
            class_ids: seen_classes.to_vec(),
            prototypes: Some(take(protos)),
            raw_precisions: self.raw_precisions.as_ref().map(take),
        })
    }

    /// Score queries against this head's learned tables.
    pub fn posteriors_for(&self, queries_embedded: &Tensor) -> Result<Posterior> {
        let protos = self
            .prototypes
            .as_ref()
            .ok_or_else(|| Error::Invalid("posteriors_for needs a learned prototype table".into()))?;
        let mut tape = Tape::new();
        let f = tape.leaf(queries_embedded);
        let p = tape.leaf(protos);
        let dist = match self.kind {
            HeadKind::Euclidean => distance_euclidean(&mut tape, f, p)?,
            HeadKind::Mahalanobis => {
                let raw = tape.leaf(self.raw_precisions.as_ref().ok_or_else(|| {
                    Error::Invalid("mahalanobis head is missing precisions".into())
                })?);
                let sp = tape.softplus(raw);
                let prec = tape.add_scalar(sp, PRECISION_EPS);
                distance_mahalanobis(&mut tape, f, p, prec)?
            }
        };
        let lp = posteriors(&mut tape, dist)?;
        Ok(Posterior::from_tape(&tape, lp))
    }
}

// ── full parameter set and episode forwards ─────────────────────────────

/// Everything the optimizer updates: the feature embedding, the optional
/// precision embedding, and the head's learned tables.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub embed: EmbeddingNet,
    pub precision: Option<PrecisionNet>,
    pub head: DistanceHead,
}

/// Tape handles for one episode's parameters.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: EmbeddingVars,
    pub precision: Option<EmbeddingVars>,
    pub prototypes: Option<Var>,
    pub raw_precisions: Option<Var>,
}

/// Log-posterior vars for one scored episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeScores {
    pub closed: Var,
    pub open: Option<Var>,
}

impl ModelParams {
    /// Stable (name, tensor) listing; checkpoint and optimizer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.embed.layers.iter().enumerate() {
            out.push((format!("embed.l{i}.w"), &l.w));
            out.push((format!("embed.l{i}.b"), &l.b));
        }
        if let Some(p) = &self.precision {
            for (i, l) in p.0.layers.iter().enumerate() {
                out.push((format!("precision.l{i}.w"), &l.w));
                out.push((format!("precision.l{i}.b"), &l.b));
            }
        }
        if let Some(t) = &self.head.prototypes {
            out.push(("head.prototypes".into(), t));
        }
        if let Some(t) = &self.head.raw_precisions {
            out.push(("head.raw_precisions".into(), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.embed.layers.iter_mut().enumerate() {
            out.push((format!("embed.l{i}.w"), &mut l.w));
            out.push((format!("embed.l{i}.b"), &mut l.b));
        }
        if let Some(p) = &mut self.precision {
            for (i, l) in p.0.layers.iter_mut().enumerate() {
                out.push((format!("precision.l{i}.w"), &mut l.w));
                out.push((format!("precision.l{i}.b"), &mut l.b));
            }
        }
        if let Some(t) = &mut self.head.prototypes {
            out.push(("head.prototypes".into(), t));
        }
        if let Some(t) = &mut self.head.raw_precisions {
            out.push(("head.raw_precisions".into(), t));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// Push all parameters as trainable tape nodes.
    pub fn push_params(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embed: self.embed.push_params(tape),
            precision: self.precision.as_ref().map(|p| p.0.push_params(tape)),
            prototypes: self.head.prototypes.as_ref().map(|t| tape.param(t)),
            raw_precisions: self.head.raw_precisions.as_ref().map(|t| tape.param(t)),
        }
    }

    /// Push all parameters as constants (evaluation).
    pub fn push_leaves(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embed: self.embed.push_leaves(tape),
            precision: self.precision.as_ref().map(|p| p.0.push_leaves(tape)),
            prototypes: self.head.prototypes.as_ref().map(|t| tape.leaf(t)),
            raw_precisions: self.head.raw_precisions.as_ref().map(|t| tape.leaf(t)),
        }
    }

    /// Pull episode gradients back into the persistent tensors, in the same
    /// order `push_params` created them.
    pub fn pull_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        let mut handles: Vec<Var> = Vec::new();
        for &(w, b) in &vars.embed.layers {
            handles.push(w);
            handles.push(b);
        }
        if let Some(p) = &vars.precision {
            for &(w, b) in &p.layers {
                handles.push(w);
                handles.push(b);
            }
        }
        if let Some(v) = vars.prototypes {
            handles.push(v);
        }
        if let Some(v) = vars.raw_precisions {
            handles.push(v);
        }
        let mut tensors = self.named_tensors_mut();
        debug_assert_eq!(handles.len(), tensors.len());
        for (h, (_, t)) in handles.iter().zip(tensors.iter_mut()) {
            tape.accumulate_grad_into(*h, t);
        }
    }
}

/// Score a few-shot episode: estimate prototypes (and precisions) from the
/// support set, then produce log-posteriors for closed and open queries.
pub fn forward_fewshot(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ModelVars,
    episode: &Episode,
) -> Result<EpisodeScores> {
    let n = episode.seen_classes.len();
    let support = tape.leaf(&episode.support);
    let s_emb = embed(tape, &params.embed, &vars.embed, support)?;
    let protos = compute_prototypes(tape, s_emb, &episode.support_labels, n)?;

    let precisions = match params.head.prec_source {
        PrecSource::Identity => None,
        PrecSource::Estimated => {
            let pnet = params
                .precision
                .as_ref()
                .ok_or_else(|| Error::Invalid("estimated precisions need a precision net".into()))?;
            let pvars = vars
                .precision
                .as_ref()
                .ok_or_else(|| Error::Invalid("precision net was not pushed onto the tape".into()))?;
            let g_emb = embed(tape, &pnet.0, pvars, support)?;
            Some(compute_precisions(tape, g_emb, &episode.support_labels, n)?)
        }
        PrecSource::Learned => {
            return Err(Error::Invalid(
                "learned precisions are a large-scale feature; few-shot heads estimate them".into(),
            ))
        }
    };

    let score = |tape: &mut Tape, queries: &Tensor, vars: &ModelVars| -> Result<Var> {
        let q = tape.leaf(queries);
        let q_emb = embed(tape, &params.embed, &vars.embed, q)?;
        let dist = match precisions {
            None => distance_euclidean(tape, q_emb, protos)?,
            Some(prec) => distance_mahalanobis(tape, q_emb, protos, prec)?,
        };
        posteriors(tape, dist)
    };

    let closed = score(tape, &episode.closed_query, vars)?;
    let open = if episode.has_open() {
        Some(score(tape, &episode.open_query, vars)?)
    } else {
        None
    };
    Ok(EpisodeScores { closed, open })
}

/// Score a large-scale episode: gather the learned prototype and precision
/// rows of the episode's seen classes (the model restriction), then score
/// closed and open queries against them.
pub fn forward_largescale(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ModelVars,
    episode: &Episode,
) -> Result<EpisodeScores> {
    let proto_table = vars
        .prototypes
        .ok_or_else(|| Error::Invalid("large-scale forward needs a learned prototype table".into()))?;
    let rows: Vec<usize> = episode
        .seen_classes
        .iter()
        .map(|&c| params.head.row_of(c))
        .collect::<Result<_>>()?;
    let protos = tape.gather_rows(proto_table, &rows)?;
    let precisions = match params.head.prec_source {
        PrecSource::Identity => None,
        PrecSource::Learned => {
            let raw_table = vars.raw_precisions.ok_or_else(|| {
                Error::Invalid("mahalanobis large-scale head is missing precisions".into())
            })?;
            let raw = tape.gather_rows(raw_table, &rows)?;
            let sp = tape.softplus(raw);
            Some(tape.add_scalar(sp, PRECISION_EPS))
        }
        PrecSource::Estimated => {
            return Err(Error::Invalid(
                "estimated precisions are a few-shot feature; large-scale heads learn them".into(),
            ))
        }
    };

    let score = |tape: &mut Tape, queries: &Tensor| -> Result<Var> {
        let q = tape.leaf(queries);
        let q_emb = embed(tape, &params.embed, &vars.embed, q)?;
        let dist = match precisions {
            None => distance_euclidean(tape, q_emb, protos)?,
            Some(prec) => distance_mahalanobis(tape, q_emb, protos, prec)?,
        };
        posteriors(tape, dist)
    };

    let closed = score(tape, &episode.closed_query)?;
    let open = if episode.has_open() { Some(score(tape, &episode.open_query)?) } else { None };
    Ok(EpisodeScores { closed, open })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn tape_with(net: &EmbeddingNet) -> (Tape, EmbeddingVars) {
        let mut tape = Tape::new();
        let vars = net.push_leaves(&mut tape);
        (tape, vars)
    }

    #[test]
    fn zero_net_embeds_everything_to_zero() {
        let mut rng = derive_rng(1, "model-test", 0);
        let mut net = EmbeddingNet::new(&[3, 4, 2], &mut rng).unwrap();
        for l in &mut net.layers {
            l.w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            l.b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (mut tape, vars) = tape_with(&net);
        let x = tape.leaf(&Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, -0.7]).unwrap());
        let y = embed(&mut tape, &net, &vars, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_identity_layer_passes_input_through() {
        let mut rng = derive_rng(1, "model-test", 1);
        let mut net = EmbeddingNet::new(&[2, 2], &mut rng).unwrap();
        net.layers[0].w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        net.layers[0].b = Tensor::vector(vec![0.0, 0.0]);
        let (mut tape, vars) = tape_with(&net);
        let x = tape.leaf(&Tensor::matrix(1, 2, vec![-1.5, 2.5]).unwrap());
        let y = embed(&mut tape, &net, &vars, x).unwrap();
        // Linear output layer: negatives survive.
        assert_eq!(tape.value(y), &[-1.5, 2.5]);
    }

    #[test]
    fn embed_rejects_wrong_width() {
        let mut rng = derive_rng(1, "model-test", 2);
        let net = EmbeddingNet::new(&[3, 2], &mut rng).unwrap();
        let (mut tape, vars) = tape_with(&net);
        let x = tape.leaf(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(embed(&mut tape, &net, &vars, x).is_err());
    }

    #[test]
    fn prototype_of_single_sample_is_itself() {
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let p = compute_prototypes(&mut tape, f, &[0], 1).unwrap();
        assert_eq!(tape.value(p), &[2.0, 3.0]);
    }

    #[test]
    fn prototype_is_class_mean() {
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 4.0]).unwrap());
        let p = compute_prototypes(&mut tape, f, &[0, 0], 1).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0]);
    }

    #[test]
    fn prototypes_ignore_support_order() {
        let rows = [
            vec![0.5, 1.0],
            vec![1.5, -2.0],
            vec![3.0, 0.25],
            vec![-1.0, 2.0],
        ];
        let labels = [0usize, 1, 0, 1];
        let perm = [2usize, 0, 3, 1];
        let build = |order: &[usize]| {
            let data: Vec<f64> =
                order.iter().flat_map(|&i| rows[i].iter().copied()).collect();
            let lab: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let f = tape.leaf(&Tensor::matrix(4, 2, data).unwrap());
            let p = compute_prototypes(&mut tape, f, &lab, 2).unwrap();
            tape.value(p).to_vec()
        };
        assert_eq!(build(&[0, 1, 2, 3]), build(&perm));
    }

    #[test]
    fn missing_class_is_rejected() {
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = compute_prototypes(&mut tape, f, &[0, 0], 2).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn precision_of_identical_outputs_is_softplus_of_value() {
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, -2.0, 1.0, -2.0]).unwrap());
        let a = compute_precisions(&mut tape, g, &[0, 0], 1).unwrap();
        let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p() + PRECISION_EPS;
        let got = tape.value(a);
        assert!((got[0] - sp(1.0)).abs() < 1e-15);
        assert!((got[1] - sp(-2.0)).abs() < 1e-15);
    }

    #[test]
    fn precision_at_zero_mean_is_ln_two_plus_eps() {
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::matrix(2, 1, vec![3.0, -3.0]).unwrap());
        let a = compute_precisions(&mut tape, g, &[0, 0], 1).unwrap();
        let expect = 2.0_f64.ln() + PRECISION_EPS;
        assert!((tape.value(a)[0] - expect).abs() < 1e-12, "{}", tape.value(a)[0]);
    }

    #[test]
    fn precision_of_two_samples_matches_hand_computation() {
        let u1 = [0.7, -1.3];
        let u2 = [0.1, 2.2];
        let mut tape = Tape::new();
        let g = tape
            .leaf(&Tensor::matrix(2, 2, vec![u1[0], u1[1], u2[0], u2[1]]).unwrap());
        let a = compute_precisions(&mut tape, g, &[0, 0], 1).unwrap();
        let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        for m in 0..2 {
            let mean = (u1[m] + u2[m]) / 2.0;
            let expect = sp(mean) + PRECISION_EPS;
            assert!((tape.value(a)[m] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn euclidean_distance_examples() {
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 1.0, 2.0]).unwrap());
        let p = tape.leaf(&Tensor::matrix(2, 2, vec![0.0, 0.0, 4.0, 6.0]).unwrap());
        let d = distance_euclidean(&mut tape, f, p).unwrap();
        let v = tape.value(d);
        assert_eq!(v[0], 0.0); // f == proto 0
        assert_eq!(v[2], 1.0); // [1,0] vs origin
        assert_eq!(v[5], 25.0); // [1,2] vs [4,6]: 9 + 16
    }

    #[test]
    fn mahalanobis_matches_direct_formula() {
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 2.0]).unwrap());
        let p = tape.leaf(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let a = tape.leaf(&Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let d = distance_mahalanobis(&mut tape, f, p, a).unwrap();
        let v = tape.value(d);
        assert_eq!(v[0], 2.0); // 2*1 + 3*0
        assert_eq!(v[1], 14.0); // 2*1 + 3*4
    }

    #[test]
    fn unit_precision_reduces_to_euclidean() {
        let mut rng = derive_rng(13, "model-test", 3);
        for _ in 0..50 {
            let q = 1 + (rng.gen::<u64>() % 6) as usize;
            let k = 1 + (rng.gen::<u64>() % 5) as usize;
            let d = 1 + (rng.gen::<u64>() % 7) as usize;
            let fdata: Vec<f64> = (0..q * d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let pdata: Vec<f64> = (0..k * d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let mut tape = Tape::new();
            let f = tape.leaf(&Tensor::matrix(q, d, fdata).unwrap());
            let p = tape.leaf(&Tensor::matrix(k, d, pdata).unwrap());
            let ones = tape.leaf(&Tensor::filled(vec![k, d], 1.0));
            let de = distance_euclidean(&mut tape, f, p).unwrap();
            let dm = distance_mahalanobis(&mut tape, f, p, ones).unwrap();
            for (a, b) in tape.value(de).iter().zip(tape.value(dm)) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn posterior_examples() {
        let mut tape = Tape::new();
        let d = tape.leaf(&Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let lp = posteriors(&mut tape, d).unwrap();
        let post = Posterior::from_tape(&tape, lp);
        let probs: Vec<f64> = post.log_probs().data().iter().map(|v| v.exp()).collect();
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);

        let mut tape = Tape::new();
        let d = tape.leaf(&Tensor::matrix(1, 2, vec![0.0, 9.0_f64.ln()]).unwrap());
        let lp = posteriors(&mut tape, d).unwrap();
        let post = Posterior::from_tape(&tape, lp);
        let probs: Vec<f64> = post.log_probs().data().iter().map(|v| v.exp()).collect();
        assert!((probs[0] - 0.9).abs() < 1e-12, "{probs:?}");
        assert!((probs[1] - 0.1).abs() < 1e-12);

        let mut tape = Tape::new();
        let d = tape.leaf(&Tensor::matrix(1, 3, vec![0.0, 1e6, 1e6]).unwrap());
        let lp = posteriors(&mut tape, d).unwrap();
        let post = Posterior::from_tape(&tape, lp);
        let scores = post.max_probabilities();
        assert!((scores[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_baseline_matches_hand_softmax() {
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(&Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.5]).unwrap());
        let lp = linear_baseline_log_probs(&mut tape, f, w).unwrap();
        // logits = [1, 2, 0]; softmax by hand.
        let z = [1.0_f64, 2.0, 0.0];
        let lse = (z[0].exp() + z[1].exp() + z[2].exp()).ln();
        for (got, zi) in tape.value(lp).iter().zip(z) {
            assert!((got - (zi - lse)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_baseline_with_zero_weights_is_uniform() {
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(2, 3, vec![0.4, -0.2, 1.0, 0.0, 0.7, -0.5]).unwrap());
        let w = tape.leaf(&Tensor::zeros(vec![3, 4]));
        let lp = linear_baseline_log_probs(&mut tape, f, w).unwrap();
        for v in tape.value(lp) {
            assert!((v + 4.0_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let mut rng = derive_rng(14, "model-test", 4);
        for _ in 0..30 {
            let q = 1 + (rng.gen::<u64>() % 8) as usize;
            let k = 1 + (rng.gen::<u64>() % 8) as usize;
            let data: Vec<f64> = (0..q * k).map(|_| rng.gen::<f64>() * 100.0).collect();
            let mut tape = Tape::new();
            let d = tape.leaf(&Tensor::matrix(q, k, data).unwrap());
            let lp = posteriors(&mut tape, d).unwrap();
            let post = Posterior::from_tape(&tape, lp);
            for r in 0..q {
                let s: f64 = post.log_probs().row(r).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() <= 1e-9, "row sum {s}");
            }
            for sc in post.max_probabilities() {
                assert!(sc > 0.0 && sc <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn posterior_argmax_ignores_constant_distance_shifts() {
        let mut rng = derive_rng(15, "model-test", 5);
        for _ in 0..20 {
            let k = 3 + (rng.gen::<u64>() % 4) as usize;
            let base: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 10.0).collect();
            let shift = rng.gen::<f64>() * 50.0 - 25.0;
            let shifted: Vec<f64> = base.iter().map(|v| v + shift).collect();
            let run = |d: Vec<f64>| {
                let mut tape = Tape::new();
                let dv = tape.leaf(&Tensor::matrix(1, k, d).unwrap());
                let lp = posteriors(&mut tape, dv).unwrap();
                Posterior::from_tape(&tape, lp).argmax_rows()[0]
            };
            assert_eq!(run(base), run(shifted));
        }
    }

    fn learned_head(kind: HeadKind) -> DistanceHead {
        let mut rng = derive_rng(16, "model-test", 6);
        let mut head = DistanceHead::largescale(kind, vec![10, 11, 12, 13, 14, 15], 3, &mut rng)
            .unwrap();
        // Spread the prototypes so posteriors are distinctive.
        let protos = head.prototypes.as_mut().unwrap();
        for (i, v) in protos.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        head
    }

    #[test]
    fn restriction_narrows_posterior_width() {
        let head = learned_head(HeadKind::Euclidean);
        let sub = head.restrict_to_seen(&[11, 13, 14, 15]).unwrap();
        let q = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.1]).unwrap();
        let post = sub.posteriors_for(&q).unwrap();
        assert_eq!(post.n_classes(), 4);
    }

    #[test]
    fn restricting_to_all_classes_changes_nothing() {
        let head = learned_head(HeadKind::Mahalanobis);
        let all = head.class_ids.clone();
        let sub = head.restrict_to_seen(&all).unwrap();
        let q = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.5]).unwrap();
        let a = head.posteriors_for(&q).unwrap();
        let b = sub.posteriors_for(&q).unwrap();
        assert_eq!(a.log_probs().data(), b.log_probs().data());
    }

    #[test]
    fn restriction_is_idempotent() {
        let head = learned_head(HeadKind::Euclidean);
        let seen = vec![12, 10, 15];
        let once = head.restrict_to_seen(&seen).unwrap();
        let twice = once.restrict_to_seen(&seen).unwrap();
        assert_eq!(once.class_ids, twice.class_ids);
        assert_eq!(
            once.prototypes.as_ref().unwrap().data(),
            twice.prototypes.as_ref().unwrap().data()
        );
    }

    #[test]
    fn restriction_rejects_unknown_class() {
        let head = learned_head(HeadKind::Euclidean);
        let err = head.restrict_to_seen(&[10, 99]).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }
}
