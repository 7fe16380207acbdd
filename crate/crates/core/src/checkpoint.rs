//! Exact text checkpoints.
//!
//! A checkpoint is a structured text document carrying the config echo and
//! its content hash, the episode counter, running loss statistics, every
//! parameter tensor, and the full optimizer state. Values are written with
//! 17 significant digits, which round-trips `f64` bitwise, so resuming from
//! a checkpoint reproduces an uninterrupted run exactly.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{
    AffineLayer, DistanceHead, EmbeddingNet, HeadKind, ModelParams, PrecSource, PrecisionNet,
    ProtoSource,
};
use crate::optim::{AdamState, RunningStats, TrainLoopState};

const MAGIC: &str = "osml-checkpoint v1";

/// A parsed checkpoint: the config that produced it and the loop state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub state: TrainLoopState,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Checkpoint(format!("bad float {s:?}")))
}

fn write_matrix(out: &mut String, tag: &str, name: &str, shape: &[usize], data: &[f64]) {
    out.push_str(tag);
    out.push(' ');
    out.push_str(name);
    out.push(' ');
    out.push_str(&shape.len().to_string());
    for d in shape {
        out.push(' ');
        out.push_str(&d.to_string());
    }
    out.push('\n');
    let cols = match shape {
        [_, c] => *c,
        [n] => *n,
        [] => 1,
        other => panic!("unsupported checkpoint tensor rank {other:?}"),
    };
    let cols = cols.max(1);
    for row in data.chunks(cols) {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

/// Serialize a checkpoint to its canonical text form.
pub fn checkpoint_to_string(cfg: &TrainConfig, state: &TrainLoopState) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("config_hash {}\n", cfg.hash_hex()));
    out.push_str(&format!("episode {}\n", state.episode));
    out.push_str(&format!("loss_count {}\n", state.loss_stats.count));
    out.push_str(&format!("loss_mean {}\n", fmt_f64(state.loss_stats.mean)));
    out.push_str(&format!("adam_t {}\n", state.adam.t));
    let head = &state.params.head;
    out.push_str(&format!(
        "meta head {}\n",
        match head.kind {
            HeadKind::Euclidean => "euclidean",
            HeadKind::Mahalanobis => "mahalanobis",
        }
    ));
    out.push_str(&format!(
        "meta proto {}\n",
        match head.proto_source {
            ProtoSource::Estimated => "estimated",
            ProtoSource::Learned => "learned",
        }
    ));
    out.push_str(&format!(
        "meta prec {}\n",
        match head.prec_source {
            PrecSource::Identity => "identity",
            PrecSource::Estimated => "estimated",
            PrecSource::Learned => "learned",
        }
    ));
    out.push_str(&format!(
        "meta class_ids {}\n",
        head.class_ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    ));
    for line in cfg.echo().lines() {
        out.push_str("config ");
        out.push_str(line);
        out.push('\n');
    }
    let named = state.params.named_tensors();
    for (name, t) in &named {
        write_matrix(&mut out, "tensor", name, t.shape(), t.data());
    }
    for (i, (name, t)) in named.iter().enumerate() {
        write_matrix(&mut out, "adam_m", name, t.shape(), &state.adam.m[i]);
    }
    for (i, (name, t)) in named.iter().enumerate() {
        write_matrix(&mut out, "adam_v", name, t.shape(), &state.adam.v[i]);
    }
    out.push_str("end\n");
    out
}

pub fn write_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainLoopState) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(cfg, state))?;
    Ok(())
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::str::Lines<'a>>,
    no: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.no += 1;
        self.inner
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file at line {}", self.no)))
    }

    fn peek(&mut self) -> Option<&&'a str> {
        self.inner.peek()
    }
}

fn expect_field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Checkpoint(format!("expected {key:?} line, got {line:?}")))
}

fn read_tagged_matrix(
    lines: &mut Lines,
    tag: &str,
    expect_name: &str,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let header = lines.next()?;
    let mut parts = header.split(' ');
    let got_tag = parts.next().unwrap_or("");
    let got_name = parts.next().unwrap_or("");
    if got_tag != tag || got_name != expect_name {
        return Err(Error::Checkpoint(format!(
            "expected `{tag} {expect_name}`, got {header:?}"
        )));
    }
    let ndim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad tensor header {header:?}")))?;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor header {header:?}")))?;
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let value_lines = if numel == 0 {
        0
    } else {
        match shape.as_slice() {
            [r, _] => *r,
            _ => 1,
        }
    };
    let mut data = Vec::with_capacity(numel);
    for _ in 0..value_lines {
        let line = lines.next()?;
        for field in line.split(' ') {
            data.push(parse_f64(field)?);
        }
    }
    if data.len() != numel {
        return Err(Error::Checkpoint(format!(
            "tensor {expect_name}: expected {numel} values, got {}",
            data.len()
        )));
    }
    Ok((shape, data))
}

/// Names a checkpoint must carry given a config, in serialization order.
fn expected_tensor_names(cfg: &TrainConfig) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let n_layers = cfg.hidden.len() + 1;
    for i in 0..n_layers {
        names.push(format!("embed.l{i}.w"));
        names.push(format!("embed.l{i}.b"));
    }
    if cfg.prec_source()? == PrecSource::Estimated {
        for i in 0..n_layers {
            names.push(format!("precision.l{i}.w"));
            names.push(format!("precision.l{i}.b"));
        }
    }
    if cfg.proto_source() == ProtoSource::Learned {
        names.push("head.prototypes".into());
        if cfg.prec_source()? == PrecSource::Learned {
            names.push("head.raw_precisions".into());
        }
    }
    Ok(names)
}

/// Parse a checkpoint document back into config and loop state.
pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines { inner: text.lines().peekable(), no: 0 };
    let magic = lines.next()?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("not a checkpoint (magic {magic:?})")));
    }
    let config_hash = expect_field(lines.next()?, "config_hash")?.to_string();
    let episode: u64 = expect_field(lines.next()?, "episode")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad episode counter".into()))?;
    let loss_count: u64 = expect_field(lines.next()?, "loss_count")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad loss_count".into()))?;
    let loss_mean = parse_f64(expect_field(lines.next()?, "loss_mean")?)?;
    let adam_t: u64 = expect_field(lines.next()?, "adam_t")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad adam_t".into()))?;

    let head_kind = match expect_field(lines.next()?, "meta head")? {
        "euclidean" => HeadKind::Euclidean,
        "mahalanobis" => HeadKind::Mahalanobis,
        other => return Err(Error::Checkpoint(format!("unknown head kind {other:?}"))),
    };
    let proto_source = match expect_field(lines.next()?, "meta proto")? {
        "estimated" => ProtoSource::Estimated,
        "learned" => ProtoSource::Learned,
        other => return Err(Error::Checkpoint(format!("unknown proto source {other:?}"))),
    };
    let prec_source = match expect_field(lines.next()?, "meta prec")? {
        "identity" => PrecSource::Identity,
        "estimated" => PrecSource::Estimated,
        "learned" => PrecSource::Learned,
        other => return Err(Error::Checkpoint(format!("unknown precision source {other:?}"))),
    };
    let ids_field = expect_field(lines.next()?, "meta class_ids")?;
    let class_ids: Vec<usize> = if ids_field.is_empty() {
        Vec::new()
    } else {
        ids_field
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad class id {s:?}"))))
            .collect::<Result<_>>()?
    };

    let mut echo = String::new();
    while let Some(line) = lines.peek() {
        if let Some(rest) = line.strip_prefix("config ") {
            echo.push_str(rest);
            echo.push('\n');
            lines.next()?;
        } else {
            break;
        }
    }
    let config = TrainConfig::parse_str(&echo)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    if config.hash_hex() != config_hash {
        return Err(Error::Checkpoint(
            "stored config hash does not match the embedded config".into(),
        ));
    }

    let names = expected_tensor_names(&config)?;
    let mut tensors = Vec::with_capacity(names.len());
    for name in &names {
        let (shape, data) = read_tagged_matrix(&mut lines, "tensor", name)?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    let mut adam_m = Vec::with_capacity(names.len());
    for name in &names {
        let (_, data) = read_tagged_matrix(&mut lines, "adam_m", name)?;
        adam_m.push(data);
    }
    let mut adam_v = Vec::with_capacity(names.len());
    for name in &names {
        let (_, data) = read_tagged_matrix(&mut lines, "adam_v", name)?;
        adam_v.push(data);
    }
    if lines.next()? != "end" {
        return Err(Error::Checkpoint("missing end marker".into()));
    }

    // Reassemble the parameter set in the same order it was written.
    let n_layers = config.hidden.len() + 1;
    let mut it = tensors.into_iter();
    let take_layers = |it: &mut std::vec::IntoIter<Tensor>| -> Result<Vec<AffineLayer>> {
        (0..n_layers)
            .map(|_| {
                let w = it.next().ok_or_else(|| Error::Checkpoint("missing tensor".into()))?;
                let b = it.next().ok_or_else(|| Error::Checkpoint("missing tensor".into()))?;
                Ok(AffineLayer { w, b })
            })
            .collect()
    };
    let embed = EmbeddingNet::from_layers(take_layers(&mut it)?)?;
    let precision = if prec_source == PrecSource::Estimated {
        let net = EmbeddingNet::from_layers(take_layers(&mut it)?)?;
        Some(PrecisionNet(net))
    } else {
        None
    };
    let (prototypes, raw_precisions) = if proto_source == ProtoSource::Learned {
        let p = it.next().ok_or_else(|| Error::Checkpoint("missing prototype table".into()))?;
        let r = if prec_source == PrecSource::Learned {
            Some(it.next().ok_or_else(|| Error::Checkpoint("missing precision table".into()))?)
        } else {
            None
        };
        (Some(p), r)
    } else {
        (None, None)
    };

    let head = DistanceHead {
        kind: head_kind,
        proto_source,
        prec_source,
        class_ids,
        prototypes,
        raw_precisions,
    };
    head.validate()?;
    let params = ModelParams { embed, precision, head };

    let expect_sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    for (i, (m, v)) in adam_m.iter().zip(&adam_v).enumerate() {
        if m.len() != expect_sizes[i] || v.len() != expect_sizes[i] {
            return Err(Error::Checkpoint(format!(
                "optimizer state sizes do not match parameter {}",
                names[i]
            )));
        }
    }

    Ok(Checkpoint {
        config,
        config_hash,
        state: TrainLoopState {
            episode,
            params,
            adam: AdamState { t: adam_t, m: adam_m, v: adam_v },
            loss_stats: RunningStats { count: loss_count, mean: loss_mean },
        },
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    parse_checkpoint(&text)
}
