//! Plain-text checkpoints.
//!
//! ```text
//! ISLU-CKPT v1
//! variant=ONLINE,vocab_size=74,embedding_dim=556,...
//! embedding 74 556
//! <one line per row, 17 significant digits per value>
//! intent.w_x 128 556
//! ...
//! ```
//!
//! Values are written through `f64` with 17 significant digits, which
//! round-trips both `f32` and `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ModelConfig, Parameters, Variant};
use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_HEADER: &str = "ISLU-CKPT v1";

pub fn format_checkpoint<S: Scalar>(params: &Parameters<S>, config: &ModelConfig) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&config.to_line());
    out.push('\n');
    for (name, t) in params.tensors() {
        out.push_str(&name);
        for d in t.dims() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for r in 0..t.rows() {
            let row = t.row(r);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{:.16e}", v.as_f64());
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_checkpoint<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_checkpoint(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(Parameters<S>, ModelConfig)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

/// Loads a checkpoint and insists on a particular variant.
pub fn load_checkpoint_as<S: Scalar>(
    path: impl AsRef<Path>,
    expected: Variant,
) -> Result<(Parameters<S>, ModelConfig)> {
    let (p, c) = load_checkpoint(path)?;
    if c.variant != expected {
        return Err(Error::VariantMismatch {
            expected: expected.to_string(),
            found: c.variant.to_string(),
        });
    }
    Ok((p, c))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn parse_checkpoint<S: Scalar>(text: &str) -> Result<(Parameters<S>, ModelConfig)> {
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(corrupt("file truncated (no final newline)"));
    }
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| corrupt("empty file"))?;
    match header.strip_prefix("ISLU-CKPT ") {
        Some("v1") => {}
        Some(v) => return Err(Error::CheckpointVersion(v.to_string())),
        None => return Err(corrupt("missing ISLU-CKPT header")),
    }
    let config_line = lines.next().ok_or_else(|| corrupt("missing config line"))?;
    let config = ModelConfig::parse_line(config_line)
        .map_err(|e| corrupt(format!("config line: {e}")))?;

    let mut params = Parameters::<S>::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.dims().to_vec()))
        .collect();

    for ((name, dims), tensor) in expected.iter().zip(params.tensors_mut()) {
        let head = lines
            .next()
            .ok_or_else(|| corrupt(format!("unexpected end of file before `{name}`")))?;
        let mut fields = head.split_whitespace();
        let found_name = fields.next().unwrap_or_default();
        if found_name != name {
            return Err(Error::VariantMismatch {
                expected: format!("tensor `{name}` for {}", config.variant),
                found: format!("`{found_name}`"),
            });
        }
        let found_dims = fields
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| corrupt(format!("bad dimensions for `{name}`")))?;
        if &found_dims != dims {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                expected: dims.clone(),
                found: found_dims,
            });
        }
        read_tensor(&mut lines, name, tensor)?;
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(corrupt("trailing data after last tensor"));
    }
    Ok((params, config))
}

fn read_tensor<'a, S: Scalar>(
    lines: &mut impl Iterator<Item = &'a str>,
    name: &str,
    tensor: &mut Tensor<S>,
) -> Result<()> {
    let cols = tensor.cols();
    for r in 0..tensor.rows() {
        let line = lines
            .next()
            .ok_or_else(|| corrupt(format!("`{name}` truncated at row {r}")))?;
        let row = tensor.row_mut(r);
        let mut n = 0;
        for field in line.split_whitespace() {
            if n == cols {
                return Err(corrupt(format!("`{name}` row {r} has too many values")));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| corrupt(format!("`{name}` row {r}: bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(corrupt(format!("`{name}` row {r}: non-finite value")));
            }
            row[n] = S::of(v);
            n += 1;
        }
        if n != cols {
            return Err(corrupt(format!(
                "`{name}` row {r} has {n} values, expected {cols}"
            )));
        }
    }
    Ok(())
}
