//! Versioned text checkpoint for policy weights.
//!
//! Layout (UTF-8, line oriented, no endianness concerns):
//!
//! ```text
//! driftplan-checkpoint 1
//! grid 16
//! conv_channels 4 8 8
//! kernel 3
//! vehicle_widths 8 8
//! fc_widths 64 32
//! n_actions 9
//! dropout 0.5
//! round 120
//! seed 7
//! rng_word_pos 48271
//! tensor recurrent0.w_in 4 4 3 3 3
//! <len> values on one space-separated line
//! ...
//! end
//! ```
//!
//! Values are printed with Rust's shortest round-trip float formatting, so
//! save → load reproduces the weights bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PolicyConfig, PolicyError, PolicyWeights, Result};

const MAGIC: &str = "driftplan-checkpoint";
const VERSION: u32 = 1;

/// Training progress carried alongside the weights so `train --resume`
/// can continue deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    /// Rounds already completed.
    pub round: u64,
    /// Seed the training rng was created from.
    pub seed: u64,
    /// ChaCha word position at the end of `round`.
    pub rng_word_pos: u128,
}

pub fn save_checkpoint(path: &Path, w: &PolicyWeights, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, checkpoint_string(w, meta))?;
    Ok(())
}

pub fn checkpoint_string(w: &PolicyWeights, meta: &CheckpointMeta) -> String {
    let c = &w.cfg;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "grid {}", c.grid);
    let _ = writeln!(
        out,
        "conv_channels {} {} {}",
        c.conv_channels[0], c.conv_channels[1], c.conv_channels[2]
    );
    let _ = writeln!(out, "kernel {}", c.kernel);
    let _ = writeln!(
        out,
        "vehicle_widths {} {}",
        c.vehicle_widths[0], c.vehicle_widths[1]
    );
    let _ = writeln!(out, "fc_widths {} {}", c.fc_widths[0], c.fc_widths[1]);
    let _ = writeln!(out, "n_actions {}", c.n_actions);
    let _ = writeln!(out, "dropout {}", c.dropout);
    let _ = writeln!(out, "round {}", meta.round);
    let _ = writeln!(out, "seed {}", meta.seed);
    let _ = writeln!(out, "rng_word_pos {}", meta.rng_word_pos);
    for (name, slice) in w.param_slices() {
        let _ = writeln!(out, "tensor {name} {}", slice.len());
        let mut line = String::with_capacity(slice.len() * 20);
        for (i, v) in slice.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{v}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyWeights, CheckpointMeta)> {
    let text = fs::read_to_string(path)?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<(PolicyWeights, CheckpointMeta)> {
    let mut lines = text.lines();
    let bad = |msg: &str| PolicyError::Checkpoint(msg.to_string());
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some(MAGIC) {
        return Err(bad("missing magic header"));
    }
    let version: u32 = hp
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version"))?;
    if version != VERSION {
        return Err(PolicyError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }

    let mut take_kv = |key: &str| -> Result<Vec<String>> {
        let line = lines
            .next()
            .ok_or_else(|| PolicyError::Checkpoint(format!("missing '{key}'")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(PolicyError::Checkpoint(format!(
                "expected '{key}', got '{line}'"
            )));
        }
        Ok(parts.map(str::to_string).collect())
    };
    let one_usize = |v: Vec<String>, key: &str| -> Result<usize> {
        v.first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PolicyError::Checkpoint(format!("bad value for '{key}'")))
    };
    let grid = one_usize(take_kv("grid")?, "grid")?;
    let cc = take_kv("conv_channels")?;
    let kernel = one_usize(take_kv("kernel")?, "kernel")?;
    let vw = take_kv("vehicle_widths")?;
    let fw = take_kv("fc_widths")?;
    let n_actions = one_usize(take_kv("n_actions")?, "n_actions")?;
    let dropout: f64 = take_kv("dropout")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad dropout"))?;
    let round: u64 = take_kv("round")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad round"))?;
    let seed: u64 = take_kv("seed")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad seed"))?;
    let rng_word_pos: u128 = take_kv("rng_word_pos")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad rng_word_pos"))?;

    let parse3 = |v: &[String]| -> Result<[usize; 3]> {
        if v.len() != 3 {
            return Err(bad("expected 3 values"));
        }
        Ok([
            v[0].parse().map_err(|_| bad("bad integer"))?,
            v[1].parse().map_err(|_| bad("bad integer"))?,
            v[2].parse().map_err(|_| bad("bad integer"))?,
        ])
    };
    let parse2 = |v: &[String]| -> Result<[usize; 2]> {
        if v.len() != 2 {
            return Err(bad("expected 2 values"));
        }
        Ok([
            v[0].parse().map_err(|_| bad("bad integer"))?,
            v[1].parse().map_err(|_| bad("bad integer"))?,
        ])
    };
    let cfg = PolicyConfig {
        grid,
        conv_channels: parse3(&cc)?,
        kernel,
        vehicle_widths: parse2(&vw)?,
        fc_widths: parse2(&fw)?,
        n_actions,
        dropout,
    };
    cfg.validate()?;

    let mut weights = PolicyWeights::zeros(&cfg);
    {
        let mut slices = weights.param_slices_mut();
        let mut cursor = 0usize;
        loop {
            let line = lines.next().ok_or_else(|| bad("truncated file"))?;
            if line == "end" {
                if cursor != slices.len() {
                    return Err(PolicyError::Checkpoint(format!(
                        "expected {} tensors, found {cursor}",
                        slices.len()
                    )));
                }
                break;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(PolicyError::Checkpoint(format!(
                    "expected tensor header, got '{line}'"
                )));
            }
            let name = parts.next().ok_or_else(|| bad("tensor without name"))?;
            let len: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("tensor without length"))?;
            let (expect_name, slot) = &mut slices[cursor];
            if name != expect_name {
                return Err(PolicyError::Checkpoint(format!(
                    "tensor order mismatch: expected '{expect_name}', got '{name}'"
                )));
            }
            if len != slot.len() {
                return Err(PolicyError::Checkpoint(format!(
                    "tensor '{name}' length {len}, expected {}",
                    slot.len()
                )));
            }
            let data = lines.next().ok_or_else(|| bad("missing tensor data"))?;
            let mut count = 0usize;
            for (i, tok) in data.split_whitespace().enumerate() {
                if i >= slot.len() {
                    return Err(PolicyError::Checkpoint(format!(
                        "tensor '{name}' has extra values"
                    )));
                }
                slot[i] = tok.parse().map_err(|_| {
                    PolicyError::Checkpoint(format!("tensor '{name}': bad float '{tok}'"))
                })?;
                count += 1;
            }
            if count != slot.len() {
                return Err(PolicyError::Checkpoint(format!(
                    "tensor '{name}' has {count} values, expected {}",
                    slot.len()
                )));
            }
            cursor += 1;
        }
    }
    Ok((
        weights,
        CheckpointMeta {
            round,
            seed,
            rng_word_pos,
        },
    ))
}
