//! Plain-text policy checkpoints.
//!
//! ```text
//! mbcool-policy 1
//! # free-form comment lines
//! value_scale 100
//! activation tanh
//! actor_sizes 64 64 64 2
//! critic_sizes 64 64 64 1
//! actor 8450
//! <one parameter per line>
//! critic 8385
//! <one parameter per line>
//! end
//! ```
//!
//! Parameters of each dense layer are stored as the row-major
//! `out x in` weight matrix followed by the `out` biases, layer after layer.
//! Values are printed in shortest round-trip form, so a reload is bit-exact.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::ppo::agent::PolicyParams;
use crate::ppo::mlp::Mlp;

pub const MAGIC: &str = "mbcool-policy";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(
    policy: &PolicyParams,
    comments: &[String],
    mut w: W,
) -> Result<()> {
    writeln!(w, "{MAGIC} {VERSION}")?;
    for c in comments {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    writeln!(w, "value_scale {}", policy.value_scale)?;
    writeln!(w, "activation tanh")?;
    writeln!(w, "actor_sizes {}", join(policy.actor.sizes()))?;
    writeln!(w, "critic_sizes {}", join(policy.critic.sizes()))?;
    for (name, net) in [("actor", &policy.actor), ("critic", &policy.critic)] {
        writeln!(w, "{name} {}", net.num_params())?;
        for p in net.params() {
            writeln!(w, "{p}")?;
        }
    }
    writeln!(w, "end")?;
    w.flush()?;
    Ok(())
}

fn join(sizes: &[usize]) -> String {
    sizes
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("line {line}: {}", msg.into()))
}

struct Lines<R> {
    inner: std::iter::Enumerate<std::io::Lines<R>>,
}

impl<R: BufRead> Lines<R> {
    /// Next non-empty, non-comment line with its 1-based number.
    fn next(&mut self) -> Result<(usize, String)> {
        for (i, line) in self.inner.by_ref() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Ok((i + 1, t.to_string()));
        }
        Err(Error::Checkpoint("unexpected end of file".into()))
    }

    fn field(&mut self, key: &str) -> Result<(usize, String)> {
        let (i, l) = self.next()?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok((i, v.trim().to_string())),
            _ => Err(bad(i, format!("expected {key:?}, found {l:?}"))),
        }
    }

    fn sizes(&mut self, key: &str) -> Result<Vec<usize>> {
        let (i, v) = self.field(key)?;
        v.split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| bad(i, format!("bad layer size {s:?}")))
            })
            .collect()
    }

    fn network(&mut self, key: &str, sizes: Vec<usize>) -> Result<Mlp> {
        let (i, v) = self.field(key)?;
        let count: usize = v.parse().map_err(|_| bad(i, "bad parameter count"))?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let (j, l) = self.next()?;
            params.push(
                l.parse::<f64>()
                    .map_err(|_| bad(j, format!("bad number {l:?}")))?,
            );
        }
        Mlp::from_params(sizes, params).ok_or_else(|| {
            bad(
                i,
                format!("{key} parameter count does not match its layer sizes"),
            )
        })
    }
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<PolicyParams> {
    let mut lines = Lines {
        inner: r.lines().enumerate(),
    };
    let (i, header) = lines.next()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad(i, format!("expected header {MAGIC:?}")));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(i, "missing version"))?;
    if version != VERSION {
        return Err(bad(i, format!("unsupported version {version}")));
    }

    let (i, v) = lines.field("value_scale")?;
    let value_scale: f64 = v.parse().map_err(|_| bad(i, "bad value_scale"))?;
    let (i, v) = lines.field("activation")?;
    if v != "tanh" {
        return Err(bad(i, format!("unsupported activation {v:?}")));
    }
    let actor_sizes = lines.sizes("actor_sizes")?;
    let critic_sizes = lines.sizes("critic_sizes")?;
    let actor = lines.network("actor", actor_sizes)?;
    let critic = lines.network("critic", critic_sizes)?;
    if actor.output_dim() != 2
        || critic.output_dim() != 1
        || actor.input_dim() != critic.input_dim()
    {
        return Err(Error::Checkpoint("network shapes are inconsistent".into()));
    }
    let (i, l) = lines.next()?;
    if l != "end" {
        return Err(bad(i, "expected end marker"));
    }
    Ok(PolicyParams {
        actor,
        critic,
        value_scale,
    })
}
