//! Checkpoint file format.
//!
//! Layout: a `FSMN1` header line, a textual key=value config record
//! terminated by a blank line, then for each named tensor a name line, a
//! `rows cols` line, and rows×cols little-endian f64 values. Training
//! state (epoch, schedule, momentum velocities) rides along so a run can
//! resume exactly. Round-trips are byte-identical: float-valued record
//! entries are written in shortest round-trip decimal form and tensors in
//! a fixed canonical order.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{init_parameters, ModelConfig, Parameters};
use crate::optim::{Phase, ScheduleState};

pub const MAGIC: &str = "FSMN1";

/// Optimizer-side state needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    pub schedule: ScheduleState,
    pub velocity: Parameters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub train: Option<TrainState>,
}

fn write_config_record(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let c = &ckpt.config;
    writeln!(w, "vocab_size={}", c.vocab_size)?;
    writeln!(w, "context_window={}", c.context_window)?;
    writeln!(w, "embed_dim={}", c.embed_dim)?;
    writeln!(w, "hidden_dims={}", join_usizes(&c.hidden_dims))?;
    writeln!(w, "memory_at={}", join_usizes(&c.memory_at.iter().copied().collect::<Vec<_>>()))?;
    writeln!(w, "memory_order={}", c.memory_order)?;
    if let Some(t) = &ckpt.train {
        writeln!(w, "epoch={}", t.epoch)?;
        let phase = match t.schedule.phase {
            Phase::Stable => "stable",
            Phase::Halving => "halving",
        };
        writeln!(w, "phase={phase}")?;
        writeln!(w, "best_val_ppl={:?}", t.schedule.best_val_ppl)?;
        writeln!(w, "halving_epochs_done={}", t.schedule.halving_epochs_done)?;
        writeln!(w, "current_scale={:?}", t.schedule.current_scale)?;
    }
    writeln!(w)?;
    Ok(())
}

fn join_usizes(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Checkpoint(format!("bad integer list entry {p:?}")))
        })
        .collect()
}

fn write_tensor(w: &mut impl Write, name: &str, m: &Matrix) -> Result<()> {
    writeln!(w, "{name}")?;
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    write_config_record(&mut w, ckpt)?;
    for (name, m) in ckpt.params.tensors() {
        write_tensor(&mut w, &name, m)?;
    }
    if let Some(t) = &ckpt.train {
        for (name, m) in t.velocity.tensors() {
            write_tensor(&mut w, &format!("velocity.{name}"), m)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_line(r: &mut impl BufRead) -> Result<Option<String>> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Ok(None);
    }
    while line.ends_with('\n') || line.ends_with('\r') {
        line.pop();
    }
    Ok(Some(line))
}

fn expect_line(r: &mut impl BufRead, what: &str) -> Result<String> {
    read_line(r)?.ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, wanted {what}")))
}

fn get<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("missing config key {key}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("bad value {s:?} for {key}")))
}

fn read_tensor_into(r: &mut impl BufRead, name: &str, dst: &mut Matrix) -> Result<()> {
    let shape_line = expect_line(r, "tensor shape")?;
    let mut parts = shape_line.split_whitespace();
    let rows: usize = parse_num(parts.next().unwrap_or(""), "tensor rows")?;
    let cols: usize = parse_num(parts.next().unwrap_or(""), "tensor cols")?;
    if (rows, cols) != dst.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor {name}: file shape {rows}x{cols} does not match config shape {}x{}",
            dst.rows(),
            dst.cols()
        )));
    }
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("tensor {name}: truncated data")))?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        dst.as_mut_slice()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = expect_line(&mut r, "magic header")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut kv = Vec::new();
    loop {
        let line = expect_line(&mut r, "config record")?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
        kv.push((k.to_string(), v.to_string()));
    }
    let config = ModelConfig {
        vocab_size: parse_num(get(&kv, "vocab_size")?, "vocab_size")?,
        context_window: parse_num(get(&kv, "context_window")?, "context_window")?,
        embed_dim: parse_num(get(&kv, "embed_dim")?, "embed_dim")?,
        hidden_dims: parse_usizes(get(&kv, "hidden_dims")?)?,
        memory_at: parse_usizes(get(&kv, "memory_at")?)?.into_iter().collect::<BTreeSet<_>>(),
        memory_order: parse_num(get(&kv, "memory_order")?, "memory_order")?,
    };
    config.validate()?;

    let has_train = kv.iter().any(|(k, _)| k == "epoch");
    let train_header = if has_train {
        Some(ScheduleState {
            phase: match get(&kv, "phase")? {
                "stable" => Phase::Stable,
                "halving" => Phase::Halving,
                other => return Err(Error::Checkpoint(format!("bad phase {other:?}"))),
            },
            best_val_ppl: parse_num(get(&kv, "best_val_ppl")?, "best_val_ppl")?,
            halving_epochs_done: parse_num(get(&kv, "halving_epochs_done")?, "halving_epochs_done")?,
            current_scale: parse_num(get(&kv, "current_scale")?, "current_scale")?,
        })
    } else {
        None
    };

    // Fill a zero skeleton in canonical order; names must match exactly.
    let mut params = init_parameters(&config, 0)?.zeros_like();
    for (expected, tensor) in params.tensors_mut() {
        let name = expect_line(&mut r, "tensor name")?;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected}, found {name}"
            )));
        }
        read_tensor_into(&mut r, &name, tensor)?;
    }

    let train = if let Some(schedule) = train_header {
        let mut velocity = params.zeros_like();
        for (expected, tensor) in velocity.tensors_mut() {
            let expected = format!("velocity.{expected}");
            let name = expect_line(&mut r, "velocity tensor name")?;
            if name != expected {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {expected}, found {name}"
                )));
            }
            read_tensor_into(&mut r, &name, tensor)?;
        }
        Some(TrainState {
            epoch: parse_num(get(&kv, "epoch")?, "epoch")?,
            schedule,
            velocity,
        })
    } else {
        None
    };

    if read_line(&mut r)?.is_some() {
        return Err(Error::Checkpoint("trailing data after tensors".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn sample_checkpoint(with_train: bool) -> Checkpoint {
        let config = ModelConfig {
            vocab_size: 9,
            context_window: 2,
            embed_dim: 3,
            hidden_dims: vec![5, 4],
            memory_at: BTreeSet::from([1]),
            memory_order: 2,
        };
        let params = init_parameters(&config, 77).unwrap();
        let train = with_train.then(|| TrainState {
            epoch: 3,
            schedule: ScheduleState {
                phase: Phase::Halving,
                best_val_ppl: 42.125,
                halving_epochs_done: 2,
                current_scale: 0.25,
            },
            velocity: init_parameters(&config, 78).unwrap(),
        });
        Checkpoint {
            config,
            params,
            train,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for with_train in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.ckpt");
            let p2 = dir.path().join("b.ckpt");
            let ckpt = sample_checkpoint(with_train);
            save(&p1, &ckpt).unwrap();
            let loaded = load(&p1).unwrap();
            assert_eq!(loaded, ckpt);
            save(&p2, &loaded).unwrap();
            let bytes1 = std::fs::read(&p1).unwrap();
            let bytes2 = std::fs::read(&p2).unwrap();
            assert_eq!(bytes1, bytes2);
        }
    }

    #[test]
    fn fresh_schedule_state_roundtrips() {
        // best_val_ppl starts at infinity; the text form must survive
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut ckpt = sample_checkpoint(true);
        ckpt.train.as_mut().unwrap().schedule = ScheduleState::new();
        save(&path, &ckpt).unwrap();
        assert_eq!(load(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        std::fs::write(&path, b"NOPE\n").unwrap();
        assert!(load(&path).is_err());

        let good = dir.path().join("e.ckpt");
        save(&good, &sample_checkpoint(false)).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load(&path).is_err());
    }
}
