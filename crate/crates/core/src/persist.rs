//! Run directories on disk.
//!
//! | file          | contents                                              |
//! |---------------|-------------------------------------------------------|
//! | `config.json` | the [`TrainConfig`], unknown keys rejected            |
//! | `losses.csv`  | `iteration,mean_outer_loss`                           |
//! | `state.bin`   | parameters, see below                                 |
//! | `eval.csv`    | `task_index,A,omega,b,mse`                            |
//!
//! `state.bin` is little-endian: the magic bytes `GAPM`, a `u32` format
//! version, then one record per tensor until end of file. A record is the
//! rank as `u32`, each dimension as `u32`, and the entries as `f64` in
//! row-major order. Tensors appear as weight then bias for every layer,
//! followed by the meta-parameter tensors of the preconditioned layers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{GapError, Result};
use crate::metaloop::{phi_shape, LossPoint, MetaState, RunRecord, TrainConfig};
use crate::mlp::{Layer, MlpParams};
use crate::tasks::{EvalSummary, SinusoidTask, TaskResult};
use crate::tensor::Tensor;

pub const STATE_MAGIC: &[u8; 4] = b"GAPM";
pub const STATE_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const STATE_FILE: &str = "state.bin";
pub const EVAL_FILE: &str = "eval.csv";

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            GapError::Config(e.inner().to_string())
        } else {
            GapError::Config(format!("field `{path}`: {}", e.inner()))
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        GapError::Config(msg) => GapError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_config(path: &Path, config: &TrainConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_losses(path: &Path, losses: &[LossPoint]) -> Result<()> {
    let mut out = String::from("iteration,mean_outer_loss\n");
    for p in losses {
        out.push_str(&format!("{},{}\n", p.iteration, p.mean_outer_loss));
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, path: &Path, line: usize) -> Result<T> {
    field
        .and_then(|f| f.trim().parse().ok())
        .ok_or_else(|| GapError::Format(format!("{}:{}: bad or missing field", path.display(), line + 1)))
}

pub fn read_losses(path: &Path) -> Result<Vec<LossPoint>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut f = line.split(',');
            Ok(LossPoint {
                iteration: parse_field(f.next(), path, i)?,
                mean_outer_loss: parse_field(f.next(), path, i)?,
            })
        })
        .collect()
}

pub fn encode_tensors(tensors: &[&Tensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GapError::Format(format!("state truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(STATE_MAGIC.as_slice()) {
        return Err(GapError::Format("missing GAPM magic".into()));
    }
    let version = r.u32()?;
    if version != STATE_VERSION {
        return Err(GapError::Format(format!("unsupported state version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let payload = r.take(len.checked_mul(8).ok_or_else(|| GapError::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        out.push(Tensor::new(shape, data).map_err(|e| GapError::Format(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_state(path: &Path, state: &MetaState) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensors(&state.tensors()))?;
    Ok(())
}

/// Reads `state.bin` and checks it against the architecture and
/// preconditioner described by `config`.
pub fn read_state(path: &Path, config: &TrainConfig) -> Result<MetaState> {
    let bytes = fs::read(path)?;
    let mut tensors = decode_tensors(&bytes)?.into_iter();
    let mismatch = |what: String| GapError::Format(format!("{}: {what}", path.display()));

    let sizes = &config.layer_sizes;
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for (l, w) in sizes.windows(2).enumerate() {
        let weight = tensors.next().ok_or_else(|| mismatch(format!("missing weight of layer {l}")))?;
        let bias = tensors.next().ok_or_else(|| mismatch(format!("missing bias of layer {l}")))?;
        if weight.shape() != [w[1], w[0]] || bias.shape() != [w[1]] {
            return Err(mismatch(format!(
                "layer {l} has weight {:?} and bias {:?}, expected [{}, {}] and [{}]",
                weight.shape(),
                bias.shape(),
                w[1],
                w[0],
                w[1]
            )));
        }
        layers.push(Layer { weight, bias });
    }
    let theta = MlpParams::new(layers)?;
    let mask = config.layers.mask(theta.num_layers());
    let mut phi = Vec::with_capacity(mask.len());
    for (l, (layer, on)) in theta.layers.iter().zip(mask).enumerate() {
        let expected = if on { phi_shape(config.kind, layer.weight.shape()) } else { None };
        phi.push(match expected {
            None => None,
            Some(shape) => {
                let t = tensors.next().ok_or_else(|| mismatch(format!("missing meta-parameters of layer {l}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(mismatch(format!("meta-parameters of layer {l} have shape {:?}", t.shape())));
                }
                Some(t)
            }
        });
    }
    if tensors.next().is_some() {
        return Err(mismatch("unexpected trailing tensors".into()));
    }
    Ok(MetaState { theta, phi, kind: config.kind, selection: config.layers })
}

pub fn write_eval(path: &Path, summary: &EvalSummary) -> Result<()> {
    let mut out = String::from("task_index,A,omega,b,mse\n");
    for r in &summary.results {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index, r.task.amplitude, r.task.omega, r.task.phase, r.mse
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_eval(path: &Path) -> Result<Vec<TaskResult>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut f = line.split(',');
            Ok(TaskResult {
                index: parse_field(f.next(), path, i)?,
                task: SinusoidTask {
                    amplitude: parse_field(f.next(), path, i)?,
                    omega: parse_field(f.next(), path, i)?,
                    phase: parse_field(f.next(), path, i)?,
                },
                mse: parse_field(f.next(), path, i)?,
            })
        })
        .collect()
}

/// Writes `config.json`, `losses.csv` and `state.bin` into `dir`.
pub fn save_run(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_config(&dir.join(CONFIG_FILE), &record.config)?;
    write_losses(&dir.join(LOSSES_FILE), &record.losses)?;
    write_state(&dir.join(STATE_FILE), &record.state)?;
    Ok(())
}

/// Loads the configuration and final state of a run directory.
pub fn load_run(dir: &Path) -> Result<(TrainConfig, MetaState)> {
    let config = read_config(&dir.join(CONFIG_FILE))?;
    let state = read_state(&dir.join(STATE_FILE), &config)?;
    Ok((config, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preconditioners::PrecondKind;

    #[test]
    fn tensors_round_trip_bit_exactly() {
        let a = Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::scalar(std::f64::consts::PI);
        let bytes = encode_tensors(&[&a, &b]);
        assert_eq!(&bytes[..4], b"GAPM");
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in back.iter().zip([&a, &b]) {
            assert_eq!(x.shape(), y.shape());
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn corrupt_state_is_rejected() {
        let bytes = encode_tensors(&[&Tensor::vector(vec![1.0, 2.0])]);
        assert!(matches!(decode_tensors(&bytes[..bytes.len() - 3]), Err(GapError::Format(_))));
        assert!(matches!(decode_tensors(b"NOPE\x01\0\0\0"), Err(GapError::Format(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(decode_tensors(&wrong_version).is_err());
    }

    #[test]
    fn state_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { kind: PrecondKind::MetaSgd, layer_sizes: vec![1, 4, 3, 1], ..TrainConfig::default() };
        let state = MetaState::init(&config.layer_sizes, config.kind, config.layers, 3).unwrap();
        let path = dir.path().join(STATE_FILE);
        write_state(&path, &state).unwrap();
        assert_eq!(read_state(&path, &config).unwrap(), state);
        let other = TrainConfig { kind: PrecondKind::Gap, ..config };
        assert!(matches!(read_state(&path, &other), Err(GapError::Format(_))));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(parse_config(r#"{"shots": 5, "bogus": 1}"#), Err(GapError::Config(_))));
        match parse_config(r#"{"alpha": 0}"#) {
            Err(GapError::Config(m)) => assert!(m.contains("alpha")),
            other => panic!("{other:?}"),
        }
        let c = parse_config(r#"{"kind": "identity", "shots": 10}"#).unwrap();
        assert_eq!(c.kind, PrecondKind::Identity);
        assert_eq!(c.iterations, 70_000);
    }

    #[test]
    fn csv_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let losses = vec![
            LossPoint { iteration: 100, mean_outer_loss: 0.1 + 0.2 },
            LossPoint { iteration: 200, mean_outer_loss: 1.0 / 3.0 },
        ];
        let p = dir.path().join(LOSSES_FILE);
        write_losses(&p, &losses).unwrap();
        assert_eq!(read_losses(&p).unwrap(), losses);

        let task = SinusoidTask { amplitude: 1.5, omega: 0.9, phase: 0.1 };
        let summary = EvalSummary {
            results: vec![TaskResult { index: 0, task, mse: 0.25 }, TaskResult { index: 1, task, mse: 1e-3 }],
            mean: 0.1255,
            ci95: 0.0,
        };
        let p = dir.path().join(EVAL_FILE);
        write_eval(&p, &summary).unwrap();
        assert_eq!(read_eval(&p).unwrap(), summary.results);
    }
}
