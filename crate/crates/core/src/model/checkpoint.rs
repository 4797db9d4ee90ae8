//! Checkpoint container: a text header followed by little-endian `f64`
//! payloads.
//!
//! ```text
//! objaoa-checkpoint 1
//! config d_model=64
//! ...
//! state step=120
//! state stage=xe
//! score cider=1.25
//! param enc.0.attn.wq 64x64
//! ...
//! payload 812345
//! <812345 × 8 bytes>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "objaoa-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Xe,
    Scst,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Xe => "xe",
            Stage::Scst => "scst",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "xe" => Some(Stage::Xe),
            "scst" => Some(Stage::Scst),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainerState {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub stage: Stage,
}

/// Parameters plus everything needed to rebuild and rank them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    pub state: TrainerState,
    /// Dev-set scores by metric name.
    pub scores: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: Params) -> Self {
        Checkpoint {
            config,
            params,
            state: TrainerState {
                step: 0,
                stage: Stage::Xe,
            },
            scores: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        h.push_str(MAGIC);
        h.push('\n');
        for (k, v) in self.config.entries() {
            writeln!(h, "config {k}={v}").expect("String write");
        }
        writeln!(h, "state step={}", self.state.step).expect("String write");
        writeln!(h, "state stage={}", self.state.stage.as_str()).expect("String write");
        for (k, v) in &self.scores {
            writeln!(h, "score {k}={v}").expect("String write");
        }
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(h, "param {name} {}", dims.join("x")).expect("String write");
        }
        writeln!(h, "payload {}", self.params.count()).expect("String write");
        let mut out = h.into_bytes();
        out.reserve(self.params.count() * 8);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse { line, message };
        let mut pos = 0;
        let mut line_no = 0;
        let mut next_line = |pos: &mut usize| -> Result<(usize, String)> {
            line_no += 1;
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| perr(line_no, "truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| perr(line_no, "header is not UTF-8".into()))?;
            *pos += end + 1;
            Ok((line_no, line.to_string()))
        };
        let (_, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(perr(1, format!("not a checkpoint (header {magic:?})")));
        }
        let mut config = ModelConfig::default();
        let mut seen = Vec::new();
        let mut step = None;
        let mut stage = None;
        let mut scores = BTreeMap::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let total = loop {
            let (n, line) = next_line(&mut pos)?;
            let (kind, rest) = line.split_once(' ').ok_or_else(|| perr(n, format!("bad line {line:?}")))?;
            match kind {
                "config" | "state" | "score" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| perr(n, format!("bad entry {rest:?}")))?;
                    match kind {
                        "config" => {
                            if !config.set(k, v).map_err(|e| perr(n, e.to_string()))? {
                                return Err(perr(n, format!("unknown config key {k}")));
                            }
                            seen.push(k.to_string());
                        }
                        "state" => match k {
                            "step" => step = Some(v.parse().map_err(|_| perr(n, format!("bad step {v:?}")))?),
                            "stage" => {
                                stage = Some(Stage::parse(v).ok_or_else(|| perr(n, format!("bad stage {v:?}")))?)
                            }
                            _ => return Err(perr(n, format!("unknown state key {k}"))),
                        },
                        _ => {
                            let s: f64 = v.parse().map_err(|_| perr(n, format!("bad score {v:?}")))?;
                            scores.insert(k.to_string(), s);
                        }
                    }
                }
                "param" => {
                    let (name, dims) = rest.split_once(' ').ok_or_else(|| perr(n, format!("bad param {rest:?}")))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| perr(n, format!("bad shape {dims:?}")))?;
                    specs.push((name.to_string(), shape));
                }
                "payload" => {
                    break rest.parse::<usize>().map_err(|_| perr(n, format!("bad payload size {rest:?}")))?;
                }
                _ => return Err(perr(n, format!("unknown record {kind:?}"))),
            }
        };
        if seen.len() != ModelConfig::KEYS.len() {
            return Err(perr(0, "incomplete config section".into()));
        }
        let declared: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if declared != total {
            return Err(perr(0, format!("payload {total} disagrees with shapes ({declared})")));
        }
        let payload = &bytes[pos..];
        if payload.len() != total * 8 {
            return Err(perr(
                0,
                format!("payload holds {} bytes, expected {}", payload.len(), total * 8),
            ));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        let state = TrainerState {
            step: step.ok_or_else(|| perr(0, "missing state step".into()))?,
            stage: stage.ok_or_else(|| perr(0, "missing state stage".into()))?,
        };
        config
            .validate()
            .map_err(|e| Error::Compatibility(e.to_string()))?;
        let params = Params::new(names, tensors);
        params.check_layout(&config)?;
        Ok(Checkpoint {
            config,
            params,
            state,
            scores,
        })
    }
}

/// Writes through a sibling temporary file, so a failed save leaves no
/// partial checkpoint behind.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
