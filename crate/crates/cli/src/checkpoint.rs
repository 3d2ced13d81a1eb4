//! Checkpoint files: a text manifest followed by a little-endian f32 payload.
//!
//! ```text
//! lkdn-checkpoint 1
//! config scale=4
//! ...
//! meta step=1200
//! tensor param.block0.d1.conv.weight shape=28,56,1,1 dtype=f32 offset=0 length=6272
//! ...
//! checksum sha256=<hex of payload>
//! payload
//! <raw bytes>
//! ```
//!
//! Tensor names carry their section as a prefix: `param.`, `ema.` or
//! `opt.<slot>.`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use lkdn_core::optim::OptimizerKind;
use lkdn_core::{LkdnConfig, Shape, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &str = "lkdn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: LkdnConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: BTreeMap<String, Tensor>,
    pub ema: Option<BTreeMap<String, Tensor>>,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run metadata (seed, recipe), preserved verbatim.
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(CliError::usage(format!("{what} `{s}` cannot be stored in a checkpoint")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(config: LkdnConfig, params: BTreeMap<String, Tensor>) -> Self {
        Checkpoint {
            config,
            step: 0,
            params,
            ema: None,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    /// The weights inference should use: EMA shadows when present.
    pub fn inference_params(&self) -> &BTreeMap<String, Tensor> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    fn sections(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(k, v)| (format!("param.{k}"), v)).collect();
        if let Some(ema) = &self.ema {
            out.extend(ema.iter().map(|(k, v)| (format!("ema.{k}"), v)));
        }
        if let Some(opt) = &self.optimizer {
            out.extend(opt.tensors.iter().map(|(k, v)| (format!("opt.{k}"), v)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = format!("{MAGIC} {VERSION}\n");
        for (k, v) in self.config.to_pairs() {
            manifest.push_str(&format!("config {k}={v}\n"));
        }
        manifest.push_str(&format!("meta step={}\n", self.step));
        if let Some(opt) = &self.optimizer {
            manifest.push_str(&format!("meta optimizer={}\n", opt.kind.as_str()));
            manifest.push_str(&format!("meta optimizer_step={}\n", opt.step));
        }
        for (k, v) in &self.meta {
            check_token(k, "metadata key")?;
            check_token(v, "metadata value")?;
            manifest.push_str(&format!("meta {k}={v}\n"));
        }
        let mut payload = Vec::new();
        for (name, t) in self.sections() {
            check_token(&name, "tensor name")?;
            let bytes = t.to_le_bytes();
            manifest.push_str(&format!(
                "tensor {name} shape={} dtype=f32 offset={} length={}\n",
                t.shape(),
                payload.len(),
                bytes.len()
            ));
            payload.extend_from_slice(&bytes);
        }
        manifest.push_str(&format!("checksum sha256={}\npayload\n", hex(&Sha256::digest(&payload))));
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted write never replaces a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            CliError::output(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| CliError::format(path, msg))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let marker = b"\npayload\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or("missing payload marker")?;
        let manifest = std::str::from_utf8(&bytes[..split]).map_err(|_| "manifest is not UTF-8")?;
        let payload = &bytes[split + marker.len()..];

        let mut lines = manifest.lines();
        let header = lines.next().ok_or("empty manifest")?;
        match header.split_once(' ') {
            Some((MAGIC, v)) if v == VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(format!("unsupported checkpoint version {v}")),
            _ => return Err("not a checkpoint file".into()),
        }

        let mut config_pairs = Vec::new();
        let mut meta = BTreeMap::new();
        let mut checksum = None;
        let mut tensors = Vec::new();
        for line in lines {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| format!("malformed line `{line}`"))?;
            match kind {
                "config" | "meta" | "checksum" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| format!("malformed line `{line}`"))?;
                    match kind {
                        "config" => config_pairs.push((k.to_string(), v.to_string())),
                        "meta" => {
                            meta.insert(k.to_string(), v.to_string());
                        }
                        _ if k == "sha256" => checksum = Some(v.to_string()),
                        _ => return Err(format!("unknown checksum kind `{k}`")),
                    }
                }
                "tensor" => tensors.push(parse_tensor_line(rest)?),
                other => return Err(format!("unknown manifest entry `{other}`")),
            }
        }

        let expected = checksum.ok_or("missing checksum")?;
        if hex(&Sha256::digest(payload)) != expected {
            return Err("checksum mismatch: payload is corrupt".into());
        }
        let config = LkdnConfig::from_pairs(config_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .map_err(|e| e.to_string())?;

        let mut params = BTreeMap::new();
        let mut ema = BTreeMap::new();
        let mut opt = BTreeMap::new();
        for (name, shape, offset, length) in tensors {
            let end = offset.checked_add(length).filter(|&e| e <= payload.len());
            let end = end.ok_or_else(|| format!("tensor `{name}` extends past the payload"))?;
            let t = Tensor::from_le_bytes(shape, &payload[offset..end]).map_err(|e| format!("tensor `{name}`: {e}"))?;
            if let Some(n) = name.strip_prefix("param.") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("ema.") {
                ema.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("opt.") {
                opt.insert(n.to_string(), t);
            } else {
                return Err(format!("tensor `{name}` has no known section"));
            }
        }

        let take_num = |meta: &mut BTreeMap<String, String>, key: &str| -> std::result::Result<Option<u64>, String> {
            meta.remove(key)
                .map(|v| v.parse().map_err(|_| format!("meta {key} is not an integer")))
                .transpose()
        };
        let step = take_num(&mut meta, "step")?.ok_or("missing meta step")?;
        let optimizer = match meta.remove("optimizer") {
            Some(kind) => Some(OptimizerState {
                kind: kind.parse().map_err(|e: lkdn_core::Error| e.to_string())?,
                step: take_num(&mut meta, "optimizer_step")?.ok_or("missing meta optimizer_step")?,
                tensors: opt,
            }),
            None if opt.is_empty() => None,
            None => return Err("optimizer tensors without an optimizer kind".into()),
        };
        Ok(Checkpoint {
            config,
            step,
            params,
            ema: (!ema.is_empty()).then_some(ema),
            optimizer,
            meta,
        })
    }
}

fn parse_tensor_line(rest: &str) -> std::result::Result<(String, Shape, usize, usize), String> {
    let mut parts = rest.split_whitespace();
    let name = parts.next().ok_or("tensor line without a name")?.to_string();
    let mut fields = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("tensor `{name}`: malformed field `{p}`"))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("tensor `{name}`: missing {k}"));
    if get("dtype")? != "f32" {
        return Err(format!("tensor `{name}`: only f32 payloads are supported"));
    }
    let dims: Vec<usize> = get("shape")?
        .split(',')
        .map(|d| d.parse().map_err(|_| format!("tensor `{name}`: bad shape")))
        .collect::<std::result::Result<_, _>>()?;
    let [n, c, h, w] = dims[..] else {
        return Err(format!("tensor `{name}`: shape must have four dimensions"));
    };
    let num = |k: &str| -> std::result::Result<usize, String> {
        get(k)?.parse().map_err(|_| format!("tensor `{name}`: bad {k}"))
    };
    Ok((name.clone(), Shape::new(n, c, h, w), num("offset")?, num("length")?))
}
