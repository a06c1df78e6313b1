//! Checkpoint serialization: a manifest of named tensors with per-tensor
//! checksums, followed by a little-endian f32 payload.
//!
//! Layout: magic "MAMC", u32 version, u64 step, u32 manifest byte count,
//! UTF-8 manifest lines `name shape dtype offset nbytes crc32`, payload.
//! Optimizer moments ride along under `opt.m.*` / `opt.v.*` names so a
//! resumed run continues bitwise-identically.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::model::{parameter_names, EncoderConfig, ParamSet};

pub const MAMC_MAGIC: &[u8; 4] = b"MAMC";
pub const MAMC_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found} (expected {MAMC_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: corrupt checkpoint ({detail})")]
    Corrupt { path: PathBuf, detail: String },
    #[error("{path}: checksum mismatch for tensor `{name}`; file is damaged")]
    Checksum { path: PathBuf, name: String },
    #[error("tensor `{name}`: checkpoint shape {found:?} does not match configured shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}` required by the configuration")]
    MissingTensor(String),
}

pub type CkptResult<T> = Result<T, CkptError>;

/// Everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamSet,
    pub opt_m: ParamSet,
    pub opt_v: ParamSet,
}

impl Checkpoint {
    /// Check that the model tensors exactly cover the configuration's
    /// parameter list with matching shapes.
    pub fn validate_model(&self, cfg: &EncoderConfig) -> CkptResult<()> {
        for (name, shape) in parameter_names(cfg) {
            let p = self
                .params
                .get(&name)
                .ok_or_else(|| CkptError::MissingTensor(name.clone()))?;
            if p.shape != shape {
                return Err(CkptError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: p.shape.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn has_optimizer(&self) -> bool {
        !self.opt_m.is_empty()
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse::<usize>().ok()).collect()
}

/// Write a checkpoint; `moments` adds `opt.m.*` / `opt.v.*` tensors. The
/// file lands under a `.tmp` suffix and is renamed once complete.
pub fn save(
    path: &Path,
    step: u64,
    params: &ParamSet,
    moments: Option<(&ParamSet, &ParamSet)>,
) -> CkptResult<()> {
    let io_err = |source| CkptError::Io { path: path.to_path_buf(), source };

    let mut entries: Vec<(String, &crate::model::Param)> = Vec::new();
    for (name, p) in params.iter() {
        entries.push((name.clone(), p));
    }
    if let Some((m, v)) = moments {
        for (name, p) in m.iter() {
            entries.push((format!("opt.m.{name}"), p));
        }
        for (name, p) in v.iter() {
            entries.push((format!("opt.v.{name}"), p));
        }
    }

    let mut manifest = String::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, p) in &entries {
        let offset = payload.len();
        for &val in &p.data {
            payload.extend_from_slice(&val.to_le_bytes());
        }
        let nbytes = payload.len() - offset;
        let crc = crc32fast::hash(&payload[offset..offset + nbytes]);
        manifest.push_str(&format!(
            "{name} {} f32 {offset} {nbytes} {crc}\n",
            shape_string(&p.shape)
        ));
    }

    let tmp = path.with_extension("mamc.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(MAMC_MAGIC).map_err(io_err)?;
        f.write_all(&MAMC_VERSION.to_le_bytes()).map_err(io_err)?;
        f.write_all(&step.to_le_bytes()).map_err(io_err)?;
        f.write_all(&(manifest.len() as u32).to_le_bytes()).map_err(io_err)?;
        f.write_all(manifest.as_bytes()).map_err(io_err)?;
        f.write_all(&payload).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load(path: &Path) -> CkptResult<Checkpoint> {
    let io_err = |source| CkptError::Io { path: path.to_path_buf(), source };
    let corrupt = |detail: String| CkptError::Corrupt { path: path.to_path_buf(), detail };

    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 20 {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAMC_MAGIC {
        return Err(CkptError::BadMagic { path: path.to_path_buf() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MAMC_VERSION {
        return Err(CkptError::Version { path: path.to_path_buf(), found: version });
    }
    let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let manifest_nbytes = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + manifest_nbytes {
        return Err(corrupt("file ends inside the manifest".into()));
    }
    let manifest = std::str::from_utf8(&bytes[20..20 + manifest_nbytes])
        .map_err(|_| corrupt("manifest is not UTF-8".into()))?;
    let payload = &bytes[20 + manifest_nbytes..];

    let mut ckpt = Checkpoint {
        step,
        params: ParamSet::new(),
        opt_m: ParamSet::new(),
        opt_v: ParamSet::new(),
    };
    for (lineno, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 6 {
            return Err(corrupt(format!("manifest line {} malformed: {line:?}", lineno + 1)));
        }
        let name = fields[0];
        let shape = parse_shape(fields[1])
            .ok_or_else(|| corrupt(format!("bad shape {:?} for `{name}`", fields[1])))?;
        if fields[2] != "f32" {
            return Err(corrupt(format!("unsupported dtype {:?} for `{name}`", fields[2])));
        }
        let offset: usize = fields[3]
            .parse()
            .map_err(|_| corrupt(format!("bad offset for `{name}`")))?;
        let nbytes: usize = fields[4]
            .parse()
            .map_err(|_| corrupt(format!("bad byte count for `{name}`")))?;
        let crc: u32 = fields[5]
            .parse()
            .map_err(|_| corrupt(format!("bad checksum for `{name}`")))?;
        let numel: usize = shape.iter().product();
        if nbytes != numel * 4 {
            return Err(corrupt(format!(
                "`{name}`: {nbytes} bytes does not match shape {shape:?}"
            )));
        }
        if offset + nbytes > payload.len() {
            return Err(corrupt(format!("`{name}`: payload truncated")));
        }
        let chunk = &payload[offset..offset + nbytes];
        if crc32fast::hash(chunk) != crc {
            return Err(CkptError::Checksum {
                path: path.to_path_buf(),
                name: name.to_string(),
            });
        }
        let data: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(rest) = name.strip_prefix("opt.m.") {
            ckpt.opt_m.insert(rest, shape, data);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            ckpt.opt_v.insert(rest, shape, data);
        } else {
            ckpt.params.insert(name, shape, data);
        }
    }
    Ok(ckpt)
}
