//! On-disk formats and the per-speaker submodel store.
//!
//! Every format is little-endian with 32-bit IEEE-754 floats. A submodel
//! file is a 32-byte header followed by, for each layer in order:
//! `ln_gamma[d_model]`, `ln_beta[d_model]`, `w_down[d_model×d_b]`,
//! `b_down[d_b]`, `w_up[d_b×d_model]`, `b_up[d_model]`, `alpha`.
//!
//! | offset | field          | type   |
//! |--------|----------------|--------|
//! | 0      | magic `SUBM`   | 4 × u8 |
//! | 4      | format_version | u16    |
//! | 6      | flags          | u16    |
//! | 8      | speaker_id     | u64    |
//! | 16     | d_model        | u32    |
//! | 20     | d_b            | u32    |
//! | 24     | n_layers       | u32    |
//! | 28     | reserved       | u32    |

use std::fs;
use std::path::{Path, PathBuf};

use crate::binio::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{
    count_params, serialized_size, AdapterBody, AdapterParams, Basemodel, BasemodelConfig, Block, EmbeddingBundle,
    OneHotBundle, Submodel, SubmodelMeta, FORMAT_VERSION,
};
use crate::tensor::Tensor;

pub const SUBMODEL_MAGIC: [u8; 4] = *b"SUBM";
pub const BUNDLE_MAGIC: [u8; 4] = *b"BNDL";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"EMBM";
pub const BASE_MAGIC: [u8; 4] = *b"BASE";

pub const SUBMODEL_EXT: &str = "subm";
pub const BUNDLE_EXT: &str = "bndl";
pub const EMBEDDING_EXT: &str = "embm";

fn version(r: &mut Reader<'_>) -> Result<()> {
    let v = r.u16()?;
    if v != FORMAT_VERSION {
        return Err(Error::BadVersion(v));
    }
    let _flags = r.u16()?;
    Ok(())
}

fn dim(r: &mut Reader<'_>, what: &str) -> Result<usize> {
    let v = r.u32()? as usize;
    if v == 0 {
        return Err(Error::dims(format!("{what} must be positive")));
    }
    Ok(v)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::dims(format!("{what}={v} does not fit the format")))
}

fn tensor(r: &mut Reader<'_>, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), r.f32s(shape.iter().product())?)
}

fn write_body(w: &mut Writer, b: &AdapterBody) {
    for t in b.tensors() {
        w.f32s(t.data());
    }
}

fn read_body(r: &mut Reader<'_>, d_model: usize, d_b: usize) -> Result<AdapterBody> {
    Ok(AdapterBody {
        ln_gamma: tensor(r, &[d_model])?,
        ln_beta: tensor(r, &[d_model])?,
        w_down: tensor(r, &[d_model, d_b])?,
        b_down: tensor(r, &[d_b])?,
        w_up: tensor(r, &[d_b, d_model])?,
        b_up: tensor(r, &[d_model])?,
    })
}

fn write_submodel(w: &mut Writer, sub: &Submodel) -> Result<()> {
    sub.validate()?;
    let m = &sub.meta;
    w.bytes(&SUBMODEL_MAGIC)
        .u16(FORMAT_VERSION)
        .u16(0)
        .u64(m.speaker_id)
        .u32(u32_of(m.d_model, "d_model")?)
        .u32(u32_of(m.d_b, "d_b")?)
        .u32(u32_of(m.n_layers, "n_layers")?)
        .u32(0);
    for l in &sub.layers {
        write_body(w, &l.body);
        w.f32s(&[l.alpha]);
    }
    Ok(())
}

fn read_submodel(r: &mut Reader<'_>, exact: bool) -> Result<Submodel> {
    r.magic(SUBMODEL_MAGIC)?;
    version(r)?;
    let speaker_id = r.u64()?;
    let d_model = dim(r, "d_model")?;
    let d_b = dim(r, "d_b")?;
    let n_layers = dim(r, "n_layers")?;
    let _reserved = r.u32()?;
    let body_bytes = count_params(d_model as u64, d_b as u64, n_layers as u64)?.saturating_mul(4);
    if exact {
        r.expect_remaining(body_bytes)?;
    } else if (r.remaining() as u64) < body_bytes {
        return Err(Error::Truncated {
            expected: body_bytes,
            found: r.remaining() as u64,
        });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let body = read_body(r, d_model, d_b)?;
        let alpha = r.f32()?;
        layers.push(AdapterParams { body, alpha });
    }
    let sub = Submodel {
        meta: SubmodelMeta {
            speaker_id,
            d_model,
            d_b,
            n_layers,
            format_version: FORMAT_VERSION,
        },
        layers,
    };
    sub.validate()?;
    Ok(sub)
}

/// Serializes `sub` in the submodel file format.
pub fn submodel_to_bytes(sub: &Submodel) -> Result<Vec<u8>> {
    let mut w = Writer::with_capacity(serialized_size(sub.param_count()) as usize);
    write_submodel(&mut w, sub)?;
    Ok(w.into_inner())
}

/// Parses a submodel file. The declared shape must account for every byte.
pub fn submodel_from_bytes(bytes: &[u8]) -> Result<Submodel> {
    read_submodel(&mut Reader::new(bytes), true)
}

/// Writes `sub` to `path`; readers never observe a partial file.
pub fn save_submodel(sub: &Submodel, path: &Path) -> Result<()> {
    write_atomic(path, &submodel_to_bytes(sub)?)
}

/// Reads a submodel, optionally checking it fits `expected`.
pub fn load_submodel(path: &Path, expected: Option<&BasemodelConfig>) -> Result<Submodel> {
    let sub = submodel_from_bytes(&fs::read(path)?)?;
    if let Some(cfg) = expected {
        sub.check_against(cfg)?;
    }
    Ok(sub)
}

/// A one-hot bundle: a 16-byte header (`BNDL`, version, flags, member count,
/// reserved) followed by each member as a complete submodel file.
pub fn bundle_to_bytes(bundle: &OneHotBundle) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(&BUNDLE_MAGIC)
        .u16(FORMAT_VERSION)
        .u16(0)
        .u32(u32_of(bundle.len(), "member count")?)
        .u32(0);
    for m in bundle.members() {
        write_submodel(&mut w, m)?;
    }
    Ok(w.into_inner())
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<OneHotBundle> {
    let mut r = Reader::new(bytes);
    r.magic(BUNDLE_MAGIC)?;
    version(&mut r)?;
    let n = r.u32()? as usize;
    let _reserved = r.u32()?;
    let members = (0..n)
        .map(|_| read_submodel(&mut r, false))
        .collect::<Result<Vec<_>>>()?;
    r.expect_remaining(0)?;
    OneHotBundle::new(members)
}

pub fn save_bundle(bundle: &OneHotBundle, path: &Path) -> Result<()> {
    write_atomic(path, &bundle_to_bytes(bundle)?)
}

pub fn load_bundle(path: &Path) -> Result<OneHotBundle> {
    bundle_from_bytes(&fs::read(path)?)
}

/// Embedding bundle: a 32-byte header (`EMBM`, version, flags, N, M,
/// d_model, d_b, L, reserved), the N speaker ids as u64, alpha, the L × M
/// bank bodies layer-major, then the `N × (L·M)` embedding row-major.
pub fn embedding_to_bytes(eb: &EmbeddingBundle) -> Result<Vec<u8>> {
    eb.validate()?;
    let mut w = Writer::default();
    w.bytes(&EMBEDDING_MAGIC)
        .u16(FORMAT_VERSION)
        .u16(0)
        .u32(u32_of(eb.speakers.len(), "speaker count")?)
        .u32(u32_of(eb.n_banks, "n_banks")?)
        .u32(u32_of(eb.d_model, "d_model")?)
        .u32(u32_of(eb.d_b, "d_b")?)
        .u32(u32_of(eb.n_layers, "n_layers")?)
        .u32(0);
    for &s in &eb.speakers {
        w.u64(s);
    }
    w.f32s(&[eb.alpha]);
    for layer in &eb.banks {
        for b in layer {
            write_body(&mut w, b);
        }
    }
    w.f32s(eb.embedding.data());
    Ok(w.into_inner())
}

pub fn embedding_from_bytes(bytes: &[u8]) -> Result<EmbeddingBundle> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    version(&mut r)?;
    let n = dim(&mut r, "speaker count")?;
    let m = dim(&mut r, "n_banks")?;
    let d_model = dim(&mut r, "d_model")?;
    let d_b = dim(&mut r, "d_b")?;
    let n_layers = dim(&mut r, "n_layers")?;
    let _reserved = r.u32()?;
    let per_body = count_params(d_model as u64, d_b as u64, 1)? - 1;
    let (n64, m64, l64) = (n as u64, m as u64, n_layers as u64);
    let payload = (|| {
        let rows = n64.checked_mul(l64)?.checked_mul(m64)?;
        let floats = per_body.checked_mul(l64)?.checked_mul(m64)?.checked_add(rows)?;
        floats.checked_add(1)?.checked_mul(4)?.checked_add(8 * n64)
    })();
    r.expect_remaining(payload.unwrap_or(u64::MAX))?;
    let speakers = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let alpha = r.f32()?;
    let banks = (0..n_layers)
        .map(|_| (0..m).map(|_| read_body(&mut r, d_model, d_b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let embedding = tensor(&mut r, &[n, n_layers * m])?;
    let eb = EmbeddingBundle {
        d_model,
        d_b,
        n_layers,
        n_banks: m,
        banks,
        alpha,
        speakers,
        embedding,
    };
    eb.validate()?;
    Ok(eb)
}

pub fn save_embedding(eb: &EmbeddingBundle, path: &Path) -> Result<()> {
    write_atomic(path, &embedding_to_bytes(eb)?)
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingBundle> {
    embedding_from_bytes(&fs::read(path)?)
}

/// Basemodel: a 40-byte header (`BASE`, version, flags, d_in, d_model,
/// d_ff, L, d_out, reserved, init seed) and every tensor in parameter order.
pub fn base_to_bytes(base: &Basemodel) -> Result<Vec<u8>> {
    let c = &base.config;
    let mut w = Writer::with_capacity(40 + 4 * base.param_count() as usize);
    w.bytes(&BASE_MAGIC)
        .u16(FORMAT_VERSION)
        .u16(0)
        .u32(u32_of(c.d_in, "d_in")?)
        .u32(u32_of(c.d_model, "d_model")?)
        .u32(u32_of(c.d_ff, "d_ff")?)
        .u32(u32_of(c.n_layers, "n_layers")?)
        .u32(u32_of(c.d_out, "d_out")?)
        .u32(0)
        .u64(c.seed);
    for t in base.tensors() {
        w.f32s(t.data());
    }
    Ok(w.into_inner())
}

pub fn base_from_bytes(bytes: &[u8]) -> Result<Basemodel> {
    let mut r = Reader::new(bytes);
    r.magic(BASE_MAGIC)?;
    version(&mut r)?;
    let config = BasemodelConfig {
        d_in: dim(&mut r, "d_in")?,
        d_model: dim(&mut r, "d_model")?,
        d_ff: dim(&mut r, "d_ff")?,
        n_layers: dim(&mut r, "n_layers")?,
        d_out: dim(&mut r, "d_out")?,
        seed: {
            let _reserved = r.u32()?;
            r.u64()?
        },
    };
    r.expect_remaining(config.param_count().saturating_mul(4))?;
    let (d, f) = (config.d_model, config.d_ff);
    let w_in = tensor(&mut r, &[config.d_in, d])?;
    let b_in = tensor(&mut r, &[d])?;
    let blocks = (0..config.n_layers)
        .map(|_| {
            Ok(Block {
                ln_gamma: tensor(&mut r, &[d])?,
                ln_beta: tensor(&mut r, &[d])?,
                w1: tensor(&mut r, &[d, f])?,
                b1: tensor(&mut r, &[f])?,
                w2: tensor(&mut r, &[f, d])?,
                b2: tensor(&mut r, &[d])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let w_out = tensor(&mut r, &[d, config.d_out])?;
    let b_out = tensor(&mut r, &[config.d_out])?;
    Ok(Basemodel {
        config,
        w_in,
        b_in,
        blocks,
        w_out,
        b_out,
    })
}

pub fn save_base(base: &Basemodel, path: &Path) -> Result<()> {
    write_atomic(path, &base_to_bytes(base)?)
}

pub fn load_base(path: &Path) -> Result<Basemodel> {
    base_from_bytes(&fs::read(path)?)
}

/// A directory holding one `<speaker_id>.subm` file per speaker.
#[derive(Clone, Debug)]
pub struct SubmodelStore {
    root: PathBuf,
}

impl SubmodelStore {
    /// Opens an existing store directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::Store(format!("store root {} does not exist", root.display())));
        }
        Ok(SubmodelStore { root })
    }

    /// Opens `root`, creating it if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(SubmodelStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, speaker_id: u64) -> PathBuf {
        self.root.join(format!("{speaker_id}.{SUBMODEL_EXT}"))
    }

    pub fn contains(&self, speaker_id: u64) -> bool {
        self.path_for(speaker_id).is_file()
    }

    pub fn save(&self, sub: &Submodel) -> Result<PathBuf> {
        let p = self.path_for(sub.speaker_id());
        save_submodel(sub, &p)?;
        Ok(p)
    }

    /// Loads a speaker's submodel; a missing file is `UNKNOWN_SPEAKER`.
    pub fn load(&self, speaker_id: u64, expected: Option<&BasemodelConfig>) -> Result<Submodel> {
        let p = self.path_for(speaker_id);
        let bytes = match fs::read(&p) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::UnknownSpeaker(speaker_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let sub = submodel_from_bytes(&bytes)?;
        if sub.speaker_id() != speaker_id {
            return Err(Error::Store(format!(
                "{} holds speaker {}",
                p.display(),
                sub.speaker_id()
            )));
        }
        if let Some(cfg) = expected {
            sub.check_against(cfg)?;
        }
        Ok(sub)
    }

    /// Speaker ids with a stored file, ascending.
    pub fn speaker_ids(&self) -> Result<Vec<u64>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let p = entry?.path();
            if p.extension().and_then(|e| e.to_str()) != Some(SUBMODEL_EXT) {
                continue;
            }
            if let Some(id) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }

    /// Total bytes of the stored submodel files.
    pub fn total_bytes(&self) -> Result<u64> {
        self.speaker_ids()?
            .into_iter()
            .map(|id| Ok(fs::metadata(self.path_for(id))?.len()))
            .sum()
    }
}

/// Writes each member of `bundle` as its own submodel file; the bundle's
/// speaker index is not carried over.
pub fn split_bundle(bundle: &OneHotBundle, store: &SubmodelStore) -> Result<Vec<PathBuf>> {
    bundle.members().iter().map(|m| store.save(m)).collect()
}
