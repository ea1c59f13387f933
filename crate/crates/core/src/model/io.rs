//! Weight file.
//!
//! ```text
//! header  "PDFW" | version u8 (=1) | layer count u32
//! layer   name_len u8 | name utf8 | kind u8 | ndims u8 | dims u32 x ndims | payload
//! ```
//!
//! All integers little-endian. `kind` 1 is `f32` values, 2 is `u64` values,
//! 3 is utf8 text (one dim: byte length). Layers appear in a fixed order:
//! `meta.arch` and `meta.dfs` (JSON text), `meta.keys`, the encoder, each
//! branch, fusion, then the optional `dfs.kernel`, `dfs.mix` and `at.log`.

use std::path::Path;

use super::{ArchConfig, Branch, Conv2d, Dense, Fusion, ModelBundle, Params};
use crate::at::AtLog;
use crate::dfs::{DfsConfig, DfsLearnable};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PDFW";
const VERSION: u8 = 1;

const KIND_F32: u8 = 1;
const KIND_U64: u8 = 2;
const KIND_TEXT: u8 = 3;

enum Payload {
    F32(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

struct Layer {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

fn f32_layer(name: impl Into<String>, dims: &[usize], values: &[f64]) -> Layer {
    Layer { name: name.into(), dims: dims.to_vec(), payload: Payload::F32(values.to_vec()) }
}

fn conv_layers(out: &mut Vec<Layer>, prefix: &str, c: &Conv2d) {
    out.push(f32_layer(format!("{prefix}.weight"), &[c.cout, c.cin, c.k, c.k], &c.weight));
    out.push(f32_layer(format!("{prefix}.bias"), &[c.cout], &c.bias));
}

fn dense_layers(out: &mut Vec<Layer>, prefix: &str, d: &Dense) {
    out.push(f32_layer(format!("{prefix}.weight"), &[d.nout, d.nin], &d.weight));
    out.push(f32_layer(format!("{prefix}.bias"), &[d.nout], &d.bias));
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let p = bundle.params();
    let mut layers = vec![
        Layer { name: "meta.arch".into(), dims: vec![], payload: Payload::Text(serde_json::to_string(&bundle.arch)?) },
        Layer { name: "meta.dfs".into(), dims: vec![], payload: Payload::Text(serde_json::to_string(&bundle.dfs)?) },
        Layer { name: "meta.keys".into(), dims: vec![bundle.keys.len()], payload: Payload::U64(bundle.keys.clone()) },
    ];
    conv_layers(&mut layers, "encoder", &p.encoder);
    for (i, b) in p.branches.iter().enumerate() {
        conv_layers(&mut layers, &format!("branch{i}.conv1"), &b.conv1);
        conv_layers(&mut layers, &format!("branch{i}.conv2"), &b.conv2);
        dense_layers(&mut layers, &format!("branch{i}.head"), &b.head);
    }
    dense_layers(&mut layers, "fusion.hidden", &p.fusion.hidden);
    dense_layers(&mut layers, "fusion.out", &p.fusion.out);
    if let Some(d) = &p.dfs {
        let k = bundle.dfs.kernel_size;
        let n = bundle.dfs.num_branches;
        layers.push(f32_layer("dfs.kernel", &[bundle.arch.encoder_channels, k, k], &d.depthwise_kernel));
        layers.push(f32_layer("dfs.mix", &[n, n], &d.mix));
    }
    if let Some(log) = &bundle.at_log {
        layers.push(Layer { name: "at.log".into(), dims: vec![], payload: Payload::Text(serde_json::to_string(log)?) });
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        out.push(l.name.len() as u8);
        out.extend_from_slice(l.name.as_bytes());
        let dims = match &l.payload {
            Payload::Text(t) => vec![t.len()],
            _ => l.dims.clone(),
        };
        out.push(match l.payload {
            Payload::F32(_) => KIND_F32,
            Payload::U64(_) => KIND_U64,
            Payload::Text(_) => KIND_TEXT,
        });
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match &l.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Text(t) => out.extend_from_slice(t.as_bytes()),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated weight file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn layer(&mut self) -> Result<Layer> {
        let name_len = self.u8()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| self.err("layer name is not utf8"))?;
        let kind = self.u8()?;
        let ndims = self.u8()? as usize;
        let dims = (0..ndims).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.err("dims overflow"))?;
        let payload = match kind {
            KIND_F32 => Payload::F32(
                self.take(count.checked_mul(4).ok_or_else(|| self.err("dims overflow"))?)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
            ),
            KIND_U64 => Payload::U64(
                self.take(count.checked_mul(8).ok_or_else(|| self.err("dims overflow"))?)?
                    .chunks_exact(8)
                    .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            KIND_TEXT => {
                let t = self.take(count)?;
                Payload::Text(String::from_utf8(t.to_vec()).map_err(|_| self.err("text layer is not utf8"))?)
            }
            other => return Err(self.err(format!("unknown layer kind {other}"))),
        };
        Ok(Layer { name, dims, payload })
    }
}

struct Layers {
    items: Vec<Layer>,
    next: usize,
}

impl Layers {
    fn expect(&mut self, name: &str) -> Result<&Layer> {
        let l = self.items.get(self.next).ok_or_else(|| Error::Format { offset: 0, reason: format!("missing layer {name}") })?;
        if l.name != name {
            return Err(Error::Format { offset: 0, reason: format!("expected layer {name}, found {}", l.name) });
        }
        self.next += 1;
        Ok(l)
    }

    fn optional(&mut self, name: &str) -> Option<&Layer> {
        match self.items.get(self.next) {
            Some(l) if l.name == name => {
                self.next += 1;
                Some(l)
            }
            _ => None,
        }
    }

    fn f32s(&mut self, name: &str) -> Result<Vec<f64>> {
        match &self.expect(name)?.payload {
            Payload::F32(v) => Ok(v.clone()),
            _ => Err(Error::Format { offset: 0, reason: format!("layer {name} is not f32") }),
        }
    }

    fn text(&mut self, name: &str) -> Result<String> {
        match &self.expect(name)?.payload {
            Payload::Text(t) => Ok(t.clone()),
            _ => Err(Error::Format { offset: 0, reason: format!("layer {name} is not text") }),
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv2d> {
        Ok(Conv2d { cin, cout, k, stride, weight: self.f32s(&format!("{prefix}.weight"))?, bias: self.f32s(&format!("{prefix}.bias"))? })
    }

    fn dense(&mut self, prefix: &str, nin: usize, nout: usize) -> Result<Dense> {
        Ok(Dense { nin, nout, weight: self.f32s(&format!("{prefix}.weight"))?, bias: self.f32s(&format!("{prefix}.bias"))? })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| r.err("not a weight file"))? != MAGIC {
        return Err(Error::Format { offset: 0, reason: "not a weight file".into() });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, reason: format!("unsupported weight file version {version}") });
    }
    let count = r.u32()? as usize;
    let items = (0..count).map(|_| r.layer()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last layer"));
    }
    let mut ls = Layers { items, next: 0 };
    let arch: ArchConfig = serde_json::from_str(&ls.text("meta.arch")?)?;
    let dfs: DfsConfig = serde_json::from_str(&ls.text("meta.dfs")?)?;
    arch.validate(&dfs)?;
    let keys = match &ls.expect("meta.keys")?.payload {
        Payload::U64(k) => k.clone(),
        _ => return Err(Error::Format { offset: 0, reason: "meta.keys is not u64".into() }),
    };
    let n = dfs.num_branches;
    let cb = arch.encoder_channels / n;
    let [c1, c2] = arch.branch_channels;
    let encoder = ls.conv("encoder", arch.in_channels, arch.encoder_channels, arch.encoder_kernel, arch.encoder_stride)?;
    let branches = (0..n)
        .map(|i| {
            Ok(Branch {
                conv1: ls.conv(&format!("branch{i}.conv1"), cb, c1, arch.branch_kernel, 1)?,
                conv2: ls.conv(&format!("branch{i}.conv2"), c1, c2, arch.branch_kernel, 1)?,
                head: ls.dense(&format!("branch{i}.head"), c2, arch.embed_dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fusion = Fusion {
        hidden: ls.dense("fusion.hidden", n * arch.embed_dim, arch.fusion_hidden)?,
        out: ls.dense("fusion.out", arch.fusion_hidden, arch.classes)?,
    };
    let learn = if ls.items.get(ls.next).is_some_and(|l| l.name == "dfs.kernel") {
        Some(DfsLearnable { depthwise_kernel: ls.f32s("dfs.kernel")?, mix: ls.f32s("dfs.mix")? })
    } else {
        None
    };
    let at_log: Option<AtLog> = match ls.optional("at.log") {
        Some(Layer { payload: Payload::Text(t), .. }) => Some(serde_json::from_str(t)?),
        Some(_) => return Err(Error::Format { offset: 0, reason: "at.log is not text".into() }),
        None => None,
    };
    if ls.next != ls.items.len() {
        return Err(Error::Format { offset: 0, reason: format!("unexpected layer {}", ls.items[ls.next].name) });
    }
    ModelBundle::from_parts(arch, dfs, keys, Params { encoder, branches, fusion, dfs: learn }, at_log)
}

pub fn save(bundle: &ModelBundle, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, to_bytes(bundle)?)?)
}

pub fn load(path: &Path) -> Result<ModelBundle> {
    from_bytes(&std::fs::read(path)?)
}
