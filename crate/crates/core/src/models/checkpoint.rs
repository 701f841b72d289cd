//! Binary checkpoint format.
//!
//! ```text
//! magic      b"FGTC"
//! version    u32 LE (= 1)
//! header     u32 LE byte length, then UTF-8 `key=value` lines
//! count      u32 LE number of tensors
//! tensor*    u32 LE name length, name bytes,
//!            u32 LE rank, rank × u64 LE dims,
//!            product(dims) × f64 LE values
//! ```
//!
//! Model checkpoints carry the architecture in the header and one tensor per
//! layout entry; server checkpoints add `round`/`task` header keys and the
//! per-task Gaussian embeddings.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use numkit::{Matrix, Tensor};

use super::{ArchConfig, ClientModel};
use crate::error::{FedError, Result};
use crate::gaussian::GaussianEmbedding;
use crate::params::ParamVector;

pub const MAGIC: &[u8; 4] = b"FGTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn fmt_err(msg: impl Into<String>) -> FedError {
    FedError::Format(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(fmt_err(format!("header entry '{k}' cannot be encoded")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(header.as_bytes())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.read_u32::<LittleEndian>()? as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes)?;
        let text = String::from_utf8(hbytes).map_err(|_| fmt_err("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("bad header line '{line}'")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.read_u32::<LittleEndian>()? as usize;
            let mut nbytes = vec![0u8; nlen];
            r.read_exact(&mut nbytes)?;
            let name =
                String::from_utf8(nbytes).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank)
                .map(|_| Ok(r.read_u64::<LittleEndian>()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn header_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.header
            .get(key)
            .ok_or_else(|| fmt_err(format!("header is missing '{key}'")))?
            .parse()
            .map_err(|_| fmt_err(format!("bad header value for '{key}'")))
    }

    /// Architecture stored under `arch.*` header keys.
    pub fn arch(&self) -> Result<ArchConfig> {
        let text: String = self
            .header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("arch.").map(|k| format!("{k}={v}\n")))
            .collect();
        ArchConfig::from_header(&text)
    }

    fn set_arch(&mut self, arch: &ArchConfig) {
        for line in arch.to_header().lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.header.insert(format!("arch.{k}"), v.to_string());
            }
        }
    }

    /// Named parameter list of `model` with values from `params`.
    pub fn from_model(model: &ClientModel, params: &ParamVector) -> Result<Self> {
        if params.len() != model.param_count() {
            return Err(FedError::Dimension(
                "parameter vector does not fit model".into(),
            ));
        }
        let mut ck = Checkpoint::default();
        ck.header.insert("kind".into(), "model".into());
        ck.set_arch(model.arch());
        for e in model.layout().entries() {
            ck.tensors.push((
                e.name.clone(),
                Tensor::new(e.shape.clone(), params.0[e.range()].to_vec())?,
            ));
        }
        Ok(ck)
    }

    /// Reassembles a parameter vector for `model`, checking names and shapes.
    pub fn params_for(&self, model: &ClientModel) -> Result<ParamVector> {
        if &self.arch()? != model.arch() {
            return Err(fmt_err("checkpoint architecture differs from the model"));
        }
        let mut out = Vec::with_capacity(model.param_count());
        for e in model.layout().entries() {
            let t = self
                .tensor(&e.name)
                .ok_or_else(|| fmt_err(format!("checkpoint lacks '{}'", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(fmt_err(format!("'{}' has shape {:?}", e.name, t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        Ok(ParamVector(out))
    }

    /// Stores a named raw vector (e.g. a previous global model).
    pub fn push_vector(&mut self, name: &str, v: &ParamVector) {
        self.tensors
            .push((name.to_string(), Tensor::vector(v.0.clone())));
    }

    pub fn vector(&self, name: &str) -> Option<ParamVector> {
        self.tensor(name).map(|t| ParamVector(t.data().to_vec()))
    }

    pub fn push_gaussians(&mut self, gs: &[GaussianEmbedding]) {
        self.header.insert("gaussians".into(), gs.len().to_string());
        for (t, g) in gs.iter().enumerate() {
            let d = g.dim();
            self.tensors.push((
                format!("gaussian.{t}.mean"),
                Tensor::vector(g.mean().to_vec()),
            ));
            self.tensors.push((
                format!("gaussian.{t}.cov"),
                Tensor::new(vec![d, d], g.cov().data().to_vec()).expect("square covariance"),
            ));
            self.tensors.push((
                format!("gaussian.{t}.count"),
                Tensor::vector(vec![g.sample_count() as f64]),
            ));
        }
    }

    pub fn gaussians(&self) -> Result<Vec<GaussianEmbedding>> {
        let n: usize = match self.header.get("gaussians") {
            Some(_) => self.header_value("gaussians")?,
            None => return Ok(Vec::new()),
        };
        (0..n)
            .map(|t| {
                let get = |part: &str| {
                    self.tensor(&format!("gaussian.{t}.{part}"))
                        .ok_or_else(|| fmt_err(format!("missing gaussian.{t}.{part}")))
                };
                let mean = get("mean")?.data().to_vec();
                let cov = get("cov")?;
                let d = mean.len();
                let cov = Matrix::from_vec(d, d, cov.data().to_vec())?;
                let count = get("count")?.data()[0] as usize;
                GaussianEmbedding::new(mean, cov, count)
            })
            .collect()
    }
}
