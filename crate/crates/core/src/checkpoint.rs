//! Versioned binary container for trained models.
//!
//! ```text
//! "DEGM" | version u32 | node count u32
//! arch: data_dim, encoder_hidden, latent_dim, decoder_hidden (u32)
//!       activation, likelihood, normalize_recon (u8)
//! per node: kind u8 | task_id u32 | best_elbo f64 | π (u32 len, f64…)
//!           tensor count u32 | per tensor: ndims u32, dims u32…, f64… (LE)
//! adjacency: node count² f64, row-major
//! ```
//!
//! A single replay-trained VAE is stored as one node of kind `single`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::degm::{BasicNode, GraphState, SpecificNode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::{Likelihood, VaeArch, VaeModel};

pub const MAGIC: &[u8; 4] = b"DEGM";
pub const FORMAT_VERSION: u32 = 1;

const KIND_BASIC: u8 = 0;
const KIND_SPECIFIC: u8 = 1;
const KIND_SINGLE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Single { model: VaeModel, task_id: usize },
    Graph(GraphState),
}

impl Checkpoint {
    pub fn arch(&self) -> VaeArch {
        match self {
            Checkpoint::Single { model, .. } => model.arch,
            Checkpoint::Graph(g) => g.arch,
        }
    }
}

/// SHA-256 over shapes and little-endian values, as lowercase hex.
pub fn param_hash<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.shape().len() as u32).to_le_bytes());
        for d in p.shape() {
            h.update((*d as u32).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensors(&mut self, ts: &[&Tensor]) -> Result<()> {
        self.u32(ts.len())?;
        for t in ts {
            self.u32(t.shape().len())?;
            for d in t.shape() {
                self.u32(*d)?;
            }
            for v in t.data() {
                self.f64(*v);
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {}: need {n} more bytes, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Fills `targets` in order, checking each stored shape.
    fn tensors(&mut self, targets: Vec<&mut Tensor>) -> Result<()> {
        let count = self.u32()?;
        if count != targets.len() {
            return Err(Error::Checkpoint(format!("{count} tensors stored, {} expected", targets.len())));
        }
        for t in targets {
            let nd = self.u32()?;
            let dims = (0..nd).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            if dims != t.shape() {
                return Err(Error::Checkpoint(format!("stored shape {dims:?}, expected {:?}", t.shape())));
            }
            for v in t.data_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

fn write_header(w: &mut Writer, arch: &VaeArch, nodes: usize) -> Result<()> {
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(nodes)?;
    for v in [arch.data_dim, arch.encoder_hidden, arch.latent_dim, arch.decoder_hidden] {
        w.u32(v)?;
    }
    w.u8(arch.activation.code());
    w.u8(arch.likelihood.code());
    w.u8(arch.normalize_recon as u8);
    Ok(())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    match ckpt {
        Checkpoint::Single { model, task_id } => {
            write_header(&mut w, &model.arch, 1)?;
            w.u8(KIND_SINGLE);
            w.u32(*task_id)?;
            w.f64(f64::NAN);
            w.u32(0)?;
            w.tensors(&model.params())?;
            w.f64(0.0);
        }
        Checkpoint::Graph(g) => {
            write_header(&mut w, &g.arch, g.node_count())?;
            for node in g.nodes() {
                match node {
                    crate::degm::NodeRef::Basic(b) => {
                        w.u8(KIND_BASIC);
                        w.u32(b.task_id)?;
                        w.f64(b.best_elbo);
                        w.u32(0)?;
                        w.tensors(&b.model.params())?;
                    }
                    crate::degm::NodeRef::Specific(s) => {
                        w.u8(KIND_SPECIFIC);
                        w.u32(s.task_id)?;
                        w.f64(f64::NAN);
                        w.u32(s.pi.len())?;
                        for p in &s.pi {
                            w.f64(*p);
                        }
                        w.tensors(&s.params())?;
                    }
                }
            }
            for row in &g.adjacency {
                for v in row {
                    w.f64(*v);
                }
            }
        }
    }
    Ok(w.0)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    if count == 0 {
        return Err(Error::Checkpoint("no nodes stored".into()));
    }
    let dims: Vec<usize> = (0..4).map(|_| r.u32()).collect::<Result<_>>()?;
    let activation = Activation::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown activation code".into()))?;
    let likelihood = Likelihood::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown likelihood code".into()))?;
    let normalize_recon = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Checkpoint(format!("bad flag byte {b}"))),
    };
    let arch = VaeArch {
        data_dim: dims[0],
        encoder_hidden: dims[1],
        latent_dim: dims[2],
        decoder_hidden: dims[3],
        activation,
        likelihood,
        normalize_recon,
    };
    let mut graph: Option<GraphState> = None;
    let mut single = None;
    for id in 0..count {
        let kind = r.u8()?;
        let task_id = r.u32()?;
        let best_elbo = r.f64()?;
        let pi_len = r.u32()?;
        let pi = (0..pi_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        match kind {
            KIND_SINGLE => {
                if count != 1 {
                    return Err(Error::Checkpoint("a single-model checkpoint holds exactly one node".into()));
                }
                let mut model = VaeModel::new(arch, 0)?;
                r.tensors(model.params_mut())?;
                single = Some((model, task_id));
            }
            KIND_BASIC => {
                let mut model = VaeModel::new(arch, 0)?;
                r.tensors(model.params_mut())?;
                model.set_trainable(false);
                let g = graph.get_or_insert(GraphState::new(arch)?);
                g.basic.push(BasicNode {
                    id,
                    task_id,
                    model,
                    best_elbo,
                });
            }
            KIND_SPECIFIC => {
                let g = graph.get_or_insert(GraphState::new(arch)?);
                if pi.len() > g.basic.len() || pi.is_empty() {
                    return Err(Error::Checkpoint(format!(
                        "specific node {id} has {} weights but {} Basic nodes precede it",
                        pi.len(),
                        g.basic.len()
                    )));
                }
                let mut node = SpecificNode::new(id, task_id, &arch, pi, 0)?;
                r.tensors(node.params_mut())?;
                node.set_trainable(false);
                g.specific.push(node);
            }
            k => return Err(Error::Checkpoint(format!("unknown node kind {k}"))),
        }
    }
    let mut adjacency = vec![vec![0.0; count]; count];
    for row in adjacency.iter_mut() {
        for v in row.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    match (single, graph) {
        (Some((model, task_id)), None) => Ok(Checkpoint::Single { model, task_id }),
        (None, Some(mut g)) => {
            g.adjacency = adjacency;
            Ok(Checkpoint::Graph(g))
        }
        _ => Err(Error::Checkpoint("mixed single-model and graph records".into())),
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"DTEN";

/// Standalone tensor file: `"DTEN"`, then one tensor record as above.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut w = Writer(TENSOR_MAGIC.to_vec());
    w.u32(t.shape().len())?;
    for d in t.shape() {
        w.u32(*d)?;
    }
    for v in t.data() {
        w.f64(*v);
    }
    Ok(w.0)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Checkpoint("bad tensor magic".into()));
    }
    let nd = r.u32()?;
    let dims = (0..nd).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    if (bytes.len() - r.pos) != n * 8 {
        return Err(Error::Checkpoint(format!(
            "tensor payload of {} bytes, expected {}",
            bytes.len() - r.pos,
            n * 8
        )));
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(dims, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
