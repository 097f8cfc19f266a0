use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::{build_network, ArchError, NetworkSpec};
use crate::nn::Network;
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UROCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training-stage label in a weight lineage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProvenanceTag {
    /// Externally supplied pretrained weights.
    ImageNet,
    /// He-uniform random initialization.
    Random,
    Cystoscopy,
    Ureteroscopy,
    Combined,
}

impl ProvenanceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ProvenanceTag::ImageNet => "ω(i)",
            ProvenanceTag::Random => "ω(rand)",
            ProvenanceTag::Cystoscopy => "ω(c)",
            ProvenanceTag::Ureteroscopy => "ω(u)",
            ProvenanceTag::Combined => "ω(c+u)",
        }
    }
}

impl fmt::Display for ProvenanceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProvenanceTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .trim()
            .trim_start_matches("ω(")
            .trim_start_matches("w(")
            .trim_end_matches(')');
        match inner {
            "i" => Ok(ProvenanceTag::ImageNet),
            "rand" => Ok(ProvenanceTag::Random),
            "c" => Ok(ProvenanceTag::Cystoscopy),
            "u" => Ok(ProvenanceTag::Ureteroscopy),
            "c+u" => Ok(ProvenanceTag::Combined),
            _ => Err(format!("unknown provenance tag {s:?}")),
        }
    }
}

impl Serialize for ProvenanceTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ProvenanceTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub tag: ProvenanceTag,
    /// Digest of the sample list the stage trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    /// Caller-supplied stage time (seconds since the epoch, or a logical
    /// counter). Left empty by default so checkpoints are reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl ProvenanceEntry {
    pub fn new(tag: ProvenanceTag) -> Self {
        Self {
            tag,
            dataset_hash: None,
            timestamp: None,
        }
    }

    pub fn with_dataset_hash(mut self, hash: impl Into<String>) -> Self {
        self.dataset_hash = Some(hash.into());
        self
    }
}

/// A network together with its spec and append-only weight lineage.
#[derive(Clone, Debug)]
pub struct Model<E> {
    pub spec: NetworkSpec,
    pub network: Network<E>,
    provenance: Vec<ProvenanceEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    dtype: DType,
    provenance: Vec<ProvenanceEntry>,
    tensors: Vec<BlobEntry>,
    payload_sha256: String,
}

impl<E: Element> Model<E> {
    /// Freshly initialized model tagged `ω(rand)`.
    pub fn random(spec: NetworkSpec, seed: u64) -> Result<Self, ArchError> {
        let network = build_network(&spec, seed)?;
        Ok(Self {
            spec,
            network,
            provenance: vec![ProvenanceEntry::new(ProvenanceTag::Random)],
        })
    }

    pub fn provenance(&self) -> &[ProvenanceEntry] {
        &self.provenance
    }

    pub fn provenance_tags(&self) -> Vec<ProvenanceTag> {
        self.provenance.iter().map(|p| p.tag).collect()
    }

    pub fn push_provenance(&mut self, entry: ProvenanceEntry) {
        self.provenance.push(entry);
    }

    /// Replaces the starting tag of a model whose weights came from outside,
    /// e.g. pretrained weights supplied by the user.
    pub fn retag_origin(&mut self, tag: ProvenanceTag) {
        self.provenance = vec![ProvenanceEntry::new(tag)];
    }

    /// SHA-256 over every parameter and running statistic, in layer order.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for layer in self.network.layers() {
            digest_layer(&mut h, layer.name(), &layer.named_state());
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 of one layer's parameters and running statistics.
    pub fn layer_digest(&self, layer: &str) -> Option<String> {
        let layer = self.network.layer(layer)?;
        let mut h = Sha256::new();
        digest_layer(&mut h, layer.name(), &layer.named_state());
        Some(hex::encode(h.finalize()))
    }

    /// Serializes without touching the provenance chain.
    pub fn write(&self, path: &Path) -> Result<(), ArchError> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for layer in self.network.layers() {
            for (pname, t) in layer.named_state() {
                let bytes = t.to_le_bytes();
                tensors.push(BlobEntry {
                    name: format!("{}/{pname}", layer.name()),
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                    length: bytes.len() as u64,
                });
                payload.extend_from_slice(&bytes);
            }
        }
        let header = Header {
            spec: self.spec.clone(),
            dtype: E::DTYPE,
            provenance: self.provenance.clone(),
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let io = |source| ArchError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&out).map_err(io)?;
        Ok(())
    }
}

fn digest_layer<E: Element>(h: &mut Sha256, name: &str, state: &[(String, Tensor<E>)]) {
    for (pname, t) in state {
        h.update(name.as_bytes());
        h.update(b"/");
        h.update(pname.as_bytes());
        h.update([0]);
        h.update(t.to_le_bytes());
    }
}

/// Appends `entry` to the model's lineage, then writes it to `path`.
pub fn save_checkpoint<E: Element>(model: &mut Model<E>, entry: ProvenanceEntry, path: &Path) -> Result<(), ArchError> {
    model.push_provenance(entry);
    model.write(path)
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<Model<E>, ArchError> {
    let bytes = fs::read(path).map_err(|source| ArchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(path, &bytes)
}

/// Like [`load_checkpoint`] but rejects a checkpoint built for another spec.
pub fn load_checkpoint_for<E: Element>(path: &Path, expected: &NetworkSpec) -> Result<Model<E>, ArchError> {
    let model = load_checkpoint(path)?;
    if &model.spec != expected {
        return Err(ArchError::SpecMismatch {
            path: path.to_path_buf(),
            expected: describe(expected),
            found: describe(&model.spec),
        });
    }
    Ok(model)
}

fn describe(spec: &NetworkSpec) -> String {
    format!(
        "{} {}x{} scale {}",
        spec.backbone, spec.input_resolution.0, spec.input_resolution.1, spec.width_scale
    )
}

fn parse<E: Element>(path: &Path, bytes: &[u8]) -> Result<Model<E>, ArchError> {
    let p = || path.to_path_buf();
    let truncated = |detail: &str| ArchError::Truncated {
        path: p(),
        detail: detail.into(),
    };
    let corrupt = |detail: String| ArchError::Corrupt { path: p(), detail };
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return if CHECKPOINT_MAGIC.starts_with(bytes) && !bytes.is_empty() {
            Err(truncated("magic"))
        } else {
            Err(ArchError::NotACheckpoint(p()))
        };
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ArchError::NotACheckpoint(p()));
    }
    let version = u32::from_le_bytes(
        bytes
            .get(8..12)
            .ok_or_else(|| truncated("version"))?
            .try_into()
            .unwrap(),
    );
    if version != CHECKPOINT_VERSION {
        return Err(ArchError::VersionMismatch {
            path: p(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(
        bytes
            .get(12..20)
            .ok_or_else(|| truncated("header length"))?
            .try_into()
            .unwrap(),
    );
    let header_end = 20usize
        .checked_add(usize::try_from(header_len).map_err(|_| corrupt("header length overflow".into()))?)
        .ok_or_else(|| corrupt("header length overflow".into()))?;
    let header_bytes = bytes.get(20..header_end).ok_or_else(|| truncated("header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.provenance.is_empty() {
        return Err(ArchError::Untagged(p()));
    }
    if header.dtype != E::DTYPE {
        return Err(ArchError::DTypeMismatch {
            path: p(),
            found: header.dtype,
            expected: E::DTYPE,
        });
    }
    let payload = &bytes[header_end..];
    let needed = header.tensors.iter().map(|t| t.offset + t.length).max().unwrap_or(0);
    if (payload.len() as u64) < needed {
        return Err(truncated("parameter data"));
    }
    if payload.len() as u64 > needed {
        return Err(corrupt(format!("{} trailing bytes", payload.len() as u64 - needed)));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload digest mismatch".into()));
    }
    header.spec.validate()?;
    let mut network: Network<E> = build_network(&header.spec, 0)?;
    let width = E::DTYPE.size_of();
    let mut seen = 0usize;
    for entry in &header.tensors {
        let (lname, pname) = entry
            .name
            .split_once('/')
            .ok_or_else(|| corrupt(format!("bad tensor name {:?}", entry.name)))?;
        let numel: usize = entry.shape.iter().product();
        if entry.length as usize != numel * width {
            return Err(corrupt(format!("{}: length does not match shape", entry.name)));
        }
        let start = entry.offset as usize;
        let values: Vec<E> = payload[start..start + entry.length as usize]
            .chunks_exact(width)
            .map(E::from_le_slice)
            .collect();
        let layer = network
            .layer_mut(lname)
            .ok_or_else(|| corrupt(format!("unknown layer {lname}")))?;
        let slot: &mut Vec<E> = match pname {
            "running_mean" | "running_var" => {
                let rs = layer
                    .running_stats_mut()
                    .ok_or_else(|| corrupt(format!("{lname} has no running statistics")))?;
                if pname == "running_mean" {
                    &mut rs.mean
                } else {
                    &mut rs.var
                }
            }
            _ => {
                let t = layer
                    .param_mut(pname)
                    .ok_or_else(|| corrupt(format!("unknown parameter {}", entry.name)))?;
                if t.shape() != entry.shape.as_slice() {
                    return Err(corrupt(format!(
                        "{}: shape {:?} vs {:?}",
                        entry.name,
                        entry.shape,
                        t.shape()
                    )));
                }
                *t = Tensor::new(entry.shape.clone(), values).map_err(|e| corrupt(e.to_string()))?;
                seen += 1;
                continue;
            }
        };
        if slot.len() != values.len() {
            return Err(corrupt(format!("{}: wrong length", entry.name)));
        }
        *slot = values;
        seen += 1;
    }
    let expected: usize = network.layers().iter().map(|l| l.named_state().len()).sum();
    if seen != expected {
        return Err(corrupt(format!("{seen} tensors stored, network has {expected}")));
    }
    Ok(Model {
        spec: header.spec,
        network,
        provenance: header.provenance,
    })
}
