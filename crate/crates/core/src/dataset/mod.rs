//! Samples, manifests, fold splitting and the synthetic endoscopy generator.

mod cache;
mod folds;
mod image;
mod manifest;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{ChannelNorm, LoadedSet};
pub use folds::{split_folds, FoldMode, FoldSplit};
pub use image::{DecodeFn, DecoderRegistry, Image};
pub use manifest::{
    domain_filter, ingest_manifest, ingest_manifest_with, load_ground_truth, write_ground_truth, write_manifest,
    MANIFEST_HEADER,
};
pub use synthetic::{generate_synthetic, lesion_oracle, lesion_reference_color, write_synthetic, SyntheticOptions};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Csv { line: u64, detail: String },
    #[error("line {line}: unknown {column} value {value:?}")]
    UnknownValue {
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("line {line}: image {path} not found")]
    MissingFile { line: u64, path: PathBuf },
    #[error("line {line}: cannot decode {path}: {detail}")]
    Decode { line: u64, path: PathBuf, detail: String },
    #[error("sample {id}: cannot load image: {detail}")]
    Load { id: String, detail: String },
    #[error("resolution must be positive")]
    ZeroResolution,
    #[error("cannot split {available} {unit} into {k} folds")]
    TooManyFolds {
        k: usize,
        available: usize,
        unit: &'static str,
    },
    #[error("procedure subset is empty")]
    EmptySubset,
}

macro_rules! closed_set {
    ($name:ident, $column:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COLUMN: &'static str = $column;

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).expect("variant listed in ALL")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                let t = s.trim();
                $(if t.eq_ignore_ascii_case($text) {
                    return Ok($name::$variant);
                })+
                Err(t.to_string())
            }
        }
    };
}

closed_set!(Procedure, "procedure", { Urs => "URS", Cys => "CYS" });
closed_set!(Modality, "modality", { Wli => "WLI", Nbi => "NBI" });
closed_set!(Label, "label", { NoLesion => "no_lesion", Lesion => "lesion" });

impl Label {
    /// Index of this label in the network output; `Lesion` is class 1.
    pub fn class_index(self) -> usize {
        self.index()
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Box rescaled from a `from`-sized image to a `to`-sized one.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        BoundingBox {
            x0: (self.x0 as f64 * sx).floor() as usize,
            y0: (self.y0 as f64 * sy).floor() as usize,
            x1: ((self.x1 as f64 * sx).ceil() as usize).min(to.0),
            y1: ((self.y1 as f64 * sy).ceil() as usize).min(to.1),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<Image>),
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Stable identifier; the relative image path for ingested data.
    pub id: String,
    pub image: ImageSource,
    pub procedure: Procedure,
    pub modality: Modality,
    pub label: Label,
    pub patient_id: String,
    pub case_id: String,
    /// Ground-truth lesion box, when known.
    pub lesion_box: Option<BoundingBox>,
}

impl Sample {
    pub fn load_image(&self) -> Result<Image, DatasetError> {
        self.load_image_with(&DecoderRegistry::default())
    }

    pub fn load_image_with(&self, decoders: &DecoderRegistry) -> Result<Image, DatasetError> {
        match &self.image {
            ImageSource::Memory(img) => Ok((**img).clone()),
            ImageSource::File(path) => decoders.decode_file(path).map_err(|detail| DatasetError::Load {
                id: self.id.clone(),
                detail,
            }),
        }
    }
}

/// Sample counts per (procedure, modality, label) cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Composition {
    counts: [[[usize; 2]; 2]; 2],
}

impl Composition {
    pub fn uniform(per_cell: usize) -> Self {
        Self {
            counts: [[[per_cell; 2]; 2]; 2],
        }
    }

    /// Frame counts of the clinical collection the method was developed on.
    pub fn table_one() -> Self {
        let mut c = Self::default();
        c.set(Procedure::Cys, Modality::Nbi, Label::Lesion, 337);
        c.set(Procedure::Cys, Modality::Wli, Label::Lesion, 906);
        c.set(Procedure::Cys, Modality::Nbi, Label::NoLesion, 298);
        c.set(Procedure::Cys, Modality::Wli, Label::NoLesion, 1346);
        c.set(Procedure::Urs, Modality::Nbi, Label::Lesion, 28);
        c.set(Procedure::Urs, Modality::Wli, Label::Lesion, 1801);
        c.set(Procedure::Urs, Modality::Nbi, Label::NoLesion, 227);
        c.set(Procedure::Urs, Modality::Wli, Label::NoLesion, 1158);
        c
    }

    pub fn get(&self, p: Procedure, m: Modality, l: Label) -> usize {
        self.counts[p.index()][m.index()][l.index()]
    }

    pub fn set(&mut self, p: Procedure, m: Modality, l: Label, n: usize) {
        self.counts[p.index()][m.index()][l.index()] = n;
    }

    fn bump(&mut self, p: Procedure, m: Modality, l: Label) {
        self.counts[p.index()][m.index()][l.index()] += 1;
    }

    pub fn cells(&self) -> impl Iterator<Item = (Procedure, Modality, Label, usize)> + '_ {
        Procedure::ALL.iter().flat_map(move |&p| {
            Modality::ALL
                .iter()
                .flat_map(move |&m| Label::ALL.iter().map(move |&l| (p, m, l, self.get(p, m, l))))
        })
    }

    pub fn total(&self) -> usize {
        self.cells().map(|c| c.3).sum()
    }

    pub fn procedure_total(&self, p: Procedure) -> usize {
        self.cells().filter(|c| c.0 == p).map(|c| c.3).sum()
    }

    pub fn label_total(&self, l: Label) -> usize {
        self.cells().filter(|c| c.2 == l).map(|c| c.3).sum()
    }

    /// Every cell divided by `divisor`, rounded down.
    pub fn scaled_down(&self, divisor: usize) -> Self {
        let mut out = *self;
        for p in Procedure::ALL {
            for m in Modality::ALL {
                for l in Label::ALL {
                    out.set(*p, *m, *l, self.get(*p, *m, *l) / divisor);
                }
            }
        }
        out
    }

    /// Cell key used in config files, e.g. `cys_nbi_lesion`.
    pub fn cell_key(p: Procedure, m: Modality, l: Label) -> String {
        format!("{}_{}_{}", p.as_str(), m.as_str(), l.as_str()).to_ascii_lowercase()
    }
}

impl Serialize for Composition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let map: std::collections::BTreeMap<String, usize> =
            self.cells().map(|(p, m, l, n)| (Self::cell_key(p, m, l), n)).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Composition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = std::collections::BTreeMap::<String, usize>::deserialize(d)?;
        let mut out = Composition::default();
        let mut keys: Vec<String> = Vec::new();
        for (p, m, l, _) in Composition::default().cells() {
            let key = Composition::cell_key(p, m, l);
            if let Some(&n) = map.get(&key) {
                out.set(p, m, l, n);
            }
            keys.push(key);
        }
        if let Some(bad) = map.keys().find(|k| !keys.contains(k)) {
            return Err(serde::de::Error::custom(format!(
                "unknown composition cell {bad:?} (expected one of {})",
                keys.join(", ")
            )));
        }
        Ok(out)
    }
}

/// Immutable list of samples with its composition tally.
#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    samples: Vec<Sample>,
    composition: Composition,
}

impl DatasetManifest {
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut composition = Composition::default();
        for s in &samples {
            composition.bump(s.procedure, s.modality, s.label);
        }
        Self { samples, composition }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn composition(&self) -> &Composition {
        &self.composition
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sub-manifest holding `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn concat(&self, other: &DatasetManifest) -> DatasetManifest {
        DatasetManifest::new(self.samples.iter().chain(&other.samples).cloned().collect())
    }

    /// SHA-256 over sample ids and labels, in order.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update([
                0,
                s.label.index() as u8,
                s.procedure.index() as u8,
                s.modality.index() as u8,
            ]);
        }
        hex::encode(h.finalize())
    }
}
