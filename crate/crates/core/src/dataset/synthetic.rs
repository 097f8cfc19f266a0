use std::f32::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{write_ground_truth, write_manifest};
use super::{
    BoundingBox, Composition, DatasetError, DatasetManifest, Image, ImageSource, Label, Modality, Procedure, Sample,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticOptions {
    /// Patients per procedure; samples are dealt to them round-robin.
    pub patients: usize,
    /// Blob radius range as a fraction of the image side.
    pub lesion_radius: (f32, f32),
    pub specular_spots: usize,
    /// Chance that a ureteroscopy frame, of either label, carries a benign
    /// debris patch with the colour and size of a cystoscopy lesion.
    pub debris_probability: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            patients: 6,
            lesion_radius: (1.0 / 7.0, 1.0 / 4.5),
            specular_spots: 2,
            debris_probability: 0.0,
        }
    }
}

struct Palette {
    tissue: [f32; 3],
    vessel: [f32; 3],
    vignette: f32,
}

fn palette(p: Procedure, m: Modality) -> Palette {
    match (p, m) {
        (Procedure::Cys, Modality::Wli) => Palette {
            tissue: [0.85, 0.45, 0.40],
            vessel: [0.62, 0.18, 0.16],
            vignette: 0.25,
        },
        (Procedure::Cys, Modality::Nbi) => Palette {
            tissue: [0.35, 0.55, 0.50],
            vessel: [0.20, 0.30, 0.18],
            vignette: 0.25,
        },
        (Procedure::Urs, Modality::Wli) => Palette {
            tissue: [0.80, 0.35, 0.25],
            vessel: [0.55, 0.16, 0.10],
            vignette: 0.45,
        },
        (Procedure::Urs, Modality::Nbi) => Palette {
            tissue: [0.30, 0.45, 0.55],
            vessel: [0.16, 0.28, 0.22],
            vignette: 0.45,
        },
    }
}

/// Nominal lesion colour: pale yellow in cystoscopy, dark purple in
/// ureteroscopy, shifted by the light modality.
pub fn lesion_reference_color(p: Procedure, m: Modality) -> [f32; 3] {
    match (p, m) {
        (Procedure::Cys, Modality::Wli) => [0.95, 0.88, 0.45],
        (Procedure::Cys, Modality::Nbi) => [0.80, 0.85, 0.30],
        (Procedure::Urs, Modality::Wli) => [0.40, 0.08, 0.45],
        (Procedure::Urs, Modality::Nbi) => [0.45, 0.10, 0.55],
    }
}

/// Pixels within this max-channel distance of the reference colour count
/// as lesion pixels for the oracle.
const ORACLE_TOLERANCE: f32 = 0.1;
const TEXTURE_AMPLITUDE: f32 = 0.035;

/// Pixel-statistics detector: a lesion is present when enough pixels sit
/// close to the domain's lesion colour.
pub fn lesion_oracle(image: &Image, p: Procedure, m: Modality) -> bool {
    let reference = lesion_reference_color(p, m);
    let near = image
        .data()
        .chunks_exact(3)
        .filter(|px| (0..3).all(|c| (px[c] - reference[c]).abs() <= ORACLE_TOLERANCE))
        .count();
    near >= oracle_min_pixels(image.width() * image.height())
}

fn oracle_min_pixels(pixels: usize) -> usize {
    (pixels as f64 * 0.005).ceil().max(1.0) as usize
}

fn sample_seed(seed: u64, p: Procedure, m: Modality, l: Label, index: usize) -> u64 {
    let cell = (p.index() * 4 + m.index() * 2 + l.index()) as u64;
    seed ^ (cell + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

struct Wave {
    kx: f32,
    ky: f32,
    phase: f32,
    amp: f32,
}

fn render(
    res: usize,
    p: Procedure,
    m: Modality,
    lesion: bool,
    opts: &SyntheticOptions,
    rng: &mut ChaCha8Rng,
) -> (Image, Option<BoundingBox>) {
    let pal = palette(p, m);
    let r = res as f32;
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.5..2.0) * 2.0 * PI / r;
            Wave {
                kx: angle.cos() * freq,
                ky: angle.sin() * freq,
                phase: rng.random_range(0.0..2.0 * PI),
                amp: 0.04,
            }
        })
        .collect();
    // Vessels: meandering horizontal or vertical curves.
    let vessels: Vec<(bool, f32, f32, f32, f32)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                rng.random_bool(0.5),
                rng.random_range(0.1..0.9) * r,
                rng.random_range(0.05..0.15) * r,
                rng.random_range(1.0..3.0) * 2.0 * PI / r,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let vessel_width = (r / 64.0).max(0.6);
    let spots: Vec<(f32, f32, f32)> = (0..opts.specular_spots)
        .map(|_| {
            (
                rng.random_range(0.1..0.9) * r,
                rng.random_range(0.1..0.9) * r,
                (r / 40.0).max(0.7) * rng.random_range(0.8..1.5),
            )
        })
        .collect();
    let centre = (r - 1.0) / 2.0;
    let max_d2 = 2.0 * centre * centre;
    let mut img = Image::filled(res, res, [0.0; 3]);
    for y in 0..res {
        for x in 0..res {
            let (fx, fy) = (x as f32, y as f32);
            let field: f32 = waves
                .iter()
                .map(|w| w.amp * (w.kx * fx + w.ky * fy + w.phase).cos())
                .sum();
            let mut c = pal.tissue.map(|v| v * (1.0 + field));
            for &(horizontal, offset, amp, freq, phase) in &vessels {
                let (along, across) = if horizontal { (fx, fy) } else { (fy, fx) };
                let path = offset + amp * (freq * along + phase).sin();
                let dist = (across - path).abs();
                if dist < vessel_width {
                    let t = 1.0 - dist / vessel_width;
                    for (v, target) in c.iter_mut().zip(pal.vessel) {
                        *v += (target - *v) * t;
                    }
                }
            }
            let d2 = (fx - centre).powi(2) + (fy - centre).powi(2);
            let shade = 1.0 - pal.vignette * d2 / max_d2;
            c = c.map(|v| v * shade);
            for &(sx, sy, sr) in &spots {
                let d = ((fx - sx).powi(2) + (fy - sy).powi(2)).sqrt();
                if d < sr {
                    let t = 1.0 - d / sr;
                    c = c.map(|v| v + (1.0 - v) * t);
                }
            }
            let noise: [f32; 3] = [
                rng.random_range(-0.025..0.025),
                rng.random_range(-0.025..0.025),
                rng.random_range(-0.025..0.025),
            ];
            img.set_pixel(x, y, [c[0] + noise[0], c[1] + noise[1], c[2] + noise[2]]);
        }
    }
    if p == Procedure::Urs && rng.random_bool(opts.debris_probability) {
        paint_blob(
            &mut img,
            lesion_reference_color(Procedure::Cys, m),
            opts.lesion_radius,
            rng,
        );
    }
    let bbox = lesion.then(|| paint_blob(&mut img, lesion_reference_color(p, m), opts.lesion_radius, rng));
    (img.quantized(), bbox)
}

/// Irregular elliptical blob with a soft rim and fine texture.
fn paint_blob(img: &mut Image, reference: [f32; 3], radius: (f32, f32), rng: &mut ChaCha8Rng) -> BoundingBox {
    let res = img.width();
    let r = res as f32;
    let rx = rng.random_range(radius.0..=radius.1) * r;
    let ry = rng.random_range(radius.0..=radius.1) * r;
    let wobble = 0.15;
    let reach = rx.max(ry) * (1.0 + wobble);
    let cx = rng.random_range(reach..=(r - 1.0 - reach).max(reach));
    let cy = rng.random_range(reach..=(r - 1.0 - reach).max(reach));
    let rot = rng.random_range(0.0..PI);
    let lobes = rng.random_range(2..5) as f32;
    let lobe_phase = rng.random_range(0.0..2.0 * PI);
    let speckle = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.3..0.6));
    let (mut x0, mut y0, mut x1, mut y1) = (res, res, 0, 0);
    for y in 0..res {
        for x in 0..res {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
            let theta = v.atan2(u);
            let boundary = 1.0 + wobble * (lobes * theta + lobe_phase).sin();
            let d = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt() / boundary;
            if d >= 1.0 {
                continue;
            }
            let alpha = ((1.0 - d) / 0.25).min(1.0);
            let texture =
                0.5 * TEXTURE_AMPLITUDE * ((speckle.1 * x as f32 + speckle.0).sin() * (speckle.1 * y as f32).cos())
                    + rng.random_range(-0.5..0.5) * TEXTURE_AMPLITUDE;
            let base = img.pixel(x, y);
            let mut out = [0.0; 3];
            for ch in 0..3 {
                let lesion = reference[ch] + texture;
                out[ch] = base[ch] + (lesion - base[ch]) * alpha;
            }
            img.set_pixel(x, y, out);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    BoundingBox { x0, y0, x1, y1 }
}

/// Deterministic in-memory dataset. Every image depends only on the seed,
/// its cell and its index within the cell.
pub fn generate_synthetic(
    composition: &Composition,
    resolution: usize,
    seed: u64,
    options: &SyntheticOptions,
) -> Result<DatasetManifest, DatasetError> {
    if resolution == 0 {
        return Err(DatasetError::ZeroResolution);
    }
    let jobs: Vec<(Procedure, Modality, Label, usize)> = composition
        .cells()
        .flat_map(|(p, m, l, n)| (0..n).map(move |i| (p, m, l, i)))
        .collect();
    let patients = options.patients.max(1);
    let samples = jobs
        .par_iter()
        .map(|&(p, m, l, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, p, m, l, i));
            let (img, bbox) = render(resolution, p, m, l == Label::Lesion, options, &mut rng);
            let proc = p.as_str().to_ascii_lowercase();
            // Deal patients per procedure so every patient has both labels.
            let cell_offset = m.index() * 2 + l.index();
            let patient = (i + cell_offset) % patients;
            Sample {
                id: format!("{proc}/{}/{}/{i:05}.ppm", m.as_str().to_ascii_lowercase(), l.as_str()),
                image: ImageSource::Memory(Arc::new(img)),
                procedure: p,
                modality: m,
                label: l,
                patient_id: format!("{proc}_p{patient:02}"),
                case_id: format!("{proc}_p{patient:02}_c{}", i % 2),
                lesion_box: bbox,
            }
        })
        .collect();
    Ok(DatasetManifest::new(samples))
}

/// Writes images under `dir/<id>`, plus `manifest.csv` and
/// `ground_truth.csv`. Returns the manifest with file-backed samples.
pub fn write_synthetic(manifest: &DatasetManifest, dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    let written: Vec<Sample> = manifest
        .samples()
        .par_iter()
        .map(|s| {
            let path = dir.join(&s.id);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
            s.load_image()?.write_ppm(&path)?;
            let mut out = s.clone();
            out.image = ImageSource::File(path);
            Ok(out)
        })
        .collect::<Result<_, DatasetError>>()?;
    let written = DatasetManifest::new(written);
    write_manifest(&written, &dir.join("manifest.csv"))?;
    write_ground_truth(&written, &dir.join("ground_truth.csv"))?;
    Ok(written)
}
