use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::DatasetError;

/// RGB raster, row-major `H×W×3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, String> {
        if width == 0 || height == 0 {
            return Err("zero-sized image".into());
        }
        if data.len() != width * height * 3 {
            return Err(format!(
                "expected {} values for {width}x{height}x3, got {}",
                width * height * 3,
                data.len()
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("pixel values must lie in [0, 1]".into());
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest 8-bit level, so the image survives
    /// a PPM round trip unchanged.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = (*v * 255.0).round() / 255.0;
        }
        self
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let (y0, y1, fy) = sample_axis(y, height, self.height);
            for x in 0..width {
                let (x0, x1, fx) = sample_axis(x, width, self.width);
                let (a, b, c, d) = (
                    self.pixel(x0, y0),
                    self.pixel(x1, y0),
                    self.pixel(x0, y1),
                    self.pixel(x1, y1),
                );
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * fx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                    out.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            width,
            height,
            data: out,
        }
    }

    /// Channel-first copy `[3, H, W]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Image, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII PPM header")?);
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported PPM magic {:?}", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field {s:?}"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported PPM maxval {maxval}"));
        }
        pos += 1;
        let n = width * height * 3;
        let raster = bytes.get(pos..pos + n).ok_or("truncated PPM raster")?;
        let data = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
        Image::new(width, height, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_ppm()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn sample_axis(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f32) {
    let src = ((i as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f32)
}

pub type DecodeFn = fn(&[u8]) -> Result<Image, String>;

/// Maps lower-case file extensions to decoders. PPM is built in; other
/// formats can be plugged in by the caller.
#[derive(Clone)]
pub struct DecoderRegistry {
    decoders: BTreeMap<String, DecodeFn>,
}

impl Default for DecoderRegistry {
    fn default() -> Self {
        let mut r = Self {
            decoders: BTreeMap::new(),
        };
        r.register("ppm", Image::from_ppm);
        r
    }
}

impl DecoderRegistry {
    pub fn register(&mut self, extension: &str, decode: DecodeFn) {
        self.decoders.insert(extension.to_ascii_lowercase(), decode);
    }

    pub fn decode_file(&self, path: &Path) -> Result<Image, String> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        let decode = self
            .decoders
            .get(&ext)
            .ok_or_else(|| format!("no decoder registered for extension {ext:?}"))?;
        let bytes = fs::read(path).map_err(|e| e.to_string())?;
        decode(&bytes)
    }
}
