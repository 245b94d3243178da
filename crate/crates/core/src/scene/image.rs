use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{self, Read, Write};
use std::path::Path;

use super::SceneError;

/// Gray level at or above which a pixel counts as white background or base.
pub const WHITE_LEVEL: f64 = 0.9;

/// Pixels darker than this belong to the connector (body and studs).
pub const CONNECTOR_LEVEL: f64 = 0.6;

/// Single-channel image, row-major, gray levels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, level: f64) -> Self {
        Image { width, height, pixels: vec![level.clamp(0.0, 1.0); width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, SceneError> {
        if pixels.len() != width * height {
            return Err(SceneError::Dimensions { expected: width * height, actual: pixels.len() });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(SceneError::PixelRange(*p));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Rounds every pixel to the nearest multiple of 1/255 so that the image
    /// survives a PGM round trip bit-exactly.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Number of pixels darker than [`CONNECTOR_LEVEL`].
    pub fn connector_pixel_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p < CONNECTOR_LEVEL).count()
    }

    /// Darkness-weighted centroid `(u, v)` of connector pixels, in pixel units
    /// with pixel centers at half-integers.
    pub fn connector_centroid(&self) -> Option<(f64, f64)> {
        let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let w = (CONNECTOR_LEVEL - self.get(x, y)).max(0.0);
                sw += w;
                su += w * (x as f64 + 0.5);
                sv += w * (y as f64 + 0.5);
            }
        }
        (sw > 0.0).then(|| (su / sw, sv / sw))
    }

    /// Median of the white pixels; the level used to paint occluders.
    pub fn background_level(&self) -> f64 {
        let mut white: Vec<f64> = self.pixels.iter().copied().filter(|&p| p >= WHITE_LEVEL).collect();
        if white.is_empty() {
            return 1.0;
        }
        white.sort_by(f64::total_cmp);
        white[white.len() / 2]
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)
    }

    pub fn read_pgm<R: Read>(mut r: R) -> Result<Self, SceneError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| SceneError::Pgm(m.to_string());
        let mut pos = 0usize;
        let mut token = || -> Result<String, SceneError> {
            loop {
                while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < buf.len() && buf[pos] == b'#' {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = buf.get(pos + 1..).unwrap_or(&[]);
        if data.len() != width * height {
            return Err(SceneError::Dimensions { expected: width * height, actual: data.len() });
        }
        let pixels = data.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image { width, height, pixels })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), SceneError> {
        let f = std::fs::File::create(path).map_err(|e| SceneError::io(path, e))?;
        self.write_pgm(io::BufWriter::new(f)).map_err(|e| SceneError::io(path, e))
    }

    pub fn load_pgm(path: &Path) -> Result<Self, SceneError> {
        let f = std::fs::File::open(path).map_err(|e| SceneError::io(path, e))?;
        Image::read_pgm(io::BufReader::new(f))
    }
}

/// Adds seeded uniform noise in `[-amplitude, amplitude]` to white pixels.
pub fn augment(img: &Image, rng_seed: u64, noise_amplitude: f64) -> Image {
    let amplitude = noise_amplitude.clamp(0.0, 1.0);
    if amplitude == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = img.clone();
    for p in &mut out.pixels {
        // draw for every pixel so the noise field does not depend on content
        let n: f64 = rng.gen_range(-amplitude..=amplitude);
        if *p > WHITE_LEVEL {
            *p = ((*p + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    out
}

/// Image border from which an occluding band grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    #[default]
    Left,
    Right,
    Top,
    Bottom,
}

/// Paints a band growing from the left border with background gray until
/// only `visible_fraction` of the connector pixels remain.
pub fn occlude(img: &Image, visible_fraction: f64) -> Result<Image, SceneError> {
    occlude_from(img, visible_fraction, Border::Left)
}

pub fn occlude_from(img: &Image, visible_fraction: f64, border: Border) -> Result<Image, SceneError> {
    if !(visible_fraction > 0.0 && visible_fraction <= 1.0) {
        return Err(SceneError::VisibleFraction(visible_fraction));
    }
    let total = img.connector_pixel_count();
    let to_hide = ((1.0 - visible_fraction) * total as f64).round() as usize;
    if to_hide == 0 {
        return Ok(img.clone());
    }
    let bg = img.background_level();
    let (w, h) = (img.width, img.height);
    // sweep order: lines parallel to the border, moving inward
    let index = |line: usize, k: usize| -> usize {
        match border {
            Border::Left => k * w + line,
            Border::Right => k * w + (w - 1 - line),
            Border::Top => line * w + k,
            Border::Bottom => (h - 1 - line) * w + k,
        }
    };
    let (lines, per_line) = match border {
        Border::Left | Border::Right => (w, h),
        Border::Top | Border::Bottom => (h, w),
    };
    let mut out = img.clone();
    let mut hidden = 0usize;
    'sweep: for line in 0..lines {
        for k in 0..per_line {
            if hidden >= to_hide {
                break 'sweep;
            }
            let i = index(line, k);
            if out.pixels[i] < CONNECTOR_LEVEL {
                hidden += 1;
            }
            out.pixels[i] = bg;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let pixels = (0..w * h).map(|i| (i % 256) as f64 / 255.0).collect();
        Image::from_pixels(w, h, pixels).unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let img = gradient(17, 9);
        let mut bytes = Vec::new();
        img.write_pgm(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"P5\n17 9\n255\n"));
        let back = Image::read_pgm(&bytes[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(Image::read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(Image::read_pgm(&b"P5\n2 2\n255\n\x00"[..]).is_err());
    }

    #[test]
    fn augment_zero_amplitude_is_identity() {
        let img = Image::filled(8, 8, 0.95);
        assert_eq!(augment(&img, 3, 0.0), img);
    }

    #[test]
    fn augment_skips_dark_images() {
        let img = Image::filled(8, 8, 0.5);
        assert_eq!(augment(&img, 3, 0.3), img);
    }

    #[test]
    fn augment_is_seeded() {
        let img = Image::filled(16, 16, 0.95);
        let a = augment(&img, 42, 0.05);
        assert_eq!(a, augment(&img, 42, 0.05));
        assert_ne!(a, augment(&img, 43, 0.05));
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(a.pixels.iter().all(|p| (p - 0.95).abs() <= 0.05 + 1.0 / 255.0));
    }

    #[test]
    fn occlude_rejects_non_positive_fraction() {
        let img = Image::filled(4, 4, 0.2);
        assert!(occlude(&img, 0.0).is_err());
        assert!(occlude(&img, -0.5).is_err());
        assert!(occlude(&img, 1.5).is_err());
        assert_eq!(occlude(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn occlude_hides_requested_share() {
        let mut img = Image::filled(20, 20, 0.95);
        for y in 5..15 {
            for x in 4..16 {
                img.pixels[y * 20 + x] = 0.3;
            }
        }
        for border in [Border::Left, Border::Right, Border::Top, Border::Bottom] {
            let out = occlude_from(&img, 0.5, border).unwrap();
            let ratio = out.connector_pixel_count() as f64 / img.connector_pixel_count() as f64;
            assert!((ratio - 0.5).abs() <= 0.05, "{border:?} {ratio}");
        }
    }
}
