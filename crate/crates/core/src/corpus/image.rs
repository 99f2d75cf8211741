//! Grayscale line images, binary PGM I/O and normalization to model input.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_extractor::STRIDE;

/// Normalized height of every model input.
pub const LINE_HEIGHT: usize = 64;

/// Row-major grayscale image with values in `[0, 1]`; 0 is ink, 1 is
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Data(format!("{} values for a {width}×{height} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Quantizes to 8 bits for storage.
    pub fn to_raw(&self) -> RawImage {
        let data = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
        RawImage { width: self.width, height: self.height, maxval: 255, data }
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        self.to_raw().save_pgm(path)
    }
}

/// Integer grayscale samples as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl RawImage {
    /// Parses binary PGM (`P5`) with 8- or 16-bit samples.
    pub fn parse_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format { what: "pgm", detail: detail.to_string() };
        let mut pos = 0;
        let token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        if token(&mut pos)? != "P5" {
            return Err(bad("missing P5 magic"));
        }
        let num = |pos: &mut usize, what: &str| -> Result<usize> {
            token(pos)?.parse::<usize>().map_err(|_| bad(&format!("invalid {what}")))
        };
        let width = num(&mut pos, "width")?;
        let height = num(&mut pos, "height")?;
        let maxval = num(&mut pos, "maxval")?;
        if width == 0 || height == 0 {
            return Err(bad("zero dimension"));
        }
        if maxval == 0 || maxval > u16::MAX as usize {
            return Err(bad("maxval out of range"));
        }
        // Exactly one whitespace byte separates the header from the samples.
        pos += 1;
        let wide = maxval > 255;
        let need = width * height * if wide { 2 } else { 1 };
        let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
        let data: Vec<u16> = if wide {
            body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            body.iter().map(|&b| b as u16).collect()
        };
        if data.iter().any(|&v| v as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        Ok(Self { width, height, maxval: maxval as u16, data })
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::parse_pgm(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format { what, detail: format!("{}: {detail}", path.display()) },
            other => other,
        })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            out.extend(self.data.iter().flat_map(|v| v.to_be_bytes()));
        } else {
            out.extend(self.data.iter().map(|&v| v as u8));
        }
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// A normalized line image and the width of its content before padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageLine {
    pub pixels: GrayImage,
    pub source_width: usize,
}

impl ImageLine {
    /// Right-pads `pixels` with background to a multiple of the extractor
    /// stride.
    pub fn from_content(pixels: GrayImage) -> Self {
        let source_width = pixels.width;
        let padded = source_width.div_ceil(STRIDE) * STRIDE;
        Self { pixels: pad_right(&pixels, padded), source_width }
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }
}

/// Extends `img` to `width` columns of background.
pub fn pad_right(img: &GrayImage, width: usize) -> GrayImage {
    let mut out = GrayImage::filled(width.max(img.width), img.height, 1.0);
    for y in 0..img.height {
        out.data[y * out.width..y * out.width + img.width].copy_from_slice(&img.data[y * img.width..(y + 1) * img.width]);
    }
    out
}

/// Threshold maximizing between-class variance; class one is `v <= t`.
/// `None` when fewer than two levels occur.
pub fn otsu_threshold(data: &[u16], maxval: u16) -> Option<u16> {
    let mut hist = vec![0u64; maxval as usize + 1];
    for &v in data {
        hist[v as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0u16);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, t as u16);
        }
    }
    Some(best.1)
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let axis = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = GrayImage::filled(width, height, 1.0);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sx, img.width);
            let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
            let bot = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
            out.set(x, y, (top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub line: ImageLine,
    /// The input had a single gray level and carries no ink.
    pub blank: bool,
}

/// Threshold, stretch the ink levels, scale to [`LINE_HEIGHT`] and pad.
///
/// Levels above the threshold become background (1.0); levels at or below
/// it map linearly into `[0, 1)` so relative ink darkness survives.
pub fn preprocess_image(raw: &RawImage) -> Result<Preprocessed> {
    if raw.width == 0 || raw.height == 0 || raw.data.len() != raw.width * raw.height {
        return Err(Error::Data("empty or inconsistent raw image".into()));
    }
    let width = ((raw.width as f64 * LINE_HEIGHT as f64 / raw.height as f64).round() as usize).max(1);
    let Some(t) = otsu_threshold(&raw.data, raw.maxval) else {
        log::warn!("blank image ({}×{}): no ink found", raw.width, raw.height);
        let line = ImageLine::from_content(GrayImage::filled(width, LINE_HEIGHT, 1.0));
        return Ok(Preprocessed { line, blank: true });
    };
    let denom = t as f32 + 1.0;
    let stretched: Vec<f32> = raw
        .data
        .iter()
        .map(|&v| if v > t { 1.0 } else { v as f32 / denom })
        .collect();
    let img = GrayImage::new(raw.width, raw.height, stretched)?;
    let scaled = if raw.height == LINE_HEIGHT && width == raw.width {
        img
    } else {
        resize_bilinear(&img, width, LINE_HEIGHT)
    };
    Ok(Preprocessed { line: ImageLine::from_content(scaled), blank: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(width: usize, height: usize, data: Vec<u16>) -> RawImage {
        RawImage { width, height, maxval: 255, data }
    }

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let img = raw(3, 2, vec![0, 10, 255, 7, 128, 1]);
        let bytes = img.to_pgm();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(RawImage::parse_pgm(&bytes).unwrap(), img);

        let wide = RawImage { width: 2, height: 1, maxval: 1000, data: vec![999, 3] };
        assert_eq!(RawImage::parse_pgm(&wide.to_pgm()).unwrap(), wide);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let bytes = b"P5 # comment\n2 1\n# more\n255\n\x05\x06";
        assert_eq!(RawImage::parse_pgm(bytes).unwrap().data, vec![5, 6]);
        assert!(RawImage::parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(RawImage::parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(RawImage::parse_pgm(b"P5\n1 1\n10\n\x0b").is_err());
    }

    #[test]
    fn all_white_is_blank_background() {
        let out = preprocess_image(&raw(20, 32, vec![255; 640])).unwrap();
        assert!(out.blank);
        assert_eq!(out.line.pixels.height, LINE_HEIGHT);
        assert_eq!(out.line.width(), 48);
        assert!(out.line.pixels.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn binary_levels_map_to_ink_and_background() {
        let data: Vec<u16> = (0..64 * 16).map(|i| if i % 3 == 0 { 0 } else { 255 }).collect();
        let out = preprocess_image(&raw(16, 64, data.clone())).unwrap();
        assert!(!out.blank);
        for (v, r) in out.line.pixels.data.iter().zip(&data) {
            assert_eq!(*v, if *r == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn otsu_separates_two_clusters() {
        let data = [10, 12, 11, 200, 210, 205, 10];
        let t = otsu_threshold(&data, 255).unwrap();
        assert!((12..200).contains(&t));
        assert_eq!(otsu_threshold(&[7, 7, 7], 255), None);
    }

    #[test]
    fn halving_height_averages_pixel_pairs() {
        // 128-high input: the output is the 2×2 block mean, width halved.
        let (w, h) = (40, 128);
        let img = GrayImage::new(w, h, (0..w * h).map(|i| ((i * 37) % 101) as f32 / 101.0).collect()).unwrap();
        let out = resize_bilinear(&img, w / 2, h / 2);
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let want = (img.get(2 * x, 2 * y) + img.get(2 * x + 1, 2 * y) + img.get(2 * x, 2 * y + 1)
                    + img.get(2 * x + 1, 2 * y + 1)) as f64
                    / 4.0;
                assert!((out.get(x, y) as f64 - want).abs() < 1e-6);
            }
        }

        let data: Vec<u16> = (0..w * h).map(|i| if (i / w) % 5 == 0 { 20 } else { 240 }).collect();
        let pre = preprocess_image(&raw(w, h, data)).unwrap();
        assert_eq!(pre.line.source_width, 20);
        assert_eq!(pre.line.width(), 32);
        assert_eq!(pre.line.pixels.height, 64);
    }

    #[test]
    fn padding_is_background() {
        let line = ImageLine::from_content(GrayImage::filled(17, 64, 0.0));
        assert_eq!(line.width(), 32);
        assert_eq!(line.source_width, 17);
        assert_eq!(line.pixels.get(16, 5), 0.0);
        assert_eq!(line.pixels.get(17, 5), 1.0);
    }

    proptest! {
        #[test]
        fn preprocessing_is_bounded_and_monotone(data in proptest::collection::vec(0u16..=255, 64 * 8)) {
            let img = raw(8, 64, data.clone());
            let out = preprocess_image(&img).unwrap();
            prop_assert_eq!(out.line.pixels.height, LINE_HEIGHT);
            prop_assert!(out.line.pixels.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // At native height each pixel is a pointwise map of its raw level.
            for (i, &a) in data.iter().enumerate() {
                for (j, &b) in data.iter().enumerate().take(40) {
                    if a < b {
                        let (pa, pb) = (out.line.pixels.data[(i / 8) * 16 + i % 8], out.line.pixels.data[(j / 8) * 16 + j % 8]);
                        prop_assert!(pa <= pb);
                    }
                }
            }
        }
    }
}
