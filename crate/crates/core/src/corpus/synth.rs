//! Deterministic synthetic line images rendered from a fixed bitmap font.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::{GrayImage, ImageLine, LINE_HEIGHT};
use super::{Sample, Vocabulary};
use crate::error::{Error, Result};

/// Glyph cell size in pixels.
pub const GLYPH: usize = 16;
/// Top row of the glyph band.
pub const GLYPH_TOP: usize = 24;
/// Blank columns before the first and after the last glyph.
pub const MARGIN: usize = 8;

/// 16×16 bitmap for a printable ASCII character, row-major, true for ink.
pub fn glyph(c: char) -> Option<[[bool; GLYPH]; GLYPH]> {
    if !Vocabulary.contains(c) {
        return None;
    }
    let rows = font8x8::legacy::BASIC_LEGACY[c as usize];
    let mut out = [[false; GLYPH]; GLYPH];
    for (y, row) in out.iter_mut().enumerate() {
        let bits = rows[y / 2];
        for (x, px) in row.iter_mut().enumerate() {
            *px = bits >> (x / 2) & 1 == 1;
        }
    }
    Some(out)
}

/// Per-line rendering distortions.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderParams {
    /// Maximum horizontal offset of each glyph, in pixels.
    pub jitter: i32,
    /// Maximum absolute horizontal shear (pixels per row).
    pub shear: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self { jitter: 2, shear: 0.15, noise: 0.1 }
    }
}

/// Renders `text` on a 64-high canvas whose width is a multiple of 16.
pub fn render_line(text: &str, params: &RenderParams, rng: &mut impl Rng) -> Result<ImageLine> {
    let glyphs = text
        .chars()
        .map(|c| glyph(c).ok_or_else(|| Error::Data(format!("no glyph for {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let width = 2 * MARGIN + GLYPH * glyphs.len();
    let shear = if params.shear > 0.0 { rng.random_range(-params.shear..=params.shear) } else { 0.0 };
    let mut img = GrayImage::filled(width, LINE_HEIGHT, 1.0);
    let centre = (GLYPH_TOP + GLYPH / 2) as f64;
    for (i, g) in glyphs.iter().enumerate() {
        let dx = if params.jitter > 0 { rng.random_range(-params.jitter..=params.jitter) } else { 0 };
        let left = (MARGIN + i * GLYPH) as i64 + dx as i64;
        for (gy, row) in g.iter().enumerate() {
            let y = GLYPH_TOP + gy;
            let offset = (shear * (centre - y as f64)).round() as i64;
            for (gx, &ink) in row.iter().enumerate() {
                let x = left + gx as i64 + offset;
                if ink && (0..width as i64).contains(&x) {
                    img.set(x as usize, y, 0.0);
                }
            }
        }
    }
    if params.noise > 0.0 {
        let normal = Normal::new(0.0, params.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in img.data.iter_mut() {
            *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ImageLine::from_content(img))
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub charset: String,
    pub min_len: usize,
    pub max_len: usize,
    pub render: RenderParams,
}

impl SynthConfig {
    /// Twelve lowercase letters, lengths 5 to 20.
    pub fn small(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            charset: "abcdefghijkl".into(),
            min_len: 5,
            max_len: 20,
            render: RenderParams::default(),
        }
    }
}

/// Random strings over `charset` rendered as line images, ids `synth-00000`
/// onwards. Fully determined by the config.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.count == 0 {
        return Err(Error::Config("synthetic sample count must be at least 1".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!("invalid length range {}..={}", cfg.min_len, cfg.max_len)));
    }
    let chars: Vec<char> = cfg.charset.chars().collect();
    if chars.is_empty() {
        return Err(Error::Config("empty charset".into()));
    }
    if let Some(c) = chars.iter().find(|&&c| glyph(c).is_none()) {
        return Err(Error::Data(format!("no glyph for {c:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let digits = (cfg.count - 1).to_string().len().max(5);
    (0..cfg.count)
        .map(|i| {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let text: String = (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect();
            let image = render_line(&text, &cfg.render, &mut rng)?;
            Ok(Sample { id: format!("synth-{i:0digits$}"), text, image })
        })
        .collect()
}
