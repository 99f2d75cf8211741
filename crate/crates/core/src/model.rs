//! The full image-to-text network: extractor, row encoder and decoder.

use crate::corpus::{ImageLine, Vocabulary};
use crate::decoder::{greedy_decode, AttentionMechanism, Decoded, Decoder, DecoderConfig};
use crate::encoder::{self, AnnotationGrid};
use crate::error::{shape_err, Error, Result};
use crate::feature_extractor::{extract_features, CnnConfig, Mode};
use crate::numerics::{BnStats, Scalar, Tape, Tensor, Var};
use crate::params::{Bound, ParamSet, ParamSpec};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub cnn: CnnConfig,
    /// Hidden size of each encoder direction.
    pub encoder_hidden: usize,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Full-size network.
    pub fn full() -> Self {
        Self {
            cnn: CnnConfig::full(),
            encoder_hidden: 256,
            decoder: DecoderConfig {
                hidden: 128,
                layers: 2,
                embedding: 300,
                attention: AttentionMechanism::Softmax,
                input_feeding: false,
            },
        }
    }

    /// Reduced network that trains on a desktop CPU.
    pub fn desk() -> Self {
        let full = Self::full();
        Self {
            cnn: CnnConfig::desk(),
            encoder_hidden: 32,
            decoder: DecoderConfig { hidden: 64, ..full.decoder },
        }
    }

    pub fn with_attention(mut self, attention: AttentionMechanism) -> Self {
        self.decoder.attention = attention;
        self
    }

    /// Width `2E` of each annotation.
    pub fn annotation_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        self.decoder.validate()?;
        if self.encoder_hidden == 0 {
            return Err(Error::Config("encoder hidden size must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.cnn.param_specs();
        specs.extend(encoder::param_specs(self.cnn.out_channels(), self.encoder_hidden));
        specs.extend(self.decoder.param_specs(self.annotation_dim()));
        specs
    }
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub bn: Vec<BnStats<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&config.param_specs(), seed);
        let bn = config.cnn.bn_stats();
        Ok(Self { config, params, bn })
    }

    /// Assembles a model, checking every tensor against the architecture.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>, bn: Vec<BnStats<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        for spec in &specs {
            let t = params.get(&spec.name).ok_or_else(|| Error::CheckpointMismatch {
                name: spec.name.clone(),
                detail: "missing".into(),
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::CheckpointMismatch {
                    name: spec.name.clone(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                });
            }
        }
        if let Some((name, _)) = params.iter().find(|(n, _)| !specs.iter().any(|s| &s.name == *n)) {
            return Err(Error::CheckpointMismatch { name: name.clone(), detail: "not part of the architecture".into() });
        }
        let expected = config.cnn.bn_stats::<T>();
        if bn.len() != expected.len() || bn.iter().zip(&expected).any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len()) {
            return Err(Error::CheckpointMismatch { name: "batch-norm statistics".into(), detail: "layer or channel count".into() });
        }
        Ok(Self { config, params, bn })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            bn: self
                .bn
                .iter()
                .map(|s| BnStats {
                    mean: s.mean.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                    var: s.var.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    /// Images and source widths through extractor and encoder. `train`
    /// carries the dropout seed; batch-norm statistics are then updated.
    pub fn encode<'t>(
        &mut self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        images: Var<'t, T>,
        source_widths: &[usize],
        train: Option<u64>,
    ) -> Result<AnnotationGrid<'t, T>> {
        let mode = match train {
            Some(seed) => Mode::Train { stats: &mut self.bn, seed: Some(seed) },
            None => Mode::Infer { stats: &self.bn },
        };
        let grid = extract_features(tape, images, source_widths, bound, &self.config.cnn, mode)?;
        encoder::encode_rows(tape, &grid, bound)
    }

    /// Teacher-forced logits `[N, T, V]`; `inputs` is the row-major `[N, T]`
    /// matrix of previous tokens.
    pub fn teacher_forced<'t>(
        &mut self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        images: Var<'t, T>,
        source_widths: &[usize],
        inputs: &[usize],
        steps: usize,
        train: Option<u64>,
    ) -> Result<Var<'t, T>> {
        let ann = self.encode(tape, bound, images, source_widths, train)?;
        let decoder = Decoder::bind(bound, &self.config.decoder)?;
        decoder.unroll(tape, inputs, steps, &ann)
    }

    /// Greedy transcription of one line in inference mode.
    pub fn transcribe(&self, line: &ImageLine, max_len: usize) -> Result<Decoded> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let images = tape.constant(image_batch(std::slice::from_ref(line), line.width())?);
        let grid = extract_features(
            &tape,
            images,
            &[line.source_width],
            &bound,
            &self.config.cnn,
            Mode::Infer { stats: &self.bn },
        )?;
        let ann = encoder::encode_rows(&tape, &grid, &bound)?;
        let decoder = Decoder::bind(&bound, &self.config.decoder)?;
        let mut out = greedy_decode(&tape, &decoder, &ann, max_len)?;
        Ok(out.remove(0))
    }

    /// Greedy transcription rendered as text.
    pub fn transcribe_text(&self, line: &ImageLine, max_len: usize) -> Result<(String, Decoded)> {
        let decoded = self.transcribe(line, max_len)?;
        Ok((Vocabulary.decode(&decoded.tokens), decoded))
    }
}

/// Stacks lines into `[N, 1, H, width]`, padding each with background.
pub fn image_batch<T: Scalar>(lines: &[ImageLine], width: usize) -> Result<Tensor<T>> {
    let first = lines.first().ok_or_else(|| shape_err("image_batch", "empty batch"))?;
    let height = first.pixels.height;
    for l in lines {
        if l.pixels.height != height || l.width() > width {
            return Err(shape_err(
                "image_batch",
                format!("line {}×{} does not fit {height}×{width}", l.pixels.height, l.width()),
            ));
        }
    }
    let per = height * width;
    Ok(Tensor::from_fn(vec![lines.len(), 1, height, width], |i| {
        let (b, y, x) = (i / per, (i % per) / width, i % width);
        let img = &lines[b].pixels;
        T::lit(if x < img.width { img.get(x, y) as f64 } else { 1.0 })
    }))
}
