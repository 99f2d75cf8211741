//! Line images, transcriptions and their preparation.

pub mod image;
pub mod synth;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

pub use image::{preprocess_image, GrayImage, ImageLine, Preprocessed, RawImage, LINE_HEIGHT};
pub use synth::{synth_generate, RenderParams, SynthConfig};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};

/// A transcribed line image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image: ImageLine,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

/// Samples of each split, sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "validation" => Ok(&self.validation),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|validation|test)"))),
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<Sample> {
        match name {
            "train" => &mut self.train,
            "validation" => &mut self.validation,
            _ => &mut self.test,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// On-disk corpus layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPaths {
    /// Directory of `<id>.pgm` files.
    pub image_dir: PathBuf,
    /// `id<TAB>text` lines.
    pub transcripts: PathBuf,
    /// One id per line, for train, validation and test.
    pub split_lists: [PathBuf; 3],
}

impl CorpusPaths {
    /// `images/`, `transcripts.tsv` and `{train,validation,test}.txt` under
    /// `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            image_dir: dir.join("images"),
            transcripts: dir.join("transcripts.tsv"),
            split_lists: SPLITS.map(|s| dir.join(format!("{s}.txt"))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Parses `id<TAB>text` lines into an id-sorted map.
pub fn parse_transcripts(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, t) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format { what: "transcripts", detail: format!("line {}: missing tab", n + 1) })?;
        if out.insert(id.to_string(), t.to_string()).is_some() {
            return Err(Error::Data(format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

/// Loads and preprocesses every listed sample.
pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus> {
    let transcripts = parse_transcripts(&read_text(&paths.transcripts)?)?;
    let missing: Vec<&str> = transcripts
        .keys()
        .filter(|id| !paths.image_dir.join(format!("{id}.pgm")).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing images for ids: {}", missing.join(", "))));
    }
    let mut corpus = Corpus::default();
    let mut seen = BTreeSet::new();
    for (name, list) in SPLITS.iter().zip(&paths.split_lists) {
        let ids: BTreeSet<String> = read_text(list)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        for id in ids {
            let text = transcripts
                .get(&id)
                .ok_or_else(|| Error::Data(format!("{name} split lists unknown id `{id}`")))?;
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("id `{id}` appears in more than one split")));
            }
            let raw = RawImage::load_pgm(&paths.image_dir.join(format!("{id}.pgm")))?;
            let pre = preprocess_image(&raw)?;
            if pre.blank {
                log::warn!("sample `{id}` has a blank image");
            }
            corpus.split_mut(name).push(Sample { id, text: text.clone(), image: pre.line });
        }
    }
    log::info!("loaded corpus: {:?} train/validation/test", corpus.counts());
    Ok(corpus)
}

/// Writes `corpus` in the [`CorpusPaths::in_dir`] layout.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<CorpusPaths> {
    let paths = CorpusPaths::in_dir(dir);
    fs::create_dir_all(&paths.image_dir)?;
    let mut all: Vec<&Sample> = Vec::new();
    for (name, list) in SPLITS.iter().zip(&paths.split_lists) {
        let samples = corpus.split(name)?;
        let ids: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
        fs::write(list, ids)?;
        all.extend(samples);
    }
    all.sort_by(|a, b| a.id.cmp(&b.id));
    let mut lines = String::new();
    for s in all {
        if s.text.contains(['\t', '\n']) {
            return Err(Error::Data(format!("transcript of `{}` contains a tab or newline", s.id)));
        }
        lines.push_str(&format!("{}\t{}\n", s.id, s.text));
        s.image.pixels.save_pgm(&paths.image_dir.join(format!("{}.pgm", s.id)))?;
    }
    fs::write(&paths.transcripts, lines)?;
    Ok(paths)
}
