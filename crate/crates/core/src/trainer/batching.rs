//! Size-class bucketing and padded batch assembly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::image_batch;
use crate::numerics::{Scalar, Tensor};

/// Admissible padded image widths and target lengths, each ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketClasses {
    pub widths: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Default for BucketClasses {
    fn default() -> Self {
        Self {
            widths: vec![160, 320, 480, 640, 800, 960],
            lengths: vec![16, 32, 48, 64, 96, 128],
        }
    }
}

impl BucketClasses {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("width", &self.widths), ("length", &self.lengths)] {
            if v.is_empty() || v.contains(&0) || v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{what} classes must be positive and strictly ascending")));
            }
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % 16 != 0) {
            return Err(Error::Config(format!("width class {w} is not a multiple of 16")));
        }
        Ok(())
    }

    /// Smallest `(width, length)` classes holding an image of `width` pixels
    /// and a target of `target_len` tokens (characters plus EOS).
    pub fn classify(&self, width: usize, target_len: usize) -> Option<(usize, usize)> {
        let w = self.widths.iter().copied().find(|&c| c >= width)?;
        let l = self.lengths.iter().copied().find(|&c| c >= target_len)?;
        Some((w, l))
    }
}

/// One scheduled batch: its size classes and member sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub width: usize,
    pub length: usize,
    pub members: Vec<usize>,
}

/// Target tokens of a sample: characters plus EOS.
pub fn target_len(sample: &Sample) -> usize {
    sample.len() + 1
}

/// Assigns every sample to its smallest admissible bucket, cuts each bucket
/// into batches of at most `batch_size` and shuffles membership and batch
/// order with `seed`.
pub fn make_buckets(samples: &[Sample], classes: &BucketClasses, batch_size: usize, seed: u64) -> Result<Vec<BatchPlan>> {
    classes.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = classes.classify(s.image.width(), target_len(s)).ok_or_else(|| {
            Error::Data(format!(
                "sample `{}` (width {}, {} target tokens) exceeds every bucket",
                s.id,
                s.image.width(),
                target_len(s)
            ))
        })?;
        buckets.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    for ((width, length), mut members) in buckets {
        members.shuffle(&mut rng);
        plans.extend(members.chunks(batch_size).map(|c| BatchPlan { width, length, members: c.to_vec() }));
    }
    plans.shuffle(&mut rng);
    Ok(plans)
}

/// Padded tensors for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub ids: Vec<String>,
    /// `[N, 1, 64, width]`, right-padded with background.
    pub images: Tensor<T>,
    pub source_widths: Vec<usize>,
    /// Row-major `[N, length]`: SOS then the characters, PAD after.
    pub inputs: Vec<usize>,
    /// Row-major `[N, length]`: the characters then EOS, PAD after.
    pub labels: Vec<usize>,
    pub length: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Longest label sequence in the batch; later columns are all PAD.
    pub fn steps(&self) -> usize {
        self.labels
            .chunks(self.length)
            .map(|row| row.iter().rposition(|&t| t != Vocabulary::PAD).map_or(0, |p| p + 1))
            .max()
            .unwrap_or(0)
    }

    /// `(inputs, labels)` restricted to the first [`steps`](Self::steps)
    /// columns.
    pub fn trimmed(&self) -> (Vec<usize>, Vec<usize>, usize) {
        let steps = self.steps();
        let cut = |m: &[usize]| m.chunks(self.length).flat_map(|r| r[..steps].to_vec()).collect();
        (cut(&self.inputs), cut(&self.labels), steps)
    }
}

/// Pads the planned samples into one batch.
pub fn assemble<T: Scalar>(plan: &BatchPlan, samples: &[Sample]) -> Result<Batch<T>> {
    let members: Vec<&Sample> = plan
        .members
        .iter()
        .map(|&i| samples.get(i).ok_or_else(|| Error::Data(format!("batch member {i} out of range"))))
        .collect::<Result<_>>()?;
    let lines: Vec<_> = members.iter().map(|s| s.image.clone()).collect();
    let images = image_batch(&lines, plan.width)?;
    let (n, l) = (members.len(), plan.length);
    let mut inputs = vec![Vocabulary::PAD; n * l];
    let mut labels = vec![Vocabulary::PAD; n * l];
    for (b, s) in members.iter().enumerate() {
        let ids = Vocabulary.encode(&s.text);
        if ids.len() + 1 > l {
            return Err(Error::Data(format!("sample `{}` exceeds length class {l}", s.id)));
        }
        inputs[b * l] = Vocabulary::SOS;
        inputs[b * l + 1..b * l + 1 + ids.len()].copy_from_slice(&ids);
        labels[b * l..b * l + ids.len()].copy_from_slice(&ids);
        labels[b * l + ids.len()] = Vocabulary::EOS;
    }
    Ok(Batch {
        ids: members.iter().map(|s| s.id.clone()).collect(),
        images,
        source_widths: members.iter().map(|s| s.image.source_width).collect(),
        inputs,
        labels,
        length: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GrayImage, ImageLine};

    fn sample(id: &str, width: usize, text: &str) -> Sample {
        Sample { id: id.into(), text: text.into(), image: ImageLine::from_content(GrayImage::filled(width, 64, 1.0)) }
    }

    #[test]
    fn smallest_admissible_width_class() {
        let classes = BucketClasses { widths: vec![160, 480], lengths: vec![16] };
        let samples = [sample("a", 100, "x"), sample("b", 480, "y")];
        let plans = make_buckets(&samples, &classes, 4, 0).unwrap();
        let mut widths: Vec<(usize, Vec<usize>)> = plans.iter().map(|p| (p.width, p.members.clone())).collect();
        widths.sort();
        assert_eq!(widths, vec![(160, vec![0]), (480, vec![1])]);
        // Enumeration over every width up to the largest class.
        for w in (16..=480).step_by(16) {
            let (c, _) = classes.classify(w, 1).unwrap();
            assert!(c >= w && classes.widths.iter().all(|&o| o < w || o >= c));
        }
    }

    #[test]
    fn uniform_samples_fill_one_bucket() {
        let samples: Vec<_> = (0..10).map(|i| sample(&format!("s{i}"), 96, "abc")).collect();
        let plans = make_buckets(&samples, &BucketClasses::default(), 4, 1).unwrap();
        assert_eq!(plans.len(), 3);
        assert!(plans.iter().all(|p| p.width == 160 && p.length == 16));
        let mut all: Vec<usize> = plans.iter().flat_map(|p| p.members.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(make_buckets(&samples, &BucketClasses::default(), 4, 1).unwrap(), plans);
    }

    #[test]
    fn oversize_sample_is_named() {
        let samples = [sample("wide-one", 2000, "a")];
        let err = make_buckets(&samples, &BucketClasses::default(), 4, 0).unwrap_err();
        assert!(err.to_string().contains("wide-one"));
        let long = [sample("long-one", 16, &"a".repeat(16))];
        assert!(make_buckets(&long, &BucketClasses { widths: vec![160], lengths: vec![16] }, 4, 0).is_err());
    }

    #[test]
    fn assembly_pads_targets_and_images() {
        let samples = [sample("a", 40, "hi"), sample("b", 100, "hello")];
        let plan = BatchPlan { width: 160, length: 8, members: vec![1, 0] };
        let batch: Batch<f32> = assemble(&plan, &samples).unwrap();
        assert_eq!(batch.ids, ["b", "a"]);
        assert_eq!(batch.images.shape(), &[2, 1, 64, 160]);
        assert_eq!(batch.source_widths, vec![100, 40]);
        let v = Vocabulary;
        let (h, i) = (v.id('h'), v.id('i'));
        assert_eq!(&batch.inputs[8..], &[Vocabulary::SOS, h, i, 0, 0, 0, 0, 0]);
        assert_eq!(&batch.labels[8..], &[h, i, Vocabulary::EOS, 0, 0, 0, 0, 0]);
        assert_eq!(batch.steps(), 6);
        let (inp, lab, steps) = batch.trimmed();
        assert_eq!(steps, 6);
        assert_eq!(inp.len(), 12);
        assert_eq!(&lab[6..], &[h, i, Vocabulary::EOS, 0, 0, 0]);
        assert!(batch.images.data().iter().all(|&p| p == 1.0));
    }
}
