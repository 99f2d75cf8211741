use scrawl::config::{Preset, RunConfig};
use scrawl::corpus::{load_corpus, synth_generate, write_corpus, Corpus, Sample, SynthConfig, LINE_HEIGHT};
use scrawl::trainer::{self, checkpoint_path, Trainer, BEST_CHECKPOINT};
use tempfile::TempDir;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::for_preset(Preset::Desk);
    cfg.model.cnn.channels = [2, 4, 4, 4, 4, 8, 8];
    cfg.model.encoder_hidden = 4;
    cfg.model.decoder.hidden = 8;
    cfg.model.decoder.embedding = 6;
    cfg.train.seed = 2;
    cfg.train.epochs = 2;
    cfg.train.max_len = 10;
    cfg
}

fn ids_and_texts(samples: &[Sample]) -> Vec<(String, String)> {
    samples.iter().map(|s| (s.id.clone(), s.text.clone())).collect()
}

#[test]
fn synthetic_corpus_trains_and_reloads_from_disk() {
    let tmp = TempDir::new().unwrap();
    let mut samples = synth_generate(&SynthConfig { min_len: 2, max_len: 5, ..SynthConfig::small(3, 9) }).unwrap();
    let test = samples.split_off(7);
    let validation = samples.split_off(5);
    let written = Corpus { train: samples, validation, test };
    let paths = write_corpus(&tmp.path().join("corpus"), &written).unwrap();

    let corpus = load_corpus(&paths).unwrap();
    assert_eq!(corpus.counts(), (5, 2, 2));
    for split in ["train", "validation", "test"] {
        let (a, b) = (written.split(split).unwrap(), corpus.split(split).unwrap());
        assert_eq!(ids_and_texts(a), ids_and_texts(b), "{split}");
        assert!(b.iter().all(|s| s.image.pixels.height == LINE_HEIGHT));
    }

    let out = tmp.path().join("run");
    let mut t = Trainer::new(small_config()).unwrap();
    let mut seen = Vec::new();
    let report = trainer::train(&mut t, &corpus.train, &corpus.validation, Some(&out), 1, |m| {
        seen.push(m.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [1, 2]);
    assert_eq!(t.epoch, 2);
    for e in 0..=2 {
        assert!(checkpoint_path(&out, e).is_file(), "epoch {e}");
    }

    // The best checkpoint reproduces its recorded validation error.
    let best = report.best.unwrap();
    let restored = Trainer::load(&out.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(restored.epoch, best.epoch);
    assert_eq!(restored.evaluate(&corpus.validation, 2).unwrap().report.cer, best.val_cer);

    // The final checkpoint equals the in-memory state.
    assert_eq!(Trainer::load(&checkpoint_path(&out, 2)).unwrap(), t);
}
