use accent_core::data::{split_manifest, AccentTag};
use accent_core::features::{Lexicon, PhoneInventory, SourceKind};
use accent_core::preprocess::{load_example, load_examples, preprocess, PreprocessSettings};
use accent_core::toy::{self, ToySpec};
use accent_core::Error;

fn settings(cache: &std::path::Path) -> PreprocessSettings {
    PreprocessSettings {
        mel: toy::mel_config(),
        pretrained_dim: ToySpec::default().pretrained_dim,
        cache_dir: cache.to_path_buf(),
        workers: 4,
    }
}

#[test]
fn toy_corpus_preprocesses_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec::default();
    let corpus = toy::generate(&dir.path().join("corpus"), &spec).unwrap();
    let lexicon = Lexicon::load(&corpus.lexicon, &PhoneInventory::default()).unwrap();
    let s = settings(&dir.path().join("cache"));

    let first = preprocess(&corpus.sources(), &lexicon, &s).unwrap();
    assert_eq!(first.records.len(), 64);
    assert_eq!(first.computed.len(), 64);
    assert_eq!(first.speakers, vec!["acc_a", "acc_b", "nat_a", "nat_b"]);
    let native = first.records.iter().filter(|r| r.accent_tag == AccentTag::Native).count();
    assert_eq!(native, 32);

    let again = preprocess(&corpus.sources(), &lexicon, &s).unwrap();
    assert!(again.computed.is_empty(), "{:?}", again.computed);
    assert_eq!(again.reused, 64);
    assert_eq!(again.records, first.records);

    // a damaged artifact is detected by its content hash
    let victim = first.records[5].clone();
    std::fs::write(victim.mel_path.as_ref().unwrap(), b"garbage").unwrap();
    let repaired = preprocess(&corpus.sources(), &lexicon, &s).unwrap();
    assert_eq!(repaired.computed, vec![victim.utt_id.clone()]);
    load_example(&repaired.records[5], SourceKind::Mel).unwrap();

    for r in &first.records {
        for kind in [SourceKind::Mel, SourceKind::Pretrained] {
            let ex = load_example(r, kind).unwrap();
            let t = ex.mel.nrows();
            assert_eq!(ex.durations.iter().map(|&d| d as usize).sum::<usize>(), t, "{}", r.utt_id);
            assert_eq!(ex.durations.len(), ex.phone_ids.len());
            assert_eq!(ex.features.nrows(), t);
            assert_eq!(ex.pitch.len(), t);
            let width = if kind == SourceKind::Mel { 20 } else { spec.pretrained_dim };
            assert_eq!(ex.features.ncols(), width);
        }
    }

    // voiced frames of a 110 Hz speaker track near its declining f0
    let ex = load_example(first.records.iter().find(|r| r.speaker == "nat_a").unwrap(), SourceKind::Mel).unwrap();
    let mut voiced: Vec<f32> = ex.pitch.iter().copied().filter(|&p| p > 0.0).collect();
    assert!(voiced.len() * 2 > ex.pitch.len(), "{:?}", ex.pitch);
    voiced.sort_by(f32::total_cmp);
    let med = voiced[voiced.len() / 2];
    assert!((95.0..125.0).contains(&med), "median f0 {med}");
    let max_energy = ex.energy.iter().fold(0f32, |m, &e| m.max(e));
    assert!(max_energy > 1.0 && max_energy < toy::model_config(&spec).energy_max, "{max_energy}");

    let native_records: Vec<_> = first.records.iter().filter(|r| r.accent_tag == AccentTag::Native).cloned().collect();
    let split = split_manifest(&native_records, toy::split_sizes(&spec), 3).unwrap();
    assert_eq!(split.train.len(), 24);
    assert_eq!(load_examples(&split.val, SourceKind::Mel).unwrap().len(), 4);
}

#[test]
fn identical_spec_regenerates_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        native_speakers: 1,
        accented_speakers: 1,
        utterances_per_speaker: 2,
        ..ToySpec::default()
    };
    let a = toy::generate(&dir.path().join("a"), &spec).unwrap();
    let b = toy::generate(&dir.path().join("b"), &spec).unwrap();
    for sub in ["nat_a/utt001.wav", "nat_a/utt002.feat.acft"] {
        assert_eq!(std::fs::read(a.native.join(sub)).unwrap(), std::fs::read(b.native.join(sub)).unwrap());
    }
    assert_eq!(
        std::fs::read(a.accented.join("acc_a/utt002.wav")).unwrap(),
        std::fs::read(b.accented.join("acc_a/utt002.wav")).unwrap()
    );
}

#[test]
fn missing_lexicon_words_abort_with_the_list() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        native_speakers: 1,
        accented_speakers: 1,
        utterances_per_speaker: 3,
        ..ToySpec::default()
    };
    let corpus = toy::generate(&dir.path().join("corpus"), &spec).unwrap();
    std::fs::write(corpus.native.join("nat_a/utt002.txt"), "the zebra sees the quokka\n").unwrap();
    let lexicon = Lexicon::load(&corpus.lexicon, &PhoneInventory::default()).unwrap();
    let cache = dir.path().join("cache");
    match preprocess(&corpus.sources(), &lexicon, &settings(&cache)) {
        Err(Error::OutOfVocabularyWords(w)) => assert_eq!(w, vec!["zebra", "quokka"]),
        other => panic!("expected OOV error, got {other:?}"),
    }
    assert!(!cache.join("manifest.jsonl").exists());
}

#[test]
fn wrong_pretrained_width_names_the_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        native_speakers: 1,
        accented_speakers: 0,
        utterances_per_speaker: 1,
        ..ToySpec::default()
    };
    let corpus = toy::generate(&dir.path().join("corpus"), &spec).unwrap();
    std::fs::create_dir_all(&corpus.accented).unwrap();
    let lexicon = Lexicon::load(&corpus.lexicon, &PhoneInventory::default()).unwrap();
    let mut s = settings(&dir.path().join("cache"));
    s.pretrained_dim = 7;
    match preprocess(&corpus.sources(), &lexicon, &s) {
        Err(Error::Utterance { utt, source }) => {
            assert_eq!(utt, "nat_a/utt001");
            assert!(matches!(*source, Error::FeatureDimMismatch { expected: 7, got: 16 }));
        }
        other => panic!("expected utterance error, got {other:?}"),
    }
}
