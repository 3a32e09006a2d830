use std::collections::BTreeMap;

use prosody_core::data::{gen_corpus, load_jsonl, save_jsonl, SyntheticSpec, UtteranceRecord};
use prosody_core::encoder::EncoderConfig;
use prosody_core::eval::{build_report, HistogramSpec};
use prosody_core::flow::FlowConfig;
use prosody_core::model::{Dataset, Model, ModelConfig, ModelKind, Normalizer, Task};
use prosody_core::train::TrainConfig;
use prosody_core::Error;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        n_phonemes: 4,
        n_styles: 2,
        n_speakers: 2,
        n_train: 120,
        n_dev: 10,
        n_test: 30,
        ..Default::default()
    }
}

fn config(kind: ModelKind, spec: &SyntheticSpec) -> ModelConfig {
    ModelConfig {
        task: Task::Prosody,
        kind,
        encoder: EncoderConfig {
            hidden: 16,
            depth: 1,
            out_dim: 16,
            ..EncoderConfig::new(spec.n_phonemes, spec.n_styles)
        },
        regression: Default::default(),
        flow: FlowConfig {
            n_steps: 2,
            hidden: 16,
            depth: 1,
            s_max: 3.0,
        },
        diffusion: Default::default(),
        frame_seed: 0,
        dequantize: true,
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        steps: 60,
        batch_size: 16,
        lr: 3e-3,
        ..Default::default()
    }
}

#[test]
fn corpus_to_report_through_disk() {
    let spec = spec();
    let corpus = gen_corpus(&spec, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    save_jsonl(&corpus.train, &path).unwrap();
    let train: Vec<UtteranceRecord> = load_jsonl(&path).unwrap();
    assert_eq!(train, corpus.train);

    let data = Dataset::new(train, Task::Prosody, 0).unwrap();
    let norm = Normalizer::fit(&data.targets).unwrap();
    let mut generated = BTreeMap::new();
    for kind in [ModelKind::L2, ModelKind::Flow, ModelKind::Diff] {
        let mut model = Model::new(config(kind, &spec), norm.clone(), 3).unwrap();
        let (log, adam) = model.train(&data, &train_cfg(), 3).unwrap();
        assert_eq!(log.len(), 60);
        let ckpt = dir.path().join(kind.name());
        model.save(&ckpt, Some(&adam)).unwrap();
        let loaded = Model::load(&ckpt).unwrap();
        let a = model
            .sample_records(&corpus.test, kind.default_tau(), 0, 9, false)
            .unwrap();
        let b = loaded
            .sample_records(&corpus.test, kind.default_tau(), 0, 9, false)
            .unwrap();
        assert_eq!(a, b, "{} changed after a checkpoint roundtrip", kind.name());
        for (g, o) in a.iter().zip(&corpus.test) {
            assert_eq!(g.utt_id, o.utt_id);
            assert_eq!(g.phonemes, o.phonemes);
            assert!(g.duration.iter().all(|&d| d >= 1));
        }
        generated.insert(kind.name().to_string(), a);
    }

    let report = build_report(&corpus.test, &generated, &HistogramSpec::default()).unwrap();
    assert_eq!(report.models.len(), 3);
    for stats in report.models.values() {
        let (jf, jd) = (stats.jsd_logf0.unwrap(), stats.jsd_dur.unwrap());
        assert!((0.0..=std::f64::consts::LN_2).contains(&jf));
        assert!((0.0..=std::f64::consts::LN_2).contains(&jd));
    }
    assert_eq!(report.table().lines().count(), 5);
}

#[test]
fn report_rejects_generated_sets_that_do_not_cover_the_oracle() {
    let corpus = gen_corpus(&spec(), 4).unwrap();
    let mut short = corpus.test.clone();
    short.pop();
    let generated = BTreeMap::from([("m".to_string(), short)]);
    let err = build_report(&corpus.test, &generated, &HistogramSpec::default()).unwrap_err();
    assert!(matches!(err, Error::Mismatch { .. }), "{err}");
}

#[test]
fn frame_models_emit_one_row_per_frame() {
    let spec = spec();
    let corpus = gen_corpus(&spec, 5).unwrap();
    let data = Dataset::new(corpus.train.clone(), Task::Frames, 5).unwrap();
    let norm = Normalizer::fit(&data.targets).unwrap();
    let mut cfg = config(ModelKind::Diff, &spec);
    cfg.task = Task::Frames;
    cfg.encoder.style_vocab = spec.n_speakers;
    cfg.frame_seed = 5;
    let model = Model::new(cfg, norm, 5).unwrap();
    let out = model.generate(&corpus.test, 0.5, 0, 1, true).unwrap();
    for (o, r) in out.iter().zip(&corpus.test) {
        assert_eq!(o.shape(), &[r.total_frames(), 8]);
        assert!(o.all_finite());
    }
    assert!(model.sample_records(&corpus.test, 0.5, 0, 1, false).is_err());
}
