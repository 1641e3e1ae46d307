use std::path::Path;

use endoqa_core::data::{AnswerType, DatasetKind};
use endoqa_core::harness::{
    cmd_ask, cmd_datagen, cmd_eval, cmd_tokenizer_train, cmd_train, load_model, prepare_samples, AskAnswer,
    Checkpoint, DatagenArgs, DatasetDir, Profile, RunConfig, VqaModel,
};
use endoqa_core::numeric::Parameters;
use endoqa_core::tokenizer::Vocab;

fn make_dataset(dir: &Path, dataset: DatasetKind, sequences: u32, frames: u32) {
    cmd_datagen(&DatagenArgs {
        dataset,
        sequences,
        frames_per_sequence: frames,
        seed: 7,
        image_size: 64,
        test_sequences: Some(1),
        out: dir.to_path_buf(),
    })
    .unwrap();
    cmd_tokenizer_train(dir, &dir.join("vocab.txt"), 1000, 1).unwrap();
}

fn test_config(dir: &Path, dataset: DatasetKind, mode: AnswerType) -> RunConfig {
    let mut c = RunConfig::new(dataset, mode, Profile::Test);
    c.data_dir = dir.to_path_buf();
    c.deterministic = true;
    c
}

#[test]
fn untrained_head_loss_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), DatasetKind::Endovis, 2, 2);
    let cfg = test_config(dir.path(), DatasetKind::Endovis, AnswerType::Classification);
    let vocab = Vocab::load(&dir.path().join("vocab.txt")).unwrap();
    let model = VqaModel::new(cfg, vocab).unwrap();
    if let endoqa_core::harness::AnswerHead::Classifier(h) = &model.head {
        endoqa_core::numeric::zero_all(h);
    }
    let data = DatasetDir::open(dir.path()).unwrap();
    let samples = prepare_samples(&model, &data, &data.split.train, 5).unwrap();
    let loss = model.classification_loss(&samples[0].input, samples[0].label, None).unwrap().item();
    assert!((loss - 26f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn train_eval_ask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), DatasetKind::Cholec, 3, 4);
    let mut cfg = test_config(dir.path(), DatasetKind::Cholec, AnswerType::Classification);
    cfg.epochs = 1;
    let out = dir.path().join("run");
    let summary = cmd_train(&cfg, &out).unwrap();
    assert_eq!(summary.records.len(), 1);
    let log = std::fs::read_to_string(&summary.log).unwrap();
    assert!(log.starts_with("epoch,loss,accuracy,recall,precision,fscore,wall_seconds"));

    let ckpt = Checkpoint::load(&summary.checkpoint).unwrap();
    let model = load_model(&summary.checkpoint, &[]).unwrap();
    assert_eq!(ckpt.tensors.len(), model.named_parameters().len());

    let report = cmd_eval(&summary.checkpoint, &[], &dir.path().join("eval")).unwrap();
    assert!(report.classification.is_some());
    assert!(dir.path().join("eval/report.csv").exists());

    let err = load_model(&summary.checkpoint, &[("variant".into(), "baseline".into())]).unwrap_err();
    assert!(err.to_string().contains("variant"), "{err}");

    let image = dir.path().join("images/seq_01/frame_0000.imgf");
    let a = cmd_ask(&model, &[image.clone()], "what is the surgical phase of the image?").unwrap();
    let b = cmd_ask(&model, &[image], "what is the surgical phase of the image?").unwrap();
    assert_eq!(a, b);
    let AskAnswer::Labels(top) = a else { panic!() };
    assert_eq!(top.len(), 3);
    let full: f64 = model
        .rank_labels(&endoqa_core::harness::PreparedInput {
            text: model.encode_question("how many tools are used?").unwrap(),
            visual: model.visual_tokens(&[endoqa_core::vision::Image::load(&dir.path().join("images/seq_01/frame_0001.imgf")).unwrap()]).unwrap(),
        })
        .unwrap()
        .iter()
        .map(|(_, p)| p)
        .sum();
    assert!((full - 1.0).abs() < 1e-6);
}

#[test]
fn temporal_clips_clamp_at_sequence_start() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), DatasetKind::Cholec, 2, 4);
    let data = DatasetDir::open(dir.path()).unwrap();
    assert_eq!(data.clip_frames(1, 0).unwrap(), vec![0, 0, 0]);
    assert_eq!(data.clip_frames(1, 1).unwrap(), vec![0, 0, 1]);
    assert_eq!(data.clip_frames(1, 3).unwrap(), vec![1, 2, 3]);

    let mut cfg = test_config(dir.path(), DatasetKind::Cholec, AnswerType::Sentence);
    cfg.temporal = true;
    let vocab = Vocab::load(&dir.path().join("vocab.txt")).unwrap();
    let model = VqaModel::new(cfg, vocab).unwrap();
    let samples = prepare_samples(&model, &data, &data.split.train, 0).unwrap();
    assert_eq!(samples.len(), 8);
    assert_eq!(samples[0].input.visual.len(), 4);
    let answer = model.answer_sentence(&samples[0].input).unwrap();
    assert_eq!(answer, model.answer_sentence(&samples[0].input).unwrap());
}
