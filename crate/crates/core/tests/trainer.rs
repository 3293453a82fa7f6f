use std::fs;
use std::path::Path;

use clickseg::checkpoint::{decode_checkpoint, load_checkpoint, load_model, save_checkpoint, Checkpoint, FORMAT_VERSION};
use clickseg::data::{synth_generate, Normalization, Sample, SynthConfig};
use clickseg::head::PromptMaps;
use clickseg::numeric::{Adam, Tape, Tensor};
use clickseg::trainer::{train_step, CurveRecord, TrainConfig, Trainer};
use clickseg::{Click, Mask, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(count: usize) -> Vec<Sample> {
    let raws = synth_generate(&SynthConfig { seed: 4, count, ..Default::default() });
    let norm = Normalization::from_images(raws.iter().map(|r| &r.rgb));
    raws.iter().map(|r| r.to_sample(&norm)).collect()
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig {
        epochs: 2,
        epoch_size: Some(4),
        lr_decay_epochs: vec![],
        batch_size: 2,
        crop: 112,
        max_initial_clicks: 6,
        iterative_rounds: 1,
        freeze_backbone: true,
        seed: 17,
        ..TrainConfig::default()
    };
    c.adam.lr = 1e-3;
    c
}

fn snapshot(model: &Model<f32>, ids: &[clickseg::numeric::ParamId]) -> Vec<Tensor<f32>> {
    ids.iter().map(|&id| model.store.value(id).clone()).collect()
}

#[test]
fn frozen_backbone_is_untouched_and_head_moves() {
    let data = dataset(4);
    let mut trainer = Trainer::new(Model::<f32>::new(ModelConfig::toy()).unwrap(), small_config()).unwrap();
    let bb = trainer.model.backbone_params();
    let head = trainer.model.head_params();
    let (bb0, head0) = (snapshot(&trainer.model, &bb), snapshot(&trainer.model, &head));
    trainer.run_epoch(&data, &mut |_| {}).unwrap();
    assert_eq!(snapshot(&trainer.model, &bb), bb0);
    assert_ne!(snapshot(&trainer.model, &head), head0);
    assert!(trainer.adam.states().keys().all(|id| !bb.contains(id)));
    assert!(!trainer.adam.states().is_empty());
}

#[test]
fn unfrozen_backbone_trains() {
    let data = dataset(4);
    let config = TrainConfig { freeze_backbone: false, ..small_config() };
    let mut trainer = Trainer::new(Model::<f32>::new(ModelConfig::toy()).unwrap(), config).unwrap();
    let bb = trainer.model.backbone_params();
    let bb0 = snapshot(&trainer.model, &bb);
    trainer.run_epoch(&data, &mut |_| {}).unwrap();
    let after = snapshot(&trainer.model, &bb);
    assert!(after.iter().zip(&bb0).all(|(a, b)| a != b));
}

#[test]
fn head_runs_once_per_round() {
    let data = dataset(3);
    for rounds in [0, 3] {
        let mut model = Model::<f32>::new(ModelConfig::toy()).unwrap();
        let config = TrainConfig { iterative_rounds: rounds, ..small_config() };
        model.set_frozen(true);
        let mut adam = Adam::new(config.adam);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = train_step(&mut model, &mut adam, &data, &config, &mut rng).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(model.backbone_invocations(), 3);
        assert_eq!(model.head_invocations(), 3 * (rounds as u64 + 1));
    }
    let mut model = Model::<f32>::new(ModelConfig::toy()).unwrap();
    let mut adam = Adam::new(small_config().adam);
    assert!(train_step(&mut model, &mut adam, &[], &small_config(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn gradients_reach_only_parameters() {
    let model = Model::<f64>::new(ModelConfig::toy()).unwrap();
    let mut model = model;
    model.set_frozen(true);
    let data = dataset(1);
    let mut tape = Tape::new();
    let image = tape.constant(data[0].image.tensor().cast());
    let inputs = model.encode_on(&mut tape, image).unwrap();
    let prev = Mask::from_fn(112, 112, |i, _| i < 50);
    let maps = PromptMaps::from_clicks(&[Click::positive(60, 60)], &prev, 5).unwrap();
    let logits = model.head.forward_on(&mut tape, &model.store, &inputs, &maps).unwrap();
    let target = data[0].mask.to_tensor::<f64>().reshape(vec![112, 112, 1]).unwrap();
    let loss = tape.focal_loss(logits, &target, 2.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    // the image side is frozen, so nothing upstream of the head needs a gradient
    assert!(!tape.requires_grad(image));
    assert!(inputs.taps.iter().all(|&t| !tape.requires_grad(t)));
    assert!(grads.get(image).is_none());
    let touched = grads.touched_params();
    let head = model.head_params();
    assert!(touched.iter().all(|id| head.contains(id)));
    assert_eq!(touched.len(), head.len());
}

fn losses(trainer: &mut Trainer<f32>, data: &[Sample]) -> Vec<f64> {
    let mut out = Vec::new();
    trainer.run_epoch(data, &mut |r: &CurveRecord| out.push(r.loss)).unwrap();
    out
}

#[test]
fn training_is_deterministic() {
    let data = dataset(4);
    let run = || {
        let mut t = Trainer::new(Model::<f32>::new(ModelConfig::toy()).unwrap(), small_config()).unwrap();
        losses(&mut t, &data)
    };
    let a = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, run());
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    let mu = 5e-5;
    assert_eq!(c.adam.lr, mu);
    assert_eq!(c.lr_at(1), mu);
    assert_eq!(c.lr_at(50), mu);
    assert!((c.lr_at(51) - mu / 10.0).abs() < 1e-20);
    assert!((c.lr_at(55) - mu / 10.0).abs() < 1e-20);
    assert!((c.lr_at(56) - mu / 100.0).abs() < 1e-20);
    assert_eq!((c.epochs, c.max_initial_clicks, c.iterative_rounds, c.crop), (55, 24, 3, 448));
    assert_eq!(c.epoch_size, Some(30_000));
    assert!(TrainConfig { lr_decay_epochs: vec![60], ..c.clone() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
}

#[test]
fn resume_continues_the_same_loss_sequence() {
    let data = dataset(6);
    let mut full = Trainer::new(Model::<f32>::new(ModelConfig::toy()).unwrap(), small_config()).unwrap();
    let mut uninterrupted = Vec::new();
    full.run(&data, None, &mut |r| uninterrupted.push(r.loss)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { epochs: 1, ..small_config() };
    let mut first = Trainer::new(Model::<f32>::new(ModelConfig::toy()).unwrap(), config).unwrap();
    let mut resumed_losses = Vec::new();
    let ckpt = first.run(&data, Some(dir.path()), &mut |r| resumed_losses.push(r.loss)).unwrap().unwrap();
    assert!(ckpt.ends_with("epoch-001.ckpt"));
    let curve = fs::read_to_string(dir.path().join("curve.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 2);

    let mut resumed = Trainer::resume(load_checkpoint(&ckpt).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.config.epochs = 2;
    resumed.run(&data, None, &mut |r| resumed_losses.push(r.loss)).unwrap();
    assert_eq!(resumed_losses, uninterrupted);
    assert_eq!(resumed.model.store.iter().map(|(_, p)| p.value().clone()).collect::<Vec<_>>(),
               full.model.store.iter().map(|(_, p)| p.value().clone()).collect::<Vec<_>>());
}

#[test]
fn old_checkpoints_are_pruned() {
    let data = dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { epochs: 3, epoch_size: Some(2), keep_checkpoints: 2, ..small_config() };
    let mut t = Trainer::new(Model::<f32>::new(ModelConfig::toy()).unwrap(), config).unwrap();
    t.run(&data, Some(dir.path()), &mut |_| {}).unwrap();
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["curve.jsonl", "epoch-002.ckpt", "epoch-003.ckpt"]);
}

fn predict_logits<T: clickseg::Scalar>(model: &Model<T>, data: &Sample) -> Tensor<T> {
    let features = model.encode(&data.image.cast()).unwrap();
    let clicks = [Click::positive(40, 40), Click::negative(100, 3)];
    model.predict(&features, &clicks, &Mask::zeros(112, 112)).unwrap().logits
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let data = dataset(1);
    let dir = tempfile::tempdir().unwrap();
    let mut config = ModelConfig::toy();
    config.init_seed = 21;
    let m32 = Model::<f32>::new(config.clone()).unwrap();
    let path = dir.path().join("m32.ckpt");
    save_checkpoint(&path, &m32, None).unwrap();
    let back = load_model::<f32>(&path).unwrap();
    assert_eq!(back.config, m32.config);
    assert_eq!(predict_logits(&back, &data[0]), predict_logits(&m32, &data[0]));
    assert!(!dir.path().join("m32.ckpt.partial").exists());

    let m64 = Model::<f64>::new(config).unwrap();
    let path = dir.path().join("m64.ckpt");
    save_checkpoint(&path, &m64, None).unwrap();
    assert_eq!(predict_logits(&load_model::<f64>(&path).unwrap(), &data[0]), predict_logits(&m64, &data[0]));
}

fn write_header(bytes: &mut [u8], version: u32) {
    bytes[8..12].copy_from_slice(&version.to_le_bytes());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Model::<f32>::new(ModelConfig::toy()).unwrap(), None).unwrap();
    let bytes = fs::read(&path).unwrap();
    for cut in [0, 5, 19, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint::<f32>(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut wrong = bytes.clone();
    write_header(&mut wrong, FORMAT_VERSION + 1);
    let err = decode_checkpoint::<f32>(&wrong).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(decode_checkpoint::<f32>(&magic).is_err());
    assert!(load_checkpoint::<f32>(Path::new("/nonexistent/m.ckpt")).is_err());
}

#[test]
fn toy_weights_do_not_fit_the_paper_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    save_checkpoint(&path, &Model::<f32>::new(ModelConfig::toy()).unwrap(), None).unwrap();
    let ckpt: Checkpoint<f32> = load_checkpoint(&path).unwrap();
    let mut big = Model::<f32>::new(ModelConfig::paper_shaped()).unwrap();
    let err = ckpt.load_weights_into(&mut big).unwrap_err().to_string();
    assert!(err.contains("shape mismatch for tensor `backbone.patch_embed.weight`"), "{err}");
}

#[test]
fn unwritable_destination_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let model = Model::<f32>::new(ModelConfig::toy()).unwrap();
    assert!(save_checkpoint(&blocker.join("m.ckpt"), &model, None).is_err());
    let target = dir.path().join("dir.ckpt");
    fs::create_dir(&target).unwrap();
    fs::write(target.join("keep"), b"x").unwrap();
    assert!(save_checkpoint(&target, &model, None).is_err());
    assert!(!dir.path().join("dir.ckpt.partial").exists());
}
