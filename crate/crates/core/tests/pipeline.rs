use patchfield::attack::{craft_patches, AttackConfig, LossKind};
use patchfield::detector::{Detector, DetectorConfig, TrainOptions};
use patchfield::eval::{attack_success_rate, PatchSource};
use patchfield::io;
use patchfield::scenegen::{generate_corpus, CorpusSpec, SceneSpec, Split};

fn corpus(frames: usize, split: Split) -> Vec<patchfield::frame::Frame> {
    let spec = CorpusSpec {
        frames,
        ..CorpusSpec::default()
    };
    generate_corpus(&SceneSpec::default(), &spec, split, 1).unwrap()
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let train = corpus(48, Split::Train);
    let holdout = corpus(8, Split::Test);
    let opts = TrainOptions {
        epochs: 3,
        required_rate: 0.0,
        ..TrainOptions::default()
    };
    let run = || {
        let mut d = Detector::random(DetectorConfig::default(), 3).unwrap();
        let report = d.train(&train, &holdout, &opts).unwrap();
        (d, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(io::encode_detector(&a), io::encode_detector(&b));
    assert!(ra.epoch_losses[2] < ra.epoch_losses[0], "{:?}", ra.epoch_losses);

    let strict = TrainOptions {
        required_rate: 1.01,
        ..opts
    };
    let mut c = Detector::random(DetectorConfig::default(), 3).unwrap();
    assert!(c.train(&train, &holdout, &strict).is_err());
}

#[test]
fn crafting_on_thirty_frames_halves_the_objective() {
    let train = corpus(400, Split::Train);
    let holdout = corpus(100, Split::Test);
    let mut det = Detector::random(DetectorConfig::default(), 1).unwrap();
    let opts = TrainOptions {
        epochs: 8,
        required_rate: 0.9,
        ..TrainOptions::default()
    };
    det.train(&train, &holdout, &opts).unwrap();

    let scene = SceneSpec {
        frames_per_degree: 1.0 / 3.0,
        ..SceneSpec::default()
    };
    let frames = scene.generate_dataset(Split::Train, 1).unwrap();
    assert_eq!(frames.len(), 30);
    let cfg = AttackConfig {
        loss_kind: LossKind::ObjCls,
        learning_rate: 0.05,
        ..AttackConfig::default()
    };
    let result = craft_patches(&frames, 2, &cfg, &det).unwrap();
    let log = &result.log;
    eprintln!("objective {} -> {}", log.initial_objective, log.final_objective);
    assert!(
        log.final_objective <= 0.5 * log.initial_objective,
        "objective {} -> {}",
        log.initial_objective,
        log.final_objective
    );
    assert_eq!(log.epochs.len(), cfg.epochs);
    let clean = attack_success_rate(&frames, &PatchSource::None, &det, 0).unwrap();
    let patched = attack_success_rate(&frames, &PatchSource::Static(&result.patches), &det, 0).unwrap();
    assert!(patched.success_rate > clean.success_rate);

    let again = craft_patches(&frames, 2, &cfg, &det).unwrap();
    assert_eq!(again.patches, result.patches);
}
