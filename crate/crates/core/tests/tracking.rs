use std::sync::Arc;

use context_tracker::backbone::{BackboneArch, BackboneWeights};
use context_tracker::eval::{load_otb_sequence, ope_run, score_run};
use context_tracker::synth::{generate, preset, write_sequence};
use context_tracker::tracker::{track_sequence, TrackerConfig};

fn toy(seed: u64) -> (TrackerConfig, Arc<BackboneWeights>) {
    (
        TrackerConfig {
            seed,
            ..TrackerConfig::toy()
        },
        Arc::new(BackboneWeights::random(BackboneArch::TOY, seed)),
    )
}

#[test]
fn synthetic_sequence_survives_the_disk_round_trip() {
    let seq = generate(&preset("scale_change").unwrap().reseeded(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(&seq, dir.path()).unwrap();
    let rec = load_otb_sequence(dir.path()).unwrap();
    assert_eq!(rec.gt.len(), seq.gt.len());
    // the 1-based offset on disk costs at most an ulp or two
    for (a, b) in rec.gt.iter().zip(&seq.gt) {
        let d = [a.x - b.x, a.y - b.y, a.w - b.w, a.h - b.h];
        assert!(d.iter().all(|v| v.abs() < 1e-9), "{a:?} vs {b:?}");
    }
    assert_eq!(rec.attributes, seq.attributes);
    for i in [0, 29, 59] {
        assert_eq!(rec.load_frame(i).unwrap(), seq.frames[i]);
    }
}

#[test]
fn one_frame_sequence_scores_perfectly() {
    let seq = generate(&preset("easy_translation").unwrap()).unwrap();
    let (cfg, bb) = toy(0);
    let run = track_sequence([Ok(seq.frames[0].clone())], seq.gt[0], &cfg, bb).unwrap();
    assert_eq!(run.frames.len(), 1);
    assert_eq!(run.boxes()[0], seq.gt[0]);
    let s = score_run(&run.boxes(), &seq.gt[..1]).unwrap();
    assert_eq!(s.dp20, 1.0);
}

#[test]
fn short_runs_repeat_exactly_and_depend_on_the_seed() {
    let seq = generate(&preset("distractor").unwrap()).unwrap();
    let frames = || seq.frames[..6].iter().cloned().map(Ok);
    let (cfg, bb) = toy(1);
    let a = track_sequence(frames(), seq.gt[0], &cfg, bb.clone()).unwrap();
    let b = track_sequence(frames(), seq.gt[0], &cfg, bb.clone()).unwrap();
    assert_eq!(a, b);
    let other = TrackerConfig { seed: 2, ..cfg };
    let c = track_sequence(frames(), seq.gt[0], &other, bb).unwrap();
    assert_ne!(a.boxes(), c.boxes());
}

#[test]
fn tracker_beats_a_static_box_on_a_moving_target() {
    let seq = generate(&preset("easy_translation").unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(&seq, dir.path()).unwrap();
    let rec = load_otb_sequence(dir.path()).unwrap();
    let (cfg, bb) = toy(0);
    let (run, tracked) = ope_run(&cfg, &rec, bb).unwrap();
    assert_eq!(run.frames.len(), rec.gt.len());
    let frozen = vec![rec.gt[0]; rec.gt.len()];
    let still = score_run(&frozen, &rec.gt).unwrap();
    assert!(tracked.dp20 > still.dp20, "{tracked:?} vs {still:?}");
    assert!(tracked.auc > still.auc, "{tracked:?} vs {still:?}");
}
