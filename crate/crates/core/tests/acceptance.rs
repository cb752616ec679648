//! Acceptance suite: one PASS/FAIL/SKIP line per criterion. Runs without the
//! libtest harness so the lines are printed on every run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use context_tracker::adapt::{
    adapt_channels, channel_importance, select_channels, train_conv_da, AdaptConfig, ConvDaWeights,
    DaTrainConfig, ImportanceSource,
};
use context_tracker::backbone::{load_cwb, BackboneArch, BackboneWeights};
use context_tracker::eval::{
    auc, dp_at, load_otb_sequence, ope_run, precision_curve, score_run, success_curve,
};
use context_tracker::gradcheck::grad_check_suite;
use context_tracker::loss::{ce_loss, cs_loss, modulating_factor, CsLossParams, LossKind};
use context_tracker::nn::Tensor;
use context_tracker::sampling::iou;
use context_tracker::synth::{generate, occluded_frames, preset, SceneSpec};
use context_tracker::tracker::{track_sequence, MemoryStore, Schedule, TrackerConfig, UpdateKind};
use context_tracker::BBox;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn judge(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradients),
        ("cost-sensitive loss law", loss_law),
        ("channel importance oracles", channel_importance_oracles),
        ("update state machine trace", state_machine_trace),
        ("end-to-end synthetic tracking", end_to_end),
        ("cs vs ce loss ablation on distractors", loss_ablation),
        ("metric conventions", metrics),
        ("real-asset smoke run", real_assets),
    ];
    // optional substring filters, e.g. `cargo test --test acceptance -- loss`
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            judge(false, format!("panicked: {msg}"))
        });
        let tag = match outcome.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!(
            "{tag} {name}: {} [{:.1}s]",
            outcome.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn gradients() -> Outcome {
    const REQUIRED: [&str; 9] = [
        "conv2d",
        "conv2d_dilation3",
        "lrn",
        "maxpool",
        "softmax2",
        "head",
        "loss_ce",
        "loss_focal",
        "loss_cs",
    ];
    let t0 = Instant::now();
    let results = grad_check_suite(7, 100).expect("gradient suite runs");
    let elapsed = t0.elapsed();
    let missing: Vec<&str> = REQUIRED
        .iter()
        .filter(|n| !results.iter().any(|r| r.name == **n))
        .copied()
        .collect();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let ok = missing.is_empty()
        && results
            .iter()
            .all(|r| r.instances >= 100 && r.max_rel_error < 1e-3)
        && elapsed < Duration::from_secs(60);
    judge(
        ok,
        format!(
            "{} ops × ≥100 instances, worst {} at {:.2e} (< 1e-3), {:.1}s (< 60s){}",
            results.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64(),
            if missing.is_empty() {
                String::new()
            } else {
                format!(", missing {missing:?}")
            }
        ),
    )
}

fn loss_law() -> Outcome {
    let params = CsLossParams {
        alpha: 10.0,
        beta: 0.2,
        gamma: 2.0,
        ..CsLossParams::default()
    };
    let mut problems = Vec::new();
    for (pt, expected) in [(0.5, 0.431439), (0.9, 0.013708)] {
        let got = cs_loss(pt, true, &params);
        if (got - expected).abs() > 1e-6 {
            problems.push(format!(
                "cs({pt}) = {got:.7}, expected {expected} (off by {:.1e})",
                (got - expected).abs()
            ));
        }
    }
    let mut prev_m = f64::INFINITY;
    let mut min_low_ratio = f64::INFINITY;
    for i in 1..1000 {
        let pt = i as f64 / 1000.0;
        let ratio = cs_loss(pt, true, &params) / ce_loss(pt, true);
        if !(ratio > 0.0 && ratio < 1.0) {
            problems.push(format!("cs/ce = {ratio} at p_t = {pt}"));
        }
        let m = modulating_factor(pt, &params);
        if m > prev_m {
            problems.push(format!("modulating factor rises at p_t = {pt}"));
        }
        prev_m = m;
        if pt <= 0.1 {
            min_low_ratio = min_low_ratio.min(ratio);
        }
    }
    if min_low_ratio < 0.99 {
        problems.push(format!(
            "cs/ce = {min_low_ratio:.5} below 0.99 for p_t ≤ 0.1"
        ));
    }
    let detail = if problems.is_empty() {
        format!("pinned values within 1e-6; grid ok; min cs/ce for p_t ≤ 0.1 is {min_low_ratio:.5}")
    } else {
        problems.join("; ")
    };
    judge(problems.is_empty(), detail)
}

/// Mean over positions of the padded 3×3 Conv-DA output, in f64.
fn da_logits_f64(da: &ConvDaWeights, x: &[f64], c: usize, h: usize, w: usize) -> [f64; 2] {
    let k = da.kernel.data();
    let mut out = [0.0; 2];
    for (cls, o) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for y in 0..h {
            for xx in 0..w {
                let mut v = da.bias.data()[cls] as f64;
                for ch in 0..c {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (yy, xc) =
                                (y as isize + ki as isize - 1, xx as isize + kj as isize - 1);
                            if yy < 0 || xc < 0 || yy >= h as isize || xc >= w as isize {
                                continue;
                            }
                            v += k[((cls * c + ch) * 3 + ki) * 3 + kj] as f64
                                * x[(ch * h + yy as usize) * w + xc as usize];
                        }
                    }
                }
                total += v;
            }
        }
        *o = total / (h * w) as f64;
    }
    out
}

/// Brute-force importance: shift a whole channel of each negative by ±eps
/// and difference the background score (or loss).
fn importance_by_perturbation(
    da: &ConvDaWeights,
    negatives: &[Tensor],
    source: ImportanceSource,
) -> Vec<f64> {
    let (c, h, w) = negatives[0].dims3("oracle").unwrap();
    let eps = 1e-3;
    let objective = |x: &[f64]| {
        let l = da_logits_f64(da, x, c, h, w);
        match source {
            ImportanceSource::Score => l[0],
            // −ln softmax_bg, computed stably
            ImportanceSource::Loss => {
                let d = l[1] - l[0];
                d.max(0.0) + (-d.abs()).exp().ln_1p()
            }
        }
    };
    let mut delta = vec![0.0; c];
    for neg in negatives {
        let base: Vec<f64> = neg.data().iter().map(|&v| v as f64).collect();
        for (ch, d) in delta.iter_mut().enumerate() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            for i in ch * h * w..(ch + 1) * h * w {
                plus[i] += eps;
                minus[i] -= eps;
            }
            *d += (objective(&plus) - objective(&minus)) / (2.0 * eps * (h * w) as f64);
        }
    }
    delta.iter().map(|d| d / negatives.len() as f64).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    diff.sqrt() / na.max(nb).sqrt().max(1e-12)
}

fn planted_features(
    n: usize,
    [c, h, w]: [usize; 3],
    planted: usize,
    shift: f32,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let mut t = Tensor::randn(&[c, h, w], 1.0, rng);
            t.data_mut()[planted * h * w..(planted + 1) * h * w]
                .iter_mut()
                .for_each(|v| *v += shift);
            t
        })
        .collect()
}

fn channel_importance_oracles() -> Outcome {
    // brute-force equivalence on 20 toy instances, both importance sources
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let c = 4 + (inst as usize % 13);
        let (h, w) = (5 + inst as usize % 3, 7);
        let negatives: Vec<Tensor> = (0..6)
            .map(|_| Tensor::randn(&[c, h, w], 1.0, &mut rng))
            .collect();
        let da = if inst % 2 == 0 {
            let positives = planted_features(6, [c, h, w], 0, 1.0, &mut rng);
            let feats: Vec<Tensor> = positives.iter().chain(&negatives).cloned().collect();
            let labels: Vec<bool> = (0..12).map(|i| i < 6).collect();
            let cfg = DaTrainConfig {
                iters: 30,
                batch_pos: 4,
                batch_neg: 4,
                ..DaTrainConfig::default()
            };
            train_conv_da(&feats, &labels, &cfg, inst).unwrap().weights
        } else {
            ConvDaWeights {
                kernel: Tensor::randn(&[2, c, 3, 3], 0.3, &mut rng),
                bias: Tensor::randn(&[2], 0.3, &mut rng),
            }
        };
        for source in [ImportanceSource::Score, ImportanceSource::Loss] {
            let got: Vec<f64> = channel_importance(&da, &negatives, source)
                .unwrap()
                .delta
                .iter()
                .map(|&v| v as f64)
                .collect();
            let oracle = importance_by_perturbation(&da, &negatives, source);
            worst = worst.max(rel_err(&got, &oracle));
        }
    }

    // top-k against a stable sort on descending value
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut selection_mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=64usize);
        let values: Vec<f32> = (0..n)
            .map(|_| rng.random_range(-4i32..=4) as f32 * 0.5)
            .collect();
        let k = rng.random_range(0..=n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
        let mut expected = order[..k].to_vec();
        expected.sort();
        if select_channels(&values, k).unwrap().indices() != expected.as_slice() {
            selection_mismatches += 1;
        }
    }

    // one informative channel among noise must rank first
    let mut recovered = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let c = 32;
        let planted = rng.random_range(0..c);
        let pos = planted_features(32, [c, 7, 7], planted, 1.0, &mut rng);
        let neg: Vec<Tensor> = (0..96)
            .map(|_| Tensor::randn(&[c, 7, 7], 1.0, &mut rng))
            .collect();
        let cfg = AdaptConfig {
            mask_k: 1,
            ..AdaptConfig::default()
        };
        let ad = adapt_channels(&pos, &neg, &cfg, seed).unwrap();
        if ad.mask.indices() == [planted] {
            recovered += 1;
        }
    }

    judge(
        worst < 1e-2 && selection_mismatches == 0 && recovered >= 19,
        format!(
            "perturbation oracle worst rel err {worst:.2e} (< 1e-2) over 20 instances × 2 sources; \
             top-k mismatches {selection_mismatches}/500; planted channel recovered {recovered}/20 (≥ 19)"
        ),
    )
}

fn state_machine_trace() -> Outcome {
    use UpdateKind::{Long as L, None as N, Short as S};
    const FAIL_SCORE: f64 = 0.3;
    let failures = [5, 8, 9, 13, 20, 21, 22, 27];
    // scores exactly at the threshold count as success
    let at_threshold = [16, 24];
    #[rustfmt::skip]
    let expected: [(usize, UpdateKind, &[usize], &[usize]); 30] = [
        (1, N, &[1], &[1]),
        (2, N, &[1, 2], &[1, 2]),
        (3, N, &[1, 2, 3], &[1, 2, 3]),
        (4, L, &[2, 3, 4], &[1, 2, 3, 4]),
        (5, S, &[2, 3, 4], &[1, 2, 3, 4]),
        (6, N, &[3, 4, 6], &[1, 2, 3, 4, 6]),
        (7, N, &[4, 6, 7], &[2, 3, 4, 6, 7]),
        (8, S, &[4, 6, 7], &[2, 3, 4, 6, 7]),
        (9, S, &[4, 6, 7], &[2, 3, 4, 6, 7]),
        (10, N, &[6, 7, 10], &[3, 4, 6, 7, 10]),
        (11, N, &[7, 10, 11], &[4, 6, 7, 10, 11]),
        (12, L, &[10, 11, 12], &[6, 7, 10, 11, 12]),
        (13, S, &[10, 11, 12], &[6, 7, 10, 11, 12]),
        (14, N, &[11, 12, 14], &[7, 10, 11, 12, 14]),
        (15, N, &[12, 14, 15], &[10, 11, 12, 14, 15]),
        (16, L, &[14, 15, 16], &[11, 12, 14, 15, 16]),
        (17, N, &[15, 16, 17], &[12, 14, 15, 16, 17]),
        (18, N, &[16, 17, 18], &[14, 15, 16, 17, 18]),
        (19, N, &[17, 18, 19], &[15, 16, 17, 18, 19]),
        (20, S, &[17, 18, 19], &[15, 16, 17, 18, 19]),
        (21, S, &[17, 18, 19], &[15, 16, 17, 18, 19]),
        (22, S, &[17, 18, 19], &[15, 16, 17, 18, 19]),
        (23, N, &[18, 19, 23], &[16, 17, 18, 19, 23]),
        (24, L, &[19, 23, 24], &[17, 18, 19, 23, 24]),
        (25, N, &[23, 24, 25], &[18, 19, 23, 24, 25]),
        (26, N, &[24, 25, 26], &[19, 23, 24, 25, 26]),
        (27, S, &[24, 25, 26], &[19, 23, 24, 25, 26]),
        (28, L, &[25, 26, 28], &[23, 24, 25, 26, 28]),
        (29, N, &[26, 28, 29], &[24, 25, 26, 28, 29]),
        (30, N, &[28, 29, 30], &[25, 26, 28, 29, 30]),
    ];
    let schedule = Schedule {
        tau_int: 4,
        threshold: 0.5,
    };
    let mut memory: MemoryStore<usize, usize> = MemoryStore::new(3, 5).unwrap();
    memory.push(1, 1, 1);
    let mut successes = vec![1];
    let mut problems = Vec::new();
    for &(t, kind, short, long) in &expected {
        let update = if t == 1 {
            UpdateKind::None
        } else {
            let score = if failures.contains(&t) {
                FAIL_SCORE
            } else if at_threshold.contains(&t) {
                0.5
            } else {
                0.8
            };
            let d = memory.record(&schedule, t, score, || Ok((t, t))).unwrap();
            if d.success {
                successes.push(t);
            }
            if let Some((pos, neg)) = memory.training_set(d.update) {
                let pos: Vec<usize> = pos.into_iter().copied().collect();
                let neg: Vec<usize> = neg.into_iter().copied().collect();
                let want_pos = match d.update {
                    UpdateKind::Long => memory.long_frames(),
                    _ => memory.short_frames(),
                };
                if pos != want_pos || neg != memory.short_frames() {
                    problems.push(format!("t={t}: trained on {pos:?}/{neg:?}"));
                }
            }
            d.update
        };
        let (s, l) = (memory.short_frames(), memory.long_frames());
        if update != kind || s != short || l != long {
            problems.push(format!(
                "t={t}: got {update:?} {s:?} {l:?}, expected {kind:?} {short:?} {long:?}"
            ));
        }
        // invariants: bounds, short ⊆ long, success-only admission, FIFO order
        let tail = |n: usize| successes[successes.len().saturating_sub(n)..].to_vec();
        if s.len() > 3
            || l.len() > 5
            || !s.iter().all(|f| l.contains(f))
            || !l.iter().all(|f| successes.contains(f))
            || s != tail(3)
            || l != tail(5)
        {
            problems.push(format!("t={t}: invariant broken: {s:?} {l:?}"));
        }
    }
    let detail = if problems.is_empty() {
        "30 scripted frames (τ_short=3, τ_long=5, τ_int=4) match the hand trace; invariants hold"
            .into()
    } else {
        problems.join("; ")
    };
    judge(problems.is_empty(), detail)
}

struct RunStats {
    ious: Vec<f64>,
    elapsed: Duration,
}

fn toy_run(spec: &SceneSpec, seed: u64, loss: LossKind) -> RunStats {
    let seq = generate(spec).expect("preset renders");
    let backbone = Arc::new(BackboneWeights::random(BackboneArch::TOY, seed));
    let cfg = TrackerConfig {
        seed,
        loss,
        ..TrackerConfig::toy()
    };
    let t0 = Instant::now();
    let run = track_sequence(seq.frames.into_iter().map(Ok), seq.gt[0], &cfg, backbone)
        .expect("tracking completes");
    let elapsed = t0.elapsed();
    let ious = run
        .boxes()
        .iter()
        .zip(&seq.gt)
        .map(|(a, b)| iou(a, b))
        .collect();
    RunStats { ious, elapsed }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn end_to_end() -> Outcome {
    const SEEDS: u64 = 5;
    let mut slowest = Duration::ZERO;
    let mut easy = Vec::new();
    let mut recovery = Vec::new();
    for seed in 0..SEEDS {
        let spec = preset("easy_translation").unwrap().reseeded(seed);
        let r = toy_run(&spec, seed, LossKind::Cs);
        slowest = slowest.max(r.elapsed);
        easy.push(mean(&r.ious));

        let spec = preset("occlusion").unwrap().reseeded(seed);
        let hidden = occluded_frames(&spec, 0.6).unwrap();
        let after = hidden.last().expect("occlusion preset hides the target") + 1;
        let r = toy_run(&spec, seed, LossKind::Cs);
        slowest = slowest.max(r.elapsed);
        let post = &r.ious[after..];
        recovery.push(post.iter().filter(|&&v| v >= 0.4).count() as f64 / post.len() as f64);
    }
    let (easy_mean, recovery_mean) = (mean(&easy), mean(&recovery));
    judge(
        easy_mean >= 0.6 && recovery_mean >= 0.7 && slowest < Duration::from_secs(300),
        format!(
            "easy_translation mean IoU {easy_mean:.3} (≥ 0.6) {easy:.3?}; occlusion post-occlusion \
             IoU ≥ 0.4 on {:.1}% (≥ 70%) {recovery:.2?}; slowest run {:.1}s (< 300s)",
            100.0 * recovery_mean,
            slowest.as_secs_f64()
        ),
    )
}

fn loss_ablation() -> Outcome {
    const SEEDS: u64 = 10;
    let mut cs = Vec::new();
    let mut ce = Vec::new();
    for seed in 0..SEEDS {
        let spec = preset("distractor").unwrap().reseeded(seed);
        cs.push(mean(&toy_run(&spec, seed, LossKind::Cs).ious));
        ce.push(mean(&toy_run(&spec, seed, LossKind::Ce).ious));
    }
    let (cs_mean, ce_mean) = (mean(&cs), mean(&ce));
    judge(
        cs_mean >= ce_mean,
        format!(
            "mean IoU over {SEEDS} paired seeds: cs {cs_mean:.3} vs ce {ce_mean:.3}; \
             per seed cs {cs:.2?} ce {ce:.2?}"
        ),
    )
}

fn metrics() -> Outcome {
    let gt: Vec<BBox> = (0..40)
        .map(|i| BBox::new(10.0 + 3.0 * i as f64, 20.0 + (i % 7) as f64, 40.0, 30.0))
        .collect();
    let mut problems = Vec::new();

    let p = precision_curve(&gt, &gt).unwrap();
    let s = success_curve(&gt, &gt).unwrap();
    let dp = dp_at(&p, 20.0).unwrap();
    if dp != 1.0 || auc(&s) != 20.0 / 21.0 {
        problems.push(format!("oracle run: DP@20 {dp}, AUC {}", auc(&s)));
    }

    // each box doubles the width of its gt box, so IoU is exactly 1/2
    let half: Vec<BBox> = gt
        .iter()
        .map(|b| BBox::new(b.x, b.y, 2.0 * b.w, b.h))
        .collect();
    let a = auc(&success_curve(&half, &gt).unwrap());
    if a != 10.0 / 21.0 {
        problems.push(format!("constant IoU 0.5 run: AUC {a}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let run: Vec<BBox> = gt
            .iter()
            .map(|b| {
                let j = rng.random_range(0.0..60.0);
                BBox::new(
                    b.x + j,
                    b.y - j / 2.0,
                    b.w * rng.random_range(0.5..1.5),
                    b.h,
                )
            })
            .collect();
        let p = precision_curve(&run, &gt).unwrap();
        let s = success_curve(&run, &gt).unwrap();
        let p_ok = p.values.windows(2).all(|w| w[0] <= w[1]);
        let s_ok = s.values.windows(2).all(|w| w[0] >= w[1]);
        if !(p_ok && s_ok) {
            problems.push("non-monotone curve".into());
            break;
        }
    }
    let detail = if problems.is_empty() {
        "oracle DP@20 = 1, AUC = 20/21; IoU-½ run AUC = 10/21; curves monotone on 50 random runs"
            .into()
    } else {
        problems.join("; ")
    };
    judge(problems.is_empty(), detail)
}

/// Needs `CONTEXT_TRACKER_CWB` (backbone weights) and
/// `CONTEXT_TRACKER_OTB_SEQ` (one OTB-format sequence directory).
fn real_assets() -> Outcome {
    let (Ok(cwb), Ok(seq)) = (
        std::env::var("CONTEXT_TRACKER_CWB"),
        std::env::var("CONTEXT_TRACKER_OTB_SEQ"),
    ) else {
        return Outcome {
            verdict: Verdict::Skip,
            detail: "set CONTEXT_TRACKER_CWB and CONTEXT_TRACKER_OTB_SEQ to run".into(),
        };
    };
    let backbone = Arc::new(load_cwb(PathBuf::from(cwb)).expect("weights load"));
    let record = load_otb_sequence(&PathBuf::from(seq)).expect("sequence loads");
    let (run, scores) =
        ope_run(&TrackerConfig::default(), &record, backbone).expect("run completes");
    let rescored = score_run(&run.boxes(), &record.gt).unwrap();
    let scores_ok = run.frames.iter().all(|f| f.score > 0.0 && f.score < 1.0);
    judge(
        run.frames.len() == record.gt.len()
            && scores_ok
            && scores.dp20.is_finite()
            && scores.auc.is_finite()
            && rescored == scores,
        format!(
            "{}: {} frames, DP@20 {:.3}, AUC {:.3}",
            record.name,
            run.frames.len(),
            scores.dp20,
            scores.auc
        ),
    )
}
