//! Acceptance suite A1..A9. Runs as a plain binary and prints one
//! `A<n> PASS|FAIL: ...` line per criterion; exits non-zero if any fails.
//!
//! The training criteria (A1-A3) share one toy victim fitted for 30 epochs
//! to 200 synthetic scenes (corpus seed 42). They use the desk-scale TV
//! weight `gamma = 1e-6`: at the library default of 2 the summed TV term
//! outweighs the depth gradient by five orders of magnitude on this victim
//! and the patch just flattens.
//!
//! Set `DEPTHPATCH_ACCEPTANCE=fast` to skip A1-A3.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthpatch::checkpoint::list_checkpoints;
use depthpatch::config::RunConfig;
use depthpatch::io::load_patch;
use depthpatch::model_store::save_toy_model;
use depthpatch::run::{gen_scenes, train_patch, LOG};
use depthpatch_core::attack::{
    initial_state, patch_objective, prepare_samples, run_attack, AttackConfig, SceneSample,
};
use depthpatch_core::detect::{detect, postprocess};
use depthpatch_core::experiment::{run_experiment, ExperimentSpec, ExperimentTable};
use depthpatch_core::loss::{depth_loss_d1, depth_loss_d2, tv_loss, LossWeights};
use depthpatch_core::metrics::{affected_ratio, evaluate_run, mean_depth_error, mse, EvalConfig};
use depthpatch_core::model::{
    generate_corpus, train_toy_model, SceneParams, SyntheticScene, ToyModel, ToyTrainConfig,
};
use depthpatch_core::pipeline::{apply_patch, TransformRanges, TransformSample};
use depthpatch_core::{
    BBox, BinaryMask, Denominator, DepthModel, DetectorConfig, DisparityMap, ImageTensor,
    OracleDetector, Patch,
};

const CORPUS_SEED: u64 = 42;
const DESK_GAMMA: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

// ---------------------------------------------------------------- fixtures

struct Victim {
    model: ToyModel,
    corpus: Vec<SyntheticScene>,
    checksum: String,
}

fn victim() -> Victim {
    let corpus = generate_corpus(CORPUS_SEED, 200, &SceneParams::default()).unwrap();
    let t = Instant::now();
    let (model, report) = train_toy_model(&corpus, &ToyTrainConfig::default(), |_, _| {}).unwrap();
    progress(&format!(
        "victim: {} params, final train mse {:.5}, {:.0?}",
        model.param_count(),
        report.final_loss().unwrap(),
        t.elapsed()
    ));
    let checksum = model.parameter_checksum();
    Victim {
        model,
        corpus,
        checksum,
    }
}

/// The first `n` scenes through the oracle detector and default post-processing.
fn samples(v: &Victim, n: usize) -> Vec<SceneSample> {
    let mut oracle = OracleDetector::default();
    let ids: Vec<String> = (0..n).map(|i| format!("{i:06}")).collect();
    for (id, s) in ids.iter().zip(&v.corpus) {
        for b in s.boxes() {
            oracle.insert(id.clone(), b);
        }
    }
    let items = ids
        .iter()
        .zip(&v.corpus)
        .map(|(id, s)| {
            let dets = detect(&oracle, id, &s.image, &DetectorConfig::default()).unwrap();
            (s.image.clone(), dets)
        })
        .collect();
    let cfg = AttackConfig::default();
    prepare_samples(&v.model, items, cfg.target_class, cfg.target_mode, false).unwrap()
}

fn desk_config(epochs: usize) -> AttackConfig {
    let mut cfg = AttackConfig {
        epochs,
        ..Default::default()
    };
    cfg.loss_weights.gamma = DESK_GAMMA;
    cfg
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize) -> DisparityMap {
    DisparityMap::from_fn(h, w, |_, _| r.gen::<f64>()).unwrap()
}

fn random_rect(r: &mut ChaCha8Rng, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let y0 = r.gen_range(0..h - 1);
    let x0 = r.gen_range(0..w - 1);
    (y0, r.gen_range(y0 + 1..=h), x0, r.gen_range(x0 + 1..=w))
}

fn rect_mask(h: usize, w: usize, (y0, y1, x0, x1): (usize, usize, usize, usize)) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
}

// ---------------------------------------------------------------- A1-A3

fn a1(v: &Victim, checksums: &mut Vec<String>) -> Outcome {
    let samples = samples(v, 200);
    let cfg = desk_config(500);
    let eval = EvalConfig {
        patch_scale_factor: cfg.patch_scale_factor,
        ..Default::default()
    };
    let random = initial_state(&cfg).unwrap().patch;
    let base = evaluate_run(&random, &samples, &v.model, &eval).unwrap().aggregate;
    let t = Instant::now();
    let state = run_attack(&samples, &v.model, &cfg, None, &mut ()).unwrap();
    checksums.push(v.model.parameter_checksum());
    let r = evaluate_run(&state.patch.patch, &samples, &v.model, &eval).unwrap().aggregate;
    let ratio = r.e_d / base.e_d;
    let ok_ratio = ratio >= 3.0;
    let ok_ra = r.r_a >= 0.8;
    outcome(
        ok_ratio && ok_ra,
        format!(
            "{} scenes, 500 epochs in {:.0?}: E_d {:.4} vs random {:.4} (x{ratio:.2}, need >= 3: {}), R_a {:.4} (need >= 0.8: {})",
            r.scenes,
            t.elapsed(),
            r.e_d,
            base.e_d,
            if ok_ratio { "ok" } else { "no" },
            r.r_a,
            if ok_ra { "ok" } else { "no" }
        ),
    )
}

fn experiment(v: &Victim, spec: &ExperimentSpec, n: usize, checksums: &mut Vec<String>) -> ExperimentTable {
    let samples = samples(v, n);
    let table = run_experiment(spec, &samples, &v.model, "acceptance", &mut |name, r| match r {
        Ok(row) => progress(&format!("{name}: E_d {:.4} R_a {:.4}", row.e_d, row.r_a)),
        Err(e) => progress(&format!("{name}: {e}")),
    })
    .unwrap();
    checksums.push(v.model.parameter_checksum());
    assert!(table.failure.is_none(), "{:?}", table.failure);
    table
}

/// Reduced budget: 60 scenes, 60 epochs per variant.
fn a2(v: &Victim, checksums: &mut Vec<String>) -> Outcome {
    let t = experiment(v, &ExperimentSpec::ablation(desk_config(60)), 60, checksums);
    let (full, ring, overlap) = (t.row("full").unwrap(), t.row("ring+tv").unwrap(), t.row("overlap+tv").unwrap());
    let pass = full.e_d > ring.e_d && full.e_d > overlap.e_d && full.r_a > ring.r_a && full.r_a > overlap.r_a;
    outcome(
        pass,
        format!(
            "E_d full {:.5} / L_d2+tv {:.5} / L_d1+tv {:.5}; R_a full {:.5} / {:.5} / {:.5}",
            full.e_d, ring.e_d, overlap.e_d, full.r_a, ring.r_a, overlap.r_a
        ),
    )
}

fn a3(v: &Victim, checksums: &mut Vec<String>) -> Outcome {
    let spec = ExperimentSpec::scale_sweep(desk_config(60), &[0.1, 0.2, 0.3]);
    let t = experiment(v, &spec, 60, checksums);
    let e: Vec<f64> = t.rows.iter().map(|r| r.e_d).collect();
    let ra: Vec<f64> = t.rows.iter().map(|r| r.r_a).collect();
    let pass = e[2] > e[0] && ra.windows(2).all(|w| w[1] >= w[0] - 0.02);
    outcome(
        pass,
        format!("E_d {:.4} / {:.4} / {:.4}, R_a {:.4} / {:.4} / {:.4} at scales 0.1 / 0.2 / 0.3", e[0], e[1], e[2], ra[0], ra[1], ra[2]),
    )
}

// ---------------------------------------------------------------- A4

fn a4(v: &Victim) -> Outcome {
    let samples = samples(v, 8);
    let sample = samples.iter().find(|s| !s.boxes.is_empty()).unwrap();
    let mut r = rng(4);
    let cfg = desk_config(1);
    let transforms: Vec<TransformSample> = sample
        .boxes
        .iter()
        .map(|_| TransformSample::from_seed(r.gen(), &TransformRanges::default(), cfg.patch_side).unwrap())
        .collect();
    let patch = initial_state(&cfg).unwrap().patch;
    let mut worst = 0.0f64;
    // Checked twice: with the desk-scale TV weight (depth path dominates) and
    // with the library default weights (TV dominates).
    for weights in [cfg.loss_weights.clone(), LossWeights::default()] {
        let cfg = AttackConfig {
            loss_weights: weights,
            ..cfg.clone()
        };
        let (_, grad) = patch_objective(&patch, sample, &transforms, &v.model, &cfg).unwrap();
        let h = 1e-4;
        let n = patch.data().len();
        let mut checked = 0;
        while checked < 20 {
            let i = r.gen_range(0..n);
            let x = patch.data()[i];
            if x < h || x > 1.0 - h {
                continue;
            }
            let at = |v_: f64| {
                let mut d = patch.data().to_vec();
                d[i] = v_;
                let p = Patch::new(patch.side(), d).unwrap();
                patch_objective(&p, sample, &transforms, &v.model, &cfg).unwrap().0.l_total
            };
            let fd = (at(x + h) - at(x - h)) / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs());
            let rel = if scale == 0.0 { 0.0 } else { (grad[i] - fd).abs() / scale };
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(worst <= 1e-3, format!("40 pixels (2 weightings x 20), worst relative error {worst:.2e} (tol 1e-3)"))
}

// ---------------------------------------------------------------- A5

fn a5() -> Outcome {
    let mut r = rng(5);
    let (h, w) = (16, 16);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = random_map(&mut r, h, w);
        let d_adv = random_map(&mut r, h, w);
        let f_rect = random_rect(&mut r, h, w);
        let (fy0, fy1, fx0, fx1) = f_rect;
        let py0 = r.gen_range(fy0..fy1);
        let px0 = r.gen_range(fx0..fx1);
        let p_rect = (py0, r.gen_range(py0 + 1..=fy1), px0, r.gen_range(px0 + 1..=fx1));
        let m_f = rect_mask(h, w, f_rect);
        let m_p = rect_mask(h, w, p_rect);
        let side = r.gen_range(2..=16);
        let patch = Patch::new(side, (0..3 * side * side).map(|_| r.gen()).collect()).unwrap();

        // Scalar-loop oracles written straight from the definitions.
        let (mut sum_f, mut n_f, mut hit, mut sq) = (0.0, 0.0, 0.0, 0.0);
        let (mut sum_p, mut n_p, mut sum_ring, mut n_ring) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let diff = (d.get(y, x) - d_adv.get(y, x)).abs();
                sq += diff * diff;
                let in_f = y >= fy0 && y < fy1 && x >= fx0 && x < fx1;
                let in_p = y >= p_rect.0 && y < p_rect.1 && x >= p_rect.2 && x < p_rect.3;
                if in_f {
                    sum_f += diff;
                    n_f += 1.0;
                    if diff > 0.1 {
                        hit += 1.0;
                    }
                }
                if in_p {
                    sum_p += diff;
                    n_p += 1.0;
                }
                if in_f && !in_p {
                    sum_ring += diff;
                    n_ring += 1.0;
                }
            }
        }
        let area = (h * w) as f64;
        let mut tv = 0.0;
        for c in 0..3 {
            for i in 0..side - 1 {
                for j in 0..side - 1 {
                    let a = patch.get(c, i, j);
                    let dn = patch.get(c, i + 1, j) - a;
                    let rt = patch.get(c, i, j + 1) - a;
                    tv += (dn * dn + rt * rt).sqrt();
                }
            }
        }
        let ring_mask = if n_ring > 0.0 { sum_ring / n_ring } else { 0.0 };
        let pairs = [
            (mean_depth_error(&d, &d_adv, &m_f).unwrap(), sum_f / n_f),
            (affected_ratio(&d, &d_adv, &m_f, 0.1).unwrap(), hit / n_f),
            (mse(&d, &d_adv).unwrap(), sq / area),
            (depth_loss_d1(&d, &d_adv, &m_p, Denominator::FullArea).unwrap(), sum_p / area),
            (depth_loss_d1(&d, &d_adv, &m_p, Denominator::MaskArea).unwrap(), sum_p / n_p),
            (depth_loss_d2(&d, &d_adv, &m_f, &m_p, Denominator::FullArea).unwrap(), sum_ring / area),
            (depth_loss_d2(&d, &d_adv, &m_f, &m_p, Denominator::MaskArea).unwrap(), ring_mask),
            (tv_loss(&patch).unwrap(), tv),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    outcome(worst <= 1e-10, format!("50 fixtures x 8 quantities, worst abs error {worst:.1e}"))
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let mut r = rng(6);
    let mut failures = 0;
    let mut pasted = 0;
    for _ in 0..50 {
        let (h, w) = (r.gen_range(24..64), r.gen_range(24..96));
        let image = ImageTensor::from_fn(h, w, |_, _, _| r.gen::<f64>()).unwrap();
        let side = r.gen_range(2..12);
        let patch = Patch::new(side, (0..3 * side * side).map(|_| r.gen()).collect()).unwrap();
        let boxes: Vec<BBox> = (0..r.gen_range(1..4))
            .map(|_| {
                BBox::new(
                    r.gen_range(0.0..w as f64),
                    r.gen_range(0.0..h as f64),
                    r.gen_range(4.0..40.0),
                    r.gen_range(4.0..30.0),
                    r.gen_range(0.5..1.0),
                    0,
                )
            })
            .collect();
        let ts: Vec<TransformSample> = boxes
            .iter()
            .map(|_| TransformSample::from_seed(r.gen(), &TransformRanges::default(), side).unwrap())
            .collect();
        let ex = apply_patch(&image, &patch, &boxes, &ts, r.gen_range(0.1..0.6)).unwrap();
        pasted += ex.applied();
        let m = &ex.patch_union;
        let n = h * w;
        let outside_equal = (0..3 * n).all(|i| m.data()[i % n] || ex.image.data()[i].to_bits() == image.data()[i].to_bits());
        // A gradient that lives only outside the footprint must not reach the patch.
        let g: Vec<f64> = (0..3 * n).map(|i| if m.data()[i % n] { 0.0 } else { r.gen_range(-1.0..1.0) }).collect();
        let leak = ex.backward(&g, side).iter().any(|&v| v != 0.0);
        if !outside_equal || leak {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("50 fixtures ({pasted} pastes), {failures} violations"))
}

// ---------------------------------------------------------------- A7

fn history(run: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(run.join(LOG))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("ts");
            v
        })
        .collect()
}

fn a7(v: &Victim, checksums: &mut Vec<String>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_scenes(&data, 16, 0, 7, &SceneParams::default()).unwrap();
    let model_dir = dir.path().join("model");
    std::fs::create_dir_all(&model_dir).unwrap();
    save_toy_model(&model_dir, &v.model, None).unwrap();

    let mut cfg = RunConfig {
        attack: desk_config(6),
        checkpoint_every: 3,
        ..Default::default()
    };
    cfg.attack.seed = 11;
    let full_a = dir.path().join("full-a");
    let full_b = dir.path().join("full-b");
    let a = train_patch(&cfg, &model_dir, &data, &full_a).unwrap();
    let b = train_patch(&cfg, &model_dir, &data, &full_b).unwrap();
    let same_history = history(&full_a) == history(&full_b) && a.state.patch == b.state.patch;

    // Interrupted after epoch 3, then resumed from that checkpoint.
    let part = dir.path().join("resumed");
    let mut short = cfg.clone();
    short.attack.epochs = 3;
    train_patch(&short, &model_dir, &data, &part).unwrap();
    let ckpts = list_checkpoints(&part).unwrap();
    let resumed = train_patch(&cfg, &model_dir, &data, &part).unwrap();
    checksums.push(v.model.parameter_checksum());

    let (pa, _) = load_patch(&full_a.join("patch.png")).unwrap();
    let (pr, _) = load_patch(&part.join("patch.png")).unwrap();
    let diff = pa.data().iter().zip(pr.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let pass = same_history
        && resumed.resumed_from == Some(3)
        && ckpts.iter().any(|(e, _)| *e == 3)
        && diff <= 2f64.powi(-15)
        && history(&part) == history(&full_a);
    outcome(
        pass,
        format!(
            "replay identical: {same_history}; resumed from {:?}, final patch max diff {diff:.1e} (tol 2^-15), log identical: {}",
            resumed.resumed_from,
            history(&part) == history(&full_a)
        ),
    )
}

// ---------------------------------------------------------------- A8

fn a8(v: &Victim, checksums: &[String]) -> Outcome {
    let bad = checksums.iter().filter(|c| **c != v.checksum).count();
    outcome(
        bad == 0 && !checksums.is_empty(),
        format!("{} attack runs checked, {bad} changed the victim", checksums.len()),
    )
}

// ---------------------------------------------------------------- A9

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
    let ih = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// O(n^2) reference: threshold at 0.5, per-class greedy suppression above
/// IoU 0.4 in descending score order (ties keep input order), cap at 14.
fn ref_postprocess(raw: &[BBox]) -> Vec<BBox> {
    let cand: Vec<BBox> = raw.iter().filter(|b| b.score >= 0.5).copied().collect();
    let mut keep = vec![true; cand.len()];
    let rank = |i: usize| cand.iter().enumerate().filter(|(j, c)| c.score > cand[i].score || (c.score == cand[i].score && *j < i)).count();
    let mut order: Vec<usize> = (0..cand.len()).collect();
    order.sort_by_key(|&i| rank(i));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[..pos] {
            if keep[j] && cand[j].class_id == cand[i].class_id && ref_iou(&cand[j], &cand[i]) > 0.4 {
                keep[i] = false;
            }
        }
    }
    order.into_iter().filter(|&i| keep[i]).take(14).map(|i| cand[i]).collect()
}

fn a9() -> Outcome {
    let cfg = DetectorConfig::default();
    let defaults = cfg.objectness_threshold == 0.5 && cfg.nms_iou_threshold == 0.4 && cfg.max_detections == 14;
    let mut r = rng(9);
    let mut mismatches = 0;
    let mut sets: Vec<Vec<BBox>> = (0..300)
        .map(|_| {
            (0..r.gen_range(0..40))
                .map(|_| {
                    // Coarse grids make exact score ties and IoU boundary cases common.
                    BBox::new(
                        r.gen_range(0..12) as f64 * 4.0,
                        r.gen_range(0..8) as f64 * 4.0,
                        r.gen_range(1..6) as f64 * 4.0,
                        r.gen_range(1..6) as f64 * 4.0,
                        r.gen_range(0..11) as f64 / 10.0,
                        r.gen_range(0..2),
                    )
                })
                .collect()
        })
        .collect();
    // Exact boundaries: IoU 0.4 survives, score 0.5 survives, 20 disjoint boxes cap at 14.
    sets.push(vec![
        BBox::from_corners(0.0, 0.0, 7.0, 10.0, 0.9, 0),
        BBox::from_corners(3.0, 0.0, 10.0, 10.0, 0.8, 0),
    ]);
    sets.push(vec![BBox::new(5.0, 5.0, 4.0, 4.0, 0.5, 0), BBox::new(50.0, 5.0, 4.0, 4.0, 0.4999, 0)]);
    sets.push((0..20).map(|i| BBox::new(i as f64 * 10.0, 5.0, 4.0, 4.0, 0.6 + i as f64 / 100.0, 0)).collect());
    let boundary = [2usize, 1, 14];
    for (k, raw) in sets.iter().enumerate() {
        let got = postprocess("x", raw, &cfg).boxes;
        let want = ref_postprocess(raw);
        if got != want {
            mismatches += 1;
        }
        if k >= 300 && got.len() != boundary[k - 300] {
            mismatches += 1;
        }
    }
    outcome(
        defaults && mismatches == 0,
        format!("defaults (0.5, 0.4, 14): {defaults}; {} box sets, {mismatches} mismatches", sets.len()),
    )
}

fn main() -> ExitCode {
    let fast = std::env::var("DEPTHPATCH_ACCEPTANCE").is_ok_and(|v| v == "fast");
    let mut results: BTreeMap<&str, Outcome> = BTreeMap::new();
    results.insert("A5", a5());
    results.insert("A6", a6());
    results.insert("A9", a9());
    let v = victim();
    let mut checksums = Vec::new();
    results.insert("A4", a4(&v));
    results.insert("A7", a7(&v, &mut checksums));
    if !fast {
        progress("A2: ablation, 3 x 60 epochs on 60 scenes");
        results.insert("A2", a2(&v, &mut checksums));
        progress("A3: scale sweep, 3 x 60 epochs on 60 scenes");
        results.insert("A3", a3(&v, &mut checksums));
        progress("A1: 500 epochs on 200 scenes (about 15 minutes)");
        results.insert("A1", a1(&v, &mut checksums));
    }
    results.insert("A8", a8(&v, &checksums));

    let mut failed = 0;
    for (id, o) in &results {
        println!("{id} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if fast {
        println!("A1-A3 skipped (DEPTHPATCH_ACCEPTANCE=fast)");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
