//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to stderr
//! (outside the test harness capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tilt::checkpoint::Checkpoint;
use tilt::config::{preset, AugmentConfig, RunConfig, SynthKind, PRESETS};
use tilt::layout::synth::{synth_form, FormSpec, Relation};
use tilt::layout::{BBox, Document, GrayImage, Page, TaskInstance, TaskKind, Token, GRID_H, GRID_W};
use tilt::metrics::{anls, entity_f1, levenshtein};
use tilt::model::{loss_graph, Tilt, TiltConfig};
use tilt::numerics::{gradcheck, softmax_rows, Bound, ParamStore, Schedule, Tape, Tensor};
use tilt::objectives::{mask_budget, reconstruct, select_spans, span_corrupt, to_seq2seq, IMAGE_MASK_P};
use tilt::spatial_bias::{build_bias, bucket_1d, bucket_axis, spatial_scale, BiasParams};
use tilt::train::{cmd_ablate, finetune_on, synth_docs, train_exact_match, Variant};
use tilt::vision::{
    apply_affine, bbox_cells, init_vision, mask_image_regions, unet_forward, AffineBounds, AffineParams, VisionConfig,
};

fn verdict(n: u32, what: &str, ok: bool, detail: impl std::fmt::Display) -> bool {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2}: {tag}  {what}  ({detail})");
    ok
}

fn tiny_model() -> TiltConfig {
    TiltConfig {
        d_model: 32,
        num_heads: 2,
        d_ff: 48,
        enc_layers: 1,
        dec_layers: 1,
        max_src_len: 96,
        max_tgt_len: 8,
        vision: VisionConfig {
            input_w: 32,
            input_h: 24,
            channels: vec![2, 3, 3],
            out_stage: 2,
            out_channels: 4,
        },
        ..Default::default()
    }
}

#[test]
fn criterion_01_gradient_fidelity() {
    let t0 = Instant::now();
    let mut model = Tilt::<f64>::new(tiny_model(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // zero conv biases over blank raster put ReLUs exactly on their kinks
    let shapes: Vec<(String, Vec<usize>)> =
        model.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in shapes {
        if name.ends_with(".b") {
            *model.params.get_mut(&name).unwrap() = Tensor::randn(&shape, 0.1, &mut rng);
        }
    }
    let doc = synth_form(5, &FormSpec::pairs(&[("A", "1"), ("B", "2"), ("C", "3")], Relation::Below)).unwrap();
    let ex = to_seq2seq(&doc, &TaskInstance::new(TaskKind::Qa, "below B?", &["2"])).unwrap();
    let prep = model.prepare(&ex, true).unwrap();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();

    let mut probes = Vec::new();
    for (i, n) in names.iter().enumerate() {
        if n.starts_with("bias.") || n.starts_with("unet.") {
            let len = inputs[i].len();
            probes.extend(sample(&mut rng, len, len.min(4)).into_iter().map(|j| (i, j)));
        }
    }
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    while probes.len() < 240 {
        let mut flat = rng.random_range(0..total);
        let mut i = 0;
        while flat >= sizes[i] {
            flat -= sizes[i];
            i += 1;
        }
        probes.push((i, flat));
    }
    let covers_bias = probes.iter().any(|&(i, _)| names[i].starts_with("bias."));
    let covers_unet = probes.iter().any(|&(i, _)| names[i].starts_with("unet."));

    let cfg = model.config.clone();
    let report = gradcheck::check(
        |tape, vars| {
            let p = Bound::from_parts(&names, vars)?;
            loss_graph(tape, &p, &cfg, &prep, &mut None)
        },
        &inputs,
        // small enough that no probe steps across a ReLU or max-pool switch
        1e-6,
        Some(&probes),
    )
    .unwrap();
    let elapsed = t0.elapsed();
    let worst = report.max_rel_err();
    let ok = worst < 1e-3 && report.entries.len() >= 200 && covers_bias && covers_unet && elapsed < Duration::from_secs(120);
    assert!(verdict(
        1,
        "gradient fidelity",
        ok,
        format!("{} probes, max rel err {worst:.2e}, {elapsed:.1?}", report.entries.len())
    ));
}

/// Floating-point transcription of the bucket rule.
fn bucket_reference(d: i64, max_distance: f64) -> usize {
    let offset = if d > 0 { 16 } else { 0 };
    let a = d.unsigned_abs() as f64;
    if a < 8.0 {
        return offset + a as usize;
    }
    let v = 8.0 + (8.0 * (a / 8.0).ln() / (max_distance / 8.0).ln()).floor();
    offset + (v as usize).min(15)
}

#[test]
fn criterion_02_bucket_oracle() {
    let t0 = Instant::now();
    let mut matches = true;
    let mut monotone = true;
    let mut reach_1d = [false; 32];
    let mut reach_axis = [false; 32];
    for d in -1024..=1024i64 {
        let (b1, ba) = (bucket_1d(d), bucket_axis(d));
        matches &= b1 == bucket_reference(d, 128.0) && ba == bucket_reference(d, 64.0);
        reach_1d[b1] = true;
        reach_axis[ba] = true;
        if d > 0 {
            monotone &= bucket_1d(d + 1) >= b1 && bucket_axis(d + 1) >= ba;
        } else {
            monotone &= bucket_1d(d - 1) >= b1 && bucket_axis(d - 1) >= ba;
        }
    }
    let n1 = reach_1d.iter().filter(|&&r| r).count();
    let na = reach_axis.iter().filter(|&&r| r).count();
    let elapsed = t0.elapsed();
    let ok = matches && monotone && n1 == 32 && na == 32 && elapsed < Duration::from_secs(1);
    let missing: Vec<usize> = (0..32).filter(|&b| !reach_1d[b]).collect();
    assert!(verdict(
        2,
        "bucket oracle",
        ok,
        format!(
            "oracle match {matches}, monotone {monotone}, reachable 1d {n1} axis {na}, unreachable {missing:?}, {elapsed:.1?}"
        )
    ));
}

#[test]
fn criterion_03_bias_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = BiasParams::<f64>::random(4, 1.0, &mut rng);
    let fixture = [(3usize, 2usize), (10, 2), (3, 9), (17, 14), (6, 20)];
    let base = build_bias(&fixture, &params).unwrap();
    let (max_x, max_y) = (fixture.iter().map(|c| c.0).max().unwrap(), fixture.iter().map(|c| c.1).max().unwrap());
    let (min_x, min_y) = (fixture.iter().map(|c| c.0).min().unwrap(), fixture.iter().map(|c| c.1).min().unwrap());
    let mut shifts = 0;
    let mut invariant = true;
    for dx in -(min_x as i64)..(GRID_W - max_x) as i64 {
        for dy in -(min_y as i64)..(GRID_H - max_y) as i64 {
            let moved: Vec<(usize, usize)> = fixture
                .iter()
                .map(|&(x, y)| ((x as i64 + dx) as usize, (y as i64 + dy) as usize))
                .collect();
            invariant &= build_bias(&moved, &params).unwrap() == base;
            shifts += 1;
        }
    }

    let logits = Tensor::<f64>::randn(&[16, 24], 3.0, &mut rng);
    let p = softmax_rows(&logits).unwrap();
    let mut worst: f64 = 0.0;
    for c in [-1000.0, -3.5, 0.25, 7.0, 1000.0] {
        let shifted = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|v| v + c).collect()).unwrap();
        let q = softmax_rows(&shifted).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let ok = invariant && worst < 1e-6;
    assert!(verdict(
        3,
        "bias invariances",
        ok,
        format!("{shifts} translations invariant {invariant}, softmax shift max diff {worst:.1e}")
    ));
}

/// Max over every cell whose area meets the box; a box thinner than a cell edge
/// falls back to the cell holding its corner.
fn roi_oracle(fm: &Tensor<f32>, b: &BBox, page: (f64, f64)) -> Vec<f32> {
    let (c, h, w) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
    let (cw, ch) = (page.0 / w as f64, page.1 / h as f64);
    let covered = |i: usize, size: f64, lo: f64, hi: f64, cells: usize| {
        let meets = (i as f64) * size < hi && (i as f64 + 1.0) * size > lo;
        let corner = ((lo / size).floor() as usize).min(cells - 1);
        meets || (!(0..cells).any(|j| (j as f64) * size < hi && (j as f64 + 1.0) * size > lo) && i == corner)
    };
    (0..c)
        .map(|k| {
            let mut best = f32::NEG_INFINITY;
            for y in (0..h).filter(|&y| covered(y, ch, b.y0, b.y1, h)) {
                for x in (0..w).filter(|&x| covered(x, cw, b.x0, b.x1, w)) {
                    best = best.max(fm.data()[k * h * w + y * w + x]);
                }
            }
            best
        })
        .collect()
}

#[test]
fn criterion_04_vision_shapes() {
    let cfg = VisionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    init_vision(&cfg, 8, &mut store, &mut rng).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::randn(&[1, 384, 512], 1.0, &mut rng));
    let fm = unet_forward(&mut tape, &p, &cfg, x).unwrap();
    let shape = tape.value(fm).shape().to_vec();
    let shape_ok = shape == [128, 48, 64];

    let mut agree = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=12usize), rng.random_range(1..=16usize));
        let c = rng.random_range(1..=4usize);
        let fm = Tensor::<f32>::randn(&[c, h, w], 1.0, &mut rng);
        let x0 = rng.random_range(0.0..512.0);
        let y0 = rng.random_range(0.0..384.0);
        let b = BBox::new(
            x0,
            y0,
            (x0 + rng.random_range(0.0..200.0)).min(512.0),
            (y0 + rng.random_range(0.0..150.0)).min(384.0),
        );
        let rect = bbox_cells(&b, 512.0, 384.0, w, h);
        let mut tape = Tape::new();
        let v = tape.constant(fm.clone());
        let out = tape.roi_pool(v, &[Some(rect)]).unwrap();
        if tape.value(out).data() == roi_oracle(&fm, &b, (512.0, 384.0)).as_slice() {
            agree += 1;
        }
    }
    let ok = shape_ok && agree == 1000;
    assert!(verdict(
        4,
        "vision shapes",
        ok,
        format!("feature map {shape:?} (C,H,W), roi oracle {agree}/1000")
    ));
}

fn image_doc(rng: &mut ChaCha8Rng) -> Document {
    let mut img = GrayImage::filled(128, 96, 1.0);
    let mut tokens = Vec::new();
    for i in 0..6 {
        let x0 = rng.random_range(0.0..400.0);
        let y0 = rng.random_range(0.0..340.0);
        let b = BBox::new(x0, y0, x0 + rng.random_range(8.0..100.0), y0 + rng.random_range(8.0..40.0));
        img.fill_rect(b.x0 / 4.0, b.y0 / 4.0, b.x1 / 4.0, b.y1 / 4.0, 0.1);
        tokens.push(Token::word(format!("w{i}"), b));
    }
    Document {
        id: "aug".into(),
        page: Page {
            width: 512,
            height: 384,
            image: Some(img),
        },
        tokens,
        annotations: vec![],
    }
}

#[test]
fn criterion_05_augmentation_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bounds = AffineBounds::default();
    let (pw, ph) = (512.0, 384.0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = bounds.sample(&mut rng);
        let in_bounds = a.rotation_deg.abs() <= bounds.rotation_deg
            && a.shear_deg.abs() <= bounds.shear_deg
            && (bounds.scale_min..=bounds.scale_max).contains(&a.scale)
            && a.tx.abs() <= bounds.translate
            && a.ty.abs() <= bounds.translate;
        assert!(in_bounds, "{a:?}");
        // two parallel segments with a random direction and offset
        let (ux, uy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let p0 = (rng.random_range(0.0..pw), rng.random_range(0.0..ph));
        let q0 = (rng.random_range(0.0..pw), rng.random_range(0.0..ph));
        let len = rng.random_range(10.0..300.0);
        let seg = |p: (f64, f64)| {
            let s = a.map_point(p.0, p.1, pw, ph);
            let e = a.map_point(p.0 + ux * len, p.1 + uy * len, pw, ph);
            (e.0 - s.0, e.1 - s.1)
        };
        let (d1, d2) = (seg(p0), seg(q0));
        let sin = (d1.0 * d2.1 - d1.1 * d2.0) / (d1.0.hypot(d1.1) * d2.0.hypot(d2.1));
        worst = worst.max(sin.abs());
    }

    let doc = image_doc(&mut rng);
    let identity_ok = apply_affine(&doc, &AffineParams::IDENTITY) == doc;
    let scale_ok = spatial_scale(&doc, 1.0, 1.0) == doc;

    let img = doc.page.image.clone().unwrap();
    let boxes = vec![doc.tokens[0].bbox];
    let trials = 10_000;
    let hits = (0..trials)
        .filter(|_| mask_image_regions(&img, pw, ph, &boxes, IMAGE_MASK_P, &mut rng).blanked[0])
        .count();
    let rate = hits as f64 / trials as f64;

    let ok = worst < 1e-6 && identity_ok && scale_ok && (rate - 0.80).abs() <= 0.02;
    assert!(verdict(
        5,
        "augmentation geometry",
        ok,
        format!("parallelism |sin| max {worst:.1e}, identity no-op {identity_ok}, scale 1.0 no-op {scale_ok}, mask rate {rate:.4}")
    ));
}

fn random_document(rng: &mut ChaCha8Rng, id: usize) -> Document {
    const ALPHA: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,:$-";
    let n = rng.random_range(1..=120);
    let tokens = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=9);
            let text: String = (0..len).map(|_| ALPHA[rng.random_range(0..ALPHA.len())] as char).collect();
            let (col, row) = (i % 8, i / 8);
            let x0 = col as f64 * 60.0;
            let y0 = row as f64 * 24.0;
            Token::word(text, BBox::new(x0, y0, x0 + 50.0, y0 + 16.0))
        })
        .collect();
    Document {
        id: format!("rand-{id}"),
        page: Page::blank(512, 384),
        tokens,
        annotations: vec![],
    }
}

#[test]
fn criterion_06_corruption_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut restored, mut on_budget) = (0, 0);
    let (mut masked, mut total) = (0usize, 0usize);
    let docs = 10_000;
    for i in 0..docs {
        let doc = random_document(&mut rng, i);
        let spans = select_spans(&doc, &mut rng);
        let ex = span_corrupt(&doc, &spans).unwrap();
        if reconstruct(&ex.source, &ex.target).unwrap() == doc.text() {
            restored += 1;
        }
        let m: usize = spans.iter().map(|s| s.len).sum();
        if m == mask_budget(doc.tokens.len()) {
            on_budget += 1;
        }
        masked += m;
        total += doc.tokens.len();
    }
    let frac = masked as f64 / total as f64;
    let ok = restored == docs && on_budget == docs && (frac - 0.15).abs() <= 0.02;
    assert!(verdict(
        6,
        "corruption round-trip",
        ok,
        format!("restored {restored}/{docs}, on budget {on_budget}/{docs}, masked fraction {frac:.4}")
    ));
}

#[test]
fn criterion_07_overfit() {
    let t0 = Instant::now();
    let docs = synth_docs(SynthKind::LayoutQa, 0, 16, 2).unwrap();
    let mut cfg = RunConfig {
        steps: 2000,
        batch: 8,
        augment: AugmentConfig::none(),
        schedule: Schedule::Constant,
        early_stop_em: Some(1.0),
        eval_every: 50,
        ..Default::default()
    };
    cfg.optimizer.lr = 1e-3;
    let model = Tilt::new(cfg.model.clone(), 7).unwrap();
    let out = finetune_on(&cfg, model, docs.clone(), &mut std::io::sink()).unwrap();
    let em = train_exact_match(&out.model, &docs, cfg.max_answer_len).unwrap();
    let elapsed = t0.elapsed();
    let steps = out.losses.len();
    let ok = em >= 0.95 && steps <= 2000 && elapsed < Duration::from_secs(600);
    assert!(verdict(
        7,
        "overfit",
        ok,
        format!("train exact match {em:.3} after {steps} steps, {elapsed:.1?}")
    ));
}

#[test]
fn criterion_08_ablation_echo() {
    let t0 = Instant::now();
    let mut cfg = RunConfig {
        batch: 8,
        augment: AugmentConfig::none(),
        ..Default::default()
    };
    cfg.optimizer.weight_decay = 0.0;
    let report = cmd_ablate(&cfg, &mut std::io::sink()).unwrap();
    let elapsed = t0.elapsed();
    let mean = |k, v| report.get(k, v).unwrap().mean;
    let spatial_gap = mean(SynthKind::RelationQa, Variant::Full) - mean(SynthKind::RelationQa, Variant::NoSpatialBias);
    let vision_gap = mean(SynthKind::FontCue, Variant::Full) - mean(SynthKind::FontCue, Variant::NoVision);
    let table: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{:?}/{:?} {:.3}±{:.3}", r.task, r.variant, r.mean, r.half_range))
        .collect();
    let ok = spatial_gap >= 0.10 && vision_gap >= 0.05 && elapsed < Duration::from_secs(1800);
    assert!(verdict(
        8,
        "ablation echo",
        ok,
        format!(
            "spatial gap {:+.1} pts, vision gap {:+.1} pts, {elapsed:.0?}; {}",
            spatial_gap * 100.0,
            vision_gap * 100.0,
            table.join(", ")
        )
    ));
}

fn textbook_levenshtein(a: &[char], b: &[char]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + sub);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn criterion_09_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let alphabet: Vec<char> = "abcxyzé€ 1".chars().collect();
    let mut lev_ok = 0;
    for _ in 0..1000 {
        let word = |rng: &mut ChaCha8Rng| -> Vec<char> {
            (0..rng.random_range(0..14)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        let (a, b) = (word(&mut rng), word(&mut rng));
        let (sa, sb): (String, String) = (a.iter().collect(), b.iter().collect());
        if levenshtein(&sa, &sb) == textbook_levenshtein(&a, &b) {
            lev_ok += 1;
        }
    }

    let g = |s: &str| vec![s.to_string()];
    let worked = [
        (anls("abc", &g("abc")).unwrap(), 1.0),
        (anls("abc", &g("abd")).unwrap(), 2.0 / 3.0),
        (anls("abc", &g("xyz")).unwrap(), 0.0),
    ];
    let anls_ok = worked.iter().all(|(got, want)| (got - want).abs() < 1e-12);

    let mut f1_ok = 0;
    for _ in 0..500 {
        let fields = ["total", "date", "company", "address", "tax"];
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for _ in 0..rng.random_range(1..6) {
            let mut p = BTreeMap::new();
            let mut q = BTreeMap::new();
            for f in fields {
                let v = rng.random_range(0..4).to_string();
                if rng.random_bool(0.8) {
                    q.insert(f.to_string(), v.clone());
                }
                match rng.random_range(0..4) {
                    0 => {}
                    1 => {
                        p.insert(f.to_string(), "None".to_string());
                    }
                    2 => {
                        p.insert(f.to_string(), v);
                    }
                    _ => {
                        p.insert(f.to_string(), rng.random_range(0..4).to_string());
                    }
                }
            }
            preds.push(p);
            golds.push(q);
        }
        let r = entity_f1(&preds, &golds).unwrap();
        let harmonic = if r.precision + r.recall == 0.0 {
            0.0
        } else {
            2.0 * r.precision * r.recall / (r.precision + r.recall)
        };
        let p_ok = r.true_positives + r.false_positives == 0
            || (r.precision - r.true_positives as f64 / (r.true_positives + r.false_positives) as f64).abs() < 1e-12;
        let r_ok = r.true_positives + r.false_negatives == 0
            || (r.recall - r.true_positives as f64 / (r.true_positives + r.false_negatives) as f64).abs() < 1e-12;
        if (r.f1 - harmonic).abs() < 1e-12 && p_ok && r_ok {
            f1_ok += 1;
        }
    }
    let ok = lev_ok == 1000 && anls_ok && f1_ok == 500;
    assert!(verdict(
        9,
        "metric oracles",
        ok,
        format!("levenshtein {lev_ok}/1000, anls worked examples {anls_ok}, f1 identity {f1_ok}/500")
    ));
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let docs = synth_docs(SynthKind::LayoutQa, 40, 4, 2).unwrap();
    let mut cfg = RunConfig {
        model: tiny_model(),
        steps: 6,
        batch: 3,
        ..Default::default()
    };
    cfg.seed = 17;
    let run = || {
        let model = Tilt::new(cfg.model.clone(), cfg.seed).unwrap();
        finetune_on(&cfg, model, docs.clone(), &mut std::io::sink())
            .unwrap()
            .checkpoint()
            .unwrap()
            .to_bytes()
            .unwrap()
    };
    let (a, b) = (run(), run());
    let same_seed = a == b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint::from_bytes(&a).unwrap();
    ckpt.save(&path).unwrap();
    let on_disk = std::fs::read(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    let round_trip = on_disk == a && reloaded.to_bytes().unwrap() == a && reloaded.model == ckpt.model;

    // batch, steps, learning rate, schedule as published
    let table = [
        ("sroie-like", 8, 6_200, 1e-4, Schedule::Constant),
        ("wikiops-like", 64, 4_200, 1e-4, Schedule::Constant),
        ("docvqa-like", 64, 100_000, 2e-4, Schedule::Linear),
        ("cord-like", 8, 36_000, 2e-4, Schedule::Linear),
        ("rvlcdip-like", 1_024, 12_000, 1e-3, Schedule::Linear),
    ];
    let presets_ok = PRESETS.len() == table.len()
        && table.iter().all(|&(name, batch, steps, lr, schedule)| {
            let p = preset(name).unwrap();
            p.batch == batch && p.steps == steps && p.lr == lr && p.schedule == schedule
        });
    let ok = same_seed && round_trip && presets_ok;
    assert!(verdict(
        10,
        "determinism and persistence",
        ok,
        format!("same-seed checkpoints identical {same_seed}, save/load byte-equal {round_trip}, presets verbatim {presets_ok}")
    ));
}
