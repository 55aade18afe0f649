//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panel_inspect::classify::{
    evaluate_classifier, loss_and_grad, train_reference_classifier, ChannelMode, ChannelStack, ClassCatalogue,
    DefectClassifier, EvalSample, PrepareParams, TrainParams,
};
use panel_inspect::detect::{detect, BinaryPatchClassifier, DetectParams, OracleClassifier};
use panel_inspect::impact::{evaluate_impact, load_layout_str, LayoutFormat};
use panel_inspect::periodicity::analyze_default;
use panel_inspect::pipeline::{estimate_period, Models, PipelineConfig};
use panel_inspect::raster::{Pixels, Raster};
use panel_inspect::reference::{
    autolabel_dataset, build_reference, centered_patch, AutolabelPolicy, LabeledImage, PatchLabel, Split,
    SurrogateHeatmap,
};
use panel_inspect::selfref::{mask_to_image_frame, ncc_map, segment_against_template, segment_region};
use panel_inspect::service::node::{MemoryImages, PipelineExecutor};
use panel_inspect::service::sim::{run_soak, sim_descriptor, MaskOracle, SoakConfig};
use panel_inspect::service::Scope;
use panel_inspect::synth::{
    gen_background, gen_corpus, inject_defect, CorpusSpec, DefectClass, DefectSpec, PanelSpec, Sample,
};
use panel_inspect::workflow::{train_classifier, train_detector};
use panel_inspect::{BBox, InspectionImage};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// Independent oracles.

fn centroid(mask: &Raster<bool>) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

fn contains(b: BBox, (cx, cy): (f64, f64)) -> bool {
    cx >= b.x as f64 && cx < (b.x + b.width) as f64 && cy >= b.y as f64 && cy < (b.y + b.height) as f64
}

fn iou(a: &Raster<bool>, b: &Raster<bool>) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            i += (p && q) as usize;
            u += (p || q) as usize;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn fpr(pred: &Raster<bool>, truth: &Raster<bool>) -> f64 {
    let (mut fp, mut neg) = (0usize, 0usize);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if !truth.get(x, y) {
                neg += 1;
                fp += pred.get(x, y) as usize;
            }
        }
    }
    fp as f64 / neg.max(1) as f64
}

fn brute_ncc(g: &Raster<u8>, t: BBox, x: usize, y: usize) -> f64 {
    let n = t.area() as f64;
    let a: Vec<f64> = (0..t.height)
        .flat_map(|v| (0..t.width).map(move |u| (u, v)))
        .map(|(u, v)| g.get(t.x + u, t.y + v) as f64)
        .collect();
    let b: Vec<f64> = (0..t.height)
        .flat_map(|v| (0..t.width).map(move |u| (u, v)))
        .map(|(u, v)| g.get(x + u, y + v) as f64)
        .collect();
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
    let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
    if va <= 1e-9 || vb <= 1e-9 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// 4-connected component labels (0 is background) and the component count.
fn components(m: &Raster<bool>) -> (Vec<usize>, usize) {
    let (w, h) = (m.width(), m.height());
    let mut label = vec![0usize; w * h];
    let mut n = 0;
    for start in 0..w * h {
        if label[start] != 0 || !m.get(start % w, start / w) {
            continue;
        }
        n += 1;
        label[start] = n;
        let mut q = VecDeque::from([start]);
        while let Some(i) = q.pop_front() {
            let (x, y) = (i % w, i / w);
            let nb = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in nb.into_iter().flatten() {
                if label[j] == 0 && m.get(j % w, j / w) {
                    label[j] = n;
                    q.push_back(j);
                }
            }
        }
    }
    (label, n)
}

/// True when some pixel of `a` and some pixel of `b` share a component of `m`.
fn linked(m: &Raster<bool>, a: &Raster<bool>, b: &Raster<bool>) -> bool {
    let (label, _) = components(m);
    let of = |r: &Raster<bool>| -> BTreeSet<usize> {
        r.data().iter().zip(&label).filter(|(&p, _)| p).map(|(_, &l)| l).collect()
    };
    !of(a).is_disjoint(&of(b))
}

fn scale(img: &InspectionImage, f: f64) -> InspectionImage {
    let s = |v: u8| (v as f64 * f).round().clamp(0.0, 255.0) as u8;
    let pixels = match &img.pixels {
        Pixels::Gray(r) => Pixels::Gray(r.map(s)),
        Pixels::Rgb(r) => Pixels::Rgb(r.map(|p| [s(p[0]), s(p[1]), s(p[2])])),
    };
    InspectionImage::new(pixels, img.meta.clone()).expect("same dims")
}

/// Largest shift that leaves every channel value inside 0..=255.
fn shift_headroom(img: &InspectionImage) -> i32 {
    let rgb = img.to_rgb();
    let (lo, hi) = rgb.data().iter().flatten().fold((255u8, 0u8), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    lo.min(255 - hi) as i32
}

fn gt_patch(s: &Sample) -> BBox {
    let (cx, cy) = centroid(s.mask.as_ref().expect("defect sample"));
    centered_patch(cx, cy, s.image.width(), s.image.height())
}

// Criteria.

fn period_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let periods = [64, 96, 128, 192, 256];
    let mut hits = 0;
    for i in 0..200 {
        let t = periods[i % periods.len()];
        let mut spec = PanelSpec::standard(t, 5000 + i as u64);
        spec.noise_sigma = rng.random_range(0.0..=5.0);
        spec.brightness_jitter = 0.2;
        let img = gen_background(&spec).expect("render");
        if analyze_default(&img).is_ok_and(|e| e.period.abs_diff(t) <= 1) {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hits as f64 / 200.0 >= 0.99 && secs < 60.0,
        format!("{hits}/200 within 1 px in {secs:.1} s (need >= 99%, < 60 s)"),
    )
}

fn reconstruction_identity() -> Outcome {
    let mut ok = 0;
    let mut worst = 0i32;
    for i in 0..50u64 {
        let t = [64, 96, 128, 192, 256][i as usize % 5];
        let img = gen_background(&PanelSpec::standard(t, 700 + i).noiseless()).expect("render");
        let Ok(est) = analyze_default(&img) else { continue };
        let Ok(r) = build_reference(&img, &est) else { continue };
        let g = img.to_gray();
        let cols = est.period * est.count;
        let mut max = 0i32;
        for y in 0..g.height() {
            for x in 0..cols {
                max = max.max((g.get(x, y) as i32 - r.pixels.get(x, y) as i32).abs());
            }
        }
        worst = worst.max(max);
        ok += (max == 0 && est.period == t) as usize;
    }
    outcome(ok == 50, format!("{ok}/50 with max |I - R| = 0 (worst {worst})"))
}

fn autolabel_precision(corpus: &[Sample]) -> Outcome {
    let labeled: Vec<LabeledImage> = corpus
        .iter()
        .map(|s| LabeledImage {
            image: &s.image,
            label: Some(if s.mask.is_some() { PatchLabel::Defect } else { PatchLabel::NoDefect }),
        })
        .collect();
    let out = autolabel_dataset(&labeled, &SurrogateHeatmap::default(), &AutolabelPolicy::default());
    let by_id: HashMap<&str, &Sample> = corpus.iter().map(|s| (s.image.meta.image_id.as_str(), s)).collect();
    let correct = out
        .candidates
        .iter()
        .filter(|c| contains(c.patch, centroid(by_id[c.image_id.as_str()].mask.as_ref().expect("defect"))))
        .count();
    let n = out.candidates.len();
    let p = correct as f64 / n.max(1) as f64;
    outcome(
        n > 0 && p >= 0.85,
        format!("precision {p:.3} ({correct}/{n} candidates, {} images skipped; need >= 0.85)", out.skipped.len()),
    )
}

#[derive(Default)]
struct Rates {
    located: usize,
    argmax_located: usize,
    defects: usize,
    none: usize,
    clean: usize,
}

impl Rates {
    fn add(&mut self, det: &dyn BinaryPatchClassifier, s: &Sample, p: &DetectParams) {
        let d = detect(det, &s.image, p).expect("detect");
        let kept = d.regions.first().map(|r| r.bbox);
        match &s.mask {
            Some(m) => {
                let c = centroid(m);
                self.defects += 1;
                self.located += kept.is_some_and(|b| contains(b, c)) as usize;
                self.argmax_located += d.selection.patch.is_some_and(|b| contains(b, c)) as usize;
            }
            None => {
                self.clean += 1;
                self.none += kept.is_none() as usize;
            }
        }
    }

    fn ok(&self, need: f64) -> bool {
        self.located as f64 >= need * self.defects as f64 && self.none as f64 >= need * self.clean as f64
    }

    fn describe(&self) -> String {
        format!(
            "{}/{} located ({} by the raw argmax window), {}/{} none",
            self.located, self.defects, self.argmax_located, self.none, self.clean
        )
    }
}

/// Localization is judged on the kept merged region, which contains every
/// window above threshold in its cluster.
fn detection() -> Outcome {
    let p = DetectParams::default();
    let spec = CorpusSpec {
        n_images: 1000,
        defect_free_fraction: 0.5,
        ..CorpusSpec::standard()
    };
    let corpus = gen_corpus(&spec, 13).expect("corpus");

    let mut oracle = Rates::default();
    for s in &corpus {
        let empty = Raster::filled(s.image.width(), s.image.height(), false);
        oracle.add(&OracleClassifier::new(s.mask.as_ref().unwrap_or(&empty)), s, &p);
    }

    let train: Vec<&Sample> = corpus.iter().filter(|s| s.split != Split::Test).collect();
    let defects: Vec<(&InspectionImage, BBox)> =
        train.iter().filter(|s| s.mask.is_some()).map(|s| (&s.image, gt_patch(s))).collect();
    let clean: Vec<&InspectionImage> = train.iter().filter(|s| s.mask.is_none()).map(|s| &s.image).collect();
    let (det, _) = train_detector(&defects, &clean, &TrainParams::default(), 7, "acceptance").expect("train");
    let mut trained = Rates::default();
    for s in corpus.iter().filter(|s| s.split == Split::Test) {
        trained.add(&det, s, &p);
    }

    outcome(
        oracle.ok(0.99) && trained.ok(0.90),
        format!(
            "oracle {} (need >= 99%); trained {} (need >= 90%)",
            oracle.describe(),
            trained.describe()
        ),
    )
}

fn segmentation() -> Outcome {
    let cfg = PipelineConfig::default();
    let corpus = gen_corpus(
        &CorpusSpec {
            n_images: 120,
            ..CorpusSpec::standard()
        },
        11,
    )
    .expect("corpus");
    let mut ious = Vec::new();
    let mut fprs = Vec::new();
    for s in corpus.iter().filter(|s| s.mask.is_some()) {
        let truth = s.mask.as_ref().expect("mask");
        let d = detect(&OracleClassifier::new(truth), &s.image, &cfg.detect).expect("detect");
        let Some(region) = d.regions.first() else {
            ious.push(0.0);
            continue;
        };
        let b = region.bbox;
        let est = estimate_period(&s.image, &cfg).expect("period");
        let seg = segment_region(&s.image, b, &est, &cfg.matching, &cfg.diff).expect("segment");
        let full = mask_to_image_frame(&seg.mask, b, s.image.width(), s.image.height());
        ious.push(iou(&full, truth));
        fprs.push(fpr(&full, truth));
    }
    ious.sort_by(|a, b| a.total_cmp(b));
    let median = ious[ious.len() / 2];
    let mean_fpr = fprs.iter().sum::<f64>() / fprs.len().max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(16..48), rng.random_range(12..36));
        let (tw, th) = (rng.random_range(2..w / 2), rng.random_range(2..h / 2));
        let g = Raster::from_fn(w, h, |_, _| rng.random::<u8>());
        let t = BBox::new(rng.random_range(0..=w - tw), rng.random_range(0..=h - th), tw, th);
        let fast = ncc_map(&g, t);
        for y in 0..=h - th {
            for x in 0..=w - tw {
                worst = worst.max((fast.get(x, y) - brute_ncc(&g, t, x, y)).abs());
            }
        }
    }
    outcome(
        median >= 0.7 && mean_fpr <= 0.01 && worst <= 1e-6,
        format!(
            "median IoU {median:.3} over {} defects (need >= 0.7), FP pixel rate {mean_fpr:.2e} (need <= 1%), NCC max |fast - brute| {worst:.1e} on 50 instances (need <= 1e-6)",
            ious.len()
        ),
    )
}

fn robustness() -> Outcome {
    let cfg = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    let (mut identical, mut total, mut min_d, mut skipped) = (0, 0, i32::MAX, 0);
    let (mut fpr_base, mut fpr_jit) = (0.0, 0.0);
    let (mut i, mut used) = (0u64, 0);
    while used < 20 {
        i += 1;
        let t = [64, 96, 128][i as usize % 3];
        let mut spec = PanelSpec::standard(t, 900 + i);
        spec.brightness_jitter = 0.0;
        spec.hue_jitter = 0.0;
        let bg = gen_background(&spec).expect("render");
        let template = gen_background(&PanelSpec {
            seed: 50_000 + i,
            ..spec.clone()
        })
        .expect("render");
        let class = DefectClass::ALL[i as usize % DefectClass::ALL.len()];
        let d = DefectSpec::random(class, rng.random_range(200.0..800.0), rng.random_range(150.0..600.0), &mut rng);
        let (img, truth, _) = inject_defect(&bg, &d).expect("inject");
        if shift_headroom(&img) < 5 {
            skipped += 1;
            continue;
        }
        used += 1;
        let b = centered_patch(centroid(&truth).0, centroid(&truth).1, img.width(), img.height());

        let est = estimate_period(&img, &cfg).expect("period");
        let m0 = segment_region(&img, b, &est, &cfg.matching, &cfg.diff).expect("segment");
        let d = shift_headroom(&img).min(15);
        min_d = min_d.min(d);
        for delta in [-d, d] {
            let m1 = segment_region(&img.shifted(delta), b, &est, &cfg.matching, &cfg.diff).expect("segment");
            total += 1;
            identical += (m0.mask == m1.mask) as usize;
        }

        let frame = |m| mask_to_image_frame(&m, b, img.width(), img.height());
        let base = segment_against_template(&img, &template, b, &cfg.diff).expect("template");
        fpr_base += fpr(&frame(base), &truth);
        let f = if i % 2 == 0 { 0.8 } else { 1.2 };
        let jit = segment_against_template(&scale(&img, f), &template, b, &cfg.diff).expect("template");
        fpr_jit += fpr(&frame(jit), &truth);
    }
    let (fb, fj) = (fpr_base / 20.0, fpr_jit / 20.0);
    outcome(
        identical == total && min_d > 0 && fj > 0.0 && fj >= 10.0 * fb,
        format!(
            "{identical}/{total} self-reference masks bit-identical under unclipped shifts of +/-{min_d}..15 ({skipped} images without headroom skipped); template FP rate {fb:.2e} -> {fj:.2e} under +/-20% jitter ({:.0}x, need >= 10x)",
            fj / fb.max(f64::MIN_POSITIVE)
        ),
    )
}

fn channel_modes() -> Outcome {
    let cfg = PipelineConfig::default();
    let corpus = gen_corpus(&CorpusSpec::background_bias(600), 17).expect("corpus");
    let cat = ClassCatalogue::new(DefectClass::catalogue()).expect("catalogue");
    let patches = |split: Split| -> Vec<(&InspectionImage, BBox, usize)> {
        corpus
            .iter()
            .filter(|s| s.split == split && s.mask.is_some())
            .map(|s| (&s.image, gt_patch(s), cat.index(s.class().expect("class").name()).expect("known")))
            .collect()
    };
    let train = patches(Split::Train);
    let test = patches(Split::Test);
    let ests: Vec<_> = test.iter().map(|t| estimate_period(t.0, &cfg).expect("period")).collect();
    let samples: Vec<EvalSample> = test
        .iter()
        .zip(&ests)
        .map(|(t, e)| EvalSample {
            image_id: t.0.meta.image_id.clone(),
            image: t.0,
            defect_box: t.1,
            truth: t.2,
            estimate: e,
        })
        .collect();
    let modes = [ChannelMode::Rgb, ChannelMode::RgbG, ChannelMode::RgbS];
    let models: Vec<_> = modes
        .iter()
        .map(|&m| {
            train_classifier(&train, &cat, m, &cfg, &TrainParams::default(), 7, m.name(), "1")
                .expect("train")
                .0
        })
        .collect();
    let refs: Vec<&dyn DefectClassifier> = models.iter().map(|m| m as &dyn DefectClassifier).collect();
    let prep = PrepareParams {
        matching: cfg.matching,
        diff: cfg.diff,
    };
    let table = evaluate_classifier(&refs, &samples, &cat, &prep).expect("evaluate");
    let (rgb, rgb_g) = (table.overall[0], table.overall[1]);
    let (t_rgb, t_rgb_s) = (table.time_ms[0], table.time_ms[2]);
    outcome(
        rgb_g >= rgb + 2.0 && t_rgb < t_rgb_s,
        format!(
            "overall RGB {rgb:.2}, RGB_G {rgb_g:.2} (need >= RGB + 2); time RGB {t_rgb:.2} ms < RGB_S {t_rgb_s:.2} ms on {} test patches",
            samples.len()
        ),
    )
}

fn classifier_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, dim, k, l2) = (40, 12, 5, 1e-3);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y: Vec<usize> = (0..n).map(|i| i % k).collect();
    let w: Vec<f64> = (0..k * (dim + 1)).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (_, analytic) = loss_and_grad(&w, &x, &y, k, l2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[i] += h;
        wm[i] -= h;
        let numeric = (loss_and_grad(&wp, &x, &y, k, l2).0 - loss_and_grad(&wm, &x, &y, k, l2).0) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }

    let cat = ClassCatalogue::new(DefectClass::catalogue()).expect("catalogue");
    let classes = cat.len();
    let mut sum_err: f64 = 0.0;
    let mut scored = 0;
    for mode in [ChannelMode::Rgb, ChannelMode::RgbG, ChannelMode::RgbS, ChannelMode::Rgb2] {
        let stack = |rng: &mut ChaCha8Rng| ChannelStack {
            mode,
            size: 224,
            data: (0..mode.channels() * 224 * 224).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        };
        let train: Vec<(ChannelStack, usize)> = (0..classes * 10).map(|i| (stack(&mut rng), i % classes)).collect();
        let params = TrainParams {
            max_epochs: 20,
            ..TrainParams::default()
        };
        let (model, _) = train_reference_classifier(&train, &cat, mode, &params, 3, "random", "1").expect("train");
        for _ in 0..250 {
            let p = model.predict(&stack(&mut rng)).expect("predict");
            sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
            scored += 1;
        }
    }
    outcome(
        worst < 1e-4 && sum_err <= 1e-6 && scored == 1000,
        format!("gradient max relative error {worst:.2e} (need < 1e-4); max |sum p - 1| {sum_err:.1e} over {scored} stacks"),
    )
}

const SCENE: &str = r#"
width = 200
height = 100

[[regions]]
name = "line-a"
role = "line"
polygons = [[[0, 20], [200, 20], [200, 30], [0, 30]]]

[[regions]]
name = "line-b"
role = "line"
polygons = [[[0, 50], [200, 50], [200, 60], [0, 60]]]

[[rules]]
rule_id = "short-ab"
verdict_label = "short"
severity = "critical"
predicate = { kind = "connects", a = "line-a", b = "line-b" }

[[rules]]
rule_id = "cut-a"
verdict_label = "cut"
severity = "major"
predicate = { kind = "severs", region = "line-a" }

[[rules]]
rule_id = "cut-b"
verdict_label = "cut"
severity = "major"
predicate = { kind = "severs", region = "line-b" }
"#;

fn impact_scenes() -> Outcome {
    let layout = load_layout_str(SCENE, LayoutFormat::Toml, std::path::Path::new(".")).expect("layout");
    let (w, h) = (200, 100);
    let rect = |x0: usize, y0: usize, x1: usize, y1: usize| {
        Raster::from_fn(w, h, move |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    };
    let a = &layout.regions[0].mask;
    let b = &layout.regions[1].mask;
    let scenes = [
        ("short", rect(90, 25, 96, 55), BTreeSet::from(["short-ab"])),
        ("cut", rect(100, 15, 104, 35), BTreeSet::from(["cut-a"])),
        ("clean", rect(10, 70, 30, 90), BTreeSet::new()),
    ];
    let mut ok = 0;
    let mut notes = Vec::new();
    for (name, mask, intended) in &scenes {
        let or = |p: &Raster<bool>, q: &Raster<bool>| Raster::from_fn(w, h, |x, y| p.get(x, y) || q.get(x, y));
        let minus = |p: &Raster<bool>| Raster::from_fn(w, h, |x, y| p.get(x, y) && !mask.get(x, y));
        let mut expected = BTreeSet::new();
        let lines = or(a, b);
        if !linked(&lines, a, b) && linked(&or(&lines, mask), a, b) {
            expected.insert("short-ab");
        }
        if components(&minus(a)).1 > components(a).1 {
            expected.insert("cut-a");
        }
        if components(&minus(b)).1 > components(b).1 {
            expected.insert("cut-b");
        }
        let verdicts = evaluate_impact(mask, &layout).expect("impact");
        let got: BTreeSet<&str> = verdicts.iter().filter(|v| v.triggered).map(|v| v.rule_id.as_str()).collect();
        if got == expected && expected == *intended {
            ok += 1;
        } else {
            notes.push(format!("{name}: got {got:?}, oracle {expected:?}"));
        }
    }
    outcome(ok == 3, format!("{ok}/3 scenes match the connected-component oracle {}", notes.join("; ")))
}

fn service_soak() -> Outcome {
    let start = Instant::now();
    let corpus = gen_corpus(
        &CorpusSpec {
            n_images: 200,
            defect_free_fraction: 0.3,
            ..CorpusSpec::standard()
        },
        41,
    )
    .expect("corpus");
    let store = Arc::new(MemoryImages::default());
    let mut oracle = MaskOracle::default();
    let mut images = Vec::new();
    for s in &corpus {
        let id = s.image.meta.image_id.clone();
        store.insert(&id, s.image.encode_png().expect("png"));
        if let Some(m) = &s.mask {
            oracle.insert(&id, m);
        }
        images.push((id.clone(), id));
    }
    let oracle: Arc<dyn BinaryPatchClassifier> = Arc::new(oracle);
    let executor = PipelineExecutor::with_factory(
        store,
        PipelineConfig::default(),
        Box::new(move |_| {
            Ok(Models {
                detector: oracle.clone(),
                classifier: None,
                layout: None,
            })
        }),
    );
    let r = run_soak(
        Arc::new(executor),
        sim_descriptor(Scope::new("A", "X")),
        &images,
        &SoakConfig::default(),
        3,
    )
    .expect("soak");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.passed(200) && r.crashes > 0 && r.outages > 0 && r.deliveries >= 200 && secs < 300.0,
        format!(
            "{} done, {} failed, {} lost, {} unique of {} deliveries, {} crashes, {} outages, {} routing / {} FIFO violations, second plan {} actions, {secs:.0} s (need < 300 s)",
            r.done,
            r.failed,
            r.lost.len(),
            r.unique_outcomes,
            r.deliveries,
            r.crashes,
            r.outages,
            r.routing_violations,
            r.fifo_violations,
            r.second_plan_actions
        ),
    )
}

fn main() {
    let autolabel_corpus = || gen_corpus(&CorpusSpec::standard(), 7).expect("corpus");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("period-recovery", Box::new(period_recovery)),
        ("reconstruction-identity", Box::new(reconstruction_identity)),
        ("autolabel-precision", Box::new(move || autolabel_precision(&autolabel_corpus()))),
        ("detection", Box::new(detection)),
        ("segmentation", Box::new(segmentation)),
        ("robustness", Box::new(robustness)),
        ("channel-modes", Box::new(channel_modes)),
        ("classifier-correctness", Box::new(classifier_correctness)),
        ("impact-scenes", Box::new(impact_scenes)),
        ("service-soak", Box::new(service_soak)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        failed += !o.pass as usize;
        println!(
            "{} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
