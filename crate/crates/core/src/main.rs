//! `panel-inspect`: every pipeline stage and the service from the command line.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use panel_inspect::classify::{
    evaluate_classifier, prepare_stack, ChannelMode, ClassCatalogue, DefectClassifier, EvalSample, LogisticModel,
    PrepareParams, ReferencePatchDetector, TrainParams,
};
use panel_inspect::config::RunConfig;
use panel_inspect::detect::{detect, BinaryPatchClassifier, OracleClassifier};
use panel_inspect::impact::load_layout;
use panel_inspect::periodicity::analyze;
use panel_inspect::pipeline::{estimate_period, inspect, inspection_mask, Models, PipelineConfig};
use panel_inspect::raster::{load_mask_png, save_mask_png};
use panel_inspect::reference::{
    autolabel_dataset, build_reference, diff_localize, frame_patches, write_manifest, CandidateStatus, LabeledImage,
    ManifestRecord, PatchLabel, Split, SurrogateHeatmap,
};
use panel_inspect::selfref::{mask_to_image_frame, segment_region};
use panel_inspect::service::http;
use panel_inspect::synth::{gen_dataset, ConfoundPolicy, CorpusSpec, DefectClass};
use panel_inspect::workflow::{class_patches, load_dataset, resolve, train_classifier, train_detector};
use panel_inspect::{BBox, Error, ErrorCode, InspectionImage};

/// Version of every `--json` document.
const SCHEMA_VERSION: u32 = 1;

fn error_code_help() -> String {
    let mut s = String::from("Exit status: 0 success, 1 operational error, 2 usage or configuration error.\n\nError codes:\n");
    for c in ErrorCode::ALL {
        s.push_str(&format!("  {:<32} {}\n", c.to_string(), c.describe()));
    }
    s
}

#[derive(Parser)]
#[command(name = "panel-inspect", version, about = "Defect inspection for periodic-texture panel images", after_long_help = error_code_help(), after_help = error_code_help())]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Overrides {
    /// Detection score threshold.
    #[arg(long, global = true)]
    theta_det: Option<f64>,
    /// Background match NCC threshold.
    #[arg(long, global = true)]
    theta_ncc: Option<f64>,
    /// Autolabel heatmap threshold.
    #[arg(long, global = true)]
    theta_hm: Option<f64>,
    /// Smallest period searched, in pixels.
    #[arg(long, global = true)]
    min_period: Option<usize>,
    /// Largest period searched, in pixels.
    #[arg(long, global = true)]
    max_period: Option<usize>,
    /// Channel mode: RGB, RGB_G, RGB_S or RGB2.
    #[arg(long, global = true)]
    mode: Option<ChannelMode>,
    /// Keep every merged region instead of the best one.
    #[arg(long, global = true)]
    multi_defect: bool,
    /// Seed for generation, splits and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DetectorArgs {
    /// Binary window classifier artifact.
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Ground-truth mask PNG used as an oracle window classifier.
    #[arg(long, conflicts_with = "detector")]
    oracle_mask: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate the horizontal period and classify period bands.
    EstimatePeriod { image: PathBuf },
    /// Build the referential image by tiling a clean period.
    Reconstruct {
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coarse defect regions from the referential difference, framed as patches.
    Localize { image: PathBuf },
    /// Score sliding windows and select the defect patch.
    Detect {
        image: PathBuf,
        #[command(flatten)]
        det: DetectorArgs,
    },
    /// Self-reference segmentation of a patch (given or detected).
    Segment {
        image: PathBuf,
        /// Patch as x,y,w,h.
        #[arg(long = "box", value_parser = parse_box)]
        patch: Option<BBox>,
        #[command(flatten)]
        det: DetectorArgs,
        /// Image-frame mask PNG.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify a patch (given or detected).
    Classify {
        image: PathBuf,
        #[arg(long = "box", value_parser = parse_box)]
        patch: Option<BBox>,
        #[command(flatten)]
        det: DetectorArgs,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Full pipeline on one image.
    Inspect {
        image: PathBuf,
        #[command(flatten)]
        det: DetectorArgs,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Impact layout (TOML or JSON).
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Image-frame union of all defect masks.
        #[arg(long)]
        out_mask: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with ground truth and a manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        defect_free: f64,
        /// Correlate classes with background recipes in the train split.
        #[arg(long)]
        bias: bool,
        #[arg(long, value_delimiter = ',')]
        periods: Option<Vec<usize>>,
    },
    /// Propose defect patches for defect-labeled images.
    Autolabel {
        #[arg(long)]
        manifest: PathBuf,
        /// Candidates, one JSON record per line.
        #[arg(long)]
        out: PathBuf,
        /// Training manifest of accepted candidates plus defect-free images.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Train the defect classifier (and optionally the window detector).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        detector_out: Option<PathBuf>,
        #[arg(long, default_value = "classifier")]
        model_id: String,
        #[arg(long, default_value = "1")]
        version: String,
    },
    /// Per-class and overall accuracy on the test split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Train each mode on the train split, then evaluate.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<ChannelMode>,
        /// Evaluate existing classifier artifacts.
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok(BBox::new(x, y, w, h)),
        _ => Err("expected x,y,w,h with positive w and h".into()),
    }
}

struct Output {
    schema: &'static str,
    json: Value,
    human: String,
}

fn out(schema: &'static str, value: impl Serialize, human: String) -> anyhow::Result<Output> {
    Ok(Output {
        schema,
        json: serde_json::to_value(value)?,
        human,
    })
}

fn envelope(schema: &str, key: &str, v: Value) -> Value {
    json!({ "schema": format!("panel-inspect/{schema}"), "version": SCHEMA_VERSION, key: v })
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    let t = &mut cfg.thresholds;
    if let Some(v) = o.theta_det {
        t.theta_det = v;
    }
    if let Some(v) = o.theta_ncc {
        t.theta_ncc = v;
    }
    if let Some(v) = o.theta_hm {
        t.theta_hm = v;
    }
    if let Some(v) = o.min_period {
        t.min_period = v;
    }
    if o.max_period.is_some() {
        t.max_period = o.max_period;
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if o.multi_defect {
        cfg.multi_defect = true;
    }
    if let Some(s) = o.seed {
        cfg.seeds.generator = s;
        cfg.seeds.split = s;
        cfg.seeds.train = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_image(p: &Path) -> Result<InspectionImage, Error> {
    let img = InspectionImage::load(p)?;
    let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut meta = img.meta.clone();
    meta.image_id = id;
    Ok(img.with_meta(meta))
}

fn detector(args: &DetectorArgs, cfg: &RunConfig) -> anyhow::Result<Arc<dyn BinaryPatchClassifier>> {
    if let Some(m) = &args.oracle_mask {
        return Ok(Arc::new(OracleClassifier::new(&load_mask_png(m)?)));
    }
    let path = args
        .detector
        .as_ref()
        .or(cfg.paths.detector.as_ref())
        .ok_or_else(|| anyhow!("no detector: pass --detector, --oracle-mask or set paths.detector"))?;
    Ok(Arc::new(ReferencePatchDetector {
        model: LogisticModel::load(path)?,
    }))
}

fn classifier(path: Option<&PathBuf>, cfg: &RunConfig) -> anyhow::Result<Option<LogisticModel>> {
    Ok(match path.or(cfg.paths.classifier.as_ref()) {
        Some(p) => Some(LogisticModel::load(p)?),
        None => None,
    })
}

fn patch_or_detect(
    image: &InspectionImage,
    patch: Option<BBox>,
    det: &DetectorArgs,
    cfg: &RunConfig,
    pipe: &PipelineConfig,
) -> anyhow::Result<Option<BBox>> {
    if let Some(b) = patch {
        if !b.fits_in(image.width(), image.height()) {
            return Err(Error::new(ErrorCode::InvalidConfig, format!("box {b:?} leaves the image")).into());
        }
        return Ok(Some(b));
    }
    let d = detect(detector(det, cfg)?.as_ref(), image, &pipe.detect)?;
    Ok(d.regions.first().map(|r| r.bbox))
}

fn fmt_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.width, b.height)
}

fn run(cli: &Cli) -> anyhow::Result<Output> {
    let cfg = load_config(cli)?;
    let pipe = cfg.pipeline();
    match &cli.cmd {
        Cmd::EstimatePeriod { image } => {
            let img = load_image(image)?;
            let est = analyze(&img, pipe.projection, &pipe.search, &pipe.bands)?;
            let human = format!(
                "period {}  count {}  confidence {:.3}  clean offset {}  dirty {}",
                est.period,
                est.count,
                est.confidence,
                est.clean_offset.map_or("-".into(), |o| o.to_string()),
                est.dirty_intervals
                    .iter()
                    .map(|r| format!("[{}, {})", r.start, r.end))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            out("period", &est, human)
        }
        Cmd::Reconstruct { image, out: path } => {
            let img = load_image(image)?;
            let est = analyze(&img, pipe.projection, &pipe.search, &pipe.bands)?;
            let r = build_reference(&img, &est)?;
            if let Some(p) = path {
                InspectionImage::gray(r.pixels.clone())?.save(p)?;
            }
            let v = json!({
                "period": r.period,
                "count": r.count,
                "source_clean_offset": r.source_clean_offset,
                "width": r.pixels.width(),
                "height": r.pixels.height(),
                "out": path,
            });
            let human = format!(
                "reference {}x{} from period at column {} (T={}, C={})",
                r.pixels.width(),
                r.pixels.height(),
                r.source_clean_offset,
                r.period,
                r.count
            );
            out("reconstruct", v, human)
        }
        Cmd::Localize { image } => {
            let img = load_image(image)?;
            let est = analyze(&img, pipe.projection, &pipe.search, &pipe.bands)?;
            let r = build_reference(&img, &est)?;
            let regions = diff_localize(&img, &r, &pipe.diff);
            let patches = frame_patches(&regions, img.width(), img.height())?;
            let human = if patches.is_empty() {
                "no regions".into()
            } else {
                regions
                    .iter()
                    .zip(&patches)
                    .map(|(r, p)| format!("region {} area {} -> patch {}", fmt_box(&r.bbox), r.area, fmt_box(p)))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            out("localize", json!({ "regions": regions, "patches": patches }), human)
        }
        Cmd::Detect { image, det } => {
            let img = load_image(image)?;
            let d = detect(detector(det, &cfg)?.as_ref(), &img, &pipe.detect)?;
            let human = if d.regions.is_empty() {
                format!("no defect (top score {:.3})", d.selection.top_score)
            } else {
                d.regions
                    .iter()
                    .map(|r| format!("defect {} score {:.3}", fmt_box(&r.bbox), r.score))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            out("detect", &d, human)
        }
        Cmd::Segment {
            image,
            patch,
            det,
            out: path,
        } => {
            let img = load_image(image)?;
            let Some(b) = patch_or_detect(&img, *patch, det, &cfg, &pipe)? else {
                return out("segment", json!({ "box": null }), "no defect detected".into());
            };
            let est = estimate_period(&img, &pipe)?;
            let seg = segment_region(&img, b, &est, &pipe.matching, &pipe.diff)?;
            if let Some(p) = path {
                save_mask_png(&mask_to_image_frame(&seg.mask, b, img.width(), img.height()), p)?;
            }
            let v = json!({
                "box": b,
                "background": seg.background,
                "source": seg.source,
                "defect_pixel_count": seg.mask.defect_pixel_count,
                "out": path,
            });
            let human = format!(
                "patch {}  background {}  ncc {}  source {:?}  defect pixels {}",
                fmt_box(&b),
                seg.background.map_or("-".into(), |m| fmt_box(&m.bbox)),
                seg.background.map_or("-".into(), |m| format!("{:.3}", m.ncc_score)),
                seg.source,
                seg.mask.defect_pixel_count
            );
            out("segment", v, human)
        }
        Cmd::Classify {
            image,
            patch,
            det,
            classifier: path,
        } => {
            let img = load_image(image)?;
            let model = classifier(path.as_ref(), &cfg)?.ok_or_else(|| anyhow!("no classifier: pass --classifier"))?;
            let Some(b) = patch_or_detect(&img, *patch, det, &cfg, &pipe)? else {
                return out("classify", json!({ "box": null }), "no defect detected".into());
            };
            let est = estimate_period(&img, &pipe)?;
            let params = PrepareParams {
                matching: pipe.matching,
                diff: pipe.diff,
            };
            let stack = prepare_stack(&img, b, &est, model.meta.mode, &params)?;
            let p = model.predict(&stack)?;
            let mut scores: Vec<(String, f64)> = model.meta.class_list.iter().cloned().zip(p).collect();
            scores.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite"));
            let human = scores
                .iter()
                .map(|(c, s)| format!("{c:<12} {s:.4}"))
                .collect::<Vec<_>>()
                .join("\n");
            let v = json!({
                "box": b,
                "mode": model.meta.mode,
                "top_class": scores[0].0,
                "scores": scores.iter().map(|(c, s)| json!({"class": c, "score": s})).collect::<Vec<_>>(),
            });
            out("classify", v, human)
        }
        Cmd::Inspect {
            image,
            det,
            classifier: path,
            layout,
            out_mask,
        } => {
            let img = load_image(image)?;
            let layout = layout.as_ref().or(cfg.paths.layout.as_ref()).map(|p| load_layout(p)).transpose()?;
            let models = Models {
                detector: detector(det, &cfg)?,
                classifier: classifier(path.as_ref(), &cfg)?.map(|m| Arc::new(m) as Arc<dyn DefectClassifier>),
                layout: layout.map(Arc::new),
            };
            let ins = inspect(&img, &models, &pipe).map_err(|e| {
                log::error!("stage {} failed", e.stage.name());
                e.error
            })?;
            if let Some(p) = out_mask {
                save_mask_png(&inspection_mask(&ins, img.width(), img.height())?, p)?;
            }
            let mut lines = vec![format!("{}: {:?}, period {}", ins.image_id, ins.verdict, ins.period)];
            for d in &ins.defects {
                lines.push(format!(
                    "  patch {}  score {:.3}  pixels {}  class {}",
                    fmt_box(&d.patch_box),
                    d.detection_score,
                    d.defect_pixel_count,
                    d.top_class.as_deref().unwrap_or("-")
                ));
                for v in d.impact.iter().filter(|v| v.triggered) {
                    lines.push(format!("    impact {} -> {} ({:?})", v.rule_id, v.verdict_label, v.severity));
                }
            }
            out("inspect", &ins, lines.join("\n"))
        }
        Cmd::Gen {
            out: dir,
            n,
            defect_free,
            bias,
            periods,
        } => {
            let mut spec = if *bias {
                CorpusSpec::background_bias(*n)
            } else {
                CorpusSpec {
                    n_images: *n,
                    ..CorpusSpec::standard()
                }
            };
            spec.defect_free_fraction = *defect_free;
            if let Some(p) = periods {
                spec.periods = p.clone();
            }
            let records = gen_dataset(&spec, cfg.seeds.generator, dir)?;
            let defects = records.iter().filter(|r| r.label == PatchLabel::Defect).count();
            let human = format!(
                "{} images ({} with a defect) in {}; confound {}",
                records.len(),
                defects,
                dir.display(),
                if matches!(spec.confound, ConfoundPolicy::None) { "none" } else { "background-bias" }
            );
            out(
                "gen",
                json!({ "images": records.len(), "defects": defects, "manifest": dir.join("manifest.jsonl") }),
                human,
            )
        }
        Cmd::Autolabel {
            manifest,
            out: path,
            export,
        } => {
            let items = load_dataset(manifest)?;
            let labeled: Vec<LabeledImage> = items
                .iter()
                .map(|it| LabeledImage {
                    image: &it.image,
                    label: Some(it.record.label),
                })
                .collect();
            let res = autolabel_dataset(&labeled, &SurrogateHeatmap::default(), &cfg.autolabel());
            let lines: Vec<String> = res
                .candidates
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<_, _>>()?;
            std::fs::write(path, lines.iter().map(|l| format!("{l}\n")).collect::<String>())
                .with_context(|| format!("writing {}", path.display()))?;
            let accepted = res.candidates.iter().filter(|c| c.status == CandidateStatus::Accepted).count();
            if let Some(p) = export {
                let base = manifest.parent().unwrap_or(Path::new("."));
                let rebase = |q: &str| {
                    let r = resolve(base, q);
                    std::path::absolute(&r).unwrap_or(r).to_string_lossy().into_owned()
                };
                let by_id: HashMap<&str, &ManifestRecord> =
                    items.iter().map(|it| (it.record.image_id.as_str(), &it.record)).collect();
                let mut records: Vec<ManifestRecord> = res
                    .candidates
                    .iter()
                    .filter(|c| c.status == CandidateStatus::Accepted)
                    .map(|c| {
                        let src = by_id[c.image_id.as_str()];
                        let mut r = ManifestRecord::from_candidate(c, &rebase(&src.image_path), src.split);
                        r.mask_path = src.mask_path.as_deref().map(rebase);
                        r.class = src.class.clone();
                        r.recipe = src.recipe;
                        r
                    })
                    .collect();
                records.extend(
                    items
                        .iter()
                        .filter(|it| it.record.label == PatchLabel::NoDefect)
                        .map(|it| ManifestRecord {
                            image_path: rebase(&it.record.image_path),
                            mask_path: it.record.mask_path.as_deref().map(rebase),
                            ..it.record.clone()
                        }),
                );
                write_manifest(p, &records)?;
            }
            let human = format!(
                "{} candidates ({} accepted, {} pending), {} images skipped",
                res.candidates.len(),
                accepted,
                res.candidates.len() - accepted,
                res.skipped.len()
            );
            let v = json!({
                "candidates": res.candidates.len(),
                "accepted": accepted,
                "skipped": res.skipped,
                "out": path,
                "export": export,
            });
            out("autolabel", v, human)
        }
        Cmd::Train {
            manifest,
            out: path,
            detector_out,
            model_id,
            version,
        } => {
            let items = load_dataset(manifest)?;
            let catalogue = ClassCatalogue::new(DefectClass::catalogue())?;
            let patches = class_patches(&items, Split::Train, &catalogue)?;
            let params = TrainParams::default();
            let (model, report) = train_classifier(
                &patches,
                &catalogue,
                cfg.mode,
                &pipe,
                &params,
                cfg.seeds.train,
                model_id,
                version,
            )?;
            model.save(path)?;
            let mut v = json!({
                "classifier": { "out": path, "mode": cfg.mode, "samples": patches.len(), "report": report },
            });
            let mut human = format!(
                "{} classifier on {} patches: {} epochs, train accuracy {:.3} -> {}",
                cfg.mode,
                patches.len(),
                report.epochs,
                report.train_accuracy,
                path.display()
            );
            if let Some(dp) = detector_out {
                let train = items.iter().filter(|it| it.record.split == Split::Train);
                let defects: Vec<(&InspectionImage, BBox)> = train
                    .clone()
                    .filter(|it| it.record.label == PatchLabel::Defect)
                    .filter_map(|it| it.record.patch.map(|b| (&it.image, b)))
                    .collect();
                let clean: Vec<&InspectionImage> = train
                    .filter(|it| it.record.label == PatchLabel::NoDefect)
                    .map(|it| &it.image)
                    .collect();
                let (det, rep) = train_detector(&defects, &clean, &params, cfg.seeds.train, version)?;
                det.model.save(dp)?;
                human.push_str(&format!(
                    "\ndetector on {} defect patches and {} clean images: train accuracy {:.3} -> {}",
                    defects.len(),
                    clean.len(),
                    rep.train_accuracy,
                    dp.display()
                ));
                v["detector"] = json!({ "out": dp, "report": rep });
            }
            out("train", v, human)
        }
        Cmd::Eval {
            manifest,
            modes,
            models,
        } => {
            if modes.is_empty() && models.is_empty() {
                bail!(Error::new(ErrorCode::InvalidConfig, "pass --modes or --models"));
            }
            let items = load_dataset(manifest)?;
            let catalogue = ClassCatalogue::new(DefectClass::catalogue())?;
            let mut trained: Vec<LogisticModel> = Vec::new();
            if !modes.is_empty() {
                let patches = class_patches(&items, Split::Train, &catalogue)?;
                for &m in modes {
                    let (model, _) = train_classifier(
                        &patches,
                        &catalogue,
                        m,
                        &pipe,
                        &TrainParams::default(),
                        cfg.seeds.train,
                        m.name(),
                        "eval",
                    )?;
                    trained.push(model);
                }
            }
            for p in models {
                trained.push(LogisticModel::load(p)?);
            }
            let test = class_patches(&items, Split::Test, &catalogue)?;
            let estimates = test
                .iter()
                .map(|t| estimate_period(t.0, &pipe))
                .collect::<Result<Vec<_>, _>>()?;
            let samples: Vec<EvalSample> = test
                .iter()
                .zip(&estimates)
                .map(|(t, e)| EvalSample {
                    image_id: t.0.meta.image_id.clone(),
                    image: t.0,
                    defect_box: t.1,
                    truth: t.2,
                    estimate: e,
                })
                .collect();
            let refs: Vec<&dyn DefectClassifier> = trained.iter().map(|m| m as &dyn DefectClassifier).collect();
            let table = evaluate_classifier(
                &refs,
                &samples,
                &catalogue,
                &PrepareParams {
                    matching: pipe.matching,
                    diff: pipe.diff,
                },
            )?;
            let human = table.to_delimited('\t');
            out("eval", &table, human)
        }
        Cmd::Serve { bind, data_dir } => {
            let mut settings = cfg.service.clone();
            if let Some(b) = bind {
                settings.bind = b.clone();
            }
            if let Some(d) = data_dir {
                settings.data_dir = d.clone();
            }
            let svc = http::start(&settings, pipe)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(http::serve(svc, &settings.bind))?;
            out("serve", json!({ "bind": settings.bind }), "stopped".into())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(o) => {
            if cli.json {
                println!("{}", envelope(o.schema, "result", o.json));
            } else {
                println!("{}", o.human);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, status) = match e.downcast_ref::<Error>() {
                Some(err) if err.code == ErrorCode::InvalidConfig => (Some(err.code), 2),
                Some(err) => (Some(err.code), 1),
                None => (None, 1),
            };
            if cli.json {
                let body = json!({
                    "code": code.map(|c| c.to_string()),
                    "message": format!("{e:#}"),
                });
                println!("{}", envelope("error", "error", body));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(status)
        }
    }
}
