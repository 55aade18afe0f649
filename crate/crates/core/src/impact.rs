//! Rule-engine impact analysis: geometric predicates of a defect mask
//! against named layout regions.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::imgproc::{label_components, Connectivity};
use crate::raster::{load_mask_png, Raster};

/// Component analysis for `connects` and `severs`.
pub const IMPACT_CONNECTIVITY: Connectivity = Connectivity::Four;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionRole {
    Line,
    Electrode,
    Via,
    KeepOut,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Minor,
    Major,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    Intersects { region: String },
    CoveredAreaGe { region: String, theta: f64 },
    Connects { a: String, b: String },
    Severs { region: String },
}

impl Predicate {
    fn regions(&self) -> Vec<&str> {
        match self {
            Predicate::Intersects { region } | Predicate::Severs { region } | Predicate::CoveredAreaGe { region, .. } => {
                vec![region]
            }
            Predicate::Connects { a, b } => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactRule {
    pub rule_id: String,
    pub predicate: Predicate,
    pub verdict_label: String,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionDoc {
    name: String,
    role: RegionRole,
    #[serde(default)]
    polygons: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutDoc {
    width: usize,
    height: usize,
    #[serde(default)]
    regions: Vec<RegionDoc>,
    #[serde(default)]
    rules: Vec<ImpactRule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutRegion {
    pub name: String,
    pub role: RegionRole,
    pub mask: Raster<bool>,
}

/// Validated regions and rules in one image frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<LayoutRegion>,
    pub rules: Vec<ImpactRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Measured {
    Area(u64),
    Flag(bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactVerdict {
    pub rule_id: String,
    pub triggered: bool,
    pub measured: Measured,
    pub verdict_label: String,
    pub severity: Severity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutFormat {
    Toml,
    Json,
}

impl LayoutFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => LayoutFormat::Json,
            _ => LayoutFormat::Toml,
        }
    }
}

fn schema(msg: impl Into<String>) -> Error {
    Error::new(ErrorCode::SchemaError, msg)
}

/// Even-odd fill sampled at pixel centres.
pub fn rasterize_polygons(polys: &[Vec<[f64; 2]>], width: usize, height: usize) -> Raster<bool> {
    let mut out = Raster::filled(width, height, false);
    for y in 0..height {
        let cy = y as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for poly in polys {
            for i in 0..poly.len() {
                let [x0, y0] = poly[i];
                let [x1, y1] = poly[(i + 1) % poly.len()];
                if (y0 <= cy) != (y1 <= cy) {
                    xs.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
                }
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite vertices"));
        for pair in xs.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for x in start..end {
                let v = !out.get(x, y);
                out.set(x, y, v);
            }
        }
    }
    out
}

/// Parses and validates a layout document. Mask references resolve
/// against `base_dir`.
pub fn load_layout_str(text: &str, format: LayoutFormat, base_dir: &Path) -> Result<Layout> {
    let doc: LayoutDoc = match format {
        LayoutFormat::Json => {
            let de = &mut serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(de).map_err(|e| schema(format!("at {}: {}", e.path(), e.inner())))?
        }
        LayoutFormat::Toml => {
            let de = toml::Deserializer::parse(text).map_err(|e| schema(e.to_string()))?;
            serde_path_to_error::deserialize(de).map_err(|e| schema(format!("at {}: {}", e.path(), e.inner())))?
        }
    };
    build_layout(doc, base_dir)
}

pub fn load_layout(path: &Path) -> Result<Layout> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_layout_str(&text, LayoutFormat::from_path(path), base)
}

fn build_layout(doc: LayoutDoc, base_dir: &Path) -> Result<Layout> {
    let (w, h) = (doc.width, doc.height);
    if w == 0 || h == 0 {
        return Err(schema("at width/height: frame must be non-empty"));
    }
    let mut names = HashSet::new();
    let mut regions = Vec::with_capacity(doc.regions.len());
    for (i, r) in doc.regions.into_iter().enumerate() {
        let at = format!("at regions[{i}]");
        if !names.insert(r.name.clone()) {
            return Err(schema(format!("{at}.name: duplicate region name {:?}", r.name)));
        }
        let mask = match (&r.mask, r.polygons.is_empty()) {
            (Some(p), true) => {
                let m = load_mask_png(&base_dir.join(p))?;
                if (m.width(), m.height()) != (w, h) {
                    return Err(schema(format!("{at}.mask: {}x{} mask in a {w}x{h} frame", m.width(), m.height())));
                }
                m
            }
            (None, false) => {
                for (pi, poly) in r.polygons.iter().enumerate() {
                    if poly.len() < 3 {
                        return Err(schema(format!("{at}.polygons[{pi}]: needs at least 3 vertices")));
                    }
                    if poly
                        .iter()
                        .any(|&[x, y]| !x.is_finite() || !y.is_finite() || x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64)
                    {
                        return Err(schema(format!("{at}.polygons[{pi}]: vertex outside the {w}x{h} frame")));
                    }
                }
                rasterize_polygons(&r.polygons, w, h)
            }
            _ => return Err(schema(format!("{at}: give exactly one of polygons or mask"))),
        };
        regions.push(LayoutRegion {
            name: r.name,
            role: r.role,
            mask,
        });
    }
    let mut ids = HashSet::new();
    for (i, rule) in doc.rules.iter().enumerate() {
        if !ids.insert(rule.rule_id.as_str()) {
            return Err(schema(format!("at rules[{i}].rule_id: duplicate rule id {:?}", rule.rule_id)));
        }
        for name in rule.predicate.regions() {
            if !names.contains(name) {
                return Err(Error::new(
                    ErrorCode::UnknownRegion,
                    format!("rule {:?} references region {name:?}", rule.rule_id),
                ));
            }
        }
        if let Predicate::CoveredAreaGe { theta, .. } = rule.predicate {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(schema(format!("at rules[{i}].predicate.theta: must be positive")));
            }
        }
    }
    Ok(Layout {
        width: w,
        height: h,
        regions,
        rules: doc.rules,
    })
}

fn components(mask: &Raster<bool>) -> (Raster<u32>, usize) {
    let (labels, comps) = label_components(mask, IMPACT_CONNECTIVITY);
    (labels, comps.len())
}

fn any_shared_label(labels: &Raster<u32>, a: &Raster<bool>, b: &Raster<bool>) -> bool {
    let la: HashSet<u32> = a.data().iter().zip(labels.data()).filter(|(&m, _)| m).map(|(_, &l)| l).collect();
    b.data().iter().zip(labels.data()).any(|(&m, l)| m && la.contains(l))
}

fn zip_or(a: &Raster<bool>, b: &Raster<bool>) -> Raster<bool> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x || y).collect();
    Raster::from_vec(a.width(), a.height(), data).expect("same dims")
}

/// One verdict per rule in rule order.
pub fn evaluate_impact(mask: &Raster<bool>, layout: &Layout) -> Result<Vec<ImpactVerdict>> {
    if (mask.width(), mask.height()) != (layout.width, layout.height) {
        return Err(Error::new(
            ErrorCode::FrameMismatch,
            format!(
                "mask is {}x{}, layout frame is {}x{}",
                mask.width(),
                mask.height(),
                layout.width,
                layout.height
            ),
        ));
    }
    let by_name: HashMap<&str, &LayoutRegion> = layout.regions.iter().map(|r| (r.name.as_str(), r)).collect();
    let region = |n: &str| -> &Raster<bool> { &by_name[n].mask };
    Ok(layout
        .rules
        .iter()
        .map(|rule| {
            let (triggered, measured) = match &rule.predicate {
                Predicate::Intersects { region: r } => {
                    let hit = region(r).data().iter().zip(mask.data()).any(|(&a, &b)| a && b);
                    (hit, Measured::Flag(hit))
                }
                Predicate::CoveredAreaGe { region: r, theta } => {
                    let area = region(r).data().iter().zip(mask.data()).filter(|(&a, &b)| a && b).count() as u64;
                    (area as f64 >= *theta, Measured::Area(area))
                }
                Predicate::Connects { a, b } => {
                    let (ra, rb) = (region(a), region(b));
                    let alone = zip_or(ra, rb);
                    let (alone_labels, _) = components(&alone);
                    let joined = zip_or(&alone, mask);
                    let (joined_labels, _) = components(&joined);
                    let hit = !any_shared_label(&alone_labels, ra, rb) && any_shared_label(&joined_labels, ra, rb);
                    (hit, Measured::Flag(hit))
                }
                Predicate::Severs { region: r } => {
                    let reg = region(r);
                    let data = reg.data().iter().zip(mask.data()).map(|(&a, &m)| a && !m).collect();
                    let rest = Raster::from_vec(reg.width(), reg.height(), data).expect("same dims");
                    let hit = components(&rest).1 > components(reg).1;
                    (hit, Measured::Flag(hit))
                }
            };
            ImpactVerdict {
                rule_id: rule.rule_id.clone(),
                triggered,
                measured,
                verdict_label: rule.verdict_label.clone(),
                severity: rule.severity,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    /// Independent flood fill; returns per-pixel component ids (`usize::MAX`
    /// for background) and the count.
    fn oracle_components(m: &[Vec<bool>]) -> (Vec<Vec<usize>>, usize) {
        let h = m.len();
        let w = m[0].len();
        let mut id = vec![vec![usize::MAX; w]; h];
        let mut n = 0;
        for sy in 0..h {
            for sx in 0..w {
                if !m[sy][sx] || id[sy][sx] != usize::MAX {
                    continue;
                }
                let mut q = VecDeque::from([(sx, sy)]);
                id[sy][sx] = n;
                while let Some((x, y)) = q.pop_front() {
                    let mut visit = |nx: usize, ny: usize| {
                        if m[ny][nx] && id[ny][nx] == usize::MAX {
                            id[ny][nx] = n;
                            q.push_back((nx, ny));
                        }
                    };
                    if x > 0 {
                        visit(x - 1, y);
                    }
                    if x + 1 < w {
                        visit(x + 1, y);
                    }
                    if y > 0 {
                        visit(x, y - 1);
                    }
                    if y + 1 < h {
                        visit(x, y + 1);
                    }
                }
                n += 1;
            }
        }
        (id, n)
    }

    fn grid(r: &Raster<bool>) -> Vec<Vec<bool>> {
        (0..r.height()).map(|y| r.row(y).to_vec()).collect()
    }

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Raster<bool> {
        Raster::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
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
rule_id = "touch-a"
verdict_label = "overlap"
severity = "info"
predicate = { kind = "intersects", region = "line-a" }

[[rules]]
rule_id = "area-b"
verdict_label = "coverage"
severity = "minor"
predicate = { kind = "covered_area_ge", region = "line-b", theta = 50 }
"#;

    fn scene() -> Layout {
        load_layout_str(SCENE, LayoutFormat::Toml, Path::new(".")).unwrap()
    }

    fn triggered(v: &[ImpactVerdict]) -> Vec<&str> {
        v.iter().filter(|v| v.triggered).map(|v| v.rule_id.as_str()).collect()
    }

    #[test]
    fn polygons_rasterize_to_rectangles() {
        let l = scene();
        assert_eq!(l.regions[0].mask, rect(200, 100, 0, 20, 200, 30));
        assert_eq!(l.regions[0].mask.count(), 2000);
    }

    #[test]
    fn triangle_area_close_to_geometry() {
        let m = rasterize_polygons(&[vec![[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]]], 100, 100);
        let n = m.count() as f64;
        assert!((n - 5000.0).abs() <= 100.0, "{n}");
    }

    #[test]
    fn bridge_is_a_short() {
        let l = scene();
        let mask = rect(200, 100, 90, 25, 96, 55);
        let (_, n_alone) = oracle_components(&grid(&zip_or(&l.regions[0].mask, &l.regions[1].mask)));
        let (_, n_join) =
            oracle_components(&grid(&zip_or(&zip_or(&l.regions[0].mask, &l.regions[1].mask), &mask)));
        assert_eq!((n_alone, n_join), (2, 1));
        let v = evaluate_impact(&mask, &l).unwrap();
        assert_eq!(triggered(&v), vec!["short-ab", "touch-a"]);
        assert_eq!(v[0].verdict_label, "short");
        assert_eq!(v[3].measured, Measured::Area(6 * 5));
        assert!(!v[3].triggered);
    }

    #[test]
    fn crossing_is_a_cut() {
        let l = scene();
        let mask = rect(200, 100, 100, 15, 104, 35);
        let rest = Raster::from_fn(200, 100, |x, y| l.regions[0].mask.get(x, y) && !mask.get(x, y));
        assert_eq!(oracle_components(&grid(&l.regions[0].mask)).1, 1);
        assert_eq!(oracle_components(&grid(&rest)).1, 2);
        let v = evaluate_impact(&mask, &l).unwrap();
        assert_eq!(triggered(&v), vec!["cut-a", "touch-a"]);
        assert_eq!(v[1].verdict_label, "cut");
    }

    #[test]
    fn clean_and_empty_masks_trigger_nothing() {
        let l = scene();
        for mask in [Raster::filled(200, 100, false), rect(200, 100, 10, 70, 30, 90)] {
            let v = evaluate_impact(&mask, &l).unwrap();
            assert_eq!(v.len(), 4);
            assert!(triggered(&v).is_empty());
        }
    }

    #[test]
    fn diagonal_touch_does_not_bridge() {
        let l = load_layout_str(
            r#"{"width": 10, "height": 10,
                "regions": [
                  {"name": "a", "role": "line", "polygons": [[[0,0],[3,0],[3,3],[0,3]]]},
                  {"name": "b", "role": "line", "polygons": [[[4,4],[7,4],[7,7],[4,7]]]}],
                "rules": [{"rule_id": "s", "verdict_label": "short", "severity": "major",
                           "predicate": {"kind": "connects", "a": "a", "b": "b"}}]}"#,
            LayoutFormat::Json,
            Path::new("."),
        )
        .unwrap();
        let mask = Raster::from_fn(10, 10, |x, y| x == 3 && y == 3);
        assert!(!evaluate_impact(&mask, &l).unwrap()[0].triggered);
        let mask = Raster::from_fn(10, 10, |x, y| x == 3 && (2..=4).contains(&y));
        assert!(evaluate_impact(&mask, &l).unwrap()[0].triggered);
    }

    #[test]
    fn empty_rule_list_yields_no_verdicts() {
        let l = load_layout_str("width = 4\nheight = 4\n", LayoutFormat::Toml, Path::new(".")).unwrap();
        assert!(evaluate_impact(&Raster::filled(4, 4, true), &l).unwrap().is_empty());
    }

    #[test]
    fn load_errors() {
        let unknown = SCENE.replace("region = \"line-a\" }", "region = \"line-z\" }");
        assert_eq!(
            load_layout_str(&unknown, LayoutFormat::Toml, Path::new(".")).unwrap_err().code,
            ErrorCode::UnknownRegion
        );
        let dup = SCENE.replace("name = \"line-b\"", "name = \"line-a\"");
        assert_eq!(
            load_layout_str(&dup, LayoutFormat::Toml, Path::new(".")).unwrap_err().code,
            ErrorCode::SchemaError
        );
        let extra = SCENE.replace("width = 200", "width = 200\ncolour = 1");
        let e = load_layout_str(&extra, LayoutFormat::Toml, Path::new(".")).unwrap_err();
        assert_eq!(e.code, ErrorCode::SchemaError);
        let bad_role = SCENE.replacen("role = \"line\"", "role = \"wire\"", 1);
        let e = load_layout_str(&bad_role, LayoutFormat::Toml, Path::new(".")).unwrap_err();
        assert!(e.message.contains("regions[0].role"), "{}", e.message);
        let zero = SCENE.replace("theta = 50", "theta = 0");
        assert_eq!(
            load_layout_str(&zero, LayoutFormat::Toml, Path::new(".")).unwrap_err().code,
            ErrorCode::SchemaError
        );
        let outside = SCENE.replace("[200, 60]", "[201, 60]");
        assert_eq!(
            load_layout_str(&outside, LayoutFormat::Toml, Path::new(".")).unwrap_err().code,
            ErrorCode::SchemaError
        );
    }

    #[test]
    fn frame_mismatch() {
        assert_eq!(
            evaluate_impact(&Raster::filled(10, 10, false), &scene()).unwrap_err().code,
            ErrorCode::FrameMismatch
        );
    }

    #[test]
    fn mask_file_regions() {
        let dir = tempfile::tempdir().unwrap();
        crate::raster::save_mask_png(&rect(20, 10, 0, 2, 20, 5), &dir.path().join("m.png")).unwrap();
        let p = dir.path().join("layout.toml");
        std::fs::write(
            &p,
            "width = 20\nheight = 10\n[[regions]]\nname = \"m\"\nrole = \"via\"\nmask = \"m.png\"\n",
        )
        .unwrap();
        let l = load_layout(&p).unwrap();
        assert_eq!(l.regions[0].mask.count(), 60);
    }

    fn blobs() -> impl Strategy<Value = Vec<(usize, usize, usize, usize)>> {
        prop::collection::vec((0usize..200, 0usize..100, 1usize..40, 1usize..40), 0..5)
    }

    fn paint(rects: &[(usize, usize, usize, usize)]) -> Raster<bool> {
        Raster::from_fn(200, 100, |x, y| {
            rects.iter().any(|&(rx, ry, rw, rh)| x >= rx && x < rx + rw && y >= ry && y < ry + rh)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn growing_mask_keeps_triggers(base in blobs(), more in blobs()) {
            let l = scene();
            let small = paint(&base);
            let all: Vec<_> = base.iter().chain(&more).copied().collect();
            let big = paint(&all);
            let a = evaluate_impact(&small, &l).unwrap();
            let b = evaluate_impact(&big, &l).unwrap();
            for (va, vb) in a.iter().zip(&b) {
                if va.rule_id != "cut-a" && va.triggered {
                    prop_assert!(vb.triggered, "{} turned off", va.rule_id);
                }
            }
        }

        #[test]
        fn severs_ignores_pixels_outside_region(base in blobs(), outside in blobs()) {
            let l = scene();
            let m = paint(&base);
            let extra = paint(&outside);
            let line = &l.regions[0].mask;
            let grown = Raster::from_fn(200, 100, |x, y| m.get(x, y) || (extra.get(x, y) && !line.get(x, y)));
            let a = evaluate_impact(&m, &l).unwrap();
            let b = evaluate_impact(&grown, &l).unwrap();
            prop_assert_eq!(a[1].triggered, b[1].triggered);
        }

        #[test]
        fn rule_order_does_not_change_verdicts(base in blobs()) {
            let l = scene();
            let m = paint(&base);
            let mut rev = l.clone();
            rev.rules.reverse();
            let mut a = evaluate_impact(&m, &l).unwrap();
            let mut b = evaluate_impact(&m, &rev).unwrap();
            a.sort_by(|x, y| x.rule_id.cmp(&y.rule_id));
            b.sort_by(|x, y| x.rule_id.cmp(&y.rule_id));
            prop_assert_eq!(a, b);
        }
    }
}
