//! Dataset manifests, mirror/rotation augmentation, PCP scoring and
//! dataset-level evaluation reports.
//!
//! Manifest format: one header line with the part count and the limb
//! table, then one line per image. `#` starts a comment.
//!
//! ```text
//! 26 Torso:2,5 Head:0,2 U.Leg:16,18;21,23 ...
//! img/pose_000.png + x0 y0 x1 y1 ... x25 y25
//! img/bg_000.png -
//! img/pose_000.png +mr-10 x0 y0 ...
//! ```
//!
//! The flag is `-` for negatives or `+` with optional transform suffix:
//! `m` mirrors the source image on load, `r<deg>` rotates it about the
//! center. Annotation coordinates are stored post-transform.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{build_pyramid, FeaturePyramid};
use crate::inference::{infer, InferOptions, PoseEstimate};
use crate::model::PoseModel;
use crate::parts::{limb_definitions, LimbDefinition, TrainingAnnotation, NUM_PARTS};
use crate::raster::{load_image, Image};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImageTransform {
    pub mirror: bool,
    pub rotation_deg: f64,
}

impl ImageTransform {
    pub fn is_identity(&self) -> bool {
        !self.mirror && self.rotation_deg == 0.0
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        if self.mirror {
            out = out.mirror_horizontal();
        }
        if self.rotation_deg != 0.0 {
            out = out.rotate_about_center(self.rotation_deg);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the manifest directory.
    pub image: PathBuf,
    pub transform: ImageTransform,
    /// None marks a negative (person-free) image.
    pub annotation: Option<TrainingAnnotation>,
}

impl ManifestEntry {
    pub fn is_negative(&self) -> bool {
        self.annotation.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub part_count: usize,
    pub limbs: Vec<LimbDefinition>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(base_dir: PathBuf) -> Self {
        DatasetManifest {
            base_dir,
            part_count: NUM_PARTS,
            limbs: limb_definitions(),
            entries: Vec::new(),
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| !e.is_negative())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_negative())
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.image)
    }

    /// Decode the entry's image and apply its transform.
    pub fn load_entry_image(&self, entry: &ManifestEntry) -> Result<Image> {
        let img = load_image(&self.image_path(entry))?;
        Ok(entry.transform.apply(&img))
    }
}

fn parse_flag(token: &str) -> Option<(bool, ImageTransform)> {
    if token == "-" {
        return Some((false, ImageTransform::default()));
    }
    let rest = token.strip_prefix('+')?;
    let mut tf = ImageTransform::default();
    let mut rest = rest;
    if let Some(r) = rest.strip_prefix('m') {
        tf.mirror = true;
        rest = r;
    }
    if let Some(r) = rest.strip_prefix('r') {
        tf.rotation_deg = r.parse().ok()?;
        rest = "";
    }
    if !rest.is_empty() {
        return None;
    }
    Some((true, tf))
}

fn flag_string(entry: &ManifestEntry) -> String {
    match &entry.annotation {
        None => "-".to_string(),
        Some(_) => {
            let mut s = String::from("+");
            if entry.transform.mirror {
                s.push('m');
            }
            if entry.transform.rotation_deg != 0.0 {
                let _ = write!(s, "r{}", entry.transform.rotation_deg);
            }
            s
        }
    }
}

/// Parse a manifest file. Every referenced image must exist; malformed
/// lines report their line number.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| err(0, "empty manifest".into()))?;
    let mut tokens = header.split_whitespace();
    let part_count: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err(hline, "header must start with the part count".into()))?;
    let mut limbs = Vec::new();
    for tok in tokens {
        let (name, pairs) = tok
            .split_once(':')
            .ok_or_else(|| err(hline, format!("bad limb spec '{tok}'")))?;
        let mut endpoint_pairs = Vec::new();
        for pair in pairs.split(';') {
            let (a, b) = pair
                .split_once(',')
                .ok_or_else(|| err(hline, format!("bad endpoint pair '{pair}'")))?;
            let a: usize = a.parse().map_err(|_| err(hline, format!("bad part id '{a}'")))?;
            let b: usize = b.parse().map_err(|_| err(hline, format!("bad part id '{b}'")))?;
            if a >= part_count || b >= part_count {
                return Err(err(hline, format!("limb endpoint out of range in '{tok}'")));
            }
            endpoint_pairs.push((a, b));
        }
        limbs.push(LimbDefinition {
            name: name.to_string(),
            endpoint_pairs,
        });
    }

    let mut entries = Vec::new();
    for (ln, line) in lines {
        let mut tokens = line.split_whitespace();
        let image = PathBuf::from(
            tokens
                .next()
                .ok_or_else(|| err(ln, "missing image path".into()))?,
        );
        let flag = tokens
            .next()
            .ok_or_else(|| err(ln, "missing flag".into()))?;
        let (positive, transform) =
            parse_flag(flag).ok_or_else(|| err(ln, format!("bad flag '{flag}'")))?;
        let annotation = if positive {
            let coords: Vec<f64> = tokens
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(ln, format!("bad coordinate: {e}")))?;
            if coords.len() != 2 * part_count {
                return Err(err(
                    ln,
                    format!(
                        "expected {} coordinates for {} parts, found {}",
                        2 * part_count,
                        part_count,
                        coords.len()
                    ),
                ));
            }
            Some(TrainingAnnotation::new(
                coords.chunks(2).map(|c| (c[0], c[1])).collect(),
            ))
        } else {
            if tokens.next().is_some() {
                return Err(err(ln, "negative entries carry no coordinates".into()));
            }
            None
        };
        if !base_dir.join(&image).exists() {
            return Err(err(ln, format!("image not found: {}", image.display())));
        }
        entries.push(ManifestEntry {
            image,
            transform,
            annotation,
        });
    }
    Ok(DatasetManifest {
        base_dir,
        part_count,
        limbs,
        entries,
    })
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut s = String::new();
    let _ = write!(s, "{}", manifest.part_count);
    for limb in &manifest.limbs {
        let pairs: Vec<String> = limb
            .endpoint_pairs
            .iter()
            .map(|(a, b)| format!("{a},{b}"))
            .collect();
        let _ = write!(s, " {}:{}", limb.name, pairs.join(";"));
    }
    s.push('\n');
    for e in &manifest.entries {
        let _ = write!(s, "{} {}", e.image.display(), flag_string(e));
        if let Some(ann) = &e.annotation {
            for (x, y) in &ann.points {
                let _ = write!(s, " {x} {y}");
            }
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Mirror/rotate augmentation. Each original spawns the full transform
/// product; rotated copies whose annotation leaves the image are
/// dropped. Negatives are copied without coordinate work.
pub fn augment(
    manifest: &DatasetManifest,
    rotations: &[f64],
    mirror: bool,
) -> Result<DatasetManifest> {
    for &r in rotations {
        if r.abs() > 15.0 {
            return Err(Error::InvalidInput(format!(
                "rotation {r} exceeds the +/-15 degree augmentation range"
            )));
        }
    }
    let mut out = manifest.clone();
    let mut transforms: Vec<ImageTransform> = Vec::new();
    for &m in &[false, true][..if mirror { 2 } else { 1 }] {
        transforms.push(ImageTransform {
            mirror: m,
            rotation_deg: 0.0,
        });
        for &r in rotations {
            transforms.push(ImageTransform {
                mirror: m,
                rotation_deg: r,
            });
        }
    }

    let mut extra = Vec::new();
    for entry in &manifest.entries {
        // Image dimensions drive both the mirror coordinates and the
        // off-image drop check.
        let dims = if entry.annotation.is_some() {
            let img = load_image(&manifest.image_path(entry))?;
            Some((img.width as f64, img.height as f64))
        } else {
            None
        };
        for tf in transforms.iter().skip(1) {
            // Compose with the entry's existing transform only for
            // pristine entries; augmenting an already augmented manifest
            // is not supported.
            if !entry.transform.is_identity() {
                continue;
            }
            match (&entry.annotation, dims) {
                (None, _) => extra.push(ManifestEntry {
                    image: entry.image.clone(),
                    transform: *tf,
                    annotation: None,
                }),
                (Some(ann), Some((w, h))) => {
                    let mut a = ann.clone();
                    if tf.mirror {
                        a = a.mirrored(w);
                    }
                    if tf.rotation_deg != 0.0 {
                        a = a.rotated(tf.rotation_deg, w, h);
                    }
                    let inside = a
                        .points
                        .iter()
                        .all(|&(x, y)| x >= 0.0 && y >= 0.0 && x < w && y < h);
                    if inside {
                        extra.push(ManifestEntry {
                            image: entry.image.clone(),
                            transform: *tf,
                            annotation: Some(a),
                        });
                    } else {
                        log::debug!(
                            "augment: dropped {} under {:?} (part off-image)",
                            entry.image.display(),
                            tf
                        );
                    }
                }
                (Some(_), None) => unreachable!(),
            }
        }
    }
    out.entries.extend(extra);
    Ok(out)
}

/// Strict or loose PCP convention for one limb instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcpConvention {
    /// Both endpoints within `alpha * L`.
    Strict,
    /// Mean endpoint error within `alpha * L`.
    Loose,
}

/// Whether a limb is detected: endpoint errors against the true limb
/// length. A zero-length limb counts only on an exact match.
pub fn pcp_limb(
    est: ((f64, f64), (f64, f64)),
    truth: ((f64, f64), (f64, f64)),
    alpha: f64,
    convention: PcpConvention,
) -> bool {
    assert!(alpha > 0.0);
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let limb_len = dist(truth.0, truth.1);
    let e0 = dist(est.0, truth.0);
    let e1 = dist(est.1, truth.1);
    if limb_len == 0.0 {
        return e0 == 0.0 && e1 == 0.0;
    }
    match convention {
        PcpConvention::Strict => e0 <= alpha * limb_len && e1 <= alpha * limb_len,
        PcpConvention::Loose => 0.5 * (e0 + e1) <= alpha * limb_len,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimbScore {
    pub name: String,
    pub detected: usize,
    pub total: usize,
}

impl LimbScore {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.detected as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcpReport {
    pub limbs: Vec<LimbScore>,
    pub num_images: usize,
    pub num_detected_images: usize,
}

impl PcpReport {
    pub fn detection_rate(&self) -> f64 {
        if self.num_images == 0 {
            0.0
        } else {
            self.num_detected_images as f64 / self.num_images as f64
        }
    }

    /// Total score: instance-weighted mean limb detection percentage
    /// multiplied by the human detection rate.
    pub fn total(&self) -> f64 {
        let total: usize = self.limbs.iter().map(|l| l.total).sum();
        if total == 0 {
            return 0.0;
        }
        let detected: usize = self.limbs.iter().map(|l| l.detected).sum();
        100.0 * detected as f64 / total as f64 * self.detection_rate()
    }

    /// Aligned text table in the usual Torso/Head/.../Total column order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut header = String::new();
        let mut row = String::new();
        for l in &self.limbs {
            let _ = write!(header, "{:>8}", l.name);
            let _ = write!(row, "{:>8.1}", l.percent());
        }
        let _ = write!(header, "{:>8}", "Total");
        let _ = write!(row, "{:>8.1}", self.total());
        let _ = writeln!(s, "{header}");
        let _ = writeln!(s, "{row}");
        let _ = writeln!(
            s,
            "detection rate {:.3} ({} of {} images)",
            self.detection_rate(),
            self.num_detected_images,
            self.num_images
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.limbs.iter().map(|l| l.name.as_str()).collect();
        let _ = writeln!(s, "{},Total,DetectionRate", names.join(","));
        let vals: Vec<String> = self.limbs.iter().map(|l| format!("{}", l.percent())).collect();
        let _ = writeln!(
            s,
            "{},{},{}",
            vals.join(","),
            self.total(),
            self.detection_rate()
        );
        s
    }
}

pub fn parse_report_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty csv".into()))?;
    let values = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("csv missing value row".into()))?;
    let mut out = Vec::new();
    for (name, value) in header.split(',').zip(values.split(',')) {
        let v: f64 = value
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad csv value '{value}'")))?;
        out.push((name.to_string(), v));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub occlusion: bool,
    pub alpha: f64,
    pub convention: PcpConvention,
    pub threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            occlusion: false,
            alpha: 0.5,
            convention: PcpConvention::Strict,
            threshold: None,
        }
    }
}

/// Score one estimate against the truth, accumulating per-limb counts.
pub fn score_estimate(
    model: &PoseModel,
    estimate: &PoseEstimate,
    truth: &TrainingAnnotation,
    limbs: &[LimbDefinition],
    alpha: f64,
    convention: PcpConvention,
    counts: &mut [LimbScore],
) {
    for (li, limb) in limbs.iter().enumerate() {
        for &(a, b) in &limb.endpoint_pairs {
            counts[li].total += 1;
            let (Some(ea), Some(eb)) = (
                estimate.part_center(model, a),
                estimate.part_center(model, b),
            ) else {
                continue;
            };
            if pcp_limb(
                (ea, eb),
                (truth.points[a], truth.points[b]),
                alpha,
                convention,
            ) {
                counts[li].detected += 1;
            }
        }
    }
}

/// Evaluate a model over the manifest's positives: the highest-scoring
/// detection per image is scored against the truth.
pub fn evaluate(
    model: &PoseModel,
    manifest: &DatasetManifest,
    opts: EvalOptions,
) -> Result<PcpReport> {
    let mut counts: Vec<LimbScore> = manifest
        .limbs
        .iter()
        .map(|l| LimbScore {
            name: l.name.clone(),
            detected: 0,
            total: 0,
        })
        .collect();
    let mut num_images = 0usize;
    let mut num_detected = 0usize;
    for entry in manifest.positives() {
        num_images += 1;
        let image = manifest.load_entry_image(entry)?;
        let pyramid = pyramid_for(model, &image)?;
        let ests = infer(
            model,
            &pyramid,
            InferOptions {
                occlusion: opts.occlusion,
                threshold: opts.threshold,
            },
        )?;
        let Some(best) = ests.first() else { continue };
        num_detected += 1;
        score_estimate(
            model,
            best,
            entry.annotation.as_ref().unwrap(),
            &manifest.limbs,
            opts.alpha,
            opts.convention,
            &mut counts,
        );
    }
    Ok(PcpReport {
        limbs: counts,
        num_images,
        num_detected_images: num_detected,
    })
}

/// Feature pyramid with the model's settings.
pub fn pyramid_for(model: &PoseModel, image: &Image) -> Result<FeaturePyramid> {
    build_pyramid(
        image,
        &model.meta.hog,
        model.meta.interval,
        min_level_cells(model),
    )
}

/// Smallest grid a level must offer: the largest template plus room for
/// one anchor step.
pub fn min_level_cells(model: &PoseModel) -> usize {
    let mut m = 1usize;
    let mut consider = |n: &crate::model::NodeSpec| {
        for t in &n.types {
            m = m.max(t.template.h).max(t.template.w);
        }
    };
    for n in &model.upper.nodes {
        consider(n);
    }
    for st in &model.sub_trees {
        for mix in &st.mixtures {
            for n in &mix.nodes {
                consider(n);
            }
        }
    }
    m + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parts::NUM_PARTS;

    fn write_dummy_png(dir: &Path, name: &str, w: usize, h: usize) {
        let img = Image::from_fn(w, h, |x, y| ((x + y) % 7) as f64 / 7.0);
        crate::raster::save_png(&img, &dir.join(name)).unwrap();
    }

    fn sample_manifest(dir: &Path) -> DatasetManifest {
        write_dummy_png(dir, "a.png", 64, 64);
        write_dummy_png(dir, "neg.png", 64, 64);
        let mut m = DatasetManifest::new(dir.to_path_buf());
        let ann = TrainingAnnotation::new(
            (0..NUM_PARTS)
                .map(|i| (8.0 + (i % 5) as f64 * 9.0, 6.0 + (i / 5) as f64 * 8.0))
                .collect(),
        );
        m.entries.push(ManifestEntry {
            image: "a.png".into(),
            transform: ImageTransform::default(),
            annotation: Some(ann),
        });
        m.entries.push(ManifestEntry {
            image: "neg.png".into(),
            transform: ImageTransform::default(),
            annotation: None,
        });
        m
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        let path = dir.path().join("set.manifest");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn wrong_part_count_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_dummy_png(dir.path(), "a.png", 16, 16);
        let path = dir.path().join("bad.manifest");
        // 25 parts worth of coordinates against a 26-part header.
        let coords: Vec<String> = (0..50).map(|i| format!("{i}")).collect();
        std::fs::write(
            &path,
            format!("26 Torso:2,5\na.png + {}\n", coords.join(" ")),
        )
        .unwrap();
        match load_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn negative_entries_carry_no_annotation() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        let path = dir.path().join("set.manifest");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert!(back.entries[1].is_negative());
        assert_eq!(back.negatives().count(), 1);
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.manifest");
        std::fs::write(&path, "26\nmissing.png -\n").unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn augment_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        let bigger = augment(&m, &[-10.0, 10.0], true).unwrap();
        // 2 originals x (1 + mirror) x (1 + 2 rotations) = 12, nothing
        // dropped because the pose sits well inside the image.
        assert_eq!(bigger.entries.len(), 12);
        let back = augment(&m, &[], false).unwrap();
        assert_eq!(back.entries.len(), 2);
    }

    #[test]
    fn augment_rejects_large_rotations() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        assert!(augment(&m, &[20.0], false).is_err());
    }

    #[test]
    fn augment_drops_copies_with_offscreen_parts() {
        let dir = tempfile::tempdir().unwrap();
        write_dummy_png(dir.path(), "edge.png", 64, 64);
        let mut m = DatasetManifest::new(dir.path().to_path_buf());
        // A part sits in the far corner: any rotation pushes it out.
        let mut pts: Vec<(f64, f64)> = (0..NUM_PARTS).map(|_| (32.0, 32.0)).collect();
        pts[0] = (63.0, 63.0);
        m.entries.push(ManifestEntry {
            image: "edge.png".into(),
            transform: ImageTransform::default(),
            annotation: Some(TrainingAnnotation::new(pts)),
        });
        let out = augment(&m, &[10.0], false).unwrap();
        assert_eq!(out.entries.len(), 1, "rotated copy should be dropped");
    }

    #[test]
    fn mirror_of_mirror_restores_coordinates() {
        let ann = TrainingAnnotation::new(
            (0..NUM_PARTS)
                .map(|i| (3.0 * i as f64, 40.0 - i as f64))
                .collect(),
        );
        let back = ann.mirrored(64.0).mirrored(64.0);
        for (a, b) in ann.points.iter().zip(&back.points) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn pcp_exact_match_is_detected() {
        let t = ((0.0, 0.0), (10.0, 0.0));
        assert!(pcp_limb(t, t, 0.5, PcpConvention::Strict));
    }

    #[test]
    fn pcp_boundary_cases() {
        let truth = ((0.0, 0.0), (10.0, 0.0));
        // Both endpoints off by 0.51 * L: not detected.
        let est = ((0.0, 5.1), (10.0, 5.1));
        assert!(!pcp_limb(est, truth, 0.5, PcpConvention::Strict));
        // Exactly 0.5 * L on both: detected (inclusive).
        let est = ((0.0, 5.0), (10.0, 5.0));
        assert!(pcp_limb(est, truth, 0.5, PcpConvention::Strict));
        // One endpoint 0.3 L, the other 0.6 L: strict fails, loose passes
        // (mean 0.45 L).
        let est = ((0.0, 3.0), (10.0, 6.0));
        assert!(!pcp_limb(est, truth, 0.5, PcpConvention::Strict));
        assert!(pcp_limb(est, truth, 0.5, PcpConvention::Loose));
    }

    #[test]
    fn pcp_zero_length_limb() {
        let truth = ((5.0, 5.0), (5.0, 5.0));
        assert!(pcp_limb(truth, truth, 0.5, PcpConvention::Strict));
        assert!(!pcp_limb(
            ((5.0, 5.1), (5.0, 5.0)),
            truth,
            0.5,
            PcpConvention::Strict
        ));
    }

    #[test]
    fn pcp_is_scale_invariant() {
        let truth = ((1.0, 2.0), (7.0, 9.0));
        let est = ((1.5, 2.5), (6.0, 8.0));
        for s in [0.5, 2.0, 10.0] {
            let scale = |p: (f64, f64)| (p.0 * s, p.1 * s);
            assert_eq!(
                pcp_limb(est, truth, 0.5, PcpConvention::Strict),
                pcp_limb(
                    (scale(est.0), scale(est.1)),
                    (scale(truth.0), scale(truth.1)),
                    0.5,
                    PcpConvention::Strict
                )
            );
        }
    }

    #[test]
    fn report_total_weights_by_instances_and_detection_rate() {
        let report = PcpReport {
            limbs: vec![
                LimbScore {
                    name: "Torso".into(),
                    detected: 2,
                    total: 2,
                },
                LimbScore {
                    name: "U.Leg".into(),
                    detected: 1,
                    total: 4,
                },
            ],
            num_images: 4,
            num_detected_images: 2,
        };
        // 3 of 6 instances = 50%, times detection rate 0.5 -> 25.
        assert!((report.total() - 25.0).abs() < 1e-9);
        let csv = report.to_csv();
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(parsed[0], ("Torso".to_string(), 100.0));
        assert_eq!(parsed.last().unwrap().0, "DetectionRate");
    }

    #[test]
    fn hand_built_two_image_tally() {
        // One limb with two instances over two images; one instance
        // fails. 3/4 detected, rate 1.0 -> 75%.
        let mut counts = vec![LimbScore {
            name: "U.Leg".into(),
            detected: 0,
            total: 0,
        }];
        let truth = ((0.0, 0.0), (10.0, 0.0));
        let cases = [
            (((0.0, 0.1), (10.0, 0.1)), true),
            (((0.0, 9.0), (10.0, 9.0)), false),
            (((0.0, 1.0), (10.0, 1.0)), true),
            (((1.0, 0.0), (9.0, 0.0)), true),
        ];
        for (est, _want) in &cases {
            counts[0].total += 1;
            if pcp_limb(*est, truth, 0.5, PcpConvention::Strict) {
                counts[0].detected += 1;
            }
        }
        assert_eq!(counts[0].detected, 3);
        assert_eq!(counts[0].total, 4);
        let report = PcpReport {
            limbs: counts,
            num_images: 2,
            num_detected_images: 2,
        };
        assert!((report.total() - 75.0).abs() < 1e-9);
    }
}
