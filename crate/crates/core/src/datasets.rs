//! Procedural datasets: a two-turn spiral, Gaussian blobs, and 16×16 glyphs.
//!
//! Each dataset has `identities` small subject sets plus a labeled class
//! pool. Every identity also carries a held-out reference set drawn from
//! the same distribution, used only for evaluation.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::gaussian_filter;
use crate::error::{Error, Result};
use crate::nets::{DataKind, SampleShape};
use crate::rng::{label, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spiral,
    Gmm,
    Glyphs,
}

/// Archimedean spiral `r = a + b·φ`, `φ ∈ [0, 2π·turns]`, before
/// normalization to the unit disk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpiralParams {
    pub a: f64,
    pub b: f64,
    pub turns: f64,
}

impl Default for SpiralParams {
    fn default() -> Self {
        Self {
            a: 0.1,
            b: 0.9 / (4.0 * PI),
            turns: 2.0,
        }
    }
}

/// The normalized generating curve, `r(φ) = a + b·φ` in data units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpiralCurve {
    pub a: f64,
    pub b: f64,
    pub phi_max: f64,
}

impl SpiralCurve {
    pub fn radius(&self, phi: f64) -> f64 {
        self.a + self.b * phi
    }

    pub fn point(&self, phi: f64) -> [f64; 2] {
        let r = self.radius(phi);
        [r * phi.cos(), r * phi.sin()]
    }
}

impl SpiralParams {
    pub fn curve(&self) -> SpiralCurve {
        let phi_max = 2.0 * PI * self.turns;
        let r_max = self.a + self.b * phi_max;
        SpiralCurve {
            a: self.a / r_max,
            b: self.b / r_max,
            phi_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Subject samples per identity.
    pub per_identity: usize,
    pub identities: usize,
    /// Held-out reference samples per identity.
    pub reference: usize,
    /// Class-pool size.
    pub class_pool: usize,
    /// Isotropic noise added to points, or stroke jitter for glyphs.
    pub noise: f64,
    pub spiral: SpiralParams,
    /// Image side for glyphs.
    pub extent: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Spiral,
            per_identity: 6,
            identities: 6,
            reference: 64,
            class_pool: 2000,
            noise: 0.02,
            spiral: SpiralParams::default(),
            extent: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: String,
    pub samples: Tensor,
    pub reference: Tensor,
    pub class_token: String,
    pub pseudo_token: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: SampleShape,
    pub identities: Vec<Identity>,
    pub class_pool: Tensor,
    /// Class token of each class-pool row.
    pub class_labels: Vec<String>,
    /// Distinct class tokens, sorted.
    pub classes: Vec<String>,
    pub curve: Option<SpiralCurve>,
}

impl Dataset {
    pub fn identity(&self, id: &str) -> Option<&Identity> {
        self.identities.iter().find(|i| i.id == id)
    }
}

fn class_token(i: usize) -> String {
    format!("class{i}")
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_identity < 3 {
            return Err(Error::config("dataset.per_identity", "need at least 3 samples per identity"));
        }
        if self.identities == 0 {
            return Err(Error::config("dataset.identities", "need at least one identity"));
        }
        if self.reference == 0 || self.class_pool == 0 {
            return Err(Error::config("dataset.reference", "reference and class pool must be non-empty"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("dataset.noise", "must be finite and non-negative"));
        }
        let sp = &self.spiral;
        if self.kind == DatasetKind::Spiral && !(sp.a >= 0.0 && sp.b > 0.0 && sp.turns > 0.0) {
            return Err(Error::config("dataset.spiral", "need a >= 0, b > 0, turns > 0"));
        }
        if self.kind == DatasetKind::Glyphs && self.extent < 8 {
            return Err(Error::config("dataset.extent", "glyph images need extent >= 8"));
        }
        Ok(())
    }

    pub fn shape(&self) -> SampleShape {
        match self.kind {
            DatasetKind::Glyphs => SampleShape::images(1, self.extent),
            _ => SampleShape::points(2),
        }
    }
}

/// Build the dataset described by `spec`; a pure function of the spec.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    match spec.kind {
        DatasetKind::Spiral => Ok(spiral(spec)),
        DatasetKind::Gmm => Ok(gmm(spec)),
        DatasetKind::Glyphs => Ok(glyphs(spec)),
    }
}

fn points_tensor(rows: Vec<[f64; 2]>) -> Tensor {
    let n = rows.len();
    Tensor::new(vec![n, 2], rows.into_iter().flatten().collect()).expect("n×2")
}

fn finish(shape: SampleShape, identities: Vec<Identity>, pool: Tensor, labels: Vec<String>, curve: Option<SpiralCurve>) -> Dataset {
    let mut classes = labels.clone();
    classes.sort();
    classes.dedup();
    Dataset {
        shape,
        identities,
        class_pool: pool,
        class_labels: labels,
        classes,
        curve,
    }
}

/// Noise can carry points near the rim past ±1; clamp back into the data range.
fn unit_box([x, y]: [f64; 2]) -> [f64; 2] {
    [x.clamp(-1.0, 1.0), y.clamp(-1.0, 1.0)]
}

fn spiral(spec: &DatasetSpec) -> Dataset {
    let curve = spec.spiral.curve();
    let m = spec.identities;
    let seg = curve.phi_max / m as f64;
    let bin = |phi: f64| ((phi / seg) as usize).min(m - 1);
    let draw = |rng: &mut Stream, phi: f64| {
        let [x, y] = curve.point(phi);
        unit_box([x + spec.noise * rng.normal(), y + spec.noise * rng.normal()])
    };
    let mut identities = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = Stream::derive(spec.seed, label(&format!("spiral/id{i}")));
        let lo = i as f64 * seg;
        // Stratified angles inside the identity's arm segment.
        let samples = (0..spec.per_identity)
            .map(|j| {
                let u = (j as f64 + rng.uniform()) / spec.per_identity as f64;
                draw(&mut rng, lo + u * seg)
            })
            .collect();
        let reference = (0..spec.reference)
            .map(|_| {
                let phi = lo + rng.uniform() * seg;
                draw(&mut rng, phi)
            })
            .collect();
        identities.push(Identity {
            id: format!("id{i}"),
            samples: points_tensor(samples),
            reference: points_tensor(reference),
            class_token: class_token(i),
            pseudo_token: format!("sstar{i}"),
        });
    }
    let mut rng = Stream::derive(spec.seed, label("spiral/pool"));
    let mut pool = Vec::with_capacity(spec.class_pool);
    let mut labels = Vec::with_capacity(spec.class_pool);
    for _ in 0..spec.class_pool {
        let phi = rng.uniform() * curve.phi_max;
        pool.push(draw(&mut rng, phi));
        labels.push(class_token(bin(phi)));
    }
    finish(spec.shape(), identities, points_tensor(pool), labels, Some(curve))
}

const GMM_RADIUS: f64 = 0.6;

fn gmm(spec: &DatasetSpec) -> Dataset {
    let m = spec.identities;
    let spread = if spec.noise > 0.0 { spec.noise } else { 0.07 };
    let center = |i: usize| {
        let th = 2.0 * PI * i as f64 / m as f64;
        [GMM_RADIUS * th.cos(), GMM_RADIUS * th.sin()]
    };
    let draw = |rng: &mut Stream, i: usize| {
        let [cx, cy] = center(i);
        unit_box([cx + spread * rng.normal(), cy + spread * rng.normal()])
    };
    let identities = (0..m)
        .map(|i| {
            let mut rng = Stream::derive(spec.seed, label(&format!("gmm/id{i}")));
            let samples = (0..spec.per_identity).map(|_| draw(&mut rng, i)).collect();
            let reference = (0..spec.reference).map(|_| draw(&mut rng, i)).collect();
            Identity {
                id: format!("id{i}"),
                samples: points_tensor(samples),
                reference: points_tensor(reference),
                class_token: class_token(i),
                pseudo_token: format!("sstar{i}"),
            }
        })
        .collect();
    let mut rng = Stream::derive(spec.seed, label("gmm/pool"));
    let mut pool = Vec::with_capacity(spec.class_pool);
    let mut labels = Vec::with_capacity(spec.class_pool);
    for _ in 0..spec.class_pool {
        let i = rng.index(m);
        pool.push(draw(&mut rng, i));
        labels.push(class_token(i));
    }
    finish(spec.shape(), identities, points_tensor(pool), labels, None)
}

const GLYPH_CLASSES: usize = 6;

/// Stroke style of one glyph instance, in `[-1, 1]²` image coordinates.
#[derive(Clone, Copy, Debug)]
struct Style {
    dx: f64,
    dy: f64,
    scale: f64,
    thickness: f64,
}

enum Stroke {
    Segment([f64; 2], [f64; 2]),
    Ring([f64; 2], f64),
}

fn glyph_strokes(class: usize) -> Vec<Stroke> {
    use Stroke::*;
    match class % GLYPH_CLASSES {
        0 => vec![Segment([-0.6, 0.0], [0.6, 0.0])],
        1 => vec![Segment([0.0, -0.6], [0.0, 0.6])],
        2 => vec![Segment([-0.55, -0.55], [0.55, 0.55])],
        3 => vec![Ring([0.0, 0.0], 0.5)],
        4 => vec![Segment([-0.55, 0.0], [0.55, 0.0]), Segment([0.0, -0.55], [0.0, 0.55])],
        _ => vec![
            Segment([-0.5, -0.5], [0.5, -0.5]),
            Segment([0.5, -0.5], [0.5, 0.5]),
            Segment([0.5, 0.5], [-0.5, 0.5]),
            Segment([-0.5, 0.5], [-0.5, -0.5]),
        ],
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let u = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - u * vx, wy - u * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Anti-aliased rendering of one glyph into `extent²` pixels in `[0, 1]`.
fn render(class: usize, style: Style, extent: usize) -> Vec<f64> {
    let strokes = glyph_strokes(class);
    let px = 2.0 / extent as f64;
    let mut img = vec![0.0; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let p = [
                (-1.0 + (x as f64 + 0.5) * px - style.dx) / style.scale,
                (-1.0 + (y as f64 + 0.5) * px - style.dy) / style.scale,
            ];
            let d = strokes
                .iter()
                .map(|s| match s {
                    Stroke::Segment(a, b) => segment_distance(p, *a, *b),
                    Stroke::Ring(c, r) => (((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() - r).abs(),
                })
                .fold(f64::INFINITY, f64::min)
                * style.scale;
            img[y * extent + x] = ((style.thickness - d) / px + 0.5).clamp(0.0, 1.0);
        }
    }
    img
}

fn random_style(rng: &mut Stream) -> Style {
    Style {
        dx: 0.3 * (rng.uniform() - 0.5),
        dy: 0.3 * (rng.uniform() - 0.5),
        scale: 0.8 + 0.3 * rng.uniform(),
        thickness: 0.08 + 0.08 * rng.uniform(),
    }
}

fn glyphs(spec: &DatasetSpec) -> Dataset {
    let e = spec.extent;
    let shape = spec.shape();
    let jitter = spec.noise;
    let images = |rows: Vec<Vec<f64>>| {
        let n = rows.len();
        Tensor::new(shape.batch(n), rows.into_iter().flatten().collect()).expect("glyph batch")
    };
    let identities = (0..spec.identities)
        .map(|i| {
            let mut rng = Stream::derive(spec.seed, label(&format!("glyphs/id{i}")));
            let base = random_style(&mut rng);
            let instance = |rng: &mut Stream| {
                let s = Style {
                    dx: base.dx + jitter * rng.normal(),
                    dy: base.dy + jitter * rng.normal(),
                    ..base
                };
                render(i, s, e)
            };
            let samples = (0..spec.per_identity).map(|_| instance(&mut rng)).collect();
            let reference = (0..spec.reference).map(|_| instance(&mut rng)).collect();
            Identity {
                id: format!("id{i}"),
                samples: images(samples),
                reference: images(reference),
                class_token: class_token(i % GLYPH_CLASSES),
                pseudo_token: format!("sstar{i}"),
            }
        })
        .collect();
    let mut rng = Stream::derive(spec.seed, label("glyphs/pool"));
    let mut pool = Vec::with_capacity(spec.class_pool);
    let mut labels = Vec::with_capacity(spec.class_pool);
    for _ in 0..spec.class_pool {
        let c = rng.index(GLYPH_CLASSES);
        let style = random_style(&mut rng);
        pool.push(render(c, style, e));
        labels.push(class_token(c));
    }
    finish(shape, identities, images(pool), labels, None)
}

/// Training-time transforms. Disabled fields are the identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Gaussian filter kernel size (0 disables); images only.
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    /// Horizontal flip probability; images only.
    pub flip_prob: f64,
    /// Center-crop side before resizing back (0 disables); images only.
    pub crop: usize,
    /// Standard deviation of additive jitter; points only.
    pub jitter: f64,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.blur_kernel == 0 && self.flip_prob == 0.0 && self.crop == 0 && self.jitter == 0.0
    }

    fn uses_image_ops(&self) -> bool {
        self.blur_kernel != 0 || self.flip_prob != 0.0 || self.crop != 0
    }
}

/// Apply `cfg` to every sample of the batch `x`.
pub fn augment(x: &Tensor, shape: SampleShape, cfg: &AugmentConfig, rng: &mut Stream) -> Result<Tensor> {
    shape.check(x)?;
    match shape.kind {
        DataKind::Points if cfg.uses_image_ops() => {
            return Err(Error::Mode {
                expected: "images",
                got: "points",
            })
        }
        DataKind::Images if cfg.jitter != 0.0 => {
            return Err(Error::Mode {
                expected: "points",
                got: "images",
            })
        }
        _ => {}
    }
    if cfg.is_identity() {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    if shape.kind == DataKind::Points {
        for v in out.data_mut() {
            *v += cfg.jitter * rng.normal();
        }
        return Ok(out);
    }
    if cfg.blur_kernel != 0 {
        out = gaussian_filter(&out, shape, cfg.blur_kernel, cfg.blur_sigma)?;
    }
    for i in 0..out.rows() {
        if rng.bernoulli(cfg.flip_prob) {
            flip_horizontal(out.row_mut(i), shape.channels, shape.extent);
        }
    }
    if cfg.crop != 0 {
        for i in 0..out.rows() {
            let resized = crop_resize(out.row(i), shape.channels, shape.extent, cfg.crop)?;
            out.row_mut(i).copy_from_slice(&resized);
        }
    }
    Ok(out)
}

pub fn flip_horizontal(img: &mut [f64], channels: usize, extent: usize) {
    for c in 0..channels {
        for y in 0..extent {
            img[(c * extent + y) * extent..(c * extent + y + 1) * extent].reverse();
        }
    }
}

/// Center crop to `crop×crop`, then bilinear resize back to `extent×extent`.
pub fn crop_resize(img: &[f64], channels: usize, extent: usize, crop: usize) -> Result<Vec<f64>> {
    if crop == 0 || crop > extent {
        return Err(Error::config("augment.crop", format!("crop {crop} outside [1, {extent}]")));
    }
    let off = (extent - crop) as f64 / 2.0;
    let scale = crop as f64 / extent as f64;
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let plane = &img[c * extent * extent..(c + 1) * extent * extent];
        let at = |y: usize, x: usize| plane[y * extent + x];
        for y in 0..extent {
            for x in 0..extent {
                // Pixel-center mapping into the crop window.
                let sy = (off + (y as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
                let sx = (off + (x as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(extent - 1), (x0 + 1).min(extent - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(c * extent + y) * extent + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Points as `x,y[,label]` CSV with a header.
pub fn write_points_csv(path: &Path, points: &Tensor, labels: Option<&[String]>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = points.row_len();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    writeln!(f, "{}", header.join(","))?;
    for i in 0..points.rows() {
        let mut cells: Vec<String> = points.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        if let Some(l) = labels {
            cells.push(l[i].clone());
        }
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Inverse of [`write_points_csv`]; a trailing `label` column is ignored.
pub fn read_points_csv(path: &Path) -> Result<Tensor> {
    let bad = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    let headers = r.headers().map_err(bad)?;
    let dims = headers.len() - usize::from(headers.iter().next_back() == Some("label"));
    if dims == 0 {
        return Err(Error::Format(format!("{}: no coordinate columns", path.display())));
    }
    let mut data = Vec::new();
    for row in r.records() {
        let row = row.map_err(bad)?;
        if row.len() < dims {
            return Err(Error::Format(format!("{}: row with {} of {dims} columns", path.display(), row.len())));
        }
        for cell in row.iter().take(dims) {
            data.push(cell.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{cell}`")))?);
        }
    }
    Tensor::new(vec![data.len() / dims, dims], data)
}

/// One single-channel image in `[0, 1]` as binary 8-bit PGM.
pub fn write_pgm(path: &Path, img: &[f64], extent: usize) -> Result<()> {
    let mut bytes = format!("P5\n{extent} {extent}\n255\n").into_bytes();
    bytes.extend(img[..extent * extent].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noiseless_spiral_lies_on_curve() {
        let spec = DatasetSpec {
            noise: 0.0,
            ..Default::default()
        };
        let ds = generate(&spec).unwrap();
        let c = ds.curve.unwrap();
        for id in &ds.identities {
            for i in 0..id.samples.rows() {
                let p = id.samples.row(i);
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                // Unwrap the angle onto the branch closest to the curve.
                let base = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                let best = (0..3)
                    .map(|k| base + 2.0 * PI * k as f64)
                    .map(|phi| (c.radius(phi) - r).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-12);
            }
        }
        assert!(ds.class_pool.max_abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn six_by_six_counts() {
        let ds = generate(&DatasetSpec::default()).unwrap();
        let total: usize = ds.identities.iter().map(|i| i.samples.rows()).sum();
        assert_eq!(ds.identities.len(), 6);
        assert_eq!(total, 36);
        assert_eq!(ds.class_labels.len(), ds.class_pool.rows());
        assert_eq!(ds.classes.len(), 6);
    }

    #[test]
    fn glyphs_are_unit_range_images() {
        let spec = DatasetSpec {
            kind: DatasetKind::Glyphs,
            class_pool: 20,
            ..Default::default()
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.class_pool.shape(), &[20, 1, 16, 16]);
        assert!(ds.class_pool.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ds.identities[0].samples.data().iter().any(|v| *v > 0.9));
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = DatasetSpec {
            per_identity: 2,
            ..Default::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config { .. })));
    }

    fn image_batch() -> (Tensor, SampleShape) {
        let shape = SampleShape::images(1, 8);
        let mut rng = Stream::new(3);
        (Tensor::new(shape.batch(2), rng.normals(128)).unwrap(), shape)
    }

    #[test]
    fn disabled_augment_is_identity() {
        let (x, shape) = image_batch();
        let out = augment(&x, shape, &AugmentConfig::default(), &mut Stream::new(0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn double_flip_restores() {
        let (x, shape) = image_batch();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..Default::default()
        };
        let once = augment(&x, shape, &cfg, &mut Stream::new(0)).unwrap();
        assert_ne!(once, x);
        assert_eq!(augment(&once, shape, &cfg, &mut Stream::new(0)).unwrap(), x);
    }

    #[test]
    fn crop_resize_keeps_constant_images() {
        let shape = SampleShape::images(1, 8);
        let x = Tensor::full(&shape.batch(1), 0.37);
        let cfg = AugmentConfig {
            crop: 5,
            ..Default::default()
        };
        let out = augment(&x, shape, &cfg, &mut Stream::new(0)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn mode_mismatch() {
        let pts = Tensor::zeros(&[3, 2]);
        let cfg = AugmentConfig {
            flip_prob: 0.5,
            ..Default::default()
        };
        let res = augment(&pts, SampleShape::points(2), &cfg, &mut Stream::new(0));
        assert!(matches!(res, Err(Error::Mode { .. })));
        let (x, shape) = image_batch();
        let cfg = AugmentConfig {
            jitter: 0.1,
            ..Default::default()
        };
        assert!(matches!(augment(&x, shape, &cfg, &mut Stream::new(0)), Err(Error::Mode { .. })));
    }

    #[test]
    fn exports() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&DatasetSpec {
            kind: DatasetKind::Glyphs,
            class_pool: 2,
            ..Default::default()
        })
        .unwrap();
        let p = dir.path().join("g.pgm");
        write_pgm(&p, ds.class_pool.row(0), 16).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 256);
        let c = dir.path().join("p.csv");
        write_points_csv(&c, &Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), Some(&["a".into()])).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert!(text.starts_with("x0,x1,label\n"));
        let pts = Tensor::from_rows(&[vec![0.1, -1.0 / 3.0], vec![2e-300, 5.0]]).unwrap();
        write_points_csv(&c, &pts, None).unwrap();
        assert_eq!(read_points_csv(&c).unwrap(), pts);
        std::fs::write(&c, "x,y,label\n0.5,-0.25,a\n").unwrap();
        assert_eq!(read_points_csv(&c).unwrap().shape(), &[1, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generation_is_seeded_and_normalized(
            seed in any::<u64>(),
            kind in prop::sample::select(vec![DatasetKind::Spiral, DatasetKind::Gmm, DatasetKind::Glyphs]),
            identities in 1usize..8,
            per_identity in 3usize..8,
        ) {
            let spec = DatasetSpec {
                kind,
                seed,
                identities,
                per_identity,
                class_pool: 30,
                ..Default::default()
            };
            let ds = generate(&spec).unwrap();
            prop_assert_eq!(&ds, &generate(&spec).unwrap());
            prop_assert_eq!(ds.identities.len(), identities);
            let range = if kind == DatasetKind::Glyphs { 0.0..=1.0 } else { -1.0..=1.0 };
            for id in &ds.identities {
                prop_assert_eq!(id.samples.rows(), per_identity);
                prop_assert!(id.samples.data().iter().chain(id.reference.data()).all(|v| range.contains(v)));
            }
            prop_assert!(ds.class_pool.data().iter().all(|v| range.contains(v)));
        }
    }
}
