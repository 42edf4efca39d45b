//! Synthetic identity domains, dataset manifests and task-stream files.
//!
//! # Synthetic rendering
//!
//! Every identity has a random valid attribute vector, muted upper/lower body colours and a
//! coloured stripe at an identity-specific height. Each image paints, on a per-domain background:
//!
//! * the body silhouette (`BODY_X`, `BODY_Y`) in the identity colours,
//! * the identity stripe,
//! * twelve `BLOCK_SIZE`² attribute blocks on a 4 × 3 grid (block `i` at row `i / 3`, column
//!   `i % 3`, see [`block_origin`]). An active attribute's block is filled with its saturated
//!   colour from [`ATTRIBUTE_COLORS`]; an inactive one keeps the body colour underneath.
//!
//! The whole figure is shifted by up to `jitter` pixels per image. Pixel values are
//! `clamp(gain_camera · colour + domain_bias + noise)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribute_text::{AttributePredictor, NUM_ATTRIBUTES};
use crate::backbone::{ImageTensor, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_LEN, IMAGE_WIDTH};
use crate::error::{Error, Result};
use crate::lifelong::{DataSample, TaskData};

pub const MANIFEST_MAGIC: &str = "#lreid-manifest v1";
pub const STREAM_MAGIC: &str = "#lreid-stream v1";

pub const BODY_X: (usize, usize) = (20, 108);
pub const BODY_Y: (usize, usize) = (12, 244);
pub const BLOCK_SIZE: usize = 24;

/// Saturated colour of each attribute block when the attribute is present, in schema order.
pub const ATTRIBUTE_COLORS: [[f64; 3]; NUM_ATTRIBUTES] = [
    [0.95, 0.10, 0.55],
    [0.95, 0.10, 0.10],
    [0.10, 0.85, 0.10],
    [0.10, 0.20, 0.95],
    [0.95, 0.85, 0.05],
    [0.05, 0.90, 0.90],
    [0.85, 0.05, 0.95],
    [0.95, 0.55, 0.05],
    [0.05, 0.55, 0.95],
    [0.55, 0.95, 0.05],
    [0.95, 0.05, 0.35],
    [0.05, 0.95, 0.50],
];

/// Top-left corner `(y, x)` of an attribute block before jitter.
pub fn block_origin(attr: usize) -> (usize, usize) {
    (36 + 48 * (attr / 3), 28 + 26 * (attr % 3))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::All, Split::Train, Split::Query, Split::Gallery].into_iter().find(|v| v.as_str() == s)
    }

    pub fn file_name(self) -> String {
        format!("{}.tsv", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub identity: usize,
    pub camera: usize,
    pub attributes: [bool; NUM_ATTRIBUTES],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset: String,
    pub split: Split,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn identities(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn cameras(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.camera).collect()
    }

    /// Checks the per-file invariants: a dataset id, records present, at least two cameras.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() || self.dataset.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!("bad dataset id {:?}", self.dataset)));
        }
        if self.records.is_empty() {
            return Err(Error::Validation(format!("{} {} manifest has no records", self.dataset, self.split)));
        }
        if self.cameras().len() < 2 {
            return Err(Error::Validation(format!("{} {} manifest spans fewer than 2 cameras", self.dataset, self.split)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC} dataset={} split={}\n", self.dataset, self.split);
        for r in &self.records {
            let flags: Vec<&str> = r.attributes.iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path.display(), r.identity, r.camera, flags.join(",")));
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let rest = header.strip_prefix(MANIFEST_MAGIC).ok_or_else(|| perr(1, format!("expected `{MANIFEST_MAGIC}` header")))?;
        let (mut dataset, mut split) = (None, None);
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("dataset", v)) => dataset = Some(v.to_string()),
                Some(("split", v)) => split = Some(Split::parse(v).ok_or_else(|| perr(1, format!("unknown split {v}")))?),
                _ => return Err(perr(1, format!("unexpected header field {kv}"))),
            }
        }
        let dataset = dataset.ok_or_else(|| perr(1, "header lacks dataset=".into()))?;
        let split = split.ok_or_else(|| perr(1, "header lacks split=".into()))?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(perr(n, format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let identity = fields[1].parse().map_err(|_| perr(n, format!("bad identity {:?}", fields[1])))?;
            let camera = fields[2].parse().map_err(|_| perr(n, format!("bad camera {:?}", fields[2])))?;
            let flags: Vec<&str> = fields[3].split(',').collect();
            if flags.len() != NUM_ATTRIBUTES {
                return Err(perr(n, format!("expected {NUM_ATTRIBUTES} attribute flags, found {}", flags.len())));
            }
            let mut attributes = [false; NUM_ATTRIBUTES];
            for (a, f) in attributes.iter_mut().zip(&flags) {
                *a = match *f {
                    "0" => false,
                    "1" => true,
                    other => return Err(perr(n, format!("attribute flag {other:?} is not 0 or 1"))),
                };
            }
            if fields[0].is_empty() {
                return Err(perr(n, "empty image path".into()));
            }
            records.push(ManifestRecord { path: PathBuf::from(fields[0]), identity, camera, attributes });
        }
        Ok(Self { dataset, split, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a single manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = DatasetManifest::parse(&text, &path.display().to_string())?;
    m.validate()?;
    Ok(m)
}

/// Query/gallery invariants: same dataset, every query identity present in the gallery.
pub fn validate_eval_pair(query: &DatasetManifest, gallery: &DatasetManifest) -> Result<()> {
    if query.dataset != gallery.dataset {
        return Err(Error::Validation(format!("query of {} paired with gallery of {}", query.dataset, gallery.dataset)));
    }
    let g = gallery.identities();
    if let Some(missing) = query.identities().iter().find(|id| !g.contains(id)) {
        return Err(Error::Validation(format!("query identity {missing} of {} is absent from the gallery", query.dataset)));
    }
    Ok(())
}

/// Train, query and gallery manifests of one dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub root: PathBuf,
    pub train: DatasetManifest,
    pub query: DatasetManifest,
    pub gallery: DatasetManifest,
}

impl DatasetSplits {
    pub fn load(root: &Path) -> Result<Self> {
        let train = load_manifest(&root.join(Split::Train.file_name()))?;
        let query = load_manifest(&root.join(Split::Query.file_name()))?;
        let gallery = load_manifest(&root.join(Split::Gallery.file_name()))?;
        validate_eval_pair(&query, &gallery)?;
        let train_ids = train.identities();
        if let Some(id) = gallery.identities().iter().find(|id| train_ids.contains(id)) {
            return Err(Error::Validation(format!("identity {id} of {} is in both train and test", train.dataset)));
        }
        Ok(Self { root: root.to_path_buf(), train, query, gallery })
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for m in [&self.train, &self.query, &self.gallery] {
            m.write(&self.root.join(m.split.file_name()))?;
        }
        Ok(())
    }

    pub fn dataset(&self) -> &str {
        &self.train.dataset
    }
}

/// Loads a PNG/JPEG (resized to 256×128 if needed) as an [`ImageTensor`].
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut rgb = img.to_rgb8();
    if rgb.dimensions() != (IMAGE_WIDTH as u32, IMAGE_HEIGHT as u32) {
        rgb = image::imageops::resize(&rgb, IMAGE_WIDTH as u32, IMAGE_HEIGHT as u32, image::imageops::FilterType::Triangle);
    }
    let mut pixels = vec![0f32; IMAGE_LEN];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..IMAGE_CHANNELS {
            pixels[(c * IMAGE_HEIGHT + y as usize) * IMAGE_WIDTH + x as usize] = f32::from(p[c]) / 255.0;
        }
    }
    ImageTensor::new(pixels)
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(IMAGE_WIDTH as u32, IMAGE_HEIGHT as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..IMAGE_CHANNELS {
            p[c] = (img.at(c, y as usize, x as usize) * 255.0).round() as u8;
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads a manifest's images; `identity_map` assigns each raw identity its global label.
pub fn load_samples(
    root: &Path,
    manifest: &DatasetManifest,
    identity_map: &BTreeMap<usize, usize>,
    predictor: &dyn AttributePredictor,
) -> Result<Vec<DataSample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = resolve(root, &r.path);
            let identity = *identity_map
                .get(&r.identity)
                .ok_or_else(|| Error::invalid(format!("identity {} has no label", r.identity)))?;
            Ok(DataSample {
                image: Arc::new(load_image(&path)?),
                identity,
                camera: r.camera,
                dataset: manifest.dataset.clone(),
                attributes: predictor.predict(r)?,
                source: Some(path),
            })
        })
        .collect()
}

/// Training data of one dataset with identities relabelled to `offset..offset + k`.
pub fn load_task_data(splits: &DatasetSplits, offset: usize, predictor: &dyn AttributePredictor) -> Result<TaskData> {
    let map: BTreeMap<usize, usize> = splits.train.identities().into_iter().enumerate().map(|(i, id)| (id, offset + i)).collect();
    Ok(TaskData { dataset: splits.dataset().to_string(), samples: load_samples(&splits.root, &splits.train, &map, predictor)? })
}

/// Query or gallery samples keeping raw identity labels.
pub fn load_eval_samples(splits: &DatasetSplits, split: Split, predictor: &dyn AttributePredictor) -> Result<Vec<DataSample>> {
    let m = match split {
        Split::Query => &splits.query,
        Split::Gallery => &splits.gallery,
        Split::Train => &splits.train,
        Split::All => return Err(Error::invalid("evaluation needs a query, gallery or train split")),
    };
    let map: BTreeMap<usize, usize> = m.identities().into_iter().map(|id| (id, id)).collect();
    load_samples(&splits.root, m, &map, predictor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dataset: String,
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    pub background: [f64; 3],
    /// Added to every channel of every pixel of the domain.
    pub color_bias: [f64; 3],
    pub noise: f64,
    /// Camera gains are drawn uniformly from `1 ± camera_gain_spread`.
    pub camera_gain_spread: f64,
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset: "synth0".into(),
            n_identities: 20,
            images_per_identity: 8,
            n_cameras: 4,
            background: [0.35, 0.45, 0.35],
            color_bias: [0.0; 3],
            noise: 0.05,
            camera_gain_spread: 0.15,
            jitter: 3,
            seed: 0,
        }
    }
}

const DOMAIN_BACKGROUNDS: [[f64; 3]; 5] =
    [[0.35, 0.45, 0.35], [0.70, 0.70, 0.75], [0.15, 0.15, 0.25], [0.55, 0.40, 0.30], [0.85, 0.80, 0.60]];
const DOMAIN_BIASES: [[f64; 3]; 5] =
    [[0.0, 0.0, 0.0], [0.15, 0.05, -0.10], [-0.12, -0.08, 0.10], [0.05, -0.15, -0.10], [-0.10, 0.12, 0.15]];
const DOMAIN_NOISE: [f64; 5] = [0.05, 0.08, 0.04, 0.10, 0.06];

impl SynthConfig {
    /// The `index`-th preset domain; presets cycle through five background/bias/noise settings.
    pub fn domain(index: usize, seed: u64) -> Self {
        Self {
            dataset: format!("synth{index}"),
            background: DOMAIN_BACKGROUNDS[index % DOMAIN_BACKGROUNDS.len()],
            color_bias: DOMAIN_BIASES[index % DOMAIN_BIASES.len()],
            noise: DOMAIN_NOISE[index % DOMAIN_NOISE.len()],
            seed: seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: format!("synth.{key}"), msg: msg.into() });
        if self.n_identities == 0 {
            return bad("n_identities", "must be positive");
        }
        if self.images_per_identity == 0 {
            return bad("images_per_identity", "must be positive");
        }
        if self.n_cameras == 0 {
            return bad("n_cameras", "must be positive");
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad("noise", "must lie in [0, 0.5]");
        }
        if !(0.0..1.0).contains(&self.camera_gain_spread) {
            return bad("camera_gain_spread", "must lie in [0, 1)");
        }
        if self.jitter > 8 {
            return bad("jitter", "at most 8 pixels");
        }
        if self.dataset.is_empty() || self.dataset.chars().any(char::is_whitespace) {
            return bad("dataset", "must be a non-empty id without whitespace");
        }
        Ok(())
    }
}

/// Appearance of one synthetic identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub attributes: [bool; NUM_ATTRIBUTES],
    pub upper: [f64; 3],
    pub lower: [f64; 3],
    pub stripe: [f64; 3],
    pub stripe_y: usize,
}

fn muted_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let base: f64 = rng.random_range(0.25..0.65);
    [0, 1, 2].map(|_| base + rng.random_range(-0.07..0.07))
}

fn random_identity<R: Rng + ?Sized>(rng: &mut R) -> SyntheticIdentity {
    let mut a = [false; NUM_ATTRIBUTES];
    a[0] = rng.random_bool(0.5);
    if rng.random_bool(0.5) {
        a[1] = true;
    } else {
        a[2] = true;
    }
    a[3] = rng.random_bool(0.25);
    a[4 + rng.random_range(0..3)] = true;
    for flag in &mut a[7..] {
        *flag = rng.random_bool(0.35);
    }
    SyntheticIdentity {
        attributes: a,
        upper: muted_color(rng),
        lower: muted_color(rng),
        stripe: muted_color(rng).map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.05, 0.95)),
        stripe_y: rng.random_range(BODY_Y.0 + 4..BODY_Y.1 - 12),
    }
}

/// The identities of a domain, in identity order.
pub fn identity_profiles(cfg: &SynthConfig) -> Vec<SyntheticIdentity> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_identities).map(|_| random_identity(&mut rng)).collect()
}

/// Per-camera gains of a domain.
pub fn camera_gains(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xca3e_7a00);
    (0..cfg.n_cameras).map(|_| 1.0 + rng.random_range(-1.0..=1.0) * cfg.camera_gain_spread).collect()
}

/// Renders one image of `who` seen by a camera with gain `gain`.
pub fn render_identity<R: Rng + ?Sized>(cfg: &SynthConfig, who: &SyntheticIdentity, gain: f64, rng: &mut R) -> ImageTensor {
    let j = cfg.jitter as i64;
    let dy = if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let dx = if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let mut canvas = vec![cfg.background; IMAGE_HEIGHT * IMAGE_WIDTH];
    let mut fill = |y0: usize, y1: usize, x0: usize, x1: usize, color: [f64; 3]| {
        for y in y0..y1 {
            let yy = y as i64 + dy;
            if !(0..IMAGE_HEIGHT as i64).contains(&yy) {
                continue;
            }
            for x in x0..x1 {
                let xx = x as i64 + dx;
                if (0..IMAGE_WIDTH as i64).contains(&xx) {
                    canvas[yy as usize * IMAGE_WIDTH + xx as usize] = color;
                }
            }
        }
    };
    let mid = (BODY_Y.0 + BODY_Y.1) / 2;
    fill(BODY_Y.0, mid, BODY_X.0, BODY_X.1, who.upper);
    fill(mid, BODY_Y.1, BODY_X.0, BODY_X.1, who.lower);
    fill(who.stripe_y, who.stripe_y + 8, BODY_X.0, BODY_X.1, who.stripe);
    for (i, &on) in who.attributes.iter().enumerate() {
        if on {
            let (y, x) = block_origin(i);
            fill(y, y + BLOCK_SIZE, x, x + BLOCK_SIZE, ATTRIBUTE_COLORS[i]);
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut pixels = vec![0f32; IMAGE_LEN];
    for c in 0..IMAGE_CHANNELS {
        for (i, px) in canvas.iter().enumerate() {
            let n = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            pixels[c * IMAGE_HEIGHT * IMAGE_WIDTH + i] = (gain * px[c] + cfg.color_bias[c] + n).clamp(0.0, 1.0) as f32;
        }
    }
    ImageTensor::new(pixels).expect("rendered pixels are clamped to [0, 1]")
}

/// Writes `images/*.png` and `all.tsv` under `out_dir`; returns the manifest.
pub fn generate_domain(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let profiles = identity_profiles(cfg);
    let gains = camera_gains(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a6e_5eed);
    let mut records = Vec::new();
    for (id, who) in profiles.iter().enumerate() {
        for k in 0..cfg.images_per_identity {
            let camera = k % cfg.n_cameras;
            let img = render_identity(cfg, who, gains[camera], &mut rng);
            let rel = PathBuf::from("images").join(format!("id{id:04}_c{camera}_{k:03}.png"));
            save_image(&img, &out_dir.join(&rel))?;
            records.push(ManifestRecord { path: rel, identity: id, camera, attributes: who.attributes });
        }
    }
    let manifest = DatasetManifest { dataset: cfg.dataset.clone(), split: Split::All, records };
    manifest.write(&out_dir.join(Split::All.file_name()))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.5, seed: 0 }
    }
}

/// Identity-disjoint train/test split; each test identity gives one query image per camera
/// (the first in manifest order) and the rest to the gallery.
///
/// Test identities seen by only one camera get no query, with a warning.
pub fn split_domain(manifest: &DatasetManifest, cfg: &SplitConfig, root: &Path) -> Result<DatasetSplits> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config { key: "split.train_fraction".into(), msg: "must lie strictly between 0 and 1".into() });
    }
    let mut ids: Vec<usize> = manifest.identities().into_iter().collect();
    let n_train = ((ids.len() as f64) * cfg.train_fraction).round() as usize;
    if n_train == 0 || n_train >= ids.len() {
        return Err(Error::invalid(format!("{} identities cannot fill both splits", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let train_ids: BTreeSet<usize> = ids[..n_train].iter().copied().collect();
    let mk = |split, records| DatasetManifest { dataset: manifest.dataset.clone(), split, records };
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut by_id: BTreeMap<usize, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in &manifest.records {
        if train_ids.contains(&r.identity) {
            train.push(r.clone());
        } else {
            by_id.entry(r.identity).or_default().push(r);
        }
    }
    for (id, recs) in by_id {
        let cams: BTreeSet<usize> = recs.iter().map(|r| r.camera).collect();
        if cams.len() < 2 {
            warn!("identity {id} of {} appears in one camera only; excluded from the query set", manifest.dataset);
            gallery.extend(recs.into_iter().cloned());
            continue;
        }
        let mut taken = BTreeSet::new();
        for r in recs {
            if taken.insert(r.camera) {
                query.push(r.clone());
            } else {
                gallery.push(r.clone());
            }
        }
    }
    let mut splits = DatasetSplits {
        root: root.to_path_buf(),
        train: mk(Split::Train, train),
        query: mk(Split::Query, query),
        gallery: mk(Split::Gallery, gallery),
    };
    // an identity whose images all went to the query set has nothing to match
    let g_ids = splits.gallery.identities();
    let q_only: BTreeSet<usize> = splits.query.identities().difference(&g_ids).copied().collect();
    if !q_only.is_empty() {
        warn!("{} identities of {} lack gallery images; moved to the gallery", q_only.len(), manifest.dataset);
        let (moved, kept): (Vec<_>, Vec<_>) = splits.query.records.drain(..).partition(|r| q_only.contains(&r.identity));
        splits.query.records = kept;
        splits.gallery.records.extend(moved);
    }
    Ok(splits)
}

/// Generates a domain and writes its split manifests next to the images.
pub fn make_synthetic_dataset(cfg: &SynthConfig, split: &SplitConfig, out_dir: &Path) -> Result<DatasetSplits> {
    let all = generate_domain(cfg, out_dir)?;
    let splits = split_domain(&all, split, out_dir)?;
    splits.write()?;
    Ok(splits)
}

/// One entry of a task stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamEntry {
    pub dir: PathBuf,
    pub seen: bool,
}

/// Ordered training datasets plus held-out (unseen) evaluation datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskStream {
    pub entries: Vec<StreamEntry>,
}

impl TaskStream {
    pub fn seen(&self) -> impl Iterator<Item = &Path> {
        self.entries.iter().filter(|e| e.seen).map(|e| e.dir.as_path())
    }

    pub fn unseen(&self) -> impl Iterator<Item = &Path> {
        self.entries.iter().filter(|e| !e.seen).map(|e| e.dir.as_path())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen().next().is_none() {
            return Err(Error::Validation("task stream has no seen datasets".into()));
        }
        let mut dirs = BTreeSet::new();
        for e in &self.entries {
            if !dirs.insert(&e.dir) {
                return Err(Error::Validation(format!("{} is listed twice", e.dir.display())));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{STREAM_MAGIC}\n");
        for e in &self.entries {
            out.push_str(&format!("{} {}\n", if e.seen { "seen" } else { "unseen" }, e.dir.display()));
        }
        out
    }

    /// Parses the stream format; relative directories are resolved against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == STREAM_MAGIC => {}
            _ => return Err(perr(1, format!("expected `{STREAM_MAGIC}` header"))),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, dir) = line.split_once(char::is_whitespace).ok_or_else(|| perr(i + 1, "expected `<seen|unseen> <dir>`".into()))?;
            let seen = match tag {
                "seen" => true,
                "unseen" => false,
                other => return Err(perr(i + 1, format!("unknown tag {other:?}"))),
            };
            entries.push(StreamEntry { dir: resolve(base, Path::new(dir.trim())), seen });
        }
        let stream = Self { entries };
        stream.validate()?;
        Ok(stream)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent().unwrap_or(Path::new(".")))
    }
}
