//! Dataset ingestion and the synthetic stick-figure dataset.
//!
//! On disk a dataset is a directory with `images/*.png`, a `keypoints.tsv`
//! annotation file (one record per image: image id followed by 18 integer
//! (x, y) pairs, (-1, -1) for invisible joints), and `index_train.tsv` /
//! `index_test.tsv` listing `identity <tab> image_path <tab>
//! annotation_row_id`. Training pairs are ordered (condition, target)
//! pairs of images sharing an identity.
//!
//! The toy generator renders colored stick figures from random but
//! anatomically plausible 18-joint poses, with per-identity limb colors so
//! appearance transfer is learnable, and writes ground-truth annotations.
//! Generation is a pure function of its spec.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, DataConfig, MorphologyParams, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::pose::{compute_pose_mask, encode_heatmaps, flip_pair, Keypoint, KeypointSet, PoseMask, PoseTensor};

pub const INDEX_TRAIN: &str = "index_train.tsv";
pub const INDEX_TEST: &str = "index_test.tsv";
pub const KEYPOINT_FILE: &str = "keypoints.tsv";
pub const IMAGE_DIR: &str = "images";
pub const TOY_MANIFEST: &str = "toy_spec.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn index_file(self) -> &'static str {
        match self {
            Split::Train => INDEX_TRAIN,
            Split::Test => INDEX_TEST,
        }
    }
}

/// One indexed image.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub identity: String,
    pub image_path: String,
    pub annotation_id: String,
}

/// An ordered (condition, target) pair of record indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    pub condition: usize,
    pub target: usize,
}

/// A loaded training sample with derived pose tensors.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub condition_image: ImageTensor,
    pub target_image: ImageTensor,
    pub target_keypoints: KeypointSet,
    pub identity: String,
    pub pose: PoseTensor,
    pub mask: PoseMask,
}

/// An index over one split of a dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<Record>,
    annotations: BTreeMap<String, KeypointSet>,
}

impl Dataset {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let annotations = load_annotations(&root.join(KEYPOINT_FILE))?;
        let index_path = root.join(split.index_file());
        let content = std::fs::read_to_string(&index_path).map_err(|e| Error::DataFile {
            path: index_path.clone(),
            msg: e.to_string(),
        })?;
        let mut records = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::DataFile {
                    path: index_path.clone(),
                    msg: format!("line {}: expected 3 columns, got {}", lineno + 1, cols.len()),
                });
            }
            let rec = Record {
                identity: cols[0].to_string(),
                image_path: cols[1].to_string(),
                annotation_id: cols[2].to_string(),
            };
            if !annotations.contains_key(&rec.annotation_id) {
                return Err(Error::DataFile {
                    path: index_path.clone(),
                    msg: format!(
                        "line {}: annotation `{}` not found in {}",
                        lineno + 1,
                        rec.annotation_id,
                        KEYPOINT_FILE
                    ),
                });
            }
            records.push(rec);
        }
        Ok(Self { root: root.to_path_buf(), records, annotations })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.identity.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn keypoints(&self, record: &Record) -> &KeypointSet {
        &self.annotations[&record.annotation_id]
    }

    /// All ordered within-identity pairs `(a, b)`, `a != b`, optionally
    /// capped per identity (0 = unlimited). The transfer task is
    /// directional, so both orderings of two images are distinct pairs.
    pub fn build_pairs(&self, cap_per_identity: usize) -> Vec<PairRef> {
        let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            by_identity.entry(&r.identity).or_default().push(i);
        }
        let mut pairs = Vec::new();
        for (_, mut members) in by_identity {
            members.sort_by(|&a, &b| self.records[a].image_path.cmp(&self.records[b].image_path));
            let mut taken = 0usize;
            'outer: for &a in &members {
                for &b in &members {
                    if a == b {
                        continue;
                    }
                    pairs.push(PairRef { condition: a, target: b });
                    taken += 1;
                    if cap_per_identity > 0 && taken >= cap_per_identity {
                        break 'outer;
                    }
                }
            }
        }
        pairs
    }

    /// Load, normalize and (optionally) flip a pair, deriving the target
    /// heatmaps and pose mask after augmentation.
    pub fn load_pair(
        &self,
        pair: PairRef,
        flip: bool,
        data_cfg: &DataConfig,
        morph: &MorphologyParams,
    ) -> Result<PairSample> {
        let cond_rec = &self.records[pair.condition];
        let tgt_rec = &self.records[pair.target];
        if cond_rec.identity != tgt_rec.identity {
            return Err(Error::Data(format!(
                "pair crosses identities {} and {}",
                cond_rec.identity, tgt_rec.identity
            )));
        }
        let mut condition_image = ImageTensor::load_png(&self.root.join(&cond_rec.image_path))?;
        let mut target_image = ImageTensor::load_png(&self.root.join(&tgt_rec.image_path))?;
        let mut target_keypoints = self.annotations[&tgt_rec.annotation_id].clone();

        let (h, w) = (data_cfg.image_height, data_cfg.image_width);
        for (what, img) in [("condition", &condition_image), ("target", &target_image)] {
            if img.dims() != (h, w) {
                return Err(Error::Data(format!(
                    "{what} image {} is {:?}, config expects {h}x{w}",
                    cond_rec.image_path,
                    img.dims()
                )));
            }
        }
        target_keypoints.check_bounds(h, w)?;

        if flip {
            // the whole pair flips together: flipping only one side would
            // change the transfer task
            condition_image = condition_image.flip_horizontal();
            let (ti, tk) = flip_pair(&target_image, &target_keypoints);
            target_image = ti;
            target_keypoints = tk;
        }

        let pose = encode_heatmaps(&target_keypoints, h, w, data_cfg.heatmap_radius)?;
        let mask = compute_pose_mask(&target_keypoints, h, w, morph);
        #[cfg(debug_assertions)]
        debug_assert!(mask_covers_heatmaps(&pose, &mask), "pose mask lost the superset property");

        Ok(PairSample {
            condition_image,
            target_image,
            target_keypoints,
            identity: tgt_rec.identity.clone(),
            pose,
            mask,
        })
    }
}

#[cfg(debug_assertions)]
fn mask_covers_heatmaps(pose: &PoseTensor, mask: &PoseMask) -> bool {
    let (k, h, w) = pose.channels().dim();
    for c in 0..k {
        for y in 0..h {
            for x in 0..w {
                if pose.channels()[[c, y, x]] == 1.0 && mask.mask()[[y, x]] == 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

fn load_annotations(path: &Path) -> Result<BTreeMap<String, KeypointSet>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut map = BTreeMap::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let id = cols[0].to_string();
        let coords: Vec<i32> = cols[1..]
            .iter()
            .map(|s| s.parse::<i32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::DataFile {
                path: path.to_path_buf(),
                msg: format!("record `{id}` (line {}): {e}", lineno + 1),
            })?;
        if coords.len() != 2 * NUM_JOINTS {
            return Err(Error::DataFile {
                path: path.to_path_buf(),
                msg: format!(
                    "record `{id}` (line {}): expected {} joints, got {}",
                    lineno + 1,
                    NUM_JOINTS,
                    coords.len() / 2
                ),
            });
        }
        map.insert(id, KeypointSet::from_flat(&coords)?);
    }
    Ok(map)
}

/// Deterministically sample `k` pairs without replacement.
pub fn sample_pairs(pairs: &[PairRef], k: usize, seed: u64) -> Vec<PairRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample_pairs"));
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx.into_iter().take(k.min(pairs.len())).map(|i| pairs[i]).collect()
}

// ---------------------------------------------------------------------------
// Toy dataset
// ---------------------------------------------------------------------------

/// Everything needed to regenerate a toy dataset byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    /// Square image side in pixels; at least 24.
    pub image_size: usize,
    pub seed: u64,
    /// Identities reserved for the held-out test split.
    pub test_identities: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_identities: 6,
            images_per_identity: 4,
            image_size: 32,
            seed: 0,
            test_identities: 2,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.images_per_identity == 0 {
            return Err(Error::Config("toy spec needs identities and images".into()));
        }
        if self.test_identities >= self.num_identities {
            return Err(Error::Config(
                "test_identities must leave at least one training identity".into(),
            ));
        }
        if self.image_size < 24 {
            return Err(Error::Config("toy image_size must be at least 24".into()));
        }
        Ok(())
    }
}

/// Distinct-ish identity palette: torso, arm, leg, head colors in RGB8.
fn identity_palette(rng: &mut ChaCha8Rng) -> [[u8; 3]; 4] {
    let mut colors = [[0u8; 3]; 4];
    for color in colors.iter_mut() {
        // bright saturated hues on a dark background
        let hue: f64 = rng.random_range(0.0..360.0);
        let (r, g, b) = hsv_to_rgb(hue, 0.85, rng.random_range(0.7..1.0));
        *color = [r, g, b];
    }
    colors
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    )
}

/// Sample an 18-joint stick-figure pose, all joints visible and inside the
/// margins of an `s`-pixel square image.
fn sample_pose(s: f64, rng: &mut ChaCha8Rng) -> [(f64, f64); NUM_JOINTS] {
    let deg = std::f64::consts::PI / 180.0;
    let cx = s * 0.5 + rng.random_range(-0.03..0.03) * s;
    let lean = rng.random_range(-6.0..6.0) * deg;

    let pelvis_y = 0.58 * s;
    let neck_y = 0.34 * s;
    let torso_len = pelvis_y - neck_y;
    let neck = (cx + torso_len * lean.sin(), neck_y);
    let pelvis = (cx, pelvis_y);

    let nose = (neck.0 + rng.random_range(-0.02..0.02) * s, neck.1 - 0.10 * s);
    let eye_dx = 0.035 * s;
    let ear_dx = 0.065 * s;
    let r_eye = (nose.0 - eye_dx, nose.1 - 0.02 * s);
    let l_eye = (nose.0 + eye_dx, nose.1 - 0.02 * s);
    let r_ear = (nose.0 - ear_dx, nose.1 - 0.005 * s);
    let l_ear = (nose.0 + ear_dx, nose.1 - 0.005 * s);

    let sh_dx = 0.14 * s;
    let r_shoulder = (neck.0 - sh_dx, neck.1 + 0.01 * s);
    let l_shoulder = (neck.0 + sh_dx, neck.1 + 0.01 * s);
    let upper_arm = 0.14 * s;
    let forearm = 0.13 * s;
    let limb = |base: (f64, f64), len: f64, angle: f64| -> (f64, f64) {
        (base.0 + len * angle.sin(), base.1 + len * angle.cos())
    };
    // arm angles measured from straight down, opening outward
    let r_arm = rng.random_range(5.0..60.0) * deg;
    let l_arm = rng.random_range(5.0..60.0) * deg;
    let r_elbow = limb(r_shoulder, upper_arm, -r_arm);
    let l_elbow = limb(l_shoulder, upper_arm, l_arm);
    let r_fore = -r_arm + rng.random_range(-40.0..30.0) * deg;
    let l_fore = l_arm + rng.random_range(-30.0..40.0) * deg;
    let r_wrist = limb(r_elbow, forearm, r_fore);
    let l_wrist = limb(l_elbow, forearm, l_fore);

    let hip_dx = 0.08 * s;
    let r_hip = (pelvis.0 - hip_dx, pelvis.1);
    let l_hip = (pelvis.0 + hip_dx, pelvis.1);
    let thigh = 0.16 * s;
    let shin = 0.15 * s;
    let r_leg = rng.random_range(-8.0..25.0) * deg;
    let l_leg = rng.random_range(-8.0..25.0) * deg;
    let r_knee = limb(r_hip, thigh, -r_leg);
    let l_knee = limb(l_hip, thigh, l_leg);
    let r_shin = -r_leg + rng.random_range(-15.0..15.0) * deg;
    let l_shin = l_leg + rng.random_range(-15.0..15.0) * deg;
    let r_ankle = limb(r_knee, shin, r_shin);
    let l_ankle = limb(l_knee, shin, l_shin);

    [
        nose, neck, r_shoulder, r_elbow, r_wrist, l_shoulder, l_elbow, l_wrist, r_hip, r_knee,
        r_ankle, l_hip, l_knee, l_ankle, r_eye, l_eye, r_ear, l_ear,
    ]
}

fn to_keypoints(joints: &[(f64, f64); NUM_JOINTS], s: usize) -> KeypointSet {
    let lo = 2i32;
    let hi = s as i32 - 3;
    let mut pts = [Keypoint::invisible(); NUM_JOINTS];
    for (k, &(x, y)) in joints.iter().enumerate() {
        pts[k] = Keypoint::visible(
            (x.round() as i32).clamp(lo, hi),
            (y.round() as i32).clamp(lo, hi),
        );
    }
    KeypointSet::new(pts)
}

const TOY_BACKGROUND: [u8; 3] = [28, 28, 32];

fn stroke(
    canvas: &mut Array3<f64>,
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    color: [u8; 3],
) {
    let (_, h, w) = canvas.dim();
    let x_lo = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let x_hi = (a.0.max(b.0) + radius).ceil().min(w as f64 - 1.0) as usize;
    let y_lo = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let y_hi = (a.1.max(b.1) + radius).ceil().min(h as f64 - 1.0) as usize;
    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
    let len2 = ex * ex + ey * ey;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - a.0) * ex + (py - a.1) * ey) / len2).clamp(0.0, 1.0)
            };
            let (dx, dy) = (px - (a.0 + t * ex), py - (a.1 + t * ey));
            if dx * dx + dy * dy <= radius * radius {
                for c in 0..3 {
                    canvas[[c, y, x]] = color[c] as f64 / 255.0 * 2.0 - 1.0;
                }
            }
        }
    }
}

/// Render one stick figure. Stroke radii stay comfortably inside the
/// default pose-mask morphology so rendered pixels are always covered.
fn render_figure(joints: &[(f64, f64); NUM_JOINTS], kp: &KeypointSet, s: usize, palette: &[[u8; 3]; 4]) -> ImageTensor {
    let [torso, arms, legs, head] = *palette;
    let mut canvas = Array3::zeros((3, s, s));
    for c in 0..3 {
        canvas
            .slice_mut(ndarray::s![c, .., ..])
            .fill(TOY_BACKGROUND[c] as f64 / 255.0 * 2.0 - 1.0);
    }
    // rasterize from the *integer* keypoints so rendering and annotation agree
    let j = |k: usize| {
        let p = kp.points()[k];
        (p.x as f64, p.y as f64)
    };
    let _ = joints;
    let scale = s as f64 / 32.0;
    let limb_r = 1.6 * scale;
    let torso_r = 2.4 * scale;

    // legs
    for (a, b) in [(8, 9), (9, 10), (11, 12), (12, 13)] {
        stroke(&mut canvas, j(a), j(b), limb_r, legs);
    }
    // torso: spine plus shoulder and hip bars
    let pelvis_mid = ((j(8).0 + j(11).0) / 2.0, (j(8).1 + j(11).1) / 2.0);
    stroke(&mut canvas, j(1), pelvis_mid, torso_r, torso);
    stroke(&mut canvas, j(2), j(5), torso_r * 0.8, torso);
    stroke(&mut canvas, j(8), j(11), torso_r * 0.8, torso);
    // arms
    for (a, b) in [(2, 3), (3, 4), (5, 6), (6, 7)] {
        stroke(&mut canvas, j(a), j(b), limb_r, arms);
    }
    // head: disk around the eye/nose centroid
    let head_c = (
        (j(0).0 + j(14).0 + j(15).0) / 3.0,
        (j(0).1 + j(14).1 + j(15).1) / 3.0,
    );
    stroke(&mut canvas, head_c, head_c, 2.4 * scale, head);

    ImageTensor::new(canvas).expect("rendered values are in range")
}

fn toy_image_id(identity: usize, image: usize) -> String {
    format!("id{identity:03}_img{image:03}")
}

fn toy_identity_name(identity: usize) -> String {
    format!("id{identity:03}")
}

/// Generate the toy dataset under `out_dir`: images, annotation file,
/// train/test indexes (disjoint identities) and the spec manifest.
/// Byte-identical for equal specs.
pub fn make_toy_dataset(spec: &ToySpec, out_dir: &Path) -> Result<()> {
    spec.validate()?;
    let image_dir = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir)?;

    let s = spec.image_size;
    let mut keypoint_lines = Vec::new();
    let mut train_lines = Vec::new();
    let mut test_lines = Vec::new();

    for identity in 0..spec.num_identities {
        let mut id_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("toy.identity.{identity}")));
        let palette = identity_palette(&mut id_rng);
        for image in 0..spec.images_per_identity {
            let mut pose_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                &format!("toy.pose.{identity}.{image}"),
            ));
            let joints = sample_pose(s as f64, &mut pose_rng);
            let kp = to_keypoints(&joints, s);
            let img = render_figure(&joints, &kp, s, &palette);

            let id = toy_image_id(identity, image);
            let rel_path = format!("{IMAGE_DIR}/{id}.png");
            img.save_png(&out_dir.join(&rel_path))?;

            let mut line = id.clone();
            for p in kp.points() {
                line.push_str(&format!("\t{}\t{}", p.x, p.y));
            }
            keypoint_lines.push(line);

            let index_line = format!("{}\t{}\t{}", toy_identity_name(identity), rel_path, id);
            if identity < spec.num_identities - spec.test_identities {
                train_lines.push(index_line);
            } else {
                test_lines.push(index_line);
            }
        }
    }

    std::fs::write(out_dir.join(KEYPOINT_FILE), keypoint_lines.join("\n") + "\n")?;
    std::fs::write(out_dir.join(INDEX_TRAIN), train_lines.join("\n") + "\n")?;
    std::fs::write(out_dir.join(INDEX_TEST), test_lines.join("\n") + "\n")?;
    let manifest = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::Data(format!("toy manifest: {e}")))?;
    std::fs::write(out_dir.join(TOY_MANIFEST), manifest + "\n")?;
    Ok(())
}

/// Load the spec manifest of a generated toy dataset.
pub fn load_toy_spec(dir: &Path) -> Result<ToySpec> {
    let path = dir.join(TOY_MANIFEST);
    let content = std::fs::read_to_string(&path)
        .map_err(|e| Error::DataFile { path: path.clone(), msg: e.to_string() })?;
    serde_json::from_str(&content)
        .map_err(|e| Error::DataFile { path, msg: format!("bad toy manifest: {e}") })
}
