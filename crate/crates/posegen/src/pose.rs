//! Pose codec: keypoint annotations to network-ready heatmaps and
//! foreground masks, plus pose-aware left-right flip augmentation.
//!
//! A pose is 18 ordered joints. Invisible joints carry the sentinel
//! coordinate (-1, -1). Heatmaps are binary disks of a fixed radius around
//! each visible joint; the foreground mask connects visible joints along
//! the skeleton with thick segments and closes the result morphologically
//! so it covers the whole figure.

use ndarray::{Array2, Array3};

use crate::config::{MorphologyParams, NUM_JOINTS, SYMMETRIC_JOINTS};
use crate::error::{Error, Result};
use crate::img::ImageTensor;

/// One joint annotation: pixel column, pixel row, visibility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: i32,
    pub y: i32,
    pub visible: bool,
}

impl Keypoint {
    pub fn visible(x: i32, y: i32) -> Self {
        Self { x, y, visible: true }
    }

    pub fn invisible() -> Self {
        Self { x: -1, y: -1, visible: false }
    }
}

/// 18 ordered joints in the fixed skeleton convention (see
/// [`crate::config::NUM_JOINTS`]).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: [Keypoint; NUM_JOINTS],
}

impl KeypointSet {
    pub fn new(points: [Keypoint; NUM_JOINTS]) -> Self {
        Self { points }
    }

    /// Parse from 36 integers, x/y interleaved, (-1, -1) marking invisible.
    pub fn from_flat(coords: &[i32]) -> Result<Self> {
        if coords.len() != 2 * NUM_JOINTS {
            return Err(Error::Data(format!(
                "expected {} coordinates, got {}",
                2 * NUM_JOINTS,
                coords.len()
            )));
        }
        let mut points = [Keypoint::invisible(); NUM_JOINTS];
        for (k, point) in points.iter_mut().enumerate() {
            let (x, y) = (coords[2 * k], coords[2 * k + 1]);
            *point = if x < 0 || y < 0 {
                Keypoint::invisible()
            } else {
                Keypoint::visible(x, y)
            };
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Keypoint; NUM_JOINTS] {
        &self.points
    }

    pub fn num_visible(&self) -> usize {
        self.points.iter().filter(|p| p.visible).count()
    }

    /// Bounds check against an image size.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (k, p) in self.points.iter().enumerate() {
            if p.visible && (p.x < 0 || p.y < 0 || p.x as usize >= width || p.y as usize >= height)
            {
                return Err(Error::Data(format!(
                    "keypoint {k} at ({}, {}) outside {width}x{height}",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    /// Raw coordinates as 36 reals, in annotation order (sentinels kept).
    pub fn flat_coords(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * NUM_JOINTS);
        for p in &self.points {
            out.push(p.x as f64);
            out.push(p.y as f64);
        }
        out
    }

    /// Mirror across the vertical axis of a width-`w` image, swapping
    /// left/right symmetric joints.
    pub fn flip_horizontal(&self, width: usize) -> Self {
        let mut pts = self.points;
        for p in pts.iter_mut() {
            if p.visible {
                p.x = width as i32 - 1 - p.x;
            }
        }
        for &(a, b) in &SYMMETRIC_JOINTS {
            pts.swap(a, b);
        }
        Self { points: pts }
    }
}

/// 18 binary heatmap channels, `[18, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTensor {
    channels: Array3<f64>,
    radius: usize,
}

impl PoseTensor {
    pub fn channels(&self) -> &Array3<f64> {
        &self.channels
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.channels.dim();
        (h, w)
    }
}

/// Binary foreground mask `[h, w]` with the morphology that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMask {
    mask: Array2<f64>,
    provenance: MorphologyParams,
}

impl PoseMask {
    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }

    pub fn provenance(&self) -> &MorphologyParams {
        &self.provenance
    }

    pub fn all_zero(height: usize, width: usize, params: &MorphologyParams) -> Self {
        Self { mask: Array2::zeros((height, width)), provenance: params.clone() }
    }

    /// Wrap an existing binary map (e.g. a hand-built test mask or one
    /// loaded from disk). Rejects non-binary values.
    pub fn from_array(mask: Array2<f64>, params: MorphologyParams) -> Result<Self> {
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("pose mask values must be exactly 0 or 1".into()));
        }
        Ok(Self { mask, provenance: params })
    }
}

/// Encode a pose as 18 binary heatmaps: channel `k` is 1 on every integer
/// pixel within `radius` (Euclidean, inclusive) of visible keypoint `k`,
/// clipped to the image; invisible keypoints give all-zero channels.
pub fn encode_heatmaps(
    kp: &KeypointSet,
    height: usize,
    width: usize,
    radius: usize,
) -> Result<PoseTensor> {
    if height == 0 || width == 0 {
        return Err(Error::Config("heatmap dimensions must be positive".into()));
    }
    if height < 2 * radius + 1 || width < 2 * radius + 1 {
        return Err(Error::Config(format!(
            "image {height}x{width} smaller than heatmap diameter {}",
            2 * radius + 1
        )));
    }
    kp.check_bounds(height, width)?;

    let r2 = (radius * radius) as i64;
    let mut channels = Array3::zeros((NUM_JOINTS, height, width));
    for (k, p) in kp.points().iter().enumerate() {
        if !p.visible {
            continue;
        }
        let (cx, cy) = (p.x as i64, p.y as i64);
        let y0 = (cy - radius as i64).max(0);
        let y1 = (cy + radius as i64).min(height as i64 - 1);
        let x0 = (cx - radius as i64).max(0);
        let x1 = (cx + radius as i64).min(width as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x - cx, y - cy);
                if dx * dx + dy * dy <= r2 {
                    channels[[k, y as usize, x as usize]] = 1.0;
                }
            }
        }
    }
    Ok(PoseTensor { channels, radius })
}

/// Euclidean distance from a pixel center to the segment `a`-`b`.
fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (ex, ey) = (bx - ax, by - ay);
    let len2 = ex * ex + ey * ey;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * ex + (py - ay) * ey) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (px - (ax + t * ex), py - (ay + t * ey));
    (dx * dx + dy * dy).sqrt()
}

fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn dilate(mask: &Array2<f64>, offsets: &[(i64, i64)]) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0.0 {
                continue;
            }
            for &(dy, dx) in offsets {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                    out[[ny as usize, nx as usize]] = 1.0;
                }
            }
        }
    }
    out
}

fn erode(mask: &Array2<f64>, offsets: &[(i64, i64)]) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut keep = true;
            for &(dy, dx) in offsets {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                // Pixels beyond the border count as foreground so erosion
                // does not eat the mask at image edges.
                if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                    if mask[[ny as usize, nx as usize]] == 0.0 {
                        keep = false;
                        break;
                    }
                }
            }
            if keep {
                out[[y, x]] = 1.0;
            }
        }
    }
    out
}

/// Compute the binary foreground mask for a pose: thick segments along
/// skeleton edges whose endpoints are both visible, plus keypoint disks,
/// then one dilation and a morphological closing. Returns the all-zero
/// mask when fewer than 2 keypoints are visible.
pub fn compute_pose_mask(
    kp: &KeypointSet,
    height: usize,
    width: usize,
    params: &MorphologyParams,
) -> PoseMask {
    if kp.num_visible() < 2 {
        return PoseMask::all_zero(height, width, params);
    }
    let mut mask = Array2::zeros((height, width));

    // Thick skeleton segments between mutually visible joints.
    for &(a, b) in &params.edges {
        let (pa, pb) = (kp.points()[a], kp.points()[b]);
        if !pa.visible || !pb.visible {
            continue;
        }
        let a = (pa.x as f64, pa.y as f64);
        let b = (pb.x as f64, pb.y as f64);
        let x_lo = (a.0.min(b.0) - params.limb_radius).floor().max(0.0) as usize;
        let x_hi = (a.0.max(b.0) + params.limb_radius).ceil().min(width as f64 - 1.0) as usize;
        let y_lo = (a.1.min(b.1) - params.limb_radius).floor().max(0.0) as usize;
        let y_hi = (a.1.max(b.1) + params.limb_radius).ceil().min(height as f64 - 1.0) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if dist_to_segment(x as f64, y as f64, a, b) <= params.limb_radius {
                    mask[[y, x]] = 1.0;
                }
            }
        }
    }

    // Disks around visible keypoints (covers joints with no visible edge).
    let kp_offsets = disk_offsets(params.keypoint_radius);
    for p in kp.points() {
        if !p.visible {
            continue;
        }
        for &(dy, dx) in &kp_offsets {
            let (ny, nx) = (p.y as i64 + dy, p.x as i64 + dx);
            if ny >= 0 && ny < height as i64 && nx >= 0 && nx < width as i64 {
                mask[[ny as usize, nx as usize]] = 1.0;
            }
        }
    }

    if params.dilation_radius > 0 {
        let se = disk_offsets(params.dilation_radius);
        mask = dilate(&mask, &se);
        for _ in 0..params.closing_iterations {
            mask = erode(&dilate(&mask, &se), &se);
        }
    }

    PoseMask { mask, provenance: params.clone() }
}

/// Jointly mirror an image and its keypoints (augmentation primitive).
pub fn flip_pair(img: &ImageTensor, kp: &KeypointSet) -> (ImageTensor, KeypointSet) {
    let (_, w) = img.dims();
    (img.flip_horizontal(), kp.flip_horizontal(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lone_keypoint(x: i32, y: i32) -> KeypointSet {
        let mut pts = [Keypoint::invisible(); NUM_JOINTS];
        pts[0] = Keypoint::visible(x, y);
        KeypointSet::new(pts)
    }

    /// Independent lattice-point count for a clipped disk.
    fn brute_force_disk_count(
        cx: i32,
        cy: i32,
        radius: i64,
        height: usize,
        width: usize,
    ) -> usize {
        let mut count = 0;
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let (dx, dy) = (x - cx as i64, y - cy as i64);
                if dx * dx + dy * dy <= radius * radius {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn centered_radius4_disk_has_49_ones() {
        let kp = lone_keypoint(32, 32);
        let pt = encode_heatmaps(&kp, 64, 64, 4).unwrap();
        let count = pt.channels().index_axis(ndarray::Axis(0), 0).sum() as usize;
        assert_eq!(count, brute_force_disk_count(32, 32, 4, 64, 64));
        assert_eq!(count, 49);
    }

    #[test]
    fn corner_disk_is_clipped() {
        // Inclusive-boundary disk clipped to the first quadrant: the
        // brute-force lattice count gives 17 points.
        let kp = lone_keypoint(0, 0);
        let pt = encode_heatmaps(&kp, 64, 64, 4).unwrap();
        let count = pt.channels().index_axis(ndarray::Axis(0), 0).sum() as usize;
        assert_eq!(count, brute_force_disk_count(0, 0, 4, 64, 64));
        assert_eq!(count, 17);
    }

    #[test]
    fn invisible_keypoint_gives_zero_channel() {
        let kp = KeypointSet::new([Keypoint::invisible(); NUM_JOINTS]);
        let pt = encode_heatmaps(&kp, 32, 32, 4).unwrap();
        assert_eq!(pt.channels().sum(), 0.0);
    }

    #[test]
    fn heatmap_counts_match_brute_force_for_random_keypoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (h, w, r) = (48usize, 40usize, 4usize);
        for _ in 0..100 {
            let x = rng.random_range(0..w as i32);
            let y = rng.random_range(0..h as i32);
            let kp = lone_keypoint(x, y);
            let pt = encode_heatmaps(&kp, h, w, r).unwrap();
            let count = pt.channels().index_axis(ndarray::Axis(0), 0).sum() as usize;
            assert_eq!(count, brute_force_disk_count(x, y, r as i64, h, w));
        }
    }

    #[test]
    fn rejects_out_of_bounds_visible_keypoint() {
        let kp = lone_keypoint(64, 10);
        assert!(encode_heatmaps(&kp, 64, 64, 4).is_err());
    }

    #[test]
    fn rejects_too_small_dimensions() {
        let kp = lone_keypoint(1, 1);
        assert!(encode_heatmaps(&kp, 8, 8, 4).is_err());
        assert!(encode_heatmaps(&kp, 0, 64, 4).is_err());
    }

    #[test]
    fn segment_rasterization_matches_brute_force() {
        let mut pts = [Keypoint::invisible(); NUM_JOINTS];
        pts[0] = Keypoint::visible(10, 10);
        pts[1] = Keypoint::visible(10, 50);
        let kp = KeypointSet::new(pts);
        let params = MorphologyParams {
            limb_radius: 1.5,
            keypoint_radius: 0,
            dilation_radius: 0,
            closing_iterations: 0,
            edges: vec![(0, 1)],
        };
        let mask = compute_pose_mask(&kp, 64, 64, &params);

        // Every pixel on the segment itself is set.
        for y in 10..=50 {
            assert_eq!(mask.mask()[[y, 10]], 1.0, "centerline pixel ({y}, 10) missing");
        }
        // Full set equality against the brute-force distance test.
        for y in 0..64 {
            for x in 0..64 {
                let d = dist_to_segment(x as f64, y as f64, (10.0, 10.0), (10.0, 50.0));
                let want = if d <= 1.5 { 1.0 } else { 0.0 };
                assert_eq!(mask.mask()[[y, x]], want, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn degenerate_poses_give_zero_mask() {
        let params = MorphologyParams::default();
        let none = KeypointSet::new([Keypoint::invisible(); NUM_JOINTS]);
        assert_eq!(compute_pose_mask(&none, 32, 32, &params).mask().sum(), 0.0);

        let one = lone_keypoint(16, 16);
        assert_eq!(compute_pose_mask(&one, 32, 32, &params).mask().sum(), 0.0);
    }

    #[test]
    fn two_visible_keypoints_without_edges_still_mark_disks() {
        let mut pts = [Keypoint::invisible(); NUM_JOINTS];
        pts[0] = Keypoint::visible(8, 8);
        pts[5] = Keypoint::visible(24, 24);
        let kp = KeypointSet::new(pts);
        let params = MorphologyParams { edges: vec![], ..Default::default() };
        let mask = compute_pose_mask(&kp, 32, 32, &params);
        assert!(mask.mask().sum() > 0.0);
        assert_eq!(mask.mask()[[8, 8]], 1.0);
        assert_eq!(mask.mask()[[24, 24]], 1.0);
    }

    #[test]
    fn mask_is_superset_of_heatmap_disks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MorphologyParams::default();
        for _ in 0..10 {
            let mut pts = [Keypoint::invisible(); NUM_JOINTS];
            for p in pts.iter_mut() {
                *p = Keypoint::visible(rng.random_range(6..58), rng.random_range(6..58));
            }
            let kp = KeypointSet::new(pts);
            let pt = encode_heatmaps(&kp, 64, 64, 4).unwrap();
            let mask = compute_pose_mask(&kp, 64, 64, &params);
            for k in 0..NUM_JOINTS {
                let hm = pt.channels().index_axis(ndarray::Axis(0), k);
                for y in 0..64 {
                    for x in 0..64 {
                        if hm[[y, x]] == 1.0 {
                            assert_eq!(
                                mask.mask()[[y, x]],
                                1.0,
                                "heatmap {k} pixel ({y}, {x}) outside mask"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mask_invariant_to_edge_order() {
        let mut pts = [Keypoint::invisible(); NUM_JOINTS];
        for (i, p) in pts.iter_mut().enumerate() {
            *p = Keypoint::visible(6 + (i as i32 * 3) % 50, 6 + (i as i32 * 7) % 50);
        }
        let kp = KeypointSet::new(pts);
        let fwd = MorphologyParams::default();
        let mut rev = fwd.clone();
        rev.edges.reverse();
        let a = compute_pose_mask(&kp, 64, 64, &fwd);
        let b = compute_pose_mask(&kp, 64, 64, &rev);
        assert_eq!(a.mask(), b.mask());
    }

    #[test]
    fn mask_is_mirror_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = MorphologyParams::default();
        let (h, w) = (48usize, 40usize);
        for _ in 0..5 {
            let mut pts = [Keypoint::invisible(); NUM_JOINTS];
            for (i, p) in pts.iter_mut().enumerate() {
                if i % 5 == 4 {
                    continue; // keep some joints invisible
                }
                *p = Keypoint::visible(
                    rng.random_range(0..w as i32),
                    rng.random_range(0..h as i32),
                );
            }
            let kp = KeypointSet::new(pts);
            let flipped = kp.flip_horizontal(w);
            let direct = compute_pose_mask(&flipped, h, w, &params);
            let mirrored = compute_pose_mask(&kp, h, w, &params);
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(
                        direct.mask()[[y, x]],
                        mirrored.mask()[[y, w - 1 - x]],
                        "pixel ({y}, {x})"
                    );
                }
            }
        }
    }

    #[test]
    fn flip_mirrors_x_and_swaps_sides() {
        let mut pts = [Keypoint::invisible(); NUM_JOINTS];
        pts[2] = Keypoint::visible(10, 20); // right shoulder
        let kp = KeypointSet::new(pts);
        let flipped = kp.flip_horizontal(64);
        // right shoulder moved to the left-shoulder slot at mirrored x
        assert_eq!(flipped.points()[5], Keypoint::visible(53, 20));
        assert!(!flipped.points()[2].visible);
    }

    proptest! {
        #[test]
        fn flip_pair_is_involution(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (16usize, 20usize);
            let mut pts = [Keypoint::invisible(); NUM_JOINTS];
            for p in pts.iter_mut() {
                if rng.random_bool(0.8) {
                    *p = Keypoint::visible(
                        rng.random_range(0..w as i32),
                        rng.random_range(0..h as i32),
                    );
                }
            }
            let kp = KeypointSet::new(pts);
            let pixels: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
            let img = ImageTensor::from_rgb8(w as u32, h as u32, &pixels).unwrap();

            let (img1, kp1) = flip_pair(&img, &kp);
            let (img2, kp2) = flip_pair(&img1, &kp1);
            prop_assert_eq!(img2, img);
            prop_assert_eq!(kp2, kp);
        }
    }
}
