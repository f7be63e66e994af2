//! Reconstruction and adversarial losses.
//!
//! The reconstruction loss is an L1 distance weighted pixelwise by
//! `(1 + M)` where `M` is the binary pose mask, so body pixels count
//! double. The adversarial losses are plain binary cross-entropy on the
//! discriminator's probability output. Scalar entry points live here;
//! the training loop builds the same quantities as graph nodes.

use ndarray::{Array2, Array3, ArrayD};

use crate::config::{LossConfig, Reduction};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::img::ImageTensor;
use crate::pose::PoseMask;

/// Probabilities are clamped this far away from 0 and 1 inside the
/// cross-entropy to keep it finite.
pub const BCE_EPS: f64 = 1e-7;

/// Masked L1: `sum(|gen - target| * (1 + mask))` over pixels and channels,
/// divided by the element count if `reduction` is `mean`. The mask
/// broadcasts across the 3 channels.
pub fn pose_mask_l1(
    gen: &ImageTensor,
    target: &ImageTensor,
    mask: &PoseMask,
    reduction: Reduction,
) -> Result<f64> {
    let (h, w) = gen.dims();
    if target.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "generated {:?} vs target {:?}",
            gen.dims(),
            target.dims()
        )));
    }
    if mask.mask().dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.mask().dim()
        )));
    }
    let mut acc = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let d = (gen.data()[[c, y, x]] - target.data()[[c, y, x]]).abs();
                acc += d * (1.0 + mask.mask()[[y, x]]);
            }
        }
    }
    Ok(match reduction {
        Reduction::Sum => acc,
        Reduction::Mean => acc / (3 * h * w) as f64,
    })
}

/// Binary cross-entropy of a probability against a 0/1 label.
pub fn bce(pred: f64, label: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&pred) {
        return Err(Error::Data(format!("bce expects a probability, got {pred}")));
    }
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(-(label * p.ln() + (1.0 - label) * (1.0 - p).ln()))
}

/// Discriminator objective: real pairs toward 1, fake pairs toward 0.
pub fn d_loss(d_real: f64, d_fake: f64) -> Result<f64> {
    Ok(bce(d_real, 1.0)? + bce(d_fake, 0.0)?)
}

/// Stage-two generator objective: fool the discriminator plus the weighted
/// masked L1 against the target. `gen` is the refined image.
pub fn g2_total_loss(
    d_fake: f64,
    gen: &ImageTensor,
    target: &ImageTensor,
    mask: &PoseMask,
    cfg: &LossConfig,
) -> Result<f64> {
    let adv = bce(d_fake, 1.0)?;
    let l1 = pose_mask_l1(gen, target, mask, cfg.reduction)?;
    Ok(adv + cfg.lambda * l1)
}

/// `(1 + mask)` weights broadcast over a `[n, 3, h, w]` batch.
pub fn batch_l1_weights(masks: &[&PoseMask]) -> ArrayD<f64> {
    let n = masks.len();
    let (h, w) = masks[0].mask().dim();
    let mut out = ndarray::Array4::<f64>::zeros((n, 3, h, w));
    for (i, m) in masks.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[i, c, y, x]] = 1.0 + m.mask()[[y, x]];
                }
            }
        }
    }
    out.into_dyn()
}

/// Stack images into an `[n, 3, h, w]` batch tensor.
pub fn batch_images(images: &[&ImageTensor]) -> ArrayD<f64> {
    let n = images.len();
    let (h, w) = images[0].dims();
    let mut out = ndarray::Array4::<f64>::zeros((n, 3, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img.data());
    }
    out.into_dyn()
}

/// Graph node for the batch masked-L1: mean over samples of the per-sample
/// reduced loss, matching [`pose_mask_l1`] applied sample by sample.
pub fn masked_l1_node(
    g: &mut Graph,
    pred: NodeId,
    targets: ArrayD<f64>,
    weights: ArrayD<f64>,
    reduction: Reduction,
) -> NodeId {
    let shape = targets.shape().to_vec();
    let n = shape[0] as f64;
    let per_sample = shape[1..].iter().product::<usize>() as f64;
    let divisor = match reduction {
        Reduction::Sum => n,
        Reduction::Mean => n * per_sample,
    };
    g.masked_l1(pred, targets, weights, divisor)
}

/// Graph node for the mean BCE of a probability batch against a label.
pub fn bce_node(g: &mut Graph, pred: NodeId, label: f64) -> NodeId {
    g.bce_with_label(pred, label, BCE_EPS)
}

/// Extract an [`ImageTensor`] batch from raw `[n, 3, h, w]` data without
/// range checks (network outputs are already activation-bounded).
pub fn split_batch(batch: &ArrayD<f64>) -> Vec<Array3<f64>> {
    let n = batch.shape()[0];
    (0..n)
        .map(|i| {
            batch
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_dimensionality()
                .expect("batch is 4-d")
        })
        .collect()
}

/// Binary mask as a plain array (helper for metric call sites).
pub fn mask_array(mask: &PoseMask) -> Array2<f64> {
    mask.mask().clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MorphologyParams;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image_from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> ImageTensor {
        let mut a = ndarray::Array3::zeros((3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    a[[c, y, x]] = f(c, y, x);
                }
            }
        }
        ImageTensor::new(a).unwrap()
    }

    fn mask_from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> PoseMask {
        let mut m = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                m[[y, x]] = f(y, x);
            }
        }
        PoseMask::from_array(m, MorphologyParams::default()).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_loss() {
        let a = image_from_fn(8, 8, |c, y, x| ((c + y + x) % 5) as f64 / 10.0);
        let m = mask_from_fn(8, 8, |y, _| if y < 4 { 1.0 } else { 0.0 });
        assert_eq!(pose_mask_l1(&a, &a, &m, Reduction::Sum).unwrap(), 0.0);
    }

    #[test]
    fn zero_mask_reduces_to_plain_l1() {
        let a = image_from_fn(6, 6, |c, y, x| ((c * 7 + y * 3 + x) % 9) as f64 / 20.0);
        let b = image_from_fn(6, 6, |c, y, x| ((c + y + x * 2) % 11) as f64 / 20.0);
        let zero = mask_from_fn(6, 6, |_, _| 0.0);
        let got = pose_mask_l1(&a, &b, &zero, Reduction::Sum).unwrap();
        let mut plain = 0.0;
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    plain += (a.data()[[c, y, x]] - b.data()[[c, y, x]]).abs();
                }
            }
        }
        assert_relative_eq!(got, plain, max_relative = 1e-12);
    }

    #[test]
    fn single_pixel_masked_case() {
        // one pixel, one effective channel difference: |0.5|*(1+1) = 1.0
        let gen = image_from_fn(1, 1, |c, _, _| if c == 0 { 0.5 } else { 0.0 });
        let target = image_from_fn(1, 1, |_, _, _| 0.0);
        let m = mask_from_fn(1, 1, |_, _| 1.0);
        let got = pose_mask_l1(&gen, &target, &m, Reduction::Sum).unwrap();
        assert_relative_eq!(got, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn all_ones_mask_doubles_plain_l1() {
        let a = image_from_fn(5, 7, |c, y, x| ((c * 5 + y * 2 + x) % 13) as f64 / 26.0);
        let b = image_from_fn(5, 7, |c, y, x| ((c + y * 5 + x * 3) % 7) as f64 / 14.0);
        let ones = mask_from_fn(5, 7, |_, _| 1.0);
        let zeros = mask_from_fn(5, 7, |_, _| 0.0);
        let weighted = pose_mask_l1(&a, &b, &ones, Reduction::Sum).unwrap();
        let plain = pose_mask_l1(&a, &b, &zeros, Reduction::Sum).unwrap();
        assert_relative_eq!(weighted, 2.0 * plain, max_relative = 1e-12);
    }

    #[test]
    fn symmetry_in_arguments() {
        let a = image_from_fn(4, 4, |c, y, x| ((c + 2 * y + 3 * x) % 8) as f64 / 8.0);
        let b = image_from_fn(4, 4, |c, y, x| ((3 * c + y + x) % 6) as f64 / 6.0);
        let m = mask_from_fn(4, 4, |y, x| ((y + x) % 2) as f64);
        let ab = pose_mask_l1(&a, &b, &m, Reduction::Sum).unwrap();
        let ba = pose_mask_l1(&b, &a, &m, Reduction::Sum).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn masked_pixel_counts_double() {
        // increasing |gen - target| by delta at a masked pixel raises the
        // loss by exactly twice the unmasked increase
        let base = image_from_fn(2, 2, |_, _, _| 0.0);
        let target = image_from_fn(2, 2, |_, _, _| 0.0);
        let m = mask_from_fn(2, 2, |y, x| if (y, x) == (0, 0) { 1.0 } else { 0.0 });
        let delta = 0.25;
        let bump_masked = image_from_fn(2, 2, |c, y, x| {
            if (c, y, x) == (0, 0, 0) {
                delta
            } else {
                0.0
            }
        });
        let bump_unmasked = image_from_fn(2, 2, |c, y, x| {
            if (c, y, x) == (0, 1, 1) {
                delta
            } else {
                0.0
            }
        });
        let l0 = pose_mask_l1(&base, &target, &m, Reduction::Sum).unwrap();
        let lm = pose_mask_l1(&bump_masked, &target, &m, Reduction::Sum).unwrap();
        let lu = pose_mask_l1(&bump_unmasked, &target, &m, Reduction::Sum).unwrap();
        assert_relative_eq!(lm - l0, 2.0 * (lu - l0), max_relative = 1e-12);
    }

    #[test]
    fn bce_analytics() {
        assert_relative_eq!(bce(0.5, 1.0).unwrap(), std::f64::consts::LN_2, epsilon = 1e-9);
        assert_relative_eq!(bce(0.9, 0.0).unwrap(), -(0.1f64).ln(), epsilon = 1e-9);
        // limit toward a confident correct prediction
        assert!(bce(1.0 - 1e-9, 1.0).unwrap() < 1e-6);
        assert!(bce(1.5, 1.0).is_err());
    }

    #[test]
    fn d_loss_analytics() {
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert_relative_eq!(d_loss(0.5, 0.5).unwrap(), two_ln2, epsilon = 1e-9);
        assert!(d_loss(1.0 - 1e-9, 1e-9).unwrap() < 1e-6);
        assert!(d_loss(1e-9, 1.0 - 1e-9).unwrap() > 30.0);
        assert!(d_loss(0.1, 0.9).unwrap() >= 0.0);
    }

    #[test]
    fn g2_total_loss_composition() {
        let gen = image_from_fn(3, 3, |_, _, _| 0.2);
        let target = gen.clone();
        let m = mask_from_fn(3, 3, |_, _| 1.0);
        // zero L1 term: result is the adversarial part alone, any lambda
        for lambda in [0.0, 1.0, 10.0] {
            let cfg = LossConfig { lambda, reduction: Reduction::Sum };
            let got = g2_total_loss(0.5, &gen, &target, &m, &cfg).unwrap();
            assert_relative_eq!(got, std::f64::consts::LN_2, epsilon = 1e-9);
        }
        // lambda = 0 reduces to the adversarial loss alone
        let other = image_from_fn(3, 3, |_, _, _| -0.4);
        let cfg0 = LossConfig { lambda: 0.0, reduction: Reduction::Sum };
        let got = g2_total_loss(0.5, &other, &target, &m, &cfg0).unwrap();
        assert_relative_eq!(got, std::f64::consts::LN_2, epsilon = 1e-9);
        // linear combination: bce(0.5,1) + 10 * 0.2
        let cfg = LossConfig { lambda: 10.0, reduction: Reduction::Sum };
        let l1 = 0.2;
        let gen2 = image_from_fn(1, 1, |c, _, _| if c == 0 { l1 / 2.0 } else { 0.0 });
        let tgt2 = image_from_fn(1, 1, |_, _, _| 0.0);
        let m2 = mask_from_fn(1, 1, |_, _| 1.0);
        let got = g2_total_loss(0.5, &gen2, &tgt2, &m2, &cfg).unwrap();
        assert_relative_eq!(got, std::f64::consts::LN_2 + 2.0, epsilon = 1e-9);
    }

    #[test]
    fn graph_masked_l1_matches_scalar_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (h, w) = (6usize, 5usize);
        let gen = image_from_fn(h, w, |_, _, _| rng.random_range(-0.9..0.9));
        let target = image_from_fn(h, w, |_, _, _| rng.random_range(-0.9..0.9));
        let m = mask_from_fn(h, w, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });

        // node value agrees with the scalar route
        let scalar = pose_mask_l1(&gen, &target, &m, Reduction::Sum).unwrap();
        let mut g = Graph::new();
        let pred = g.leaf(batch_images(&[&gen]));
        let node = masked_l1_node(
            &mut g,
            pred,
            batch_images(&[&target]),
            batch_l1_weights(&[&m]),
            Reduction::Sum,
        );
        assert_relative_eq!(g.scalar(node), scalar, max_relative = 1e-12);

        // gradient vs central differences on 50 coordinates
        g.backward(node);
        let analytic = g.grad(pred).unwrap().clone();
        let base = batch_images(&[&gen]);
        let eps = 1e-6;
        let mut checked = 0;
        let total = base.len();
        for i in (0..total).step_by((total / 50).max(1)) {
            let gv = gen.data().as_slice().unwrap()[i];
            let tv = target.data().as_slice().unwrap()[i];
            if (gv - tv).abs() < 1e-4 {
                continue; // skip the nondifferentiable point
            }
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.as_slice_mut().unwrap()[i] += eps;
            minus.as_slice_mut().unwrap()[i] -= eps;
            let eval = |arr: ndarray::ArrayD<f64>| {
                let mut g = Graph::new();
                let p = g.constant(arr);
                let n = masked_l1_node(
                    &mut g,
                    p,
                    batch_images(&[&target]),
                    batch_l1_weights(&[&m]),
                    Reduction::Sum,
                );
                g.scalar(n)
            };
            let num = (eval(plus) - eval(minus)) / (2.0 * eps);
            let ana = analytic.as_slice().unwrap()[i];
            let denom = num.abs().max(ana.abs()).max(1e-9);
            assert!(
                ((num - ana) / denom).abs() < 1e-3,
                "finite-difference mismatch at {i}: {num} vs {ana}"
            );
            checked += 1;
        }
        assert!(checked >= 20, "too few checkable coordinates: {checked}");
    }
}
