//! Patch-based convex blending of tail and head content, at feature level
//! for training and at pixel level for visualization and ablations. Labels
//! are never interpolated: a mixed sample keeps the pure tail label.

use crate::error::{Result, SpmixError};
use crate::imaging::{augment_view, AugmentationPolicy, ImageTensor};
use crate::saliency::{PatchRatioGrid, RatioPipeline};
use crate::tensor::{Graph, Tensor};
use rand_chacha::ChaCha8Rng;

/// Converts one ratio grid to a `[N, 1]` constant tensor for broadcasting
/// over the feature dimension.
pub fn ratio_tensor(ratios: &PatchRatioGrid) -> Tensor {
    let n = ratios.grid() * ratios.grid();
    Tensor::from_parts(vec![n, 1], ratios.ratios().to_vec(), false)
}

/// Stacks per-sample ratio grids into a `[B, N, 1]` constant tensor.
pub fn ratio_tensor_batch(grids: &[PatchRatioGrid]) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| SpmixError::contract("ratio batch must not be empty"))?;
    let n = first.grid() * first.grid();
    let mut data = Vec::with_capacity(grids.len() * n);
    for g in grids {
        if g.grid() != first.grid() {
            return Err(SpmixError::contract(format!(
                "ratio grids differ in side: {} vs {}",
                first.grid(),
                g.grid()
            )));
        }
        data.extend_from_slice(g.ratios());
    }
    Ok(Tensor::from_parts(vec![grids.len(), n, 1], data, false))
}

/// Eq.-style per-token convex combination:
/// `token_i = r_i * tail_i + (1 - r_i) * head_i`, with `r_i` applied
/// uniformly over the feature channels of token i. Differentiable through
/// both inputs. Token maps are `[N, D]` or `[B, N, D]`; the ratio tensor
/// must be `[N, 1]` / `[B, N, 1]` with N matching the token count.
pub fn mix_features(
    g: &mut Graph,
    tail: &Tensor,
    head: &Tensor,
    ratios: &Tensor,
) -> Result<Tensor> {
    if tail.shape() != head.shape() {
        return Err(SpmixError::contract(format!(
            "mixed feature maps differ in shape: {:?} vs {:?}",
            tail.shape(),
            head.shape()
        )));
    }
    let rank = tail.ndim();
    if rank < 2
        || ratios.ndim() != rank
        || ratios.shape()[..rank - 1] != tail.shape()[..rank - 1]
        || *ratios.shape().last().unwrap() != 1
    {
        return Err(SpmixError::contract(format!(
            "ratio tensor {:?} does not match token map {:?}",
            ratios.shape(),
            tail.shape()
        )));
    }
    let one_minus = Tensor::from_parts(
        ratios.shape().to_vec(),
        ratios.data().iter().map(|r| 1.0 - r).collect(),
        false,
    );
    let tail_part = g.mul(tail, ratios)?;
    let head_part = g.mul(head, &one_minus)?;
    g.add(&tail_part, &head_part)
}

/// Pixel-level counterpart of [`mix_features`]: each G x G block of pixels
/// is blended with its patch ratio. Image sides must be divisible by G.
pub fn mix_images(
    tail: &ImageTensor,
    head: &ImageTensor,
    ratios: &PatchRatioGrid,
) -> Result<ImageTensor> {
    if tail.height() != head.height()
        || tail.width() != head.width()
        || tail.channels() != head.channels()
    {
        return Err(SpmixError::contract(format!(
            "mixed images differ in shape: {}x{}x{} vs {}x{}x{}",
            tail.height(),
            tail.width(),
            tail.channels(),
            head.height(),
            head.width(),
            head.channels()
        )));
    }
    let grid = ratios.grid();
    if tail.height() % grid != 0 || tail.width() % grid != 0 {
        return Err(SpmixError::contract(format!(
            "image {}x{} not divisible by grid {grid}",
            tail.height(),
            tail.width()
        )));
    }
    let (bh, bw) = (tail.height() / grid, tail.width() / grid);
    let mut data = Vec::with_capacity(tail.data().len());
    for y in 0..tail.height() {
        for x in 0..tail.width() {
            let r = ratios.at(y / bh, x / bw);
            for c in 0..tail.channels() {
                data.push(r * tail.pixel(y, x, c) + (1.0 - r) * head.pixel(y, x, c));
            }
        }
    }
    ImageTensor::new(tail.height(), tail.width(), tail.channels(), data)
}

/// Two augmented views of a tail/head pair plus their independent ratio
/// grids. The pair's label is the unmixed tail label.
#[derive(Clone, Debug)]
pub struct MixedPair {
    pub tail_view1: ImageTensor,
    pub tail_view2: ImageTensor,
    pub head_view1: ImageTensor,
    pub head_view2: ImageTensor,
    pub ratios1: PatchRatioGrid,
    pub ratios2: PatchRatioGrid,
}

/// Builds the two-view mixed pair: augments tail and head independently,
/// then derives r1 from the first views and r2 from the second views
/// through the saliency pipeline. Saliency runs on the augmented views so
/// the ratio grid is spatially aligned with what the encoder sees.
pub fn build_mixed_pair(
    tail: &ImageTensor,
    head: &ImageTensor,
    policy: &AugmentationPolicy,
    pipeline: &RatioPipeline,
    rng: &mut ChaCha8Rng,
) -> Result<MixedPair> {
    let tail_view1 = augment_view(tail, policy, rng)?;
    let tail_view2 = augment_view(tail, policy, rng)?;
    let head_view1 = augment_view(head, policy, rng)?;
    let head_view2 = augment_view(head, policy, rng)?;
    let ratios1 = pipeline.ratios_for_pair(&tail_view1, &head_view1, rng)?;
    let ratios2 = pipeline.ratios_for_pair(&tail_view2, &head_view2, rng)?;
    Ok(MixedPair {
        tail_view1,
        tail_view2,
        head_view1,
        head_view2,
        ratios1,
        ratios2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn tokens(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn zero_ratio_returns_head_exactly() {
        let mut g = Graph::new();
        let t = tokens(&[4, 2], vec![1.0; 8]);
        let h = tokens(&[4, 2], vec![0.25, 0.5, 0.75, 1.0, 0.1, 0.2, 0.3, 0.4]);
        let r = ratio_tensor(&PatchRatioGrid::new(2, 0.8, vec![0.0; 4]).unwrap());
        let out = mix_features(&mut g, &t, &h, &r).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn half_ratio_of_opposites_is_zero() {
        let mut g = Graph::new();
        let t = tokens(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125]);
        let h = tokens(&[2, 3], t.data().iter().map(|v| -v).collect());
        let r = Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
        let out = mix_features(&mut g, &t, &h, &r).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_arithmetic() {
        let mut g = Graph::new();
        let t = tokens(&[1, 2], vec![1.0, 0.0]);
        let h = tokens(&[1, 2], vec![0.0, 1.0]);
        let r = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
        let out = mix_features(&mut g, &t, &h, &r).unwrap();
        assert!((out.data()[0] - 0.8).abs() < 1e-15);
        assert!((out.data()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gradients_scale_by_ratio() {
        let mut g = Graph::new();
        let t = tokens(&[2, 2], vec![0.3, 0.6, 0.9, 1.2]).requires_grad(true);
        let h = tokens(&[2, 2], vec![0.5; 4]).requires_grad(true);
        let r = Tensor::new(vec![2, 1], vec![0.8, 0.25]).unwrap();
        let out = mix_features(&mut g, &t, &h, &r).unwrap();
        let loss = g.sum_all(&out).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(t.grad().unwrap(), vec![0.8, 0.8, 0.25, 0.25]);
        assert_eq!(h.grad().unwrap(), vec![1.0 - 0.8, 1.0 - 0.8, 0.75, 0.75]);
    }

    #[test]
    fn convexity_bounds_output_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 9;
        let d = 4;
        let t: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=0.8)).collect();
        let mut g = Graph::new();
        let out = mix_features(
            &mut g,
            &tokens(&[n, d], t.clone()),
            &tokens(&[n, d], h.clone()),
            &Tensor::new(vec![n, 1], r.clone()).unwrap(),
        )
        .unwrap();
        for i in 0..n {
            let tn: f64 = t[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            let hn: f64 = h[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            let on: f64 = out.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!(on <= tn.max(hn) + 1e-12);
            // each channel on the segment between the two inputs
            for j in 0..d {
                let (a, b) = (t[i * d + j], h[i * d + j]);
                let v = out.data()[i * d + j];
                assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
            }
        }
    }

    #[test]
    fn image_mix_constant_ratio() {
        let tail = ImageTensor::filled(4, 4, 3, 1.0);
        let head = ImageTensor::filled(4, 4, 3, 0.0);
        let r = PatchRatioGrid::new(2, 0.8, vec![0.8; 4]).unwrap();
        let out = mix_images(&tail, &head, &r).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn image_mix_equal_inputs_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..=1.0)).collect();
        let img = ImageTensor::new(4, 4, 3, data).unwrap();
        let r = PatchRatioGrid::new(2, 0.8, vec![0.1, 0.4, 0.6, 0.8]).unwrap();
        let out = mix_images(&img, &img, &r).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn image_mix_checkerboard_blocks() {
        let tail = ImageTensor::filled(4, 4, 1, 1.0); // white
        let head = ImageTensor::filled(4, 4, 1, 0.0); // black
        let r = PatchRatioGrid::new(2, 0.8, vec![0.0, 0.8, 0.8, 0.0]).unwrap();
        let out = mix_images(&tail, &head, &r).unwrap();
        // blockwise oracle: pixel = r * 1 + (1-r) * 0 = r of its block
        for y in 0..4 {
            for x in 0..4 {
                let expect = r.at(y / 2, x / 2);
                assert!((out.pixel(y, x, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = ImageTensor::filled(4, 4, 3, 0.5);
        let b = ImageTensor::filled(4, 2, 3, 0.5);
        let r = PatchRatioGrid::new(2, 0.8, vec![0.5; 4]).unwrap();
        assert!(mix_images(&a, &b, &r).is_err());

        let mut g = Graph::new();
        let t = tokens(&[4, 2], vec![0.0; 8]);
        let h = tokens(&[2, 2], vec![0.0; 4]);
        let rt = Tensor::new(vec![4, 1], vec![0.5; 4]).unwrap();
        assert!(mix_features(&mut g, &t, &h, &rt).is_err());
    }

    #[test]
    fn mixed_pair_deterministic_and_noise_free_ratios_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tail = {
            let data = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..=1.0)).collect();
            ImageTensor::new(16, 16, 3, data).unwrap()
        };
        let head = {
            let data = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..=1.0)).collect();
            ImageTensor::new(16, 16, 3, data).unwrap()
        };
        let pipe = RatioPipeline::new(vec![3, 5], 0.0, 4, 0.8);

        // identity augmentation + zero noise -> r1 == r2
        let pair = build_mixed_pair(
            &tail,
            &head,
            &AugmentationPolicy::identity(),
            &pipe,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(pair.ratios1.ratios(), pair.ratios2.ratios());

        // fixed seed -> bit-identical pair across runs
        let policy = AugmentationPolicy::default();
        let a = build_mixed_pair(&tail, &head, &policy, &pipe, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        let b = build_mixed_pair(&tail, &head, &policy, &pipe, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        assert_eq!(a.tail_view1.data(), b.tail_view1.data());
        assert_eq!(a.head_view2.data(), b.head_view2.data());
        assert_eq!(a.ratios1.ratios(), b.ratios1.ratios());
        assert_eq!(a.ratios2.ratios(), b.ratios2.ratios());
    }
}
