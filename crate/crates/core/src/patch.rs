//! Local patch-based baseline: a small CNN mapping 15³ input patches to 3³
//! output patches, with overlap-averaged volume reconstruction.
//!
//! The network is six valid (unpadded) k=3 convolutions,
//! 1→16→32→32→32→32→1, relu between stages and sigmoid at the end; each
//! stage trims one voxel per side, taking 15³ to 3³. Its prediction at a
//! voxel can only depend on input within Chebyshev distance 7 — the locality
//! that distinguishes this baseline from the full-volume network.

use crate::error::{Error, Result};
use crate::nn::{
    conv3d_backward, conv3d_forward, relu, relu_backward, sigmoid, sigmoid_backward, Conv3dCache,
    ConvParams, ReluCache, SigmoidCache,
};
use crate::optim::{adam_step, loss_by_kind, AdamState, LossKind, Reduction};
use crate::rng::{index, range_f64, seeded};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::OptimConfig;
use crate::volume::Volume;

pub const PATCH_INPUT: usize = 15;
pub const PATCH_OUTPUT: usize = 3;
/// Voxels closer than this to a face can never be covered by a 3³ output.
pub const PATCH_BORDER: usize = (PATCH_INPUT - PATCH_OUTPUT) / 2;

const CHANNEL_PLAN: [usize; 7] = [1, 16, 32, 32, 32, 32, 1];

/// One training example: a 15³ input window and the 3³ target window sharing
/// its center.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub center: [usize; 3],
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

fn check_patchable(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < PATCH_INPUT) {
        return Err(Error::InvalidDimensions(format!(
            "volume {dims:?} is smaller than a {PATCH_INPUT}^3 patch"
        )));
    }
    Ok(())
}

/// Centers of all 15³ windows that fit, spaced `stride` apart per axis.
pub fn patch_grid_centers(dims: [usize; 3], stride: usize) -> Result<Vec<[usize; 3]>> {
    check_patchable(dims)?;
    if stride == 0 {
        return Err(Error::InvalidConfig("patch stride must be positive".into()));
    }
    let half = PATCH_INPUT / 2;
    let axis: Vec<Vec<usize>> = dims
        .iter()
        .map(|&d| (0..=(d - PATCH_INPUT) / stride).map(|k| half + k * stride).collect())
        .collect();
    let mut out = Vec::with_capacity(axis[0].len() * axis[1].len() * axis[2].len());
    for &z in &axis[2] {
        for &y in &axis[1] {
            for &x in &axis[0] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// `count` window centers drawn uniformly (with replacement) from all valid
/// positions.
pub fn sample_centers(
    dims: [usize; 3],
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<[usize; 3]>> {
    check_patchable(dims)?;
    let half = PATCH_INPUT / 2;
    let spans: Vec<usize> = dims.iter().map(|&d| d - PATCH_INPUT + 1).collect();
    Ok((0..count)
        .map(|_| {
            let x = half + index(rng, spans[0]);
            let y = half + index(rng, spans[1]);
            let z = half + index(rng, spans[2]);
            [x, y, z]
        })
        .collect())
}

fn extract_window(vol: &Volume, center: [usize; 3], size: usize) -> Tensor<f32> {
    let half = size / 2;
    let mut data = Vec::with_capacity(size * size * size);
    for dz in 0..size {
        for dy in 0..size {
            let z = center[2] - half + dz;
            let y = center[1] - half + dy;
            let x0 = center[0] - half;
            let row = vol.index(x0, y, z);
            data.extend_from_slice(&vol.data[row..row + size]);
        }
    }
    Tensor::new(&[1, 1, size, size, size], data).unwrap()
}

/// All grid-spaced pairs of (15³ input window, 3³ target window). Materializes
/// every patch; for large volumes prefer sampled centers plus
/// [`extract_pair_at`].
pub fn extract_patches(
    input: &Volume,
    target: &Volume,
    stride: usize,
) -> Result<Vec<PatchPair>> {
    if input.dims != target.dims {
        return Err(Error::ShapeMismatch(format!(
            "input dims {:?} != target dims {:?}",
            input.dims, target.dims
        )));
    }
    let centers = patch_grid_centers(input.dims, stride)?;
    Ok(centers
        .into_iter()
        .map(|c| extract_pair_at(input, target, c))
        .collect())
}

pub fn extract_pair_at(input: &Volume, target: &Volume, center: [usize; 3]) -> PatchPair {
    PatchPair {
        center,
        input: extract_window(input, center, PATCH_INPUT),
        target: extract_window(target, center, PATCH_OUTPUT),
    }
}

/// Stacks same-shaped single-sample tensors along the batch axis.
pub fn stack_batch<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidData("cannot stack an empty batch".into()))?;
    let [_, c, d, h, w] = first.dims5()?;
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch("ragged batch".into()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), c, d, h, w], data)
}

#[derive(Debug, Clone)]
pub struct PatchCnn<T> {
    pub layers: Vec<ConvParams<T>>,
    pub opt: AdamState<T>,
    pub step: u64,
}

pub fn build_patch_cnn<T: Scalar>(opt: &OptimConfig, seed: u64) -> PatchCnn<T> {
    let mut rng = seeded(seed);
    let mut layers = Vec::with_capacity(CHANNEL_PLAN.len() - 1);
    for win in CHANNEL_PLAN.windows(2) {
        let (c_in, c_out) = (win[0], win[1]);
        let fan_in = (c_in * 27) as f64;
        let fan_out = (c_out * 27) as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        let n = c_out * c_in * 27;
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(range_f64(&mut rng, -bound, bound)))
            .collect();
        let weights = Tensor::new(&[c_out, c_in, 3, 3, 3], data).unwrap();
        layers.push(ConvParams::new(weights, vec![T::zero(); c_out], 1, 0).unwrap());
    }
    let lengths: Vec<usize> = layers
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    let mut state = AdamState::new(&lengths, opt.lr);
    state.beta1 = T::from_f64(opt.beta1);
    state.beta2 = T::from_f64(opt.beta2);
    state.epsilon = T::from_f64(opt.epsilon);
    PatchCnn { layers, opt: state, step: 0 }
}

pub struct PatchTape<T> {
    convs: Vec<Conv3dCache<T>>,
    relus: Vec<ReluCache>,
    sig: SigmoidCache<T>,
}

impl<T: Scalar> PatchCnn<T> {
    /// Inference; caches are dropped as soon as each layer finishes.
    pub fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (a, _) = conv3d_forward(h, layer)?;
            h = if i < last { relu(a).0 } else { sigmoid(a).0 };
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: Tensor<T>) -> Result<(Tensor<T>, PatchTape<T>)> {
        let last = self.layers.len() - 1;
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut relus = Vec::with_capacity(last);
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate().take(last) {
            let _ = i;
            let (a, c) = conv3d_forward(h, layer)?;
            let (a, r) = relu(a);
            convs.push(c);
            relus.push(r);
            h = a;
        }
        let (a, c) = conv3d_forward(h, &self.layers[last])?;
        convs.push(c);
        let (y, sig) = sigmoid(a);
        Ok((y, PatchTape { convs, relus, sig }))
    }

    /// Gradients for every weight and bias, ordered layer by layer.
    pub fn backward(&self, dy: &Tensor<T>, tape: &PatchTape<T>) -> Result<Vec<Vec<T>>> {
        let last = self.layers.len() - 1;
        let mut d = sigmoid_backward(dy, &tape.sig)?;
        let mut rev: Vec<(Tensor<T>, Vec<T>)> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d = relu_backward(&d, &tape.relus[i])?;
            }
            let g = conv3d_backward(&d, &self.layers[i], &tape.convs[i])?;
            d = g.dx;
            rev.push((g.dw, g.db));
        }
        let mut arrays = Vec::with_capacity(self.layers.len() * 2);
        for (dw, db) in rev.into_iter().rev() {
            arrays.push(dw.into_data());
            arrays.push(db);
        }
        Ok(arrays)
    }

    pub fn train_step(&mut self, x: Tensor<T>, target: &Tensor<T>, loss: LossKind) -> Result<f64> {
        let (y, tape) = self.forward_train(x)?;
        let (loss_value, dpred) = loss_by_kind(loss, &y, target, Reduction::Mean)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss_value}")));
        }
        let grads = self.backward(&dpred, &tape)?;
        drop(tape);
        let grad_refs: Vec<&[T]> = grads.iter().map(|a| a.as_slice()).collect();
        let PatchCnn { layers, opt, .. } = self;
        let mut params: Vec<&mut [T]> = Vec::with_capacity(layers.len() * 2);
        for l in layers.iter_mut() {
            params.push(l.weights.data_mut());
            params.push(&mut l.bias);
        }
        adam_step(&mut params, &grad_refs, opt)?;
        self.step += 1;
        Ok(loss_value)
    }

    pub fn param_arrays(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_arrays_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in self.layers.iter_mut() {
            out.push(l.weights.data_mut());
            out.push(&mut l.bias);
        }
        out
    }

    pub fn count_params(&self) -> u64 {
        self.param_arrays().iter().map(|a| a.len() as u64).sum()
    }
}

/// A reconstructed volume plus the mask of voxels at least one patch covered.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub volume: Volume,
    pub coverage: Vec<bool>,
}

impl Reconstruction {
    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

const RECONSTRUCT_BATCH: usize = 64;

/// Slides the model over every grid window, averaging overlapping 3³ outputs
/// into place. Voxels no window reaches stay 0 and are flagged uncovered.
/// Strides above 3 would leave interior gaps and are rejected.
pub fn reconstruct(model: &PatchCnn<f32>, input: &Volume, stride: usize) -> Result<Reconstruction> {
    if stride > PATCH_OUTPUT {
        return Err(Error::InvalidConfig(format!(
            "stride {stride} leaves coverage gaps (max {PATCH_OUTPUT})"
        )));
    }
    let centers = patch_grid_centers(input.dims, stride)?;
    let dims = input.dims;
    let mut sum = vec![0.0f64; input.data.len()];
    let mut count = vec![0u32; input.data.len()];

    for chunk in centers.chunks(RECONSTRUCT_BATCH) {
        let windows: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|&c| extract_window(input, c, PATCH_INPUT))
            .collect();
        let batch = stack_batch(&windows)?;
        drop(windows);
        let pred = model.predict(batch)?;
        let [_, _, pd, ph, pw] = pred.dims5()?;
        if [pd, ph, pw] != [PATCH_OUTPUT; 3] {
            return Err(Error::ShapeMismatch(format!(
                "model produced {pd}x{ph}x{pw} patches, expected {PATCH_OUTPUT}^3"
            )));
        }
        let ps = PATCH_OUTPUT * PATCH_OUTPUT * PATCH_OUTPUT;
        for (bi, &c) in chunk.iter().enumerate() {
            let pdata = &pred.data()[bi * ps..(bi + 1) * ps];
            let mut k = 0;
            for dz in 0..PATCH_OUTPUT {
                for dy in 0..PATCH_OUTPUT {
                    for dx in 0..PATCH_OUTPUT {
                        let x = c[0] - 1 + dx;
                        let y = c[1] - 1 + dy;
                        let z = c[2] - 1 + dz;
                        let idx = input.index(x, y, z);
                        sum[idx] += pdata[k] as f64;
                        count[idx] += 1;
                        k += 1;
                    }
                }
            }
        }
    }

    let mut out_data = vec![0.0f32; input.data.len()];
    let mut coverage = vec![false; input.data.len()];
    for i in 0..sum.len() {
        if count[i] > 0 {
            out_data[i] = (sum[i] / count[i] as f64) as f32;
            coverage[i] = true;
        }
    }
    let volume = Volume::new(dims, input.spacing, out_data)?;
    Ok(Reconstruction { volume, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = seeded(seed);
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n).map(|_| range_f64(&mut rng, 0.0, 1.0) as f32).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn grid_counts_match_closed_form() {
        assert_eq!(patch_grid_centers([15, 15, 15], 1).unwrap().len(), 1);
        assert_eq!(patch_grid_centers([17, 17, 17], 1).unwrap().len(), 27);
        assert_eq!(patch_grid_centers([21, 21, 21], 3).unwrap().len(), 27);
        // floor((dim-15)/stride)+1 per axis
        assert_eq!(patch_grid_centers([20, 17, 15], 2).unwrap().len(), 3 * 2 * 1);
    }

    #[test]
    fn too_small_volume_is_rejected() {
        assert!(patch_grid_centers([14, 15, 15], 1).is_err());
        let v = random_volume([15, 15, 15], 0);
        let small = random_volume([15, 15, 14], 0);
        assert!(extract_patches(&v, &small, 1).is_err());
    }

    #[test]
    fn extracted_patches_match_direct_slicing() {
        let input = random_volume([17, 16, 15], 1);
        let target = random_volume([17, 16, 15], 2);
        let pairs = extract_patches(&input, &target, 1).unwrap();
        assert_eq!(pairs.len(), 3 * 2 * 1);
        for p in &pairs {
            let [cx, cy, cz] = p.center;
            for dz in 0..PATCH_INPUT {
                for dy in 0..PATCH_INPUT {
                    for dx in 0..PATCH_INPUT {
                        let want = input.at(cx - 7 + dx, cy - 7 + dy, cz - 7 + dz);
                        let got = p.input.data()
                            [(dz * PATCH_INPUT + dy) * PATCH_INPUT + dx];
                        assert_eq!(got, want);
                    }
                }
            }
            for dz in 0..PATCH_OUTPUT {
                for dy in 0..PATCH_OUTPUT {
                    for dx in 0..PATCH_OUTPUT {
                        let want = target.at(cx - 1 + dx, cy - 1 + dy, cz - 1 + dz);
                        let got = p.target.data()
                            [(dz * PATCH_OUTPUT + dy) * PATCH_OUTPUT + dx];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn model_maps_15_to_3_in_unit_range() {
        let model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 5);
        let x = Tensor::new(
            &[1, 1, 15, 15, 15],
            random_volume([15, 15, 15], 6).data,
        )
        .unwrap();
        let y = model.predict(x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn same_seed_same_init() {
        let a: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 7);
        let b: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 7);
        for (x, y) in a.param_arrays().iter().zip(b.param_arrays()) {
            assert_eq!(*x, y);
        }
    }

    #[test]
    fn parameter_count_matches_hand_sum() {
        let model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 0);
        // 448 + 13,856 + 3×27,680 + 865
        assert_eq!(model.count_params(), 98_209);
    }

    #[test]
    fn constant_model_reconstructs_sigmoid_of_bias() {
        let mut model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 1);
        for l in model.layers.iter_mut() {
            for w in l.weights.data_mut() {
                *w = 0.0;
            }
            for b in l.bias.iter_mut() {
                *b = 0.0;
            }
        }
        *model.layers.last_mut().unwrap().bias.last_mut().unwrap() = 0.4;
        let input = random_volume([17, 17, 17], 8);
        let rec = reconstruct(&model, &input, 1).unwrap();
        let expect = 1.0f32 / (1.0 + (-0.4f32).exp());
        for (i, &covered) in rec.coverage.iter().enumerate() {
            if covered {
                assert_eq!(rec.volume.data[i], expect);
            } else {
                assert_eq!(rec.volume.data[i], 0.0);
            }
        }
    }

    #[test]
    fn uncovered_border_has_width_six() {
        let model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 2);
        let input = random_volume([17, 17, 17], 9);
        let rec = reconstruct(&model, &input, 1).unwrap();
        for z in 0..17 {
            for y in 0..17 {
                for x in 0..17 {
                    let inside = [x, y, z]
                        .iter()
                        .all(|&c| (PATCH_BORDER..17 - PATCH_BORDER).contains(&c));
                    assert_eq!(rec.coverage[input.index(x, y, z)], inside, "at {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn stride_three_tiles_exactly_once() {
        let model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 3);
        let input = random_volume([21, 21, 21], 10);
        // Re-run the accumulation to inspect counts directly.
        let centers = patch_grid_centers(input.dims, 3).unwrap();
        let mut count = vec![0u32; input.data.len()];
        for c in &centers {
            for dz in 0..3 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        count[input.index(c[0] - 1 + dx, c[1] - 1 + dy, c[2] - 1 + dz)] += 1;
                    }
                }
            }
        }
        let rec = reconstruct(&model, &input, 3).unwrap();
        for (i, &covered) in rec.coverage.iter().enumerate() {
            assert_eq!(covered, count[i] == 1, "count {} at {}", count[i], i);
        }
        assert!(reconstruct(&model, &input, 4).is_err());
    }

    #[test]
    fn reconstruction_matches_per_voxel_accumulation_oracle() {
        let model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 4);
        let input = random_volume([16, 15, 17], 11);
        let rec = reconstruct(&model, &input, 1).unwrap();

        let centers = patch_grid_centers(input.dims, 1).unwrap();
        let mut sum = vec![0.0f64; input.data.len()];
        let mut count = vec![0u32; input.data.len()];
        for &c in &centers {
            let window = extract_window(&input, c, PATCH_INPUT);
            let pred = model.predict(window).unwrap();
            let mut k = 0;
            for dz in 0..3 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let idx = input.index(c[0] - 1 + dx, c[1] - 1 + dy, c[2] - 1 + dz);
                        sum[idx] += pred.data()[k] as f64;
                        count[idx] += 1;
                        k += 1;
                    }
                }
            }
        }
        for i in 0..sum.len() {
            let want = if count[i] > 0 { (sum[i] / count[i] as f64) as f32 } else { 0.0 };
            assert!(
                (rec.volume.data[i] - want).abs() <= 1e-6,
                "voxel {i}: {} vs {}",
                rec.volume.data[i],
                want
            );
        }
    }

    #[test]
    fn prediction_ignores_voxels_beyond_chebyshev_seven() {
        let model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 12);
        let base = random_volume([17, 17, 17], 13);
        let rec_base = reconstruct(&model, &base, 3).unwrap();

        // Voxel v=(8,8,8) is the volume center; perturb at Chebyshev
        // distance 8 (coordinate 0) and the prediction at v must be
        // bit-identical, while a distance-1 perturbation must reach it.
        let mut far = base.clone();
        *far.at_mut(0, 8, 8) += 0.5;
        let rec_far = reconstruct(&model, &far, 3).unwrap();
        let v = base.index(8, 8, 8);
        assert_eq!(rec_base.volume.data[v].to_bits(), rec_far.volume.data[v].to_bits());

        let mut near = base.clone();
        *near.at_mut(7, 8, 8) += 0.5;
        let rec_near = reconstruct(&model, &near, 3).unwrap();
        assert_ne!(rec_base.volume.data[v].to_bits(), rec_near.volume.data[v].to_bits());
    }

    #[test]
    fn training_on_one_batch_reduces_loss() {
        let mut model: PatchCnn<f32> = build_patch_cnn(&OptimConfig::default(), 14);
        let input = random_volume([15, 15, 15], 15);
        let target = random_volume([15, 15, 15], 16);
        let pair = extract_pair_at(&input, &target, [7, 7, 7]);
        let first = model
            .train_step(pair.input.clone(), &pair.target, LossKind::Bce)
            .unwrap();
        let mut last = first;
        for _ in 0..25 {
            last = model
                .train_step(pair.input.clone(), &pair.target, LossKind::Bce)
                .unwrap();
        }
        assert!(last < first, "{first} -> {last}");
        assert_eq!(model.step, 26);
    }

    #[test]
    fn sampled_gradients_match_finite_differences() {
        let mut model: PatchCnn<f64> = build_patch_cnn(&OptimConfig::default(), 17);
        let mut rng = seeded(18);
        for arr in model.param_arrays_mut() {
            for v in arr.iter_mut() {
                *v += range_f64(&mut rng, -0.02, 0.02);
            }
        }
        let model = model;
        let n = 15 * 15 * 15;
        let x = Tensor::new(
            &[1, 1, 15, 15, 15],
            (0..n).map(|_| range_f64(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap();
        let t = Tensor::new(&[1, 1, 3, 3, 3], (0..27).map(|_| range_f64(&mut rng, 0.0, 1.0)).collect())
            .unwrap();

        let (y, tape) = model.forward_train(x.clone()).unwrap();
        let (_, dpred) = loss_by_kind(LossKind::Bce, &y, &t, Reduction::Mean).unwrap();
        let grads = model.backward(&dpred, &tape).unwrap();

        let eval = |pi: usize, k: usize, delta: f64| -> f64 {
            let mut mm = model.clone();
            mm.param_arrays_mut()[pi][k] += delta;
            let (y, _) = mm.forward_train(x.clone()).unwrap();
            loss_by_kind(LossKind::Bce, &y, &t, Reduction::Mean).unwrap().0
        };

        let eps = 1e-6;
        let mut rng = seeded(19);
        for pi in 0..grads.len() {
            for _ in 0..3 {
                let k = index(&mut rng, grads[pi].len());
                let numeric = (eval(pi, k, eps) - eval(pi, k, -eps)) / (2.0 * eps);
                let analytic = grads[pi][k];
                let err =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-3, "array {pi} index {k}: {analytic} vs {numeric}");
            }
        }
    }
}
