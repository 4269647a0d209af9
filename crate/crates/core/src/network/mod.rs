//! The four-branch multi-task CNN.
//!
//! Branches A and B see the left and right patch. C fuses their pooled
//! conv2 maps, D their pooled conv4 maps. The four 512-wide branch outputs
//! are concatenated (A, B, C, D) into the 2048-wide fused vector that feeds
//! both heads:
//!
//! ```text
//! h11   = relu(FC11(fused))
//! nss   = FC21(h11)
//! q     = FC32(relu(FC22([relu(FC12(fused)), h11])))
//! ```
//!
//! The full layer table lives in `docs/architecture.md`.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::error::{contract, Result};
use crate::imagepipe::PATCH_SIZE;
use crate::nss::{FeatureStandardizer, FEATURE_DIM};
use crate::tensor::{GradTape, Real, Tensor, Var};

/// Width of each branch output.
pub const BRANCH_DIM: usize = 512;
/// Width of the fused vector.
pub const FUSED_DIM: usize = 4 * BRANCH_DIM;
/// Width of FC11, FC12 and FC22.
pub const HEAD_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 convolution, stride 1, padding 1.
    Conv { cin: usize, cout: usize },
    Dense { fin: usize, fout: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kind: LayerKind,
}

const fn conv(name: &'static str, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec { name, kind: LayerKind::Conv { cin, cout } }
}

const fn fc(name: &'static str, fin: usize, fout: usize) -> LayerSpec {
    LayerSpec { name, kind: LayerKind::Dense { fin, fout } }
}

/// Every layer in checkpoint order. Each contributes a weight and a bias tensor.
pub const LAYERS: [LayerSpec; 25] = [
    conv("a.conv1", 1, 32),
    conv("a.conv2", 32, 32),
    conv("a.conv3", 32, 64),
    conv("a.conv4", 64, 64),
    conv("a.conv5", 64, 128),
    fc("a.fc1", 2048, 512),
    fc("a.fc2", 512, 512),
    conv("b.conv1", 1, 32),
    conv("b.conv2", 32, 32),
    conv("b.conv3", 32, 64),
    conv("b.conv4", 64, 64),
    conv("b.conv5", 64, 128),
    fc("b.fc1", 2048, 512),
    fc("b.fc2", 512, 512),
    conv("c.conv6", 64, 64),
    conv("c.conv7", 64, 128),
    fc("c.fc1", 2048, 512),
    fc("c.fc2", 512, 512),
    fc("d.fc1", 8192, 512),
    fc("d.fc2", 512, 512),
    fc("fc11", FUSED_DIM, HEAD_DIM),
    fc("fc21", HEAD_DIM, FEATURE_DIM),
    fc("fc12", FUSED_DIM, HEAD_DIM),
    fc("fc22", 2 * HEAD_DIM, HEAD_DIM),
    fc("fc32", HEAD_DIM, 1),
];

const BRANCH_A: usize = 0;
const BRANCH_B: usize = 7;
const BRANCH_C: usize = 14;
const BRANCH_D: usize = 18;
pub(crate) const FC11: usize = 20;
pub(crate) const FC21: usize = 21;
const FC12: usize = 22;
const FC22: usize = 23;
pub(crate) const FC32: usize = 24;

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { cin, cout } => vec![cout, cin, 3, 3],
            LayerKind::Dense { fin, fout } => vec![fout, fin],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { cout, .. } => vec![cout],
            LayerKind::Dense { fout, .. } => vec![fout],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cin, .. } => cin * 9,
            LayerKind::Dense { fin, .. } => fin,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.bias_shape()[0]
    }
}

/// Total number of scalars in a [`NetworkParams`].
pub fn parameter_count() -> usize {
    LAYERS.iter().map(LayerSpec::parameter_count).sum()
}

/// `(name, shape)` of every tensor in checkpoint order.
pub fn tensor_manifest() -> Vec<(String, Vec<usize>)> {
    LAYERS
        .iter()
        .flat_map(|l| [(format!("{}.weight", l.name), l.weight_shape()), (format!("{}.bias", l.name), l.bias_shape())])
        .collect()
}

/// Hex SHA-256 of the tensor manifest and the wiring version.
pub fn architecture_hash() -> String {
    let mut h = Sha256::new();
    h.update(b"stereoqa four-branch v1; taps: pooled conv2 -> C, pooled conv4 -> D; fused A,B,C,D\n");
    for (name, shape) in tensor_manifest() {
        h.update(format!("{name} {shape:?}\n").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// How [`build_network`] draws initial weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// `U(−s, s)` with `s = gain·sqrt(2 / fan_in)`.
    Uniform { gain: f64 },
    /// `N(0, s²)` with `s = gain·sqrt(2 / fan_in)`.
    Normal { gain: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Uniform { gain: 1.0 }
    }
}

/// All weights and biases, the label standardizer, and the creation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Real> {
    tensors: Vec<Tensor<T>>,
    pub seed: u64,
    pub standardizer: FeatureStandardizer,
}

/// Fresh parameters: weights scaled by `sqrt(2 / fan_in)`, zero biases.
pub fn build_network<T: Real>(seed: u64) -> NetworkParams<T> {
    build_network_with(seed, InitScheme::default())
}

pub fn build_network_with<T: Real>(seed: u64, scheme: InitScheme) -> NetworkParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(2 * LAYERS.len());
    for layer in &LAYERS {
        let shape = layer.weight_shape();
        let n: usize = shape.iter().product();
        let s = (2.0 / layer.fan_in() as f64).sqrt();
        let data: Vec<T> = match scheme {
            InitScheme::Uniform { gain } => {
                let u = Uniform::new_inclusive(-gain * s, gain * s).expect("finite bounds");
                (0..n).map(|_| T::from_f64_lossy(u.sample(&mut rng))).collect()
            }
            InitScheme::Normal { gain } => {
                let d = rand_distr::Normal::new(0.0, gain * s).expect("positive deviation");
                (0..n).map(|_| T::from_f64_lossy(d.sample(&mut rng))).collect()
            }
        };
        tensors.push(Tensor::new(shape, data).expect("shape matches data"));
        tensors.push(Tensor::zeros(&layer.bias_shape()));
    }
    NetworkParams { tensors, seed, standardizer: FeatureStandardizer::identity() }
}

impl<T: Real> NetworkParams<T> {
    /// Assembles parameters from tensors in checkpoint order.
    pub fn from_tensors(tensors: Vec<Tensor<T>>, seed: u64, standardizer: FeatureStandardizer) -> Result<Self> {
        let manifest = tensor_manifest();
        if tensors.len() != manifest.len() {
            return Err(contract(format!("{} tensors, expected {}", tensors.len(), manifest.len())));
        }
        for (t, (name, shape)) in tensors.iter().zip(&manifest) {
            if t.shape() != shape.as_slice() {
                return Err(contract(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self { tensors, seed, standardizer })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Tensor by manifest name, e.g. `"fc21.weight"`.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        tensor_manifest().iter().position(|(n, _)| n == name).map(|i| &self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            seed: self.seed,
            standardizer: self.standardizer.clone(),
        }
    }
}

/// Per-patch outputs of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub q_hat: T,
    pub nss_hat: Vec<T>,
    pub fused: Vec<T>,
}

/// Tape handles of the network outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Outputs {
    /// `[N, 1]`
    pub q: Var,
    /// `[N, 108]`
    pub nss: Var,
    /// `[N, 2048]`
    pub fused: Var,
}

/// Registers every tensor on the tape; layers for which `trainable` is
/// false become constants.
pub(crate) fn register<'p, T: Real>(
    tape: &mut GradTape<'p, T>,
    params: &'p NetworkParams<T>,
    trainable: impl Fn(usize) -> bool,
) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| if trainable(i / 2) { tape.param(t) } else { tape.input(t) })
        .collect()
}

struct Net<'a, 't, 'p, T: Real> {
    tape: &'t mut GradTape<'p, T>,
    vars: &'a [Var],
}

impl<T: Real> Net<'_, '_, '_, T> {
    fn conv_relu(&mut self, layer: usize, x: Var) -> Result<Var> {
        let y = self.tape.conv2d(x, self.vars[2 * layer], self.vars[2 * layer + 1], 1)?;
        Ok(self.tape.relu(y))
    }

    fn dense(&mut self, layer: usize, x: Var) -> Result<Var> {
        self.tape.dense(x, self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    fn dense_relu(&mut self, layer: usize, x: Var) -> Result<Var> {
        let y = self.dense(layer, x)?;
        Ok(self.tape.relu(y))
    }

    fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.value(x).shape();
        let (n, rest) = (s[0], s[1..].iter().product::<usize>());
        self.tape.reshape(x, &[n, rest])
    }

    /// Returns (pooled conv2, pooled conv4, fc2 output).
    fn view_branch(&mut self, base: usize, x: Var) -> Result<(Var, Var, Var)> {
        let c1 = self.conv_relu(base, x)?;
        let c2 = self.conv_relu(base + 1, c1)?;
        let p2 = self.tape.maxpool2(c2)?;
        let c3 = self.conv_relu(base + 2, p2)?;
        let c4 = self.conv_relu(base + 3, c3)?;
        let p4 = self.tape.maxpool2(c4)?;
        let c5 = self.conv_relu(base + 4, p4)?;
        let p5 = self.tape.maxpool2(c5)?;
        let f = self.flatten(p5)?;
        let h1 = self.dense_relu(base + 5, f)?;
        let h2 = self.dense_relu(base + 6, h1)?;
        Ok((p2, p4, h2))
    }
}

/// Records the network on `tape` for batched patches `[N, 1, 32, 32]`.
///
/// With `detach_fc11`, FC11's activation reaches FC22 as a constant, so the
/// quality loss sends no gradient through FC11.
pub(crate) fn record<T: Real>(
    tape: &mut GradTape<'_, T>,
    vars: &[Var],
    left: Var,
    right: Var,
    detach_fc11: bool,
) -> Result<Outputs> {
    let expect = |s: &[usize]| s.len() == 4 && s[1..] == [1, PATCH_SIZE, PATCH_SIZE];
    let (ls, rs) = (tape.value(left).shape().to_vec(), tape.value(right).shape().to_vec());
    if !expect(&ls) || ls != rs {
        return Err(contract(format!("patch batches must both be [N, 1, 32, 32], got {ls:?} and {rs:?}")));
    }
    let mut net = Net { tape, vars };
    let (a2, a4, a) = net.view_branch(BRANCH_A, left)?;
    let (b2, b4, b) = net.view_branch(BRANCH_B, right)?;

    let x = net.tape.concat(&[a2, b2])?;
    let c6 = net.conv_relu(BRANCH_C, x)?;
    let p6 = net.tape.maxpool2(c6)?;
    let c7 = net.conv_relu(BRANCH_C + 1, p6)?;
    let p7 = net.tape.maxpool2(c7)?;
    let f = net.flatten(p7)?;
    let h = net.dense_relu(BRANCH_C + 2, f)?;
    let c = net.dense_relu(BRANCH_C + 3, h)?;

    let x = net.tape.concat(&[a4, b4])?;
    let f = net.flatten(x)?;
    let h = net.dense_relu(BRANCH_D, f)?;
    let d = net.dense_relu(BRANCH_D + 1, h)?;

    let fused = net.tape.concat(&[a, b, c, d])?;
    let h11 = net.dense_relu(FC11, fused)?;
    let nss = net.dense(FC21, h11)?;
    let h11_q = if detach_fc11 { net.tape.detach(h11) } else { h11 };
    let h12 = net.dense_relu(FC12, fused)?;
    let joined = net.tape.concat(&[h12, h11_q])?;
    let h22 = net.dense_relu(FC22, joined)?;
    let q = net.dense(FC32, h22)?;
    Ok(Outputs { q, nss, fused })
}

/// Batched inference: `left` and `right` are `[N, 1, 32, 32]`.
pub fn forward_batch<T: Real>(
    params: &NetworkParams<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
) -> Result<Vec<ForwardOutput<T>>> {
    let mut tape = GradTape::new();
    let vars = register(&mut tape, params, |_| false);
    let (l, r) = (tape.input(left), tape.input(right));
    let out = record(&mut tape, &vars, l, r, false)?;
    let n = left.shape()[0];
    let (q, nss, fused) = (tape.value(out.q), tape.value(out.nss), tape.value(out.fused));
    Ok((0..n)
        .map(|i| ForwardOutput {
            q_hat: q.data()[i],
            nss_hat: nss.data()[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].to_vec(),
            fused: fused.data()[i * FUSED_DIM..(i + 1) * FUSED_DIM].to_vec(),
        })
        .collect())
}

/// One normalized patch pair, each `[1, 32, 32]`.
pub fn forward<T: Real>(params: &NetworkParams<T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<ForwardOutput<T>> {
    let want = [1, PATCH_SIZE, PATCH_SIZE];
    if left.shape() != want || right.shape() != want {
        return Err(contract(format!(
            "patches must be [1, 32, 32], got {:?} and {:?}",
            left.shape(),
            right.shape()
        )));
    }
    let batch = |t: &Tensor<T>| t.clone().reshape(&[1, 1, PATCH_SIZE, PATCH_SIZE]);
    let out = forward_batch(params, &batch(left)?, &batch(right)?)?;
    Ok(out.into_iter().next().expect("one patch in, one out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_patch(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(vec![1, 32, 32], (0..1024).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_hand_sum() {
        // A/B: 320 + 9248 + 18496 + 36928 + 73856 + 1049088 + 262656
        let branch_ab = 1_450_592;
        // C: 36928 + 73856 + 1049088 + 262656; D: 4194816 + 262656
        let (branch_c, branch_d) = (1_422_528, 4_457_472);
        let heads = 2_098_176 * 3 + 110_700 + 1025;
        assert_eq!(parameter_count(), 2 * branch_ab + branch_c + branch_d + heads);
        assert_eq!(parameter_count(), 15_187_437);
    }

    #[test]
    fn same_seed_same_params_and_zero_biases() {
        let p = build_network::<f32>(5);
        assert_eq!(p, build_network::<f32>(5));
        assert_ne!(p, build_network::<f32>(6));
        for (t, (name, _)) in p.tensors().iter().zip(tensor_manifest()) {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_scale_follows_fan_in() {
        // U(−s, s) has variance s²/3; N(0, s²) has s²
        let s2: f64 = 2.0 / 8192.0;
        for (scheme, expect) in [(InitScheme::Uniform { gain: 1.0 }, s2 / 3.0), (InitScheme::Normal { gain: 1.0 }, s2)] {
            let p = build_network_with::<f64>(1, scheme);
            let w = p.get("d.fc1.weight").unwrap();
            assert!(w.data().iter().all(|v| v.abs() <= s2.sqrt()) || matches!(scheme, InitScheme::Normal { .. }));
            let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            assert!((var / expect - 1.0).abs() < 0.01, "{scheme:?}: {var}");
        }
    }

    #[test]
    fn output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = build_network::<f64>(2);
        let out = forward(&p, &random_patch(&mut rng), &random_patch(&mut rng)).unwrap();
        assert_eq!((out.nss_hat.len(), out.fused.len()), (FEATURE_DIM, FUSED_DIM));
        assert!(out.q_hat.is_finite() && out.nss_hat.iter().chain(&out.fused).all(|v| v.is_finite()));
        assert!(forward(&p, &Tensor::zeros(&[1, 31, 32]), &Tensor::zeros(&[1, 32, 32])).is_err());
    }

    #[test]
    fn swapping_views_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = build_network::<f64>(3);
        let (l, r) = (random_patch(&mut rng), random_patch(&mut rng));
        let (x, y) = (forward(&p, &l, &r).unwrap(), forward(&p, &r, &l).unwrap());
        assert_ne!(x.q_hat, y.q_hat);
        assert_ne!(x.fused, y.fused);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = build_network::<f64>(4);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = forward(&p, &random_patch(&mut rng), &random_patch(&mut rng)).unwrap();
        assert_eq!(out.q_hat, 0.0);
        assert!(out.nss_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_matches_single_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = build_network::<f64>(7);
        let pairs: Vec<_> = (0..3).map(|_| (random_patch(&mut rng), random_patch(&mut rng))).collect();
        let stack = |sel: fn(&(Tensor<f64>, Tensor<f64>)) -> &Tensor<f64>| {
            Tensor::new(vec![3, 1, 32, 32], pairs.iter().flat_map(|pr| sel(pr).data().to_vec()).collect()).unwrap()
        };
        let batch = forward_batch(&p, &stack(|pr| &pr.0), &stack(|pr| &pr.1)).unwrap();
        for (b, (l, r)) in batch.iter().zip(&pairs) {
            let single = forward(&p, l, r).unwrap();
            assert!((b.q_hat - single.q_hat).abs() < 1e-12);
        }
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = architecture_hash();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(h, architecture_hash());
    }
}
