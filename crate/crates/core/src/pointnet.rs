//! PointNet binary classifier with spatial and feature transform networks.
//!
//! Input clouds are `[B×S×11]`: three spatial coordinates followed by an
//! eight-way one-hot boundary class. Only the spatial block passes through
//! the 3×3 spatial transform; the one-hot block is concatenated back
//! unchanged before the shared per-point MLP.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{BatchMoments, Graph, NormStats, Reduction, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Number of boundary classes in the one-hot block.
pub const BOUNDARY_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PointNetConfig {
    pub s_points: usize,
    pub in_dim: usize,
    pub spatial_dim: usize,
    pub class_count: usize,
    pub mlp1_widths: Vec<usize>,
    pub mlp2_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub feature_transform: bool,
    /// Weight of the transform orthogonality penalty in the training loss.
    pub ortho_weight: f64,
}

impl Default for PointNetConfig {
    fn default() -> Self {
        PointNetConfig {
            s_points: 1000,
            in_dim: 11,
            spatial_dim: 3,
            class_count: 2,
            mlp1_widths: alloc::vec![64, 64],
            mlp2_widths: alloc::vec![64, 128, 1024],
            head_widths: alloc::vec![512, 256],
            dropout_rate: 0.3,
            feature_transform: true,
            ortho_weight: 0.001,
        }
    }
}

impl PointNetConfig {
    /// Small network used for gradient checks and fast tests.
    pub fn tiny() -> Self {
        PointNetConfig {
            s_points: 8,
            mlp1_widths: alloc::vec![4, 4],
            mlp2_widths: alloc::vec![4, 8, 16],
            head_widths: alloc::vec![8, 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Spec(m.to_string()));
        if self.s_points < 1 {
            return fail("s_points must be at least 1");
        }
        if self.spatial_dim != 3 {
            return fail("spatial_dim is fixed at 3");
        }
        if self.in_dim != self.spatial_dim + BOUNDARY_CLASSES {
            return fail("in_dim must equal spatial_dim + 8 boundary classes");
        }
        if self.class_count != 2 {
            return fail("class_count is fixed at 2");
        }
        if self.mlp1_widths.is_empty() || self.mlp2_widths.is_empty() {
            return fail("mlp1_widths and mlp2_widths must be non-empty");
        }
        let widths = self
            .mlp1_widths
            .iter()
            .chain(&self.mlp2_widths)
            .chain(&self.head_widths);
        if widths.clone().any(|&w| w == 0) {
            return fail("all layer widths must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        if !(self.ortho_weight >= 0.0 && self.ortho_weight.is_finite()) {
            return fail("ortho_weight must be a nonnegative real");
        }
        Ok(())
    }

    /// Width of the per-point features the feature transform acts on.
    pub fn feature_dim(&self) -> usize {
        *self.mlp1_widths.last().unwrap()
    }

    /// Width of the pooled global feature.
    pub fn global_dim(&self) -> usize {
        *self.mlp2_widths.last().unwrap()
    }

    /// Trainable parameter count of one transform network predicting a
    /// `k×k` matrix.
    pub fn tnet_param_count(&self, k: usize) -> usize {
        let mut total = 0;
        let mut fan_in = k;
        for &w in self.mlp2_widths.iter().chain(&self.head_widths) {
            total += fan_in * w + 2 * w;
            fan_in = w;
        }
        total + fan_in * k * k + k * k
    }
}

/// Train mode uses batch moments and dropout; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

/// Named parameter collection: weights, biases, batchnorm affine terms and
/// batchnorm running moments (the latter are not trainable).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(name: &str) -> bool {
        !(name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Folds batch moments into the running moments:
    /// `running ← momentum·running + (1−momentum)·batch`.
    pub fn update_running(&mut self, prefix: &str, moments: &BatchMoments<T>, momentum: f64) -> Result<()> {
        let m = T::lit(momentum);
        let one_m = T::one() - m;
        for (suffix, batch) in [(RUNNING_MEAN, &moments.mean), (RUNNING_VAR, &moments.var)] {
            let run = self.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
        Ok(())
    }
}

/// Batchnorm running-moment momentum.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    /// Weight followed by batchnorm (no bias).
    Normed,
    /// Weight plus bias.
    Affine,
    /// Final layer of a transform network, `k×k` outputs initialized to identity.
    TransformOut(usize),
}

struct LayerSpec {
    prefix: String,
    fan_in: usize,
    fan_out: usize,
    kind: LayerKind,
}

fn tnet_layout(config: &PointNetConfig, name: &str, k: usize, out: &mut Vec<LayerSpec>) {
    let mut fan_in = k;
    for (i, &w) in config.mlp2_widths.iter().enumerate() {
        out.push(LayerSpec {
            prefix: format!("{name}.conv{i}"),
            fan_in,
            fan_out: w,
            kind: LayerKind::Normed,
        });
        fan_in = w;
    }
    for (i, &w) in config.head_widths.iter().enumerate() {
        out.push(LayerSpec {
            prefix: format!("{name}.fc{i}"),
            fan_in,
            fan_out: w,
            kind: LayerKind::Normed,
        });
        fan_in = w;
    }
    out.push(LayerSpec {
        prefix: format!("{name}.out"),
        fan_in,
        fan_out: k * k,
        kind: LayerKind::TransformOut(k),
    });
}

fn layout(config: &PointNetConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    tnet_layout(config, "stn", config.spatial_dim, &mut specs);
    let mut fan_in = config.in_dim;
    for (i, &w) in config.mlp1_widths.iter().enumerate() {
        specs.push(LayerSpec {
            prefix: format!("mlp1.{i}"),
            fan_in,
            fan_out: w,
            kind: LayerKind::Normed,
        });
        fan_in = w;
    }
    if config.feature_transform {
        tnet_layout(config, "ftn", fan_in, &mut specs);
    }
    for (i, &w) in config.mlp2_widths.iter().enumerate() {
        specs.push(LayerSpec {
            prefix: format!("mlp2.{i}"),
            fan_in,
            fan_out: w,
            kind: LayerKind::Normed,
        });
        fan_in = w;
    }
    for (i, &w) in config.head_widths.iter().enumerate() {
        specs.push(LayerSpec {
            prefix: format!("head.{i}"),
            fan_in,
            fan_out: w,
            kind: LayerKind::Normed,
        });
        fan_in = w;
    }
    specs.push(LayerSpec {
        prefix: "head.out".into(),
        fan_in,
        fan_out: config.class_count,
        kind: LayerKind::Affine,
    });
    specs
}

/// Glorot-uniform bound for a `fan_in → fan_out` layer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// Fresh parameters: Glorot-uniform weights, zero biases, unit batchnorm
/// scales, and transform heads that output the identity matrix.
pub fn init_params<T: Real>(config: &PointNetConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::new();
    for spec in layout(config) {
        let weight_name = format!("{}.weight", spec.prefix);
        let shape = [spec.fan_in, spec.fan_out];
        let weight = match spec.kind {
            LayerKind::TransformOut(_) => Tensor::zeros(&shape),
            _ => {
                let bound = glorot_bound(spec.fan_in, spec.fan_out);
                let mut rng = seed::rng(seed, &[seed::hash_str(&weight_name)]);
                Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..=bound)))
            }
        };
        params.insert(weight_name, weight);
        match spec.kind {
            LayerKind::Normed => {
                let f = spec.fan_out;
                params.insert(format!("{}.bn.gamma", spec.prefix), Tensor::full(&[f], T::one()));
                params.insert(format!("{}.bn.beta", spec.prefix), Tensor::zeros(&[f]));
                params.insert(format!("{}.bn.{RUNNING_MEAN}", spec.prefix), Tensor::zeros(&[f]));
                params.insert(
                    format!("{}.bn.{RUNNING_VAR}", spec.prefix),
                    Tensor::full(&[f], T::one()),
                );
            }
            LayerKind::Affine => {
                params.insert(format!("{}.bias", spec.prefix), Tensor::zeros(&[spec.fan_out]));
            }
            LayerKind::TransformOut(k) => {
                let eye = Tensor::<T>::eye(k).reshape(&[k * k])?;
                params.insert(format!("{}.bias", spec.prefix), eye);
            }
        }
    }
    Ok(params)
}

/// Checks that `params` holds exactly the entries `config` requires.
pub fn check_params<T: Real>(config: &PointNetConfig, params: &ModelParams<T>) -> Result<()> {
    let expected: ModelParams<T> = init_params(config, 0)?;
    if expected.len() != params.len() {
        return Err(Error::Spec(format!(
            "parameter set has {} entries, configuration needs {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, t) in expected.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Dimension {
                op: "parameter",
                lhs: t.shape().to_vec(),
                rhs: got.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Output of [`forward`].
pub struct ForwardPass<T: Real> {
    /// `[B×2]` class logits.
    pub logits: Var,
    /// Batch mean of `‖I − A Aᵀ‖²_F` summed over the transform matrices.
    pub ortho_penalty: Var,
    /// Graph leaf of every trainable parameter used.
    pub params: Vec<(String, Var)>,
    /// Batch moments per batchnorm prefix (train mode only).
    pub moments: Vec<(String, BatchMoments<T>)>,
    /// Max-pool nodes (spatial transform, feature transform, global feature).
    pub pools: Vec<Var>,
    /// Predicted spatial (and feature) transform matrices, `[B×k×k]`.
    pub transforms: Vec<Var>,
}

struct Net<'a, T: Real> {
    g: &'a mut Graph<T>,
    params: &'a ModelParams<T>,
    mode: Mode,
    leaves: BTreeMap<String, Var>,
    moments: Vec<(String, BatchMoments<T>)>,
    pools: Vec<Var>,
}

impl<T: Real> Net<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = match self.mode {
            Mode::Train => self.g.param(t),
            Mode::Eval => self.g.constant(t),
        };
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x·W` followed by batchnorm + ReLU, or by a bias.
    fn dense(&mut self, x: Var, prefix: &str, normed: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.g.matmul(x, w)?;
        if !normed {
            let b = self.p(&format!("{prefix}.bias"))?;
            return self.g.add(y, b);
        }
        let gamma = self.p(&format!("{prefix}.bn.gamma"))?;
        let beta = self.p(&format!("{prefix}.bn.beta"))?;
        let (y, moments) = match self.mode {
            Mode::Train => self.g.batch_norm_relu(y, gamma, beta, NormStats::Batch)?,
            Mode::Eval => {
                let params = self.params;
                let mean = params.get(&format!("{prefix}.bn.{RUNNING_MEAN}"))?.data();
                let var = params.get(&format!("{prefix}.bn.{RUNNING_VAR}"))?.data();
                self.g
                    .batch_norm_relu(y, gamma, beta, NormStats::Running { mean, var })?
            }
        };
        if let Some(m) = moments {
            self.moments.push((format!("{prefix}.bn"), m));
        }
        Ok(y)
    }

    /// Per-point MLP over `[B·S×C]` rows, then max over the S axis.
    fn point_mlp_pool(
        &mut self,
        mut x: Var,
        name: &str,
        widths: usize,
        batch: usize,
        points: usize,
    ) -> Result<Var> {
        for i in 0..widths {
            x = self.dense(x, &format!("{name}{i}"), true)?;
        }
        let c = self.g.shape(x)[1];
        let x = self.g.reshape(x, &[batch, points, c])?;
        let pooled = self.g.reduce(x, Reduction::Max, 1)?;
        self.pools.push(pooled);
        Ok(pooled)
    }

    /// Transform network on `[B·S×k]` rows → `[B×k×k]`.
    fn tnet(&mut self, x: Var, name: &str, k: usize, config: &PointNetConfig, batch: usize) -> Result<Var> {
        let mut h = self.point_mlp_pool(
            x,
            &format!("{name}.conv"),
            config.mlp2_widths.len(),
            batch,
            config.s_points,
        )?;
        for i in 0..config.head_widths.len() {
            h = self.dense(h, &format!("{name}.fc{i}"), true)?;
        }
        let out = self.dense(h, &format!("{name}.out"), false)?;
        self.g.reshape(out, &[batch, k, k])
    }

    /// `‖A Aᵀ − I‖²_F` summed over the batch.
    fn ortho(&mut self, a: Var, k: usize) -> Result<Var> {
        let at = self.g.transpose_last(a)?;
        let aat = self.g.batch_matmul(a, at)?;
        let eye = self.g.constant(Tensor::eye(k));
        let diff = self.g.sub(aat, eye)?;
        let sq = self.g.mul(diff, diff)?;
        Ok(self.g.sum_all(sq))
    }
}

/// Builds the network on `g` for a `[B×S×11]` batch.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    config: &PointNetConfig,
    batch: &Tensor<T>,
    mode: Mode,
    seed: u64,
) -> Result<ForwardPass<T>> {
    let shape = batch.shape();
    if shape.len() != 3 || shape[1] != config.s_points || shape[2] != config.in_dim {
        return Err(Error::Dimension {
            op: "pointnet input",
            lhs: shape.to_vec(),
            rhs: alloc::vec![config.s_points, config.in_dim],
        });
    }
    let (b, s) = (shape[0], shape[1]);
    let sd = config.spatial_dim;
    let mut net = Net {
        g,
        params,
        mode,
        leaves: BTreeMap::new(),
        moments: Vec::new(),
        pools: Vec::new(),
    };

    let x = net.g.constant(batch.clone());
    let coords = net.g.slice_last(x, 0, sd)?;
    let onehot = net.g.slice_last(x, sd, config.in_dim)?;

    // spatial transform on coordinates only
    let coord_rows = net.g.reshape(coords, &[b * s, sd])?;
    let a3 = net.tnet(coord_rows, "stn", sd, config, b)?;
    let moved = net.g.batch_matmul(coords, a3)?;
    let x = net.g.concat_last(moved, onehot)?;
    let mut h = net.g.reshape(x, &[b * s, config.in_dim])?;

    for i in 0..config.mlp1_widths.len() {
        h = net.dense(h, &format!("mlp1.{i}"), true)?;
    }

    let mut transforms = alloc::vec![a3];
    let mut penalty = net.ortho(a3, sd)?;
    if config.feature_transform {
        let k = config.feature_dim();
        let a_feat = net.tnet(h, "ftn", k, config, b)?;
        let per_cloud = net.g.reshape(h, &[b, s, k])?;
        let moved = net.g.batch_matmul(per_cloud, a_feat)?;
        h = net.g.reshape(moved, &[b * s, k])?;
        let p = net.ortho(a_feat, k)?;
        penalty = net.g.add(penalty, p)?;
        transforms.push(a_feat);
    }
    let ortho_penalty = net.g.scale(penalty, T::one() / T::lit(b as f64));

    let mut h = net.point_mlp_pool(h, "mlp2.", config.mlp2_widths.len(), b, s)?;
    for i in 0..config.head_widths.len() {
        h = net.dense(h, &format!("head.{i}"), true)?;
    }
    if mode == Mode::Train && config.dropout_rate > 0.0 {
        h = net.g.dropout(h, config.dropout_rate, seed::derive(seed, &[0xd0]))?;
    }
    let logits = net.dense(h, "head.out", false)?;

    let Net {
        leaves,
        moments,
        pools,
        ..
    } = net;
    Ok(ForwardPass {
        logits,
        ortho_penalty,
        params: leaves.into_iter().collect(),
        moments,
        pools,
        transforms,
    })
}

/// Row-wise softmax of eval-mode logits, `[B×2]`.
pub fn predict_proba<T: Real>(
    params: &ModelParams<T>,
    config: &PointNetConfig,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pass = forward(&mut g, params, config, batch, Mode::Eval, 0)?;
    Ok(softmax_rows(g.value(pass.logits)))
}

pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let c = *logits.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(c) {
        out.extend(crate::autograd::log_softmax_row(row, 0).0);
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(config: &PointNetConfig, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..b * config.s_points {
            for _ in 0..3 {
                data.push(rng.random_range(-1.0..1.0));
            }
            let class = rng.random_range(0..8);
            data.extend((0..8).map(|c| if c == class { 1.0 } else { 0.0 }));
        }
        Tensor::new(&[b, config.s_points, 11], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(PointNetConfig::default().validate().is_ok());
        let bad = PointNetConfig {
            dropout_rate: 1.0,
            ..PointNetConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Spec(_))));
        let bad = PointNetConfig {
            in_dim: 10,
            ..PointNetConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PointNetConfig {
            mlp2_widths: vec![4, 0],
            ..PointNetConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = PointNetConfig::default();
        let a: ModelParams<f32> = init_params(&c, 5).unwrap();
        let b: ModelParams<f32> = init_params(&c, 5).unwrap();
        assert_eq!(a, b);
        let other: ModelParams<f32> = init_params(&c, 6).unwrap();
        assert_ne!(a, other);

        // the 3→64 first spatial-transform layer
        let w = a.get("stn.conv0.weight").unwrap();
        assert_eq!(w.shape(), &[3, 64]);
        let bound = (6.0f64 / 67.0).sqrt();
        assert_eq!(glorot_bound(3, 64), bound);
        assert!(w.data().iter().all(|&v| (v as f64).abs() <= bound + 1e-7));
        assert!(w.data().iter().any(|&v| (v as f64).abs() > 0.5 * bound));
        assert_eq!(a.get("head.out.bias").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(
            a.get("stn.out.bias").unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn transforms_start_at_identity() {
        let c = PointNetConfig::tiny();
        let params: ModelParams<f64> = init_params(&c, 1).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let pass = forward(&mut g, &params, &c, &random_batch(&c, 3, 2), mode, 0).unwrap();
            assert_eq!(g.value(pass.ortho_penalty).data(), &[0.0]);
            let a3 = g.value(pass.transforms[0]).data();
            for blk in a3.chunks(9) {
                assert_eq!(blk, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let c = PointNetConfig::tiny();
        let params: ModelParams<f64> = init_params(&c, 1).unwrap();
        let mut g = Graph::new();
        let wrong_s = Tensor::zeros(&[2, 7, 11]);
        assert!(matches!(
            forward(&mut g, &params, &c, &wrong_s, Mode::Eval, 0),
            Err(Error::Dimension { .. })
        ));
        let wrong_d = Tensor::zeros(&[2, 8, 10]);
        assert!(forward(&mut g, &params, &c, &wrong_d, Mode::Eval, 0).is_err());
    }

    #[test]
    fn feature_transform_parameter_count() {
        let with = PointNetConfig::default();
        let without = PointNetConfig {
            feature_transform: false,
            ..with.clone()
        };
        let a: ModelParams<f32> = init_params(&with, 0).unwrap();
        let b: ModelParams<f32> = init_params(&without, 0).unwrap();
        // k = 64: convs 64·64+128, 64·128+256, 128·1024+2048; fcs 1024·512+1024,
        // 512·256+512; out 256·4096+4096
        let closed_form = (64 * 64 + 128)
            + (64 * 128 + 256)
            + (128 * 1024 + 2048)
            + (1024 * 512 + 1024)
            + (512 * 256 + 512)
            + (256 * 4096 + 4096);
        assert_eq!(with.tnet_param_count(64), closed_form);
        assert_eq!(a.trainable_count() - b.trainable_count(), closed_form);
    }

    #[test]
    fn eval_logits_are_permutation_invariant() {
        let c = PointNetConfig::tiny();
        let mut params: ModelParams<f64> = init_params(&c, 3).unwrap();
        perturb(&mut params, 4);
        let batch = random_batch(&c, 1, 9);
        let probs = predict_proba(&params, &c, &batch).unwrap();
        let mut rows: Vec<Vec<f64>> = batch.data().chunks(11).map(|r| r.to_vec()).collect();
        rows.reverse();
        rows.swap(0, 3);
        let permuted = Tensor::new(&[1, 8, 11], rows.concat()).unwrap();
        let probs2 = predict_proba(&params, &c, &permuted).unwrap();
        for (a, b) in probs.data().iter().zip(probs2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_normalized() {
        let p = softmax_rows(&Tensor::new(&[1, 2], vec![0.0f64, 0.0]).unwrap());
        assert_eq!(p.data(), &[0.5, 0.5]);
        let c = PointNetConfig::tiny();
        let mut params: ModelParams<f64> = init_params(&c, 3).unwrap();
        perturb(&mut params, 5);
        let probs = predict_proba(&params, &c, &random_batch(&c, 5, 1)).unwrap();
        for row in probs.data().chunks(2) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn running_moments_update() {
        let c = PointNetConfig::tiny();
        let mut params: ModelParams<f64> = init_params(&c, 0).unwrap();
        let m = BatchMoments {
            mean: vec![1.0; 4],
            var: vec![3.0; 4],
        };
        params.update_running("mlp1.0.bn", &m, BN_MOMENTUM).unwrap();
        let mean = params.get("mlp1.0.bn.running_mean").unwrap().data()[0];
        let var = params.get("mlp1.0.bn.running_var").unwrap().data()[0];
        assert!((mean - 0.1).abs() < 1e-12);
        assert!((var - 1.2).abs() < 1e-12);
    }

    /// Moves every parameter off its initial value so no gradient is
    /// trivially zero.
    pub(crate) fn perturb(params: &mut ModelParams<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.iter_mut() {
            let var = name.ends_with(RUNNING_VAR);
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
                if var {
                    *v = v.abs() + 0.5;
                }
            }
        }
    }
}
