//! Structural re-parameterization of multi-branch conv blocks.
//!
//! A [`BranchBlock`] sums up to three parallel linear paths over the same
//! input: a `k x k` conv (optionally followed by batch norm), a 1x1 conv
//! (optionally with batch norm) and a batch-normalized identity. Every path
//! is linear, so the block collapses into one `k x k` conv with bias:
//!
//! 1. batch norm is folded into the preceding conv,
//!    `w' = w * gamma / sqrt(var + eps)`, `b' = (b - mean) * gamma / sqrt(var + eps) + beta`;
//! 2. the 1x1 kernel is zero-padded to `k x k` around the center tap;
//! 3. the identity becomes a one-hot center-tap conv;
//! 4. kernels and biases are summed.
//!
//! The block's activation is applied after the merged conv. Merging never
//! crosses an activation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::ops::{add, batchnorm_forward, conv2d_forward, relu, BatchNormSpec, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    pub fn apply(self, x: Tensor) -> Tensor {
        match self {
            Activation::None => x,
            Activation::Relu => relu(&x),
        }
    }
}

/// A conv optionally followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub conv: ConvSpec,
    pub bn: Option<BatchNormSpec>,
}

impl Branch {
    pub fn plain(conv: ConvSpec) -> Self {
        Self { conv, bn: None }
    }

    pub fn with_bn(conv: ConvSpec, bn: BatchNormSpec) -> Self {
        Self { conv, bn: Some(bn) }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_forward(x, &self.conv)?;
        match &self.bn {
            Some(bn) => batchnorm_forward(&y, bn),
            None => Ok(y),
        }
    }

    /// The branch as a single conv.
    fn fused(&self) -> Result<ConvSpec> {
        match &self.bn {
            Some(bn) => fuse_conv_bn(&self.conv, bn),
            None => Ok(self.conv.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchBlock {
    pub main: Branch,
    pub one_by_one: Option<Branch>,
    pub identity: Option<BatchNormSpec>,
    pub activation: Activation,
}

impl BranchBlock {
    pub fn new(
        main: Branch,
        one_by_one: Option<Branch>,
        identity: Option<BatchNormSpec>,
        activation: Activation,
    ) -> Result<Self> {
        let block = Self {
            main,
            one_by_one,
            identity,
            activation,
        };
        block.check()?;
        Ok(block)
    }

    /// Single conv, no batch norm, no parallel paths.
    pub fn plain(conv: ConvSpec, activation: Activation) -> Self {
        Self {
            main: Branch::plain(conv),
            one_by_one: None,
            identity: None,
            activation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.main.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.main.conv.out_channels()
    }

    pub fn is_plain(&self) -> bool {
        self.main.bn.is_none() && self.one_by_one.is_none() && self.identity.is_none()
    }

    pub fn branch_count(&self) -> usize {
        1 + usize::from(self.one_by_one.is_some()) + usize::from(self.identity.is_some())
    }

    pub fn bn_count(&self) -> usize {
        usize::from(self.main.bn.is_some())
            + usize::from(self.one_by_one.as_ref().is_some_and(|b| b.bn.is_some()))
            + usize::from(self.identity.is_some())
    }

    pub fn param_count(&self) -> usize {
        let bn = |b: &BatchNormSpec| 4 * b.channels();
        self.main.conv.param_count()
            + self.main.bn.as_ref().map_or(0, bn)
            + self.one_by_one.as_ref().map_or(0, |b| {
                b.conv.param_count() + b.bn.as_ref().map_or(0, bn)
            })
            + self.identity.as_ref().map_or(0, bn)
    }

    /// Checks branch shapes and that every path samples the same input
    /// positions, which is what makes the merge exact.
    pub fn check(&self) -> Result<()> {
        let main = &self.main.conv;
        let (c_in, c_out) = (main.in_channels(), main.out_channels());
        let (kh, kw) = main.kernel();
        if let Some(bn) = &self.main.bn {
            if bn.channels() != c_out {
                return Err(Error::dim(format!(
                    "main batch norm has {} channels, conv outputs {c_out}",
                    bn.channels()
                )));
            }
        }
        if let Some(b) = &self.one_by_one {
            let c = &b.conv;
            if c.kernel() != (1, 1) {
                return Err(Error::InvalidGeometry(format!(
                    "1x1 branch has a {:?} kernel",
                    c.kernel()
                )));
            }
            if c.in_channels() != c_in || c.out_channels() != c_out {
                return Err(Error::dim(format!(
                    "1x1 branch is {}->{}, main is {c_in}->{c_out}",
                    c.in_channels(),
                    c.out_channels()
                )));
            }
            if c.stride != main.stride {
                return Err(Error::InvalidGeometry(format!(
                    "1x1 stride {:?} differs from main stride {:?}",
                    c.stride, main.stride
                )));
            }
            if (c.padding.0 + kh / 2, c.padding.1 + kw / 2) != main.padding {
                return Err(Error::InvalidGeometry(format!(
                    "1x1 padding {:?} is not centered under the {kh}x{kw} main padding {:?}",
                    c.padding, main.padding
                )));
            }
            if let Some(bn) = &b.bn {
                if bn.channels() != c_out {
                    return Err(Error::dim("1x1 batch norm channel mismatch"));
                }
            }
        }
        if let Some(bn) = &self.identity {
            if c_in != c_out || bn.channels() != c_out {
                return Err(Error::dim(format!(
                    "identity branch needs in == out channels (main {c_in}->{c_out}, bn {})",
                    bn.channels()
                )));
            }
            if main.stride != (1, 1) || main.padding != (kh / 2, kw / 2) {
                return Err(Error::InvalidGeometry(format!(
                    "identity branch needs stride 1 and same padding, main has stride {:?} padding {:?}",
                    main.stride, main.padding
                )));
            }
        }
        Ok(())
    }

    /// Sum of the branch outputs, then the activation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.main.forward(x)?;
        if let Some(b) = &self.one_by_one {
            y = add(&y, &b.forward(x)?)?;
        }
        if let Some(bn) = &self.identity {
            y = add(&y, &batchnorm_forward(x, bn)?)?;
        }
        Ok(self.activation.apply(y))
    }
}

/// Sequential chain of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDesc {
    pub input_channels: usize,
    pub blocks: Vec<BranchBlock>,
}

impl GraphDesc {
    pub fn new(input_channels: usize, blocks: Vec<BranchBlock>) -> Result<Self> {
        let g = Self {
            input_channels,
            blocks,
        };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        let mut c = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.check()?;
            if b.in_channels() != c {
                return Err(Error::dim(format!(
                    "block {i} expects {} channels, previous stage produces {c}",
                    b.in_channels()
                )));
            }
            c = b.out_channels();
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.input_channels, BranchBlock::out_channels)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, _, _) = x.dims3()?;
        if c != self.input_channels {
            return Err(Error::dim(format!(
                "graph expects {} input channels, got {c}",
                self.input_channels
            )));
        }
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }

    pub fn is_plain(&self) -> bool {
        self.blocks.iter().all(BranchBlock::is_plain)
    }

    pub fn bn_count(&self) -> usize {
        self.blocks.iter().map(BranchBlock::bn_count).sum()
    }

    pub fn parallel_branch_count(&self) -> usize {
        self.blocks.iter().map(|b| b.branch_count() - 1).sum()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(BranchBlock::param_count).sum()
    }
}

/// Folds inference batch norm into the conv that feeds it.
pub fn fuse_conv_bn(conv: &ConvSpec, bn: &BatchNormSpec) -> Result<ConvSpec> {
    let c_out = conv.out_channels();
    if bn.channels() != c_out {
        return Err(Error::dim(format!(
            "batch norm has {} channels, conv outputs {c_out}",
            bn.channels()
        )));
    }
    let per_out = conv.weights.len() / c_out;
    let mut w = conv.weights.data().to_vec();
    let mut b = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let std = (bn.var.data()[o] as f64 + bn.eps as f64).sqrt();
        let scale = bn.gamma.data()[o] as f64 / std;
        for v in &mut w[o * per_out..(o + 1) * per_out] {
            *v = (*v as f64 * scale) as f32;
        }
        let bias = conv.bias_at(o) as f64;
        b.push(((bias - bn.mean.data()[o] as f64) * scale + bn.beta.data()[o] as f64) as f32);
    }
    ConvSpec::new(
        Tensor::new(conv.weights.shape().to_vec(), w)?,
        Some(Tensor::vector(b)?),
        conv.stride,
        conv.padding,
    )
}

/// Zero-pads a 1x1 kernel to `kh x kw` around the center tap and widens the
/// padding so that the sampled positions do not move.
fn expand_1x1(conv: &ConvSpec, kh: usize, kw: usize) -> Result<ConvSpec> {
    if conv.kernel() != (1, 1) {
        return Err(Error::InvalidGeometry(format!(
            "expected a 1x1 kernel, got {:?}",
            conv.kernel()
        )));
    }
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::arg(format!("target kernel {kh}x{kw} must be odd")));
    }
    let (c_out, c_in) = (conv.out_channels(), conv.in_channels());
    let mut w = Tensor::zeros(&[c_out, c_in, kh, kw])?;
    for (k, &v) in conv.weights.data().iter().enumerate() {
        w.data_mut()[(k * kh + kh / 2) * kw + kw / 2] = v;
    }
    ConvSpec::new(
        w,
        conv.bias.clone(),
        conv.stride,
        (conv.padding.0 + kh / 2, conv.padding.1 + kw / 2),
    )
}

pub fn expand_1x1_to_kxk(conv: &ConvSpec, k: usize) -> Result<ConvSpec> {
    if k.is_multiple_of(2) {
        return Err(Error::arg(format!("kernel size {k} must be odd")));
    }
    expand_1x1(conv, k, k)
}

fn identity_kernel(channels: usize, kh: usize, kw: usize) -> Result<ConvSpec> {
    let mut w = Tensor::zeros(&[channels, channels, kh, kw])?;
    for c in 0..channels {
        w.data_mut()[((c * channels + c) * kh + kh / 2) * kw + kw / 2] = 1.0;
    }
    ConvSpec::new(w, None, (1, 1), (kh / 2, kw / 2))
}

/// One-hot center-tap conv computing `x -> x` at stride 1.
pub fn identity_to_conv(channels: usize, k: usize) -> Result<ConvSpec> {
    if k.is_multiple_of(2) {
        return Err(Error::arg(format!("kernel size {k} must be odd")));
    }
    identity_kernel(channels, k, k)
}

/// Collapses every branch of `block` into one conv. The block activation is
/// not part of the result.
pub fn merge_branches(block: &BranchBlock) -> Result<ConvSpec> {
    block.check()?;
    if block.is_plain() {
        return Ok(block.main.conv.clone());
    }
    let main = block.main.fused()?;
    let (kh, kw) = main.kernel();
    let mut parts = vec![main];
    if let Some(b) = &block.one_by_one {
        parts.push(expand_1x1(&b.fused()?, kh, kw)?);
    }
    if let Some(bn) = &block.identity {
        parts.push(fuse_conv_bn(&identity_kernel(block.out_channels(), kh, kw)?, bn)?);
    }
    let c_out = block.out_channels();
    let mut w = vec![0f32; parts[0].weights.len()];
    let mut b = vec![0f32; c_out];
    for p in &parts {
        for (acc, &v) in w.iter_mut().zip(p.weights.data()) {
            *acc += v;
        }
        for (o, acc) in b.iter_mut().enumerate() {
            *acc += p.bias_at(o);
        }
    }
    ConvSpec::new(
        Tensor::new(parts[0].weights.shape().to_vec(), w)?,
        Some(Tensor::vector(b)?),
        block.main.conv.stride,
        block.main.conv.padding,
    )
}

/// Error budget bounding how many neighbouring cells may be merged into one
/// site: `error_post` is the post-quantization bound `E`, `error_pre` the
/// full-precision per-cell error `e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeBudget {
    pub error_post: f64,
    pub error_pre: f64,
    pub cap: usize,
}

impl MergeBudget {
    pub const DEFAULT_CAP: usize = 2;

    pub fn new(error_post: f64, error_pre: f64, cap: usize) -> Result<Self> {
        let b = Self {
            error_post,
            error_pre,
            cap,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.error_post > 0.0 && self.error_pre > 0.0) {
            return Err(Error::arg(format!(
                "merge budget errors must be positive (E = {}, e = {})",
                self.error_post, self.error_pre
            )));
        }
        if self.cap == 0 {
            return Err(Error::arg("merge cap must be at least 1"));
        }
        Ok(())
    }
}

impl Default for MergeBudget {
    fn default() -> Self {
        Self {
            error_post: 0.02,
            error_pre: 0.01,
            cap: Self::DEFAULT_CAP,
        }
    }
}

/// `min(cap, max(1, floor(E / e)))`.
pub fn merge_budget_n(budget: &MergeBudget) -> Result<usize> {
    budget.validate()?;
    let ratio = (budget.error_post / budget.error_pre).floor();
    let n = if ratio >= budget.cap as f64 {
        budget.cap
    } else {
        (ratio as usize).max(1)
    };
    Ok(n.min(budget.cap))
}

/// Replaces every block by a single plain conv (activation kept).
///
/// Each site needs `branches - 1` merges; a site needing more than the
/// budget allows is rejected rather than partially merged.
pub fn reparam_graph(g: &GraphDesc, budget: &MergeBudget) -> Result<GraphDesc> {
    g.check()?;
    let n = merge_budget_n(budget)?;
    let blocks = g
        .blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let merges = b.branch_count() - 1;
            if merges > n {
                return Err(Error::BudgetExceeded(format!(
                    "block {i} needs {merges} merges, budget allows {n}"
                )));
            }
            Ok(BranchBlock::plain(merge_branches(b)?, b.activation))
        })
        .collect::<Result<Vec<_>>>()?;
    GraphDesc::new(g.input_channels, blocks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    pub tol: f32,
    pub height: usize,
    pub width: usize,
    /// Inputs are drawn uniformly from `[-input_range, input_range]`.
    pub input_range: f32,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            tol: 1e-4,
            height: 16,
            width: 16,
            input_range: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_error: f32,
    pub trials: usize,
    pub seed: u64,
    pub pass: bool,
}

/// Runs both graphs on the same seeded random inputs. Trial `k` draws from
/// stream `k` of the master seed, so the report does not depend on
/// scheduling.
pub fn verify_equivalence(g1: &GraphDesc, g2: &GraphDesc, cfg: &VerifyConfig) -> Result<EquivalenceReport> {
    if g1.input_channels != g2.input_channels || g1.output_channels() != g2.output_channels() {
        return Err(Error::dim(format!(
            "graph signatures differ: {}->{} vs {}->{}",
            g1.input_channels,
            g1.output_channels(),
            g2.input_channels,
            g2.output_channels()
        )));
    }
    let errors = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(trial as u64);
            let x = init::uniform(&mut rng, &[g1.input_channels, cfg.height, cfg.width], cfg.input_range)?;
            g1.forward(&x)?.max_abs_diff(&g2.forward(&x)?)
        })
        .collect::<Result<Vec<f32>>>()?;
    let max_abs_error = errors.into_iter().fold(0f32, |m, e| if e.is_nan() || e > m { e } else { m });
    Ok(EquivalenceReport {
        max_abs_error,
        trials: cfg.trials,
        seed: cfg.seed,
        pass: max_abs_error <= cfg.tol,
    })
}

/// Shape limits for [`random_graph`].
#[derive(Debug, Clone, Copy)]
pub struct RandomGraphSpec {
    pub max_blocks: usize,
    pub max_channels: usize,
    /// Max number of stride-2 blocks.
    pub max_downsamples: usize,
}

impl Default for RandomGraphSpec {
    fn default() -> Self {
        Self {
            max_blocks: 8,
            max_channels: 32,
            max_downsamples: 1,
        }
    }
}

/// Random multi-branch graph with variance-preserving weights.
pub fn random_graph<R: Rng>(rng: &mut R, spec: &RandomGraphSpec) -> Result<GraphDesc> {
    let input_channels = rng.gen_range(1..=spec.max_channels);
    let n_blocks = rng.gen_range(1..=spec.max_blocks.max(1));
    let mut c = input_channels;
    let mut downsamples = 0;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let k = [1, 3, 3, 3, 5][rng.gen_range(0..5)];
        let want_identity = rng.gen_bool(0.5);
        let stride = if !want_identity && downsamples < spec.max_downsamples && rng.gen_bool(0.2) {
            downsamples += 1;
            2
        } else {
            1
        };
        let out = if want_identity && stride == 1 {
            c
        } else {
            rng.gen_range(1..=spec.max_channels)
        };
        let has_1x1 = k > 1 && rng.gen_bool(0.7);
        let identity = want_identity && out == c && stride == 1;
        let branches = 1 + usize::from(has_1x1) + usize::from(identity);
        let gain = (3.0 / (c * k * k * branches) as f32).sqrt();
        let maybe_bn = |rng: &mut R| -> Result<Option<BatchNormSpec>> {
            if rng.gen_bool(0.7) {
                Ok(Some(init::batchnorm(rng, out)?))
            } else {
                Ok(None)
            }
        };
        let main = Branch {
            conv: init::conv(rng, c, out, k, stride, gain)?,
            bn: maybe_bn(rng)?,
        };
        let one_by_one = if has_1x1 {
            let g1 = (3.0 / (c * branches) as f32).sqrt() * 0.5;
            let conv = ConvSpec::new(
                init::uniform(rng, &[out, c, 1, 1], g1)?,
                Some(init::uniform(rng, &[out], 0.1)?),
                (stride, stride),
                (0, 0),
            )?;
            Some(Branch {
                conv,
                bn: maybe_bn(rng)?,
            })
        } else {
            None
        };
        let identity = if identity {
            Some(init::batchnorm(rng, out)?)
        } else {
            None
        };
        let activation = if rng.gen_bool(0.6) {
            Activation::Relu
        } else {
            Activation::None
        };
        blocks.push(BranchBlock::new(main, one_by_one, identity, activation)?);
        c = out;
    }
    GraphDesc::new(input_channels, blocks)
}

// ---- graph description files ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvRef {
    weights: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    stride: [usize; 2],
    padding: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnRef {
    mean: String,
    var: String,
    gamma: String,
    beta: String,
    eps: f32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchRef {
    conv: ConvRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRef {
    main: BranchRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    one_by_one: Option<BranchRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    identity_bn: Option<BnRef>,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    input_channels: usize,
    blocks: Vec<BlockRef>,
}

struct TensorWriter {
    base: PathBuf,
    subdir: String,
}

impl TensorWriter {
    fn put(&self, name: &str, t: &Tensor) -> Result<String> {
        let rel = format!("{}/{name}.bevt", self.subdir);
        t.save(self.base.join(&rel))?;
        Ok(rel)
    }

    fn conv(&self, prefix: &str, c: &ConvSpec) -> Result<ConvRef> {
        Ok(ConvRef {
            weights: self.put(&format!("{prefix}.weight"), &c.weights)?,
            bias: c
                .bias
                .as_ref()
                .map(|b| self.put(&format!("{prefix}.bias"), b))
                .transpose()?,
            stride: [c.stride.0, c.stride.1],
            padding: [c.padding.0, c.padding.1],
        })
    }

    fn bn(&self, prefix: &str, bn: &BatchNormSpec) -> Result<BnRef> {
        Ok(BnRef {
            mean: self.put(&format!("{prefix}.mean"), &bn.mean)?,
            var: self.put(&format!("{prefix}.var"), &bn.var)?,
            gamma: self.put(&format!("{prefix}.gamma"), &bn.gamma)?,
            beta: self.put(&format!("{prefix}.beta"), &bn.beta)?,
            eps: bn.eps,
        })
    }

    fn branch(&self, prefix: &str, b: &Branch) -> Result<BranchRef> {
        Ok(BranchRef {
            conv: self.conv(&format!("{prefix}.conv"), &b.conv)?,
            bn: b.bn.as_ref().map(|bn| self.bn(&format!("{prefix}.bn"), bn)).transpose()?,
        })
    }
}

fn read_conv(base: &Path, r: &ConvRef) -> Result<ConvSpec> {
    ConvSpec::new(
        Tensor::load(base.join(&r.weights))?,
        r.bias.as_ref().map(|b| Tensor::load(base.join(b))).transpose()?,
        (r.stride[0], r.stride[1]),
        (r.padding[0], r.padding[1]),
    )
}

fn read_bn(base: &Path, r: &BnRef) -> Result<BatchNormSpec> {
    BatchNormSpec::new(
        Tensor::load(base.join(&r.mean))?,
        Tensor::load(base.join(&r.var))?,
        Tensor::load(base.join(&r.gamma))?,
        Tensor::load(base.join(&r.beta))?,
        r.eps,
    )
}

fn read_branch(base: &Path, r: &BranchRef) -> Result<Branch> {
    Ok(Branch {
        conv: read_conv(base, &r.conv)?,
        bn: r.bn.as_ref().map(|b| read_bn(base, b)).transpose()?,
    })
}

impl GraphDesc {
    /// Writes the JSON description to `path` and the tensors into a sibling
    /// `<stem>_tensors/` directory. Tensor paths in the JSON are relative to
    /// the JSON file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::arg(format!("bad graph path {}", path.display())))?;
        let subdir = format!("{stem}_tensors");
        std::fs::create_dir_all(base.join(&subdir))?;
        let tw = TensorWriter { base, subdir };
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(BlockRef {
                    main: tw.branch(&format!("b{i}.main"), &b.main)?,
                    one_by_one: b
                        .one_by_one
                        .as_ref()
                        .map(|o| tw.branch(&format!("b{i}.one_by_one"), o))
                        .transpose()?,
                    identity_bn: b
                        .identity
                        .as_ref()
                        .map(|bn| tw.bn(&format!("b{i}.identity"), bn))
                        .transpose()?,
                    activation: b.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let file = GraphFile {
            input_channels: self.input_channels,
            blocks,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let file: GraphFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let blocks = file
            .blocks
            .iter()
            .map(|b| {
                BranchBlock::new(
                    read_branch(base, &b.main)?,
                    b.one_by_one.as_ref().map(|o| read_branch(base, o)).transpose()?,
                    b.identity_bn.as_ref().map(|bn| read_bn(base, bn)).transpose()?,
                    b.activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.input_channels, blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f32) -> Tensor {
        Tensor::vector(vec![x]).unwrap()
    }

    fn conv1x1(w: f32, b: f32) -> ConvSpec {
        ConvSpec::same(Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(), Some(v(b))).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sequential(conv: &ConvSpec, bn: &BatchNormSpec, x: &Tensor) -> Tensor {
        batchnorm_forward(&conv2d_forward(x, conv).unwrap(), bn).unwrap()
    }

    #[test]
    fn identity_bn_leaves_conv_unchanged() {
        let mut r = rng(1);
        let conv = init::conv(&mut r, 3, 4, 3, 1, 1.0).unwrap();
        let fused = fuse_conv_bn(&conv, &BatchNormSpec::identity(4).unwrap()).unwrap();
        assert_eq!(fused.weights, conv.weights);
        assert_eq!(fused.bias, conv.bias);
    }

    #[test]
    fn worked_fusion_example() {
        let bn = BatchNormSpec::new(v(1.0), v(4.0), v(1.0), v(0.0), 0.0).unwrap();
        let fused = fuse_conv_bn(&conv1x1(2.0, 1.0), &bn).unwrap();
        assert_eq!(fused.weights.data(), &[1.0]);
        assert_eq!(fused.bias.as_ref().unwrap().data(), &[0.0]);
        let x = Tensor::full(&[1, 1, 1], 3.0).unwrap();
        assert_eq!(conv2d_forward(&x, &fused).unwrap().data(), &[3.0]);
        assert_eq!(sequential(&conv1x1(2.0, 1.0), &bn, &x).data(), &[3.0]);
    }

    #[test]
    fn random_fusion_matches_sequential() {
        let mut r = rng(2);
        let conv = init::conv(&mut r, 4, 6, 3, 1, 0.5).unwrap();
        let bn = init::batchnorm(&mut r, 6).unwrap();
        let fused = fuse_conv_bn(&conv, &bn).unwrap();
        for _ in 0..50 {
            let x = init::uniform(&mut r, &[4, 7, 6], 2.0).unwrap();
            let d = conv2d_forward(&x, &fused).unwrap().max_abs_diff(&sequential(&conv, &bn, &x)).unwrap();
            assert!(d <= 1e-5, "{d}");
        }
        assert!(fuse_conv_bn(&conv, &BatchNormSpec::identity(5).unwrap()).is_err());
    }

    #[test]
    fn expansion_places_center_tap() {
        let e = expand_1x1_to_kxk(&conv1x1(7.0, 0.5), 3).unwrap();
        assert_eq!(e.weights.data(), &[0., 0., 0., 0., 7., 0., 0., 0., 0.]);
        assert_eq!(e.padding, (1, 1));
        assert_eq!(expand_1x1_to_kxk(&conv1x1(7.0, 0.5), 1).unwrap(), conv1x1(7.0, 0.5));
        assert!(expand_1x1_to_kxk(&conv1x1(1.0, 0.0), 2).is_err());

        let mut r = rng(3);
        let c = ConvSpec::new(init::uniform(&mut r, &[5, 3, 1, 1], 1.0).unwrap(), Some(init::uniform(&mut r, &[5], 1.0).unwrap()), (1, 1), (0, 0)).unwrap();
        let x = init::uniform(&mut r, &[3, 6, 9], 1.0).unwrap();
        let d = conv2d_forward(&x, &c).unwrap().max_abs_diff(&conv2d_forward(&x, &expand_1x1_to_kxk(&c, 5).unwrap()).unwrap()).unwrap();
        assert!(d <= 1e-6);
    }

    #[test]
    fn identity_conv_cases() {
        let c = identity_to_conv(2, 3).unwrap();
        let mut expected = [0f32; 36];
        expected[4] = 1.0;
        expected[27 + 4] = 1.0;
        assert_eq!(c.weights.data(), &expected[..]);
        assert!(identity_to_conv(2, 4).is_err());

        let mut r = rng(4);
        let x = init::uniform(&mut r, &[3, 5, 5], 3.0).unwrap();
        let y = conv2d_forward(&x, &identity_to_conv(3, 3).unwrap()).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-6);

        let bn = init::batchnorm(&mut r, 3).unwrap();
        let as_conv = fuse_conv_bn(&identity_to_conv(3, 3).unwrap(), &bn).unwrap();
        let d = conv2d_forward(&x, &as_conv).unwrap().max_abs_diff(&batchnorm_forward(&x, &bn).unwrap()).unwrap();
        assert!(d <= 1e-5);
    }

    #[test]
    fn parallel_1x1_branches_add() {
        // two parallel 1x1 paths: the main path is itself 1x1
        let block = BranchBlock::new(
            Branch::plain(conv1x1(2.0, 1.0)),
            Some(Branch::plain(ConvSpec::new(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap(), Some(v(-1.0)), (1, 1), (0, 0)).unwrap())),
            None,
            Activation::None,
        )
        .unwrap();
        let m = merge_branches(&block).unwrap();
        assert_eq!(m.weights.data(), &[5.0]);
        assert_eq!(m.bias.unwrap().data(), &[0.0]);
    }

    #[test]
    fn full_block_merge_matches_summed_paths() {
        let mut r = rng(5);
        let block = BranchBlock::new(
            Branch::with_bn(init::conv(&mut r, 6, 6, 3, 1, 0.3).unwrap(), init::batchnorm(&mut r, 6).unwrap()),
            Some(Branch::with_bn(
                ConvSpec::new(init::uniform(&mut r, &[6, 6, 1, 1], 0.3).unwrap(), None, (1, 1), (0, 0)).unwrap(),
                init::batchnorm(&mut r, 6).unwrap(),
            )),
            Some(init::batchnorm(&mut r, 6).unwrap()),
            Activation::Relu,
        )
        .unwrap();
        let merged = BranchBlock::plain(merge_branches(&block).unwrap(), Activation::Relu);
        for _ in 0..50 {
            let x = init::uniform(&mut r, &[6, 8, 8], 10.0).unwrap();
            let d = block.forward(&x).unwrap().max_abs_diff(&merged.forward(&x).unwrap()).unwrap();
            assert!(d <= 1e-4, "{d}");
        }
    }

    #[test]
    fn main_only_block_is_bn_fusion() {
        let mut r = rng(6);
        let conv = init::conv(&mut r, 2, 3, 3, 1, 0.5).unwrap();
        let bn = init::batchnorm(&mut r, 3).unwrap();
        let block = BranchBlock::new(Branch::with_bn(conv.clone(), bn.clone()), None, None, Activation::Relu).unwrap();
        assert_eq!(merge_branches(&block).unwrap(), fuse_conv_bn(&conv, &bn).unwrap());
    }

    #[test]
    fn strided_block_with_centered_1x1_merges_exactly() {
        let mut r = rng(7);
        let block = BranchBlock::new(
            Branch::plain(init::conv(&mut r, 3, 4, 3, 2, 0.5).unwrap()),
            Some(Branch::plain(ConvSpec::new(init::uniform(&mut r, &[4, 3, 1, 1], 0.5).unwrap(), None, (2, 2), (0, 0)).unwrap())),
            None,
            Activation::None,
        )
        .unwrap();
        let merged = merge_branches(&block).unwrap();
        let x = init::uniform(&mut r, &[3, 9, 8], 5.0).unwrap();
        let d = block.forward(&x).unwrap().max_abs_diff(&conv2d_forward(&x, &merged).unwrap()).unwrap();
        assert!(d <= 1e-5);
    }

    #[test]
    fn geometry_violations_are_errors() {
        let mut r = rng(8);
        let strided = init::conv(&mut r, 3, 3, 3, 2, 0.5).unwrap();
        assert!(matches!(
            BranchBlock::new(Branch::plain(strided.clone()), None, Some(BatchNormSpec::identity(3).unwrap()), Activation::None),
            Err(Error::InvalidGeometry(_))
        ));
        let padded_1x1 = ConvSpec::new(init::uniform(&mut r, &[3, 3, 1, 1], 0.5).unwrap(), None, (2, 2), (1, 1)).unwrap();
        assert!(BranchBlock::new(Branch::plain(strided.clone()), Some(Branch::plain(padded_1x1)), None, Activation::None).is_err());
        let wrong_stride = ConvSpec::new(init::uniform(&mut r, &[3, 3, 1, 1], 0.5).unwrap(), None, (1, 1), (0, 0)).unwrap();
        assert!(BranchBlock::new(Branch::plain(strided), Some(Branch::plain(wrong_stride)), None, Activation::None).is_err());
        let widen = init::conv(&mut r, 3, 4, 3, 1, 0.5).unwrap();
        assert!(matches!(
            BranchBlock::new(Branch::plain(widen), None, Some(BatchNormSpec::identity(4).unwrap()), Activation::None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn budget_values() {
        assert_eq!(merge_budget_n(&MergeBudget::new(0.01, 0.01, 2).unwrap()).unwrap(), 1);
        assert_eq!(merge_budget_n(&MergeBudget::new(0.04, 0.01, 2).unwrap()).unwrap(), 2);
        assert_eq!(merge_budget_n(&MergeBudget::new(0.015, 0.01, 4).unwrap()).unwrap(), 1);
        assert_eq!(merge_budget_n(&MergeBudget::new(0.001, 0.01, 4).unwrap()).unwrap(), 1);
        assert!(MergeBudget::new(0.0, 0.01, 2).is_err());
        assert!(MergeBudget::new(0.01, -1.0, 2).is_err());
        let raw = MergeBudget { error_post: 1.0, error_pre: 0.0, cap: 2 };
        assert!(merge_budget_n(&raw).is_err());
    }

    #[test]
    fn reparam_structure_and_budget() {
        let mut r = rng(9);
        let mk = |r: &mut ChaCha8Rng| {
            BranchBlock::new(
                Branch::with_bn(init::conv(r, 4, 4, 3, 1, 0.3).unwrap(), init::batchnorm(r, 4).unwrap()),
                Some(Branch::plain(ConvSpec::new(init::uniform(r, &[4, 4, 1, 1], 0.3).unwrap(), None, (1, 1), (0, 0)).unwrap())),
                Some(init::batchnorm(r, 4).unwrap()),
                Activation::Relu,
            )
            .unwrap()
        };
        let g = GraphDesc::new(4, vec![mk(&mut r), mk(&mut r), mk(&mut r)]).unwrap();
        let p = reparam_graph(&g, &MergeBudget::default()).unwrap();
        assert_eq!(p.blocks.len(), 3);
        assert!(p.is_plain());
        assert_eq!(p.bn_count(), 0);
        assert_eq!(p.parallel_branch_count(), 0);
        assert!(p.param_count() <= g.param_count());

        let tight = MergeBudget::new(0.01, 0.01, 2).unwrap();
        assert!(matches!(reparam_graph(&g, &tight), Err(Error::BudgetExceeded(_))));

        let empty = GraphDesc::new(3, vec![]).unwrap();
        assert_eq!(reparam_graph(&empty, &MergeBudget::default()).unwrap(), empty);
    }

    #[test]
    fn reparam_is_idempotent() {
        let mut r = rng(10);
        let g = random_graph(&mut r, &RandomGraphSpec::default()).unwrap();
        let once = reparam_graph(&g, &MergeBudget::default()).unwrap();
        let twice = reparam_graph(&once, &MergeBudget::default()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn verification_reports() {
        let mut r = rng(11);
        let g = random_graph(&mut r, &RandomGraphSpec { max_blocks: 4, max_channels: 8, max_downsamples: 1 }).unwrap();
        let cfg = VerifyConfig { trials: 10, seed: 3, ..VerifyConfig::default() };
        let same = verify_equivalence(&g, &g, &cfg).unwrap();
        assert_eq!(same.max_abs_error, 0.0);
        assert!(same.pass);

        let fused = reparam_graph(&g, &MergeBudget::default()).unwrap();
        let rep = verify_equivalence(&g, &fused, &cfg).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep, verify_equivalence(&g, &fused, &cfg).unwrap());

        // perturb one bias of the final block by 1.0 with no activation after it
        let mut broken = fused.clone();
        let last = broken.blocks.last_mut().unwrap();
        last.activation = Activation::None;
        let mut reference = fused.clone();
        reference.blocks.last_mut().unwrap().activation = Activation::None;
        let out = last.main.conv.out_channels();
        let bias = last.main.conv.bias.get_or_insert_with(|| Tensor::zeros(&[out]).unwrap());
        bias.data_mut()[0] += 1.0;
        let bad = verify_equivalence(&reference, &broken, &cfg).unwrap();
        assert!(!bad.pass);
        assert!(bad.max_abs_error >= 1.0 - 1e-5, "{bad:?}");

        let other = GraphDesc::new(g.input_channels + 1, vec![]).unwrap();
        assert!(verify_equivalence(&g, &other, &cfg).is_err());
    }

    #[test]
    fn graph_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(12);
        let g = random_graph(&mut r, &RandomGraphSpec { max_blocks: 3, max_channels: 6, max_downsamples: 1 }).unwrap();
        let path = dir.path().join("graph.json");
        g.save(&path).unwrap();
        assert_eq!(GraphDesc::load(&path).unwrap(), g);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"input_channels\""));
        assert!(text.contains("graph_tensors/b0.main.conv.weight.bevt"));
    }
}
