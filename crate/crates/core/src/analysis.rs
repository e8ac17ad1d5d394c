//! FLOPs accounting, latency benchmarking and camera-view masking.
//!
//! One multiply-accumulate counts as 2 FLOPs. A conv layer costs
//! `2 * kh * kw * c_in * c_out * h' * w'`, plus `h' * w' * c_out` when it has
//! a bias. Inference batch norm costs `4 * c * h * w`; element-wise ops
//! (add, relu) cost one FLOP per output element.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::reparam::{BranchBlock, GraphDesc};
use crate::tensor::Tensor;

pub fn conv_flops(conv: &ConvSpec, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    let (oh, ow) = conv.output_size(h, w)?;
    let (kh, kw) = conv.kernel();
    let out = (oh * ow * conv.out_channels()) as u64;
    let mut flops = 2 * (kh * kw * conv.in_channels()) as u64 * out;
    if conv.bias.is_some() {
        flops += out;
    }
    Ok((flops, oh, ow))
}

pub fn batchnorm_flops(c: usize, h: usize, w: usize) -> u64 {
    4 * (c * h * w) as u64
}

pub fn elementwise_flops(elements: usize) -> u64 {
    elements as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
    pub total: u64,
}

#[derive(Serialize)]
struct FlopsRow<'a> {
    name: &'a str,
    flops: u64,
    percent: f64,
}

#[derive(Serialize)]
struct FlopsJson<'a> {
    modules: Vec<FlopsRow<'a>>,
    total: u64,
}

impl FlopsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, flops: u64) {
        self.entries.push(FlopsEntry {
            name: name.into(),
            flops,
        });
        self.total += flops;
    }

    /// Appends every entry of `other`, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &FlopsReport) {
        for e in &other.entries {
            self.push(format!("{prefix}{}", e.name), e.flops);
        }
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.flops)
    }

    /// Share of the total per entry, in percent. All zeros for an empty
    /// report.
    pub fn percentages(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| {
                if self.total == 0 {
                    0.0
                } else {
                    100.0 * e.flops as f64 / self.total as f64
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let modules = self
            .entries
            .iter()
            .zip(self.percentages())
            .map(|(e, percent)| FlopsRow {
                name: &e.name,
                flops: e.flops,
                percent,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&FlopsJson {
            modules,
            total: self.total,
        })?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,flops,percent\n");
        for (e, p) in self.entries.iter().zip(self.percentages()) {
            let _ = writeln!(s, "{},{},{p:.4}", e.name, e.flops);
        }
        let _ = writeln!(s, "total,{},100.0000", self.total);
        s
    }
}

/// FLOPs of one block on a `c x h x w` input; returns the output extent.
pub fn block_flops(b: &BranchBlock, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    b.check()?;
    let (mut flops, oh, ow) = conv_flops(&b.main.conv, h, w)?;
    let c = b.out_channels();
    if b.main.bn.is_some() {
        flops += batchnorm_flops(c, oh, ow);
    }
    if let Some(br) = &b.one_by_one {
        flops += conv_flops(&br.conv, h, w)?.0;
        if br.bn.is_some() {
            flops += batchnorm_flops(c, oh, ow);
        }
    }
    if b.identity.is_some() {
        flops += batchnorm_flops(c, oh, ow);
    }
    let out = c * oh * ow;
    flops += (b.branch_count() as u64 - 1) * elementwise_flops(out);
    if b.activation == crate::reparam::Activation::Relu {
        flops += elementwise_flops(out);
    }
    Ok((flops, oh, ow))
}

/// Per-block report for a graph run on `[c, h, w]` inputs.
pub fn count_flops(g: &GraphDesc, input_shape: [usize; 3]) -> Result<FlopsReport> {
    let [c, mut h, mut w] = input_shape;
    if c != g.input_channels {
        return Err(Error::dim(format!(
            "graph expects {} input channels, shape gives {c}",
            g.input_channels
        )));
    }
    g.check()?;
    let mut report = FlopsReport::new();
    for (i, b) in g.blocks.iter().enumerate() {
        let (f, oh, ow) = block_flops(b, h, w)?;
        report.push(format!("block{i}"), f);
        (h, w) = (oh, ow);
    }
    Ok(report)
}

/// Parses `CxHxW`.
pub fn parse_shape(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::arg(format!("bad shape `{text}`: {e}")))?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::arg(format!("shape `{text}` must be CxHxW with positive extents"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub frames: usize,
    pub wall_seconds: f64,
    pub fps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub threads: usize,
}

/// Nearest-rank percentile of sorted samples.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `frames` calls of `run` after `warmup` untimed calls. Only the
/// closure body is timed. `threads` reports the size of the rayon pool the
/// caller runs in.
pub fn benchmark_pipeline<F>(mut run: F, frames: usize, warmup: usize) -> Result<BenchResult>
where
    F: FnMut() -> Result<()>,
{
    if frames == 0 {
        return Err(Error::arg("benchmark needs at least one frame"));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(frames);
    for _ in 0..frames {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    let wall_seconds: f64 = samples.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut ms: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    Ok(BenchResult {
        frames,
        wall_seconds,
        fps: frames as f64 / wall_seconds,
        p50_ms: nearest_rank(&ms, 50.0),
        p95_ms: nearest_rank(&ms, 95.0),
        threads: rayon::current_num_threads(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFeatures {
    pub name: String,
    pub features: Tensor,
    pub depth_logits: Tensor,
}

/// Zeroes features and depth logits of the named cameras.
pub fn mask_views(inputs: &[CameraFeatures], mask: &BTreeSet<String>, rig: &CameraRig) -> Result<Vec<CameraFeatures>> {
    if let Some(unknown) = mask.iter().find(|m| rig.index_of(m).is_none()) {
        return Err(Error::UnknownCamera(unknown.clone()));
    }
    Ok(inputs
        .iter()
        .map(|cf| {
            if mask.contains(&cf.name) {
                CameraFeatures {
                    name: cf.name.clone(),
                    features: cf.features.map(|_| 0.0),
                    depth_logits: cf.depth_logits.map(|_| 0.0),
                }
            } else {
                cf.clone()
            }
        })
        .collect())
}

/// Parses a comma-separated camera list.
pub fn parse_mask(text: &str) -> BTreeSet<String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::reparam::{random_graph, reparam_graph, Activation, MergeBudget, RandomGraphSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_formula_example() {
        let conv = ConvSpec::same(Tensor::zeros(&[16, 16, 3, 3]).unwrap(), None).unwrap();
        assert_eq!(conv_flops(&conv, 32, 32).unwrap(), (4_718_592, 32, 32));
        let with_bias = ConvSpec::same(Tensor::zeros(&[16, 16, 3, 3]).unwrap(), Some(Tensor::zeros(&[16]).unwrap())).unwrap();
        assert_eq!(conv_flops(&with_bias, 32, 32).unwrap().0, 4_718_592 + 16 * 1024);
    }

    #[test]
    fn empty_graph_is_zero() {
        let g = GraphDesc::new(3, vec![]).unwrap();
        let r = count_flops(&g, [3, 8, 8]).unwrap();
        assert_eq!(r.total, 0);
        assert!(r.entries.is_empty());
        assert!(count_flops(&g, [4, 8, 8]).is_err());
    }

    #[test]
    fn plain_block_breakdown() {
        let conv = ConvSpec::new(Tensor::zeros(&[4, 2, 3, 3]).unwrap(), None, (2, 2), (1, 1)).unwrap();
        let g = GraphDesc::new(2, vec![BranchBlock::plain(conv, Activation::Relu)]).unwrap();
        let r = count_flops(&g, [2, 8, 8]).unwrap();
        assert_eq!(r.total, 2 * 9 * 2 * 4 * 16 + 4 * 16);
    }

    #[test]
    fn reparam_never_increases_flops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = random_graph(&mut rng, &RandomGraphSpec::default()).unwrap();
            let p = reparam_graph(&g, &MergeBudget::default()).unwrap();
            let shape = [g.input_channels, 16, 16];
            assert!(count_flops(&p, shape).unwrap().total <= count_flops(&g, shape).unwrap().total);
        }
    }

    #[test]
    fn additive_over_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_graph(&mut rng, &RandomGraphSpec { max_blocks: 3, max_channels: 8, max_downsamples: 1 }).unwrap();
        let mid = count_flops(&a, [a.input_channels, 16, 16]).unwrap();
        let tail = GraphDesc::new(
            a.output_channels(),
            vec![BranchBlock::plain(init::conv(&mut rng, a.output_channels(), 5, 3, 1, 0.1).unwrap(), Activation::Relu)],
        )
        .unwrap();
        let x = init::uniform(&mut rng, &[a.input_channels, 16, 16], 1.0).unwrap();
        let (_, h, w) = a.forward(&x).unwrap().dims3().unwrap();
        let mut both = a.clone();
        both.blocks.extend(tail.blocks.iter().cloned());
        let total = count_flops(&both, [a.input_channels, 16, 16]).unwrap().total;
        assert_eq!(total, mid.total + count_flops(&tail, [a.output_channels(), h, w]).unwrap().total);
    }

    #[test]
    fn report_formats() {
        let mut r = FlopsReport::new();
        r.push("backbone", 300);
        r.push("head", 100);
        assert_eq!(r.total, 400);
        assert_eq!(r.percentages(), vec![75.0, 25.0]);
        let csv = r.to_csv();
        assert!(csv.starts_with("module,flops,percent\nbackbone,300,75.0000\n"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["total"], 400);
        assert_eq!(json["modules"][1]["name"], "head");
    }

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("16x32x32").unwrap(), [16, 32, 32]);
        assert!(parse_shape("16x32").is_err());
        assert!(parse_shape("0x2x2").is_err());
        assert!(parse_shape("ax2x2").is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(nearest_rank(&s, 50.0), 5.0);
        assert_eq!(nearest_rank(&s, 95.0), 10.0);
        assert_eq!(nearest_rank(&[4.0], 50.0), 4.0);
    }

    #[test]
    fn benchmark_counts_and_warmup() {
        let mut calls = 0;
        let r = benchmark_pipeline(
            || {
                calls += 1;
                std::thread::sleep(std::time::Duration::from_millis(1));
                Ok(())
            },
            5,
            3,
        )
        .unwrap();
        assert_eq!(calls, 8);
        assert_eq!(r.frames, 5);
        assert!(r.wall_seconds > 0.0);
        assert!((r.fps - 5.0 / r.wall_seconds).abs() < 1e-9);
        assert!(r.p50_ms <= r.p95_ms);
        assert!(benchmark_pipeline(|| Ok(()), 0, 0).is_err());
    }

    fn views(rig: &CameraRig) -> Vec<CameraFeatures> {
        rig.cameras()
            .iter()
            .map(|c| CameraFeatures {
                name: c.name.clone(),
                features: Tensor::full(&[2, 3, 3], 1.5).unwrap(),
                depth_logits: Tensor::full(&[4, 3, 3], 0.5).unwrap(),
            })
            .collect()
    }

    #[test]
    fn masking_cases() {
        let rig = CameraRig::reference(176, 64);
        let v = views(&rig);
        assert_eq!(mask_views(&v, &BTreeSet::new(), &rig).unwrap(), v);
        let all: BTreeSet<String> = rig.cameras().iter().map(|c| c.name.clone()).collect();
        let masked = mask_views(&v, &all, &rig).unwrap();
        assert!(masked.iter().all(|c| c.features.data().iter().all(|&x| x == 0.0)));
        let front = mask_views(&v, &parse_mask("front"), &rig).unwrap();
        assert!(front[0].features.data().iter().all(|&x| x == 0.0));
        assert_eq!(front[1..], v[1..]);
        assert!(matches!(mask_views(&v, &parse_mask("front,roof"), &rig), Err(Error::UnknownCamera(n)) if n == "roof"));
    }
}
