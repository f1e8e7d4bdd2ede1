//! Builders for AlexNet, VGG16, GoogLeNet and ResNet18.
//!
//! Each builder takes a [`ZooConfig`]. At native size the networks are the
//! canonical ones (AlexNet ungrouped, GoogLeNet without auxiliary heads);
//! `input_size` and `width_divisor` give compact variants for desk-scale runs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, LayerSpec, ModelGraph};
use crate::layers::LrnParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureId {
    Alexnet,
    Vgg16,
    Googlenet,
    Resnet18,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 4] = [
        ArchitectureId::Alexnet,
        ArchitectureId::Vgg16,
        ArchitectureId::Googlenet,
        ArchitectureId::Resnet18,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureId::Alexnet => "alexnet",
            ArchitectureId::Vgg16 => "vgg16",
            ArchitectureId::Googlenet => "googlenet",
            ArchitectureId::Resnet18 => "resnet18",
        }
    }

    /// Square input extent of the canonical network.
    pub fn native_input(self) -> usize {
        match self {
            ArchitectureId::Alexnet => 227,
            _ => 224,
        }
    }

    /// Last node of the feature extractor; everything after it is the
    /// classifier.
    pub fn backbone_end(self) -> &'static str {
        match self {
            ArchitectureId::Alexnet | ArchitectureId::Vgg16 => "pool5",
            ArchitectureId::Googlenet | ArchitectureId::Resnet18 => "gap",
        }
    }

    /// Id of the last convolution in execution order.
    pub fn last_conv(self) -> &'static str {
        match self {
            ArchitectureId::Alexnet => "conv5",
            ArchitectureId::Vgg16 => "conv5_3",
            ArchitectureId::Googlenet => "inc5b.pool_proj",
            ArchitectureId::Resnet18 => "s4.b2.conv2",
        }
    }

    /// Declared (conv, fc) counts of the builder.
    pub fn census_contract(self) -> (usize, usize) {
        match self {
            ArchitectureId::Alexnet => (5, 3),
            ArchitectureId::Vgg16 => (13, 3),
            ArchitectureId::Googlenet => (57, 1),
            ArchitectureId::Resnet18 => (20, 1),
        }
    }

    /// Commonly quoted layer counts that differ from the built network.
    pub fn census_note(self) -> Option<&'static str> {
        match self {
            ArchitectureId::Resnet18 => Some(
                "resnet18 is often described as 16 conv + 2 fc; the canonical network built here has \
                 20 conv (16 in blocks, 1 stem, 3 projection shortcuts) and 1 fc",
            ),
            _ => None,
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchitectureId::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown architecture `{s}` (expected alexnet, vgg16, googlenet or resnet18)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub class_count: usize,
    /// Square input extent; `None` means native.
    pub input_size: Option<usize>,
    /// Divides every hidden channel and unit count (minimum 1 each).
    pub width_divisor: usize,
    pub seed: u64,
}

impl ZooConfig {
    pub fn native(class_count: usize, seed: u64) -> Self {
        ZooConfig {
            class_count,
            input_size: None,
            width_divisor: 1,
            seed,
        }
    }

    fn width(&self, channels: usize) -> usize {
        (channels / self.width_divisor).max(1)
    }
}

pub fn build(arch: ArchitectureId, cfg: &ZooConfig) -> Result<ModelGraph> {
    if cfg.class_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "class count {} is below 2",
            cfg.class_count
        )));
    }
    if cfg.width_divisor == 0 {
        return Err(Error::InvalidConfig("width divisor must be positive".into()));
    }
    let size = cfg.input_size.unwrap_or(arch.native_input());
    let mut b = GraphBuilder::new([3, size, size], cfg.class_count);
    match arch {
        ArchitectureId::Alexnet => alexnet(&mut b, cfg, size),
        ArchitectureId::Vgg16 => vgg16(&mut b, cfg),
        ArchitectureId::Googlenet => googlenet(&mut b, cfg),
        ArchitectureId::Resnet18 => resnet18(&mut b, cfg),
    }
    b.build(cfg.seed)
}

pub fn build_alexnet(class_count: usize, seed: u64) -> Result<ModelGraph> {
    build(ArchitectureId::Alexnet, &ZooConfig::native(class_count, seed))
}

pub fn build_vgg16(class_count: usize, seed: u64) -> Result<ModelGraph> {
    build(ArchitectureId::Vgg16, &ZooConfig::native(class_count, seed))
}

pub fn build_googlenet(class_count: usize, seed: u64) -> Result<ModelGraph> {
    build(ArchitectureId::Googlenet, &ZooConfig::native(class_count, seed))
}

pub fn build_resnet18(class_count: usize, seed: u64) -> Result<ModelGraph> {
    build(ArchitectureId::Resnet18, &ZooConfig::native(class_count, seed))
}

fn classifier(b: &mut GraphBuilder, cfg: &ZooConfig, from: &str, rate: f64) {
    let hidden = cfg.width(4096);
    b.fc("fc6", from, hidden);
    b.relu("relu6", "fc6");
    b.add("drop6", LayerSpec::Dropout { rate }, &["relu6"]);
    b.fc("fc7", "drop6", hidden);
    b.relu("relu7", "fc7");
    b.add("drop7", LayerSpec::Dropout { rate }, &["relu7"]);
    b.fc("fc8", "drop7", cfg.class_count);
    b.add("output", LayerSpec::SoftmaxOutput, &["fc8"]);
}

fn alexnet(b: &mut GraphBuilder, cfg: &ZooConfig, size: usize) {
    // 227 is the stem's exact geometry; other sizes pad by 2 so 224 also
    // reaches 55×55
    let stem_pad = if size == 227 { 0 } else { 2 };
    let lrn = LayerSpec::Lrn(LrnParams::default());
    b.conv("conv1", "", cfg.width(96), 11, 4, stem_pad);
    b.relu("relu1", "conv1");
    b.add("lrn1", lrn.clone(), &["relu1"]);
    b.maxpool("pool1", "lrn1", 3, 2, 0);
    b.conv("conv2", "pool1", cfg.width(256), 5, 1, 2);
    b.relu("relu2", "conv2");
    b.add("lrn2", lrn, &["relu2"]);
    b.maxpool("pool2", "lrn2", 3, 2, 0);
    b.conv("conv3", "pool2", cfg.width(384), 3, 1, 1);
    b.relu("relu3", "conv3");
    b.conv("conv4", "relu3", cfg.width(384), 3, 1, 1);
    b.relu("relu4", "conv4");
    b.conv("conv5", "relu4", cfg.width(256), 3, 1, 1);
    b.relu("relu5", "conv5");
    b.maxpool("pool5", "relu5", 3, 2, 0);
    classifier(b, cfg, "pool5", 0.5);
}

fn vgg16(b: &mut GraphBuilder, cfg: &ZooConfig) {
    let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
    let mut last = String::new();
    for (bi, &(convs, channels)) in blocks.iter().enumerate() {
        for ci in 1..=convs {
            let conv = format!("conv{}_{ci}", bi + 1);
            b.conv(&conv, &last, cfg.width(channels), 3, 1, 1);
            last = b.relu(&format!("relu{}_{ci}", bi + 1), &conv);
        }
        last = b.maxpool(&format!("pool{}", bi + 1), &last, 2, 2, 0);
    }
    classifier(b, cfg, &last, 0.5);
}

/// Branch widths: 1×1, 3×3 reduce, 3×3, 5×5 reduce, 5×5, pool projection.
const INCEPTION: [(&str, [usize; 6]); 9] = [
    ("3a", [64, 96, 128, 16, 32, 32]),
    ("3b", [128, 128, 192, 32, 96, 64]),
    ("4a", [192, 96, 208, 16, 48, 64]),
    ("4b", [160, 112, 224, 24, 64, 64]),
    ("4c", [128, 128, 256, 24, 64, 64]),
    ("4d", [112, 144, 288, 32, 64, 64]),
    ("4e", [256, 160, 320, 32, 128, 128]),
    ("5a", [256, 160, 320, 32, 128, 128]),
    ("5b", [384, 192, 384, 48, 128, 128]),
];

fn conv_relu(b: &mut GraphBuilder, id: &str, from: &str, out: usize, k: usize, s: usize, p: usize) -> String {
    b.conv(id, from, out, k, s, p);
    b.relu(&format!("{id}.relu"), id)
}

fn inception(b: &mut GraphBuilder, cfg: &ZooConfig, name: &str, from: &str, w: [usize; 6]) -> String {
    let id = |part: &str| format!("inc{name}.{part}");
    let w = w.map(|c| cfg.width(c));
    let b1 = conv_relu(b, &id("1x1"), from, w[0], 1, 1, 0);
    let r3 = conv_relu(b, &id("3x3_reduce"), from, w[1], 1, 1, 0);
    let b3 = conv_relu(b, &id("3x3"), &r3, w[2], 3, 1, 1);
    let r5 = conv_relu(b, &id("5x5_reduce"), from, w[3], 1, 1, 0);
    let b5 = conv_relu(b, &id("5x5"), &r5, w[4], 5, 1, 2);
    let pool = b.maxpool(&id("pool"), from, 3, 1, 1);
    let bp = conv_relu(b, &id("pool_proj"), &pool, w[5], 1, 1, 0);
    b.add(format!("inc{name}"), LayerSpec::Concat, &[&b1, &b3, &b5, &bp])
}

fn googlenet(b: &mut GraphBuilder, cfg: &ZooConfig) {
    let lrn = LayerSpec::Lrn(LrnParams::default());
    let x = conv_relu(b, "conv1", "", cfg.width(64), 7, 2, 3);
    b.maxpool("pool1", &x, 3, 2, 1);
    b.add("lrn1", lrn.clone(), &["pool1"]);
    let x = conv_relu(b, "conv2_reduce", "lrn1", cfg.width(64), 1, 1, 0);
    let x = conv_relu(b, "conv2", &x, cfg.width(192), 3, 1, 1);
    b.add("lrn2", lrn, &[&x]);
    let mut last = b.maxpool("pool2", "lrn2", 3, 2, 1);
    for (name, widths) in INCEPTION {
        last = inception(b, cfg, name, &last, widths);
        if name == "3b" {
            last = b.maxpool("pool3", &last, 3, 2, 1);
        } else if name == "4e" {
            last = b.maxpool("pool4", &last, 3, 2, 1);
        }
    }
    b.add("gap", LayerSpec::GlobalAvgPool, &[&last]);
    b.add("dropout", LayerSpec::Dropout { rate: 0.4 }, &["gap"]);
    b.fc("fc", "dropout", cfg.class_count);
    b.add("output", LayerSpec::SoftmaxOutput, &["fc"]);
}

fn conv_bn(b: &mut GraphBuilder, id: &str, from: &str, out: usize, k: usize, s: usize, p: usize) -> String {
    b.conv(id, from, out, k, s, p);
    b.add(format!("{id}.bn"), LayerSpec::BatchNorm, &[id])
}

fn basic_block(b: &mut GraphBuilder, prefix: &str, from: &str, out: usize, stride: usize, project: bool) -> String {
    let x = conv_bn(b, &format!("{prefix}.conv1"), from, out, 3, stride, 1);
    let x = b.relu(&format!("{prefix}.relu1"), &x);
    let x = conv_bn(b, &format!("{prefix}.conv2"), &x, out, 3, 1, 1);
    let shortcut = if project {
        conv_bn(b, &format!("{prefix}.proj"), from, out, 1, stride, 0)
    } else {
        String::from(from)
    };
    let sum = b.add(format!("{prefix}.add"), LayerSpec::ResidualAdd, &[&x, &shortcut]);
    b.relu(&format!("{prefix}.relu2"), &sum)
}

fn resnet18(b: &mut GraphBuilder, cfg: &ZooConfig) {
    let x = conv_bn(b, "stem.conv", "", cfg.width(64), 7, 2, 3);
    let x = b.relu("stem.relu", &x);
    let mut last = b.maxpool("stem.pool", &x, 3, 2, 1);
    for (si, channels) in [64usize, 128, 256, 512].into_iter().enumerate() {
        let stage = si + 1;
        let stride = if stage == 1 { 1 } else { 2 };
        last = basic_block(
            b,
            &format!("s{stage}.b1"),
            &last,
            cfg.width(channels),
            stride,
            stage > 1,
        );
        last = basic_block(b, &format!("s{stage}.b2"), &last, cfg.width(channels), 1, false);
    }
    b.add("gap", LayerSpec::GlobalAvgPool, &[&last]);
    b.fc("fc", "gap", cfg.class_count);
    b.add("output", LayerSpec::SoftmaxOutput, &["fc"]);
}

/// Kernel sizes used by the convolutions of an inception module.
pub fn inception_kernels(g: &ModelGraph, module: &str) -> Vec<usize> {
    let prefix = format!("{module}.");
    g.nodes()
        .iter()
        .filter(|n| n.id.starts_with(&prefix))
        .filter_map(|n| match n.spec {
            LayerSpec::Conv { kernel, .. } => Some(kernel),
            _ => None,
        })
        .collect()
}

/// Ids of the inception concat nodes, in build order.
pub fn inception_modules(g: &ModelGraph) -> Vec<String> {
    g.nodes()
        .iter()
        .filter(|n| n.spec == LayerSpec::Concat && n.id.starts_with("inc"))
        .map(|n| n.id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;
    use crate::layers::Mode;
    use crate::tensor::Tensor;

    fn compact(arch: ArchitectureId, seed: u64) -> ModelGraph {
        let cfg = ZooConfig {
            class_count: 2,
            input_size: Some(64),
            width_divisor: 8,
            seed,
        };
        build(arch, &cfg).unwrap()
    }

    #[test]
    fn names_roundtrip() {
        for a in ArchitectureId::ALL {
            assert_eq!(a.name().parse::<ArchitectureId>().unwrap(), a);
        }
        assert_eq!("VGG16".parse::<ArchitectureId>().unwrap(), ArchitectureId::Vgg16);
        assert!("resnet50".parse::<ArchitectureId>().is_err());
    }

    #[test]
    fn alexnet_census_and_parameter_count() {
        let g = build_alexnet(1000, 0).unwrap();
        let c = g.census();
        assert_eq!((c.conv(), c.fc()), (5, 3));
        assert_eq!(g.shape_of("conv1"), Some(&[96, 55, 55][..]));
        assert_eq!(g.shape_of("pool5"), Some(&[256, 6, 6][..]));
        // per-layer hand count, ungrouped
        let layers = [
            96 * (3 * 11 * 11 + 1),
            256 * (96 * 5 * 5 + 1),
            384 * (256 * 3 * 3 + 1),
            384 * (384 * 3 * 3 + 1),
            256 * (384 * 3 * 3 + 1),
            4096 * (256 * 6 * 6 + 1),
            4096 * (4096 + 1),
            1000 * (4096 + 1),
        ];
        assert_eq!(layers.iter().sum::<usize>(), 62_378_344);
        assert_eq!(c.total_params, 62_378_344);
        assert!(build_alexnet(1, 0).is_err());
    }

    #[test]
    fn vgg16_census_and_halving() {
        let g = build_vgg16(1000, 0).unwrap();
        let c = g.census();
        assert_eq!((c.conv(), c.fc()), (13, 3));
        let sides: Vec<usize> = (1..=5).map(|i| g.shape_of(&format!("pool{i}")).unwrap()[1]).collect();
        assert_eq!(sides, [112, 56, 28, 14, 7]);
        assert_eq!(g.shape_of("output"), Some(&[1000][..]));
        assert_eq!(c.total_params, 138_357_544);
    }

    #[test]
    fn googlenet_inception_contract() {
        let g = build_googlenet(1000, 0).unwrap();
        let c = g.census();
        assert_eq!((c.conv(), c.fc()), ArchitectureId::Googlenet.census_contract());
        let modules = inception_modules(&g);
        assert_eq!(modules.len(), 9);
        for m in &modules {
            let node = g.node(m).unwrap();
            let branch_sum: usize = node.inputs.iter().map(|i| g.shape_of(i).unwrap()[0]).sum();
            assert_eq!(g.shape_of(m).unwrap()[0], branch_sum);
            let kernels = inception_kernels(&g, m);
            for k in [1, 3, 5] {
                assert!(kernels.contains(&k), "{m} lacks {k}x{k}");
            }
        }
        assert_eq!(g.shape_of("inc3a").unwrap(), &[256, 28, 28]);
        assert_eq!(g.shape_of("inc4e").unwrap(), &[832, 14, 14]);
        assert_eq!(g.shape_of("inc5b").unwrap(), &[1024, 7, 7]);
        assert_eq!(c.total_params, 6_998_552);
    }

    #[test]
    fn resnet18_census() {
        let g = build_resnet18(1000, 0).unwrap();
        let c = g.census();
        assert_eq!((c.conv(), c.fc()), (20, 1));
        assert_eq!(c.count(LayerKind::BatchNorm), 20);
        assert_eq!(g.shape_of("s4.b2.relu2"), Some(&[512, 7, 7][..]));
        // canonical 11,689,512 plus one bias per conv output channel
        assert_eq!(c.total_params, 11_689_512 + 4_800);
        assert!(ArchitectureId::Resnet18.census_note().is_some());
    }

    #[test]
    fn zero_residual_branch_passes_shortcut_through() {
        let mut g = compact(ArchitectureId::Resnet18, 3);
        let p = g.params_mut("s1.b1.conv2").unwrap();
        p.weights = Tensor::zeros(p.weights.shape());
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let x = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0);
        let mut shortcut = None;
        let mut out = None;
        g.observe_eval(&x, &mut |id, t| match id {
            "stem.pool" => shortcut = Some(t.clone()),
            "s1.b1.relu2" => out = Some(t.clone()),
            _ => {}
        })
        .unwrap();
        let shortcut = shortcut.unwrap();
        assert_eq!(out.unwrap(), crate::layers::relu(&shortcut));
    }

    #[test]
    fn same_seed_same_parameters() {
        for a in ArchitectureId::ALL {
            assert_eq!(compact(a, 4), compact(a, 4));
            assert_ne!(compact(a, 4), compact(a, 5));
        }
    }

    #[test]
    fn compact_variants_run_and_match_inferred_shapes() {
        for a in ArchitectureId::ALL {
            let g = compact(a, 1);
            let x = Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 13) as f64 / 13.0);
            assert_eq!(g.traced_shapes(&x).unwrap(), g.infer_shapes().unwrap(), "{a}");
            assert_eq!(g.forward_eval(&x).unwrap().shape(), &[2, 2]);
        }
    }

    #[test]
    fn surgery_composes_with_every_builder() {
        for a in ArchitectureId::ALL {
            let mut g = compact(a, 2);
            g.replace_head(3, 9).unwrap();
            g.freeze_through(a.backbone_end()).unwrap();
            g.infer_shapes().unwrap();
            let trainable = g.trainable_ids();
            assert!(!trainable.is_empty());
            assert!(trainable.iter().all(|id| id.starts_with("fc")), "{a}: {trainable:?}");
            let x = Tensor::zeros(&[2, 3, 64, 64]);
            let (y, cache) = g.forward(&x, Mode::Train, 0).unwrap();
            let grads = g
                .backward(cache.as_ref().unwrap(), &Tensor::full(y.shape(), 0.1), false)
                .unwrap();
            assert_eq!(grads.params.keys().cloned().collect::<Vec<_>>(), trainable);
        }
    }

    #[test]
    fn alexnet_freeze_at_last_conv_leaves_fc_trainable() {
        let mut g = compact(ArchitectureId::Alexnet, 0);
        g.freeze_through(ArchitectureId::Alexnet.last_conv()).unwrap();
        assert_eq!(g.trainable_ids(), ["fc6", "fc7", "fc8"]);
        g.freeze_through("output").unwrap();
        assert!(g.trainable_ids().is_empty());
        assert_eq!(g.census().trainable_params, 0);
    }

    #[test]
    fn replace_head_keeps_fc_count() {
        let mut g = compact(ArchitectureId::Vgg16, 0);
        let before = g.clone();
        g.replace_head(2, 1).unwrap();
        assert_eq!(g.census().fc(), 3);
        for n in before.nodes().iter().filter(|n| n.id != "fc8") {
            assert_eq!(g.node(&n.id).unwrap(), n);
        }
        let once = g.clone();
        g.replace_head(2, 1).unwrap();
        assert_eq!(g, once);
    }
}
