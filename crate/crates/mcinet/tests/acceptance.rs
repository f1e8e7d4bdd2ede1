//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use mcinet::{formats, imageio, manifest, synth};
use mcinet_core::data::{self, Label, Plane, SubjectRecord, SynthParams};
use mcinet_core::gradcheck::{self, GRAD_TOLERANCE};
use mcinet_core::graph::{GraphBuilder, LayerKind, LayerSpec, ModelGraph};
use mcinet_core::layers::{conv::conv2d, LayerParams};
use mcinet_core::train::{self, CompareOptions, PreparedData, Sample, TrainConfig};
use mcinet_core::zoo::{self, ArchitectureId, ZooConfig};
use mcinet_core::{Error as CoreError, Shape2D, Tensor};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn FnOnce() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    if elapsed <= Duration::from_secs(limit_secs) {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()))
    }
}

struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next() % (hi - lo + 1) as u64) as usize
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn cli(args: &[&str]) -> i32 {
    mcinet::cli::run(std::iter::once("mcinet").chain(args.iter().copied()))
}

fn small_compare(data_dir: &Path, out: &Path) -> Result<(), String> {
    let manifest = data_dir.join("manifest.csv");
    let code = cli(&[
        "compare",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--input-size",
        "64",
        "--width-divisor",
        "8",
        "--epochs",
        "15",
        "--seed",
        "11",
        "--no-timing",
    ]);
    if code == 0 {
        Ok(())
    } else {
        Err(format!("compare exited with {code}"))
    }
}

fn comparison_report(data_dir: &Path, out: &Path) -> Outcome {
    let code = cli(&[
        "synth",
        "--out",
        data_dir.to_str().unwrap(),
        "--per-class",
        "20",
        "--seed",
        "5",
    ]);
    if code != 0 {
        return Err(format!("synth exited with {code}"));
    }
    small_compare(data_dir, out)?;
    let csv = std::fs::read_to_string(out.join("comparison.csv")).map_err(|e| e.to_string())?;
    let svg = std::fs::read_to_string(out.join("figure.svg")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header_ok = lines.next() == Some("architecture,subject_accuracy,slice_accuracy,params,train_seconds");
    let rows: Vec<(String, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap_or(f64::NAN))
        })
        .collect();
    let mut names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    names.sort();
    let sorted = rows.windows(2).all(|w| w[0].1 >= w[1].1);
    let bars = svg.matches("<rect class=\"bar\"").count();
    let worst = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let detail = format!("rows {rows:?}, {bars} bars, worst subject accuracy {worst:.4}");
    check(
        header_ok && names == ["alexnet", "googlenet", "resnet18", "vgg16"] && sorted && bars == 4 && worst >= 0.5,
        detail,
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = gradcheck::gradient_suite(20, 2024).map_err(|e| e.to_string())?;
    let toy = mcinet_core::graph::toy_graph_check(2024).map_err(|e| e.to_string())?;
    within(start.elapsed(), 120)?;
    let worst = rows.iter().map(|r| r.max_error).fold(toy, f64::max);
    let failing: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed() || r.instances < 20)
        .map(|r| r.layer.name())
        .collect();
    check(
        failing.is_empty() && toy < GRAD_TOLERANCE && rows.len() >= 11,
        format!(
            "{} layer types x 20 instances, toy graph {toy:.2e}, worst {worst:.2e}, failing {failing:?}",
            rows.len()
        ),
    )
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let k = w.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let (cout, kh, kw) = (k[0], k[2], k[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * ho * wo);
    for i in 0..n {
        for (o, &bias) in b.iter().enumerate() {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias;
                    for c in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(i, c, iy as usize, ix as usize) * w.at4(o, c, dy, dx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, cout, ho, wo], out)
}

fn conv_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = SplitMix(31);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (n, cin, cout) = (r.range(1, 2), r.range(1, 4), r.range(1, 4));
        let (h, w) = (r.range(1, 12), r.range(1, 12));
        let pad = r.range(0, 2);
        let kh = r.range(1, (h + 2 * pad).min(5));
        let kw = r.range(1, (w + 2 * pad).min(5));
        let stride = r.range(1, 3);
        let x = Tensor::from_fn(&[n, cin, h, w], |_| r.unit());
        let wt = Tensor::from_fn(&[cout, cin, kh, kw], |_| r.unit());
        let b: Vec<f64> = (0..cout).map(|_| r.unit()).collect();
        let fast = conv2d(&x, &LayerParams::new(wt.clone(), b.clone()), stride, pad).map_err(|e| e.to_string())?;
        let (shape, slow) = naive_conv(&x, &wt, &b, stride, pad);
        if fast.shape() != shape.as_slice() {
            return Err(format!("shape {:?} vs oracle {shape:?}", fast.shape()));
        }
        for (a, e) in fast.data().iter().zip(&slow) {
            worst = worst.max((a - e).abs());
        }
    }
    within(start.elapsed(), 60)?;
    check(worst <= 1e-10, format!("100 geometries, max abs diff {worst:.2e}"))
}

fn census() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for arch in ArchitectureId::ALL {
        let g = zoo::build(arch, &ZooConfig::native(1000, 1)).map_err(|e| e.to_string())?;
        let c = g.census();
        let (conv, fc) = (c.count(LayerKind::Conv), c.count(LayerKind::Fc));
        let expected = match arch {
            ArchitectureId::Alexnet => (5, 3),
            ArchitectureId::Vgg16 => (13, 3),
            ArchitectureId::Googlenet => (57, 1),
            // stem + 16 block convs + 3 projection shortcuts
            ArchitectureId::Resnet18 => (20, 1),
        };
        ok &= (conv, fc) == expected;
        match arch {
            ArchitectureId::Alexnet => ok &= c.total_params == alexnet_params(),
            ArchitectureId::Vgg16 => ok &= c.total_params == vgg16_params(),
            ArchitectureId::Googlenet => {
                let modules = zoo::inception_modules(&g);
                ok &= modules.len() == 9;
                for m in &modules {
                    let mut k = zoo::inception_kernels(&g, m);
                    k.sort();
                    k.dedup();
                    ok &= k == [1, 3, 5];
                }
            }
            ArchitectureId::Resnet18 => {
                // torchvision's bias-free count plus one bias per conv output channel
                let conv_biases: usize =
                    64 + [64, 128, 256, 512].iter().map(|w| 4 * w).sum::<usize>() + 128 + 256 + 512;
                ok &= c.total_params == 11_689_512 + conv_biases;
                ok &= arch.census_note().is_some_and(|n| n.contains("20 conv"));
            }
        }
        lines.push(format!("{arch} conv={conv} fc={fc} params={}", c.total_params));
    }
    check(ok, lines.join("; "))
}

fn conv_params(layers: &[(usize, usize, usize)]) -> usize {
    layers.iter().map(|&(cin, cout, k)| (cin * k * k + 1) * cout).sum()
}

fn fc_params(layers: &[(usize, usize)]) -> usize {
    layers.iter().map(|&(i, o)| (i + 1) * o).sum()
}

fn alexnet_params() -> usize {
    conv_params(&[(3, 96, 11), (96, 256, 5), (256, 384, 3), (384, 384, 3), (384, 256, 3)])
        + fc_params(&[(256 * 6 * 6, 4096), (4096, 4096), (4096, 1000)])
}

fn vgg16_params() -> usize {
    let widths = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
    let mut cin = 3;
    let mut convs = Vec::new();
    for w in widths {
        convs.push((cin, w, 3));
        cin = w;
    }
    conv_params(&convs) + fc_params(&[(512 * 7 * 7, 4096), (4096, 4096), (4096, 1000)])
}

fn shapes() -> Outcome {
    let mut r = SplitMix(77);
    let mut lines = Vec::new();
    let mut ok = true;
    for arch in ArchitectureId::ALL {
        let g = zoo::build(arch, &ZooConfig::native(1000, 2)).map_err(|e| e.to_string())?;
        let s = arch.native_input();
        let batch = Tensor::from_fn(&[2, 3, s, s], |_| r.unit());
        let traced = g.traced_shapes(&batch).map_err(|e| e.to_string())?;
        let inferred = g.infer_shapes().map_err(|e| e.to_string())?;
        let same = traced == inferred && traced.len() == g.nodes().len();
        ok &= same;
        lines.push(format!(
            "{arch} {} nodes {}",
            traced.len(),
            if same { "match" } else { "differ" }
        ));
    }
    check(ok, lines.join("; "))
}

fn synth_samples(n_per_class: usize, size: usize, seed: u64) -> Vec<Sample> {
    let p = SynthParams {
        size,
        ..SynthParams::default()
    };
    data::synth_manifest(n_per_class)
        .records()
        .iter()
        .map(|r| {
            let bytes = data::synth_slice(&r.subject_id, r.label, r.plane, seed, &p);
            let img = data::gray_to_tensor(&bytes, size, size).unwrap();
            let x = data::prepare_image(&img, Shape2D::square(size).unwrap())
                .unwrap()
                .map(|v| v - 0.5);
            Sample {
                subject_id: r.subject_id.clone(),
                label: r.label,
                plane: r.plane,
                input: x.reshape(&[1, 3, size, size]).unwrap(),
            }
        })
        .collect()
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let samples: Vec<Sample> = synth_samples(8, 16, 9)
        .into_iter()
        .filter(|s| s.plane == Plane::Axial)
        .collect();
    let normal = samples.iter().filter(|s| s.label == Label::Normal).count();
    let mut b = GraphBuilder::new([3, 16, 16], 2);
    b.conv("conv1", "", 8, 3, 1, 1);
    b.relu("relu1", "conv1");
    b.maxpool("pool1", "relu1", 2, 2, 0);
    b.conv("conv2", "pool1", 8, 3, 1, 1);
    b.relu("relu2", "conv2");
    b.maxpool("pool2", "relu2", 2, 2, 0);
    b.fc("fc1", "pool2", 16);
    b.relu("relu3", "fc1");
    b.fc("fc2", "relu3", 2);
    b.add("output", LayerSpec::SoftmaxOutput, &["fc2"]);
    let mut g = b.build(3).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 200,
        freeze_boundary: None,
        ..TrainConfig::default()
    };
    let h = train::train(&mut g, &samples, &cfg, &mut train::no_clock()).map_err(|e| e.to_string())?;
    within(start.elapsed(), 120)?;
    let last = h.last().ok_or("no epochs recorded")?;
    check(
        samples.len() == 16 && normal == 8 && last.train_accuracy == 1.0 && last.mean_loss < 0.01,
        format!(
            "{} samples, epoch {} loss {:.2e} train accuracy {:.4}",
            samples.len(),
            last.epoch,
            last.mean_loss,
            last.train_accuracy
        ),
    )
}

fn load_core(r: &SubjectRecord) -> mcinet_core::Result<Tensor> {
    imageio::decode_image(Path::new(&r.image_path)).map_err(|e| CoreError::Dataset(e.to_string()))
}

fn desk_scale(dir: &Path) -> Outcome {
    let start = Instant::now();
    let m = synth::synth_dataset(210, 42, dir, &SynthParams::default()).map_err(|e| e.to_string())?;
    let m = manifest::load_manifest(&dir.join("manifest.csv"))
        .map_err(|e| e.to_string())
        .and_then(|reloaded| {
            if reloaded == m {
                Ok(reloaded)
            } else {
                Err("manifest changed on reload".into())
            }
        })?;
    let split = data::subject_split(&m, 0.7, 42).map_err(|e| e.to_string())?;
    let (n_train, n_test) = (split.train.subjects().len(), split.test.subjects().len());
    let prepared = PreparedData::from_split(&split, 64, &mut load_core).map_err(|e| e.to_string())?;
    let opts = CompareOptions {
        input_size: Some(64),
        width_divisor: 4,
        source_classes: 1000,
    };
    let run = train::transfer_run(
        ArchitectureId::Alexnet,
        &prepared,
        &opts,
        &TrainConfig::default(),
        None,
        &mut train::no_clock(),
    )
    .map_err(|e| e.to_string())?;
    within(start.elapsed(), 900)?;
    let acc = run.eval.subject_accuracy;
    check(
        n_train == 294 && n_test == 126 && acc >= 0.90,
        format!(
            "split {n_train}/{n_test}, subject accuracy {acc:.4}, slice accuracy {:.4}, {:.0}s",
            run.eval.slice_accuracy,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn determinism(data_dir: &Path, first: &Path, second: &Path) -> Outcome {
    small_compare(data_dir, second)?;
    let mut names = vec![
        "comparison.csv".to_string(),
        "comparison.json".into(),
        "figure.svg".into(),
    ];
    for arch in ArchitectureId::ALL {
        names.push(format!("history_{arch}.json"));
        names.push(format!("eval_{arch}.json"));
    }
    let differing: Vec<&String> = names
        .iter()
        .filter(
            |n| match (std::fs::read(first.join(n)), std::fs::read(second.join(n))) {
                (Ok(a), Ok(b)) => a != b,
                _ => true,
            },
        )
        .collect();
    check(
        differing.is_empty(),
        format!("{} files compared, differing {differing:?}", names.len()),
    )
}

fn bits(g: &ModelGraph) -> BTreeMap<String, Vec<u64>> {
    g.named_tensors()
        .into_iter()
        .map(|(name, _, v)| (name, v.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn compact(arch: ArchitectureId, classes: usize, seed: u64) -> Result<ModelGraph, String> {
    zoo::build(
        arch,
        &ZooConfig {
            class_count: classes,
            input_size: Some(64),
            width_divisor: 4,
            seed,
        },
    )
    .map_err(|e| e.to_string())
}

fn serialization(dir: &Path) -> Outcome {
    let mut r = SplitMix(5);
    let mut lines = Vec::new();
    let mut ok = true;
    for arch in ArchitectureId::ALL {
        let g = compact(arch, 1000, 1)?;
        let path = dir.join(format!("{arch}.nwts"));
        formats::save_weights(&g, &path).map_err(|e| e.to_string())?;
        let mut h = compact(arch, 1000, 2)?;
        formats::load_weights(&mut h, &path).map_err(|e| e.to_string())?;
        let batch = Tensor::from_fn(&[2, 3, 64, 64], |_| r.unit());
        let (ya, yb) = (g.forward_eval(&batch), h.forward_eval(&batch));
        let same_out = matches!((&ya, &yb), (Ok(a), Ok(b)) if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let same_params = bits(&g) == bits(&h);
        let mut swapped = g.clone();
        swapped.replace_head(2, 9).map_err(|e| e.to_string())?;
        let (before, after) = (bits(&g), bits(&swapped));
        let changed: Vec<&String> = before.keys().filter(|k| before.get(*k) != after.get(*k)).collect();
        let head_only = changed.len() == 2 && changed.iter().all(|k| k.ends_with(".weight") || k.ends_with(".bias"));
        ok &= same_out && same_params && head_only;
        lines.push(format!(
            "{arch} params {same_params} outputs {same_out} head swap changed {changed:?}"
        ));
    }
    check(ok, lines.join("; "))
}

fn freeze_contract() -> Outcome {
    let mut g = compact(ArchitectureId::Alexnet, 2, 4)?;
    let samples = synth_samples(4, 64, 13);
    let before = bits(&g);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        freeze_boundary: Some(ArchitectureId::Alexnet.last_conv().to_string()),
        ..TrainConfig::default()
    };
    train::train(&mut g, &samples, &cfg, &mut train::no_clock()).map_err(|e| e.to_string())?;
    let after = bits(&g);
    let mut conv_same = 0;
    let mut fc_moved = 0;
    let mut bad = Vec::new();
    for n in g.nodes() {
        let keys = [format!("{}.weight", n.id), format!("{}.bias", n.id)];
        let moved = keys.iter().any(|k| before.get(k) != after.get(k));
        match n.kind() {
            LayerKind::Conv if !moved => conv_same += 1,
            LayerKind::Fc if moved => fc_moved += 1,
            LayerKind::Conv | LayerKind::Fc => bad.push(n.id.clone()),
            _ => {}
        }
    }
    check(
        bad.is_empty() && conv_same == 5 && fc_moved == 3,
        format!("conv unchanged {conv_same}/5, fc moved {fc_moved}/3, violations {bad:?}"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let small = tmp.path().join("small");
    let (first, second) = (tmp.path().join("run1"), tmp.path().join("run2"));
    let criteria: Vec<Criterion> = vec![
        (
            "1 comparison report on synthetic data",
            Box::new(|| comparison_report(&small, &first)),
        ),
        ("2 gradient suite", Box::new(gradient_suite)),
        ("3 convolution oracle", Box::new(conv_oracle)),
        ("4 architecture census", Box::new(census)),
        ("5 inferred vs executed shapes", Box::new(shapes)),
        ("6 overfit 16 samples", Box::new(overfit)),
        (
            "7 desk-scale AlexNet transfer",
            Box::new(|| desk_scale(&tmp.path().join("desk"))),
        ),
        (
            "8 byte-identical reruns",
            Box::new(|| determinism(&small, &first, &second)),
        ),
        ("9 NWTS roundtrip and head swap", Box::new(|| serialization(tmp.path()))),
        ("10 freeze through last conv", Box::new(freeze_contract)),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
