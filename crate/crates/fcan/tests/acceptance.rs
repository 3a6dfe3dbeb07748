//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `cargo test -p fcan --test acceptance -- 1 7` runs a subset.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fcan::config::PipelineConfig;
use fcan::pipeline::{Benchmark, ProbeReport};
use fcan_core::aan::{
    adapt_image, content_loss, domain_style, gram, normalized_step, step_size, style_loss, AanConfig, AanProblem,
    DomainStyle, GramMatrix, LayerWeights,
};
use fcan_core::backbone::{BackboneConfig, BoundFcn, FeaturePyramid, Layer, MiniFcn};
use fcan_core::data::{gen_scene, gen_set, Domain, LabelMap, SceneSpec, IGNORE};
use fcan_core::eval::{confusion, iou_report};
use fcan_core::gradcheck::grad_check;
use fcan_core::ops;
use fcan_core::ran::{
    adversarial_loss, f_objective_on, poly_lr, Batch, Discriminator, DiscriminatorConfig, DomainScoreMap,
    ObjectiveWeights, Preset, StepBatches,
};
use fcan_core::tape::BnMode;
use fcan_core::{rng, Tape, Tensor, Var};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn random(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn analytic_values() -> Outcome {
    const TOL: f64 = 1e-6;
    let (mut worst, mut count): (f64, usize) = (0.0, 0);
    let mut expect = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        count += 1;
        worst = worst.max(err);
        ensure(err < TOL, || format!("{name}: got {got}, want {want}"))
    };

    let g = gram(&tensor(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 1.0, 0.0, 0.0, 1.0])).map_err(|e| e.to_string())?;
    for (i, want) in [30.0, 5.0, 5.0, 2.0].into_iter().enumerate() {
        expect("gram", g.values()[i], want / 4.0)?;
    }

    let a = FeaturePyramid::new(vec![(Layer::C2, tensor(&[1, 2, 2], &[0.5, 1.0, 1.5, 2.0]))]);
    let b = FeaturePyramid::new(vec![(Layer::C2, tensor(&[1, 2, 2], &[0.5, 3.0, 1.5, 2.0]))]);
    expect(
        "content",
        content_loss(&a, &b, &LayerWeights::only(Layer::C2, 1.0)).unwrap(),
        1.0,
    )?;

    let ours = vec![(Layer::C1, GramMatrix::new(1, vec![1.0], 1.0).unwrap())];
    let style = DomainStyle::new(vec![(Layer::C1, GramMatrix::new(1, vec![3.0], 1.0).unwrap())], 1).unwrap();
    expect(
        "style",
        style_loss(&ours, &style, &LayerWeights::only(Layer::C1, 1.0)).unwrap(),
        4.0,
    )?;

    let scores = |v: &[f64]| DomainScoreMap::new(tensor(&[1, 1, v.len()], v)).unwrap();
    let uniform = adversarial_loss(&scores(&[0.5; 4]), &scores(&[0.5; 3])).unwrap();
    expect("adv uniform", uniform.value, 2.0 * std::f64::consts::LN_2)?;
    let adv = adversarial_loss(&scores(&[0.1, 0.3]), &scores(&[0.9, 0.8])).unwrap();
    expect("adv", adv.value, 0.39527)?;

    expect("poly_lr start", poly_lr(0.0025, 0, 1000, 0.9).unwrap(), 0.0025)?;
    expect("poly_lr half", poly_lr(0.0025, 500, 1000, 0.9).unwrap(), 0.0013397)?;

    let cm = confusion(
        &LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap(),
        &LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap(),
        2,
    )
    .unwrap();
    expect("mIoU", iou_report(&cm).miou.unwrap_or(f64::NAN), 7.0 / 12.0)?;

    let w0 = step_size(10.0, 1, 1000);
    expect("w0", w0, 9.99)?;
    let delta = normalized_step(&[2.0, -2.0, 0.0, 0.0], w0).ok_or("zero step")?;
    for (got, want) in delta.iter().zip([0.5, -0.5, 0.0, 0.0]) {
        expect("delta", *got, 9.99 * want)?;
    }
    Ok(format!("{count} values, worst error {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

const GRAD_SEEDS: u64 = 10;

fn project(t: &mut Tape, v: Var, seed: u64) -> fcan_core::Result<Var> {
    let shape = t.shape(v).to_vec();
    let w = random(&mut rng::derived(seed, 999), &shape, -1.0, 1.0);
    let wv = t.constant(&w);
    let m = t.mul(v, wv)?;
    Ok(t.sum(m))
}

fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| r.gen_range(0.05..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

struct GradLog(Vec<(String, f64)>);

impl GradLog {
    fn check(&mut self, name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> fcan_core::Result<Var>) {
        let err = grad_check(f, x, 1e-6).unwrap_or(f64::INFINITY);
        match self.0.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => self.0.push((name.to_string(), err)),
        }
    }
}

fn op_gradients(log: &mut GradLog, seed: u64) {
    let mut r = rng::derived(seed, 1);
    let x = away_from_zero(&mut r, &[2, 3, 2, 2]);
    let c = random(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    type Binary = fn(&mut Tape, Var, Var) -> fcan_core::Result<Var>;
    let binaries: [(&str, Binary, bool); 4] = [
        ("add", |t, a, b| t.add(a, b), false),
        ("sub lhs", |t, a, b| t.sub(a, b), false),
        ("sub rhs", |t, a, b| t.sub(a, b), true),
        ("mul", |t, a, b| t.mul(a, b), false),
    ];
    for (name, f, swap) in binaries {
        log.check(name, &x, |t, x| {
            let cv = t.constant(&c);
            let y = if swap { f(t, cv, x)? } else { f(t, x, cv)? };
            project(t, y, seed)
        });
    }
    log.check("scale", &x, |t, x| {
        let y = t.scale(x, -2.5);
        project(t, y, seed)
    });
    log.check("add_channel", &x, |t, x| {
        let y = t.add_channel(x, &[0.5, -0.25, 1.0])?;
        project(t, y, seed)
    });
    log.check("relu", &x, |t, x| {
        let y = t.relu(x);
        project(t, y, seed)
    });
    log.check("sigmoid", &x, |t, x| {
        let y = t.sigmoid(x);
        project(t, y, seed)
    });
    log.check("sum", &x, |t, x| Ok(t.sum(x)));
    log.check("mean", &x, |t, x| Ok(t.mean(x)));
    log.check("weighted_sum", &x, |t, x| {
        let a = t.sum(x);
        let sq = t.mul(x, x)?;
        let b = t.mean(sq);
        t.weighted_sum(&[(0.7, a), (-3.0, b)])
    });

    let mut r = rng::derived(seed, 2);
    let (stride, dil) = (1 + seed as usize % 2, 1 + seed as usize % 3);
    let x = random(&mut r, &[2, 2, 6, 5], -1.0, 1.0);
    let w = random(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random(&mut r, &[3], -1.0, 1.0);
    let conv = |t: &mut Tape, x: Var, w: Var, b: Var| {
        let y = t.conv2d(x, w, Some(b), stride, dil, dil)?;
        project(t, y, seed)
    };
    log.check("conv2d input", &x, |t, x| {
        let (w, b) = (t.constant(&w), t.constant(&b));
        conv(t, x, w, b)
    });
    log.check("conv2d weight", &w, |t, w| {
        let (x, b) = (t.constant(&x), t.constant(&b));
        conv(t, x, w, b)
    });
    log.check("conv2d bias", &b, |t, b| {
        let (x, w) = (t.constant(&x), t.constant(&w));
        conv(t, x, w, b)
    });

    let mut r = rng::derived(seed, 3);
    let x = random(&mut r, &[3, 2, 3, 4], -2.0, 2.0);
    let g = random(&mut r, &[2], 0.5, 1.5);
    let b = random(&mut r, &[2], -1.0, 1.0);
    let (mean, var) = ([0.1, -0.3], [0.8, 1.7]);
    let bn = |t: &mut Tape, x: Var, g: Var, b: Var, train: bool| {
        let mode = if train {
            BnMode::Train
        } else {
            BnMode::Eval { mean: &mean, var: &var }
        };
        let (y, _) = t.batch_norm(x, g, b, mode)?;
        project(t, y, seed)
    };
    log.check("batch_norm train input", &x, |t, x| {
        let (g, b) = (t.constant(&g), t.constant(&b));
        bn(t, x, g, b, true)
    });
    log.check("batch_norm train gamma", &g, |t, g| {
        let (x, b) = (t.constant(&x), t.constant(&b));
        bn(t, x, g, b, true)
    });
    log.check("batch_norm train beta", &b, |t, b| {
        let (x, g) = (t.constant(&x), t.constant(&g));
        bn(t, x, g, b, true)
    });
    log.check("batch_norm eval input", &x, |t, x| {
        let (g, b) = (t.constant(&g), t.constant(&b));
        bn(t, x, g, b, false)
    });

    let mut r = rng::derived(seed, 4);
    let maps = random(&mut r, &[2, 3, 3, 4], -1.0, 1.0);
    let other = random(&mut r, &[2, 3, 3, 4], -1.0, 1.0);
    log.check("gram", &maps, |t, x| {
        let g = t.gram(x)?;
        project(t, g, seed)
    });
    log.check("mean_sq_diff", &maps, |t, x| {
        let c = t.constant(&other);
        t.mean_sq_diff(x, c)
    });
    let logits = random(&mut r, &[2, 4, 2, 3], -2.0, 2.0);
    let labels: Vec<u8> = (0..12)
        .map(|i| if i % 5 == 0 { IGNORE } else { r.gen_range(0..4) })
        .collect();
    log.check("softmax_ce", &logits, |t, x| Ok(t.softmax_ce(x, &labels, IGNORE)?.0));
    let scores = random(&mut r, &[2, 1, 2, 2], 0.05, 0.95);
    log.check("log_loss positive", &scores, |t, x| Ok(t.log_loss(x, true, 1e-7).0));
    log.check("log_loss negative", &scores, |t, x| Ok(t.log_loss(x, false, 1e-7).0));

    let mut r = rng::derived(seed, 5);
    let x = random(&mut r, &[2, 2, 5, 6], -1.0, 1.0);
    let other = random(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
    log.check("resize_bilinear down", &x, |t, x| {
        let y = t.resize_bilinear(x, 3, 4)?;
        project(t, y, seed)
    });
    log.check("resize_bilinear up", &x, |t, x| {
        let y = t.resize_bilinear(x, 7, 9)?;
        project(t, y, seed)
    });
    log.check("upsample", &x, |t, x| {
        let y = t.upsample(x, 2)?;
        project(t, y, seed)
    });
    log.check("adaptive_avg_pool", &x, |t, x| {
        let y = t.adaptive_avg_pool(x, 2)?;
        project(t, y, seed)
    });
    log.check("concat_channels", &x, |t, x| {
        let o = t.constant(&other);
        let y = t.concat_channels(&[o, x])?;
        project(t, y, seed)
    });
}

fn tiny_backbone(seed: u64) -> MiniFcn {
    let mut model = MiniFcn::new(BackboneConfig {
        channels: [4, 4, 5, 5, 6],
        num_classes: 3,
        pyramid_bins: vec![1, 2],
        input_mean: [0.5; 3],
        init_seed: seed,
    })
    .unwrap();
    let mut r = rng::derived(seed, 6);
    for s in model.stages_mut() {
        s.stats.mean.iter_mut().for_each(|m| *m = r.gen_range(-0.2..0.2));
        s.stats.var.iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
    }
    model
}

fn objective_gradients(log: &mut GradLog, seed: u64) {
    let model = tiny_backbone(seed);
    let mut r = rng::derived(seed, 7);
    let content = random(&mut r, &[3, 12, 12], 0.0, 1.0);
    let grams = Layer::ALL
        .iter()
        .map(|&l| {
            let c = model.config().channels[l.index()];
            let g = random(&mut r, &[c, c], 0.0, 0.5);
            (l, GramMatrix::new(c, g.into_data(), 1.0).unwrap())
        })
        .collect();
    let style = DomainStyle::new(grams, 1).unwrap();
    let problem = AanProblem::new(
        &model,
        &content,
        &style,
        &LayerWeights::only(Layer::C4, 1.0),
        &LayerWeights::uniform(1.0),
    )
    .unwrap();
    let x = random(&mut r, &[3, 12, 12], 0.0, 1.0);
    log.check("AAN objective", &x, |t, x| problem.objective(t, x, 3.0));

    let critic = Discriminator::new(DiscriminatorConfig {
        in_channels: 6,
        branch_channels: 4,
        rates: vec![1, 2],
        init_seed: seed,
        ..DiscriminatorConfig::default()
    })
    .unwrap();
    let mut r = rng::derived(seed, 8);
    let source = Batch {
        images: random(&mut r, &[2, 3, 16, 16], 0.0, 1.0),
        labels: Some((0..512).map(|_| r.gen_range(0..3)).collect()),
    };
    let target = Batch::unlabeled(&[
        random(&mut r, &[3, 16, 16], 0.0, 1.0),
        random(&mut r, &[3, 16, 16], 0.0, 1.0),
    ])
    .unwrap();
    let labeled = Batch {
        images: random(&mut r, &[1, 3, 16, 16], 0.0, 1.0),
        labels: Some((0..256).map(|_| r.gen_range(0..3)).collect()),
    };
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let names = model.param_names();
    for name in ["c1.weight", "c3.gamma", "c5.beta", "head.weight", "head.bias"] {
        let i = names.iter().position(|n| n == name).unwrap();
        log.check("F objective", &params[i], |t, x| {
            let vars = params
                .iter()
                .enumerate()
                .map(|(j, p)| if j == i { x } else { t.constant(p) })
                .collect();
            let batches = StepBatches {
                source: &source,
                target: &target,
                labeled_target: Some(&labeled),
            };
            let weights = ObjectiveWeights {
                source: 5.0,
                target: 2.0,
            };
            Ok(f_objective_on(&model, t, &BoundFcn::from_vars(vars), &critic, batches, weights)?.total)
        });
    }
}

fn gradient_checks() -> Outcome {
    let mut log = GradLog(Vec::new());
    for seed in 0..GRAD_SEEDS {
        op_gradients(&mut log, seed);
        objective_gradients(&mut log, seed);
    }
    let failed: Vec<String> = log
        .0
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= 1e-6)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect();
    ensure(failed.is_empty(), || format!("above 1e-6: {}", failed.join(", ")))?;
    let worst = log.0.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!(
        "{} checks x {GRAD_SEEDS} seeds, worst relative error {worst:.1e}",
        log.0.len()
    ))
}

// ---------------------------------------------------------------- 3

fn appearance_descent() -> Outcome {
    let spec = |seed| SceneSpec {
        seed,
        height: 64,
        width: 64,
        ..SceneSpec::default()
    };
    let (content, _) = gen_scene(&spec(0), Domain::Source).map_err(|e| e.to_string())?;
    let style_images: Vec<Tensor> = gen_set(&spec(1), Domain::Target, 0, 16)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let extractor = MiniFcn::new(BackboneConfig::default()).map_err(|e| e.to_string())?;
    let style = domain_style(&style_images, &extractor, &Layer::ALL).map_err(|e| e.to_string())?;
    let config = AanConfig {
        iterations: 300,
        ..AanConfig::default()
    };
    let out = adapt_image(&content, &style, &extractor, &config).map_err(|e| e.to_string())?;
    let (first, last) = (out.losses[0], *out.losses.last().unwrap());
    let best = out.running_min();
    ensure(best.windows(2).all(|w| w[1] <= w[0]), || {
        "running minimum increased".into()
    })?;
    let ratio = best.last().unwrap() / first;
    ensure(ratio <= 0.1, || {
        format!("best loss is {:.1}% of initial {first:.4e}", 100.0 * ratio)
    })?;
    Ok(format!(
        "loss {first:.4e} -> {last:.4e}, best {:.2}% of initial, alpha {:.3e}",
        100.0 * ratio,
        out.alpha
    ))
}

// ---------------------------------------------------------------- 4, 5, 6

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const LABELED: [usize; 4] = [0, 8, 32, 128];

struct SeedRun {
    seed: u64,
    fcn: f64,
    abn: f64,
    fcan: f64,
    probe: ProbeReport,
}

struct Ladder {
    runs: Vec<SeedRun>,
    ladder_time: Duration,
    probe_time: Duration,
    semisup: Vec<(usize, f64)>,
    semisup_time: Duration,
}

fn run_ladder() -> Result<Ladder, String> {
    let desk = PipelineConfig::default();
    let mut out = Ladder {
        runs: Vec::new(),
        ladder_time: Duration::ZERO,
        probe_time: Duration::ZERO,
        semisup: Vec::new(),
        semisup_time: Duration::ZERO,
    };
    for seed in SEEDS {
        let start = Instant::now();
        let mut bench = Benchmark::prepare(desk.clone().with_seed(seed)).map_err(|e| e.to_string())?;
        let mut miou = |p| bench.run_preset(p).map_err(|e| e.to_string());
        let fcn = miou(Preset::Fcn)?.miou();
        let abn = miou(Preset::Abn)?.miou();
        let fcan = miou(Preset::Fcan)?;
        out.ladder_time += start.elapsed();

        let start = Instant::now();
        let probe = bench.probe(&fcan.adapted[0]).map_err(|e| e.to_string())?;
        out.probe_time += start.elapsed();
        eprintln!(
            "  seed {seed}: FCN {:.2} ABN {:.2} FCAN {:.2}, probe {:.3} -> {:.3}",
            100.0 * fcn,
            100.0 * abn,
            100.0 * fcan.miou(),
            probe.pre,
            probe.post
        );

        if seed == SEEDS[0] {
            // The unlabeled run is the FCAN rung itself.
            let start = Instant::now();
            out.semisup.push((0, fcan.miou()));
            for (n, report) in bench.semisup(&LABELED[1..]).map_err(|e| e.to_string())? {
                out.semisup.push((n, report.miou_or_zero()));
            }
            out.semisup_time = start.elapsed();
        }
        out.runs.push(SeedRun {
            seed,
            fcn,
            abn,
            fcan: fcan.miou(),
            probe,
        });
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation(ladder: &Ladder) -> Outcome {
    let runs = &ladder.runs;
    let abn_wins = runs.iter().filter(|r| r.fcn < r.abn).count();
    let fcan_wins = runs.iter().filter(|r| r.abn < r.fcan).count();
    let gain = median(runs.iter().map(|r| r.fcan - r.fcn).collect());
    let table: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "s{} {:.1}/{:.1}/{:.1}",
                r.seed,
                100.0 * r.fcn,
                100.0 * r.abn,
                100.0 * r.fcan
            )
        })
        .collect();
    let detail = format!(
        "FCN<ABN {abn_wins}/5, ABN<FCAN {fcan_wins}/5, median gain {:.2} points [{}]",
        100.0 * gain,
        table.join(", ")
    );
    ensure(abn_wins >= 4 && fcan_wins >= 4 && gain >= 0.05, || detail.clone())?;
    Ok(detail)
}

fn probe(ladder: &Ladder) -> Outcome {
    let hits = ladder
        .runs
        .iter()
        .filter(|r| r.probe.pre > 0.9 && r.probe.post < 0.8)
        .count();
    let detail = format!(
        "{hits}/5 seeds, pre->post [{}]",
        ladder
            .runs
            .iter()
            .map(|r| format!("{:.3}->{:.3}", r.probe.pre, r.probe.post))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ensure(hits >= 4, || detail.clone())?;
    Ok(detail)
}

fn semisup(ladder: &Ladder) -> Outcome {
    let curve = &ladder.semisup;
    let detail = format!(
        "labeled: mIoU {}",
        curve
            .iter()
            .map(|(n, m)| format!("{n}: {:.2}", 100.0 * m))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ensure(curve.windows(2).all(|w| w[1].1 >= w[0].1 - 0.01), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize, dil: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros([o, oh, ow]);
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                                acc += x.at(&[ic, iy as usize, ix as usize]) * k.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                }
                out.set(&[oc, oy, ox], acc);
            }
        }
    }
    out
}

fn iou_oracle(pred: &[u8], gt: &[u8], k: u8) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let valid = pred.iter().zip(gt).filter(|(_, &g)| g != IGNORE);
            let (inter, union) = valid.fold((0usize, 0usize), |(i, u), (&p, &g)| {
                (i + usize::from(p == c && g == c), u + usize::from(p == c || g == c))
            });
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

fn kernel_oracles() -> Outcome {
    let mut r = rng::derived(70, 0);
    let mut worst_iou: f64 = 0.0;
    for case in 0..1000 {
        let k = r.gen_range(2..=6u8);
        let gt: Vec<u8> = (0..64)
            .map(|_| if r.gen_bool(0.2) { IGNORE } else { r.gen_range(0..k) })
            .collect();
        let pred: Vec<u8> = (0..64).map(|_| r.gen_range(0..k)).collect();
        let cm = confusion(
            &LabelMap::new(8, 8, pred.clone()).unwrap(),
            &LabelMap::new(8, 8, gt.clone()).unwrap(),
            k as usize,
        )
        .map_err(|e| e.to_string())?;
        let want = iou_oracle(&pred, &gt, k);
        let got = iou_report(&cm);
        for (a, b) in got.per_class.iter().zip(&want) {
            match (a, b) {
                (Some(a), Some(b)) => worst_iou = worst_iou.max((a - b).abs()),
                (None, None) => {}
                _ => return Err(format!("IoU case {case}: class presence differs")),
            }
        }
        let present: Vec<f64> = want.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        worst_iou = worst_iou.max((got.miou.unwrap_or(f64::NAN) - mean).abs());
    }
    ensure(worst_iou < 1e-10, || format!("IoU error {worst_iou:.1e}"))?;

    let mut worst_conv: f64 = 0.0;
    let mut cases = 0;
    while cases < 100 {
        let (c, o) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w, k) = (r.gen_range(3..=8), r.gen_range(3..=8), r.gen_range(1..=3));
        let (stride, pad, dil) = (r.gen_range(1..=2), r.gen_range(0..=2), r.gen_range(1..=3));
        let span = dil * (k - 1) + 1;
        if h + 2 * pad < span || w + 2 * pad < span {
            continue;
        }
        let x = random(&mut r, &[c, h, w], -1.0, 1.0);
        let kernel = random(&mut r, &[o, c, k, k], -1.0, 1.0);
        let got = ops::conv2d(&x, &kernel, stride, pad, dil).map_err(|e| e.to_string())?;
        let want = conv_oracle(&x, &kernel, stride, pad, dil);
        ensure(got.shape() == want.shape(), || {
            format!("conv case {cases}: shape differs")
        })?;
        worst_conv = worst_conv.max(got.max_abs_diff(&want));
        cases += 1;
    }
    ensure(worst_conv < 1e-10, || format!("conv error {worst_conv:.1e}"))?;
    Ok(format!(
        "1000 IoU cases (error {worst_iou:.1e}), 100 conv cases (error {worst_conv:.1e})"
    ))
}

// ---------------------------------------------------------------- 8

fn cli_run(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let config = config.to_str().unwrap();
    let dir = |name: &str| root.join(name).to_string_lossy().into_owned();
    let model = root.join("pre").join("model").to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = [
        vec![
            "synth-data",
            "--out",
            &dir("src"),
            "--n",
            "8",
            "--domain",
            "source",
            "--config",
            config,
        ],
        vec![
            "synth-data",
            "--out",
            &dir("tgt"),
            "--n",
            "8",
            "--domain",
            "target",
            "--first",
            "100",
            "--config",
            config,
        ],
        vec![
            "ran-pretrain",
            "--data",
            &dir("src"),
            "--out",
            &dir("pre"),
            "--config",
            config,
        ],
        vec![
            "ran-adapt",
            "--model",
            &model,
            "--source",
            &dir("src"),
            "--target",
            &dir("tgt"),
            "--out",
            &dir("adapt"),
            "--config",
            config,
        ],
        vec!["eval", "--model", &model, "--gt", &dir("tgt"), "--classes", "3"],
        vec![
            "ablate",
            "--config",
            config,
            "--out",
            &dir("ablate"),
            "--rungs",
            "fcn,abn,fcan",
            "--probe",
        ],
    ]
    .into_iter()
    .map(|s| s.into_iter().map(String::from).collect())
    .collect();
    for args in &steps {
        let out = Command::new(env!("CARGO_BIN_EXE_fcan"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!(
                "fcan {} failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr).trim()
            )
        })?;
    }
    let mut csvs = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                csvs.push((rel, std::fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    csvs.sort();
    Ok(csvs)
}

fn cli_reproducible() -> Outcome {
    let (a, b) = (
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    );
    let first = cli_run(a.path())?;
    let second = cli_run(b.path())?;
    ensure(first.len() == second.len() && !first.is_empty(), || {
        "different CSV sets".into()
    })?;
    for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
        ensure(na == nb && ba == bb, || format!("{na} differs between runs"))?;
    }
    let bytes: usize = first.iter().map(|(_, b)| b.len()).sum();
    Ok(format!("{} CSV files, {bytes} bytes, identical", first.len()))
}

// ----------------------------------------------------------------

fn verdict(id: u32, name: &str, limit: Option<Duration>, took: Duration, outcome: Outcome) -> bool {
    let outcome = match (outcome, limit) {
        (Ok(d), Some(l)) if took > l => Err(format!(
            "took {:.1} s, limit {:.0} s: {d}",
            took.as_secs_f64(),
            l.as_secs_f64()
        )),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} {tag} {name} ({:.1} s): {detail}", took.as_secs_f64());
    outcome.is_ok()
}

fn report(id: u32, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome =
        std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_string()));
    verdict(id, name, limit, start.elapsed(), outcome)
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |id: u32| wanted.is_empty() || wanted.contains(&id);
    let mut ok = true;
    let secs = |s| Some(Duration::from_secs(s));

    if on(1) {
        ok &= report(1, "analytic values", secs(1), analytic_values);
    }
    if on(2) {
        ok &= report(2, "gradient checks", secs(60), gradient_checks);
    }
    if on(3) {
        ok &= report(3, "appearance descent", secs(120), appearance_descent);
    }
    if on(4) || on(5) || on(6) {
        let start = Instant::now();
        let ladder = run_ladder();
        println!("ladder runs finished in {:.0} s", start.elapsed().as_secs_f64());
        let total = start.elapsed();
        // Each criterion is timed by the training it depends on.
        let judge = |id, name, limit, f: fn(&Ladder) -> Outcome, took: fn(&Ladder) -> Duration| match &ladder {
            Ok(l) => verdict(id, name, limit, took(l), f(l)),
            Err(e) => verdict(id, name, limit, total, Err(e.clone())),
        };
        if on(4) {
            ok &= judge(4, "ablation ladder", secs(30 * 60), ablation, |l| l.ladder_time);
        }
        if on(5) {
            ok &= judge(5, "domain probe", None, probe, |l| l.probe_time);
        }
        if on(6) {
            ok &= judge(6, "labeled target sweep", None, semisup, |l| l.semisup_time);
        }
    }
    if on(7) {
        ok &= report(7, "kernel oracles", None, kernel_oracles);
    }
    if on(8) {
        ok &= report(8, "cli reproducibility", None, cli_reproducible);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
