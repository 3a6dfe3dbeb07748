use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fcan::checkpoint;
use fcan::config::{AanSetting, PipelineConfig, RESOLVED_CONFIG};
use fcan::dataset;
use fcan::fct::{self, Dtype};
use fcan::netpbm;
use fcan::pipeline::{self, Benchmark};
use fcan::report::{self, Table};
use fcan::{AppError, Result, StageExt};
use fcan_core::aan::{adapt_image, domain_style, AanConfig, Alpha, Init, LayerWeights};
use fcan_core::backbone::{adapt_bn_stats, Layer, MiniFcn};
use fcan_core::data::{Domain, LabelMap};
use fcan_core::eval::{argmax, fuse_scores, iou_report, multiscale_infer, ConfusionMatrix};
use fcan_core::ran::{pretrain_segmenter, train_ran, Discriminator, Granularity, Phase, Preset, TrainConfig};
use serde::Serialize;

fn base_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Writes the effective parameters of a command next to its outputs.
fn write_resolved(dir: &Path, command: &str, params: &impl Serialize) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        command: &'a str,
        params: &'a T,
    }
    fcan::write_json(&dir.join(RESOLVED_CONFIG), &Resolved { command, params })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| AppError::config(format!("bad {what} {t:?}")))
        })
        .collect()
}

fn parse_layers(s: &str) -> Result<Vec<Layer>> {
    s.split(',')
        .map(|t| Layer::from_name(t.trim()).ok_or_else(|| AppError::config(format!("unknown layer {t:?}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Domain {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    domain: DomainArg,
    /// Scene index of the first image.
    #[arg(long, default_value_t = 0)]
    first: u64,
    /// Pipeline config supplying the scene parameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn synth_data(a: SynthArgs) -> Result<()> {
    let mut scene = base_config(a.config.as_deref())?.data.scene;
    scene.seed = a.seed;
    let manifest = dataset::synthesize(&a.out, &scene, a.domain.into(), a.first, a.n)?;
    write_resolved(&a.out, "synth-data", &manifest)?;
    log::info!("wrote {} {:?} scenes to {}", a.n, manifest.domain, a.out.display());
    Ok(())
}

fn load_or_init_model(path: Option<&Path>, config: &PipelineConfig, seed: u64) -> Result<MiniFcn> {
    match path {
        Some(p) => checkpoint::load_backbone(p),
        None => {
            let mut bc = config.backbone.clone();
            bc.init_seed = seed;
            Ok(MiniFcn::new(bc)?)
        }
    }
}

#[derive(Debug, Args)]
pub struct AanStyleArgs {
    /// Directory of img_*.ppm files.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Feature extractor checkpoint; a seeded random network if omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "c1,c2,c3,c4,c5")]
    layers: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn aan_style(a: AanStyleArgs) -> Result<()> {
    let cfg = base_config(a.config.as_deref())?;
    let model = load_or_init_model(a.model.as_deref(), &cfg, a.seed)?;
    let layers = parse_layers(&a.layers)?;
    let images = dataset::load_images(&a.images)?;
    let style = domain_style(&images, &model, &layers)?;
    checkpoint::save_style(&a.out, &style, Dtype::F64)?;
    #[derive(Serialize)]
    struct Params<'a> {
        images: &'a Path,
        count: usize,
        model: Option<&'a Path>,
        layers: Vec<Layer>,
        seed: u64,
    }
    write_resolved(
        &a.out,
        "aan-style",
        &Params {
            images: &a.images,
            count: images.len(),
            model: a.model.as_deref(),
            layers,
            seed: a.seed,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Source,
    WhiteNoise,
}

#[derive(Debug, Args)]
pub struct AanAdaptArgs {
    /// One PPM image or a directory of img_*.ppm files.
    #[arg(long)]
    input: PathBuf,
    /// Domain style written by `aan-style`.
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Style weight: a number, or `auto:R` to balance gradient norms at ratio R.
    #[arg(long, default_value = "auto:0.1")]
    alpha: String,
    #[arg(long, default_value_t = 10.0)]
    beta: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Style layers.
    #[arg(long, default_value = "c1,c2,c3,c4,c5")]
    layers: String,
    /// Style weight per entry of --layers; all ones if omitted.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value = "c4")]
    content_layer: String,
    #[arg(long, value_enum, default_value = "white-noise")]
    init: InitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_alpha(s: &str) -> Result<Alpha> {
    if let Some(r) = s.strip_prefix("auto:") {
        let ratio = r
            .parse()
            .map_err(|_| AppError::config(format!("bad alpha ratio {r:?}")))?;
        return Ok(Alpha::Auto { ratio });
    }
    s.parse()
        .map(Alpha::Fixed)
        .map_err(|_| AppError::config(format!("bad alpha {s:?}")))
}

pub fn aan_adapt(a: AanAdaptArgs) -> Result<()> {
    let cfg = base_config(a.config.as_deref())?;
    let model = load_or_init_model(a.model.as_deref(), &cfg, a.seed)?;
    let style = checkpoint::load_style(&a.style)?;
    let layers = parse_layers(&a.layers)?;
    let weights: Vec<f64> = match &a.weights {
        Some(w) => parse_list(w, "weight")?,
        None => vec![1.0; layers.len()],
    };
    if weights.len() != layers.len() {
        return Err(AppError::config("--weights needs one entry per --layers entry"));
    }
    let mut style_weights = LayerWeights([0.0; 5]);
    for (l, w) in layers.iter().zip(&weights) {
        style_weights.0[l.index()] = *w;
    }
    let content = Layer::from_name(&a.content_layer)
        .ok_or_else(|| AppError::config(format!("unknown layer {:?}", a.content_layer)))?;
    let config = AanConfig {
        content_weights: LayerWeights::only(content, 1.0),
        style_weights,
        alpha: parse_alpha(&a.alpha)?,
        beta: a.beta,
        iterations: a.iters,
        init: match a.init {
            InitArg::Source => Init::Source,
            InitArg::WhiteNoise => Init::WhiteNoise,
        },
        seed: a.seed,
    };
    config.validate()?;
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        dataset::list(&a.input, "img_", ".ppm")?
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(AppError::config(format!("{}: no images", a.input.display())));
    }
    fcan::ensure_dir(&a.out)?;
    let mut losses = Table::new(["image", "iter", "loss"]);
    for (i, path) in inputs.iter().enumerate() {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("image.ppm")
            .to_string();
        let image = netpbm::load_image(path)?;
        let per_image = AanConfig {
            seed: config.seed ^ ((i as u64) << 32),
            ..config.clone()
        };
        let outcome = adapt_image(&image, &style, &model, &per_image).stage(&name)?;
        netpbm::save_image(&a.out.join(&name), &outcome.image)?;
        // Rendering keeps the layout, so a source label map still applies.
        let labels = dataset::label_path_for(path);
        if labels.is_file() {
            let dest = a.out.join(labels.file_name().unwrap_or_default());
            std::fs::copy(&labels, &dest).map_err(|e| AppError::io(&dest, e))?;
        }
        for (it, l) in outcome.losses.iter().enumerate() {
            losses.push([name.clone(), it.to_string(), l.to_string()]);
        }
        log::info!(
            "{name}: loss {} -> {}",
            outcome.losses[0],
            outcome.losses[outcome.losses.len() - 1]
        );
    }
    losses.write(&a.out.join("losses.csv"))?;
    write_resolved(&a.out, "aan-adapt", &config)
}

/// Command-line overrides for every [`TrainConfig`] field.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    /// Train on full images.
    #[arg(long, conflicts_with = "crop")]
    no_crop: bool,
    #[arg(long)]
    flip: Option<bool>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_source: Option<f64>,
    #[arg(long)]
    lambda_target: Option<f64>,
    #[arg(long)]
    d_steps: Option<usize>,
    #[arg(long)]
    f_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(lr => base_lr, iters => iterations, batch_size => batch_size, flip => flip, power => power,
             momentum => momentum, weight_decay => weight_decay, lambda => lambda,
             lambda_target => lambda_target, d_steps => d_steps, f_steps => f_steps, seed => seed);
        if self.disc_lr.is_some() {
            c.disc_lr = self.disc_lr;
        }
        if self.lambda_source.is_some() {
            c.lambda_source = self.lambda_source;
        }
        if self.crop.is_some() {
            c.crop = self.crop;
        }
        if self.no_crop {
            c.crop = None;
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Labeled source split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Serialize)]
struct TrainParams<'a, B: Serialize> {
    backbone: &'a B,
    train: &'a TrainConfig,
    discriminator: Option<&'a fcan_core::ran::DiscriminatorConfig>,
}

pub fn ran_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = base_config(a.config.as_deref())?;
    let train = a.train.apply(cfg.ran.pretrain.clone());
    let source = dataset::load_samples(&a.data)?;
    let mut backbone = cfg.backbone.clone();
    backbone.init_seed = train.seed;
    let mut model = MiniFcn::new(backbone)?;
    fcan::ensure_dir(&a.out)?;
    write_resolved(
        &a.out,
        "ran-pretrain",
        &TrainParams {
            backbone: model.config(),
            train: &train,
            discriminator: None,
        },
    )?;
    let rows = pretrain_segmenter(&mut model, &source, &train).stage("pretrain")?;
    report::losses_table(&rows).write(&a.out.join("losses.csv"))?;
    checkpoint::save_backbone(&a.out.join("model"), &model, Dtype::F64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Image,
    Region,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Pretrained segmenter checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Labeled source split.
    #[arg(long)]
    source: PathBuf,
    /// Target images; labels, if present, are ignored.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Discriminator dilation rates.
    #[arg(long)]
    rates: Option<String>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    #[arg(long)]
    branch_channels: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SemisupArgs {
    #[command(flatten)]
    adapt: AdaptArgs,
    /// Labeled target split.
    #[arg(long)]
    labeled: PathBuf,
}

fn adapt_common(a: &AdaptArgs, labeled: Option<&Path>, command: &str) -> Result<()> {
    let cfg = base_config(a.config.as_deref())?;
    let mut train = a.train.apply(cfg.ran.adapt.clone());
    train.phase = Phase::Adversarial;
    let mut disc = cfg.ran.discriminator.clone();
    if let Some(r) = &a.rates {
        disc.rates = parse_list(r, "rate")?;
    }
    if let Some(g) = a.granularity {
        disc.granularity = match g {
            GranularityArg::Image => Granularity::Image,
            GranularityArg::Region => Granularity::Region,
        };
    }
    if let Some(c) = a.branch_channels {
        disc.branch_channels = c;
    }
    disc.init_seed = train.seed;
    let model = checkpoint::load_backbone(&a.model)?;
    disc.in_channels = model.config().channels[4];
    let source = dataset::load_samples(&a.source)?;
    let target = dataset::load_images(&a.target)?;
    let labeled = match labeled {
        Some(p) => dataset::load_samples(p)?,
        None => Vec::new(),
    };
    fcan::ensure_dir(&a.out)?;
    write_resolved(
        &a.out,
        command,
        &TrainParams {
            backbone: model.config(),
            train: &train,
            discriminator: Some(&disc),
        },
    )?;
    let critic = Discriminator::new(disc)?;
    let (model, critic, rows) = train_ran(model, critic, &source, &target, &labeled, &train).stage("adapt")?;
    report::losses_table(&rows).write(&a.out.join("losses.csv"))?;
    checkpoint::save_backbone(&a.out.join("model"), &model, Dtype::F64)?;
    checkpoint::save_discriminator(&a.out.join("discriminator"), &critic, Dtype::F64)
}

pub fn ran_adapt(a: AdaptArgs) -> Result<()> {
    adapt_common(&a, None, "ran-adapt")
}

pub fn ran_semisup(a: SemisupArgs) -> Result<()> {
    adapt_common(&a.adapt, Some(&a.labeled), "ran-semisup")
}

#[derive(Debug, Args)]
pub struct AbnArgs {
    #[arg(long)]
    model: PathBuf,
    /// Target images whose statistics replace the stored ones.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn abn(a: AbnArgs) -> Result<()> {
    let model = checkpoint::load_backbone(&a.model)?;
    let images = dataset::load_images(&a.images)?;
    let adapted = adapt_bn_stats(&model, &images).stage("abn")?;
    checkpoint::save_backbone(&a.out, &adapted, Dtype::F64)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions: lbl_*.pgm label maps or scores_*.fct class scores.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pred: Option<PathBuf>,
    /// Segment the images of --gt with this checkpoint instead.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Ground-truth split.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    classes: usize,
    /// Inference scales for --model.
    #[arg(long, default_value = "1.0")]
    scales: String,
    /// With --model, also write per-image label maps and scores here.
    #[arg(long)]
    save_pred: Option<PathBuf>,
    /// Where iou.csv goes; defaults to the prediction directory, or --gt.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn scores_name(label_name: &str) -> String {
    label_name.replace("lbl_", "scores_").replace(".pgm", ".fct")
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.classes < 2 || a.classes > 255 {
        return Err(AppError::config("--classes must be in 2..=255"));
    }
    let gt = dataset::load_label_maps(&a.gt)?;
    if gt.is_empty() {
        return Err(AppError::config(format!("{}: no lbl_*.pgm files", a.gt.display())));
    }
    let mut cm = ConfusionMatrix::new(a.classes);
    let predictions: Vec<LabelMap> = match (&a.pred, &a.model) {
        (Some(dir), _) => gt
            .iter()
            .map(|(name, _)| {
                let lbl = dir.join(name);
                if lbl.exists() {
                    netpbm::load_labels(&lbl)
                } else {
                    Ok(argmax(&fct::load(&dir.join(scores_name(name)))?)?)
                }
            })
            .collect::<Result<_>>()?,
        (None, Some(model)) => {
            let model = checkpoint::load_backbone(model)?;
            let scales: Vec<f64> = parse_list(&a.scales, "scale")?;
            if let Some(d) = &a.save_pred {
                fcan::ensure_dir(d)?;
            }
            let mut out = Vec::with_capacity(gt.len());
            for (name, _) in &gt {
                let img = netpbm::load_image(&a.gt.join(name.replace("lbl_", "img_").replace(".pgm", ".ppm")))?;
                let ms = multiscale_infer(&model, &img, &scales).stage(name)?;
                for s in &ms.skipped {
                    log::warn!("{name}: scale {s} skipped");
                }
                let pred = argmax(&ms.probs)?;
                if let Some(d) = &a.save_pred {
                    netpbm::save_labels(&d.join(name), &pred)?;
                    fct::save(&d.join(scores_name(name)), &ms.probs, Dtype::F32)?;
                }
                out.push(pred);
            }
            out
        }
        (None, None) => unreachable!("clap requires --pred or --model"),
    };
    for ((name, g), p) in gt.iter().zip(&predictions) {
        cm.add(p, g).map_err(|e| AppError::config(format!("{name}: {e}")))?;
    }
    let out = a
        .out
        .clone()
        .or_else(|| a.pred.clone())
        .or_else(|| a.save_pred.clone())
        .unwrap_or_else(|| a.gt.clone());
    fcan::ensure_dir(&out)?;
    let report = iou_report(&cm);
    report::iou_table(&report).write(&out.join("iou.csv"))?;
    log::info!("mIoU {}", report.miou_or_zero());
    Ok(())
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Comma-separated FCT1 score maps of identical shape.
    #[arg(long)]
    inputs: String,
    #[arg(long)]
    out: PathBuf,
    /// Store the result as f32.
    #[arg(long)]
    f32: bool,
}

pub fn fuse(a: FuseArgs) -> Result<()> {
    let maps = a
        .inputs
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|p| fct::load(Path::new(p)))
        .collect::<Result<Vec<_>>>()?;
    if maps.is_empty() {
        return Err(AppError::config("--inputs is empty"));
    }
    let fused = fuse_scores(&maps)?;
    fct::save(&a.out, &fused, if a.f32 { Dtype::F32 } else { Dtype::F64 })
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; the config seed if omitted.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated rungs (fcn, abn, ada, conv, aspp, fcan); all if omitted.
    #[arg(long)]
    rungs: Option<String>,
    /// AAN setting of the FCAN rung: best-single, src-tar, src-tar-ada,
    /// src-ada-tar, src-ada-tar-ada or fusion.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    multiscale: bool,
    /// Also train the domain probe after the FCAN rung.
    #[arg(long)]
    probe: bool,
    /// Also sweep the labeled-target counts on the first seed.
    #[arg(long)]
    semisup: bool,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if let Some(p) = &a.preset {
        cfg.aan.setting = AanSetting::parse(p).ok_or_else(|| AppError::config(format!("unknown preset {p:?}")))?;
    }
    if a.multiscale {
        cfg.eval.multiscale = true;
    }
    let seeds = match &a.seeds {
        Some(s) => parse_list(s, "seed")?,
        None => vec![cfg.seed],
    };
    if seeds.is_empty() {
        return Err(AppError::config("--seeds is empty"));
    }
    let rungs = match &a.rungs {
        Some(r) => r
            .split(',')
            .map(|t| {
                serde_json::from_value::<Preset>(serde_json::Value::String(t.trim().to_lowercase()))
                    .map_err(|_| AppError::config(format!("unknown rung {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => Preset::ALL.to_vec(),
    };
    let cfg = cfg.with_seed(seeds[0]);
    let out = cfg.output_dir.clone();
    let report = pipeline::run_ablation(&cfg, &seeds, &rungs, a.probe, &out)?;
    for (p, row) in report.presets.iter().zip(&report.miou) {
        let cells: Vec<String> = row.iter().map(|v| v.map(report::percent).unwrap_or_default()).collect();
        log::info!("{:>6}: {}", p.label(), cells.join(" "));
    }
    if a.semisup {
        let mut bench = Benchmark::prepare(cfg.clone()).stage("semisup")?;
        let counts = cfg.ran.labeled_target.clone();
        let rows = bench.semisup(&counts)?;
        let mut t = Table::new(["labeled_target", "miou"]);
        for (n, r) in rows {
            t.push([n.to_string(), report::percent(r.miou_or_zero())]);
        }
        t.write(&out.join("semisup.csv"))?;
    }
    Ok(())
}
