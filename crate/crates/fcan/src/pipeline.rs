//! The synthetic benchmark: data, source pretraining, BN adaptation,
//! appearance rendering, adversarial adaptation, evaluation and the
//! domain-confusion probe.

use std::path::Path;

use fcan_core::aan::{adapt_image, domain_style, AanConfig, DomainStyle};
use fcan_core::backbone::{adapt_bn_stats, MiniFcn};
use fcan_core::data::{crop_image, gen_set, Domain, Sample};
use fcan_core::eval::{argmax, fuse_scores, iou_report, multiscale_infer, ConfusionMatrix, IoUReport};
use fcan_core::ran::{
    last_stage_features, pretrain_segmenter, probe_domain_accuracy, train_ran, Discriminator, DiscriminatorConfig,
    LossRow, Preset,
};
use fcan_core::{rng, Tensor};
use rand::Rng;

use crate::config::{AanSetting, PipelineConfig};
use crate::error::{AppError, Result, StageExt};
use crate::report::{self, Table};

/// Scene indices of each split, far enough apart never to overlap.
pub const SOURCE_FIRST: u64 = 0;
pub const TARGET_FIRST: u64 = 1 << 20;
pub const VAL_FIRST: u64 = 2 << 20;
pub const PROBE_SOURCE_FIRST: u64 = 3 << 20;
pub const PROBE_TARGET_FIRST: u64 = 4 << 20;

const STYLE_STREAM: u64 = 0x5717;
const RENDER_STREAM: u64 = 0x4E0;

pub struct Datasets {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub target_images: Vec<Tensor>,
    pub target_val: Vec<Sample>,
}

impl Datasets {
    pub fn generate(config: &PipelineConfig) -> Result<Self> {
        let d = &config.data;
        let target = gen_set(&d.scene, Domain::Target, TARGET_FIRST, d.target_train)?;
        Ok(Datasets {
            source: gen_set(&d.scene, Domain::Source, SOURCE_FIRST, d.source_train)?,
            target_images: target.iter().map(|s| s.image.clone()).collect(),
            target,
            target_val: gen_set(&d.scene, Domain::Target, VAL_FIRST, d.target_val)?,
        })
    }
}

pub fn pretrain(config: &PipelineConfig, source: &[Sample]) -> Result<(MiniFcn, Vec<LossRow>)> {
    let mut model = MiniFcn::new(config.backbone.clone())?;
    let rows = pretrain_segmenter(&mut model, source, &config.ran.pretrain)?;
    Ok((model, rows))
}

/// A segmenter after adversarial training.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub setting: AanSetting,
    /// Weights and source running statistics straight out of training.
    pub raw: MiniFcn,
    /// `raw` with BN statistics recomputed on the (possibly rendered) target.
    pub deployed: MiniFcn,
    pub critic: Discriminator,
    pub losses: Vec<LossRow>,
}

#[derive(Debug, Clone)]
pub struct PresetResult {
    pub preset: Preset,
    pub report: IoUReport,
    pub adapted: Vec<Adapted>,
}

impl PresetResult {
    pub fn miou(&self) -> f64 {
        self.report.miou_or_zero()
    }
}

/// Probe domain accuracy on features before and after adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub pre: f64,
    pub post: f64,
}

struct TargetAda {
    train: Vec<Tensor>,
    val: Vec<Sample>,
}

/// One seed of the benchmark, sharing the pretrained segmenter and the
/// rendered images across every rung that needs them.
pub struct Benchmark {
    pub config: PipelineConfig,
    pub data: Datasets,
    pub fcn: MiniFcn,
    pub pretrain_losses: Vec<LossRow>,
    source_ada: Option<Vec<Sample>>,
    target_ada: Option<TargetAda>,
}

impl Benchmark {
    /// Generates data and pretrains the source-only segmenter.
    pub fn prepare(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let data = Datasets::generate(&config).stage("data")?;
        log::info!(
            "seed {}: pretraining on {} source images",
            config.seed,
            data.source.len()
        );
        let (fcn, losses) = pretrain(&config, &data.source).stage("pretrain")?;
        Ok(Benchmark::with_model(config, data, fcn, losses))
    }

    pub fn with_model(config: PipelineConfig, data: Datasets, fcn: MiniFcn, pretrain_losses: Vec<LossRow>) -> Self {
        Benchmark {
            config,
            data,
            fcn,
            pretrain_losses,
            source_ada: None,
            target_ada: None,
        }
    }

    pub fn abn_images(&self) -> &[Tensor] {
        &self.data.target_images[..self.config.data.abn_images]
    }

    fn scales(&self) -> &[f64] {
        if self.config.eval.multiscale {
            &self.config.eval.scales
        } else {
            &[1.0]
        }
    }

    /// Class probabilities for one image under the configured scales.
    pub fn probs(&self, model: &MiniFcn, image: &Tensor) -> Result<Tensor> {
        let ms = multiscale_infer(model, image, self.scales())?;
        for s in &ms.skipped {
            log::warn!("scale {s} skipped: resized image too small");
        }
        Ok(ms.probs)
    }

    /// Scores the late fusion of several models, each on its own rendering
    /// of the same validation scenes.
    pub fn evaluate_views(&self, views: &[(&MiniFcn, &[Sample])]) -> Result<IoUReport> {
        let Some(&(_, first)) = views.first() else {
            return Err(AppError::config("nothing to evaluate"));
        };
        if views.iter().any(|(_, v)| v.len() != first.len()) {
            return Err(AppError::config("fused views differ in length"));
        }
        let mut cm = ConfusionMatrix::new(self.config.backbone.num_classes);
        for (i, gt) in first.iter().enumerate() {
            let mut maps = views
                .iter()
                .map(|(m, v)| self.probs(m, &v[i].image))
                .collect::<Result<Vec<_>>>()?;
            let fused = if maps.len() == 1 {
                maps.pop().expect("one map")
            } else {
                fuse_scores(&maps)?
            };
            cm.add(&argmax(&fused)?, &gt.labels)?;
        }
        Ok(iou_report(&cm))
    }

    pub fn evaluate(&self, model: &MiniFcn) -> Result<IoUReport> {
        self.evaluate_views(&[(model, &self.data.target_val)])
    }

    /// Validation scenes as a model trained under `setting` sees them.
    pub fn val_for(&self, setting: AanSetting) -> &[Sample] {
        match (&self.target_ada, setting.adapts_target()) {
            (Some(t), true) => &t.val,
            _ => &self.data.target_val,
        }
    }

    fn render_config(&self, i: usize) -> AanConfig {
        let base = &self.config.aan.render;
        AanConfig {
            seed: base.seed ^ ((i as u64) << 32),
            ..base.clone()
        }
    }

    /// Averaged Gram statistics of random crops from the first images of a pool.
    fn style_of(&self, pool: &[Tensor], stream: u64) -> Result<DomainStyle> {
        let a = &self.config.aan;
        let mut r = rng::derived(self.config.seed, STYLE_STREAM + stream);
        let crops = pool[..a.style_images]
            .iter()
            .map(|img| random_crop(&mut r, img, a.crop).map(|(c, _, _)| c))
            .collect::<Result<Vec<_>>>()?;
        let layers: Vec<_> = a.render.style_weights.active().into_iter().map(|(l, _)| l).collect();
        Ok(domain_style(&crops, &self.fcn, &layers)?)
    }

    fn render(&self, image: &Tensor, style: &DomainStyle, i: usize) -> Result<Tensor> {
        let out = adapt_image(image, style, &self.fcn, &self.render_config(i))?;
        if out.skipped > 0 {
            log::warn!("render {i}: {} steps skipped on a vanishing gradient", out.skipped);
        }
        Ok(out.image)
    }

    /// Source crops rendered in the target style, mixed with the originals.
    fn ensure_source_adapted(&mut self) -> Result<()> {
        if self.source_ada.is_some() {
            return Ok(());
        }
        let a = &self.config.aan;
        log::info!(
            "seed {}: rendering {} source crops in the target style",
            self.config.seed,
            a.renders
        );
        let style = self.style_of(&self.data.target_images, 1)?;
        let mut r = rng::derived(self.config.seed, RENDER_STREAM);
        let mut out = Vec::with_capacity(a.renders + self.data.source.len());
        for i in 0..a.renders {
            let s = &self.data.source[i % self.data.source.len()];
            let (crop, y0, x0) = random_crop(&mut r, &s.image, a.crop)?;
            out.push(Sample {
                image: self.render(&crop, &style, i)?,
                labels: s.labels.crop(y0, x0, a.crop, a.crop),
            });
        }
        out.extend(self.data.source.iter().cloned());
        self.source_ada = Some(out);
        Ok(())
    }

    /// Target crops and validation scenes rendered in the source style.
    fn ensure_target_adapted(&mut self) -> Result<()> {
        if self.target_ada.is_some() {
            return Ok(());
        }
        let a = &self.config.aan;
        log::info!(
            "seed {}: rendering {} target crops and {} validation scenes in the source style",
            self.config.seed,
            a.renders,
            self.data.target_val.len()
        );
        let source_images: Vec<Tensor> = self.data.source.iter().map(|s| s.image.clone()).collect();
        let style = self.style_of(&source_images, 2)?;
        let mut r = rng::derived(self.config.seed, RENDER_STREAM + 1);
        let mut train = Vec::with_capacity(a.renders);
        for i in 0..a.renders {
            let img = &self.data.target_images[i % self.data.target_images.len()];
            let (crop, _, _) = random_crop(&mut r, img, a.crop)?;
            train.push(self.render(&crop, &style, a.renders + i)?);
        }
        let mut val = Vec::with_capacity(self.data.target_val.len());
        for (i, s) in self.data.target_val.iter().enumerate() {
            val.push(Sample {
                image: self.render(&s.image, &style, 2 * a.renders + i)?,
                labels: s.labels.clone(),
            });
        }
        self.target_ada = Some(TargetAda { train, val });
        Ok(())
    }

    /// Adversarially adapts the pretrained segmenter under one AAN setting,
    /// with the first `labeled` target training images supervised.
    pub fn adapt(&mut self, setting: AanSetting, disc: DiscriminatorConfig, labeled: usize) -> Result<Adapted> {
        if setting == AanSetting::Fusion {
            return Err(AppError::config("fusion is not a single training setting"));
        }
        if labeled > self.data.target.len() {
            return Err(AppError::config("more labeled target images than target images"));
        }
        if setting.adapts_source() {
            self.ensure_source_adapted().stage("aan render (source)")?;
        }
        if setting.adapts_target() {
            self.ensure_target_adapted().stage("aan render (target)")?;
        }
        let source = match &self.source_ada {
            Some(s) if setting.adapts_source() => s.as_slice(),
            _ => &self.data.source,
        };
        let target = match &self.target_ada {
            Some(t) if setting.adapts_target() => t.train.as_slice(),
            _ => &self.data.target_images,
        };
        log::info!(
            "seed {}: adversarial training, {} with {:?} discriminator rates {:?}, {labeled} labeled target",
            self.config.seed,
            setting.label(),
            disc.granularity,
            disc.rates
        );
        let critic = Discriminator::new(disc).stage("adapt")?;
        let (raw, critic, losses) = train_ran(
            self.fcn.clone(),
            critic,
            source,
            target,
            &self.data.target[..labeled],
            &self.config.ran.adapt,
        )
        .stage("adapt")?;
        let abn = if setting.adapts_target() {
            target
        } else {
            self.abn_images()
        };
        let deployed = adapt_bn_stats(&raw, abn).stage("abn")?;
        Ok(Adapted {
            setting,
            raw,
            deployed,
            critic,
            losses,
        })
    }

    /// Trains and scores one rung of the ablation ladder.
    pub fn run_preset(&mut self, preset: Preset) -> Result<PresetResult> {
        self.run_preset_inner(preset).stage(preset.label())
    }

    fn run_preset_inner(&mut self, preset: Preset) -> Result<PresetResult> {
        let result = |report, adapted| PresetResult {
            preset,
            report,
            adapted,
        };
        let Some(disc) = preset.discriminator(&self.config.ran.discriminator) else {
            let model = if preset.uses_abn() {
                adapt_bn_stats(&self.fcn, self.abn_images()).stage("abn")?
            } else {
                self.fcn.clone()
            };
            return Ok(result(self.evaluate(&model).stage("eval")?, Vec::new()));
        };
        let settings: Vec<AanSetting> = match (preset.uses_aan(), self.config.aan.setting) {
            (false, _) => vec![AanSetting::SrcTar],
            (true, AanSetting::Fusion) => AanSetting::SINGLES.to_vec(),
            (true, s) => vec![s],
        };
        let mut adapted = Vec::with_capacity(settings.len());
        for s in settings {
            adapted.push(self.adapt(s, disc.clone(), 0)?);
        }
        let views: Vec<(&MiniFcn, &[Sample])> =
            adapted.iter().map(|a| (&a.deployed, self.val_for(a.setting))).collect();
        let report = self.evaluate_views(&views).stage("eval")?;
        Ok(result(report, adapted))
    }

    /// Trains a fresh probe on frozen last-stage features of held-out scenes.
    ///
    /// Before adaptation the probe sees the source-trained segmenter as
    /// deployed, with source statistics on both domains. After adaptation it
    /// sees the adapted segmenter with each domain normalized by its own
    /// statistics, as each domain is served at test time.
    pub fn probe(&self, adapted: &Adapted) -> Result<ProbeReport> {
        self.probe_inner(adapted).stage("probe")
    }

    fn probe_inner(&self, adapted: &Adapted) -> Result<ProbeReport> {
        let cfg = &self.config;
        let n = cfg.ran.probe_images;
        let images = |domain, first| -> Result<Vec<Tensor>> {
            Ok(gen_set(&cfg.data.scene, domain, first, n)?
                .into_iter()
                .map(|s| s.image)
                .collect())
        };
        let src = images(Domain::Source, PROBE_SOURCE_FIRST)?;
        let tgt = images(Domain::Target, PROBE_TARGET_FIRST)?;
        let accuracy = |s: &MiniFcn, t: &MiniFcn| -> Result<f64> {
            let probe = Discriminator::new(cfg.ran.probe_discriminator.clone())?;
            Ok(probe_domain_accuracy(
                &last_stage_features(s, &src)?,
                &last_stage_features(t, &tgt)?,
                probe,
                &cfg.ran.probe,
            )?)
        };
        let pre = accuracy(&self.fcn, &self.fcn)?;
        let post_s = adapt_bn_stats(&adapted.raw, &src)?;
        let post_t = adapt_bn_stats(&adapted.raw, &tgt)?;
        let post = accuracy(&post_s, &post_t)?;
        Ok(ProbeReport { pre, post })
    }

    /// Target mIoU of the full model for each labeled-target count.
    pub fn semisup(&mut self, counts: &[usize]) -> Result<Vec<(usize, IoUReport)>> {
        let disc = Preset::Fcan
            .discriminator(&self.config.ran.discriminator)
            .expect("FCAN trains adversarially");
        let setting = match self.config.aan.setting {
            AanSetting::Fusion => AanSetting::BEST_SINGLE,
            s => s,
        };
        let mut out = Vec::with_capacity(counts.len());
        for &n in counts {
            let stage = format!("semisup ({n} labeled)");
            let adapted = self.adapt(setting, disc.clone(), n).stage(&stage)?;
            let report = self
                .evaluate_views(&[(&adapted.deployed, self.val_for(setting))])
                .stage(&stage)?;
            out.push((n, report));
        }
        Ok(out)
    }
}

fn random_crop(r: &mut rng::Rng, image: &Tensor, side: usize) -> Result<(Tensor, usize, usize)> {
    let &[_, h, w] = image.shape() else {
        return Err(AppError::config("expected [3,H,W] images"));
    };
    if side > h || side > w {
        return Err(AppError::config(format!("crop {side} exceeds image {h}x{w}")));
    }
    let y0 = r.gen_range(0..=h - side);
    let x0 = r.gen_range(0..=w - side);
    Ok((crop_image(image, y0, x0, side, side)?, y0, x0))
}

/// Per-preset mIoU over a set of seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub presets: Vec<Preset>,
    /// `miou[p][s]` for preset `p` and seed `s`; `None` if not run.
    pub miou: Vec<Vec<Option<f64>>>,
    pub probes: Vec<(u64, ProbeReport)>,
}

impl AblationReport {
    pub fn new(seeds: Vec<u64>, presets: Vec<Preset>) -> Self {
        let miou = vec![vec![None; seeds.len()]; presets.len()];
        AblationReport {
            seeds,
            presets,
            miou,
            probes: Vec::new(),
        }
    }

    pub fn get(&self, preset: Preset, seed: u64) -> Option<f64> {
        let p = self.presets.iter().position(|&q| q == preset)?;
        let s = self.seeds.iter().position(|&q| q == seed)?;
        self.miou[p][s]
    }

    /// `preset, seed_<s>..., mean, reference_miou`, in percent.
    pub fn table(&self) -> Table {
        let mut header = vec!["preset".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        header.extend(["mean".to_string(), "reference_miou".to_string()]);
        let mut t = Table::new(header);
        for (p, row) in self.presets.iter().zip(&self.miou) {
            let mut cells = vec![p.label().to_string()];
            cells.extend(row.iter().map(|v| v.map(report::percent).unwrap_or_default()));
            let done: Vec<f64> = row.iter().flatten().copied().collect();
            let mean = if done.len() == row.len() {
                report::percent(done.iter().sum::<f64>() / done.len() as f64)
            } else {
                String::new()
            };
            cells.push(mean);
            cells.push(format!("{:.2}", p.reference_miou()));
            t.push(cells);
        }
        t
    }

    pub fn probe_table(&self) -> Table {
        let mut t = Table::new(["seed", "pre", "post"]);
        for (s, p) in &self.probes {
            t.push([s.to_string(), p.pre.to_string(), p.post.to_string()]);
        }
        t
    }
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const PROBE_CSV: &str = "probe.csv";

/// Runs the ladder for every seed, rewriting `ablation.csv` in `out` after
/// each rung so a failure leaves the finished rows behind.
pub fn run_ablation(
    config: &PipelineConfig,
    seeds: &[u64],
    presets: &[Preset],
    probe: bool,
    out: &Path,
) -> Result<AblationReport> {
    crate::ensure_dir(out)?;
    config.validate()?;
    config.write_resolved(out)?;
    let mut report = AblationReport::new(seeds.to_vec(), presets.to_vec());
    report.table().write(&out.join(ABLATION_CSV))?;
    for (si, &seed) in seeds.iter().enumerate() {
        let tag = format!("seed {seed}");
        let mut bench = Benchmark::prepare(config.clone().with_seed(seed)).stage(&tag)?;
        crate::report::losses_table(&bench.pretrain_losses)
            .write(&out.join(format!("losses_pretrain_seed{seed}.csv")))?;
        for (pi, &preset) in presets.iter().enumerate() {
            let result = bench.run_preset(preset).stage(&tag)?;
            log::info!("{tag}: {} mIoU {}", preset.label(), report::percent(result.miou()));
            report.miou[pi][si] = Some(result.miou());
            report.table().write(&out.join(ABLATION_CSV))?;
            if probe && preset == Preset::Fcan {
                if let Some(a) = result.adapted.iter().find(|a| !a.setting.adapts_target()) {
                    let p = bench.probe(a).stage(&tag)?;
                    report.probes.push((seed, p));
                    report.probe_table().write(&out.join(PROBE_CSV))?;
                }
            }
        }
    }
    Ok(report)
}
