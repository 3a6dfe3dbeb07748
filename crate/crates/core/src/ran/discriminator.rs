use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Grads, Result, Tape, Tensor, Var};

/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before the log.
pub const SCORE_EPS: f64 = 1e-7;

/// Whether the discriminator judges whole images or each region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Features are globally averaged first, giving one score per image.
    Image,
    /// One score per spatial unit of the feature map.
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Channels per atrous branch.
    pub branch_channels: usize,
    /// Dilation rate of each parallel 3×3 branch.
    pub rates: Vec<usize>,
    pub granularity: Granularity,
    pub init_seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 128,
            branch_channels: 128,
            rates: vec![1, 2, 3, 4],
            granularity: Granularity::Region,
            init_seed: 1,
        }
    }
}

/// Atrous spatial pyramid domain discriminator.
///
/// `k` parallel dilated 3×3 convolutions (same padding, ReLU) over the input
/// features, concatenated to `c·k` channels, fused by a 1×1 convolution to a
/// single channel and squashed by a sigmoid. Outputs near 1 mean "target".
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    branches: Vec<(Tensor, Tensor)>,
    fuse_weight: Tensor,
    fuse_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct BoundDiscriminator {
    vars: Vec<Var>,
}

impl BoundDiscriminator {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.rates.is_empty() || config.rates.contains(&0) {
            return Err(Error::invalid("discriminator", "need at least one positive rate"));
        }
        if config.in_channels == 0 || config.branch_channels == 0 {
            return Err(Error::invalid("discriminator", "channel counts must be positive"));
        }
        let mut r = rng::derived(config.init_seed, 0xD15C);
        let (c_in, c) = (config.in_channels, config.branch_channels);
        let branch_std = libm::sqrt(2.0 / (c_in * 9) as f64);
        let bn = Normal::new(0.0, branch_std).expect("finite std");
        let branches = config
            .rates
            .iter()
            .map(|_| {
                (
                    Tensor::from_fn([c, c_in, 3, 3], |_| bn.sample(&mut r)).with_requires_grad(true),
                    Tensor::zeros([c]).with_requires_grad(true),
                )
            })
            .collect();
        let fan = c * config.rates.len();
        let fnorm = Normal::new(0.0, libm::sqrt(1.0 / fan as f64)).expect("finite std");
        let fuse_weight = Tensor::from_fn([1, fan, 1, 1], |_| fnorm.sample(&mut r)).with_requires_grad(true);
        Ok(Discriminator {
            config,
            branches,
            fuse_weight,
            fuse_bias: Tensor::zeros([1]).with_requires_grad(true),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = Vec::new();
        for (w, b) in &self.branches {
            p.extend([w, b]);
        }
        p.extend([&self.fuse_weight, &self.fuse_bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = Vec::new();
        for (w, b) in &mut self.branches {
            p.extend([w, b]);
        }
        p.extend([&mut self.fuse_weight, &mut self.fuse_bias]);
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for r in &self.config.rates {
            names.push(alloc::format!("aspp.rate{r}.weight"));
            names.push(alloc::format!("aspp.rate{r}.bias"));
        }
        names.push("fuse.weight".into());
        names.push("fuse.bias".into());
        names
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator {
        let vars = self
            .params()
            .into_iter()
            .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
            .collect();
        BoundDiscriminator { vars }
    }

    pub fn accumulate_grads(&mut self, bound: &BoundDiscriminator, grads: &Grads) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&bound.vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    /// Domain probabilities for `features` (`[C,H,W]` or `[N,C,H,W]`).
    pub fn forward(&self, tape: &mut Tape, bound: &BoundDiscriminator, features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        let channels = shape[shape.len().saturating_sub(3)];
        if shape.len() < 3 || channels != self.config.in_channels {
            return Err(Error::shape("discriminate", &shape, &[self.config.in_channels]));
        }
        let input = match self.config.granularity {
            Granularity::Image => tape.adaptive_avg_pool(features, 1)?,
            Granularity::Region => features,
        };
        let mut outs = Vec::with_capacity(self.config.rates.len());
        for (i, &rate) in self.config.rates.iter().enumerate() {
            let conv = tape.conv2d(input, bound.vars[2 * i], Some(bound.vars[2 * i + 1]), 1, rate, rate)?;
            outs.push(tape.relu(conv));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_channels(&outs)?
        };
        let n = bound.vars.len();
        let fused = tape.conv2d(cat, bound.vars[n - 2], Some(bound.vars[n - 1]), 1, 0, 1)?;
        Ok(tape.sigmoid(fused))
    }

    /// Response of a single atrous branch before its ReLU, for inspection.
    pub fn branch_response(&self, branch: usize, features: &Tensor) -> Result<Tensor> {
        let (w, b) = self
            .branches
            .get(branch)
            .ok_or_else(|| Error::invalid("branch_response", "no such branch"))?;
        let rate = self.config.rates[branch];
        crate::ops::conv2d_bias(features, w, b, 1, rate, rate)
    }

    pub fn branch_mut(&mut self, branch: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        self.branches.get_mut(branch).map(|(w, b)| (w, b))
    }

    pub fn fuse_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.fuse_weight, &mut self.fuse_bias)
    }
}

/// Per-region target-domain probabilities for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainScoreMap {
    values: Tensor,
}

impl DomainScoreMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != 1 {
            return Err(Error::invalid("domain_score_map", "expected [1,H,W]"));
        }
        Ok(DomainScoreMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Number of spatial units.
    pub fn units(&self) -> usize {
        self.values.numel()
    }
}

/// Scores one `[C,H',W']` feature map.
pub fn discriminate(disc: &Discriminator, features: &Tensor) -> Result<DomainScoreMap> {
    if features.rank() != 3 {
        return Err(Error::invalid("discriminate", "expected [C,H,W] features"));
    }
    let mut tape = Tape::new();
    let bound = disc.bind(&mut tape, false);
    let f = tape.constant(features);
    let s = disc.forward(&mut tape, &bound, f)?;
    DomainScoreMap::new(tape.tensor(s))
}

/// `-mean log D(target) - mean log(1 - D(source))` on the tape; each mean
/// runs over its own map's units (and batch).
pub fn adversarial_loss_on(tape: &mut Tape, scores_s: Var, scores_t: Var) -> Result<(Var, usize)> {
    let (lt, st) = tape.log_loss(scores_t, true, SCORE_EPS);
    let (ls, ss) = tape.log_loss(scores_s, false, SCORE_EPS);
    let total = tape.add(lt, ls)?;
    Ok((total, st.clamped + ss.clamped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLoss {
    pub value: f64,
    /// Scores clamped away from exactly 0 or 1.
    pub clamped: usize,
}

pub fn adversarial_loss(scores_s: &DomainScoreMap, scores_t: &DomainScoreMap) -> Result<AdversarialLoss> {
    let mut tape = Tape::new();
    let s = tape.constant(&scores_s.values);
    let t = tape.constant(&scores_t.values);
    let (l, clamped) = adversarial_loss_on(&mut tape, s, t)?;
    Ok(AdversarialLoss {
        value: tape.scalar(l),
        clamped,
    })
}
