//! End-to-end optimization of encoder, scale predictor, message passing and
//! decoder against the frozen loss network.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::{PipelineConfig, Selection, TrainConfig};
use crate::error::{Error, Result};
use crate::feature_codec::{extract_loss_features, LossNetwork, CONTENT_TAG};
use crate::global_refine::{channel_stats, ChannelStats};
use crate::objective::{loss_terms_var, total_var, LossBreakdown, LossTargets};
use crate::params::{ModelParameters, ParamScope};
use crate::pipeline::forward_var;
use crate::rng::named_rng;
use crate::tensor::{ImageTensor, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient; others are untouched.
    pub fn update(&mut self, params: &mut ModelParameters, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "gradient",
                    crate::tensor::ShapeFmt(p.shape()),
                    crate::tensor::ShapeFmt(g.shape()),
                ));
            }
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| alloc::vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| alloc::vec![0.0; n]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.learning_rate * (mhat / (libm::sqrt(vhat) + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// One content/style pair with its cached loss targets.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub content: &'a ImageTensor,
    pub style: &'a ImageTensor,
    pub targets: LossTargets,
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    params: &ModelParameters,
    net: &LossNetwork,
    sample: &Sample<'_>,
    cfg: &PipelineConfig,
    lambda: f64,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let mut scope = ParamScope::trainable(params);
    let c = tape.constant(sample.content.tensor().clone());
    let s = tape.constant(sample.style.tensor().clone());
    let trace = forward_var(&mut tape, &mut scope, c, s, cfg)?;
    let (lc, ls) = loss_terms_var(&mut tape, net, trace.output, &sample.targets)?;
    let total = total_var(&mut tape, lc, ls, lambda)?;
    let breakdown = LossBreakdown::new(tape.value(lc).data()[0], tape.value(ls).data()[0], lambda);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss content={} style={} total={}",
            breakdown.content, breakdown.style, breakdown.total
        )));
    }
    let mut grads = tape.backward(total)?;
    let mut out = BTreeMap::new();
    for (name, var) in scope.bound() {
        if let Some(g) = grads.take(var) {
            out.insert(name.to_string(), g);
        }
    }
    Ok((breakdown, out))
}

/// Loss-network targets cached per dataset image.
#[derive(Clone, Debug)]
struct TargetCache {
    content: Vec<Tensor>,
    style: Vec<BTreeMap<String, ChannelStats>>,
}

impl TargetCache {
    fn new(content: &[ImageTensor], style: &[ImageTensor], net: &LossNetwork) -> Result<Self> {
        let content = content
            .iter()
            .map(|img| {
                let f = extract_loss_features(img, net)?;
                f.get(CONTENT_TAG)
                    .map(|m| m.tensor().clone())
                    .ok_or_else(|| Error::MissingParameter(CONTENT_TAG.into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let style = style
            .iter()
            .map(|img| {
                let f = extract_loss_features(img, net)?;
                Ok(f.per_layer.iter().map(|(k, v)| (k.clone(), channel_stats(v))).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { content, style })
    }

    fn targets(&self, ci: usize, si: usize) -> LossTargets {
        LossTargets {
            content: self.content[ci].clone(),
            style: self.style[si].clone(),
        }
    }
}

/// Mean loss of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// Training state over an in-memory dataset.
pub struct Trainer {
    params: ModelParameters,
    net: LossNetwork,
    optimizer: Adam,
    config: TrainConfig,
    pipeline: PipelineConfig,
    content: Vec<ImageTensor>,
    style: Vec<ImageTensor>,
    cache: TargetCache,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    /// Pipeline selection is forced to [`Selection::Soft`] so the scale
    /// predictor receives gradients.
    pub fn new(
        params: ModelParameters,
        net: LossNetwork,
        config: TrainConfig,
        pipeline: PipelineConfig,
        content: Vec<ImageTensor>,
        style: Vec<ImageTensor>,
    ) -> Result<Self> {
        config.validate()?;
        pipeline.validate()?;
        if content.is_empty() || style.is_empty() {
            return Err(Error::Config(format!(
                "training needs content and style images (got {} and {})",
                content.len(),
                style.len()
            )));
        }
        let cache = TargetCache::new(&content, &style, &net)?;
        Ok(Self {
            optimizer: Adam::new(config.learning_rate, config.weight_decay),
            rng: named_rng(config.seed, "pairs"),
            pipeline: PipelineConfig {
                selection: Selection::Soft,
                ..pipeline
            },
            params,
            net,
            config,
            content,
            style,
            cache,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn into_params(self) -> ModelParameters {
        self.params
    }

    pub fn loss_network(&self) -> &LossNetwork {
        &self.net
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Independent uniform content and style indices for one batch.
    fn draw_batch(&mut self) -> Vec<(usize, usize)> {
        (0..self.config.batch_size)
            .map(|_| {
                (
                    self.rng.gen_range(0..self.content.len()),
                    self.rng.gen_range(0..self.style.len()),
                )
            })
            .collect()
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.draw_batch();
        let n = batch.len() as f64;
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut lc, mut ls) = (0.0, 0.0);
        for &(ci, si) in &batch {
            let sample = Sample {
                content: &self.content[ci],
                style: &self.style[si],
                targets: self.cache.targets(ci, si),
            };
            let (loss, grads) = sample_gradients(&self.params, &self.net, &sample, &self.pipeline, self.config.lambda)
                .map_err(|e| self.diagnose(e, ci, si))?;
            lc += loss.content;
            ls += loss.style;
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        for (name, g) in &mut sum {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}` at iteration {}",
                    self.iteration + 1
                )));
            }
        }
        self.optimizer.update(&mut self.params, &sum)?;
        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            loss: LossBreakdown::new(lc / n, ls / n, self.config.lambda),
        })
    }

    fn diagnose(&self, e: Error, ci: usize, si: usize) -> Error {
        match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg} at iteration {} (content image {ci}, style image {si}); parameter ranges: {}",
                self.iteration + 1,
                self.param_summary()
            )),
            other => other,
        }
    }

    fn param_summary(&self) -> String {
        let mut parts = Vec::new();
        for (name, t) in self.params.iter() {
            let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            parts.push(format!("{name}: max|w|={max:.3e}"));
        }
        parts.join(", ")
    }

    /// Runs the configured number of iterations, reporting every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        while self.iteration < self.config.iterations {
            let report = self.step()?;
            on_step(&report);
        }
        Ok(())
    }
}
