//! Training loop, configuration, checkpoints, evaluation and export.

mod ablate;
mod checkpoint;
mod eval;
mod export;
mod gradcheck;
mod optim;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, NodeId};
use crate::encoders::{init_params, EncoderDims, ModelNodes};
use crate::error::{Error, Result};
use crate::scenegen::{dataset_manifest, example_seed, make_world, Manifest, Mixture, Split, SplitSizes, World, WorldSpec};
use crate::walk::{self, LossKind, MixtureEmbedding, MAX_PERMUTATION_K};

pub use ablate::{ablate, AblationResult, AblationRow, ABLATION_LOSSES};
pub use checkpoint::{Checkpoint, EvalRecord, History};
pub use eval::{evaluate, evaluate_with, head_similarity, mixture_sample, EvalConfig, HeadSimilarity};
pub use export::{export_maps, write_pgm};
pub use gradcheck::{gradcheck_suite, GradcheckRow};
pub use optim::{adam_step, AdamHyper, OptimizerState};

/// One weighted loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerm {
    pub loss: LossKind,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl LossTerm {
    pub fn single(loss: LossKind) -> Vec<LossTerm> {
        vec![LossTerm { loss, weight: 1.0 }]
    }
}

/// Optional first phase trained with its own losses before the main phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pretrain {
    pub losses: Vec<LossTerm>,
    pub steps: usize,
}

/// Experiment configuration. Every field has a default, so `{}` is a valid
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub losses: Vec<LossTerm>,
    pub tau: f64,
    pub k: usize,
    /// Embedding width.
    pub c: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub world: WorldSpec,
    /// Use the shifted mixture for the return leg of the cycle loss.
    pub use_shifted: bool,
    /// Half-width of the uniform parameter initialization.
    pub init_scale: f64,
    /// Evaluate on the validation split every this many steps; 0 disables.
    pub eval_every: usize,
    pub eval_examples: usize,
    pub splits: SplitSizes,
    pub pretrain: Option<Pretrain>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            losses: LossTerm::single(LossKind::Cyc),
            tau: 0.07,
            k: 2,
            c: 16,
            hidden: 32,
            hidden_layers: 1,
            lr: 1e-4,
            batch: 32,
            steps: 2000,
            seed: 0,
            world: WorldSpec::default(),
            use_shifted: true,
            init_scale: 0.1,
            eval_every: 0,
            eval_examples: 100,
            splits: SplitSizes::default(),
            pretrain: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            d_v: self.world.d_v,
            d_a: self.world.d_a,
            hidden: self.hidden,
            c: self.c,
            k: self.k,
            hidden_layers: self.hidden_layers,
        }
    }

    pub fn manifest(&self) -> Manifest {
        dataset_manifest(&self.world, self.k, self.splits, self.seed)
    }

    fn check_terms(&self, terms: &[LossTerm], what: &str) -> Result<()> {
        if terms.is_empty() {
            return Err(Error::Config(format!("{what} lists no losses")));
        }
        for t in terms {
            if !t.weight.is_finite() {
                return Err(Error::Config(format!("{what}: weight of {} is not finite", t.loss)));
            }
            match t.loss {
                LossKind::Pit if self.k > MAX_PERMUTATION_K => {
                    return Err(Error::Config(format!("pit needs k <= {MAX_PERMUTATION_K}, got {}", self.k)))
                }
                LossKind::Corresp | LossKind::MixedCorresp if self.batch < 2 => {
                    return Err(Error::Config(format!("{} needs batch >= 2", t.loss)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.k < 2 || self.k > self.world.num_classes {
            return bad(format!("k must lie in 2..={}, got {}", self.world.num_classes, self.k));
        }
        if self.c == 0 || (self.hidden_layers > 0 && self.hidden == 0) {
            return bad("embedding and hidden widths must be >= 1".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be >= 0, got {}", self.init_scale));
        }
        if self.splits.train == 0 {
            return bad("the train split is empty".into());
        }
        if self.eval_every > 0 && (self.eval_examples == 0 || self.splits.val == 0) {
            return bad("periodic evaluation needs eval_examples >= 1 and a nonempty val split".into());
        }
        self.check_terms(&self.losses, "losses")?;
        if let Some(p) = &self.pretrain {
            if p.steps == 0 {
                return bad("pretrain.steps must be >= 1".into());
            }
            self.check_terms(&p.losses, "pretrain.losses")?;
        }
        Ok(())
    }

    /// Total optimizer steps over both phases.
    pub fn total_steps(&self) -> usize {
        self.steps + self.pretrain.as_ref().map_or(0, |p| p.steps)
    }
}

/// Reads the mixtures of training step `step` (0-based).
pub fn training_batch(world: &World, cfg: &TrainConfig, step: usize) -> Result<Vec<Mixture>> {
    (0..cfg.batch)
        .map(|b| {
            let index = (step * cfg.batch + b) % cfg.splits.train;
            world.sample_mixture(cfg.k, example_seed(cfg.seed, Split::Train, index))
        })
        .collect()
}

fn stack(rows: &[&Array]) -> Result<Array> {
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Array::new(vec![rows.len(), cols], data)
}

fn stack_regions(scenes: &[crate::scenegen::Scene]) -> Result<Array> {
    let d = scenes[0].regions.shape()[1];
    let m = scenes[0].regions.shape()[0];
    let mut data = Vec::with_capacity(scenes.len() * m * d);
    for s in scenes {
        data.extend_from_slice(s.regions.data());
    }
    Array::new(vec![scenes.len() * m, d], data)
}

/// Audio embeddings `[k×C]` of one feature vector, heads as rows.
fn embed_audio(g: &mut Graph, nodes: &ModelNodes, features: &Array) -> Result<NodeId> {
    let x = g.constant(features.reshape(vec![1, features.len()])?);
    let heads = nodes.encode_audio(g, x)?;
    g.concat_rows(&heads)
}

/// Weighted sum of the configured losses over one batch of mixtures.
pub fn batch_loss(
    g: &mut Graph,
    nodes: &ModelNodes,
    batch: &[Mixture],
    terms: &[LossTerm],
    tau: f64,
    use_shifted: bool,
) -> Result<NodeId> {
    let needs = |k: LossKind| terms.iter().any(|t| t.loss == k);
    let m = batch[0].scenes[0].regions.shape()[0];
    let k = batch[0].k();

    let mut mixes = Vec::with_capacity(batch.len());
    for mix in batch {
        let x = g.constant(stack_regions(&mix.scenes)?);
        let regions = nodes.encode_image(g, x)?;
        let second_views = if needs(LossKind::Isi) {
            let x = g.constant(stack_regions(&mix.second_views)?);
            Some(nodes.encode_image(g, x)?)
        } else {
            None
        };
        let audio = embed_audio(g, nodes, &mix.mixed_audio)?;
        let shifted_audio = if needs(LossKind::Cyc) && use_shifted {
            Some(embed_audio(g, nodes, &mix.shifted_mixed_audio)?)
        } else {
            None
        };
        mixes.push(MixtureEmbedding { regions, second_views, audio, shifted_audio, regions_per_image: m });
    }

    let mut total: Option<NodeId> = None;
    for term in terms {
        let loss = match term.loss {
            LossKind::Cyc => {
                let per: Vec<NodeId> = mixes
                    .iter()
                    .map(|e| walk::mixture_cyc(g, e, tau, use_shifted))
                    .collect::<Result<_>>()?;
                walk::mean(g, &per)?
            }
            LossKind::Isi => {
                let per: Vec<NodeId> = mixes.iter().map(|e| walk::mixture_isi(g, e, tau)).collect::<Result<_>>()?;
                walk::mean(g, &per)?
            }
            LossKind::Pit => {
                let per: Vec<NodeId> = mixes.iter().map(|e| walk::mixture_pit(g, e)).collect::<Result<_>>()?;
                walk::mean(g, &per)?
            }
            LossKind::MixedCorresp => {
                let regions: Vec<NodeId> = mixes.iter().map(|e| e.regions).collect();
                let audio: Vec<NodeId> = mixes.iter().map(|e| e.audio).collect();
                let regions = g.concat_rows(&regions)?;
                let audio = g.concat_rows(&audio)?;
                walk::batch_mixed_corresp(g, regions, audio, k * m, k, tau)?
            }
            LossKind::Corresp => {
                // Unmixed audio of every scene against every image, first head.
                let regions: Vec<NodeId> = mixes.iter().map(|e| e.regions).collect();
                let regions = g.concat_rows(&regions)?;
                let feats: Vec<&Array> = batch.iter().flat_map(|mx| mx.scenes.iter().map(|s| &s.audio)).collect();
                let x = g.constant(stack(&feats)?);
                let heads = nodes.encode_audio(g, x)?;
                let phi = walk::similarity_matrix(g, regions, m, heads[0])?;
                walk::loss_corresp(g, phi, tau)?
            }
        };
        let weighted = if term.weight == 1.0 { loss } else { g.scale(loss, term.weight)? };
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    total.ok_or_else(|| Error::Config("no loss terms".into()))
}

/// Progress callbacks from [`train_with_log`].
#[derive(Debug, Clone, PartialEq)]
pub enum LogEvent {
    Step { step: u64, loss: f64 },
    Eval { step: u64, metrics: Vec<(String, f64)> },
}

pub fn train(cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with_log(cfg, |_| {})
}

pub fn train_with_log(cfg: &TrainConfig, mut log: impl FnMut(&LogEvent)) -> Result<Checkpoint> {
    cfg.validate()?;
    let world = make_world(&cfg.world)?;
    let model = init_params(cfg.seed, cfg.dims(), cfg.init_scale)?;
    let mut params = model.arrays();
    let mut opt = OptimizerState::new(AdamHyper::with_lr(cfg.lr), &params);
    let mut history = History::default();

    let phases: Vec<(&[LossTerm], usize)> = cfg
        .pretrain
        .iter()
        .map(|p| (p.losses.as_slice(), p.steps))
        .chain(std::iter::once((cfg.losses.as_slice(), cfg.steps)))
        .collect();

    let mut step = 0usize;
    for (terms, steps) in phases {
        for _ in 0..steps {
            let batch = training_batch(&world, cfg, step)?;
            let mut g = Graph::new();
            let nodes = model.with_arrays(params.clone()).register(&mut g);
            step += 1;
            let loss = batch_loss(&mut g, &nodes, &batch, terms, cfg.tau, cfg.use_shifted)
                .map_err(|e| Error::Domain(format!("step {step}: {e}")))?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { step, value });
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Array> = nodes
                .ids()
                .iter()
                .zip(&params)
                .map(|(id, p)| grads.get(*id).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
                .collect();
            adam_step(&mut params, &grads, &mut opt)?;
            history.losses.push(value);
            log(&LogEvent::Step { step: step as u64, loss: value });

            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) {
                let snapshot = Checkpoint {
                    config: cfg.clone(),
                    model: model.with_arrays(params.clone()),
                    optimizer: opt.clone(),
                    step: step as u64,
                    history: History::default(),
                };
                let ecfg = EvalConfig { max_examples: Some(cfg.eval_examples), ..EvalConfig::default() };
                let report = evaluate_with(&snapshot, &world, &cfg.manifest(), Split::Val, &ecfg)?;
                log(&LogEvent::Eval { step: step as u64, metrics: report.metrics.clone() });
                history.evals.push(EvalRecord { step: step as u64, metrics: report.metrics });
            }
        }
    }

    Ok(Checkpoint {
        config: cfg.clone(),
        model: model.with_arrays(params),
        optimizer: opt,
        step: step as u64,
        history,
    })
}
