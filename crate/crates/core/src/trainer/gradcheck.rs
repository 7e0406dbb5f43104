use super::{batch_loss, LossTerm};
use crate::autodiff::check::check_gradients;
use crate::autodiff::{Array, Graph};
use crate::encoders::{init_params, EncoderDims, Model};
use crate::error::{Error, Result};
use crate::scenegen::{make_world, Mixture, WorldSpec};
use crate::walk::{self, permutations, LossKind};

const STEP: f64 = 1e-5;
/// Smallest accepted gap between a max (or best pairing) and its runner-up.
const MIN_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS: u64 = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub loss: LossKind,
    pub setting: usize,
    /// Seed of the accepted (tie-free) draw.
    pub seed: u64,
    pub loss_value: f64,
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub margin: f64,
}

fn small_world(seed: u64) -> WorldSpec {
    WorldSpec {
        num_classes: 4,
        d_v: 5,
        d_a: 5,
        grid: 3,
        source_extent: 2,
        seed,
        ..WorldSpec::default()
    }
}

fn dims() -> EncoderDims {
    EncoderDims { d_v: 5, d_a: 5, hidden: 4, c: 4, k: 2, hidden_layers: 1 }
}

/// Gap between the best and second-best pairing sums over every mixture.
fn pairing_margin(model: &Model, batch: &[Mixture]) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for mix in batch {
        let mut g = Graph::new();
        let nodes = model.register(&mut g);
        let m = mix.scenes[0].regions.shape()[0];
        let mut rows = Vec::new();
        for s in &mix.scenes {
            rows.extend_from_slice(s.regions.data());
        }
        let x = g.constant(Array::new(vec![mix.k() * m, rows.len() / (mix.k() * m)], rows)?);
        let regions = nodes.encode_image(&mut g, x)?;
        let a = g.constant(mix.mixed_audio.reshape(vec![1, mix.mixed_audio.len()])?);
        let heads = nodes.encode_audio(&mut g, a)?;
        let audio = g.concat_rows(&heads)?;
        let phi = walk::similarity_matrix(&mut g, regions, m, audio)?;
        let phi = g.value(phi);
        let mut sums: Vec<f64> = permutations(mix.k())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| phi.get2(i, j)).sum())
            .collect();
        sums.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(sums[0] - sums[1]);
    }
    Ok(margin)
}

/// Central-difference check of every training loss through the full encoder
/// stack at `settings` random tie-free points per loss.
pub fn gradcheck_suite(settings: usize, base_seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for loss in LossKind::ALL {
        for setting in 0..settings {
            let mut accepted = None;
            for attempt in 0..MAX_ATTEMPTS {
                let seed = base_seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((setting as u64) * MAX_ATTEMPTS + attempt);
                let world = make_world(&small_world(seed))?;
                let batch: Vec<Mixture> = (0..3)
                    .map(|b| world.sample_mixture(2, seed.wrapping_mul(31).wrapping_add(b)))
                    .collect::<Result<_>>()?;
                let model = init_params(seed, dims(), 0.8)?;
                let terms = LossTerm::single(loss);
                let report = check_gradients(&model.arrays(), STEP, |g, ids| {
                    let nodes = model.nodes_from_ids(ids)?;
                    batch_loss(g, &nodes, &batch, &terms, 0.07, true)
                })?;
                let mut margin = report.tie_margin;
                if loss == LossKind::Pit {
                    margin = margin.min(pairing_margin(&model, &batch)?);
                }
                if margin >= MIN_MARGIN {
                    accepted = Some(GradcheckRow {
                        loss,
                        setting,
                        seed,
                        loss_value: report.loss,
                        rel_error: report.rel_error,
                        max_abs_error: report.max_abs_error,
                        margin,
                    });
                    break;
                }
            }
            rows.push(accepted.ok_or_else(|| {
                Error::Domain(format!("no tie-free point found for {loss} setting {setting}"))
            })?);
        }
    }
    Ok(rows)
}
