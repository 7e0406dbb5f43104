use rayon::prelude::*;

use super::Checkpoint;
use crate::autodiff::Array;
use crate::encoders::{EmbeddingGrid, Model};
use crate::error::{Error, Result};
use crate::metrics::{
    align_best, auc_iou_with_step, cap_sample, class_iou_sample, iou_at, normalize_map, piap, pixel_ap, EvalSample,
    GroundTruth, MetricReport, Thresholds,
};
use crate::scenegen::{make_world, Manifest, Mixture, Scene, Split, World};
use crate::walk::localization_map;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Thresholds,
    /// Evaluate only the first `n` examples of the split.
    pub max_examples: Option<usize>,
    pub threads: usize,
}

/// Reads `MIXLOC_THREADS`, defaulting to one thread.
pub fn threads_from_env() -> usize {
    std::env::var("MIXLOC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds: Thresholds::default(), max_examples: None, threads: threads_from_env() }
    }
}

/// Runs `f` over `items` on a pool of `threads` workers; results keep input order.
pub(crate) fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn embed_images(model: &Model, scenes: &[Scene], grid: usize) -> Result<Vec<EmbeddingGrid>> {
    scenes.iter().map(|s| model.image.embed(&s.regions, grid)).collect()
}

/// Places `k` per-image maps side by side: `[g × k·g]`.
fn canvas(parts: &[Array]) -> Array {
    let g = parts[0].shape()[0];
    let k = parts.len();
    let mut out = Array::zeros(&[g, k * g]);
    for (i, p) in parts.iter().enumerate() {
        for r in 0..g {
            let dst = r * k * g + i * g;
            out.data_mut()[dst..dst + g].copy_from_slice(&p.data()[r * g..(r + 1) * g]);
        }
    }
    out
}

/// Multi-source sample of one mixture: one canvas map per audio head over the
/// mixture's images laid side by side, and each class's mask on that canvas.
/// Maps are unlabeled; `maps[h]` is head `h`.
pub fn mixture_sample(model: &Model, mix: &Mixture, grid: usize) -> Result<EvalSample> {
    let images = embed_images(model, &mix.scenes, grid)?;
    let audio = model.audio.embed(&mix.mixed_audio)?;
    let maps = (0..audio.shape()[0])
        .map(|h| {
            let parts = images.iter().map(|im| localization_map(im, audio.row(h))).collect::<Result<Vec<_>>>()?;
            Ok(canvas(&parts))
        })
        .collect::<Result<Vec<_>>>()?;
    let blank = Array::zeros(&[grid, grid]);
    let truths = (0..mix.k())
        .map(|i| {
            let parts: Vec<Array> =
                (0..mix.k()).map(|j| if i == j { mix.scenes[i].mask.clone() } else { blank.clone() }).collect();
            GroundTruth { class_id: mix.scenes[i].class_id, mask: canvas(&parts), sounding: true }
        })
        .collect();
    Ok(EvalSample { maps, truths })
}

/// Per-head maps of one scene's own image under its unmixed audio.
fn single_maps(model: &Model, scene: &Scene, grid: usize) -> Result<Vec<Array>> {
    let image = model.image.embed(&scene.regions, grid)?;
    let audio = model.audio.embed(&scene.audio)?;
    (0..audio.shape()[0]).map(|h| localization_map(&image, audio.row(h))).collect()
}

struct PerMixture {
    cap: f64,
    piap: f64,
    class_iou: f64,
    single: Vec<(f64, f64)>,
}

fn score_mixture(model: &Model, mix: &Mixture, grid: usize, t: &Thresholds) -> Result<PerMixture> {
    let sample = mixture_sample(model, mix, grid)?;
    let cap = cap_sample(&align_best(&sample, pixel_ap)?)?;
    let binarize = t.binarize;
    let iou_aligned = align_best(&sample, |m, k| iou_at(&normalize_map(m), k, binarize))?;
    let class_iou = class_iou_sample(&iou_aligned, binarize)?;
    let piap = piap(&sample.maps, &sample.sounding_masks())?;

    let mut single = Vec::with_capacity(mix.k());
    for scene in &mix.scenes {
        let maps = single_maps(model, scene, grid)?;
        let mut avg = Array::zeros(maps[0].shape());
        for m in &maps {
            avg.add_assign(m);
        }
        let avg = avg.map(|v| v / maps.len() as f64);
        single.push((pixel_ap(&avg, &scene.mask)?, iou_at(&normalize_map(&avg), &scene.mask, binarize)?));
    }
    Ok(PerMixture { cap, piap, class_iou, single })
}

fn check_compatible(ck: &Checkpoint, world: &World, manifest: &Manifest) -> Result<()> {
    if manifest.world != ck.config.world || world.spec != manifest.world {
        return Err(Error::Config(
            "world spec mismatch between checkpoint and evaluation data".into(),
        ));
    }
    if manifest.k != ck.model.audio.k() {
        return Err(Error::Config(format!(
            "checkpoint has {} audio heads but the data mixes k = {}",
            ck.model.audio.k(),
            manifest.k
        )));
    }
    Ok(())
}

/// Evaluates on a split of the dataset the checkpoint was trained with.
pub fn evaluate(ck: &Checkpoint, split: Split, cfg: &EvalConfig) -> Result<MetricReport> {
    let world = make_world(&ck.config.world)?;
    evaluate_with(ck, &world, &ck.config.manifest(), split, cfg)
}

/// Both protocols over `split` of `manifest`: multi-source (mixed audio, best
/// pairing of head maps to classes) and single-source (unmixed audio, head
/// maps averaged).
pub fn evaluate_with(
    ck: &Checkpoint,
    world: &World,
    manifest: &Manifest,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    check_compatible(ck, world, manifest)?;
    let mut entries = manifest.entries(split);
    if let Some(n) = cfg.max_examples {
        entries = &entries[..n.min(entries.len())];
    }
    if entries.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", split.name())));
    }
    let grid = world.spec.grid;
    let t = cfg.thresholds;
    let per = par_map(entries, cfg.threads, |e| {
        let mix = world.sample_mixture(manifest.k, e.seed)?;
        score_mixture(&ck.model, &mix, grid, &t)
    })?;

    let n = per.len() as f64;
    let class_ious: Vec<f64> = per.iter().map(|p| p.class_iou).collect();
    let single: Vec<(f64, f64)> = per.iter().flat_map(|p| p.single.iter().copied()).collect();
    let single_ious: Vec<f64> = single.iter().map(|s| s.1).collect();
    let frac = |xs: &[f64], th: f64| xs.iter().filter(|&&v| v >= th).count() as f64 / xs.len() as f64;

    let metrics = vec![
        ("cap".to_string(), per.iter().map(|p| p.cap).sum::<f64>() / n),
        ("piap".to_string(), per.iter().map(|p| p.piap).sum::<f64>() / n),
        (format!("ciou@{}", t.ciou), frac(&class_ious, t.ciou)),
        ("auc".to_string(), auc_iou_with_step(&class_ious, t.auc_step)?),
        ("single.ap".to_string(), single.iter().map(|s| s.0).sum::<f64>() / single.len() as f64),
        (format!("single.iou@{}", t.iou), frac(&single_ious, t.iou)),
        ("single.auc".to_string(), auc_iou_with_step(&single_ious, t.auc_step)?),
    ];
    MetricReport::new(metrics, per.len(), t)
}

/// Mean pairwise similarity between head maps: Pearson correlation (cosine
/// of mean-centered maps) and plain cosine of the raw maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSimilarity {
    /// Unmixed audio of one source, maps over that source's image.
    pub single: f64,
    /// Mixed audio, maps over the side-by-side canvas.
    pub mixed: f64,
    pub single_raw: f64,
    pub mixed_raw: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn centered(a: &Array) -> Vec<f64> {
    let mean = a.sum() / a.len() as f64;
    a.data().iter().map(|v| v - mean).collect()
}

/// `(pearson, raw cosine)` averaged over head pairs.
fn pairwise(maps: &[Array]) -> (f64, f64) {
    let (mut p, mut r, mut n) = (0.0, 0.0, 0usize);
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            p += cosine(&centered(&maps[i]), &centered(&maps[j]));
            r += cosine(maps[i].data(), maps[j].data());
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (p / n, r / n)
}

pub fn head_similarity(model: &Model, world: &World, mixtures: &[Mixture]) -> Result<HeadSimilarity> {
    if mixtures.is_empty() {
        return Err(Error::Dimension("head similarity over no mixtures".into()));
    }
    let grid = world.spec.grid;
    let mut sums = [0.0; 4];
    let mut singles = 0usize;
    for mix in mixtures {
        let (p, r) = pairwise(&mixture_sample(model, mix, grid)?.maps);
        sums[2] += p;
        sums[3] += r;
        for scene in &mix.scenes {
            let (p, r) = pairwise(&single_maps(model, scene, grid)?);
            sums[0] += p;
            sums[1] += r;
            singles += 1;
        }
    }
    let (s, m) = (singles as f64, mixtures.len() as f64);
    Ok(HeadSimilarity { single: sums[0] / s, single_raw: sums[1] / s, mixed: sums[2] / m, mixed_raw: sums[3] / m })
}
