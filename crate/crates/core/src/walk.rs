//! Cross-modal random walks between image and audio nodes.
//!
//! Similarities `φ(v, s)` are the maximum dot product between the audio
//! embedding `s` and any region embedding of image `v`. Softmax over those
//! similarities yields transition matrices: `A_IS` walks from images to
//! sounds (rows are images) and `A_SI` walks from sounds to images (rows are
//! sounds). All losses here operate on graph nodes and are differentiable.

use serde::{Deserialize, Serialize};

use crate::autodiff::{check_tau, Array, Graph, NodeId};
use crate::encoders::EmbeddingGrid;
use crate::error::{Error, Result};

/// Largest `k` for which pairing losses enumerate all `k!` permutations.
pub const MAX_PERMUTATION_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cyc,
    Isi,
    MixedCorresp,
    Pit,
    Corresp,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Cyc,
        LossKind::Isi,
        LossKind::MixedCorresp,
        LossKind::Pit,
        LossKind::Corresp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cyc => "cyc",
            LossKind::Isi => "isi",
            LossKind::MixedCorresp => "mixed_corresp",
            LossKind::Pit => "pit",
            LossKind::Corresp => "corresp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---- plain-array views ----------------------------------------------------

/// `φ(v, s)`: the best-matching region's dot product with `audio`.
pub fn similarity_phi(image: &EmbeddingGrid, audio: &[f64]) -> Result<f64> {
    let map = localization_map(image, audio)?;
    Ok(map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Per-region dot products with `audio`, shaped `[g×g]`.
pub fn localization_map(image: &EmbeddingGrid, audio: &[f64]) -> Result<Array> {
    if image.dim() != audio.len() {
        return Err(Error::Dimension(format!(
            "region embeddings have {} channels, audio embedding has {}",
            image.dim(),
            audio.len()
        )));
    }
    let m = image.grid * image.grid;
    let data = (0..m)
        .map(|r| image.embeddings.row(r).iter().zip(audio).map(|(a, b)| a * b).sum())
        .collect();
    Array::new(vec![image.grid, image.grid], data)
}

/// `Φ[i, j] = φ(images[i], audio row j)`.
pub fn similarity_values(images: &[EmbeddingGrid], audio: &Array) -> Result<Array> {
    let (q, _) = audio.dims2()?;
    let mut data = Vec::with_capacity(images.len() * q);
    for img in images {
        for j in 0..q {
            data.push(similarity_phi(img, audio.row(j))?);
        }
    }
    Array::new(vec![images.len(), q], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkDirection {
    ImageToSound,
    SoundToImage,
}

/// Row-stochastic transition matrix derived from a similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub probs: Array,
    pub direction: WalkDirection,
    pub tau: f64,
}

impl TransitionMatrix {
    pub fn image_to_sound(phi: &Array, tau: f64) -> Result<Self> {
        let mut g = Graph::new();
        let p = g.constant(phi.clone());
        let a = build_a_is(&mut g, p, tau)?;
        Ok(TransitionMatrix {
            probs: g.value(a).clone(),
            direction: WalkDirection::ImageToSound,
            tau,
        })
    }

    pub fn sound_to_image(phi: &Array, tau: f64) -> Result<Self> {
        let mut g = Graph::new();
        let p = g.constant(phi.clone());
        let a = build_a_si(&mut g, p, tau)?;
        Ok(TransitionMatrix {
            probs: g.value(a).clone(),
            direction: WalkDirection::SoundToImage,
            tau,
        })
    }

    /// Largest deviation of any row sum from 1.
    pub fn stochastic_error(&self) -> f64 {
        let (r, _) = self.probs.dims2().expect("matrix");
        (0..r)
            .map(|i| (self.probs.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

// ---- differentiable building blocks ---------------------------------------

/// Similarity matrix between `p` images and `q` audio embeddings.
///
/// `regions` stacks the region embeddings of every image, `per_image` rows
/// each (`[p·per_image × C]`); `audio` is `[q × C]`. Returns `[p × q]`.
pub fn similarity_matrix(
    g: &mut Graph,
    regions: NodeId,
    per_image: usize,
    audio: NodeId,
) -> Result<NodeId> {
    let (rows, c) = g.value(regions).dims2()?;
    let (_, ca) = g.value(audio).dims2()?;
    if c != ca {
        return Err(Error::Dimension(format!(
            "region embeddings have {c} channels, audio embeddings have {ca}"
        )));
    }
    if per_image == 0 || rows % per_image != 0 {
        return Err(Error::Dimension(format!(
            "{rows} region rows are not a multiple of {per_image} regions per image"
        )));
    }
    let rt = g.transpose(regions)?;
    let dots = g.matmul(audio, rt)?;
    let best = g.segment_max(dots, per_image)?;
    g.transpose(best)
}

/// `A_IS`: row softmax of `Φ / τ`, rows are images.
pub fn build_a_is(g: &mut Graph, phi: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    g.softmax_rows(phi, tau)
}

/// `A_SI`: column softmax of `Φ / τ`, transposed so that rows are sounds.
pub fn build_a_si(g: &mut Graph, phi: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let t = g.transpose(phi)?;
    g.softmax_rows(t, tau)
}

fn neg_mean_trace_log(g: &mut Graph, m: NodeId) -> Result<NodeId> {
    let n = g.value(m).shape()[0];
    let t = g.trace_log(m)?;
    g.scale(t, -1.0 / n as f64)
}

/// InfoNCE over an `n × n` batch similarity matrix whose diagonal holds the
/// true pairs: `−(1/n) Σ_i log A_IS(i,i)`.
pub fn loss_corresp(g: &mut Graph, phi: NodeId, tau: f64) -> Result<NodeId> {
    let (n, q) = g.value(phi).dims2()?;
    if n < 2 || n != q {
        return Err(Error::Dimension(format!(
            "correspondence loss needs a square batch with n >= 2, got {n}x{q}"
        )));
    }
    let a = build_a_is(g, phi, tau)?;
    neg_mean_trace_log(g, a)
}

/// Sound→image→sound cycle loss `−(1/k) tr log(A_SI · A_IS)` on one mixture.
///
/// `phi` is `[k images × k sounds]`. When `phi_return` is given, the
/// image→sound leg uses it instead (shifted-audio similarities).
pub fn loss_cyc(g: &mut Graph, phi: NodeId, phi_return: Option<NodeId>, tau: f64) -> Result<NodeId> {
    let (k, q) = g.value(phi).dims2()?;
    if k < 2 || k != q {
        return Err(Error::Dimension(format!(
            "cycle loss needs a square similarity matrix with k >= 2, got {k}x{q}"
        )));
    }
    if let Some(r) = phi_return {
        if g.value(r).shape() != g.value(phi).shape() {
            return Err(Error::Dimension(format!(
                "return-leg similarities {:?} do not match {:?}",
                g.value(r).shape(),
                g.value(phi).shape()
            )));
        }
    }
    let a_si = build_a_si(g, phi, tau)?;
    let a_is = build_a_is(g, phi_return.unwrap_or(phi), tau)?;
    let round_trip = g.matmul(a_si, a_is)?;
    neg_mean_trace_log(g, round_trip)
}

/// Image→sound→image loss `−(1/k) tr log(A_IS · A_SI)`: leave from the first
/// view of each video (`phi_out`) and return to its second view (`phi_back`).
pub fn loss_isi(g: &mut Graph, phi_out: NodeId, phi_back: NodeId, tau: f64) -> Result<NodeId> {
    let (k, q) = g.value(phi_out).dims2()?;
    if k < 2 || k != q || g.value(phi_back).shape() != [k, q] {
        return Err(Error::Dimension(format!(
            "ISI loss needs two square k x k similarity matrices with k >= 2, got {:?} and {:?}",
            g.value(phi_out).shape(),
            g.value(phi_back).shape()
        )));
    }
    let a_is = build_a_is(g, phi_out, tau)?;
    let a_si = build_a_si(g, phi_back, tau)?;
    let round_trip = g.matmul(a_is, a_si)?;
    neg_mean_trace_log(g, round_trip)
}

/// Mixed correspondence over `n` mixtures with `k` audio embeddings each.
///
/// `phi` is `[n × n·k]`; column `j·k + t` holds embedding `t` of example `j`.
/// `A(i, j)` sums the softmax mass of row `i` over example `j`'s `k`
/// columns, and the loss is `−(1/n) Σ_i log A(i,i)`.
pub fn loss_mixed_corresp(g: &mut Graph, phi: NodeId, k: usize, tau: f64) -> Result<NodeId> {
    let (n, cols) = g.value(phi).dims2()?;
    if n < 2 {
        return Err(Error::Dimension(format!(
            "mixed correspondence needs n >= 2 examples, got {n}"
        )));
    }
    if k == 0 || cols != n * k {
        return Err(Error::Dimension(format!(
            "mixed correspondence expects {n}x{} similarities for k = {k}, got {n}x{cols}",
            n * k
        )));
    }
    let soft = build_a_is(g, phi, tau)?;
    let mut group = Array::zeros(&[n * k, n]);
    for j in 0..n {
        for t in 0..k {
            group.data_mut()[(j * k + t) * n + j] = 1.0;
        }
    }
    let group = g.constant(group);
    let a = g.matmul(soft, group)?;
    neg_mean_trace_log(g, a)
}

/// All permutations of `0..k` in lexicographic order (identity first).
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Best pairing of rows to columns: `(sum, perm)` maximizing `Σ_i Φ[i, perm[i]]`.
/// Exact ties keep the earliest permutation in lexicographic order.
pub fn best_pairing(phi: &Array) -> Result<(f64, Vec<usize>)> {
    let (k, q) = phi.dims2()?;
    if k != q {
        return Err(Error::Dimension(format!("pairing needs a square matrix, got {k}x{q}")));
    }
    if k > MAX_PERMUTATION_K {
        return Err(Error::Parameter(format!(
            "k = {k} exceeds the permutation enumeration cap of {MAX_PERMUTATION_K}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(k) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| phi.get2(i, j)).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    Ok(best.expect("k >= 1 has a permutation"))
}

/// Permutation-invariant loss `−max_σ Σ_i φ(v_i, s_σ(i))` on one mixture.
/// The gradient flows only through the winning pairing.
pub fn loss_pit(g: &mut Graph, phi: NodeId) -> Result<NodeId> {
    let (k, _) = g.value(phi).dims2()?;
    let (_, perm) = best_pairing(g.value(phi))?;
    let mut select = Array::zeros(&[k, k]);
    for (i, &j) in perm.iter().enumerate() {
        select.data_mut()[i * k + j] = 1.0;
    }
    let select = g.constant(select);
    let picked = g.hadamard(phi, select)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0)
}

/// Mean of per-item losses, summed in order.
pub fn mean(g: &mut Graph, losses: &[NodeId]) -> Result<NodeId> {
    if losses.is_empty() {
        return Err(Error::Dimension("mean of no losses".into()));
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = g.add(acc, l)?;
    }
    g.scale(acc, 1.0 / losses.len() as f64)
}

// ---- mixture-level losses -------------------------------------------------

/// Embeddings of one mixture inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct MixtureEmbedding {
    /// `[k·m × C]` region embeddings, image by image.
    pub regions: NodeId,
    /// Second views of the same videos, same layout, for the ISI loss.
    pub second_views: Option<NodeId>,
    /// `[k × C]` audio embeddings of the mixed audio.
    pub audio: NodeId,
    /// `[k × C]` audio embeddings of the shifted mixed audio.
    pub shifted_audio: Option<NodeId>,
    /// Regions per image.
    pub regions_per_image: usize,
}

impl MixtureEmbedding {
    pub fn phi(&self, g: &mut Graph) -> Result<NodeId> {
        similarity_matrix(g, self.regions, self.regions_per_image, self.audio)
    }
}

pub fn mixture_cyc(g: &mut Graph, mix: &MixtureEmbedding, tau: f64, use_shifted: bool) -> Result<NodeId> {
    let phi = mix.phi(g)?;
    let phi_return = if use_shifted {
        let shifted = mix.shifted_audio.ok_or_else(|| {
            Error::Config("shifted audio requested but the mixture has no shifted embeddings".into())
        })?;
        Some(similarity_matrix(g, mix.regions, mix.regions_per_image, shifted)?)
    } else {
        None
    };
    loss_cyc(g, phi, phi_return, tau)
}

pub fn mixture_isi(g: &mut Graph, mix: &MixtureEmbedding, tau: f64) -> Result<NodeId> {
    let second = mix
        .second_views
        .ok_or_else(|| Error::Config("ISI loss needs second views of each video".into()))?;
    let phi_out = mix.phi(g)?;
    let phi_back = similarity_matrix(g, second, mix.regions_per_image, mix.audio)?;
    loss_isi(g, phi_out, phi_back, tau)
}

pub fn mixture_pit(g: &mut Graph, mix: &MixtureEmbedding) -> Result<NodeId> {
    let phi = mix.phi(g)?;
    loss_pit(g, phi)
}

/// Mixed correspondence over a batch. Each mixture's `k` images together form
/// its single frame `v_i`, so `φ(v_i, s)` maxes over all `k·m` regions.
pub fn batch_mixed_corresp(
    g: &mut Graph,
    regions: NodeId,
    audio: NodeId,
    regions_per_example: usize,
    k: usize,
    tau: f64,
) -> Result<NodeId> {
    let phi = similarity_matrix(g, regions, regions_per_example, audio)?;
    loss_mixed_corresp(g, phi, k, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn m(rows: &[&[f64]]) -> Array {
        Array::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn grid(rows: &[&[f64]], g: usize) -> EmbeddingGrid {
        EmbeddingGrid::new(m(rows), g).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn eval(phi: &Array, f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(phi.clone());
        let l = f(&mut g, p)?;
        Ok(g.scalar(l))
    }

    #[test]
    fn phi_examples() {
        let img = EmbeddingGrid::new(m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]), 2).unwrap();
        assert_eq!(similarity_phi(&img, &[0.0, 1.0]).unwrap(), 1.0);
        assert!((similarity_phi(&img, &[0.6, 0.8]).unwrap() - 0.8).abs() < 1e-15);
        let orth = grid(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]], 2);
        assert_eq!(similarity_phi(&orth, &[0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert!(similarity_phi(&orth, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn localization_map_examples() {
        let img = grid(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]], 2);
        let map = localization_map(&img, &[1.0, 0.0]).unwrap();
        assert_eq!(map.shape(), &[2, 2]);
        assert_eq!(map.data(), &[1.0, 0.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = random(&mut rng, &[9, 4], -1.0, 1.0);
        let img = EmbeddingGrid::new(emb, 3).unwrap();
        let audio = [0.1, -0.5, 0.3, 0.2];
        let map = localization_map(&img, &audio).unwrap();
        let max = map.data().iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(max, similarity_phi(&img, &audio).unwrap());
        assert_eq!(map, localization_map(&img, &audio).unwrap());
        assert!(localization_map(&img, &[1.0]).is_err());
    }

    #[test]
    fn similarity_matrix_matches_plain_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let regions = random(&mut rng, &[3 * 4, 5], -1.0, 1.0);
        let audio = random(&mut rng, &[2, 5], -1.0, 1.0);
        let images: Vec<_> = (0..3)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..4).map(|r| regions.row(i * 4 + r).to_vec()).collect();
                EmbeddingGrid::new(Array::from_rows(&rows).unwrap(), 2).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let r = g.constant(regions);
        let a = g.constant(audio.clone());
        let phi = similarity_matrix(&mut g, r, 4, a).unwrap();
        assert_eq!(g.value(phi), &similarity_values(&images, &audio).unwrap());
    }

    #[test]
    fn transition_examples() {
        let phi = Array::identity(2);
        let a = TransitionMatrix::image_to_sound(&phi, 1.0).unwrap();
        let want = m(&[&[0.7311, 0.2689], &[0.2689, 0.7311]]);
        assert!(a.probs.max_abs_diff(&want) < 1e-4);
        let b = TransitionMatrix::sound_to_image(&phi, 1.0).unwrap();
        assert_eq!(a.probs, b.probs);

        let c = TransitionMatrix::image_to_sound(&Array::filled(&[3, 4], 0.3), 0.07).unwrap();
        assert!(c.probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let c = TransitionMatrix::sound_to_image(&Array::filled(&[3, 4], 0.3), 0.07).unwrap();
        assert_eq!(c.probs.shape(), &[4, 3]);
        assert!(c.probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let sharp = TransitionMatrix::image_to_sound(&m(&[&[1.0, 0.0]]), 0.01).unwrap();
        assert!(sharp.probs.max_abs_diff(&m(&[&[1.0, 0.0]])) < 1e-3);

        let one = TransitionMatrix::sound_to_image(&m(&[&[0.4]]), 0.5).unwrap();
        assert_eq!(one.probs.data(), &[1.0]);

        assert!(TransitionMatrix::image_to_sound(&phi, 0.0).is_err());
        assert!(TransitionMatrix::sound_to_image(&phi, -0.1).is_err());
    }

    #[test]
    fn symmetric_phi_gives_transposed_walks() {
        let phi = m(&[&[0.9, 0.2, -0.1], &[0.2, 0.5, 0.3], &[-0.1, 0.3, 0.7]]);
        let a = TransitionMatrix::image_to_sound(&phi, 0.2).unwrap();
        let b = TransitionMatrix::sound_to_image(&phi, 0.2).unwrap();
        assert!(a.probs.max_abs_diff(&b.probs) < 1e-15);
    }

    #[test]
    fn corresp_examples() {
        let big = Array::identity(3).map(|v| v * 1e3);
        assert!(eval(&big, |g, p| loss_corresp(g, p, 1.0)).unwrap() < 1e-12);
        let u2 = eval(&Array::filled(&[2, 2], 0.4), |g, p| loss_corresp(g, p, 0.07)).unwrap();
        assert!((u2 - LN2).abs() < 1e-12);
        assert!((u2 - 0.6931).abs() < 1e-4);
        for n in 2..7 {
            let u = eval(&Array::filled(&[n, n], -0.2), |g, p| loss_corresp(g, p, 0.5)).unwrap();
            assert!((u - (n as f64).ln()).abs() < 1e-12);
        }
        assert!(eval(&Array::filled(&[1, 1], 0.0), |g, p| loss_corresp(g, p, 1.0)).is_err());
    }

    #[test]
    fn cyc_examples() {
        let sharp = Array::identity(2);
        let l = eval(&sharp, |g, p| loss_cyc(g, p, None, 0.01)).unwrap();
        assert!(l < 1e-12 && l >= 0.0, "{l}");

        let flat = Array::filled(&[2, 2], 0.3);
        let l = eval(&flat, |g, p| loss_cyc(g, p, None, 0.07)).unwrap();
        assert!((l - LN2).abs() < 1e-12);

        let anti = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let l = eval(&anti, |g, p| loss_cyc(g, p, None, 0.01)).unwrap();
        assert!(l < 1e-12, "{l}");

        assert!(eval(&Array::filled(&[1, 1], 0.0), |g, p| loss_cyc(g, p, None, 1.0)).is_err());
    }

    #[test]
    fn cyc_uses_return_leg() {
        // Outbound walk is sharp, but a constant return leg makes the cycle chance-level.
        let mut g = Graph::new();
        let phi = g.constant(Array::identity(2));
        let back = g.constant(Array::filled(&[2, 2], 0.0));
        let l = loss_cyc(&mut g, phi, Some(back), 0.01).unwrap();
        assert!((g.scalar(l) - LN2).abs() < 1e-9);
        let bad = g.constant(Array::filled(&[3, 3], 0.0));
        assert!(loss_cyc(&mut g, phi, Some(bad), 0.01).is_err());
    }

    #[test]
    fn isi_examples() {
        let mut g = Graph::new();
        let sharp = g.constant(Array::identity(2));
        let l = loss_isi(&mut g, sharp, sharp, 0.01).unwrap();
        assert!(g.scalar(l) < 1e-12);

        let flat = g.constant(Array::filled(&[2, 2], 0.1));
        let l = loss_isi(&mut g, flat, flat, 0.07).unwrap();
        assert!((g.scalar(l) - LN2).abs() < 1e-12);

        let sym = g.constant(m(&[&[0.8, 0.1, 0.3], &[0.1, 0.4, -0.2], &[0.3, -0.2, 0.6]]));
        let a = loss_isi(&mut g, sym, sym, 0.3).unwrap();
        let b = loss_cyc(&mut g, sym, None, 0.3).unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-12);

        let wrong = g.constant(Array::filled(&[3, 3], 0.0));
        assert!(loss_isi(&mut g, flat, wrong, 1.0).is_err());
    }

    /// Direct scalar evaluation of the mixed-correspondence formula.
    fn mixed_corresp_oracle(phi: &[Vec<f64>], k: usize, tau: f64) -> f64 {
        let n = phi.len();
        let mut total = 0.0;
        for i in 0..n {
            let num: f64 = (0..k).map(|t| (phi[i][i * k + t] / tau).exp()).sum();
            let den: f64 = phi[i].iter().map(|v| (v / tau).exp()).sum();
            total += (num / den).ln();
        }
        -total / n as f64
    }

    #[test]
    fn mixed_corresp_examples() {
        let phi = vec![vec![0.9, 0.1, -0.3, 0.2], vec![0.0, 0.5, 0.7, 0.6]];
        let arr = Array::from_rows(&phi).unwrap();
        let got = eval(&arr, |g, p| loss_mixed_corresp(g, p, 2, 0.5)).unwrap();
        assert!((got - mixed_corresp_oracle(&phi, 2, 0.5)).abs() < 1e-12);

        let flat = Array::filled(&[3, 6], 0.2);
        let got = eval(&flat, |g, p| loss_mixed_corresp(g, p, 2, 0.07)).unwrap();
        assert!((got - 3f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sq = random(&mut rng, &[4, 4], -1.0, 1.0);
        let a = eval(&sq, |g, p| loss_mixed_corresp(g, p, 1, 0.1)).unwrap();
        let b = eval(&sq, |g, p| loss_corresp(g, p, 0.1)).unwrap();
        assert_eq!(a, b);

        assert!(eval(&Array::filled(&[1, 2], 0.0), |g, p| loss_mixed_corresp(g, p, 2, 1.0)).is_err());
        assert!(eval(&Array::filled(&[2, 3], 0.0), |g, p| loss_mixed_corresp(g, p, 2, 1.0)).is_err());
    }

    #[test]
    fn pit_examples() {
        let phi = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(eval(&phi, loss_pit).unwrap(), -2.0);

        let tie = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let mut g = Graph::new();
        let p = g.param(tie);
        let l = loss_pit(&mut g, p).unwrap();
        assert_eq!(g.scalar(l), -1.0);
        let grad = g.backward(l).unwrap();
        assert_eq!(grad.get(p).unwrap().data(), &[-1.0, 0.0, 0.0, -1.0]);

        let too_big = Array::zeros(&[9, 9]);
        assert!(eval(&too_big, loss_pit).is_err());
    }

    #[test]
    fn pit_matches_enumeration_for_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let phi = random(&mut rng, &[3, 3], -1.0, 1.0);
            let p = phi.data();
            let all = [
                p[0] + p[4] + p[8],
                p[0] + p[5] + p[7],
                p[1] + p[3] + p[8],
                p[1] + p[5] + p[6],
                p[2] + p[3] + p[7],
                p[2] + p[4] + p[6],
            ];
            let best = all.iter().copied().fold(f64::MIN, f64::max);
            assert!((eval(&phi, loss_pit).unwrap() + best).abs() < 1e-12);
        }
    }

    #[test]
    fn permutations_are_lexicographic() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
        assert_eq!(p[5], vec![2, 1, 0]);
        assert_eq!(permutations(4).len(), 24);
    }

    #[test]
    fn losses_pass_gradient_check_on_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let phi = random(&mut rng, &[3, 3], -1.0, 1.0);
            let phi2 = random(&mut rng, &[3, 3], -1.0, 1.0);
            let wide = random(&mut rng, &[3, 6], -1.0, 1.0);
            let r = check_gradients(&[phi.clone(), phi2.clone()], 1e-5, |g, p| loss_cyc(g, p[0], Some(p[1]), 0.3)).unwrap();
            assert!(r.rel_error < 1e-4, "cyc {}", r.rel_error);
            let r = check_gradients(&[phi.clone(), phi2], 1e-5, |g, p| loss_isi(g, p[0], p[1], 0.3)).unwrap();
            assert!(r.rel_error < 1e-4, "isi {}", r.rel_error);
            let r = check_gradients(&[phi.clone()], 1e-5, |g, p| loss_corresp(g, p[0], 0.3)).unwrap();
            assert!(r.rel_error < 1e-4, "corresp {}", r.rel_error);
            let r = check_gradients(&[wide], 1e-5, |g, p| loss_mixed_corresp(g, p[0], 2, 0.3)).unwrap();
            assert!(r.rel_error < 1e-4, "mixed {}", r.rel_error);
            let r = check_gradients(&[phi], 1e-5, |g, p| loss_pit(g, p[0])).unwrap();
            assert!(r.rel_error < 1e-4, "pit {}", r.rel_error);
        }
    }

    proptest! {
        #[test]
        fn cyc_nonnegative_and_walks_stochastic(
            vals in proptest::collection::vec(-1.0f64..1.0, 9),
            tau in 0.05f64..2.0,
        ) {
            let phi = Array::new(vec![3, 3], vals).unwrap();
            let a = TransitionMatrix::image_to_sound(&phi, tau).unwrap();
            let b = TransitionMatrix::sound_to_image(&phi, tau).unwrap();
            prop_assert!(a.stochastic_error() < 1e-9);
            prop_assert!(b.stochastic_error() < 1e-9);
            let l = eval(&phi, |g, p| loss_cyc(g, p, None, tau)).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn lower_temperature_sharpens_rows(
            vals in proptest::collection::vec(-1.0f64..1.0, 6),
            tau in 0.05f64..2.0,
            factor in 0.1f64..0.99,
        ) {
            let phi = Array::new(vec![2, 3], vals).unwrap();
            let hot = TransitionMatrix::image_to_sound(&phi, tau).unwrap();
            let cold = TransitionMatrix::image_to_sound(&phi, tau * factor).unwrap();
            for r in 0..2 {
                let mh = hot.probs.row(r).iter().copied().fold(0.0, f64::max);
                let mc = cold.probs.row(r).iter().copied().fold(0.0, f64::max);
                prop_assert!(mc >= mh - 1e-15);
            }
        }

        #[test]
        fn pit_bounded_by_any_fixed_pairing(vals in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let phi = Array::new(vec![3, 3], vals).unwrap();
            let l = eval(&phi, loss_pit).unwrap();
            for perm in permutations(3) {
                let fixed: f64 = perm.iter().enumerate().map(|(i, &j)| phi.get2(i, j)).sum();
                prop_assert!(l <= -fixed + 1e-12);
            }
        }
    }
}
