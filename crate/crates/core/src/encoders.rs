//! Small parametric image and audio encoders.
//!
//! Both encoders are stacks of affine layers with `tanh` between them and an
//! L2 normalization at the end. The audio encoder has a shared trunk and `k`
//! separate heads, one per audio node of the random walk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, NodeId};
use crate::error::{Error, Result};

/// Guard for normalizing zero rows.
pub const NORM_EPS: f64 = 1e-8;

/// One affine layer, `y = x · weight + bias` with `weight: [in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array,
    pub bias: Array,
}

impl Affine {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn random(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, scale: f64) -> Affine {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if scale == 0.0 { 0.0 } else { rng.gen_range(-scale..=scale) })
                .collect()
        };
        let weight = Array::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
        let bias = Array::vector(draw(fan_out));
        Affine { weight, bias }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    pub layers: Vec<Affine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoderParams {
    pub trunk: Vec<Affine>,
    pub heads: Vec<Affine>,
}

/// Encoder sizes. `hidden_layers` counts hidden affine layers per encoder;
/// with zero the image encoder is a single affine map and each audio head
/// reads the raw features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_v: usize,
    pub d_a: usize,
    pub hidden: usize,
    pub c: usize,
    pub k: usize,
    pub hidden_layers: usize,
}

/// Unit-norm region embeddings laid out on a `grid × grid` map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub embeddings: Array,
    pub grid: usize,
}

impl EmbeddingGrid {
    pub fn new(embeddings: Array, grid: usize) -> Result<Self> {
        let (m, _) = embeddings.dims2()?;
        if m != grid * grid {
            return Err(Error::Dimension(format!(
                "{m} region embeddings do not fill a {grid}x{grid} grid"
            )));
        }
        Ok(EmbeddingGrid { embeddings, grid })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Both encoders' parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub image: ImageEncoderParams,
    pub audio: AudioEncoderParams,
}

/// Parameter leaves of a [`Model`] registered in one graph.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    image: Vec<(NodeId, NodeId)>,
    trunk: Vec<(NodeId, NodeId)>,
    heads: Vec<(NodeId, NodeId)>,
}

impl ModelNodes {
    /// Parameter ids in the same order as [`Model::named_arrays`].
    pub fn ids(&self) -> Vec<NodeId> {
        self.image
            .iter()
            .chain(&self.trunk)
            .chain(&self.heads)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

pub fn init_params(seed: u64, dims: EncoderDims, scale: f64) -> Result<Model> {
    let EncoderDims { d_v, d_a, hidden, c, k, hidden_layers } = dims;
    if d_v == 0 || d_a == 0 || c == 0 || k == 0 || (hidden_layers > 0 && hidden == 0) {
        return Err(Error::Config(format!("encoder dimensions must be >= 1, got {dims:?}")));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("init scale must be >= 0, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut image = Vec::new();
    let mut fan_in = d_v;
    for _ in 0..hidden_layers {
        image.push(Affine::random(&mut rng, fan_in, hidden, scale));
        fan_in = hidden;
    }
    image.push(Affine::random(&mut rng, fan_in, c, scale));

    let mut trunk = Vec::new();
    let mut fan_in = d_a;
    for _ in 0..hidden_layers {
        trunk.push(Affine::random(&mut rng, fan_in, hidden, scale));
        fan_in = hidden;
    }
    let heads = (0..k).map(|_| Affine::random(&mut rng, fan_in, c, scale)).collect();

    Ok(Model {
        image: ImageEncoderParams { layers: image },
        audio: AudioEncoderParams { trunk, heads },
    })
}

impl ImageEncoderParams {
    /// Single layer with identity weight and zero bias.
    pub fn identity(dim: usize) -> Self {
        ImageEncoderParams {
            layers: vec![Affine {
                weight: Array::identity(dim),
                bias: Array::zeros(&[dim]),
            }],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    /// Non-differentiable convenience around [`encode_image`].
    pub fn embed(&self, regions: &Array, grid: usize) -> Result<EmbeddingGrid> {
        let mut g = Graph::new();
        let layers: Vec<_> = self
            .layers
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        let x = g.constant(regions.clone());
        let e = encode_image(&mut g, &layers, x)?;
        EmbeddingGrid::new(g.value(e).clone(), grid)
    }
}

impl AudioEncoderParams {
    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn in_dim(&self) -> usize {
        self.trunk.first().unwrap_or(&self.heads[0]).in_dim()
    }

    /// Non-differentiable convenience: `[D_a] -> [k×C]`.
    pub fn embed(&self, features: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let trunk: Vec<_> = self
            .trunk
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        let heads: Vec<_> = self
            .heads
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        let x = g.constant(features.reshape(vec![1, features.len()])?);
        let out = encode_audio(&mut g, &trunk, &heads, x)?;
        let stacked = g.concat_rows(&out)?;
        Ok(g.value(stacked).clone())
    }
}

impl Model {
    pub fn dims(&self) -> EncoderDims {
        let hidden_layers = self.image.layers.len() - 1;
        EncoderDims {
            d_v: self.image.in_dim(),
            d_a: self.audio.in_dim(),
            hidden: if hidden_layers > 0 { self.image.layers[0].out_dim() } else { 0 },
            c: self.image.out_dim(),
            k: self.audio.k(),
            hidden_layers,
        }
    }

    pub fn register(&self, g: &mut Graph) -> ModelNodes {
        let mut reg = |layers: &[Affine]| -> Vec<(NodeId, NodeId)> {
            layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect()
        };
        ModelNodes {
            image: reg(&self.image.layers),
            trunk: reg(&self.audio.trunk),
            heads: reg(&self.audio.heads),
        }
    }

    /// Wraps already-registered leaves, given in [`Model::named_arrays`] order.
    pub fn nodes_from_ids(&self, ids: &[NodeId]) -> Result<ModelNodes> {
        let pairs = self.image.layers.len() + self.audio.trunk.len() + self.audio.heads.len();
        if ids.len() != 2 * pairs {
            return Err(Error::Dimension(format!("expected {} parameter ids, got {}", 2 * pairs, ids.len())));
        }
        let mut it = ids.chunks(2).map(|c| (c[0], c[1]));
        let image = it.by_ref().take(self.image.layers.len()).collect();
        let trunk = it.by_ref().take(self.audio.trunk.len()).collect();
        let heads = it.collect();
        Ok(ModelNodes { image, trunk, heads })
    }

    /// Flat, stably named parameter list.
    pub fn named_arrays(&self) -> Vec<(String, Array)> {
        let mut out = Vec::new();
        let mut push = |prefix: String, l: &Affine| {
            out.push((format!("{prefix}.weight"), l.weight.clone()));
            out.push((format!("{prefix}.bias"), l.bias.clone()));
        };
        for (i, l) in self.image.layers.iter().enumerate() {
            push(format!("image.{i}"), l);
        }
        for (i, l) in self.audio.trunk.iter().enumerate() {
            push(format!("audio.trunk.{i}"), l);
        }
        for (i, l) in self.audio.heads.iter().enumerate() {
            push(format!("audio.head.{i}"), l);
        }
        out
    }

    /// Rebuilds a model with the layout of `dims` from a named list.
    pub fn from_named(dims: EncoderDims, named: &[(String, Array)]) -> Result<Model> {
        let template = init_params(0, dims, 0.0)?;
        let expected = template.named_arrays();
        if expected.len() != named.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter arrays, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut arrays = Vec::with_capacity(named.len());
        for ((en, ea), (n, a)) in expected.iter().zip(named) {
            if en != n || ea.shape() != a.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {n} {:?} does not match expected {en} {:?}",
                    a.shape(),
                    ea.shape()
                )));
            }
            arrays.push(a.clone());
        }
        Ok(template.with_arrays(arrays))
    }

    /// Replaces every parameter, in [`Model::named_arrays`] order.
    pub fn with_arrays(&self, arrays: Vec<Array>) -> Model {
        let mut it = arrays.into_iter();
        let mut take = |layers: &[Affine]| -> Vec<Affine> {
            layers
                .iter()
                .map(|_| Affine {
                    weight: it.next().expect("weight"),
                    bias: it.next().expect("bias"),
                })
                .collect()
        };
        let image = take(&self.image.layers);
        let trunk = take(&self.audio.trunk);
        let heads = take(&self.audio.heads);
        Model {
            image: ImageEncoderParams { layers: image },
            audio: AudioEncoderParams { trunk, heads },
        }
    }

    pub fn arrays(&self) -> Vec<Array> {
        self.named_arrays().into_iter().map(|(_, a)| a).collect()
    }
}

/// Differentiable image encoder: `[m×D_v] -> [m×C]`, unit-norm rows.
pub fn encode_image(g: &mut Graph, layers: &[(NodeId, NodeId)], regions: NodeId) -> Result<NodeId> {
    let d_in = g.value(layers[0].0).shape()[0];
    let (_, d) = g.value(regions).dims2()?;
    if d != d_in {
        return Err(Error::Dimension(format!(
            "image encoder expects region features of dimension {d_in}, got {d}"
        )));
    }
    let mut h = regions;
    for (i, &(w, b)) in layers.iter().enumerate() {
        if i > 0 {
            h = g.tanh(h)?;
        }
        h = g.affine(h, w, b)?;
    }
    g.l2_normalize_rows(h, NORM_EPS)
}

/// Differentiable audio encoder: `[n×D_a]` features to `k` arrays of
/// `[n×C]` unit-norm embeddings, one per head.
pub fn encode_audio(
    g: &mut Graph,
    trunk: &[(NodeId, NodeId)],
    heads: &[(NodeId, NodeId)],
    features: NodeId,
) -> Result<Vec<NodeId>> {
    let d_in = g.value(trunk.first().unwrap_or(&heads[0]).0).shape()[0];
    let (_, d) = g.value(features).dims2()?;
    if d != d_in {
        return Err(Error::Dimension(format!(
            "audio encoder expects features of dimension {d_in}, got {d}"
        )));
    }
    let mut h = features;
    for &(w, b) in trunk {
        h = g.affine(h, w, b)?;
        h = g.tanh(h)?;
    }
    heads
        .iter()
        .map(|&(w, b)| {
            let e = g.affine(h, w, b)?;
            g.l2_normalize_rows(e, NORM_EPS)
        })
        .collect()
}

impl ModelNodes {
    pub fn encode_image(&self, g: &mut Graph, regions: NodeId) -> Result<NodeId> {
        encode_image(g, &self.image, regions)
    }

    pub fn encode_audio(&self, g: &mut Graph, features: NodeId) -> Result<Vec<NodeId>> {
        encode_audio(g, &self.trunk, &self.heads, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;

    fn dims() -> EncoderDims {
        EncoderDims { d_v: 5, d_a: 4, hidden: 6, c: 3, k: 2, hidden_layers: 1 }
    }

    fn random_regions(seed: u64, m: usize, d: usize) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::new(vec![m, d], (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn row_norm(a: &Array, r: usize) -> f64 {
        a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_encoder_on_one_hot_rows() {
        let enc = ImageEncoderParams::identity(4);
        let out = enc.embed(&Array::identity(4), 2).unwrap();
        assert_eq!(out.embeddings, Array::identity(4));
    }

    #[test]
    fn image_rows_are_unit_norm_and_deterministic() {
        let model = init_params(7, dims(), 0.5).unwrap();
        let x = random_regions(1, 9, 5);
        let a = model.image.embed(&x, 3).unwrap();
        let b = model.image.embed(&x, 3).unwrap();
        assert_eq!(a, b);
        for r in 0..9 {
            assert!((row_norm(&a.embeddings, r) - 1.0).abs() < 1e-9);
        }
        let wrong = random_regions(1, 9, 4);
        let err = model.image.embed(&wrong, 3).unwrap_err().to_string();
        assert!(err.contains("dimension 5") && err.contains("got 4"), "{err}");
    }

    #[test]
    fn image_encoder_is_permutation_equivariant() {
        let model = init_params(2, dims(), 0.5).unwrap();
        let x = random_regions(4, 4, 5);
        let perm = [2, 0, 3, 1];
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let px = g.gather_rows(xn, perm.to_vec()).unwrap();
        let a = model.image.embed(&x, 2).unwrap().embeddings;
        let b = model.image.embed(g.value(px), 2).unwrap().embeddings;
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.row(i), a.row(p));
        }
    }

    #[test]
    fn audio_heads() {
        let model = init_params(3, dims(), 0.5).unwrap();
        let f = Array::vector(vec![0.3, -0.2, 0.9, 0.1]);
        let out = model.audio.embed(&f).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        for r in 0..2 {
            assert!((row_norm(&out, r) - 1.0).abs() < 1e-9);
        }

        let mut same = model.audio.clone();
        same.heads[1] = same.heads[0].clone();
        let out = same.embed(&f).unwrap();
        assert_eq!(out.row(0), out.row(1));

        let single = init_params(3, EncoderDims { k: 1, ..dims() }, 0.5).unwrap();
        assert_eq!(single.audio.embed(&f).unwrap().shape(), &[1, 3]);

        assert!(model.audio.embed(&Array::vector(vec![1.0; 3])).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(0, dims(), 0.5).unwrap();
        let b = init_params(0, dims(), 0.5).unwrap();
        let c = init_params(1, dims(), 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let z = init_params(0, dims(), 0.0).unwrap();
        assert!(z.arrays().iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
        for a in a.arrays() {
            assert!(a.data().iter().all(|v| v.abs() <= 0.5));
        }
        assert!(init_params(0, EncoderDims { c: 0, ..dims() }, 0.5).is_err());
        assert!(init_params(0, dims(), -1.0).is_err());
    }

    #[test]
    fn named_round_trip() {
        let a = init_params(9, dims(), 0.5).unwrap();
        let b = Model::from_named(a.dims(), &a.named_arrays()).unwrap();
        assert_eq!(a, b);
        let mut bad = a.named_arrays();
        bad.pop();
        assert!(Model::from_named(a.dims(), &bad).is_err());
    }

    #[test]
    fn gradients_through_both_encoders() {
        for seed in 0..5 {
            let model = init_params(seed, dims(), 0.8).unwrap();
            let x = random_regions(seed + 100, 4, 5);
            let f = random_regions(seed + 200, 1, 4);
            let report = check_gradients(&model.arrays(), 1e-5, |g, p| {
                let image: Vec<_> = p[..4].chunks(2).map(|c| (c[0], c[1])).collect();
                let trunk: Vec<_> = p[4..6].chunks(2).map(|c| (c[0], c[1])).collect();
                let heads: Vec<_> = p[6..].chunks(2).map(|c| (c[0], c[1])).collect();
                let xn = g.constant(x.clone());
                let fn_ = g.constant(f.clone());
                let e = encode_image(g, &image, xn)?;
                let s = encode_audio(g, &trunk, &heads, fn_)?;
                let s = g.concat_rows(&s)?;
                let st = g.transpose(s)?;
                let d = g.matmul(e, st)?;
                let sm = g.softmax_rows(d, 0.5)?;
                let sq = g.hadamard(sm, d)?;
                g.sum(sq)
            })
            .unwrap();
            assert!(report.rel_error < 1e-4, "seed {seed}: {}", report.rel_error);
        }
    }
}
