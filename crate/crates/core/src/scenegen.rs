//! Procedural audio-visual scenes with known ground truth.
//!
//! Every class owns a fixed visual signature and a fixed audio signature.
//! A scene places its class's visual signature on a contiguous block of grid
//! regions (the ground-truth mask) and fills every other region with noise;
//! its audio is the class audio signature plus noise. A mixture sums the audio
//! signatures of `k` scenes of distinct classes, the feature-space analogue
//! of adding waveforms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arrayfile;
use crate::autodiff::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub grid: usize,
    pub source_extent: usize,
    pub visual_noise_sigma: f64,
    pub audio_noise_sigma: f64,
    pub shift_noise_sigma: f64,
    /// Orthonormalize the class signatures after drawing them.
    pub orthonormalize: bool,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_classes: 8,
            d_v: 32,
            d_a: 32,
            grid: 8,
            source_extent: 4,
            visual_noise_sigma: 0.1,
            audio_noise_sigma: 0.1,
            shift_noise_sigma: 0.1,
            orthonormalize: true,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.grid < 2 {
            return bad(format!("grid must be >= 2, got {}", self.grid));
        }
        if self.d_v == 0 || self.d_a == 0 {
            return bad("feature dimensions must be >= 1".into());
        }
        if self.source_extent == 0 || self.source_extent > self.grid * self.grid {
            return bad(format!(
                "source_extent {} must lie in 1..={}",
                self.source_extent,
                self.grid * self.grid
            ));
        }
        for (name, s) in [
            ("visual_noise_sigma", self.visual_noise_sigma),
            ("audio_noise_sigma", self.audio_noise_sigma),
            ("shift_noise_sigma", self.shift_noise_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be >= 0, got {s}"));
            }
        }
        if self.orthonormalize && self.num_classes > self.d_v.min(self.d_a) {
            return bad(format!(
                "cannot orthonormalize {} signatures in dimension min({}, {})",
                self.num_classes, self.d_v, self.d_a
            ));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    /// Block height and width used for a source of `source_extent` regions.
    pub fn block_dims(&self) -> (usize, usize) {
        let e = self.source_extent;
        let w = (e as f64).sqrt().ceil() as usize;
        (e.div_ceil(w), w)
    }
}

/// Fixed per-class signatures drawn from a [`WorldSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `[num_classes × D_v]`
    pub visual: Array,
    /// `[num_classes × D_a]`
    pub audio: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[g² × D_v]`, row-major over the grid.
    pub regions: Array,
    /// `[D_a]`
    pub audio: Array,
    pub class_id: usize,
    /// `[g × g]` of 0/1.
    pub mask: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub scenes: Vec<Scene>,
    /// A second, independently placed draw of each scene's class.
    pub second_views: Vec<Scene>,
    pub mixed_audio: Array,
    pub shifted_mixed_audio: Array,
}

impl Mixture {
    pub fn k(&self) -> usize {
        self.scenes.len()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.scenes.iter().map(|s| s.class_id).collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        })
        .collect()
}

/// Modified Gram-Schmidt over rows, in order.
fn orthonormalize_rows(rows: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        normalize(&mut rows[i])?;
    }
    Ok(())
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::Domain("degenerate signature draw".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

pub fn make_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |d: usize| -> Result<Array> {
        let mut rows: Vec<Vec<f64>> = (0..spec.num_classes).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
        if spec.orthonormalize {
            orthonormalize_rows(&mut rows)?;
        } else {
            for r in &mut rows {
                normalize(r)?;
            }
        }
        Array::from_rows(&rows)
    };
    let visual = draw(spec.d_v)?;
    let audio = draw(spec.d_a)?;
    Ok(World { spec: spec.clone(), visual, audio })
}

impl World {
    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.spec.num_classes {
            return Err(Error::Parameter(format!(
                "class {class_id} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    pub fn sample_scene(&self, class_id: usize, seed: u64) -> Result<Scene> {
        self.check_class(class_id)?;
        let spec = &self.spec;
        let g = spec.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let (h, w) = spec.block_dims();
        let top = rng.gen_range(0..=g - h);
        let left = rng.gen_range(0..=g - w);
        let mut mask = Array::zeros(&[g, g]);
        for cell in 0..spec.source_extent {
            let (r, c) = (top + cell / w, left + cell % w);
            mask.data_mut()[r * g + c] = 1.0;
        }

        let m = g * g;
        let signature = self.visual.row(class_id);
        let mut regions = Array::new(vec![m, spec.d_v], gaussian_vec(&mut rng, m * spec.d_v, spec.visual_noise_sigma))?;
        for r in 0..m {
            if mask.data()[r] == 1.0 {
                for (x, s) in regions.data_mut()[r * spec.d_v..(r + 1) * spec.d_v].iter_mut().zip(signature) {
                    *x += s;
                }
            }
        }

        let mut audio = gaussian_vec(&mut rng, spec.d_a, spec.audio_noise_sigma);
        for (x, s) in audio.iter_mut().zip(self.audio.row(class_id)) {
            *x += s;
        }

        Ok(Scene {
            regions,
            audio: Array::vector(audio),
            class_id,
            mask,
        })
    }

    pub fn sample_mixture(&self, k: usize, seed: u64) -> Result<Mixture> {
        if k < 2 || k > self.spec.num_classes {
            return Err(Error::Parameter(format!(
                "mixture size k = {k} must lie in 2..={}",
                self.spec.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = index::sample(&mut rng, self.spec.num_classes, k).into_vec();
        let mut scenes = Vec::with_capacity(k);
        let mut second_views = Vec::with_capacity(k);
        for &c in &classes {
            let (s1, s2) = (rng.gen::<u64>(), rng.gen::<u64>());
            scenes.push(self.sample_scene(c, s1)?);
            second_views.push(self.sample_scene(c, s2)?);
        }

        let d_a = self.spec.d_a;
        let mut clean = vec![0.0; d_a];
        for &c in &classes {
            for (x, s) in clean.iter_mut().zip(self.audio.row(c)) {
                *x += s;
            }
        }
        let noisy = |rng: &mut ChaCha8Rng, sigma: f64| -> Array {
            let noise = gaussian_vec(rng, d_a, sigma);
            Array::vector(clean.iter().zip(noise).map(|(c, n)| c + n).collect())
        };
        let mixed_audio = noisy(&mut rng, self.spec.audio_noise_sigma);
        let shifted_mixed_audio = noisy(&mut rng, self.spec.shift_noise_sigma);

        Ok(Mixture {
            scenes,
            second_views,
            mixed_audio,
            shifted_mixed_audio,
        })
    }
}

// ---- manifests -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 64_000, val: 200, test: 200 }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Seed of example `index` in `split`. The split occupies the top byte, so
/// seed ranges of different splits never overlap.
pub fn example_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    assert!(index < 1 << 32, "example index {index} too large");
    (split.code() << 56) | ((dataset_seed & 0xFF_FFFF) << 32) | index as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub world: WorldSpec,
    pub k: usize,
    pub dataset_seed: u64,
    pub splits: BTreeMap<Split, Vec<ManifestEntry>>,
}

pub fn dataset_manifest(world: &WorldSpec, k: usize, sizes: SplitSizes, seed: u64) -> Manifest {
    let splits = Split::ALL
        .into_iter()
        .map(|s| {
            let entries = (0..sizes.get(s))
                .map(|index| ManifestEntry { index, seed: example_seed(seed, s, index) })
                .collect();
            (s, entries)
        })
        .collect();
    Manifest { world: world.clone(), k, dataset_seed: seed, splits }
}

impl Manifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }
}

fn scene_arrays(prefix: &str, s: &Scene, out: &mut Vec<(String, Array)>) {
    out.push((format!("{prefix}.regions"), s.regions.clone()));
    out.push((format!("{prefix}.mask"), s.mask.clone()));
    out.push((format!("{prefix}.audio"), s.audio.clone()));
}

/// Arrays describing one mixture, in export order.
pub fn mixture_arrays(mix: &Mixture) -> Vec<(String, Array)> {
    let mut out = Vec::new();
    for (i, (s, v)) in mix.scenes.iter().zip(&mix.second_views).enumerate() {
        scene_arrays(&format!("image{i}"), s, &mut out);
        scene_arrays(&format!("image{i}.view2"), v, &mut out);
    }
    out.push(("mixed_audio".into(), mix.mixed_audio.clone()));
    out.push(("shifted_mixed_audio".into(), mix.shifted_mixed_audio.clone()));
    out.push((
        "class_ids".into(),
        Array::vector(mix.class_ids().into_iter().map(|c| c as f64).collect()),
    ));
    out
}

/// Writes `manifest.json`, `world.bin` and one `<split>/<index>.bin` per example.
pub fn export_dataset(world: &World, manifest: &Manifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    arrayfile::write(
        &dir.join("world.bin"),
        &[
            ("visual_signatures".into(), world.visual.clone()),
            ("audio_signatures".into(), world.audio.clone()),
        ],
    )?;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for entry in manifest.entries(split) {
            let mix = world.sample_mixture(manifest.k, entry.seed)?;
            arrayfile::write(&sub.join(format!("{:06}.bin", entry.index)), &mixture_arrays(&mix))?;
        }
    }
    Ok(())
}
