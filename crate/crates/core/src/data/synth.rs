//! Planted-patch retrieval data.
//!
//! Every identity owns a signature: a square patch tiled by `blocks × blocks`
//! constant sparse channel vectors. Its query and gallery maps both carry the
//! signature, each at an independent grid-snapped position, over a
//! low-amplitude noise background with a few fresh clutter patches.
//! Distractors are gallery-only maps with their own signatures. Queries may
//! be viewed from the side or back (fixed channel permutation and
//! attenuation), occluded (a bright noise square) or cropped (a zeroed
//! border band).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::manifest::{ManifestRecord, Role, Split};
use crate::error::{Error, Result};
use crate::pyramid::FeatureMap;
use crate::retrieval::{QueryAttributes, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub train_identities: usize,
    pub val_identities: usize,
    pub test_identities: usize,
    pub distractors: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square signature patch.
    pub signature_size: usize,
    /// Constant blocks per signature side.
    pub signature_blocks: usize,
    /// Signature and clutter corners are multiples of this.
    pub placement_stride: usize,
    /// Probability that a channel is active in a block or clutter vector.
    pub density: f64,
    /// Background values are uniform in `[0, noise)`.
    pub noise: f64,
    /// Each map gets between 1 and this many clutter patches (0 disables).
    pub clutter_patches: usize,
    pub clutter_size: usize,
    pub occlusion_rate: f64,
    pub cropping_rate: f64,
    pub view_rate: f64,
    pub occluder_size: usize,
    /// Cropped band width as a fraction of the cropped extent.
    pub crop_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_identities: 200,
            val_identities: 0,
            test_identities: 50,
            distractors: 200,
            channels: 16,
            height: 12,
            width: 12,
            signature_size: 8,
            signature_blocks: 2,
            placement_stride: 4,
            density: 0.25,
            noise: 0.05,
            clutter_patches: 2,
            clutter_size: 4,
            occlusion_rate: 0.0,
            cropping_rate: 0.0,
            view_rate: 0.0,
            occluder_size: 4,
            crop_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let (h, w) = (self.height, self.width);
        if self.channels == 0 || h == 0 || w == 0 {
            return fail("channels, height and width must be positive".into());
        }
        if self.signature_size == 0 || self.signature_size > h.min(w) {
            return fail(format!(
                "signature of size {} does not fit a {h}x{w} map",
                self.signature_size
            ));
        }
        if self.signature_blocks == 0 || !self.signature_size.is_multiple_of(self.signature_blocks) {
            return fail(format!(
                "signature size {} is not divisible into {} blocks",
                self.signature_size, self.signature_blocks
            ));
        }
        if self.placement_stride == 0 {
            return fail("placement_stride must be positive".into());
        }
        if self.clutter_patches > 0 && (self.clutter_size == 0 || self.clutter_size > h.min(w)) {
            return fail(format!("clutter size {} does not fit", self.clutter_size));
        }
        if self.occluder_size == 0 || self.occluder_size > h.min(w) {
            return fail(format!("occluder size {} does not fit", self.occluder_size));
        }
        for (name, r) in [
            ("occlusion_rate", self.occlusion_rate),
            ("cropping_rate", self.cropping_rate),
            ("view_rate", self.view_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return fail(format!("density must lie in (0, 1], got {}", self.density));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction < 1.0) {
            return fail(format!("crop_fraction must lie in (0, 1), got {}", self.crop_fraction));
        }
        if self.train_identities + self.val_identities + self.test_identities == 0 {
            return fail("at least one identity is required".into());
        }
        Ok(())
    }
}

/// Independent per-query perturbation draws.
pub fn sample_attributes<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> QueryAttributes {
    let view = if rng.random_bool(spec.view_rate) {
        if rng.random_bool(0.5) {
            View::Side
        } else {
            View::Back
        }
    } else {
        View::Front
    };
    QueryAttributes {
        view,
        occluded: rng.random_bool(spec.occlusion_rate),
        cropped: rng.random_bool(spec.cropping_rate),
    }
}

fn sparse_vector<R: Rng + ?Sized>(c: usize, density: f64, rng: &mut R) -> Vec<f32> {
    let mut v: Vec<f32> = (0..c)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(0.5f32..1.0)
            } else {
                0.0
            }
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        let k = rng.random_range(0..c);
        v[k] = rng.random_range(0.5f32..1.0);
    }
    v
}

fn snapped<R: Rng + ?Sized>(extent: usize, size: usize, stride: usize, rng: &mut R) -> usize {
    let slots = (extent - size) / stride + 1;
    rng.random_range(0..slots) * stride
}

fn fill_rect(map: &mut FeatureMap<f32>, y0: usize, x0: usize, h: usize, w: usize, v: &[f32]) {
    for (ch, &val) in v.iter().enumerate() {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                map.set(ch, y, x, val);
            }
        }
    }
}

struct Signature {
    blocks: Vec<Vec<f32>>,
}

impl Signature {
    fn draw<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        let n = spec.signature_blocks * spec.signature_blocks;
        Signature {
            blocks: (0..n).map(|_| sparse_vector(spec.channels, spec.density, rng)).collect(),
        }
    }
}

/// Background, clutter and the planted signature.
fn base_map<R: Rng + ?Sized>(spec: &SynthSpec, sig: &Signature, rng: &mut R) -> FeatureMap<f32> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let noise = spec.noise as f32;
    let data = (0..c * h * w)
        .map(|_| if noise > 0.0 { rng.random_range(0.0..noise) } else { 0.0 })
        .collect();
    let mut map = FeatureMap::new(c, h, w, data).expect("validated dims");
    if spec.clutter_patches > 0 {
        let k = rng.random_range(1..=spec.clutter_patches);
        for _ in 0..k {
            let y = snapped(h, spec.clutter_size, spec.placement_stride, rng);
            let x = snapped(w, spec.clutter_size, spec.placement_stride, rng);
            let v = sparse_vector(c, spec.density, rng);
            fill_rect(&mut map, y, x, spec.clutter_size, spec.clutter_size, &v);
        }
    }
    let y0 = snapped(h, spec.signature_size, spec.placement_stride, rng);
    let x0 = snapped(w, spec.signature_size, spec.placement_stride, rng);
    let b = spec.signature_size / spec.signature_blocks;
    for (k, v) in sig.blocks.iter().enumerate() {
        let (by, bx) = (k / spec.signature_blocks, k % spec.signature_blocks);
        fill_rect(&mut map, y0 + by * b, x0 + bx * b, b, b, v);
    }
    map
}

/// Deterministic channel transform of a viewpoint tag.
pub fn apply_view(map: &mut FeatureMap<f32>, view: View) {
    let (c, plane) = (map.channels(), map.height() * map.width());
    let src = map.data().to_vec();
    let (source_of, gain): (Box<dyn Fn(usize) -> usize>, f32) = match view {
        View::Front => return,
        View::Side => (Box::new(move |ch| c - 1 - ch), 1.0),
        View::Back => (Box::new(move |ch| (ch + c / 2) % c), 0.5),
    };
    for ch in 0..c {
        let from = source_of(ch);
        for i in 0..plane {
            map.data_mut()[ch * plane + i] = gain * src[from * plane + i];
        }
    }
}

fn occlude<R: Rng + ?Sized>(spec: &SynthSpec, map: &mut FeatureMap<f32>, rng: &mut R) {
    let s = spec.occluder_size;
    let y0 = rng.random_range(0..=spec.height - s);
    let x0 = rng.random_range(0..=spec.width - s);
    for ch in 0..spec.channels {
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                map.set(ch, y, x, rng.random_range(0.0f32..1.0));
            }
        }
    }
}

fn crop<R: Rng + ?Sized>(spec: &SynthSpec, map: &mut FeatureMap<f32>, rng: &mut R) {
    let (h, w) = (spec.height, spec.width);
    let side = rng.random_range(0..4);
    let extent = if side < 2 { h } else { w };
    let band = ((spec.crop_fraction * extent as f64).round() as usize).clamp(1, extent - 1);
    let (ys, xs) = match side {
        0 => (0..band, 0..w),
        1 => (h - band..h, 0..w),
        2 => (0..h, 0..band),
        _ => (0..h, w - band..w),
    };
    for ch in 0..spec.channels {
        for y in ys.clone() {
            for x in xs.clone() {
                map.set(ch, y, x, 0.0);
            }
        }
    }
}

fn record(id: String, role: Role, identity: String, split: Split, a: QueryAttributes) -> ManifestRecord {
    ManifestRecord {
        path: format!("features/{id}.spyr").into(),
        id,
        role,
        identity,
        view: a.view,
        occluded: a.occluded,
        cropped: a.cropped,
        split,
        category: None,
    }
}

/// Builds the dataset in memory. Values are `f32` so files written from it
/// reload bit-exactly.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut maps = Vec::new();
    let splits = [
        (Split::Train, spec.train_identities),
        (Split::Val, spec.val_identities),
        (Split::Test, spec.test_identities),
    ];
    for (split, count) in splits {
        for k in 0..count {
            let identity = format!("{split}-{k:04}");
            let sig = Signature::draw(spec, &mut rng);
            let attrs = sample_attributes(spec, &mut rng);
            let mut query = base_map(spec, &sig, &mut rng);
            apply_view(&mut query, attrs.view);
            if attrs.occluded {
                occlude(spec, &mut query, &mut rng);
            }
            if attrs.cropped {
                crop(spec, &mut query, &mut rng);
            }
            let gallery = base_map(spec, &sig, &mut rng);
            records.push(record(format!("q-{identity}"), Role::Query, identity.clone(), split, attrs));
            maps.push(query);
            records.push(record(
                format!("g-{identity}"),
                Role::Gallery,
                identity,
                split,
                QueryAttributes::default(),
            ));
            maps.push(gallery);
        }
    }
    for k in 0..spec.distractors {
        let identity = format!("distractor-{k:04}");
        let sig = Signature::draw(spec, &mut rng);
        maps.push(base_map(spec, &sig, &mut rng));
        records.push(record(
            format!("g-{identity}"),
            Role::Gallery,
            identity,
            Split::Test,
            QueryAttributes::default(),
        ));
    }
    Dataset::new(records, maps)
}
