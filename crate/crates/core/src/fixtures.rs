//! Seeded synthetic camera streams.
//!
//! Generative model, per stream:
//!
//! * `clusters` scene prototypes, each a standard-normal vector in `R^dim`
//!   scaled to unit length, and a per-prototype confidence offset drawn
//!   from `N(0, 1)`.
//! * The active prototype follows a sticky Markov chain: each frame keeps
//!   it with probability `stay_probability`, otherwise jumps to a uniformly
//!   chosen prototype (possibly the same one).
//! * The embedding is the prototype plus isotropic Gaussian noise of
//!   standard deviation `noise`.
//! * The student reports `0..=max_detections` boxes (uniform count). Each
//!   confidence is `sigmoid(confidence_logit_mean + offset + confidence_logit_std * z)`;
//!   box sides are log-uniform in `[8, 256]` px inside a 1920x1080 frame.
//! * The teacher sees every student box with confidence `0.5 + 0.5 * c`
//!   plus, with probability 0.3, one box the student missed.
//! * Frames are `frame_interval_ms` apart and declare `image_bytes` each.
//!
//! Randomness comes from ChaCha8 seeded with `seed`, using stream index `i`
//! as the generator's stream selector, so each file is reproducible on its
//! own.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, BBox, Detection, Embedding, FrameRecord, OracleLabels};

const FRAME_W: f64 = 1920.0;
const FRAME_H: f64 = 1080.0;
const MIN_SIDE: f64 = 8.0;
const MAX_SIDE: f64 = 256.0;
const CLASSES: u32 = 4;
const TEACHER_EXTRA: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub streams: usize,
    pub frames: usize,
    pub dim: usize,
    pub clusters: usize,
    pub seed: u64,
    pub stay_probability: f64,
    pub noise: f64,
    pub max_detections: usize,
    pub confidence_logit_mean: f64,
    pub confidence_logit_std: f64,
    pub image_bytes: u64,
    pub frame_interval_ms: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            streams: 15,
            frames: 2000,
            dim: 16,
            clusters: 4,
            seed: 7,
            stay_probability: 0.98,
            noise: 0.1,
            max_detections: 4,
            confidence_logit_mean: 0.5,
            confidence_logit_std: 1.0,
            image_bytes: 65_536,
            frame_interval_ms: 100,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("fixture dimension must be at least 1");
        }
        if self.clusters == 0 {
            return bad("fixture cluster count must be at least 1");
        }
        if self.streams == 0 {
            return bad("fixture stream count must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.stay_probability) {
            return bad("stay probability must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a non-negative number");
        }
        if !(self.confidence_logit_std >= 0.0 && self.confidence_logit_mean.is_finite()) {
            return bad("confidence parameters must be finite, spread non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedStream {
    pub frames: Vec<FrameRecord>,
    pub oracle: OracleLabels,
    /// Prototype index behind each frame.
    pub clusters: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let side = |rng: &mut ChaCha8Rng| (rng.random_range(MIN_SIDE.ln()..MAX_SIDE.ln())).exp();
    let w = side(rng);
    let h = side(rng);
    let x = rng.random_range(0.0..FRAME_W - w);
    let y = rng.random_range(0.0..FRAME_H - h);
    BBox::new(x, y, w, h)
}

pub fn generate_stream(spec: &FixtureSpec, index: usize) -> Result<GeneratedStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mut prototypes = Vec::with_capacity(spec.clusters);
    let mut offsets = Vec::with_capacity(spec.clusters);
    for _ in 0..spec.clusters {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| normal(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
        prototypes.push(v);
        offsets.push(normal(&mut rng));
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut clusters = Vec::with_capacity(spec.frames);
    let mut oracle = OracleLabels::new();
    let mut current = rng.random_range(0..spec.clusters);
    for i in 0..spec.frames {
        if i > 0 && !rng.random_bool(spec.stay_probability) {
            current = rng.random_range(0..spec.clusters);
        }
        let values: Vec<f64> = prototypes[current]
            .iter()
            .map(|c| c + spec.noise * normal(&mut rng))
            .collect();
        let embedding = Embedding::new(values)?;

        let count = rng.random_range(0..=spec.max_detections);
        let mut detections = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count + 1);
        for _ in 0..count {
            let logit = spec.confidence_logit_mean
                + offsets[current]
                + spec.confidence_logit_std * normal(&mut rng);
            let confidence = 1.0 / (1.0 + (-logit).exp());
            let class_id = rng.random_range(0..CLASSES);
            let bbox = random_box(&mut rng);
            detections.push(Detection::new(class_id, confidence, bbox)?);
            labels.push(Detection::new(class_id, 0.5 + 0.5 * confidence, bbox)?);
        }
        if rng.random_bool(TEACHER_EXTRA) {
            let class_id = rng.random_range(0..CLASSES);
            let confidence = rng.random_range(0.5..1.0);
            labels.push(Detection::new(class_id, confidence, random_box(&mut rng))?);
        }

        let frame_id = i as u64;
        oracle.insert(frame_id, labels);
        frames.push(FrameRecord {
            frame_id,
            timestamp_ms: frame_id * spec.frame_interval_ms,
            embedding,
            detections,
            image_bytes: spec.image_bytes,
        });
        clusters.push(current);
    }
    Ok(GeneratedStream {
        frames,
        oracle,
        clusters,
    })
}

pub fn stream_file_name(index: usize) -> String {
    format!("stream_{index:02}.ndjson")
}

pub fn oracle_file_name(index: usize) -> String {
    format!("oracle_{index:02}.ndjson")
}

/// Writes `stream_NN.ndjson` and `oracle_NN.ndjson` for every stream and
/// returns the stream paths.
pub fn write_fixtures(spec: &FixtureSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(spec.streams);
    for i in 0..spec.streams {
        let g = generate_stream(spec, i)?;
        let path = out_dir.join(stream_file_name(i));
        model::write_stream(&g.frames, &path)?;
        model::write_oracle(&g.oracle, out_dir.join(oracle_file_name(i)))?;
        paths.push(path);
    }
    Ok(paths)
}
