//! Temporal input streams: datasets, image patchification, the
//! fixation/saccade protocol, and the synthetic sequence generator used for
//! desk-scale experiments.
//!
//! A stream is a sequence of [`StreamEvent`]s. Consecutive events from the
//! same source carry `y = +1` (fixation); the first event after a source
//! switch carries `y = -1` (saccade). The sign is the broadcast label of the
//! binary hinge classification downstream.

use crate::error::{ClappError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One dataset element: an image `[C,H,W]` or a generic sequence `[T,D]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u32,
    pub tensor: Tensor<f32>,
    pub label: Option<usize>,
}

/// An in-memory dataset with unique sample ids.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut ids: Vec<u32> = samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != samples.len() {
            return Err(ClappError::input("duplicate sample ids in dataset"));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One time step of input.
#[derive(Clone, Debug)]
pub struct StreamEvent {
    /// Patch or frame fed to the encoder.
    pub x: Tensor<f32>,
    /// Global time index of the event.
    pub t: usize,
    /// Id of the sample the patch came from.
    pub source_id: u32,
    /// +1 for fixation, -1 for the first event after a saccade.
    pub y: i8,
}

/// Regular patch grid over an image.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
}

impl PatchGrid {
    pub fn new(patch_size: usize, stride: usize) -> Self {
        Self { patch_size, stride }
    }

    /// Rows/cols of the grid over an HxW image; errors when non-integral.
    pub fn counts(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let rows = self.axis_count(h)?;
        let cols = self.axis_count(w)?;
        Ok((rows, cols))
    }

    fn axis_count(&self, extent: usize) -> Result<usize> {
        if self.stride == 0 || self.patch_size == 0 {
            return Err(ClappError::dimension("patch size/stride must be >= 1".into()));
        }
        if extent < self.patch_size {
            return Err(ClappError::dimension(format!(
                "patch {} larger than image extent {}",
                self.patch_size, extent
            )));
        }
        let span = extent - self.patch_size;
        if span % self.stride != 0 {
            return Err(ClappError::dimension(format!(
                "non-integral grid: ({} - {}) not divisible by stride {}",
                extent, self.patch_size, self.stride
            )));
        }
        Ok(span / self.stride + 1)
    }
}

/// Cut an image `[C,H,W]` into columns of patches, each column ordered top
/// to bottom. Every (image, column) pair is an independent temporal sequence.
pub fn patchify(image: &Tensor<f32>, grid: &PatchGrid) -> Result<Vec<Vec<Tensor<f32>>>> {
    let (c, h, w) = match image.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(ClappError::dimension(format!(
                "patchify expects [C,H,W], got {:?}",
                image.shape()
            )))
        }
    };
    let (rows, cols) = grid.counts(h, w)?;
    let p = grid.patch_size;
    let mut columns = Vec::with_capacity(cols);
    for col in 0..cols {
        let x0 = col * grid.stride;
        let mut column = Vec::with_capacity(rows);
        for row in 0..rows {
            let y0 = row * grid.stride;
            let mut data = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for dy in 0..p {
                    let base = (ch * h + y0 + dy) * w + x0;
                    data.extend_from_slice(&image.data()[base..base + p]);
                }
            }
            column.push(Tensor::new(vec![c, p, p], data)?);
        }
        columns.push(column);
    }
    Ok(columns)
}

/// Collapse channels to their mean and normalize to zero mean, unit variance
/// over the image. The fixed preprocessor for image pipelines.
pub fn grayscale_normalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(ClappError::dimension("expected [C,H,W]".into())),
    };
    let mut gray = vec![0.0f32; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            gray[i] += image.data()[ch * h * w + i];
        }
    }
    let inv_c = 1.0 / c as f32;
    for v in gray.iter_mut() {
        *v *= inv_c;
    }
    let n = (h * w) as f32;
    let mean = gray.iter().sum::<f32>() / n;
    let var = gray.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv_std = 1.0 / var.sqrt().max(1e-6);
    for v in gray.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    Tensor::new(vec![1, h, w], gray)
}

/// How samples are turned into temporal sequences.
#[derive(Clone, Debug)]
pub enum SequenceLayout {
    /// `[T,D]` samples: one sequence per sample, rows as steps.
    Rows,
    /// `[C,H,W]` samples: grayscale-normalize, patchify, one sequence per
    /// (image, column).
    Patches(PatchGrid),
}

/// A single temporal sequence the stream can fixate on.
#[derive(Clone, Debug)]
struct Sequence {
    sample_index: usize,
    source_id: u32,
    steps: Vec<Tensor<f32>>,
}

/// Stateful generator implementing the fixation/saccade protocol: the step
/// position always advances; with probability `p_switch` the source is
/// resampled to a different sample first.
pub struct FixationSaccadeStream {
    sequences: Vec<Sequence>,
    /// sequences grouped by sample index, for saccade targeting.
    by_sample: Vec<Vec<usize>>,
    p_switch: f64,
    rng: ChaCha8Rng,
    current_seq: usize,
    pos: usize,
    t: usize,
    prev_source: Option<u32>,
}

impl FixationSaccadeStream {
    pub fn new(
        dataset: &Dataset,
        layout: &SequenceLayout,
        p_switch: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(ClappError::input("empty dataset"));
        }
        if !(0.0..=1.0).contains(&p_switch) {
            return Err(ClappError::input(format!(
                "p_switch {} outside [0,1]",
                p_switch
            )));
        }
        let mut sequences = Vec::new();
        let mut by_sample = vec![Vec::new(); dataset.len()];
        for (si, sample) in dataset.samples.iter().enumerate() {
            let seqs = sample_sequences(sample, layout)?;
            for steps in seqs {
                by_sample[si].push(sequences.len());
                sequences.push(Sequence {
                    sample_index: si,
                    source_id: sample.id,
                    steps,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let current_seq = rng.gen_range(0..sequences.len());
        Ok(Self {
            sequences,
            by_sample,
            p_switch,
            rng,
            current_seq,
            pos: 0,
            t: 0,
            prev_source: None,
        })
    }

    /// Number of steps across all sequences (one natural epoch).
    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(|s| s.steps.len()).sum()
    }

    fn saccade_target(&mut self) -> usize {
        let current_sample = self.sequences[self.current_seq].sample_index;
        let n = self.by_sample.len();
        if n <= 1 {
            // Nowhere else to look; stay on the same sample.
            let seqs = &self.by_sample[current_sample];
            return seqs[self.rng.gen_range(0..seqs.len())];
        }
        // Uniform over the other samples, then uniform over that sample's
        // sequences.
        let mut target = self.rng.gen_range(0..n - 1);
        if target >= current_sample {
            target += 1;
        }
        let seqs = &self.by_sample[target];
        seqs[self.rng.gen_range(0..seqs.len())]
    }

    pub fn next_event(&mut self) -> StreamEvent {
        if self.t > 0 {
            if self.rng.gen::<f64>() < self.p_switch {
                self.current_seq = self.saccade_target();
            }
            let len = self.sequences[self.current_seq].steps.len();
            self.pos = (self.pos + 1) % len;
        } else {
            self.pos = 0;
        }
        let seq = &self.sequences[self.current_seq];
        let source_id = seq.source_id;
        let y = match self.prev_source {
            Some(prev) if prev != source_id => -1,
            _ => 1,
        };
        let event = StreamEvent {
            x: seq.steps[self.pos % seq.steps.len()].clone(),
            t: self.t,
            source_id,
            y,
        };
        self.prev_source = Some(source_id);
        self.t += 1;
        event
    }

    /// Sample index of the source currently fixated.
    pub fn current_sample(&self) -> usize {
        self.sequences[self.current_seq].sample_index
    }

    /// Draw a uniformly random step from a different sample (for synchronous
    /// negative sampling).
    pub fn random_negative(&mut self) -> (u32, Tensor<f32>) {
        let current_sample = self.sequences[self.current_seq].sample_index;
        let n = self.by_sample.len();
        let seq_idx = if n <= 1 {
            self.current_seq
        } else {
            let mut target = self.rng.gen_range(0..n - 1);
            if target >= current_sample {
                target += 1;
            }
            let seqs = &self.by_sample[target];
            seqs[self.rng.gen_range(0..seqs.len())]
        };
        let seq = &self.sequences[seq_idx];
        let pos = self.rng.gen_range(0..seq.steps.len());
        (seq.source_id, seq.steps[pos].clone())
    }

    /// Peek at the true next step of the current sequence without moving the
    /// stream (the positive target in synchronous modes).
    pub fn peek_next_fixation(&self) -> Tensor<f32> {
        let seq = &self.sequences[self.current_seq];
        let len = seq.steps.len();
        seq.steps[(self.pos + 1) % len].clone()
    }

    /// Advance one fixation step unconditionally (no saccade draw).
    pub fn advance_fixation(&mut self) -> StreamEvent {
        let seq_len = self.sequences[self.current_seq].steps.len();
        if self.t > 0 {
            self.pos = (self.pos + 1) % seq_len;
        }
        let seq = &self.sequences[self.current_seq];
        let event = StreamEvent {
            x: seq.steps[self.pos].clone(),
            t: self.t,
            source_id: seq.source_id,
            y: 1,
        };
        self.prev_source = Some(seq.source_id);
        self.t += 1;
        event
    }
}

fn sample_sequences(sample: &Sample, layout: &SequenceLayout) -> Result<Vec<Vec<Tensor<f32>>>> {
    match layout {
        SequenceLayout::Rows => {
            let (t, d) = match sample.tensor.shape()[..] {
                [t, d] => (t, d),
                [d] => return Ok(vec![vec![Tensor::new(vec![d], sample.tensor.data().to_vec())?]]),
                _ => {
                    return Err(ClappError::dimension(format!(
                        "row layout expects [T,D], got {:?}",
                        sample.tensor.shape()
                    )))
                }
            };
            let mut steps = Vec::with_capacity(t);
            for row in 0..t {
                steps.push(Tensor::new(
                    vec![d],
                    sample.tensor.data()[row * d..(row + 1) * d].to_vec(),
                )?);
            }
            Ok(vec![steps])
        }
        SequenceLayout::Patches(grid) => {
            let gray = grayscale_normalize(&sample.tensor)?;
            Ok(patchify(&gray, grid)?)
        }
    }
}

/// Convenience wrapper emitting `length` events.
pub fn fixation_saccade_stream(
    dataset: &Dataset,
    layout: &SequenceLayout,
    p_switch: f64,
    length: usize,
    rng_seed: u64,
) -> Result<Vec<StreamEvent>> {
    let mut stream = FixationSaccadeStream::new(dataset, layout, p_switch, rng_seed)?;
    Ok((0..length).map(|_| stream.next_event()).collect())
}

/// Parameters of the synthetic sequence generator.
///
/// Classes are built hierarchically from a pool of orthonormal feature atoms:
/// a class is an (atom pair, sign) combination. Every step mixes the pair
/// with a smooth zero-mean amplitude, so class identity is carried by which
/// atoms co-occur within a step and with what relative sign, not by the
/// time-averaged mean of the raw input.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub steps: usize,
    pub noise_level: f32,
}

/// Generate a deterministic synthetic dataset of smooth class trajectories.
///
/// With `noise_level = 0` two samples of a class are identical; consecutive
/// steps of one sample are mutually predictive while cross-class steps are
/// not.
pub fn synthetic_sequence_dataset(spec: &SyntheticSpec, rng_seed: u64) -> Result<Dataset> {
    if spec.n_classes < 2 {
        return Err(ClappError::input("need at least 2 classes"));
    }
    let n_pairs = spec.n_classes.div_ceil(2);
    let n_atoms = 2 * n_pairs;
    if spec.dim < n_atoms {
        return Err(ClappError::input(format!(
            "dim {} too small for {} atoms",
            spec.dim, n_atoms
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let atoms = orthonormal_atoms(n_atoms, spec.dim, &mut rng);

    // Class trajectory parameters are drawn once per class so that samples of
    // a class share the exact same clean trajectory.
    struct ClassSpec {
        pair: usize,
        sign: f32,
        freq: f32,
        phase: f32,
        env_freq: f32,
        env_phase: f32,
    }
    let classes: Vec<ClassSpec> = (0..spec.n_classes)
        .map(|k| ClassSpec {
            pair: k / 2,
            sign: if k % 2 == 0 { 1.0 } else { -1.0 },
            freq: 1.0 + rng.gen_range(0.0..2.0f32),
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
            env_freq: 0.5 + rng.gen_range(0.0..1.0f32),
            env_phase: rng.gen_range(0.0..std::f32::consts::TAU),
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    let mut id = 0u32;
    for (k, cs) in classes.iter().enumerate() {
        let a0 = &atoms[2 * cs.pair];
        let a1 = &atoms[2 * cs.pair + 1];
        for _ in 0..spec.samples_per_class {
            let mut data = Vec::with_capacity(spec.steps * spec.dim);
            for t in 0..spec.steps {
                let phase = std::f32::consts::TAU * cs.freq * t as f32 / spec.steps as f32;
                let amp = (phase + cs.phase).sin();
                let env = 0.6
                    + 0.4
                        * (std::f32::consts::TAU * cs.env_freq * t as f32 / spec.steps as f32
                            + cs.env_phase)
                            .cos();
                for d in 0..spec.dim {
                    let clean = amp * a0[d] + cs.sign * amp * env * a1[d];
                    let noise = if spec.noise_level > 0.0 {
                        spec.noise_level * gaussian(&mut rng)
                    } else {
                        0.0
                    };
                    data.push(clean + noise);
                }
            }
            samples.push(Sample {
                id,
                tensor: Tensor::new(vec![spec.steps, spec.dim], data)?,
                label: Some(k),
            });
            id += 1;
        }
    }
    Dataset::new(samples)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; two uniforms per draw keeps the stream deterministic.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

fn orthonormal_atoms(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    // Gram-Schmidt over random Gaussian vectors.
    let mut atoms: Vec<Vec<f32>> = Vec::with_capacity(n);
    while atoms.len() < n {
        let mut v: Vec<f32> = (0..dim).map(|_| gaussian(rng)).collect();
        for a in &atoms {
            let proj: f32 = v.iter().zip(a).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(a) {
                *x -= proj * y;
            }
        }
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            atoms.push(v);
        }
    }
    atoms
}

// ---------------------------------------------------------------------------
// Dataset directory format: index.json + raw little-endian float32 blobs
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: u32,
    shape: Vec<usize>,
    dtype: String,
    path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    samples: Vec<IndexEntry>,
}

/// Write a dataset as `index.json` plus one raw f32le blob per sample.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let path = format!("s_{:06}.bin", sample.id);
        let mut file = std::fs::File::create(dir.join(&path))?;
        let mut bytes = Vec::with_capacity(sample.tensor.len() * 4);
        for v in sample.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
        entries.push(IndexEntry {
            id: sample.id,
            shape: sample.tensor.shape().to_vec(),
            dtype: "f32le".to_string(),
            path,
            label: sample.label,
        });
    }
    let index = IndexFile { samples: entries };
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(dir.join("index.json"), json)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(ClappError::input(format!(
            "dataset index not found: {}",
            index_path.display()
        )));
    }
    let index: IndexFile = serde_json::from_str(&std::fs::read_to_string(index_path)?)?;
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in index.samples {
        if entry.dtype != "f32le" {
            return Err(ClappError::input(format!(
                "unsupported dtype {:?} for sample {}",
                entry.dtype, entry.id
            )));
        }
        let mut file = std::fs::File::open(dir.join(&entry.path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let expected: usize = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(ClappError::input(format!(
                "blob {} has {} bytes, shape {:?} needs {}",
                entry.path,
                bytes.len(),
                entry.shape,
                expected
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        samples.push(Sample {
            id: entry.id,
            tensor: Tensor::new(entry.shape, data)?,
            label: entry.label,
        });
    }
    Dataset::new(samples)
}
