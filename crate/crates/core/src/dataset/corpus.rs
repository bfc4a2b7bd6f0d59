use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_motion, write_motion, MotionClip, SynthClip};
use crate::audio::{compute_logmel, read_features, read_wav, write_features, write_wav, FeatureSeq, LogMelConfig};
use crate::error::{contract_err, format_err, Result};
use crate::motion::{read_basis, write_basis, FlameBasis, VertexMask};

pub const MANIFEST: &str = "manifest.json";
pub const BASIS_FILE: &str = "basis.artb";
pub const MASK_FILE: &str = "mask.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<String>,
    /// Identity coefficients applied to every clip.
    pub beta: Vec<f32>,
}

/// A dataset directory: one ARTM/WAV/ARTF triple per clip plus basis and mask.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub names: Vec<String>,
    pub motions: Vec<MotionClip>,
    pub features: Vec<FeatureSeq>,
    pub basis: FlameBasis,
    pub mask: VertexMask,
    pub beta: Vec<f32>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Pairs of motion and features, in manifest order.
    pub fn pairs(&self) -> Vec<(MotionClip, FeatureSeq)> {
        self.motions.iter().cloned().zip(self.features.iter().cloned()).collect()
    }

    /// Restricts to the first `n` clips.
    pub fn truncate(&mut self, n: usize) {
        self.names.truncate(n);
        self.motions.truncate(n);
        self.features.truncate(n);
    }
}

pub fn clip_name(i: usize) -> String {
    format!("clip_{i:03}")
}

/// Writes synthetic clips in the corpus layout.
pub fn write_corpus(dir: &Path, clips: &[SynthClip], basis: &FlameBasis, mask: &VertexMask, beta: &[f32]) -> Result<()> {
    mask.validate(basis.vertex_count())?;
    if beta.len() != basis.shape_count() {
        return Err(contract_err!("beta has {} coefficients, basis expects {}", beta.len(), basis.shape_count()));
    }
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let name = clip_name(i);
        let mut w = BufWriter::new(File::create(dir.join(format!("{name}.artm")))?);
        write_motion(&mut w, &c.motion)?;
        w.flush()?;
        write_wav(BufWriter::new(File::create(dir.join(format!("{name}.wav")))?), &c.audio)?;
        let mut w = BufWriter::new(File::create(dir.join(format!("{name}.artf")))?);
        write_features(&mut w, &c.features)?;
        w.flush()?;
        names.push(name);
    }
    let mut w = BufWriter::new(File::create(dir.join(BASIS_FILE))?);
    write_basis(&mut w, basis)?;
    w.flush()?;
    fs::write(dir.join(MASK_FILE), mask.to_json()?)?;
    let manifest = Manifest { clips: names, beta: beta.to_vec() };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a corpus directory. Features come from the `.artf` file when present,
/// otherwise they are extracted from the `.wav`.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.clips.is_empty() {
        return Err(format_err!("manifest lists no clips"));
    }
    let basis = read_basis(&mut BufReader::new(File::open(dir.join(BASIS_FILE))?))?;
    let mask = VertexMask::from_json(&fs::read_to_string(dir.join(MASK_FILE))?)?;
    mask.validate(basis.vertex_count())?;
    if manifest.beta.len() != basis.shape_count() {
        return Err(format_err!("manifest beta length {} does not match basis", manifest.beta.len()));
    }
    let mut motions = Vec::new();
    let mut features = Vec::new();
    for name in &manifest.clips {
        motions.push(read_motion(&mut BufReader::new(File::open(dir.join(format!("{name}.artm")))?))?);
        let artf = dir.join(format!("{name}.artf"));
        let f = if artf.exists() {
            read_features(&mut BufReader::new(File::open(artf)?))?
        } else {
            let audio = read_wav(BufReader::new(File::open(dir.join(format!("{name}.wav")))?))?;
            compute_logmel(&audio, &LogMelConfig::default())?
        };
        features.push(f);
    }
    Ok(Corpus { names: manifest.clips, motions, features, basis, mask, beta: manifest.beta })
}
