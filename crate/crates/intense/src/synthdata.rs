//! Synthetic letter-sequence datasets with motif insertions.
//!
//! Every modality of a sample is a length-100 string over A, C, G, T.
//! `synthgene` inserts a class-specific motif independently per modality
//! with probability `p_m`, so relevance has a controllable ground truth.
//! `synthgene-tri` uses one shared motif; the label is the exclusive-or of
//! the insertion flags of the first two modalities, and the third modality
//! carries no signal at all.
//!
//! Generation draws a per-sample ChaCha stream from the master seed, so
//! samples are independent of one another and the output is reproducible
//! byte for byte.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ALPHABET;
use crate::error::{Error, Result};

/// Motif marking the positive class.
pub const POSITIVE_MOTIF: &str = "ACGTAGC";
/// Motif marking the negative class.
pub const NEGATIVE_MOTIF: &str = "GATGTAC";
/// Length of every modality string.
pub const SEQUENCE_LEN: usize = 100;
/// Length of both motifs.
pub const MOTIF_LEN: usize = 7;

/// One multimodal sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    /// Label in {-1, +1}.
    pub label: i8,
    /// Per-modality strings of length 100.
    pub mods: Vec<String>,
    /// Whether the motif was deliberately inserted, per modality.
    pub flags: Vec<bool>,
}

impl SequenceSample {
    pub fn label_f64(&self) -> f64 {
        self.label as f64
    }
}

/// Generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthGeneConfig {
    /// Insertion probability per modality.
    pub modality_probs: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl SynthGeneConfig {
    /// Ten modalities with signal in modalities 2, 4 and 7
    /// (p = 0.2, 0.3, 0.5), ten thousand samples.
    pub fn default_synthgene(seed: u64) -> Self {
        let mut probs = vec![0.0; 10];
        probs[1] = 0.2;
        probs[3] = 0.3;
        probs[6] = 0.5;
        SynthGeneConfig {
            modality_probs: probs,
            n_samples: 10_000,
            seed,
        }
    }

    /// Three modalities; the first two carry the shared motif with
    /// probability one half, the third never does.
    pub fn default_tri(seed: u64) -> Self {
        SynthGeneConfig {
            modality_probs: vec![0.5, 0.5, 0.0],
            n_samples: 10_000,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.modality_probs.is_empty() {
            return Err(Error::InvalidConfig("at least one modality required".into()));
        }
        if let Some(p) = self
            .modality_probs
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidConfig(format!(
                "insertion probability {p} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// A generated dataset plus its configuration echo.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: String,
    pub config: SynthGeneConfig,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn n_modalities(&self) -> usize {
        self.config.modality_probs.len()
    }
}

fn random_sequence(rng: &mut impl Rng) -> Vec<char> {
    (0..SEQUENCE_LEN)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())])
        .collect()
}

fn insert_motif(seq: &mut [char], motif: &str, rng: &mut impl Rng) {
    let offset = rng.gen_range(0..=SEQUENCE_LEN - MOTIF_LEN);
    for (k, c) in motif.chars().enumerate() {
        seq[offset + k] = c;
    }
}

/// Per-sample generator stream: sample `i` of a seeded run always sees the
/// same random values regardless of how other samples are produced.
fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate_sample(
    config: &SynthGeneConfig,
    label: i8,
    motif_for: impl Fn(i8) -> &'static str,
    stream: u64,
) -> SequenceSample {
    let mut rng = sample_rng(config.seed, stream);
    let mut mods = Vec::with_capacity(config.modality_probs.len());
    let mut flags = Vec::with_capacity(config.modality_probs.len());
    for &p in &config.modality_probs {
        let mut seq = random_sequence(&mut rng);
        let insert = p > 0.0 && rng.gen_bool(p);
        if insert {
            insert_motif(&mut seq, motif_for(label), &mut rng);
        }
        mods.push(seq.into_iter().collect());
        flags.push(insert);
    }
    SequenceSample { label, mods, flags }
}

/// Independent-modality dataset: exactly half the samples positive, the
/// class-specific motif overwriting 7 positions at a uniform offset with
/// probability `p_m` per modality. The sample order is a seeded shuffle.
pub fn generate_synthgene(config: &SynthGeneConfig) -> Result<Dataset> {
    config.validate()?;
    if !config.n_samples.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "n_samples must be even for exact class balance, got {}",
            config.n_samples
        )));
    }
    let motif_for = |label: i8| {
        if label > 0 {
            POSITIVE_MOTIF
        } else {
            NEGATIVE_MOTIF
        }
    };
    let half = config.n_samples / 2;
    let mut samples: Vec<SequenceSample> = (0..config.n_samples)
        .map(|i| {
            let label = if i < half { 1 } else { -1 };
            generate_sample(config, label, motif_for, i as u64)
        })
        .collect();
    shuffle(&mut samples, config.seed);
    Ok(Dataset {
        kind: "synthgene".into(),
        config: config.clone(),
        samples,
    })
}

/// XOR dataset: the shared motif is inserted independently per modality;
/// the label is +1 iff exactly one of the first two flags is set. Samples
/// are drawn and kept only while their class still has room, giving an
/// exactly balanced dataset.
pub fn generate_synthgene_tri(config: &SynthGeneConfig) -> Result<Dataset> {
    config.validate()?;
    if config.modality_probs.len() != 3 {
        return Err(Error::Contract(format!(
            "the XOR dataset needs exactly 3 modalities, got {}",
            config.modality_probs.len()
        )));
    }
    if !config.n_samples.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "n_samples must be even for exact class balance, got {}",
            config.n_samples
        )));
    }
    let half = config.n_samples / 2;
    let (mut pos, mut neg) = (0usize, 0usize);
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut stream = 0u64;
    while pos < half || neg < half {
        let mut candidate = generate_sample(config, 0, |_| POSITIVE_MOTIF, stream);
        stream += 1;
        let label = if candidate.flags[0] ^ candidate.flags[1] {
            1
        } else {
            -1
        };
        candidate.label = label;
        if label > 0 {
            if pos == half {
                continue;
            }
            pos += 1;
        } else {
            if neg == half {
                continue;
            }
            neg += 1;
        }
        samples.push(candidate);
    }
    shuffle(&mut samples, config.seed);
    Ok(Dataset {
        kind: "synthgene-tri".into(),
        config: config.clone(),
        samples,
    })
}

fn shuffle(samples: &mut [SequenceSample], seed: u64) {
    use rand::seq::SliceRandom;
    let mut rng = sample_rng(seed, u64::MAX);
    samples.shuffle(&mut rng);
}

/// True iff `motif` occurs as a contiguous substring of `seq`.
pub fn contains_motif(seq: &str, motif: &str) -> bool {
    seq.contains(motif)
}

/// Stratified 80/10/10 split, by class in stored order.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<SequenceSample>,
    pub validation: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

pub fn split_dataset(dataset: &Dataset) -> Split {
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for class in [1i8, -1] {
        let members: Vec<&SequenceSample> = dataset
            .samples
            .iter()
            .filter(|s| s.label == class)
            .collect();
        let n = members.len();
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        for (i, s) in members.into_iter().enumerate() {
            if i < n_train {
                split.train.push(s.clone());
            } else if i < n_train + n_val {
                split.validation.push(s.clone());
            } else {
                split.test.push(s.clone());
            }
        }
    }
    split
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    kind: String,
    config: SynthGeneConfig,
    n_modalities: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    label: i8,
    label01: u8,
    mods: Vec<String>,
    flags: Vec<bool>,
}

/// Writes a dataset as JSON Lines: a header object with the config echo,
/// then one object per sample. The file lands atomically (temp + rename).
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let file = std::fs::File::create(&tmp)?;
    let mut w = BufWriter::new(file);
    let header = HeaderLine {
        kind: dataset.kind.clone(),
        config: dataset.config.clone(),
        n_modalities: dataset.n_modalities(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        let line = SampleLine {
            label: s.label,
            label01: if s.label > 0 { 1 } else { 0 },
            mods: s.mods.clone(),
            flags: s.flags.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a dataset written by `write_jsonl`.
pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header: HeaderLine = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Contract("empty dataset file".into())),
    };
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleLine = serde_json::from_str(&line)?;
        if s.label != 1 && s.label != -1 {
            return Err(Error::Contract(format!(
                "label must be -1 or +1, got {}",
                s.label
            )));
        }
        samples.push(SequenceSample {
            label: s.label,
            mods: s.mods,
            flags: s.flags,
        });
    }
    Ok(Dataset {
        kind: header.kind,
        config: header.config,
        samples,
    })
}
