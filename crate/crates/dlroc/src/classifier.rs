//! Two-phase classification: offline model construction and online
//! energy-ratio label selection.
//!
//! Offline, training columns are normalized to unit norm and the dictionary
//! is either learned ([`DictionarySource::Learned`]) or taken directly from
//! the normalized raw data ([`DictionarySource::Raw`], the raw-data
//! baseline). Online, a test vector is sparse-coded against the full
//! concatenated dictionary and assigned the label whose block holds the
//! largest share of the code energy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::coding::{sparse_code_hybrid, sparse_code_omp, CoderStop, SparseCode};
use crate::learning::{learn, Dictionary, LabeledTrainingSet, LearnParams, LearnTrace};
use crate::{scalar, Error, Result, Scalar};

/// Sparse coder run online against the concatenated dictionary.
#[derive(Clone, Debug, PartialEq)]
pub enum CoderSpec<F> {
    /// Coordinate-descent coder on the hybrid objective.
    Hybrid {
        alpha: F,
        gamma: F,
        stop: CoderStop<F>,
    },
    /// Orthogonal matching pursuit with a residual stopping rule.
    Omp { residual_tol: F, max_atoms: usize },
}

/// Where [`fit`] obtains the model dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DictionarySource {
    /// Run the dictionary learner on the normalized training set.
    Learned,
    /// Use the normalized raw training columns as the dictionary; the
    /// per-label sizes are ignored.
    Raw,
}

/// Immutable classification model: labeled dictionary plus coder settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<F> {
    dictionary: Dictionary<F>,
    atoms: Array2<F>,
    coder: CoderSpec<F>,
    label_names: Vec<String>,
    normalize_inputs: bool,
}

/// Outcome of classifying one sample. `label` is `None` when the coder
/// returned an all-zero code, in which case the sample is unclassifiable
/// and the ratios are all zero.
#[derive(Clone, Debug)]
pub struct ClassificationResult<F> {
    /// Selected label in `1..=K`, or `None` for an unclassifiable sample.
    pub label: Option<usize>,
    pub energy_ratios: Vec<F>,
    pub code: SparseCode<F>,
    pub residual_norm: F,
    pub elapsed_secs: f64,
}

/// Scales every column to unit `l₂` norm.
pub fn normalize_columns<F: Scalar>(m: ArrayView2<F>) -> Result<Array2<F>> {
    crate::norms::ensure_finite(&m)?;
    let mut out = m.to_owned();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm == F::zero() {
            return Err(Error::ZeroColumn(j));
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Builds a model from raw (unnormalized) training blocks; see
/// [`fit_traced`] for the learning-trace variant.
pub fn fit<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    sizes: &[usize],
    params: &LearnParams<F>,
    coder: CoderSpec<F>,
    source: DictionarySource,
    label_names: Option<Vec<String>>,
) -> Result<ClassifierModel<F>> {
    fit_traced(train, sizes, params, coder, source, label_names).map(|(model, _)| model)
}

/// Normalizes the training columns, obtains the dictionary per `source`,
/// and assembles the model. Deterministic given `params.seed`. Returns the
/// learning trace when the dictionary was learned.
pub fn fit_traced<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    sizes: &[usize],
    params: &LearnParams<F>,
    coder: CoderSpec<F>,
    source: DictionarySource,
    label_names: Option<Vec<String>>,
) -> Result<(ClassifierModel<F>, Option<LearnTrace<F>>)> {
    let normalized: Vec<Array2<F>> = train
        .blocks()
        .iter()
        .map(|b| normalize_columns(b.view()))
        .collect::<Result<_>>()?;
    let normalized = LabeledTrainingSet::new(normalized)?;

    let (dictionary, trace) = match source {
        DictionarySource::Learned => {
            let (dict, _, trace) = learn(&normalized, sizes, params)?;
            (dict, Some(trace))
        }
        DictionarySource::Raw => (Dictionary::new(normalized.blocks().to_vec())?, None),
    };

    let label_count = dictionary.label_count();
    let names = match label_names {
        Some(names) => {
            if names.len() != label_count {
                return Err(Error::DimensionMismatch(format!(
                    "{} label names for {label_count} labels",
                    names.len()
                )));
            }
            names
        }
        None => (1..=label_count).map(|k| k.to_string()).collect(),
    };

    let atoms = dictionary.concat();
    Ok((
        ClassifierModel {
            dictionary,
            atoms,
            coder,
            label_names: names,
            normalize_inputs: true,
        },
        trace,
    ))
}

/// Per-label shares of the code energy, `(‖x_k‖₂²/‖x‖₂²)_{k=1..K}`, where
/// `partition` lists the block sizes in label order. Fails with `ZeroCode`
/// on an all-zero code.
pub fn energy_ratios<F: Scalar>(code: ArrayView1<F>, partition: &[usize]) -> Result<Vec<F>> {
    let total_len: usize = partition.iter().sum();
    if total_len != code.len() {
        return Err(Error::DimensionMismatch(format!(
            "partition covers {total_len} entries, code has {}",
            code.len()
        )));
    }
    let mut block_energy = Vec::with_capacity(partition.len());
    let mut offset = 0;
    for &size in partition {
        let mut sum = F::zero();
        for i in offset..offset + size {
            sum = sum + code[i] * code[i];
        }
        block_energy.push(sum);
        offset += size;
    }
    let total: F = {
        let mut t = F::zero();
        for &e in &block_energy {
            t = t + e;
        }
        t
    };
    if total == F::zero() {
        return Err(Error::ZeroCode);
    }
    Ok(block_energy.into_iter().map(|e| e / total).collect())
}

/// Index (1-based) of the largest ratio; ties resolve to the lowest label.
pub fn argmax_label<F: Scalar>(ratios: &[F]) -> usize {
    let mut best = 0;
    for (k, &r) in ratios.iter().enumerate() {
        if r > ratios[best] {
            best = k;
        }
    }
    best + 1
}

impl<F: Scalar> ClassifierModel<F> {
    pub fn from_parts(
        dictionary: Dictionary<F>,
        coder: CoderSpec<F>,
        label_names: Vec<String>,
        normalize_inputs: bool,
    ) -> Result<Self> {
        if label_names.len() != dictionary.label_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} label names for {} blocks",
                label_names.len(),
                dictionary.label_count()
            )));
        }
        let atoms = dictionary.concat();
        Ok(Self {
            dictionary,
            atoms,
            coder,
            label_names,
            normalize_inputs,
        })
    }

    pub fn dictionary(&self) -> &Dictionary<F> {
        &self.dictionary
    }

    pub fn coder(&self) -> &CoderSpec<F> {
        &self.coder
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn label_count(&self) -> usize {
        self.dictionary.label_count()
    }

    pub fn rows(&self) -> usize {
        self.dictionary.rows()
    }

    pub fn normalize_inputs(&self) -> bool {
        self.normalize_inputs
    }

    /// Whether test vectors are normalized to unit norm before coding
    /// (mirrors training normalization; on by default).
    pub fn set_normalize_inputs(&mut self, on: bool) {
        self.normalize_inputs = on;
    }

    /// Codes `y` against the concatenated dictionary and selects the label
    /// with the largest code-energy share; ties resolve to the lowest label
    /// index. The reported residual norm is recomputed from the final code.
    pub fn classify(&self, y: ArrayView1<F>) -> Result<ClassificationResult<F>> {
        let started = Instant::now();
        if y.len() != self.rows() {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} entries, model expects {}",
                y.len(),
                self.rows()
            )));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }

        let mut input = y.to_owned();
        if self.normalize_inputs {
            let norm = input.dot(&input).sqrt();
            if norm > F::zero() {
                input.mapv_inplace(|v| v / norm);
            }
        }

        let code = match &self.coder {
            CoderSpec::Hybrid { alpha, gamma, stop } => {
                sparse_code_hybrid(input.view(), self.atoms.view(), *alpha, *gamma, stop)?
            }
            CoderSpec::Omp {
                residual_tol,
                max_atoms,
            } => sparse_code_omp(input.view(), self.atoms.view(), *residual_tol, *max_atoms)?,
        };

        let residual = &input - &self.atoms.dot(code.values());
        let residual_norm = residual.dot(&residual).sqrt();
        let sizes = self.dictionary.sizes();

        let (label, ratios) = if code.is_zero() {
            (None, vec![F::zero(); self.label_count()])
        } else {
            let ratios = energy_ratios(code.values().view(), &sizes)?;
            (Some(argmax_label(&ratios)), ratios)
        };

        Ok(ClassificationResult {
            label,
            energy_ratios: ratios,
            code,
            residual_norm,
            elapsed_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// [`classify`](Self::classify) applied to every column, results in
    /// column order with per-sample timings.
    pub fn classify_batch(&self, samples: ArrayView2<F>) -> Result<Vec<ClassificationResult<F>>> {
        if samples.nrows() != self.rows() {
            return Err(Error::DimensionMismatch(format!(
                "samples have {} rows, model expects {}",
                samples.nrows(),
                self.rows()
            )));
        }
        (0..samples.ncols())
            .into_par_iter()
            .map(|j| self.classify(samples.column(j)))
            .collect()
    }

    /// Writes the model in its versioned binary container; the round trip
    /// through [`ClassifierModel::load`] is bit-exact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        Self::read_from(&mut file)
    }

    /// Binary layout (little-endian): magic `DLRC`, version byte, `m` and
    /// `K` as u32, per label a u16-length-prefixed UTF-8 name and u32 block
    /// size, the normalize-inputs flag, the coder tag and parameters, then
    /// the atom data column-major as f64 bits.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(b"DLRC")?;
        out.write_all(&[1u8])?;
        write_u32(out, self.rows() as u32)?;
        write_u32(out, self.label_count() as u32)?;
        for (name, size) in self.label_names.iter().zip(self.dictionary.sizes()) {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::InvalidModel("label name too long".into()));
            }
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
            write_u32(out, size as u32)?;
        }
        out.write_all(&[self.normalize_inputs as u8])?;
        match &self.coder {
            CoderSpec::Hybrid { alpha, gamma, stop } => {
                out.write_all(&[0u8])?;
                write_f64(out, *alpha)?;
                write_f64(out, *gamma)?;
                write_f64(out, stop.residual_threshold)?;
                write_u32(out, stop.max_sweeps as u32)?;
                write_f64(out, stop.objective_rel_tol)?;
            }
            CoderSpec::Omp {
                residual_tol,
                max_atoms,
            } => {
                out.write_all(&[1u8])?;
                write_f64(out, *residual_tol)?;
                write_u32(out, *max_atoms as u32)?;
            }
        }
        for block in self.dictionary.blocks() {
            for col in block.columns() {
                for &v in col.iter() {
                    let bits = v.to_f64().ok_or_else(|| {
                        Error::InvalidModel("atom entry not representable as f64".into())
                    })?;
                    out.write_all(&bits.to_bits().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"DLRC" {
            return Err(Error::InvalidModel("bad magic".into()));
        }
        let version = read_u8(input)?;
        if version != 1 {
            return Err(Error::InvalidModel(format!("unsupported version {version}")));
        }
        let rows = read_u32(input)? as usize;
        let labels = read_u32(input)? as usize;
        if rows == 0 || labels == 0 {
            return Err(Error::InvalidModel("empty model".into()));
        }
        let mut names = Vec::with_capacity(labels);
        let mut sizes = Vec::with_capacity(labels);
        for _ in 0..labels {
            let mut len_bytes = [0u8; 2];
            input.read_exact(&mut len_bytes)?;
            let len = u16::from_le_bytes(len_bytes) as usize;
            let mut buf = vec![0u8; len];
            input.read_exact(&mut buf)?;
            let name = String::from_utf8(buf)
                .map_err(|_| Error::InvalidModel("label name is not UTF-8".into()))?;
            names.push(name);
            sizes.push(read_u32(input)? as usize);
        }
        let normalize_inputs = read_u8(input)? != 0;
        let coder = match read_u8(input)? {
            0 => CoderSpec::Hybrid {
                alpha: read_f64::<F>(input)?,
                gamma: read_f64::<F>(input)?,
                stop: CoderStop {
                    residual_threshold: read_f64::<F>(input)?,
                    max_sweeps: read_u32(input)? as usize,
                    objective_rel_tol: read_f64::<F>(input)?,
                },
            },
            1 => CoderSpec::Omp {
                residual_tol: read_f64::<F>(input)?,
                max_atoms: read_u32(input)? as usize,
            },
            tag => return Err(Error::InvalidModel(format!("unknown coder tag {tag}"))),
        };
        let mut blocks = Vec::with_capacity(labels);
        for &size in &sizes {
            let mut block = Array2::zeros((rows, size));
            for j in 0..size {
                for i in 0..rows {
                    let mut bits = [0u8; 8];
                    input.read_exact(&mut bits)?;
                    block[[i, j]] = scalar::<F>(f64::from_bits(u64::from_le_bytes(bits)));
                }
            }
            blocks.push(block);
        }
        let dictionary = Dictionary::new(blocks)?;
        Self::from_parts(dictionary, coder, names, normalize_inputs)
    }
}

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<F: Scalar>(out: &mut impl Write, v: F) -> Result<()> {
    let v = v
        .to_f64()
        .ok_or_else(|| Error::InvalidModel("parameter not representable as f64".into()))?;
    out.write_all(&v.to_bits().to_le_bytes())?;
    Ok(())
}

fn read_u8(input: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    input.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<F: Scalar>(input: &mut impl Read) -> Result<F> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(scalar::<F>(f64::from_bits(u64::from_le_bytes(b))))
}
