//! Dictionary learning by alternating minimization.
//!
//! The learned objective couples per-label reconstruction under the hybrid
//! norm, an `l₁` sparsity penalty on the codes, and a cross-label
//! incoherence penalty `η Σ_{j≠k} ‖DkᵀDj‖_F²`:
//!
//! - step 1 ([`update_codes`]) holds the dictionary fixed and recodes every
//!   training column against its own label block;
//! - step 2 ([`update_dictionary`]) holds the codes fixed and updates
//!   dictionary columns one at a time in Gauss-Seidel order, minimizing each
//!   column's restriction of the objective with an improvement-only random
//!   search over the unit ball.
//!
//! Both steps accept a candidate only when it improves the objective, so the
//! recorded objective trace is non-increasing.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::coding::{coding_objective, sparse_code_hybrid, CoderStop};
use crate::norms::{cross_block_coherence, ensure_finite, TOLERANCE_FLOOR};
use crate::rng::{child_seed, sample_without_replacement, SplitMix64};
use crate::{scalar, Error, Result, Scalar};

/// Column norms may exceed the unit ball by at most this much.
pub const UNIT_BALL_SLACK: f64 = 1e-9;

const TAG_INIT: u64 = 0x49;
const TAG_DICT_UPDATE: u64 = 0x44;

/// Per-label training matrices `Ψ_k` sharing a common row count.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrainingSet<F> {
    blocks: Vec<Array2<F>>,
}

impl<F: Scalar> LabeledTrainingSet<F> {
    /// Wraps per-label sample blocks. Blocks must be nonempty, finite and
    /// share their row count.
    pub fn new(blocks: Vec<Array2<F>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::BadSpec("training set needs at least one label".into()));
        }
        let rows = blocks[0].nrows();
        for (k, block) in blocks.iter().enumerate() {
            if block.nrows() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "label {} block has {} rows, expected {rows}",
                    k + 1,
                    block.nrows()
                )));
            }
            if block.ncols() == 0 {
                return Err(Error::InsufficientData {
                    label: k + 1,
                    requested: 1,
                    available: 0,
                });
            }
            ensure_finite(&block.view())?;
        }
        Ok(Self { blocks })
    }

    pub fn rows(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn label_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, k: usize) -> &Array2<F> {
        &self.blocks[k]
    }

    pub fn blocks(&self) -> &[Array2<F>] {
        &self.blocks
    }

    pub fn samples_per_label(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.ncols()).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.blocks.iter().map(|b| b.ncols()).sum()
    }
}

/// Concatenated per-label atom blocks `D = [D₁ … D_K]` with unit-ball
/// columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary<F> {
    blocks: Vec<Array2<F>>,
}

impl<F: Scalar> Dictionary<F> {
    /// Wraps per-label atom blocks, rejecting zero columns and columns
    /// outside the unit ball.
    pub fn new(blocks: Vec<Array2<F>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::BadSpec("dictionary needs at least one block".into()));
        }
        let rows = blocks[0].nrows();
        let slack = scalar::<F>(1.0 + UNIT_BALL_SLACK);
        let mut global = 0usize;
        for (k, block) in blocks.iter().enumerate() {
            if block.nrows() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "block {} has {} rows, expected {rows}",
                    k + 1,
                    block.nrows()
                )));
            }
            if block.ncols() == 0 {
                return Err(Error::BadSpec(format!("block {} has no atoms", k + 1)));
            }
            ensure_finite(&block.view())?;
            for col in block.columns() {
                let norm_sq = col.dot(&col);
                if norm_sq == F::zero() {
                    return Err(Error::ZeroColumn(global));
                }
                if norm_sq > slack {
                    return Err(Error::BadSpec(format!(
                        "column {global} lies outside the unit ball (‖d‖² = {norm_sq:?})"
                    )));
                }
                global += 1;
            }
        }
        Ok(Self { blocks })
    }

    pub fn rows(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn label_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, k: usize) -> &Array2<F> {
        &self.blocks[k]
    }

    pub fn blocks(&self) -> &[Array2<F>] {
        &self.blocks
    }

    /// Atoms per label block.
    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.ncols()).collect()
    }

    pub fn total_atoms(&self) -> usize {
        self.blocks.iter().map(|b| b.ncols()).sum()
    }

    /// Maps a global column index to `(label index, column within block)`.
    pub fn locate(&self, global: usize) -> Result<(usize, usize)> {
        let mut offset = global;
        for (k, block) in self.blocks.iter().enumerate() {
            if offset < block.ncols() {
                return Ok((k, offset));
            }
            offset -= block.ncols();
        }
        Err(Error::IndexOutOfRange {
            index: global,
            len: self.total_atoms(),
        })
    }

    /// Concatenation of the blocks into one `m × L` matrix.
    pub fn concat(&self) -> Array2<F> {
        let mut out = Array2::zeros((self.rows(), self.total_atoms()));
        let mut offset = 0;
        for block in &self.blocks {
            for col in block.columns() {
                out.column_mut(offset).assign(&col);
                offset += 1;
            }
        }
        out
    }

    pub fn max_column_norm_sq(&self) -> F {
        let mut best = F::zero();
        for block in &self.blocks {
            for col in block.columns() {
                best = best.max(col.dot(&col));
            }
        }
        best
    }
}

/// Per-label sparse representation blocks `X_k` of shape `L_k × n_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix<F> {
    blocks: Vec<Array2<F>>,
}

impl<F: Scalar> CodeMatrix<F> {
    pub fn new(blocks: Vec<Array2<F>>) -> Self {
        Self { blocks }
    }

    pub fn block(&self, k: usize) -> &Array2<F> {
        &self.blocks[k]
    }

    pub fn blocks(&self) -> &[Array2<F>] {
        &self.blocks
    }

    pub fn label_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Controls for the derivative-free column search.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomSearchParams<F> {
    pub candidates_per_round: usize,
    pub rounds: usize,
    pub initial_sigma: F,
    /// Step shrink factor applied after a round with no accepted candidate.
    pub sigma_decay: F,
    /// Search stops once sigma falls below this value.
    pub min_sigma: F,
}

impl<F: Scalar> Default for RandomSearchParams<F> {
    fn default() -> Self {
        Self {
            candidates_per_round: 50,
            rounds: 40,
            initial_sigma: scalar(0.1),
            sigma_decay: scalar(0.5),
            min_sigma: scalar(1e-4),
        }
    }
}

impl<F: Scalar> RandomSearchParams<F> {
    fn validate(&self) -> Result<()> {
        if self.candidates_per_round == 0 || self.rounds == 0 {
            return Err(Error::BadSpec(
                "random search needs at least one round and one candidate".into(),
            ));
        }
        if self.initial_sigma <= F::zero() || self.min_sigma <= F::zero() {
            return Err(Error::BadSpec("random search sigmas must be positive".into()));
        }
        if self.sigma_decay <= F::zero() || self.sigma_decay >= F::one() {
            return Err(Error::BadSpec("sigma_decay must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Parameters of the alternating learning loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnParams<F> {
    /// Hybrid-norm mix for the reconstruction term.
    pub alpha: F,
    /// Sparsity penalty on the codes.
    pub gamma: F,
    /// Cross-label incoherence penalty.
    pub eta: F,
    /// Maximum alternating iterations.
    pub t_max: usize,
    pub rs: RandomSearchParams<F>,
    pub seed: u64,
    /// Early exit once the relative objective decrease per iteration falls
    /// below this value.
    pub objective_rel_tol: F,
}

impl<F: Scalar> Default for LearnParams<F> {
    fn default() -> Self {
        Self {
            alpha: scalar(0.7),
            gamma: scalar(0.05),
            eta: scalar(1.0),
            t_max: 10,
            rs: RandomSearchParams::default(),
            seed: 0,
            objective_rel_tol: scalar(1e-4),
        }
    }
}

impl<F: Scalar> LearnParams<F> {
    fn validate(&self) -> Result<()> {
        crate::norms::check_alpha(self.alpha)?;
        if self.gamma < F::zero() || self.eta < F::zero() {
            return Err(Error::BadSpec("gamma and eta must be nonnegative".into()));
        }
        if self.t_max == 0 {
            return Err(Error::BadSpec("t_max must be at least 1".into()));
        }
        self.rs.validate()
    }
}

/// One record per completed alternating iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry<F> {
    pub iteration: usize,
    pub objective: F,
    pub avg_cross_coherence: F,
    pub max_column_norm_sq: F,
    pub seconds: f64,
}

/// Objective and coherence history of a learning run.
///
/// `seconds` is wall-clock measurement metadata; every other field is a
/// deterministic function of the inputs and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnTrace<F> {
    pub entries: Vec<TraceEntry<F>>,
}

impl<F> Default for LearnTrace<F> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<F: Scalar> LearnTrace<F> {
    /// Line-oriented text record: `iteration objective avg_coherence seconds`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {:.6}\n",
                e.iteration, e.objective, e.avg_cross_coherence, e.seconds
            ));
        }
        out
    }

    pub fn objectives(&self) -> Vec<F> {
        self.entries.iter().map(|e| e.objective).collect()
    }
}

fn check_shapes<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    dict: &Dictionary<F>,
    codes: Option<&CodeMatrix<F>>,
) -> Result<()> {
    if train.label_count() != dict.label_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} training labels vs {} dictionary blocks",
            train.label_count(),
            dict.label_count()
        )));
    }
    if train.rows() != dict.rows() {
        return Err(Error::DimensionMismatch(format!(
            "training rows {} vs dictionary rows {}",
            train.rows(),
            dict.rows()
        )));
    }
    if let Some(codes) = codes {
        if codes.label_count() != dict.label_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} code blocks vs {} dictionary blocks",
                codes.label_count(),
                dict.label_count()
            )));
        }
        for k in 0..dict.label_count() {
            let x = codes.block(k);
            if x.nrows() != dict.block(k).ncols() || x.ncols() != train.block(k).ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "code block {} is {}×{}, expected {}×{}",
                    k + 1,
                    x.nrows(),
                    x.ncols(),
                    dict.block(k).ncols(),
                    train.block(k).ncols()
                )));
            }
        }
    }
    Ok(())
}

/// Initializes each label block by sampling `sizes[k]` raw training columns
/// without replacement and renormalizing them to unit norm.
///
/// Each label draws from its own child stream of `seed`, so the selection
/// for one label does not depend on the sizes of the others.
pub fn init_dictionary<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    sizes: &[usize],
    seed: u64,
) -> Result<Dictionary<F>> {
    if sizes.len() != train.label_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} sizes for {} labels",
            sizes.len(),
            train.label_count()
        )));
    }
    let mut blocks = Vec::with_capacity(sizes.len());
    for (k, &l_k) in sizes.iter().enumerate() {
        let psi = train.block(k);
        let n_k = psi.ncols();
        if l_k == 0 {
            return Err(Error::BadSpec(format!("label {} has L_k = 0", k + 1)));
        }
        if l_k > n_k {
            return Err(Error::InsufficientData {
                label: k + 1,
                requested: l_k,
                available: n_k,
            });
        }
        let mut rng = SplitMix64::new(child_seed(child_seed(seed, TAG_INIT), k as u64));
        let picks = sample_without_replacement(n_k, l_k, &mut rng);
        let mut block = Array2::zeros((psi.nrows(), l_k));
        for (slot, &idx) in picks.iter().enumerate() {
            let col = psi.column(idx);
            let norm = col.dot(&col).sqrt();
            if norm == F::zero() {
                return Err(Error::ZeroColumn(idx));
            }
            block.column_mut(slot).assign(&col.mapv(|v| v / norm));
        }
        blocks.push(block);
    }
    Dictionary::new(blocks)
}

/// Step 1: recodes every training column against its own label block with
/// the hybrid coder under the default stopping rule.
pub fn update_codes<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    dict: &Dictionary<F>,
    params: &LearnParams<F>,
) -> Result<CodeMatrix<F>> {
    update_codes_guarded(train, dict, params, None)
}

/// [`update_codes`] with an improvement guard: when previous codes are
/// supplied, a freshly coded column is kept only if it does not raise that
/// column's coding objective, otherwise the previous column is retained.
/// This keeps the step-1 objective non-increasing even though the coder
/// restarts from zero.
pub(crate) fn update_codes_guarded<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    dict: &Dictionary<F>,
    params: &LearnParams<F>,
    previous: Option<&CodeMatrix<F>>,
) -> Result<CodeMatrix<F>> {
    params.validate()?;
    check_shapes(train, dict, previous)?;
    let stop = CoderStop::default();
    let mut blocks = Vec::with_capacity(train.label_count());
    for k in 0..train.label_count() {
        let psi = train.block(k);
        let d_k = dict.block(k);
        let prev_block = previous.map(|p| p.block(k));
        let columns: Vec<Array1<F>> = (0..psi.ncols())
            .into_par_iter()
            .map(|j| -> Result<Array1<F>> {
                let y = psi.column(j);
                let code =
                    sparse_code_hybrid(y, d_k.view(), params.alpha, params.gamma, &stop)?;
                let fresh = code.into_values();
                if let Some(prev) = prev_block {
                    let old = prev.column(j);
                    let fresh_obj =
                        coding_objective(y, d_k.view(), fresh.view(), params.alpha, params.gamma);
                    let old_obj =
                        coding_objective(y, d_k.view(), old, params.alpha, params.gamma);
                    if old_obj < fresh_obj {
                        return Ok(old.to_owned());
                    }
                }
                Ok(fresh)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut block = Array2::zeros((d_k.ncols(), psi.ncols()));
        for (j, col) in columns.iter().enumerate() {
            block.column_mut(j).assign(col);
        }
        blocks.push(block);
    }
    Ok(CodeMatrix::new(blocks))
}

/// Gauss-Seidel residual for atom `l` of a block: the training block minus
/// the contributions of every other atom, already-updated columns (`j < l`)
/// taken from `dk_new` and not-yet-updated columns (`j > l`) from `dk_old`.
pub fn column_residual<F: Scalar>(
    psi_k: ArrayView2<F>,
    dk_new: ArrayView2<F>,
    dk_old: ArrayView2<F>,
    xk: ArrayView2<F>,
    l: usize,
) -> Result<Array2<F>> {
    let atoms = dk_old.ncols();
    if dk_new.dim() != dk_old.dim() {
        return Err(Error::DimensionMismatch(
            "updated and previous blocks differ in shape".into(),
        ));
    }
    if psi_k.nrows() != dk_old.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "training rows {} vs block rows {}",
            psi_k.nrows(),
            dk_old.nrows()
        )));
    }
    if xk.nrows() != atoms || xk.ncols() != psi_k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "code block is {}×{}, expected {}×{}",
            xk.nrows(),
            xk.ncols(),
            atoms,
            psi_k.ncols()
        )));
    }
    if l >= atoms {
        return Err(Error::IndexOutOfRange {
            index: l,
            len: atoms,
        });
    }
    let mut residual = psi_k.to_owned();
    for j in 0..atoms {
        if j == l {
            continue;
        }
        let atom = if j < l { dk_new.column(j) } else { dk_old.column(j) };
        let x_row = xk.row(j);
        for (c, &weight) in x_row.iter().enumerate() {
            if weight != F::zero() {
                residual.column_mut(c).scaled_add(-weight, &atom);
            }
        }
    }
    Ok(residual)
}

/// Column objective of the dictionary update:
/// `α‖R − d·x_row‖_F² + (1−α)‖R − d·x_row‖_{1,1} + η Σ_B ‖dᵀB‖₂²`
/// over the supplied other-label blocks.
pub fn column_objective<F: Scalar>(
    d: ArrayView1<F>,
    residual: ArrayView2<F>,
    x_row: ArrayView1<F>,
    other_blocks: &[ArrayView2<F>],
    alpha: F,
    eta: F,
) -> Result<F> {
    if d.len() != residual.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "atom has {} entries, residual {} rows",
            d.len(),
            residual.nrows()
        )));
    }
    if x_row.len() != residual.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "code row has {} entries, residual {} columns",
            x_row.len(),
            residual.ncols()
        )));
    }
    for block in other_blocks {
        if block.nrows() != d.len() {
            return Err(Error::DimensionMismatch(format!(
                "cross block has {} rows, atom {} entries",
                block.nrows(),
                d.len()
            )));
        }
    }
    crate::norms::check_alpha(alpha)?;
    if eta < F::zero() {
        return Err(Error::BadSpec("eta must be nonnegative".into()));
    }
    Ok(column_objective_value(d, residual, x_row, other_blocks, alpha, eta))
}

fn column_objective_value<F: Scalar>(
    d: ArrayView1<F>,
    residual: ArrayView2<F>,
    x_row: ArrayView1<F>,
    other_blocks: &[ArrayView2<F>],
    alpha: F,
    eta: F,
) -> F {
    let mut fro = F::zero();
    let mut l1 = F::zero();
    for (c, &weight) in x_row.iter().enumerate() {
        let col = residual.column(c);
        for (i, &r) in col.iter().enumerate() {
            let e = r - d[i] * weight;
            fro = fro + e * e;
            l1 = l1 + e.abs();
        }
    }
    let mut coherence = F::zero();
    for block in other_blocks {
        for col in block.columns() {
            let ip = d.dot(&col);
            coherence = coherence + ip * ip;
        }
    }
    alpha * fro + (F::one() - alpha) * l1 + eta * coherence
}

/// Relative guard below which a random-search improvement is treated as
/// evaluation noise and rejected.
const ACCEPT_REL_MARGIN: f64 = 1e-12;

/// Derivative-free minimization over the unit `l₂` ball.
///
/// Each round draws `candidates_per_round` points `best + σ·g` with `g`
/// standard normal, projects candidates with norm above one onto the unit
/// sphere, and accepts the round's best candidate only when it lowers the
/// incumbent objective by more than a `1e-12` relative guard. `σ` shrinks by
/// `sigma_decay` after a round with no acceptance; the search stops after
/// `rounds` rounds or once `σ < min_sigma`. The returned point never has a
/// higher objective than `init`.
pub fn random_search_min<F: Scalar>(
    mut objective: impl FnMut(ArrayView1<F>) -> F,
    init: ArrayView1<F>,
    rs: &RandomSearchParams<F>,
    seed: u64,
) -> Result<Array1<F>> {
    rs.validate()?;
    let dim = init.len();
    let mut best = init.to_owned();
    let mut best_value = objective(best.view());
    if !best_value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    let mut rng = SplitMix64::new(seed);
    let mut sigma = rs.initial_sigma;
    let margin = scalar::<F>(ACCEPT_REL_MARGIN);
    let mut candidate = Array1::zeros(dim);

    for _round in 0..rs.rounds {
        if sigma < rs.min_sigma {
            break;
        }
        let mut round_best: Option<(Array1<F>, F)> = None;
        for _ in 0..rs.candidates_per_round {
            for (slot, base) in candidate.iter_mut().zip(best.iter()) {
                *slot = *base + sigma * scalar::<F>(rng.next_normal());
            }
            let norm_sq = candidate.dot(&candidate);
            if norm_sq > F::one() {
                let inv = F::one() / norm_sq.sqrt();
                candidate.mapv_inplace(|v| v * inv);
            }
            let value = objective(candidate.view());
            if !value.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            if round_best.as_ref().map_or(true, |(_, v)| value < *v) {
                round_best = Some((candidate.clone(), value));
            }
        }
        let (point, value) = round_best.expect("at least one candidate per round");
        if value < best_value - margin * best_value.abs() {
            best = point;
            best_value = value;
        } else {
            sigma = sigma * rs.sigma_decay;
        }
    }
    Ok(best)
}

/// Step 2: updates every dictionary column in Gauss-Seidel order (labels
/// ascending, atoms ascending within a label) by random search on that
/// column's restriction of the learning objective.
///
/// Cross-block terms read already-updated blocks for labels before `k` and
/// previous blocks for labels after `k`. Because each unordered block pair
/// contributes twice to the full objective, the per-column search weights
/// the incoherence term with `2η`; acceptance is improvement-only, so the
/// full objective cannot increase. An atom whose code row is zero is left
/// unchanged when `η = 0` (the objective does not depend on it); with
/// `η > 0` the search may still move it to reduce coherence.
pub fn update_dictionary<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    d_prev: &Dictionary<F>,
    codes: &CodeMatrix<F>,
    params: &LearnParams<F>,
    iteration: usize,
) -> Result<Dictionary<F>> {
    params.validate()?;
    check_shapes(train, d_prev, Some(codes))?;
    let labels = d_prev.label_count();
    let two_eta = params.eta + params.eta;
    let step_seed = child_seed(params.seed, TAG_DICT_UPDATE);

    let mut new_blocks: Vec<Array2<F>> = d_prev.blocks().to_vec();
    for k in 0..labels {
        let others: Vec<Array2<F>> = (0..labels)
            .filter(|&j| j != k)
            .map(|j| {
                if j < k {
                    new_blocks[j].clone()
                } else {
                    d_prev.block(j).clone()
                }
            })
            .collect();
        let other_views: Vec<ArrayView2<F>> = others.iter().map(|b| b.view()).collect();
        let atoms = d_prev.block(k).ncols();
        let rows = d_prev.rows();
        for l in 0..atoms {
            let x_row = codes.block(k).row(l);
            if params.eta == F::zero() && x_row.iter().all(|v| *v == F::zero()) {
                continue;
            }
            let residual = column_residual(
                train.block(k).view(),
                new_blocks[k].view(),
                d_prev.block(k).view(),
                codes.block(k).view(),
                l,
            )?;
            // residual columns with a zero code weight do not depend on the
            // atom; fold them into constants and evaluate candidates over
            // the support only
            let support: Vec<usize> = x_row
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != F::zero())
                .map(|(c, _)| c)
                .collect();
            let mut const_fro = F::zero();
            let mut const_l1 = F::zero();
            for c in 0..residual.ncols() {
                if x_row[c] == F::zero() {
                    for &v in residual.column(c).iter() {
                        const_fro = const_fro + v * v;
                        const_l1 = const_l1 + v.abs();
                    }
                }
            }
            let mut support_residual = Array2::<F>::zeros((rows, support.len()));
            let mut support_weights = Vec::with_capacity(support.len());
            for (slot, &c) in support.iter().enumerate() {
                support_residual.column_mut(slot).assign(&residual.column(c));
                support_weights.push(x_row[c]);
            }

            let init = new_blocks[k].column(l).to_owned();
            let seed = child_seed(
                child_seed(child_seed(step_seed, iteration as u64), k as u64),
                l as u64,
            );
            let objective = |d: ArrayView1<F>| {
                let mut fro = const_fro;
                let mut l1 = const_l1;
                for (slot, &w) in support_weights.iter().enumerate() {
                    for (i, &r) in support_residual.column(slot).iter().enumerate() {
                        let e = r - d[i] * w;
                        fro = fro + e * e;
                        l1 = l1 + e.abs();
                    }
                }
                let mut coherence = F::zero();
                for block in &other_views {
                    for col in block.columns() {
                        let ip = d.dot(&col);
                        coherence = coherence + ip * ip;
                    }
                }
                params.alpha * fro + (F::one() - params.alpha) * l1 + two_eta * coherence
            };
            let updated = random_search_min(objective, init.view(), &params.rs, seed)?;
            new_blocks[k].column_mut(l).assign(&updated);
        }
    }
    Dictionary::new(new_blocks)
}

/// Full learning objective:
/// `Σ_k (α‖Ψ_k − D_kX_k‖_F² + (1−α)‖Ψ_k − D_kX_k‖_{1,1} + γ‖X_k‖_{1,1}
///  + η Σ_{j≠k} ‖D_kᵀD_j‖_F²)`, the incoherence sum running over ordered
/// pairs so each unordered pair counts twice.
pub fn objective_value<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    dict: &Dictionary<F>,
    codes: &CodeMatrix<F>,
    params: &LearnParams<F>,
) -> Result<F> {
    check_shapes(train, dict, Some(codes))?;
    crate::norms::check_alpha(params.alpha)?;
    let labels = dict.label_count();
    let mut reconstruction = F::zero();
    for k in 0..labels {
        let psi = train.block(k);
        let d_k = dict.block(k);
        let x_k = codes.block(k);
        for j in 0..psi.ncols() {
            reconstruction = reconstruction
                + coding_objective(
                    psi.column(j),
                    d_k.view(),
                    x_k.column(j),
                    params.alpha,
                    params.gamma,
                );
        }
    }
    let mut incoherence = F::zero();
    for k in 0..labels {
        for j in 0..labels {
            if j != k {
                incoherence = incoherence
                    + cross_block_coherence(dict.block(k).view(), dict.block(j).view())?;
            }
        }
    }
    Ok(reconstruction + params.eta * incoherence)
}

/// Mean cross-block coherence over unordered label pairs; zero for a single
/// label.
pub fn avg_cross_block_coherence<F: Scalar>(dict: &Dictionary<F>) -> F {
    let labels = dict.label_count();
    if labels < 2 {
        return F::zero();
    }
    let mut sum = F::zero();
    for k in 0..labels {
        for j in (k + 1)..labels {
            sum = sum
                + cross_block_coherence(dict.block(k).view(), dict.block(j).view())
                    .expect("blocks share rows");
        }
    }
    sum / scalar::<F>((labels * (labels - 1) / 2) as f64)
}

/// Alternating learning loop: initializes the dictionary from raw samples,
/// then repeats code update / dictionary update for up to `t_max`
/// iterations, recording the objective after each full iteration. Exits
/// early once the relative objective decrease falls below
/// `objective_rel_tol`. The trace objective is non-increasing and the whole
/// run is a pure function of `(train, sizes, params)`.
pub fn learn<F: Scalar>(
    train: &LabeledTrainingSet<F>,
    sizes: &[usize],
    params: &LearnParams<F>,
) -> Result<(Dictionary<F>, CodeMatrix<F>, LearnTrace<F>)> {
    params.validate()?;
    let mut dict = init_dictionary(train, sizes, params.seed)?;
    let mut codes: Option<CodeMatrix<F>> = None;
    let mut trace = LearnTrace::default();
    let mut prev_objective: Option<F> = None;
    let floor = scalar::<F>(TOLERANCE_FLOOR);

    for t in 1..=params.t_max {
        let started = Instant::now();
        let new_codes = update_codes_guarded(train, &dict, params, codes.as_ref())?;
        dict = update_dictionary(train, &dict, &new_codes, params, t)?;
        let objective = objective_value(train, &dict, &new_codes, params)?;
        trace.entries.push(TraceEntry {
            iteration: t,
            objective,
            avg_cross_coherence: avg_cross_block_coherence(&dict),
            max_column_norm_sq: dict.max_column_norm_sq(),
            seconds: started.elapsed().as_secs_f64(),
        });
        codes = Some(new_codes);
        let converged = prev_objective
            .map_or(false, |p| p - objective < params.objective_rel_tol * p.abs().max(floor));
        prev_objective = Some(objective);
        if converged {
            break;
        }
    }
    Ok((dict, codes.expect("t_max >= 1 ran at least one iteration"), trace))
}

/// Scales every column of `m` to unit `l₂` norm; a [`LabeledTrainingSet`]
/// helper for callers assembling normalized training blocks.
pub fn normalized_blocks<F: Scalar>(blocks: &[Array2<F>]) -> Result<Vec<Array2<F>>> {
    blocks
        .iter()
        .map(|b| crate::classifier::normalize_columns(b.view()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn unit_block(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = SplitMix64::new(seed);
        let mut b = Array2::from_shape_fn((m, n), |_| rng.next_normal());
        for mut col in b.columns_mut() {
            let norm = col.dot(&col).sqrt();
            col.mapv_inplace(|v| v / norm);
        }
        b
    }

    fn small_train(m: usize, labels: usize, n_k: usize, seed: u64) -> LabeledTrainingSet<f64> {
        let blocks = (0..labels)
            .map(|k| unit_block(m, n_k, seed + k as u64))
            .collect();
        LabeledTrainingSet::new(blocks).unwrap()
    }

    fn quick_params(seed: u64) -> LearnParams<f64> {
        LearnParams {
            alpha: 0.7,
            gamma: 0.05,
            eta: 1.0,
            t_max: 3,
            rs: RandomSearchParams {
                candidates_per_round: 10,
                rounds: 8,
                ..RandomSearchParams::default()
            },
            seed,
            objective_rel_tol: 1e-6,
        }
    }

    #[test]
    fn init_with_full_size_is_a_permutation() {
        let train = small_train(5, 2, 6, 1);
        let dict = init_dictionary(&train, &[6, 6], 9).unwrap();
        for k in 0..2 {
            let mut found = vec![false; 6];
            for col in dict.block(k).columns() {
                let hit = (0..6).find(|&j| {
                    let orig = train.block(k).column(j);
                    col.iter().zip(orig.iter()).all(|(a, b)| (a - b).abs() < 1e-12)
                });
                let hit = hit.expect("every atom is a training column");
                assert!(!found[hit], "column {hit} duplicated");
                found[hit] = true;
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_matches_reference_sampler() {
        let train = small_train(4, 1, 5, 2);
        let a = init_dictionary(&train, &[2], 42).unwrap();
        let b = init_dictionary(&train, &[2], 42).unwrap();
        assert_eq!(a, b);

        // reference reimplementation of the seeded sampler: one child stream
        // per label, partial Fisher-Yates over the label's columns
        let mut rng = SplitMix64::new(child_seed(child_seed(42, 0x49), 0));
        let mut idx: Vec<usize> = (0..5).collect();
        for i in 0..2 {
            let j = i + (rng.next_u64() % (5 - i) as u64) as usize;
            idx.swap(i, j);
        }
        for (slot, &expect) in idx.iter().take(2).enumerate() {
            let got = a.block(0).column(slot);
            let want = train.block(0).column(expect);
            for (x, y) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn init_rejects_oversized_blocks() {
        let train = small_train(4, 1, 3, 3);
        assert!(matches!(
            init_dictionary(&train, &[4], 1),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn update_codes_matches_per_column_coder() {
        let train = small_train(6, 2, 8, 4);
        let dict = init_dictionary(&train, &[4, 4], 5).unwrap();
        let params = quick_params(5);
        let codes = update_codes(&train, &dict, &params).unwrap();
        for k in 0..2 {
            for j in 0..8 {
                let direct = sparse_code_hybrid(
                    train.block(k).column(j),
                    dict.block(k).view(),
                    params.alpha,
                    params.gamma,
                    &CoderStop::default(),
                )
                .unwrap();
                assert_eq!(codes.block(k).column(j).to_owned(), direct.into_values());
            }
        }
    }

    #[test]
    fn self_representation_reconstructs_exactly() {
        let train = small_train(5, 1, 4, 6);
        let dict = init_dictionary(&train, &[4], 7).unwrap();
        let params = LearnParams {
            alpha: 1.0,
            gamma: 1e-9,
            ..quick_params(7)
        };
        let codes = update_codes(&train, &dict, &params).unwrap();
        let recon = dict.block(0).dot(codes.block(0));
        let residual = &recon - train.block(0);
        // the default stop rule ends each column at residual <= 0.01
        for col in residual.columns() {
            let norm = col.dot(&col).sqrt();
            assert!(norm <= 0.01 + 1e-9, "column residual {norm}");
        }
    }

    #[test]
    fn column_residual_edge_cases() {
        let psi = unit_block(4, 3, 8);
        let dk = unit_block(4, 1, 9);
        let xk = Array2::<f64>::zeros((1, 3));
        let r = column_residual(psi.view(), dk.view(), dk.view(), xk.view(), 0).unwrap();
        assert_eq!(r, psi);

        let dk = unit_block(4, 3, 10);
        let xk = Array2::<f64>::zeros((3, 3));
        let r = column_residual(psi.view(), dk.view(), dk.view(), xk.view(), 1).unwrap();
        assert_eq!(r, psi);

        assert!(matches!(
            column_residual(psi.view(), dk.view(), dk.view(), xk.view(), 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn column_residual_matches_dense_recomputation() {
        let mut rng = SplitMix64::new(11);
        let psi = unit_block(4, 5, 12);
        let dk_old = unit_block(4, 3, 13);
        let dk_new = unit_block(4, 3, 14);
        let xk = Array2::from_shape_fn((3, 5), |_| rng.next_range(-1.0, 1.0));
        let l = 1;
        let got = column_residual(psi.view(), dk_new.view(), dk_old.view(), xk.view(), l).unwrap();

        // dense recomputation with the mixed block
        let mut mixed = dk_old.clone();
        for j in 0..l {
            mixed.column_mut(j).assign(&dk_new.column(j));
        }
        let mut full = &psi - &mixed.dot(&xk);
        let x_row = xk.row(l);
        for (c, &w) in x_row.iter().enumerate() {
            full.column_mut(c).scaled_add(w, &mixed.column(l));
        }
        for (a, b) in got.iter().zip(full.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn column_objective_examples() {
        let residual = array![[0.5, -0.25], [0.1, 0.3]];
        let d = array![1.0, 0.0];
        let zero_row = array![0.0, 0.0];

        // x_row = 0 and eta = 0: the atom drops out entirely
        let v = column_objective(d.view(), residual.view(), zero_row.view(), &[], 0.7, 0.0)
            .unwrap();
        let expected = crate::norms::hybrid_norm(residual.view(), 0.7).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);

        // orthogonal cross block contributes nothing
        let ortho = array![[0.0], [1.0]];
        let v2 = column_objective(
            d.view(),
            residual.view(),
            zero_row.view(),
            &[ortho.view()],
            0.7,
            5.0,
        )
        .unwrap();
        assert_abs_diff_eq!(v2, expected, epsilon = 1e-12);

        // two-atom instance evaluated by hand at alpha = 0.5, eta = 1
        let x_row = array![1.0, -1.0];
        let other = array![[0.6], [0.8]];
        let hand = {
            let e = [
                [0.5 - 1.0, -0.25 + 1.0],
                [0.1 - 0.0, 0.3 - 0.0],
            ];
            let fro: f64 = e.iter().flatten().map(|v| v * v).sum();
            let l1: f64 = e.iter().flatten().map(|v| v.abs()).sum();
            let ip: f64 = 1.0 * 0.6 + 0.0 * 0.8;
            0.5 * fro + 0.5 * l1 + 1.0 * ip * ip
        };
        let v3 = column_objective(
            d.view(),
            residual.view(),
            x_row.view(),
            &[other.view()],
            0.5,
            1.0,
        )
        .unwrap();
        assert_abs_diff_eq!(v3, hand, epsilon = 1e-12);
    }

    #[test]
    fn random_search_never_worsens_and_finds_quadratic_minimum() {
        let rs = RandomSearchParams::default();

        // global minimum at the start point: nothing improves
        let zero = Array1::<f64>::zeros(4);
        let result =
            random_search_min(|d| d.dot(&d), zero.view(), &rs, 3).unwrap();
        assert_eq!(result, zero);

        // improvement-only acceptance from a random start
        let mut rng = SplitMix64::new(21);
        for seed in 0..5 {
            let init = Array1::from_shape_fn(4, |_| rng.next_range(-0.4, 0.4));
            let f = |d: ArrayView1<f64>| {
                let shifted = &d - &Array1::from_elem(4, 0.1);
                shifted.dot(&shifted)
            };
            let out = random_search_min(f, init.view(), &rs, seed).unwrap();
            assert!(f(out.view()) <= f(init.view()));
        }

        // quadratic bowl with the center inside the ball
        let center = Array1::from_shape_fn(4, |i| if i == 0 { 0.5 } else { 0.0 });
        let f = |d: ArrayView1<f64>| {
            let diff = &d - &center;
            diff.dot(&diff)
        };
        let out = random_search_min(f, Array1::zeros(4).view(), &rs, 7).unwrap();
        assert!(f(out.view()) <= 0.01, "final objective {}", f(out.view()));
    }

    #[test]
    fn random_search_flags_non_finite_objectives() {
        let rs = RandomSearchParams::default();
        let init = Array1::<f64>::zeros(3);
        let out = random_search_min(|_| f64::NAN, init.view(), &rs, 1);
        assert!(matches!(out, Err(Error::NonFiniteObjective)));
    }

    #[test]
    fn update_dictionary_keeps_unit_ball_and_lowers_objective() {
        let train = small_train(6, 2, 10, 15);
        let params = quick_params(16);
        let dict = init_dictionary(&train, &[4, 4], params.seed).unwrap();
        let codes = update_codes(&train, &dict, &params).unwrap();
        let before = objective_value(&train, &dict, &codes, &params).unwrap();
        let updated = update_dictionary(&train, &dict, &codes, &params, 1).unwrap();
        let after = objective_value(&train, &updated, &codes, &params).unwrap();
        assert!(after <= before + 1e-12, "objective rose {before} -> {after}");
        assert!(updated.max_column_norm_sq() <= 1.0 + UNIT_BALL_SLACK);
    }

    #[test]
    fn update_dictionary_with_zero_codes_and_zero_eta_is_identity() {
        let train = small_train(5, 2, 6, 17);
        let params = LearnParams {
            eta: 0.0,
            ..quick_params(18)
        };
        let dict = init_dictionary(&train, &[3, 3], params.seed).unwrap();
        let zero_codes = CodeMatrix::new(vec![
            Array2::zeros((3, 6)),
            Array2::zeros((3, 6)),
        ]);
        let updated = update_dictionary(&train, &dict, &zero_codes, &params, 1).unwrap();
        assert_eq!(updated, dict);
    }

    #[test]
    fn objective_value_matches_hand_toy() {
        // K = 2, m = 3, L_k = 2, n_k = 2, hand-chosen entries
        let psi1 = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let psi2 = array![[0.0, 0.5], [0.5, 0.0], [0.5, 0.5]];
        let train = LabeledTrainingSet::new(vec![psi1.clone(), psi2.clone()]).unwrap();
        let d1 = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let d2 = array![[0.0, 0.6], [0.6, 0.0], [0.8, 0.8]];
        let dict = Dictionary::new(vec![d1.clone(), d2.clone()]).unwrap();
        let x1 = array![[0.5, 0.0], [0.0, 1.0]];
        let x2 = array![[1.0, 0.0], [0.0, 0.25]];
        let codes = CodeMatrix::new(vec![x1.clone(), x2.clone()]);
        let params = LearnParams {
            alpha: 0.5,
            gamma: 0.1,
            eta: 2.0,
            ..LearnParams::default()
        };

        let hand = {
            let mut total = 0.0;
            for (psi, d, x) in [(&psi1, &d1, &x1), (&psi2, &d2, &x2)] {
                let recon = d.dot(x);
                let e = psi - &recon;
                let fro: f64 = e.iter().map(|v| v * v).sum();
                let l1: f64 = e.iter().map(|v| v.abs()).sum();
                let x1n: f64 = x.iter().map(|v| v.abs()).sum();
                total += 0.5 * fro + 0.5 * l1 + 0.1 * x1n;
            }
            let mut coh = 0.0;
            for a in d1.columns() {
                for b in d2.columns() {
                    coh += a.dot(&b) * a.dot(&b);
                }
            }
            total + 2.0 * (2.0 * coh)
        };
        let got = objective_value(&train, &dict, &codes, &params).unwrap();
        assert_abs_diff_eq!(got, hand, epsilon = 1e-12);
    }

    #[test]
    fn objective_is_zero_for_perfect_reconstruction() {
        let train = small_train(4, 1, 3, 19);
        let dict = Dictionary::new(vec![train.block(0).clone()]).unwrap();
        let codes = CodeMatrix::new(vec![Array2::eye(3)]);
        let params = LearnParams {
            alpha: 0.5,
            gamma: 0.0,
            eta: 0.0,
            ..LearnParams::default()
        };
        let v = objective_value(&train, &dict, &codes, &params).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn learn_single_iteration_and_determinism() {
        let train = small_train(6, 2, 8, 20);
        let params = LearnParams {
            t_max: 1,
            ..quick_params(23)
        };
        let (_, _, trace) = learn(&train, &[3, 3], &params).unwrap();
        assert_eq!(trace.entries.len(), 1);

        let params = quick_params(23);
        let (d1, x1, t1) = learn(&train, &[3, 3], &params).unwrap();
        let (d2, x2, t2) = learn(&train, &[3, 3], &params).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(x1, x2);
        assert_eq!(t1.objectives(), t2.objectives());
    }

    #[test]
    fn learn_trace_is_monotone() {
        let train = small_train(8, 3, 12, 24);
        let params = LearnParams {
            t_max: 5,
            ..quick_params(25)
        };
        let (_, _, trace) = learn(&train, &[5, 5, 5], &params).unwrap();
        let objectives = trace.objectives();
        for pair in objectives.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "objective rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn learn_with_one_label_matches_plain_dl_objective() {
        // K = 1: the incoherence sum is empty, so the objective equals the
        // plain reconstruction-plus-sparsity form
        let train = small_train(5, 1, 8, 26);
        let params = LearnParams {
            alpha: 1.0,
            eta: 7.5,
            t_max: 2,
            ..quick_params(27)
        };
        let (dict, codes, trace) = learn(&train, &[4], &params).unwrap();
        let explicit = {
            let e = train.block(0) - &dict.block(0).dot(codes.block(0));
            let fro: f64 = e.iter().map(|v| v * v).sum();
            let x1: f64 = codes.block(0).iter().map(|v| v.abs()).sum();
            fro + params.gamma * x1
        };
        let last = *trace.objectives().last().unwrap();
        assert_abs_diff_eq!(last, explicit, epsilon = 1e-9);
    }
}
