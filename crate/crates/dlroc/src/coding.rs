//! Sparse coding solvers.
//!
//! Two coders share the `y ≈ Dx` model:
//!
//! - [`sparse_code_hybrid`] minimizes the convex objective
//!   `α‖y − Dx‖₂² + (1−α)‖y − Dx‖₁ + γ‖x‖₁` by cyclic coordinate descent,
//!   each coordinate solved exactly by [`solve_scalar_subproblem`];
//! - [`sparse_code_omp`] is orthogonal matching pursuit with a least-squares
//!   refit of the active set at every step.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::norms::{check_alpha, ensure_finite};
use crate::{scalar, Error, Result, Scalar};

/// Stopping controls for the hybrid coder.
#[derive(Clone, Debug, PartialEq)]
pub struct CoderStop<F> {
    /// Terminate once the `l₂` residual is at or below this value.
    pub residual_threshold: F,
    /// Hard cap on full coordinate sweeps.
    pub max_sweeps: usize,
    /// Terminate when the relative objective decrease over a full sweep
    /// falls below this value.
    pub objective_rel_tol: F,
}

impl<F: Scalar> Default for CoderStop<F> {
    fn default() -> Self {
        Self {
            residual_threshold: scalar(0.01),
            max_sweeps: 200,
            objective_rel_tol: scalar(1e-6),
        }
    }
}

impl<F: Scalar> CoderStop<F> {
    /// Stop criteria tight enough that the coder runs to numerical
    /// convergence; used by optimality tests.
    pub fn exact() -> Self {
        Self {
            residual_threshold: F::zero(),
            max_sweeps: 5000,
            objective_rel_tol: scalar(1e-14),
        }
    }
}

/// Dense coefficient vector with sparse interpretation: the support is the
/// set of indices holding nonzero entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCode<F> {
    values: Array1<F>,
}

impl<F: Scalar> SparseCode<F> {
    pub fn from_values(values: Array1<F>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: Array1::zeros(dim),
        }
    }

    pub fn values(&self) -> &Array1<F> {
        &self.values
    }

    pub fn into_values(self) -> Array1<F> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Indices whose entries are nonzero, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != F::zero())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != F::zero()).count()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == F::zero())
    }

    pub fn norm(&self) -> F {
        self.values.dot(&self.values).sqrt()
    }
}

/// Hybrid coding objective `α‖y − Dx‖₂² + (1−α)‖y − Dx‖₁ + γ‖x‖₁`.
pub fn coding_objective<F: Scalar>(
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    x: ArrayView1<F>,
    alpha: F,
    gamma: F,
) -> F {
    let prediction = dict.dot(&x);
    let mut fro = F::zero();
    let mut l1 = F::zero();
    for (yi, pi) in y.iter().zip(prediction.iter()) {
        let e = *yi - *pi;
        fro = fro + e * e;
        l1 = l1 + e.abs();
    }
    let x1: F = x.iter().map(|v| v.abs()).sum();
    alpha * fro + (F::one() - alpha) * l1 + gamma * x1
}

/// Exact minimizer of the one-dimensional restriction
/// `s ↦ α‖r − s·a‖₂² + (1−α)‖r − s·a‖₁ + γ|s|`.
///
/// The objective is convex and piecewise quadratic with breakpoints at `0`
/// and at `rᵢ/aᵢ` for every nonzero `aᵢ`. Its derivative
/// `φ'(s) = 2α(‖a‖²s − aᵀr) − (1−α)Σσᵢaᵢ + γτ` is nondecreasing, with
/// `Σσᵢaᵢ` dropping by `2|aᵢ|` at each coordinate breakpoint and `γτ`
/// jumping by `2γ` at zero; the minimizer is found by one left-to-right
/// scan for the derivative's sign change. On a flat piece (`α = 0`) the
/// piece's left end is returned, so ties resolve to the smallest minimizer.
pub fn solve_scalar_subproblem<F: Scalar>(
    residual: ArrayView1<F>,
    atom: ArrayView1<F>,
    alpha: F,
    gamma: F,
) -> Result<F> {
    if residual.len() != atom.len() {
        return Err(Error::DimensionMismatch(format!(
            "residual has {} entries, atom {}",
            residual.len(),
            atom.len()
        )));
    }
    check_alpha(alpha)?;
    if gamma < F::zero() {
        return Err(Error::BadSpec("gamma must be nonnegative".into()));
    }
    if atom.iter().all(|v| *v == F::zero()) {
        return Err(Error::ZeroAtom);
    }

    let one = F::one();
    let two = scalar::<F>(2.0);
    let one_minus = one - alpha;

    // events where the derivative jumps upward while scanning rightward
    let mut events: Vec<(F, F)> = Vec::with_capacity(atom.len() + 1);
    let mut atom_l1 = F::zero();
    for (r, a) in residual.iter().zip(atom.iter()) {
        if *a != F::zero() {
            events.push((*r / *a, two * one_minus * a.abs()));
            atom_l1 = atom_l1 + a.abs();
        }
    }
    events.push((F::zero(), two * gamma));
    events.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite breakpoints"));

    let quad = two * alpha * atom.dot(&atom);
    // derivative on the leftmost ray: quad*s + offset
    let mut offset = -two * alpha * atom.dot(&residual) - one_minus * atom_l1 - gamma;

    for &(event_s, jump) in &events {
        if quad > F::zero() {
            // the derivative is negative entering this piece; it crosses
            // zero inside iff the stationary point precedes the event
            let stationary = -offset / quad;
            if stationary <= event_s {
                return Ok(stationary);
            }
        }
        offset = offset + jump;
        if quad * event_s + offset >= F::zero() {
            return Ok(event_s);
        }
    }
    // derivative still negative after the last breakpoint; alpha > 0 is
    // guaranteed here because at alpha = 0 the rightmost slope is
    // ‖a‖₁ + γ > 0 and the scan returned above
    Ok(-offset / quad)
}

/// Codes `y` against `dict` on the hybrid objective.
///
/// The main engine is cyclic coordinate descent with each coordinate solved
/// exactly on the partial residual. For `α < 1` the `l₁` term on the
/// residual couples coordinates, and exact cyclic descent can reach a
/// coordinate-wise fixed point that is not a minimizer; once the sweep
/// phase settles, a deterministic ADMM refinement on the residual split
/// (whose x-step is a plain LASSO, solved by the same exact coordinate
/// sweeps) proposes an escape that is accepted only if it lowers the true
/// objective, so the recorded objective remains non-increasing.
///
/// Terminates when the `l₂` residual reaches `stop.residual_threshold`, when
/// the relative objective decrease falls below `stop.objective_rel_tol`, or
/// after `stop.max_sweeps` total sweeps across all phases.
pub fn sparse_code_hybrid<F: Scalar>(
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    alpha: F,
    gamma: F,
    stop: &CoderStop<F>,
) -> Result<SparseCode<F>> {
    sparse_code_hybrid_traced(y, dict, alpha, gamma, stop).map(|(code, _)| code)
}

enum PhaseExit {
    ThresholdHit,
    Settled,
    BudgetExhausted,
}

/// One exact cyclic sweep in place; `residual` is refreshed from scratch at
/// the end of the sweep so incremental drift cannot accumulate.
fn exact_sweep<F: Scalar>(
    x: &mut Array1<F>,
    residual: &mut Array1<F>,
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    alpha: F,
    gamma: F,
) -> Result<()> {
    for j in 0..dict.ncols() {
        let atom = dict.column(j);
        if x[j] != F::zero() {
            residual.scaled_add(x[j], &atom);
        }
        let s = solve_scalar_subproblem(residual.view(), atom, alpha, gamma)?;
        if s != F::zero() {
            residual.scaled_add(-s, &atom);
        }
        x[j] = s;
    }
    *residual = y.to_owned() - dict.dot(x);
    Ok(())
}

/// Cyclic soft-threshold sweeps for `min ‖b − Dx‖₂² + γ_l1‖x‖₁`, warm
/// started at `x`; this is the `α = 1` special case of the scalar
/// subproblem in closed form. Returns the number of sweeps spent.
fn lasso_sweeps<F: Scalar>(
    x: &mut Array1<F>,
    b: &Array1<F>,
    dict: ArrayView2<F>,
    gamma_l1: F,
    max_sweeps: usize,
) -> usize {
    let threshold = gamma_l1 / scalar::<F>(2.0);
    let settle = scalar::<F>(1e-12);
    let mut residual = b - &dict.dot(x);
    let mut spent = 0;
    for _ in 0..max_sweeps {
        spent += 1;
        let mut max_change = F::zero();
        for j in 0..dict.ncols() {
            let atom = dict.column(j);
            if x[j] != F::zero() {
                residual.scaled_add(x[j], &atom);
            }
            let corr = atom.dot(&residual);
            let norm_sq = atom.dot(&atom);
            let s = if corr > threshold {
                (corr - threshold) / norm_sq
            } else if corr < -threshold {
                (corr + threshold) / norm_sq
            } else {
                F::zero()
            };
            if s != F::zero() {
                residual.scaled_add(-s, &atom);
            }
            max_change = max_change.max((s - x[j]).abs());
            x[j] = s;
        }
        residual = b - &dict.dot(x);
        if max_change < settle {
            break;
        }
    }
    spent
}

/// Runs exact sweeps until the residual threshold, relative-decrease
/// settling, or budget exhaustion; optionally records per-sweep objectives.
#[allow(clippy::too_many_arguments)]
fn exact_phase<F: Scalar>(
    x: &mut Array1<F>,
    residual: &mut Array1<F>,
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    alpha: F,
    gamma: F,
    stop: &CoderStop<F>,
    sweeps_left: &mut usize,
    mut trace: Option<&mut Vec<F>>,
) -> Result<PhaseExit> {
    let floor = scalar::<F>(crate::norms::TOLERANCE_FLOOR);
    let mut prev = coding_objective(y, dict, x.view(), alpha, gamma);
    while *sweeps_left > 0 {
        *sweeps_left -= 1;
        exact_sweep(x, residual, y, dict, alpha, gamma)?;
        let objective = coding_objective(y, dict, x.view(), alpha, gamma);
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(objective);
        }
        if residual.dot(residual).sqrt() <= stop.residual_threshold {
            return Ok(PhaseExit::ThresholdHit);
        }
        if prev - objective < stop.objective_rel_tol * prev.abs().max(floor) {
            return Ok(PhaseExit::Settled);
        }
        prev = objective;
    }
    Ok(PhaseExit::BudgetExhausted)
}

/// [`sparse_code_hybrid`] that also returns the recorded objective values:
/// one per exact sweep, plus one per accepted continuation improvement.
/// The sequence is non-increasing.
pub fn sparse_code_hybrid_traced<F: Scalar>(
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    alpha: F,
    gamma: F,
    stop: &CoderStop<F>,
) -> Result<(SparseCode<F>, Vec<F>)> {
    let (m, n_atoms) = dict.dim();
    if y.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} entries, dictionary rows {m}",
            y.len()
        )));
    }
    ensure_finite(&dict)?;
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    check_alpha(alpha)?;
    for j in 0..n_atoms {
        if dict.column(j).iter().all(|v| *v == F::zero()) {
            return Err(Error::ZeroAtom);
        }
    }

    let mut x: Array1<F> = Array1::zeros(n_atoms);
    let mut residual = y.to_owned();
    let mut objectives = Vec::new();

    if residual.dot(&residual).sqrt() <= stop.residual_threshold {
        return Ok((SparseCode { values: x }, objectives));
    }

    let mut sweeps_left = stop.max_sweeps;
    let exit = exact_phase(
        &mut x,
        &mut residual,
        y,
        dict,
        alpha,
        gamma,
        stop,
        &mut sweeps_left,
        Some(&mut objectives),
    )?;

    if alpha < F::one() && matches!(exit, PhaseExit::Settled) {
        admm_escape(
            &mut x,
            &mut residual,
            y,
            dict,
            alpha,
            gamma,
            stop,
            &mut sweeps_left,
            &mut objectives,
        )?;
    }
    Ok((SparseCode { values: x }, objectives))
}

/// ADMM refinement around a settled iterate, on the split
/// `min γ‖x‖₁ + α‖r‖₂² + (1−α)‖r‖₁ subject to Dx + r = y`.
///
/// The x-step is a LASSO solved by warm-started exact coordinate sweeps
/// (its nonsmooth part is separable, so the sweeps cannot stall); the
/// r-step is an elementwise closed-form prox. The best iterate is polished
/// with exact sweeps on the true objective and adopted only if it strictly
/// improves, keeping the recorded objective non-increasing. Work is charged
/// against the sweep budget.
#[allow(clippy::too_many_arguments)]
fn admm_escape<F: Scalar>(
    x: &mut Array1<F>,
    residual: &mut Array1<F>,
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    alpha: F,
    gamma: F,
    stop: &CoderStop<F>,
    sweeps_left: &mut usize,
    objectives: &mut Vec<F>,
) -> Result<()> {
    let floor = scalar::<F>(crate::norms::TOLERANCE_FLOOR);
    let accept_rel = scalar::<F>(1e-10);
    let settle = scalar::<F>(1e-10) * y.dot(&y).sqrt().max(F::one());
    let rho = F::one();
    let two = scalar::<F>(2.0);
    let incumbent = coding_objective(y, dict, x.view(), alpha, gamma);

    let m = y.len();
    let mut z = x.clone();
    let mut split = Array1::<F>::zeros(m);
    let mut dual = Array1::<F>::zeros(m);
    let mut best_z = z.clone();
    let mut best_value = incumbent;
    // refinement effort follows the caller's settling tolerance
    let mut prev_best = incumbent;
    let mut stalled_rounds = 0usize;

    while *sweeps_left > 0 {
        // x-step: min γ‖z‖₁ + ρ/2‖Dz − (y − r − u)‖²
        let b = &y.to_owned() - &split - &dual;
        let spent = lasso_sweeps(&mut z, &b, dict, two * gamma / rho, (*sweeps_left).min(10));
        *sweeps_left = sweeps_left.saturating_sub(spent);

        // r-step: elementwise prox of αr² + (1−α)|r| at w = y − Dz − u
        let w = &y.to_owned() - &dict.dot(&z) - &dual;
        let one_minus = F::one() - alpha;
        let denom = two * alpha + rho;
        let mut split_change = F::zero();
        for (ri, &wi) in split.iter_mut().zip(w.iter()) {
            let shifted_pos = rho * wi - one_minus;
            let shifted_neg = rho * wi + one_minus;
            let next = if shifted_pos > F::zero() {
                shifted_pos / denom
            } else if shifted_neg < F::zero() {
                shifted_neg / denom
            } else {
                F::zero()
            };
            split_change = split_change.max((next - *ri).abs());
            *ri = next;
        }

        // dual ascent on the split constraint
        let gap = &dict.dot(&z) + &split - &y.to_owned();
        dual += &gap;

        let value = coding_objective(y, dict, z.view(), alpha, gamma);
        if value < best_value {
            best_value = value;
            best_z.assign(&z);
        }
        let gap_norm = gap.dot(&gap).sqrt();
        if gap_norm < settle && split_change < settle {
            break;
        }
        if prev_best - best_value < stop.objective_rel_tol * prev_best.abs().max(floor) {
            stalled_rounds += 1;
            if stalled_rounds >= 5 {
                break;
            }
        } else {
            stalled_rounds = 0;
        }
        prev_best = best_value;
    }

    // polish the best iterate on the true objective before acceptance
    let mut rz = y.to_owned() - dict.dot(&best_z);
    exact_phase(
        &mut best_z,
        &mut rz,
        y,
        dict,
        alpha,
        gamma,
        stop,
        sweeps_left,
        None,
    )?;
    let candidate = coding_objective(y, dict, best_z.view(), alpha, gamma);
    if candidate < incumbent - accept_rel * incumbent.abs().max(floor) {
        *x = best_z;
        *residual = rz;
        objectives.push(candidate);
    }
    Ok(())
}

/// Orthogonal matching pursuit: greedy atom selection by maximum absolute
/// correlation with the residual, least-squares refit on the active set at
/// every step.
///
/// Expects unit-normalized dictionary columns. Stops when the residual norm
/// reaches `residual_tol` or the active set holds `max_atoms` atoms. A
/// rank-deficient refit (duplicated atoms) is resolved by skipping the
/// offending atom.
pub fn sparse_code_omp<F: Scalar>(
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    residual_tol: F,
    max_atoms: usize,
) -> Result<SparseCode<F>> {
    sparse_code_omp_traced(y, dict, residual_tol, max_atoms).map(|(code, _)| code)
}

/// [`sparse_code_omp`] that also returns the residual norm recorded after
/// every accepted atom.
pub fn sparse_code_omp_traced<F: Scalar>(
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    residual_tol: F,
    max_atoms: usize,
) -> Result<(SparseCode<F>, Vec<F>)> {
    let (m, n_atoms) = dict.dim();
    if y.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} entries, dictionary rows {m}",
            y.len()
        )));
    }
    ensure_finite(&dict)?;
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if max_atoms == 0 {
        return Err(Error::BadSpec("max_atoms must be positive".into()));
    }

    let mut selected: Vec<usize> = Vec::new();
    let mut in_model = vec![false; n_atoms];
    let mut banned = vec![false; n_atoms];
    let mut coefs: Vec<F> = Vec::new();
    let mut residual = y.to_owned();
    let mut trace = Vec::new();

    loop {
        if residual.dot(&residual).sqrt() <= residual_tol
            || selected.len() >= max_atoms.min(n_atoms)
        {
            break;
        }
        let mut best: Option<(usize, F)> = None;
        for j in 0..n_atoms {
            if in_model[j] || banned[j] {
                continue;
            }
            let c = dict.column(j).dot(&residual).abs();
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((j, c));
            }
        }
        let Some((j, corr)) = best else { break };
        if corr == F::zero() {
            break; // residual orthogonal to every remaining atom
        }

        let mut trial = selected.clone();
        trial.push(j);
        match least_squares_on_support(y, dict, &trial) {
            Some(solution) => {
                selected = trial;
                in_model[j] = true;
                coefs = solution;
                residual = y.to_owned();
                for (idx, &atom_idx) in selected.iter().enumerate() {
                    residual.scaled_add(-coefs[idx], &dict.column(atom_idx));
                }
                trace.push(residual.dot(&residual).sqrt());
            }
            None => {
                banned[j] = true;
            }
        }
    }

    let mut values: Array1<F> = Array1::zeros(n_atoms);
    for (idx, &atom_idx) in selected.iter().enumerate() {
        values[atom_idx] = coefs[idx];
    }
    Ok((SparseCode { values }, trace))
}

/// Least-squares coefficients of `y` on the listed dictionary columns via
/// the normal equations; `None` when the system is numerically singular.
fn least_squares_on_support<F: Scalar>(
    y: ArrayView1<F>,
    dict: ArrayView2<F>,
    support: &[usize],
) -> Option<Vec<F>> {
    let k = support.len();
    let mut gram = vec![F::zero(); k * k];
    let mut rhs = vec![F::zero(); k];
    let mut max_entry = F::zero();
    for (a, &ia) in support.iter().enumerate() {
        for (b, &ib) in support.iter().enumerate().skip(a) {
            let v = dict.column(ia).dot(&dict.column(ib));
            gram[a * k + b] = v;
            gram[b * k + a] = v;
            max_entry = max_entry.max(v.abs());
        }
        rhs[a] = dict.column(ia).dot(&y);
    }
    let pivot_tol = F::epsilon() * scalar::<F>(k as f64) * max_entry;

    // Gaussian elimination with partial pivoting.
    for col in 0..k {
        let mut pivot_row = col;
        let mut pivot_val = gram[col * k + col].abs();
        for row in (col + 1)..k {
            let v = gram[row * k + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val <= pivot_tol {
            return None;
        }
        if pivot_row != col {
            for c in 0..k {
                gram.swap(col * k + c, pivot_row * k + c);
            }
            rhs.swap(col, pivot_row);
        }
        for row in (col + 1)..k {
            let factor = gram[row * k + col] / gram[col * k + col];
            if factor != F::zero() {
                for c in col..k {
                    let v = gram[col * k + c];
                    gram[row * k + c] = gram[row * k + c] - factor * v;
                }
                rhs[row] = rhs[row] - factor * rhs[col];
            }
        }
    }
    let mut solution = vec![F::zero(); k];
    for row in (0..k).rev() {
        let mut acc = rhs[row];
        for c in (row + 1)..k {
            acc = acc - gram[row * k + c] * solution[c];
        }
        solution[row] = acc / gram[row * k + row];
    }
    Some(solution)
}
