//! Donor weights on the unit simplex minimizing a time-weighted pre-treatment
//! squared prediction error.
//!
//! The loss is `sum_t omega_t (y_t - sum_j w_j x_jt)^2` with
//! `omega_t = exp(alpha * (t - T_end))`. It is a convex quadratic in `w`, so
//! the solver runs projected gradient descent with a fixed `1/L` step from
//! the uniform vector. Every few iterations, and whenever progress stalls,
//! the iterate is pushed to the exact minimizer of its current face (the
//! affine hull of its support), stepping back to the simplex boundary when
//! that minimizer leaves it. Both moves never increase the objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::study::StudyData;

/// Per-period loss weights for the pre window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWeights {
    omega: Vec<f64>,
    alpha: f64,
}

impl TimeWeights {
    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

/// `omega = exp(alpha * offset)` for offsets `t - T_end <= 0`.
pub fn time_weights(offsets: &[i64], alpha: f64) -> Result<TimeWeights> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("decay rate must be finite and >= 0, got {alpha}")));
    }
    if let Some(&o) = offsets.iter().find(|&&o| o > 0) {
        return Err(Error::Parameter(format!("offset {o} is after the last pre period")));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter("offsets must be strictly increasing".to_string()));
    }
    Ok(TimeWeights {
        omega: offsets.iter().map(|&o| (alpha * o as f64).exp()).collect(),
        alpha,
    })
}

/// Donor weights aligned with [`StudyData::donor_labels`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Wraps `w` after checking it lies on the simplex.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if w.is_empty() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter("weights are not a point of the simplex".to_string()));
        }
        Ok(WeightVector(w))
    }

    pub fn uniform(n: usize) -> Self {
        let mut w = vec![1.0 / n as f64; n];
        finalize_simplex(&mut w);
        WeightVector(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Weighted combination `sum_j w_j series_j`.
    pub fn combine(&self, series: &[Vec<f64>]) -> Vec<f64> {
        let n = series.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for (wj, s) in self.0.iter().zip(series) {
            if *wj == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(s) {
                *o += wj * x;
            }
        }
        out
    }

    /// Index of the largest weight; first one wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &x) in self.0.iter().enumerate() {
            if x > self.0[best] {
                best = j;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when an iteration lowers the objective by less than this
    /// fraction and a face polish cannot improve it either.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Iterations between face polishes.
    pub polish_interval: usize,
    /// Keep the per-iteration objective sequence in [`FitResult::trace`].
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-12,
            max_iterations: 100_000,
            polish_interval: 50,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub weights: WeightVector,
    pub synthetic_pre: Vec<f64>,
    /// Weighted SSE in squared outcome units.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest gap between an active donor's gradient and the minimum
    /// gradient, relative to the gradient scale. Zero at an exact optimum.
    pub kkt_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

/// Euclidean projection onto `{w >= 0, sum w = 1}` by sorting.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    finalize_simplex(&mut w);
    w
}

/// Clamps negatives to zero and renormalizes so the entries sum to exactly
/// one in index order.
pub(crate) fn finalize_simplex(w: &mut [f64]) {
    for x in w.iter_mut() {
        if *x < 0.0 || !x.is_finite() {
            *x = 0.0;
        }
    }
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        let n = w.len() as f64;
        w.iter_mut().for_each(|x| *x = 1.0 / n);
    } else {
        w.iter_mut().for_each(|x| *x /= sum);
    }
    // Make the left-to-right sum exactly 1 by absorbing the residue into the
    // last positive weight: 1 - prefix is exact for prefix >= 1/2 and rounds
    // back to 1 otherwise. If rounding pushed the prefix past 1, shave the
    // largest earlier weight an ulp at a time first.
    let Some(last) = w.iter().rposition(|&x| x > 0.0) else { return };
    for _ in 0..256 {
        let prefix: f64 = w[..last].iter().sum();
        if prefix <= 1.0 {
            w[last] = 1.0 - prefix;
            return;
        }
        let top = (0..last).fold(0, |b, j| if w[j] > w[b] { j } else { b });
        w[top] = w[top].next_down();
    }
}

/// Scaled problem data: outcomes divided by a common level.
struct Problem<'a> {
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    omega: &'a [f64],
    // Gram matrix X Ω Xᵀ (row-major J×J) and X Ω y
    q: Vec<f64>,
    b: Vec<f64>,
    grad_scale: f64,
}

impl<'a> Problem<'a> {
    fn new(study: &StudyData, omega: &'a [f64], scale: f64) -> Self {
        let y: Vec<f64> = study.treated_pre.iter().map(|v| v / scale).collect();
        let x: Vec<Vec<f64>> = study
            .donors_pre
            .iter()
            .map(|r| r.iter().map(|v| v / scale).collect())
            .collect();
        let nd = x.len();
        let mut q = vec![0.0; nd * nd];
        let mut b = vec![0.0; nd];
        for i in 0..nd {
            b[i] = (0..y.len()).map(|t| omega[t] * x[i][t] * y[t]).sum();
            for k in i..nd {
                let v: f64 = (0..y.len()).map(|t| omega[t] * x[i][t] * x[k][t]).sum();
                q[i * nd + k] = v;
                q[k * nd + i] = v;
            }
        }
        let ny: f64 = y.iter().zip(omega).map(|(v, o)| o * v * v).sum::<f64>().sqrt();
        let nx = (0..nd).map(|i| q[i * nd + i].sqrt()).fold(0.0, f64::max);
        let grad_scale = 2.0 * ny * nx;
        Problem {
            y,
            x,
            omega,
            q,
            b,
            grad_scale: if grad_scale > 0.0 { grad_scale } else { 1.0 },
        }
    }

    fn n(&self) -> usize {
        self.x.len()
    }

    fn residuals(&self, w: &[f64]) -> Vec<f64> {
        let mut r = self.y.clone();
        for (wj, xj) in w.iter().zip(&self.x) {
            if *wj == 0.0 {
                continue;
            }
            for (rt, xt) in r.iter_mut().zip(xj) {
                *rt -= wj * xt;
            }
        }
        r
    }

    fn objective(&self, w: &[f64]) -> f64 {
        self.residuals(w)
            .iter()
            .zip(self.omega)
            .map(|(r, o)| o * r * r)
            .sum()
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let r = self.residuals(w);
        self.x
            .iter()
            .map(|xj| -2.0 * xj.iter().zip(&r).zip(self.omega).map(|((x, r), o)| o * r * x).sum::<f64>())
            .collect()
    }

    /// Upper bound on the gradient's Lipschitz constant, 2 λmax(Q).
    fn lipschitz(&self) -> f64 {
        let nd = self.n();
        let trace: f64 = (0..nd).map(|i| self.q[i * nd + i]).sum();
        let row_sum = (0..nd)
            .map(|i| (0..nd).map(|k| self.q[i * nd + k].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let l = 2.0 * trace.min(row_sum);
        if l > 0.0 && l.is_finite() {
            l
        } else {
            1.0
        }
    }

    fn kkt_residual(&self, w: &[f64]) -> f64 {
        let g = self.gradient(w);
        let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
        let worst = w
            .iter()
            .zip(&g)
            .filter(|(wj, _)| **wj > 0.0)
            .map(|(_, gj)| gj - gmin)
            .fold(0.0, f64::max);
        worst / self.grad_scale
    }

    /// Minimizer of the loss on the affine hull of `support` with weights
    /// summing to one.
    fn face_minimizer(&self, support: &[usize]) -> Option<Vec<f64>> {
        let k = support.len();
        let nd = self.n();
        let mut m = DMatrix::<f64>::zeros(k + 1, k + 1);
        let mut rhs = DVector::<f64>::zeros(k + 1);
        for (a, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                m[(a, c)] = 2.0 * self.q[i * nd + j];
            }
            m[(a, k)] = 1.0;
            m[(k, a)] = 1.0;
            rhs[a] = 2.0 * self.b[i];
        }
        rhs[k] = 1.0;
        let sol = m.lu().solve(&rhs)?;
        let v: Vec<f64> = sol.iter().take(k).copied().collect();
        v.iter().all(|x| x.is_finite()).then_some(v)
    }

    /// Moves `w` toward the minimizer of its current face, never raising the
    /// objective. Returns the objective decrease.
    fn polish(&self, w: &mut Vec<f64>, obj: &mut f64) -> f64 {
        let start = *obj;
        for _ in 0..self.n() {
            let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
            if support.len() < 2 {
                break;
            }
            let Some(v) = self.face_minimizer(&support) else {
                break;
            };
            let mut cand = vec![0.0; w.len()];
            let mut interior = true;
            if v.iter().all(|&x| x >= 0.0) {
                for (&j, &x) in support.iter().zip(&v) {
                    cand[j] = if x <= 1e-12 { 0.0 } else { x };
                }
            } else {
                interior = false;
                // ratio test: largest step toward v that stays feasible
                let mut tau = 1.0;
                let mut blocking = support[0];
                for (&j, &x) in support.iter().zip(&v) {
                    if x < 0.0 {
                        let t = w[j] / (w[j] - x);
                        if t < tau {
                            tau = t;
                            blocking = j;
                        }
                    }
                }
                for (&j, &x) in support.iter().zip(&v) {
                    cand[j] = w[j] + tau * (x - w[j]);
                }
                cand[blocking] = 0.0;
            }
            finalize_simplex(&mut cand);
            let f = self.objective(&cand);
            if f.is_finite() && f <= *obj {
                *w = cand;
                *obj = f;
            } else {
                break;
            }
            if interior {
                break;
            }
        }
        start - *obj
    }
}

fn problem_scale(study: &StudyData) -> f64 {
    let mean = study.mean_treated_pre();
    if mean > 0.0 && mean.is_finite() {
        return mean;
    }
    let max = study
        .treated_pre
        .iter()
        .chain(study.donors_pre.iter().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        max
    } else {
        1.0
    }
}

/// Fits simplex donor weights for `study` under the loss weights `tw`.
pub fn fit(study: &StudyData, tw: &TimeWeights, opts: &SolverOptions) -> Result<FitResult> {
    if tw.len() != study.n_pre() {
        return Err(Error::Parameter(format!(
            "{} time weights for a {}-period pre window",
            tw.len(),
            study.n_pre()
        )));
    }
    if study.n_donors() == 0 {
        return Err(Error::Study("empty donor pool".to_string()));
    }
    if !(opts.tolerance >= 0.0) || opts.polish_interval == 0 {
        return Err(Error::Parameter("invalid solver options".to_string()));
    }
    let scale = problem_scale(study);
    let prob = Problem::new(study, &tw.omega, scale);
    let step = 1.0 / prob.lipschitz();
    let s2 = scale * scale;

    let mut w = WeightVector::uniform(study.n_donors()).into_inner();
    let mut obj = prob.objective(&w);
    let mut trace = opts.record_trace.then(|| vec![obj * s2]);
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iterations {
        iterations = it;
        let g = prob.gradient(&w);
        let v: Vec<f64> = w.iter().zip(&g).map(|(wj, gj)| wj - step * gj).collect();
        let cand = project_simplex(&v);
        let f = prob.objective(&cand);
        let prev = obj;
        if f <= obj {
            w = cand;
            obj = f;
        }
        let stalled = prev - obj <= opts.tolerance * prev;
        if stalled || it % opts.polish_interval == 0 {
            let before = obj;
            let gain = prob.polish(&mut w, &mut obj);
            if stalled && gain <= opts.tolerance * before {
                converged = true;
            }
        }
        if let Some(t) = trace.as_mut() {
            t.push(obj * s2);
        }
        if converged {
            break;
        }
    }
    if !converged {
        log::warn!(
            "solver for {:?} hit max_iterations = {} without converging",
            study.treated,
            opts.max_iterations
        );
    }

    let kkt_residual = prob.kkt_residual(&w);
    let weights = WeightVector(w);
    let synthetic_pre = weights.combine(&study.donors_pre);
    let objective = study
        .treated_pre
        .iter()
        .zip(&synthetic_pre)
        .zip(&tw.omega)
        .map(|((y, s), o)| o * (y - s) * (y - s))
        .sum();
    Ok(FitResult {
        weights,
        synthetic_pre,
        objective,
        iterations,
        converged,
        kkt_residual,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn study(treated: &[f64], donors: &[Vec<f64>]) -> StudyData {
        // one extra post period so the study is valid
        let mut t = treated.to_vec();
        t.push(treated[treated.len() - 1]);
        let d: Vec<Vec<f64>> = donors
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.push(s[s.len() - 1]);
                s
            })
            .collect();
        StudyData::from_series(&t, &d, treated.len()).unwrap()
    }

    fn flat(n: usize) -> TimeWeights {
        time_weights(&(1 - n as i64..=0).collect::<Vec<_>>(), 0.0).unwrap()
    }

    #[test]
    fn time_weight_values() {
        let tw = time_weights(&[-3, -2, -1, 0], 0.0).unwrap();
        assert_eq!(tw.omega(), [1.0; 4]);
        for alpha in [0.0, 0.003, 0.005, 1.0, 7.5] {
            assert_eq!(*time_weights(&[-1, 0], alpha).unwrap().omega().last().unwrap(), 1.0);
        }
        // exp(-0.295) from a 40-digit evaluation
        let tw = time_weights(&[-59], 0.005).unwrap();
        let expected = 0.744_531_587_465_909_357_f64;
        assert!((tw.omega()[0] - expected).abs() <= f64::EPSILON * expected);
        assert!(time_weights(&[0], -0.001).is_err());
        assert!(time_weights(&[1], 0.1).is_err());
        assert!(time_weights(&[-1, -1], 0.1).is_err());
    }

    #[test]
    fn projection_basics() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), [0.2, 0.3, 0.5]);
        assert_eq!(project_simplex(&[5.0, 0.0]), [1.0, 0.0]);
        let w = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(w.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn single_donor_perfect_fit() {
        let d1 = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
        let d2 = vec![2.0, 7.0, 1.0, 8.0, 2.0, 8.0];
        let d3 = vec![10.0, 12.0, 11.0, 15.0, 13.0, 16.0];
        let s = study(&d3, &[d1, d2, d3.clone()]);
        let r = fit(&s, &flat(6), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        let w = r.weights.as_slice();
        assert!(w[0].abs() < 1e-9 && w[1].abs() < 1e-9 && (w[2] - 1.0).abs() < 1e-9);
        assert!(r.objective < 1e-18 * 1000.0);
    }

    #[test]
    fn half_half_mixture() {
        let d1 = vec![100.0, 120.0, 90.0, 130.0, 110.0];
        let d2 = vec![200.0, 180.0, 230.0, 170.0, 240.0];
        let y: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        let s = study(&y, &[d1, d2]);
        let r = fit(&s, &flat(5), &SolverOptions::default()).unwrap();
        let w = r.weights.as_slice();
        assert!((w[0] - 0.5).abs() < 1e-9 && (w[1] - 0.5).abs() < 1e-9);
        assert!(r.objective < 1e-12);
    }

    #[test]
    fn constant_donors_project_to_endpoint() {
        let s = study(&[5.0; 4], &[vec![1.0; 4], vec![2.0; 4]]);
        let tw = time_weights(&[-3, -2, -1, 0], 0.005).unwrap();
        let r = fit(&s, &tw, &SolverOptions::default()).unwrap();
        assert_eq!(r.weights.as_slice(), [0.0, 1.0]);
        let expected: f64 = tw.omega().iter().map(|o| o * 9.0).sum();
        assert!((r.objective - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn identical_donors_are_not_an_error() {
        let s = study(&[4.0, 6.0, 5.0], &[vec![3.0; 3], vec![3.0; 3], vec![3.0; 3]]);
        let r = fit(&s, &flat(3), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.weights.as_slice().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn misaligned_weights_rejected() {
        let s = study(&[1.0, 2.0], &[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(fit(&s, &flat(3), &SolverOptions::default()), Err(Error::Parameter(_))));
    }

    #[test]
    fn max_iterations_flags_nonconvergence() {
        let d1 = vec![1.0, 5.0, 2.0, 8.0];
        let d2 = vec![4.0, 1.0, 6.0, 2.0];
        let d3 = vec![3.0, 3.0, 1.0, 5.0];
        let s = study(&[2.0, 3.5, 3.0, 4.0], &[d1, d2, d3]);
        let opts = SolverOptions {
            max_iterations: 1,
            polish_interval: 1000,
            ..SolverOptions::default()
        };
        let r = fit(&s, &flat(4), &opts).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(!r.converged);
    }

    fn arb_study() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        (2usize..7, 3usize..20).prop_flat_map(|(nd, t)| {
            (
                proptest::collection::vec(50_000.0f64..2_000_000.0, t),
                proptest::collection::vec(proptest::collection::vec(50_000.0f64..2_000_000.0, t), nd),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_is_feasible(v in proptest::collection::vec(-1e3f64..1e3, 1..30)) {
            let w = project_simplex(&v);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn finalize_sums_to_exactly_one(v in proptest::collection::vec(0f64..1.0, 1..40)) {
            let mut w = v.clone();
            finalize_simplex(&mut w);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert_eq!(w.iter().sum::<f64>(), 1.0);
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                for (a, b) in w.iter().zip(&v) {
                    prop_assert!((a - b / s).abs() <= 1e-14);
                }
            }
        }

        #[test]
        fn objective_trace_is_monotone((y, donors) in arb_study(), alpha in 0.0f64..0.05) {
            let s = study(&y, &donors);
            let tw = time_weights(&s.pre_offsets(), alpha).unwrap();
            let opts = SolverOptions { record_trace: true, ..SolverOptions::default() };
            let r = fit(&s, &tw, &opts).unwrap();
            let trace = r.trace.unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(r.converged);
            prop_assert!(r.kkt_residual <= 1e-6, "kkt {}", r.kkt_residual);
        }
    }
}
