//! Privacy loss distributions (PLDs) on a uniform grid.
//!
//! The privacy loss of one subsampled Gaussian step is a real random
//! variable Y. Its law is discretized on the grid `ℓ_j = j·h (+ offset)`,
//! composed by self-convolution, and converted to a privacy profile with
//!
//! ```text
//! δ(ε) = Σ_{ℓ > ε} m(ℓ) (1 − e^{ε − ℓ}) + m(+∞)
//! ```
//!
//! Mass that falls beyond the upper truncation point is kept in a `+∞` atom,
//! so it always counts fully towards δ. Mass below the lower truncation
//! point is moved up onto the first grid point, which can only increase δ.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{normal, AccountantError, EpsilonReport, MechanismSpec, Method, Result};

/// Neighbouring relation whose privacy loss is being tracked.
///
/// `Remove` compares the dataset with a record against the dataset without
/// it (output law `(1−q)N(0,σ²) + qN(1,σ²)` against `N(0,σ²)`), `Add` is the
/// reverse pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Remove,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// Bin probabilities sit at the bin centres and the grid is shifted so
    /// that the discrete mean equals the continuous one. The reported ε is an
    /// estimate; the error bound comes from a Hoeffding bound on the
    /// accumulated rounding, as in the PRV accountant.
    #[default]
    MeanPreserving,
    /// Every bin's mass is rounded up to the larger loss value, so the
    /// reported ε is an upper bound. The rounding can add up to `T·h`.
    Pessimistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrvConfig {
    /// Grid spacing h.
    pub mesh: f64,
    /// Slack on δ spent on tail truncation and the discretization bound.
    /// `None` means δ/10 for the δ being queried.
    pub delta_error: Option<f64>,
    /// Largest number of grid points any distribution may occupy.
    pub max_grid: usize,
    pub discretization: Discretization,
}

impl Default for PrvConfig {
    fn default() -> Self {
        PrvConfig { mesh: 1e-4, delta_error: None, max_grid: 1 << 24, discretization: Discretization::MeanPreserving }
    }
}

/// Share of the δ_error budget spent on truncating tails. The rest is left
/// for the discretization error bound.
const TRUNCATION_SHARE: f64 = 1e-4;

/// Grids shorter than this are convolved directly.
const DIRECT_CONVOLUTION_LIMIT: usize = 1 << 12;

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLossDistribution {
    mesh: f64,
    /// Grid index of `mass[0]`.
    start: i64,
    /// Shift added to every grid value.
    offset: f64,
    mass: Vec<f64>,
    truncated_mass: f64,
    lower_moved: f64,
    discretization: Discretization,
    compositions: u64,
    /// Probability, summed over composed steps, that a step's loss fell
    /// outside the grid range.
    coupling_failure: f64,
    /// Range of `Y − Ỹ` for one step.
    coupling_width: f64,
    stage_tail: f64,
    delta_error: f64,
    max_grid: usize,
}

impl PrivacyLossDistribution {
    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    /// Loss value carried by `masses()[k]`.
    pub fn loss_at(&self, k: usize) -> f64 {
        (self.start + k as i64) as f64 * self.mesh + self.offset
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Mass placed at +∞.
    pub fn truncated_mass(&self) -> f64 {
        self.truncated_mass
    }

    /// Mass moved up from below the grid.
    pub fn lower_moved_mass(&self) -> f64 {
        self.lower_moved
    }

    pub fn discretization(&self) -> Discretization {
        self.discretization
    }

    pub fn compositions(&self) -> u64 {
        self.compositions
    }

    pub fn delta_error(&self) -> f64 {
        self.delta_error
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum::<f64>() + self.truncated_mass
    }

    /// Mean of the finite part of the distribution.
    pub fn mean(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &m) in self.mass.iter().enumerate() {
            num += m * self.loss_at(k);
            den += m;
        }
        num / den
    }

    /// Worst-case shift of the reported ε caused by discretization, for the
    /// pessimistic grid.
    fn rounding_shift(&self) -> f64 {
        self.compositions as f64 * self.coupling_width
    }

    /// Deviation `t` such that the accumulated rounding exceeds `t` with
    /// probability at most `eta` (Hoeffding).
    fn hoeffding_deviation(&self, eta: f64) -> f64 {
        let t = self.compositions as f64;
        self.coupling_width * (t * (1.0 / eta).ln() / 2.0).sqrt()
    }

    fn trim(&mut self) {
        for m in self.mass.iter_mut() {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
        let mut acc = 0.0;
        let mut hi = self.mass.len();
        while hi > 1 && acc + self.mass[hi - 1] <= self.stage_tail {
            acc += self.mass[hi - 1];
            hi -= 1;
        }
        self.mass.truncate(hi);
        self.truncated_mass += acc;

        let mut acc = 0.0;
        let mut lo = 0;
        while lo + 1 < self.mass.len() && acc + self.mass[lo] <= self.stage_tail {
            acc += self.mass[lo];
            lo += 1;
        }
        if lo > 0 {
            self.mass.drain(..lo);
            self.mass[0] += acc;
            self.start += lo as i64;
            self.lower_moved += acc;
        }
    }
}

/// Law of the privacy loss of a single subsampled Gaussian step.
struct LossCurve {
    q: f64,
    sigma: f64,
    ln1mq: f64,
    direction: Direction,
}

impl LossCurve {
    fn new(spec: &MechanismSpec, direction: Direction) -> Self {
        LossCurve {
            q: spec.q,
            sigma: spec.sigma,
            ln1mq: if spec.q < 1.0 { (-spec.q).ln_1p() } else { f64::NEG_INFINITY },
            direction,
        }
    }

    /// ln of the density ratio of the remove pair at output x.
    fn remove_loss(&self, x: f64) -> f64 {
        let z = (2.0 * x - 1.0) / (2.0 * self.sigma * self.sigma);
        if self.q >= 1.0 {
            return z;
        }
        let a = self.ln1mq;
        let b = self.q.ln() + z;
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        hi + (lo - hi).exp().ln_1p()
    }

    /// Output x at which the remove loss equals `l`; requires `l > ln(1−q)`.
    fn remove_x(&self, l: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        if self.q >= 1.0 {
            return s2 * l + 0.5;
        }
        let u = l - self.ln1mq;
        let ln_expm1 = if u > 30.0 { u + (-(-u).exp()).ln_1p() } else { u.exp_m1().ln() };
        s2 * (self.ln1mq + ln_expm1 - self.q.ln()) + 0.5
    }

    fn support(&self) -> (f64, f64) {
        match self.direction {
            Direction::Remove => (self.ln1mq, f64::INFINITY),
            Direction::Add => (f64::NEG_INFINITY, -self.ln1mq),
        }
    }

    /// (P(Y ≤ l), P(Y > l)).
    fn cdf_sf(&self, l: f64) -> (f64, f64) {
        let (q, s) = (self.q, self.sigma);
        match self.direction {
            Direction::Remove => {
                if l <= self.ln1mq {
                    return (0.0, 1.0);
                }
                let x = self.remove_x(l);
                let (a, b) = (x / s, (x - 1.0) / s);
                ((1.0 - q) * normal::cdf(a) + q * normal::cdf(b), (1.0 - q) * normal::sf(a) + q * normal::sf(b))
            }
            Direction::Add => {
                if -l <= self.ln1mq {
                    return (1.0, 0.0);
                }
                let x = self.remove_x(-l);
                (normal::sf(x / s), normal::cdf(x / s))
            }
        }
    }

    fn cdf(&self, l: f64) -> f64 {
        self.cdf_sf(l).0
    }

    fn sf(&self, l: f64) -> f64 {
        self.cdf_sf(l).1
    }

    /// Smallest l with P(Y ≤ l) ≥ p.
    fn lower_quantile(&self, p: f64) -> f64 {
        let (lo_sup, hi_sup) = self.support();
        let mut lo = if lo_sup.is_finite() { lo_sup } else { -1.0 };
        while !lo_sup.is_finite() && self.cdf(lo) > p {
            lo *= 2.0;
        }
        let mut hi = if hi_sup.is_finite() { hi_sup } else { 1.0 };
        while !hi_sup.is_finite() && self.cdf(hi) < p {
            hi *= 2.0;
        }
        bisect(lo, hi, |l| self.cdf(l) >= p)
    }

    /// Smallest l with P(Y > l) ≤ p.
    fn upper_quantile(&self, p: f64) -> f64 {
        let (lo_sup, hi_sup) = self.support();
        let mut lo = if lo_sup.is_finite() { lo_sup } else { -1.0 };
        while !lo_sup.is_finite() && self.sf(lo) <= p {
            lo *= 2.0;
        }
        let mut hi = if hi_sup.is_finite() { hi_sup } else { 1.0 };
        while !hi_sup.is_finite() && self.sf(hi) > p {
            hi *= 2.0;
        }
        bisect(lo, hi, |l| self.sf(l) <= p)
    }

    /// E[Y · 1{a < Y ≤ b}], integrated over the Gaussian output space.
    fn partial_mean(&self, a: f64, b: f64) -> f64 {
        let s = self.sigma;
        let reach = 40.0 * s + 1.0;
        let x_at = |l: f64| {
            if self.q < 1.0 && l <= self.ln1mq {
                f64::NEG_INFINITY
            } else {
                self.remove_x(l)
            }
        };
        match self.direction {
            Direction::Remove => {
                let lo = x_at(a).max(-reach);
                let hi = x_at(b).min(reach);
                let q = self.q;
                simpson(lo, hi, s, |x| {
                    let dens = ((1.0 - q) * normal::pdf(x / s) + q * normal::pdf((x - 1.0) / s)) / s;
                    self.remove_loss(x) * dens
                })
            }
            Direction::Add => {
                let lo = x_at(-b).max(-reach);
                let hi = x_at(-a).min(reach);
                simpson(lo, hi, s, |x| -self.remove_loss(x) * normal::pdf(x / s) / s)
            }
        }
    }
}

fn bisect(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Composite Simpson rule with a step well below the length scale `scale`.
fn simpson(lo: f64, hi: f64, scale: f64, f: impl Fn(f64) -> f64) -> f64 {
    if !(hi > lo) {
        return 0.0;
    }
    let per_scale = 20_000.0;
    let n = (((hi - lo) / scale * per_scale).ceil() as usize).clamp(20_000, 4_000_000);
    let n = n + (n % 2);
    let dx = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * dx);
    }
    acc * dx / 3.0
}

fn ceil_log2(t: u64) -> u32 {
    64 - (t.max(1) - 1).leading_zeros()
}

/// Discretized privacy loss of one step of `spec`, with truncation sized
/// for `spec.steps` compositions.
pub fn build_pld(
    spec: &MechanismSpec,
    direction: Direction,
    config: &PrvConfig,
    delta_error: f64,
) -> Result<PrivacyLossDistribution> {
    spec.validate()?;
    let h = config.mesh;
    if !(h > 0.0 && h.is_finite()) {
        return Err(AccountantError::Config(format!("mesh must be positive, got {h}")));
    }
    if !(delta_error > 0.0 && delta_error < 1.0) {
        return Err(AccountantError::Config(format!("delta_error must lie in (0, 1), got {delta_error}")));
    }
    let curve = LossCurve::new(spec, direction);
    let budget = delta_error * TRUNCATION_SHARE;
    let steps = spec.steps as f64;
    let stages = 2 * ceil_log2(spec.steps) + 1;
    let eta_step = budget / (2.0 * steps);
    let stage_tail = budget / (2.0 * stages as f64);

    let l_min = curve.lower_quantile(eta_step);
    let l_max = curve.upper_quantile(eta_step).max(l_min);
    let span = (l_max - l_min) / h;
    if !span.is_finite() || span + 2.0 > config.max_grid as f64 {
        return Err(AccountantError::Resource(format!(
            "loss range [{l_min:.3}, {l_max:.3}] needs {span:.0} grid points at mesh {h}, limit is {}",
            config.max_grid
        )));
    }

    let mass_between = |lo: (f64, f64), hi: (f64, f64)| -> f64 {
        let m = if lo.0 >= 0.5 { lo.1 - hi.1 } else { hi.0 - lo.0 };
        m.max(0.0)
    };

    let pld = match config.discretization {
        Discretization::MeanPreserving => {
            let j_lo = (l_min / h).round() as i64;
            let j_hi = ((l_max / h).round() as i64).max(j_lo);
            let n = (j_hi - j_lo + 1) as usize;
            let edges: Vec<(f64, f64)> =
                (0..=n).map(|k| curve.cdf_sf((j_lo + k as i64) as f64 * h - 0.5 * h)).collect();
            let mut mass: Vec<f64> = edges.windows(2).map(|w| mass_between(w[0], w[1])).collect();
            let below = edges[0].0;
            let above = edges[n].1;
            let lo_edge = j_lo as f64 * h - 0.5 * h;
            let hi_edge = j_hi as f64 * h + 0.5 * h;
            let in_range: f64 = mass.iter().sum();
            let grid_mean: f64 = mass.iter().enumerate().map(|(k, m)| m * (j_lo + k as i64) as f64 * h).sum();
            let offset =
                if in_range > 0.0 { (curve.partial_mean(lo_edge, hi_edge) - grid_mean) / in_range } else { 0.0 };
            mass[0] += below;
            PrivacyLossDistribution {
                mesh: h,
                start: j_lo,
                offset,
                mass,
                truncated_mass: above,
                lower_moved: below,
                discretization: Discretization::MeanPreserving,
                compositions: 1,
                coupling_failure: below + above,
                coupling_width: h + 2.0 * offset.abs(),
                stage_tail,
                delta_error,
                max_grid: config.max_grid,
            }
        }
        Discretization::Pessimistic => {
            let j_lo = (l_min / h).ceil() as i64;
            let j_hi = ((l_max / h).ceil() as i64).max(j_lo);
            let n = (j_hi - j_lo + 1) as usize;
            let points: Vec<(f64, f64)> = (0..n).map(|k| curve.cdf_sf((j_lo + k as i64) as f64 * h)).collect();
            let mut mass = Vec::with_capacity(n);
            mass.push(points[0].0);
            mass.extend(points.windows(2).map(|w| mass_between(w[0], w[1])));
            PrivacyLossDistribution {
                mesh: h,
                start: j_lo,
                offset: 0.0,
                mass,
                truncated_mass: points[n - 1].1,
                lower_moved: 0.0,
                discretization: Discretization::Pessimistic,
                compositions: 1,
                coupling_failure: 0.0,
                coupling_width: h,
                stage_tail,
                delta_error,
                max_grid: config.max_grid,
            }
        }
    };
    Ok(pld)
}

fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn convolve_fft(a: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let b_len = b.map_or(a.len(), |b| b.len());
    let out_len = a.len() + b_len - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);

    let load = |src: &[f64]| {
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (dst, &x) in buf.iter_mut().zip(src) {
            dst.re = x;
        }
        buf
    };
    let mut fa = load(a);
    forward.process(&mut fa);
    match b {
        Some(b) => {
            let mut fb = load(b);
            forward.process(&mut fb);
            for (x, y) in fa.iter_mut().zip(&fb) {
                *x *= *y;
            }
        }
        None => {
            for x in fa.iter_mut() {
                *x = *x * *x;
            }
        }
    }
    inverse.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

fn convolve(a: &PrivacyLossDistribution, b: &PrivacyLossDistribution, same: bool) -> Result<PrivacyLossDistribution> {
    let out_len = a.mass.len() + b.mass.len() - 1;
    if out_len > a.max_grid {
        return Err(AccountantError::Resource(format!(
            "composed grid needs {out_len} points, limit is {}; use a larger mesh or a looser truncation",
            a.max_grid
        )));
    }
    let mass = if out_len < DIRECT_CONVOLUTION_LIMIT {
        convolve_direct(&a.mass, &b.mass)
    } else if same {
        convolve_fft(&a.mass, None)
    } else {
        convolve_fft(&a.mass, Some(&b.mass))
    };
    let mut out = PrivacyLossDistribution {
        mesh: a.mesh,
        start: a.start + b.start,
        offset: a.offset + b.offset,
        mass,
        truncated_mass: a.truncated_mass + b.truncated_mass - a.truncated_mass * b.truncated_mass,
        lower_moved: a.lower_moved + b.lower_moved,
        discretization: a.discretization,
        compositions: a.compositions + b.compositions,
        coupling_failure: a.coupling_failure + b.coupling_failure,
        coupling_width: a.coupling_width.max(b.coupling_width),
        stage_tail: a.stage_tail,
        delta_error: a.delta_error,
        max_grid: a.max_grid,
    };
    out.trim();
    Ok(out)
}

/// `t`-fold composition of `pld` with itself by repeated squaring.
pub fn compose(pld: &PrivacyLossDistribution, t: u64) -> Result<PrivacyLossDistribution> {
    if t == 0 {
        return Err(AccountantError::Config("number of compositions must be at least 1".into()));
    }
    let mut result: Option<PrivacyLossDistribution> = None;
    let mut base = pld.clone();
    let mut remaining = t;
    loop {
        if remaining & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => convolve(&r, &base, false)?,
            });
        }
        remaining >>= 1;
        if remaining == 0 {
            break;
        }
        base = convolve(&base, &base, true)?;
    }
    Ok(result.expect("t >= 1"))
}

/// Privacy profile δ(ε) of a PLD, prepared for repeated queries.
struct Profile {
    losses: Vec<f64>,
    /// Suffix sums of m and m·e^{−ℓ} over the positive-loss part.
    tail_mass: Vec<f64>,
    tail_weighted: Vec<f64>,
    infinity: f64,
}

impl Profile {
    fn new(pld: &PrivacyLossDistribution) -> Self {
        let first = (0..pld.mass.len()).find(|&k| pld.loss_at(k) > 0.0).unwrap_or(pld.mass.len());
        let losses: Vec<f64> = (first..pld.mass.len()).map(|k| pld.loss_at(k)).collect();
        let n = losses.len();
        let mut tail_mass = vec![0.0; n + 1];
        let mut tail_weighted = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let m = pld.mass[first + i];
            tail_mass[i] = tail_mass[i + 1] + m;
            tail_weighted[i] = tail_weighted[i + 1] + m * (-losses[i]).exp();
        }
        Profile { losses, tail_mass, tail_weighted, infinity: pld.truncated_mass }
    }

    fn delta(&self, eps: f64) -> f64 {
        let eps = eps.max(0.0);
        let i = self.losses.partition_point(|&l| l <= eps);
        let finite = self.tail_mass[i] - eps.exp() * self.tail_weighted[i];
        finite.max(0.0) + self.infinity
    }

    fn max_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(0.0)
    }

    /// Smallest ε ≥ 0 (to within 1e-9) with δ(ε) ≤ `delta`.
    fn epsilon(&self, delta: f64) -> Result<f64> {
        if delta <= self.infinity {
            return Err(AccountantError::Accuracy(format!(
                "δ={delta:e} is not above the truncated mass {:e}; rebuild with a smaller delta_error",
                self.infinity
            )));
        }
        if self.delta(0.0) <= delta {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, self.max_loss());
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if self.delta(mid) <= delta {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

pub fn delta_at_epsilon(pld: &PrivacyLossDistribution, eps: f64) -> f64 {
    Profile::new(pld).delta(eps)
}

pub fn epsilon_at_delta(pld: &PrivacyLossDistribution, delta: f64) -> Result<EpsilonReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Config(format!("δ must lie in (0, 1), got {delta}")));
    }
    let profile = Profile::new(pld);
    let eps = profile.epsilon(delta)?;
    let error_bound = match pld.discretization {
        Discretization::Pessimistic => pld.rounding_shift(),
        Discretization::MeanPreserving => {
            let eta = pld.delta_error;
            let t = pld.hoeffding_deviation(eta);
            let upper_delta = delta - eta - pld.coupling_failure;
            if upper_delta <= pld.truncated_mass {
                return Err(AccountantError::Accuracy(format!(
                    "δ={delta:e} leaves no room for the error budget {eta:e}; use a smaller delta_error"
                )));
            }
            let upper = profile.epsilon(upper_delta)? + t;
            let lower = (profile.epsilon((delta + eta).min(1.0 - 1e-12))? - t).max(0.0);
            (upper - eps).max(eps - lower)
        }
    };
    Ok(EpsilonReport { epsilon: eps, delta, error_bound, method: Method::Prv })
}

fn composed(
    spec: &MechanismSpec,
    direction: Direction,
    config: &PrvConfig,
    delta_error: f64,
) -> Result<PrivacyLossDistribution> {
    let single = build_pld(spec, direction, config, delta_error)?;
    compose(&single, spec.steps)
}

fn directions(spec: &MechanismSpec) -> &'static [Direction] {
    if spec.q >= 1.0 {
        // Both directions have the same law without subsampling.
        &[Direction::Remove]
    } else {
        &[Direction::Remove, Direction::Add]
    }
}

/// ε at `delta` for `spec`, the larger of the remove and add directions.
pub fn prv_epsilon(spec: &MechanismSpec, delta: f64, config: &PrvConfig) -> Result<EpsilonReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Config(format!("δ must lie in (0, 1), got {delta}")));
    }
    let delta_error = config.delta_error.unwrap_or(delta / 10.0);
    let mut best: Option<EpsilonReport> = None;
    for &direction in directions(spec) {
        let pld = composed(spec, direction, config, delta_error)?;
        let report = epsilon_at_delta(&pld, delta)?;
        if best.is_none_or(|b| report.epsilon > b.epsilon) {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one direction"))
}

/// δ at `eps` for `spec`, the larger of the remove and add directions.
pub fn prv_delta(spec: &MechanismSpec, eps: f64, config: &PrvConfig) -> Result<f64> {
    let delta_error = config.delta_error.unwrap_or(1e-10);
    let mut best = 0.0f64;
    for &direction in directions(spec) {
        let pld = composed(spec, direction, config, delta_error)?;
        best = best.max(delta_at_epsilon(&pld, eps));
    }
    Ok(best)
}
