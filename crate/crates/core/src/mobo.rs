//! Multi-objective Bayesian optimization over aberration coefficients:
//! Latin-hypercube start, Monte-Carlo EHVI on independent GP surrogates,
//! random-candidate plus pattern-search acquisition maximization, and the
//! observe/refit loop with per-step logging.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{GpConfig, GpModel, InputBounds, Surrogate};
use crate::image::QuantizedImage;
use crate::optics::{AberrationState, Coefficient};
use crate::pareto::{hvi, ParetoArchive};
use crate::rewards::{RewardEvaluator, RewardVector};
use crate::seeding::{derive_seed, SeedRole};
use crate::trajectory::{Action, GpHyperPair, Phase, RunSink, Seeds, Timing, TrajectoryRecord};
use crate::virtual_scope::{Instrument, VirtualScope};

/// Tunable coefficients with their (lower, upper) bounds in nm.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    coefficients: Vec<Coefficient>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SearchSpace {
    pub fn new(axes: &[(Coefficient, f64, f64)]) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("search space needs at least one coefficient"));
        }
        let mut coefficients = Vec::new();
        let (mut lower, mut upper) = (Vec::new(), Vec::new());
        for &(c, lo, hi) in axes {
            if coefficients.contains(&c) {
                return Err(Error::invalid(format!("{c} listed twice")));
            }
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("{c} bounds [{lo}, {hi}] need lower < upper")));
            }
            if !(lo <= 0.0 && 0.0 <= hi) {
                return Err(Error::invalid(format!("{c} bounds [{lo}, {hi}] must contain zero")));
            }
            coefficients.push(c);
            lower.push(lo);
            upper.push(hi);
        }
        Ok(Self { coefficients, lower, upper })
    }

    pub fn with_default_bounds(coefficients: &[Coefficient]) -> Result<Self> {
        let axes: Vec<_> = coefficients
            .iter()
            .map(|&c| {
                let (lo, hi) = c.default_range();
                (c, lo, hi)
            })
            .collect();
        Self::new(&axes)
    }

    /// c10, c12a, c12b.
    pub fn first_order() -> Self {
        Self::with_default_bounds(&[Coefficient::C10, Coefficient::C12a, Coefficient::C12b]).expect("valid defaults")
    }

    /// c21a, c21b, c23a, c23b.
    pub fn second_order() -> Self {
        Self::with_default_bounds(&[Coefficient::C21a, Coefficient::C21b, Coefficient::C23a, Coefficient::C23b])
            .expect("valid defaults")
    }

    /// All seven coefficients.
    pub fn combined() -> Self {
        Self::with_default_bounds(&Coefficient::ALL).expect("valid defaults")
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficients(&self) -> &[Coefficient] {
        &self.coefficients
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn input_bounds(&self) -> InputBounds {
        InputBounds::new(self.lower.clone(), self.upper.clone()).expect("validated bounds")
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Full state with the space's coefficients set from `x` and marked
    /// active; everything else is zero.
    pub fn to_state(&self, x: &[f64]) -> Result<AberrationState> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("expected {} coordinates, got {}", self.dim(), x.len())));
        }
        let mut state = AberrationState::zero();
        for c in Coefficient::ALL {
            state.set_active(c, false);
        }
        for (&c, &v) in self.coefficients.iter().zip(x) {
            state.set(c, v)?;
            state.set_active(c, true);
        }
        Ok(state)
    }

    fn uniform(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| l + (u - l) * rng.random::<f64>()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoboConfig {
    pub n_init: usize,
    pub n_iterations: usize,
    pub mc_samples: usize,
    /// Random candidates scored per proposal.
    pub acq_candidates: usize,
    /// Best candidates refined by pattern search.
    pub acq_refine: usize,
    /// Pattern-search step as a fraction of each axis range, start and stop.
    pub refine_initial: f64,
    pub refine_final: f64,
    pub master_seed: u64,
    pub gp: GpConfig,
}

impl MoboConfig {
    pub fn for_space(space: &SearchSpace, master_seed: u64) -> Self {
        Self {
            n_init: 2 * space.dim() + 2,
            n_iterations: 25,
            mc_samples: 128,
            acq_candidates: 256,
            acq_refine: 5,
            refine_initial: 0.1,
            refine_final: 0.001,
            master_seed,
            gp: GpConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_init < 2 {
            return Err(Error::invalid("n_init must be at least 2"));
        }
        if self.mc_samples == 0 || self.acq_candidates == 0 || self.acq_refine == 0 {
            return Err(Error::invalid("sample and candidate counts must be at least 1"));
        }
        if !(self.refine_final > 0.0 && self.refine_final <= self.refine_initial && self.refine_initial <= 1.0) {
            return Err(Error::invalid("need 0 < refine_final ≤ refine_initial ≤ 1"));
        }
        if self.gp.n_starts == 0 {
            return Err(Error::invalid("GP fitting needs at least one start"));
        }
        Ok(())
    }
}

/// Latin-hypercube design: one point per stratum on every axis.
pub fn initial_design(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::invalid("initial design needs at least two points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; space.dim()]; n];
    for axis in 0..space.dim() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        let (l, u) = (space.lower[axis], space.upper[axis]);
        for (point, s) in points.iter_mut().zip(strata) {
            let t = (s as f64 + rng.random::<f64>()) / n as f64;
            point[axis] = l + (u - l) * t;
        }
    }
    Ok(points)
}

/// Standard-normal pairs shared by every candidate in one proposal.
pub fn standard_normals(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect()
}

/// Monte-Carlo EHVI at `x` from fixed normal draws. A degenerate posterior
/// returns the improvement of its mean exactly.
pub fn ehvi_with_normals(
    models: [&dyn Surrogate; 2],
    front: &[[f64; 2]],
    reference: [f64; 2],
    x: &[f64],
    normals: &[[f64; 2]],
) -> f64 {
    let p = [models[0].posterior(x), models[1].posterior(x)];
    let mean = [p[0].mean, p[1].mean];
    if p[0].variance == 0.0 && p[1].variance == 0.0 {
        return hvi(front, reference, mean);
    }
    if normals.is_empty() {
        return 0.0;
    }
    let sd = [p[0].variance.sqrt(), p[1].variance.sqrt()];
    let total: f64 = normals
        .iter()
        .map(|z| hvi(front, reference, [mean[0] + sd[0] * z[0], mean[1] + sd[1] * z[1]]))
        .sum();
    total / normals.len() as f64
}

pub fn ehvi(
    models: [&dyn Surrogate; 2],
    archive: &ParetoArchive,
    x: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    let reference = archive.reference().ok_or_else(|| Error::invalid("EHVI needs a non-empty archive"))?;
    Ok(ehvi_with_normals(models, &archive.front_values(), reference, x, &standard_normals(mc_samples, seed)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub x: Vec<f64>,
    pub ehvi: f64,
    /// Every EHVI was zero; `x` is the most uncertain candidate instead.
    pub fallback: bool,
    pub evaluations: usize,
    pub seconds: f64,
}

const MAX_REFINE_EVALUATIONS: usize = 400;

/// Scores random candidates, refines the best by coordinate pattern search
/// and returns the EHVI maximizer. Ties go to the earlier candidate.
pub fn propose(
    models: [&dyn Surrogate; 2],
    archive: &ParetoArchive,
    space: &SearchSpace,
    config: &MoboConfig,
    candidate_seed: u64,
    ehvi_seed: u64,
) -> Result<Proposal> {
    let started = Instant::now();
    let reference = archive.reference().ok_or_else(|| Error::invalid("cannot propose from an empty archive"))?;
    let front = archive.front_values();
    let normals = standard_normals(config.mc_samples, ehvi_seed);
    let score = |x: &[f64]| ehvi_with_normals(models, &front, reference, x, &normals);

    let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed);
    let candidates: Vec<Vec<f64>> = (0..config.acq_candidates).map(|_| space.uniform(&mut rng)).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| score(c)).collect();
    let mut evaluations = candidates.len();

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let range: Vec<f64> = space.lower.iter().zip(&space.upper).map(|(l, u)| u - l).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for &start in order.iter().take(config.acq_refine) {
        let mut x = candidates[start].clone();
        let mut value = scores[start];
        if value > 0.0 {
            let mut fraction = config.refine_initial;
            let mut spent = 0;
            while fraction >= config.refine_final && spent < MAX_REFINE_EVALUATIONS {
                let mut improved = false;
                'axes: for axis in 0..space.dim() {
                    for dir in [1.0, -1.0] {
                        let mut y = x.clone();
                        y[axis] += dir * fraction * range[axis];
                        space.clip(&mut y);
                        if y[axis] == x[axis] {
                            continue;
                        }
                        let v = score(&y);
                        spent += 1;
                        if v > value {
                            x = y;
                            value = v;
                            improved = true;
                            break 'axes;
                        }
                    }
                }
                if !improved {
                    fraction *= 0.5;
                }
            }
            evaluations += spent;
        }
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((x, value));
        }
    }
    let (mut x, value) = best.expect("at least one candidate");
    let fallback = !(value > 0.0);
    if fallback {
        let spread = |c: &[f64]| {
            models
                .iter()
                .map(|m| {
                    let pv = m.prior_variance();
                    let v = m.posterior(c).variance;
                    if pv > 0.0 { v / pv } else { v }
                })
                .sum::<f64>()
        };
        let mut pick = 0;
        let mut widest = f64::NEG_INFINITY;
        for (i, c) in candidates.iter().enumerate() {
            let s = spread(c);
            if s > widest {
                widest = s;
                pick = i;
            }
        }
        x = candidates[pick].clone();
    }
    Ok(Proposal {
        x,
        ehvi: value.max(0.0),
        fallback,
        evaluations,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// What one evaluation of the environment returns.
#[derive(Debug, Clone)]
pub struct Observation {
    pub rewards: RewardVector,
    /// Image the rewards were computed from, if there is one to store.
    pub image: Option<QuantizedImage>,
    pub seed: Option<u64>,
    /// Measured wall time of the evaluation.
    pub compute_seconds: f64,
    /// Simulated time charged on top of the measured time.
    pub charged_seconds: f64,
}

/// Anything that maps a coefficient state to a reward vector.
pub trait Environment {
    fn observe(&mut self, state: &AberrationState) -> Result<Observation>;
}

impl<F> Environment for F
where
    F: FnMut(&AberrationState) -> Result<RewardVector>,
{
    fn observe(&mut self, state: &AberrationState) -> Result<Observation> {
        let started = Instant::now();
        let rewards = self(state)?;
        Ok(Observation {
            rewards,
            image: None,
            seed: None,
            compute_seconds: started.elapsed().as_secs_f64(),
            charged_seconds: 0.0,
        })
    }
}

/// The virtual microscope read out as 16-bit images. Rewards are computed
/// on the dequantized readout so they can be replayed from the dump.
#[derive(Debug, Clone)]
pub struct ScopeEnvironment {
    scope: VirtualScope,
    evaluator: RewardEvaluator,
}

impl ScopeEnvironment {
    pub fn new(scope: VirtualScope) -> Self {
        let evaluator = RewardEvaluator::new(scope.optics().grid_size());
        Self { scope, evaluator }
    }

    pub fn scope(&self) -> &VirtualScope {
        &self.scope
    }

    /// Noise-free rewards of the unquantized image.
    pub fn true_rewards(&self, state: &AberrationState) -> Result<RewardVector> {
        Ok(self.evaluator.evaluate(&self.scope.render(state)?))
    }
}

impl Environment for ScopeEnvironment {
    fn observe(&mut self, state: &AberrationState) -> Result<Observation> {
        let started = Instant::now();
        let acquisition = self.scope.acquire(state)?;
        let image = acquisition.image.quantize();
        let rewards = self.evaluator.evaluate(&image.dequantize());
        let latency = self.scope.latency();
        let charged_seconds = if latency.realtime { 0.0 } else { latency.hw_seconds_per_acquire };
        Ok(Observation {
            rewards,
            image: Some(image),
            seed: Some(acquisition.seed),
            compute_seconds: started.elapsed().as_secs_f64(),
            charged_seconds,
        })
    }
}

#[derive(Debug)]
pub struct MoboOutcome {
    pub archive: ParetoArchive,
    /// (step, archive hypervolume after that step)
    pub hv_history: Vec<(u64, f64)>,
    pub steps: u64,
    /// The error that stopped the loop early, already logged.
    pub failure: Option<Error>,
}

struct StepContext {
    step: u64,
    phase: Phase,
    started: Instant,
    seeds: Seeds,
    gp_hyper: Option<GpHyperPair>,
    gp_fit_s: f64,
    acq_opt_s: f64,
    acq_fallback: bool,
}

impl StepContext {
    fn new(step: u64, phase: Phase) -> Self {
        Self {
            step,
            phase,
            started: Instant::now(),
            seeds: Seeds::default(),
            gp_hyper: None,
            gp_fit_s: 0.0,
            acq_opt_s: 0.0,
            acq_fallback: false,
        }
    }

    /// `finished` closes the step; `hw_s` already includes `charged`.
    fn record(&self, archive: &ParetoArchive, hw_s: f64, charged: f64, finished: Instant) -> TrajectoryRecord {
        let mut rec = TrajectoryRecord::new(self.step, self.phase);
        let elapsed = finished.duration_since(self.started).as_secs_f64();
        let parts = hw_s + self.gp_fit_s + self.acq_opt_s;
        rec.timing = Timing {
            hw_s,
            gp_fit_s: self.gp_fit_s,
            acq_opt_s: self.acq_opt_s,
            total_s: (elapsed + charged).max(parts),
        };
        rec.seeds = self.seeds;
        rec.gp_hyper = self.gp_hyper;
        rec.reference_point = archive.reference();
        rec.hypervolume = archive.hypervolume();
        rec.acq_fallback = self.acq_fallback;
        rec
    }
}

/// Evaluates `x`, stores the image, updates the archive and logs the step.
/// The outer error is a sink failure; the inner one an environment failure.
fn evaluate_step(
    ctx: &StepContext,
    x: Vec<f64>,
    env: &mut dyn Environment,
    space: &SearchSpace,
    archive: &mut ParetoArchive,
    sink: &mut dyn RunSink,
) -> Result<std::result::Result<(), Error>> {
    let hw_started = Instant::now();
    let state = match space.to_state(&x) {
        Ok(s) => s,
        Err(e) => return fail(ctx, None, e, hw_started, archive, sink),
    };
    let obs = match env.observe(&state) {
        Ok(o) => o,
        Err(e) => return fail(ctx, Some(Action::from(&state)), e, hw_started, archive, sink),
    };
    let image_ref = match &obs.image {
        Some(img) => sink.store_image(ctx.step, img)?,
        None => None,
    };
    archive.insert(x, obs.rewards.as_array());
    let finished = Instant::now();
    let hw_s = finished.duration_since(hw_started).as_secs_f64() + obs.charged_seconds;
    let mut rec = ctx.record(archive, hw_s, obs.charged_seconds, finished);
    rec.action = Some(Action::from(&state));
    rec.image_ref = image_ref;
    rec.rewards = Some(obs.rewards);
    rec.seeds.acquire = obs.seed;
    sink.record(&rec)?;
    Ok(Ok(()))
}

fn fail(
    ctx: &StepContext,
    action: Option<Action>,
    error: Error,
    hw_started: Instant,
    archive: &ParetoArchive,
    sink: &mut dyn RunSink,
) -> Result<std::result::Result<(), Error>> {
    let finished = Instant::now();
    let hw_s = finished.duration_since(hw_started).as_secs_f64();
    let mut rec = ctx.record(archive, hw_s, 0.0, finished);
    rec.action = action;
    rec.error = Some(error.to_string());
    sink.record(&rec)?;
    Ok(Err(error))
}

/// Runs the initial design and then `n_iterations` of fit, propose and
/// observe. Environment and numerical errors end the loop early and are
/// returned in the outcome after being logged; sink errors abort.
pub fn run_mobo(
    env: &mut dyn Environment,
    space: &SearchSpace,
    config: &MoboConfig,
    sink: &mut dyn RunSink,
) -> Result<MoboOutcome> {
    config.validate()?;
    let master = config.master_seed;
    let design_seed = derive_seed(master, 0, SeedRole::InitialDesign);
    let design = initial_design(space, config.n_init, design_seed)?;
    let mut archive = ParetoArchive::new();
    let mut hv_history = Vec::new();
    let mut step = 0u64;

    for x in design {
        let mut ctx = StepContext::new(step, Phase::Init);
        ctx.seeds.initial_design = Some(design_seed);
        if let Err(e) = evaluate_step(&ctx, x, env, space, &mut archive, sink)? {
            return Ok(MoboOutcome { archive, hv_history, steps: step + 1, failure: Some(e) });
        }
        hv_history.push((step, archive.hypervolume()));
        step += 1;
    }

    let bounds = space.input_bounds();
    for _ in 0..config.n_iterations {
        let mut ctx = StepContext::new(step, Phase::Bo);
        let gp_seed = derive_seed(master, step, SeedRole::GpFit);
        let candidate_seed = derive_seed(master, step, SeedRole::Candidates);
        let ehvi_seed = derive_seed(master, step, SeedRole::Ehvi);
        ctx.seeds = Seeds {
            initial_design: None,
            gp_fit: Some(gp_seed),
            candidates: Some(candidate_seed),
            ehvi: Some(ehvi_seed),
            acquire: None,
        };

        let fit_started = Instant::now();
        let gp_config = GpConfig { seed: gp_seed, ..config.gp.clone() };
        let xs = archive.xs().to_vec();
        let fits: Result<Vec<GpModel>> = (0..2)
            .map(|o| {
                let y: Vec<f64> = archive.values().iter().map(|v| v[o]).collect();
                GpModel::fit(&xs, &y, &bounds, &gp_config)
            })
            .collect();
        ctx.gp_fit_s = fit_started.elapsed().as_secs_f64();
        let models = match fits {
            Ok(m) => m,
            Err(e) => {
                let failure = fail(&ctx, None, e, Instant::now(), &archive, sink)?.err();
                return Ok(MoboOutcome { archive, hv_history, steps: step + 1, failure });
            }
        };
        ctx.gp_hyper = Some(GpHyperPair {
            contrast: *models[0].hyper(),
            fft: *models[1].hyper(),
        });

        let acq_started = Instant::now();
        let proposal = propose([&models[0], &models[1]], &archive, space, config, candidate_seed, ehvi_seed);
        ctx.acq_opt_s = acq_started.elapsed().as_secs_f64();
        let proposal = match proposal {
            Ok(p) => p,
            Err(e) => {
                let failure = fail(&ctx, None, e, Instant::now(), &archive, sink)?.err();
                return Ok(MoboOutcome { archive, hv_history, steps: step + 1, failure });
            }
        };
        ctx.acq_fallback = proposal.fallback;

        if let Err(e) = evaluate_step(&ctx, proposal.x, env, space, &mut archive, sink)? {
            return Ok(MoboOutcome { archive, hv_history, steps: step + 1, failure: Some(e) });
        }
        hv_history.push((step, archive.hypervolume()));
        step += 1;
    }
    Ok(MoboOutcome { archive, hv_history, steps: step, failure: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Posterior;
    use crate::pareto::hypervolume;
    use crate::trajectory::MemorySink;

    /// Fixed posterior everywhere.
    struct Flat {
        mean: f64,
        variance: f64,
    }

    impl Surrogate for Flat {
        fn posterior(&self, _x: &[f64]) -> Posterior {
            Posterior { mean: self.mean, variance: self.variance }
        }

        fn prior_variance(&self) -> f64 {
            1.0
        }
    }

    fn unit_space(d: usize) -> SearchSpace {
        let axes: Vec<_> = Coefficient::ALL[..d].iter().map(|&c| (c, -1.0, 1.0)).collect();
        SearchSpace::new(&axes).unwrap()
    }

    fn quadratic(center: [f64; 2]) -> impl FnMut(&AberrationState) -> Result<RewardVector> {
        move |s: &AberrationState| {
            let d2 = (s.get(Coefficient::C10) - center[0]).powi(2) + (s.get(Coefficient::C12a) - center[1]).powi(2);
            Ok(RewardVector::new(1.0 - d2, 2.0 - 3.0 * d2))
        }
    }

    fn small_config(space: &SearchSpace, seed: u64) -> MoboConfig {
        MoboConfig {
            acq_candidates: 64,
            mc_samples: 64,
            gp: GpConfig { n_starts: 3, ..GpConfig::default() },
            ..MoboConfig::for_space(space, seed)
        }
    }

    #[test]
    fn search_space_validation() {
        assert!(SearchSpace::new(&[]).is_err());
        assert!(SearchSpace::new(&[(Coefficient::C10, 1.0, 2.0)]).is_err());
        assert!(SearchSpace::new(&[(Coefficient::C10, 1.0, -1.0)]).is_err());
        assert!(SearchSpace::new(&[(Coefficient::C10, -1.0, 1.0), (Coefficient::C10, -2.0, 2.0)]).is_err());
        assert_eq!(SearchSpace::first_order().dim(), 3);
        assert_eq!(SearchSpace::second_order().dim(), 4);
        assert_eq!(SearchSpace::combined().dim(), 7);
        let s = SearchSpace::second_order().to_state(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.values(), [0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.active_coefficients(), SearchSpace::second_order().coefficients());
    }

    #[test]
    fn latin_hypercube_strata() {
        let space = SearchSpace::new(&[(Coefficient::C10, 0.0, 1.0)]).unwrap();
        for seed in 0..50 {
            let mut d: Vec<f64> = initial_design(&space, 2, seed).unwrap().into_iter().map(|p| p[0]).collect();
            d.sort_by(f64::total_cmp);
            assert!(d[0] < 0.5 && d[1] >= 0.5);
        }
        let space = SearchSpace::first_order();
        assert_eq!(initial_design(&space, 8, 4).unwrap(), initial_design(&space, 8, 4).unwrap());
        assert!(initial_design(&space, 1, 4).is_err());
        for seed in 0..100 {
            let n = 2 * space.dim() + 2;
            let d = initial_design(&space, n, seed).unwrap();
            assert_eq!(d.len(), n);
            assert!(d.iter().all(|p| space.contains(p)));
            for axis in 0..space.dim() {
                let mut strata: Vec<usize> = d
                    .iter()
                    .map(|p| ((p[axis] - space.lower()[axis]) / (space.upper()[axis] - space.lower()[axis]) * n as f64) as usize)
                    .collect();
                strata.sort_unstable();
                assert_eq!(strata, (0..n).collect::<Vec<_>>());
            }
            for i in 0..n {
                for j in 0..i {
                    let dist: f64 = d[i].iter().zip(&d[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    assert!(dist > 0.0);
                }
            }
        }
    }

    #[test]
    fn degenerate_posterior_gives_exact_hvi() {
        let front = [[1.0, 3.0], [2.0, 2.0], [3.0, 1.0]];
        let r = [0.0, 0.0];
        for (m0, m1) in [(2.5, 2.5), (4.0, 0.5), (0.5, 0.5), (1.0, 3.0), (3.5, 3.5)] {
            let a = Flat { mean: m0, variance: 0.0 };
            let b = Flat { mean: m1, variance: 0.0 };
            let e = ehvi_with_normals([&a, &b], &front, r, &[0.0], &standard_normals(128, 1));
            assert_eq!(e, hvi(&front, r, [m0, m1]));
        }
        let a = Flat { mean: -5.0, variance: 0.0 };
        assert_eq!(ehvi_with_normals([&a, &a], &front, r, &[0.0], &standard_normals(16, 2)), 0.0);
    }

    #[test]
    fn monte_carlo_ehvi_matches_high_sample_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let space = unit_space(1);
        for trial in 0..10u64 {
            let xs: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
            let y0: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin()).collect();
            let y1: Vec<f64> = xs.iter().map(|x| (2.0 * x[0]).cos() + 0.3 * x[0]).collect();
            let b = space.input_bounds();
            let g = GpConfig { seed: trial, ..GpConfig::default() };
            let m0 = GpModel::fit(&xs, &y0, &b, &g).unwrap();
            let m1 = GpModel::fit(&xs, &y1, &b, &g).unwrap();
            let mut archive = ParetoArchive::new();
            for (x, (a, c)) in xs.iter().zip(y0.iter().zip(&y1)) {
                archive.insert(x.clone(), [*a, *c]);
            }
            let front = archive.front_values();
            let r = archive.reference().unwrap();
            let x = [rng.random_range(-1.0..1.0)];
            let reference = ehvi([&m0 as &dyn Surrogate, &m1], &archive, &x, 16384, 1000 + trial).unwrap();
            let normals = standard_normals(128, trial);
            let p = [m0.posterior(&x), m1.posterior(&x)];
            let draws: Vec<f64> = normals
                .iter()
                .map(|z| {
                    hvi(&front, r, [p[0].mean + p[0].variance.sqrt() * z[0], p[1].mean + p[1].variance.sqrt() * z[1]])
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / 128.0;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 127.0).sqrt();
            let est = ehvi([&m0 as &dyn Surrogate, &m1], &archive, &x, 128, trial).unwrap();
            assert!((est - mean).abs() <= 1e-12 * mean.max(1.0));
            assert!(est >= 0.0);
            assert!((est - reference).abs() <= 3.0 * sd / 128f64.sqrt() + 1e-12, "trial {trial}: {est} vs {reference}");
        }
    }

    fn fitted(archive: &ParetoArchive, space: &SearchSpace) -> [GpModel; 2] {
        [0, 1].map(|o| {
            let y: Vec<f64> = archive.values().iter().map(|v| v[o]).collect();
            GpModel::fit(archive.xs(), &y, &space.input_bounds(), &GpConfig::default()).unwrap()
        })
    }

    #[test]
    fn proposal_finds_quadratic_optimum() {
        let space = unit_space(2);
        let center = [0.37, -0.21];
        let mut f = quadratic(center);
        let mut archive = ParetoArchive::new();
        for x in initial_design(&space, 15, 3).unwrap() {
            let y = f(&space.to_state(&x).unwrap()).unwrap();
            archive.insert(x, y.as_array());
        }
        let models = fitted(&archive, &space);
        let config = MoboConfig::for_space(&space, 0);
        let p = propose([&models[0], &models[1]], &archive, &space, &config, 5, 6).unwrap();
        assert!(!p.fallback && p.ehvi > 0.0);
        let dist = ((p.x[0] - center[0]).powi(2) + (p.x[1] - center[1]).powi(2)).sqrt();
        assert!(dist < 0.05, "proposal {:?} is {dist} from the optimum", p.x);
        let again = propose([&models[0], &models[1]], &archive, &space, &config, 5, 6).unwrap();
        assert_eq!(p.x, again.x);
        assert_eq!(p.ehvi, again.ehvi);
    }

    #[test]
    fn proposals_stay_in_bounds() {
        let space = SearchSpace::new(&[(Coefficient::C10, -0.5, 2.0), (Coefficient::C12a, -3.0, 0.0)]).unwrap();
        let mut f = quadratic([2.5, 0.5]);
        let mut archive = ParetoArchive::new();
        for x in initial_design(&space, 8, 1).unwrap() {
            archive.insert(x.clone(), f(&space.to_state(&x).unwrap()).unwrap().as_array());
        }
        let models = fitted(&archive, &space);
        let config = small_config(&space, 0);
        for seed in 0..8 {
            let p = propose([&models[0], &models[1]], &archive, &space, &config, seed, seed + 100).unwrap();
            assert!(space.contains(&p.x), "{:?}", p.x);
        }
    }

    #[test]
    fn all_zero_acquisition_falls_back_to_exploration() {
        let space = unit_space(2);
        let mut archive = ParetoArchive::new();
        archive.insert(vec![0.0, 0.0], [1.0, 1.0]);
        archive.insert(vec![0.5, 0.5], [0.0, 2.0]);
        let low = Flat { mean: -100.0, variance: 1e-6 };
        let config = small_config(&space, 0);
        let p = propose([&low, &low], &archive, &space, &config, 1, 2).unwrap();
        assert!(p.fallback);
        assert_eq!(p.ehvi, 0.0);
        assert!(space.contains(&p.x));
    }

    #[test]
    fn zero_iterations_keep_only_the_design() {
        let space = unit_space(2);
        let config = MoboConfig { n_iterations: 0, ..small_config(&space, 9) };
        let mut sink = MemorySink::default();
        let mut env = quadratic([0.0, 0.0]);
        let out = run_mobo(&mut env, &space, &config, &mut sink).unwrap();
        assert_eq!(out.archive.len(), config.n_init);
        let design = initial_design(&space, config.n_init, derive_seed(9, 0, SeedRole::InitialDesign)).unwrap();
        assert_eq!(out.archive.xs(), &design[..]);
        assert!(sink.records.iter().all(|r| r.phase == Phase::Init && r.timing.gp_fit_s == 0.0 && r.timing.acq_opt_s == 0.0));
    }

    #[test]
    fn loop_bookkeeping_and_determinism() {
        let space = unit_space(2);
        let config = MoboConfig { n_iterations: 6, ..small_config(&space, 21) };
        let run = || {
            let mut sink = MemorySink::default();
            let mut env = quadratic([0.2, -0.4]);
            let out = run_mobo(&mut env, &space, &config, &mut sink).unwrap();
            (out, sink.records)
        };
        let (out, records) = run();
        assert!(out.failure.is_none());
        assert_eq!(records.len(), config.n_init + 6);
        assert_eq!(out.archive.len(), records.len());
        let mut last_hv = 0.0;
        for (i, rec) in records.iter().enumerate() {
            assert_eq!(rec.step, i as u64);
            let t = rec.timing;
            assert!(t.component_sum() <= t.total_s && t.total_s <= 1.01 * t.component_sum() + 1e-4, "{t:?}");
            assert!(rec.hypervolume >= last_hv);
            last_hv = rec.hypervolume;
            if rec.phase == Phase::Bo {
                assert!(rec.gp_hyper.is_some() && rec.seeds.ehvi.is_some());
            }
            let x = &out.archive.xs()[i];
            assert!(space.contains(x));
        }
        let vals: Vec<[f64; 2]> = out.archive.values().to_vec();
        assert_eq!(out.archive.hypervolume(), {
            let mut a = ParetoArchive::new();
            for v in &vals {
                a.insert(vec![], *v);
            }
            a.hypervolume()
        });
        assert!(hypervolume(&out.archive.front_values(), out.archive.reference().unwrap()) > 0.0);

        let (again, records2) = run();
        assert_eq!(out.archive.xs(), again.archive.xs());
        let strip = |r: &TrajectoryRecord| TrajectoryRecord { timing: Timing::default(), wall_timestamp: 0.0, ..r.clone() };
        assert_eq!(records.iter().map(strip).collect::<Vec<_>>(), records2.iter().map(strip).collect::<Vec<_>>());
    }

    #[test]
    fn environment_failure_is_logged_and_stops_the_loop() {
        let space = unit_space(2);
        let config = MoboConfig { n_iterations: 5, ..small_config(&space, 2) };
        let mut calls = 0;
        let mut env = |s: &AberrationState| {
            calls += 1;
            if calls == config.n_init + 2 {
                return Err(Error::invalid("stage fault"));
            }
            quadratic([0.0, 0.0])(s)
        };
        let mut sink = MemorySink::default();
        let out = run_mobo(&mut env, &space, &config, &mut sink).unwrap();
        assert!(out.failure.is_some());
        assert_eq!(sink.records.len(), config.n_init + 2);
        let last = sink.records.last().unwrap();
        assert!(last.error.as_deref().unwrap().contains("stage fault"));
        assert!(last.rewards.is_none() && last.image_ref.is_none() && last.action.is_some());
        assert_eq!(out.archive.len(), config.n_init + 1);
    }
}
