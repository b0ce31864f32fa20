//! Hyper-parameter search: random sampling and a tree-structured Parzen
//! estimator (TPE) with independent per-dimension densities.
//!
//! Suggestion `i` always uses the stream `Rng::new(seed).split(i)`, so a
//! persisted history replays to the same suggestion sequence.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::phi;
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dimension {
    LogUniform { min: f64, max: f64 },
    Uniform { min: f64, max: f64 },
    Integer { min: i64, max: i64 },
    Categorical { options: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Cat(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            Value::Cat(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Cat(s) => write!(f, "{s}"),
        }
    }
}

pub type Assignment = BTreeMap<String, Value>;

/// Named dimensions, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Dimension>,
}

impl SearchSpace {
    pub fn new(dims: impl IntoIterator<Item = (String, Dimension)>) -> Result<Self> {
        let s = Self {
            dims: dims.into_iter().collect(),
        };
        let v = s.violations();
        if v.is_empty() {
            Ok(s)
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, d) in &self.dims {
            let ok = match d {
                Dimension::LogUniform { min, max } => *min > 0.0 && min < max && max.is_finite(),
                Dimension::Uniform { min, max } => min < max && min.is_finite() && max.is_finite(),
                Dimension::Integer { min, max } => min < max,
                Dimension::Categorical { options } => !options.is_empty(),
            };
            if !ok {
                v.push(format!("search dimension {name}: invalid bounds {d:?}"));
            }
        }
        v
    }

    /// Whether `a` assigns every dimension a value inside its bounds.
    pub fn contains(&self, a: &Assignment) -> bool {
        self.dims.iter().all(|(name, d)| match (d, a.get(name)) {
            (Dimension::LogUniform { min, max } | Dimension::Uniform { min, max }, Some(Value::Float(x))) => {
                (*min..=*max).contains(x)
            }
            (Dimension::Integer { min, max }, Some(Value::Int(i))) => (*min..=*max).contains(i),
            (Dimension::Categorical { options }, Some(Value::Cat(c))) => options.contains(c),
            _ => false,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Pending,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub assignment: Assignment,
    /// Devel UAR, maximized.
    pub objective: Option<f64>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeParams {
    pub gamma: f64,
    pub n_candidates: usize,
    pub n_startup: usize,
}

impl Default for TpeParams {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_candidates: 24,
            n_startup: 20,
        }
    }
}

/// Continuous view of a numeric dimension: the sampling interval (log space
/// for log-uniform, widened by half a step for integers).
fn interval(d: &Dimension) -> Option<(f64, f64)> {
    match *d {
        Dimension::LogUniform { min, max } => Some((min.ln(), max.ln())),
        Dimension::Uniform { min, max } => Some((min, max)),
        Dimension::Integer { min, max } => Some((min as f64 - 0.5, max as f64 + 0.5)),
        Dimension::Categorical { .. } => None,
    }
}

fn to_internal(d: &Dimension, v: &Value) -> f64 {
    match (d, v) {
        (Dimension::LogUniform { .. }, v) => v.as_f64().unwrap_or(f64::NAN).ln(),
        (_, v) => v.as_f64().unwrap_or(f64::NAN),
    }
}

fn from_internal(d: &Dimension, x: f64) -> Value {
    match *d {
        Dimension::LogUniform { min, max } => Value::Float(x.exp().clamp(min, max)),
        Dimension::Uniform { min, max } => Value::Float(x.clamp(min, max)),
        Dimension::Integer { min, max } => Value::Int((x.round() as i64).clamp(min, max)),
        Dimension::Categorical { .. } => unreachable!("numeric dimensions only"),
    }
}

fn sample_prior(d: &Dimension, rng: &mut Rng) -> Value {
    match d {
        Dimension::Categorical { options } => Value::Cat(options[rng.below(options.len())].clone()),
        Dimension::Integer { min, max } => Value::Int(min + rng.below((max - min + 1) as usize) as i64),
        _ => {
            let (lo, hi) = interval(d).expect("numeric");
            from_internal(d, rng.uniform_range(lo, hi))
        }
    }
}

/// Independent draw per dimension from its prior.
pub fn suggest_random(space: &SearchSpace, rng: &mut Rng) -> Assignment {
    space
        .dims
        .iter()
        .map(|(name, d)| (name.clone(), sample_prior(d, rng)))
        .collect()
}

/// Truncated Gaussian mixture over `[lo, hi]` with one kernel per
/// observation plus the uniform prior as an extra component.
struct Parzen {
    lo: f64,
    hi: f64,
    mus: Vec<f64>,
    sigma: f64,
}

impl Parzen {
    fn fit(lo: f64, hi: f64, obs: &[f64]) -> Self {
        let n = obs.len();
        let range = hi - lo;
        let sigma = if n >= 2 {
            let mean = obs.iter().sum::<f64>() / n as f64;
            let var = obs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Scott's rule for one dimension
            var.sqrt() * (n as f64).powf(-0.2)
        } else {
            range
        };
        Self {
            lo,
            hi,
            mus: obs.to_vec(),
            // lower clip keeps a shrinking cluster from freezing exploration
            sigma: sigma.clamp(range / (n as f64 + 1.0).min(100.0), range),
        }
    }

    fn n_components(&self) -> usize {
        self.mus.len() + 1
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let k = rng.below(self.n_components());
        if k == self.mus.len() {
            return rng.uniform_range(self.lo, self.hi);
        }
        for _ in 0..64 {
            let x = rng.normal(self.mus[k], self.sigma);
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        self.mus[k].clamp(self.lo, self.hi)
    }

    fn log_density(&self, x: f64) -> f64 {
        let s = self.sigma;
        let mut p = 1.0 / (self.hi - self.lo);
        for &m in &self.mus {
            let mass = phi((self.hi - m) / s) - phi((self.lo - m) / s);
            let z = (x - m) / s;
            p += (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-300));
        }
        (p / self.n_components() as f64).max(1e-300).ln()
    }
}

/// Add-one smoothed category frequencies.
fn categorical_probs(options: &[String], obs: &[&str]) -> Vec<f64> {
    let total = (obs.len() + options.len()) as f64;
    options
        .iter()
        .map(|o| (obs.iter().filter(|&&v| v == o).count() + 1) as f64 / total)
        .collect()
}

/// TPE suggestion. Falls back to [`suggest_random`] (with the same rng)
/// until `n_startup` complete trials exist.
pub fn suggest_tpe(space: &SearchSpace, history: &[Trial], rng: &mut Rng, params: &TpeParams) -> Assignment {
    let mut done: Vec<&Trial> = history
        .iter()
        .filter(|t| t.status == TrialStatus::Complete && t.objective.is_some_and(f64::is_finite))
        .collect();
    if done.len() < params.n_startup.max(1) {
        return suggest_random(space, rng);
    }
    // Stable sort keeps earlier trials first among equal objectives.
    done.sort_by(|a, b| b.objective.unwrap().total_cmp(&a.objective.unwrap()));
    let n_good = ((params.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len());
    let (good, bad) = done.split_at(n_good);

    let mut best: Option<(f64, Assignment)> = None;
    let mut candidates: Vec<Assignment> = vec![Assignment::new(); params.n_candidates.max(1)];
    let mut scores = vec![0.0; candidates.len()];
    for (name, d) in &space.dims {
        match d {
            Dimension::Categorical { options } => {
                let pick = |ts: &[&Trial]| -> Vec<String> {
                    ts.iter()
                        .filter_map(|t| match t.assignment.get(name) {
                            Some(Value::Cat(c)) => Some(c.clone()),
                            _ => None,
                        })
                        .collect()
                };
                let (g_obs, b_obs) = (pick(good), pick(bad));
                let l = categorical_probs(options, &g_obs.iter().map(String::as_str).collect::<Vec<_>>());
                let g = categorical_probs(options, &b_obs.iter().map(String::as_str).collect::<Vec<_>>());
                for (c, score) in candidates.iter_mut().zip(scores.iter_mut()) {
                    let mut u = rng.uniform();
                    let mut k = 0;
                    while k + 1 < l.len() && u >= l[k] {
                        u -= l[k];
                        k += 1;
                    }
                    *score += l[k].ln() - g[k].ln();
                    c.insert(name.clone(), Value::Cat(options[k].clone()));
                }
            }
            _ => {
                let (lo, hi) = interval(d).expect("numeric");
                let pick = |ts: &[&Trial]| -> Vec<f64> {
                    ts.iter()
                        .filter_map(|t| t.assignment.get(name).map(|v| to_internal(d, v)))
                        .filter(|x| x.is_finite())
                        .collect()
                };
                let l = Parzen::fit(lo, hi, &pick(good));
                let g = Parzen::fit(lo, hi, &pick(bad));
                for (c, score) in candidates.iter_mut().zip(scores.iter_mut()) {
                    let v = from_internal(d, l.sample(rng));
                    let x = to_internal(d, &v);
                    *score += l.log_density(x) - g.log_density(x);
                    c.insert(name.clone(), v);
                }
            }
        }
    }
    for (c, s) in candidates.into_iter().zip(scores) {
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, c));
        }
    }
    best.map(|(_, a)| a).expect("at least one candidate")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Tpe,
}

/// Read a persisted trial log (one JSON trial per line).
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::invalid(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Sequential suggest → evaluate → record loop up to `budget` trials in
/// total. With `log` set, every finished trial is appended to that file
/// immediately and trials already in it are resumed rather than rerun.
/// Objective failures are recorded as failed trials and never abort the
/// search. Returns all trials sorted by objective, best first.
pub fn run_search<F>(
    space: &SearchSpace,
    mut objective: F,
    budget: usize,
    seed: u64,
    strategy: Strategy,
    params: &TpeParams,
    log: Option<&Path>,
) -> Result<Vec<Trial>>
where
    F: FnMut(usize, &Assignment) -> Result<f64>,
{
    let v = space.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let mut trials = match log {
        Some(p) => read_trials(p)?,
        None => Vec::new(),
    };
    let root = Rng::new(seed);
    let mut file = match log {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    while trials.len() < budget {
        let id = trials.len();
        let mut rng = root.split(id as u64);
        let assignment = match strategy {
            Strategy::Random => suggest_random(space, &mut rng),
            Strategy::Tpe => suggest_tpe(space, &trials, &mut rng, params),
        };
        let trial = match objective(id, &assignment) {
            Ok(x) if x.is_finite() => Trial {
                id,
                assignment,
                objective: Some(x),
                status: TrialStatus::Complete,
                error: None,
            },
            outcome => Trial {
                id,
                assignment,
                objective: None,
                status: TrialStatus::Failed,
                error: Some(match outcome {
                    Ok(x) => format!("objective {x} is not finite"),
                    Err(e) => e.to_string(),
                }),
            },
        };
        if let (Some(f), Some(p)) = (file.as_mut(), log) {
            let line = serde_json::to_string(&trial).map_err(|e| Error::Other(e.to_string()))? + "\n";
            f.write_all(line.as_bytes()).map_err(|e| Error::io(p, e))?;
            f.flush().map_err(|e| Error::io(p, e))?;
        }
        trials.push(trial);
    }
    Ok(sorted_trials(trials))
}

/// Complete trials by descending objective (ties by id), then the rest.
pub fn sorted_trials(mut trials: Vec<Trial>) -> Vec<Trial> {
    trials.sort_by(|a, b| match (a.objective, b.objective) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.id.cmp(&b.id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.id.cmp(&b.id),
    });
    trials
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    /// Two-sided one-sample KS p-value against U(0, 1) (asymptotic).
    fn ks_uniform_p(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
            .fold(0.0, f64::max);
        let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let p: f64 = (1..100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * t * t).exp()
            })
            .sum();
        p.clamp(0.0, 1.0)
    }

    fn one_dim(d: Dimension) -> SearchSpace {
        SearchSpace::new([("x".to_string(), d)]).unwrap()
    }

    fn x_of(a: &Assignment) -> f64 {
        a["x"].as_f64().unwrap()
    }

    #[test]
    fn single_option_categorical() {
        let s = one_dim(Dimension::Categorical {
            options: vec!["only".into()],
        });
        let mut rng = Rng::new(0);
        for _ in 0..20 {
            assert_eq!(suggest_random(&s, &mut rng)["x"], Value::Cat("only".into()));
        }
    }

    #[test]
    fn random_draws_pass_ks() {
        let s = one_dim(Dimension::Uniform { min: 0.0, max: 1.0 });
        let mut rng = Rng::new(1);
        let xs: Vec<f64> = (0..10_000).map(|_| x_of(&suggest_random(&s, &mut rng))).collect();
        assert!(ks_uniform_p(xs) > 0.01);

        let s = one_dim(Dimension::LogUniform { min: 1e-5, max: 1e-2 });
        let xs: Vec<f64> = (0..10_000)
            .map(|_| (x_of(&suggest_random(&s, &mut rng)).log10() + 5.0) / 3.0)
            .collect();
        assert!(ks_uniform_p(xs) > 0.01);

        // the KS helper does reject a skewed sample
        let skewed: Vec<f64> = (0..10_000).map(|_| rng.uniform().powi(2)).collect();
        assert!(ks_uniform_p(skewed) < 0.01);
    }

    #[test]
    fn invalid_spaces_are_rejected() {
        assert!(SearchSpace::new([("a".to_string(), Dimension::Uniform { min: 1.0, max: 1.0 })]).is_err());
        assert!(SearchSpace::new([("a".to_string(), Dimension::LogUniform { min: 0.0, max: 1.0 })]).is_err());
        assert!(SearchSpace::new([("a".to_string(), Dimension::Categorical { options: vec![] })]).is_err());
    }

    #[test]
    fn below_startup_tpe_equals_random() {
        let s = one_dim(Dimension::Uniform { min: -5.0, max: 5.0 });
        let history: Vec<Trial> = (0..5)
            .map(|i| Trial {
                id: i,
                assignment: [("x".to_string(), Value::Float(i as f64))].into(),
                objective: Some(i as f64),
                status: TrialStatus::Complete,
                error: None,
            })
            .collect();
        let a = suggest_tpe(&s, &history, &mut Rng::new(9), &TpeParams::default());
        let b = suggest_random(&s, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    fn quadratic(strategy: Strategy, seed: u64) -> f64 {
        let s = one_dim(Dimension::Uniform { min: -5.0, max: 5.0 });
        let trials = run_search(
            &s,
            |_, a| Ok(-(x_of(a) - 2.0).powi(2)),
            60,
            seed,
            strategy,
            &TpeParams::default(),
            None,
        )
        .unwrap();
        (x_of(&trials[0].assignment) - 2.0).abs()
    }

    #[test]
    fn tpe_converges_on_quadratic() {
        let close = (0..10).filter(|&s| quadratic(Strategy::Tpe, s) <= 0.25).count();
        assert!(close >= 9, "{close}/10");
    }

    #[test]
    fn tpe_beats_random_on_paired_seeds() {
        let wins = (0..10)
            .filter(|&s| quadratic(Strategy::Tpe, s) < quadratic(Strategy::Random, s))
            .count();
        assert!(wins >= 7, "{wins}/10");
    }

    #[test]
    fn gamma_one_falls_back_toward_prior() {
        let s = one_dim(Dimension::Uniform { min: 0.0, max: 1.0 });
        let params = TpeParams { gamma: 1.0, ..TpeParams::default() };
        let trials = run_search(&s, |_, a| Ok(x_of(a)), 40, 3, Strategy::Tpe, &params, None).unwrap();
        assert!(trials.iter().all(|t| s.contains(&t.assignment)));
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let s = one_dim(Dimension::Integer { min: 0, max: 3 });
        let trials = run_search(
            &s,
            |id, _| {
                if id % 2 == 0 {
                    Err(Error::Other("boom".into()))
                } else {
                    Ok(id as f64)
                }
            },
            6,
            0,
            Strategy::Tpe,
            &TpeParams::default(),
            None,
        )
        .unwrap();
        assert_eq!(trials.len(), 6);
        assert_eq!(trials.iter().filter(|t| t.status == TrialStatus::Failed).count(), 3);
        assert_eq!(trials[0].objective, Some(5.0));
    }

    #[test]
    fn budget_one_and_constant_objective() {
        let s = one_dim(Dimension::Uniform { min: 0.0, max: 1.0 });
        let p = TpeParams::default();
        assert_eq!(run_search(&s, |_, _| Ok(0.5), 1, 0, Strategy::Tpe, &p, None).unwrap().len(), 1);
        let all = run_search(&s, |_, _| Ok(0.5), 30, 0, Strategy::Tpe, &p, None).unwrap();
        assert!(all.iter().all(|t| t.status == TrialStatus::Complete));
    }

    #[test]
    fn resume_runs_only_the_remainder_and_replays() {
        let s = one_dim(Dimension::Uniform { min: -5.0, max: 5.0 });
        let p = TpeParams::default();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("trials.log");
        let f = |_: usize, a: &Assignment| Ok(-(x_of(a) - 2.0).powi(2));
        run_search(&s, f, 30, 7, Strategy::Tpe, &p, Some(&log)).unwrap();
        assert_eq!(read_trials(&log).unwrap().len(), 30);
        let mut calls = 0;
        let resumed = run_search(
            &s,
            |_, a| {
                calls += 1;
                f(0, a)
            },
            60,
            7,
            Strategy::Tpe,
            &p,
            Some(&log),
        )
        .unwrap();
        assert_eq!(calls, 30);
        assert_eq!(resumed.len(), 60);
        let straight = run_search(&s, f, 60, 7, Strategy::Tpe, &p, None).unwrap();
        assert_eq!(resumed, straight);
    }

    proptest! {
        #[test]
        fn suggestions_stay_in_bounds(lo in -10.0f64..10.0, width in 0.01f64..20.0, ilo in -20i64..20, iw in 1i64..10,
                                      n_opts in 1usize..5, gamma in 0.05f64..1.0, seed: u64) {
            let s = SearchSpace::new([
                ("u".to_string(), Dimension::Uniform { min: lo, max: lo + width }),
                ("l".to_string(), Dimension::LogUniform { min: 1e-4, max: 1e-4 + width }),
                ("i".to_string(), Dimension::Integer { min: ilo, max: ilo + iw }),
                ("c".to_string(), Dimension::Categorical { options: (0..n_opts).map(|k| k.to_string()).collect() }),
            ]).unwrap();
            let params = TpeParams { gamma, n_startup: 5, n_candidates: 8 };
            let mut rng = Rng::new(seed);
            let mut history = Vec::new();
            for id in 0..12 {
                let a = suggest_tpe(&s, &history, &mut rng, &params);
                prop_assert!(s.contains(&a), "{a:?}");
                history.push(Trial { id, objective: Some(rng.uniform()), assignment: a, status: TrialStatus::Complete, error: None });
            }
        }
    }
}
