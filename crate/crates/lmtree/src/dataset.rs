//! Training data for distillation: random sampling of the feature space,
//! teacher labeling, harvesting of states from failed tree-driven episodes,
//! and the iterative loop that grows the dataset until the tree stops
//! failing where the teacher does not.
//!
//! Features and actions are stored normalized to `[-1, 1]` (clamped), using
//! the same [`FeatureBounds`] the tree and network teacher see at runtime.
//! Labels are always the teacher's response at the *physical* visited state.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::env::{
    run_episode, tree_controller, Controller, DockingEnv, EnvConfig, Outcome, Start, StateVector,
    ACTION_DIM, ACTION_NAMES, FEATURE_NAMES, STATE_DIM,
};
pub use crate::env::{FeatureBounds, Normalizer};
use crate::error::{Error, Result};
use crate::rng;
use crate::teacher::TeacherPolicy;
use crate::tree::{build_tree, fmt_f64, BuildConfig, Tree};

// ============================================================================
// Dataset
// ============================================================================

/// Where a row came from: i.i.d. feature-space sampling, an ordinary episode
/// rollout, or a failure harvest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTag {
    Random,
    Episode,
    FailureHarvest,
}

impl RowTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowTag::Random => "random",
            RowTag::Episode => "episode",
            RowTag::FailureHarvest => "failure-harvest",
        }
    }

    fn parse(s: &str) -> Option<RowTag> {
        match s {
            "random" => Some(RowTag::Random),
            "episode" => Some(RowTag::Episode),
            "failure-harvest" => Some(RowTag::FailureHarvest),
            _ => None,
        }
    }
}

/// Labeled training data: `x` holds normalized features (n x 9), `y` the
/// teacher's normalized actions (n x 5), one provenance tag per row, and the
/// bounds that define the normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub bounds: FeatureBounds,
    pub tags: Vec<RowTag>,
}

impl Dataset {
    /// Validates shapes and bounds, clamps every value into `[-1, 1]`, and
    /// rejects non-finite entries.
    pub fn new(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        bounds: FeatureBounds,
        tags: Vec<RowTag>,
    ) -> Result<Dataset> {
        bounds.validate()?;
        if x.ncols() != STATE_DIM || y.ncols() != ACTION_DIM {
            return Err(Error::DimensionMismatch(format!(
                "dataset needs {STATE_DIM} feature and {ACTION_DIM} action columns, got {} and {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if x.nrows() != y.nrows() || x.nrows() != tags.len() {
            return Err(Error::DimensionMismatch(format!(
                "row counts disagree: {} features, {} labels, {} tags",
                x.nrows(),
                y.nrows(),
                tags.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        let mut x = x;
        let mut y = y;
        x.apply(|v| *v = v.clamp(-1.0, 1.0));
        y.apply(|v| *v = v.clamp(-1.0, 1.0));
        Ok(Dataset { x, y, bounds, tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer::new(self.bounds)
    }

    /// Appends another dataset's rows. Both must share identical bounds, or
    /// their normalized coordinates would not be comparable.
    pub fn append(&mut self, other: &Dataset) -> Result<()> {
        if other.bounds != self.bounds {
            return Err(Error::InvalidArgument(
                "cannot append datasets with different feature bounds".into(),
            ));
        }
        let (n1, n2) = (self.len(), other.len());
        let mut x = DMatrix::zeros(n1 + n2, STATE_DIM);
        let mut y = DMatrix::zeros(n1 + n2, ACTION_DIM);
        x.rows_mut(0, n1).copy_from(&self.x);
        x.rows_mut(n1, n2).copy_from(&other.x);
        y.rows_mut(0, n1).copy_from(&self.y);
        y.rows_mut(n1, n2).copy_from(&other.y);
        self.x = x;
        self.y = y;
        self.tags.extend_from_slice(&other.tags);
        Ok(())
    }
}

// ============================================================================
// Sampling and labeling
// ============================================================================

/// Draws `n` i.i.d. physical states uniformly within `bounds`, one row per
/// state. The contact flag is Bernoulli in `{0, 1}` with the given
/// probability; 0 keeps sampling collision-free. Seeded and reproducible.
pub fn sample_random(
    bounds: &FeatureBounds,
    n: usize,
    seed: u64,
    contact_probability: f64,
) -> Result<DMatrix<f64>> {
    use rand::Rng;
    bounds.validate()?;
    let p = contact_probability.clamp(0.0, 1.0);
    let contact = FEATURE_NAMES
        .iter()
        .position(|f| *f == "contact")
        .expect("contact is a feature");
    let mut r = rng::stream(seed, rng::TAG_SAMPLE);
    let mut x = DMatrix::zeros(n, STATE_DIM);
    for row in 0..n {
        for f in 0..STATE_DIM {
            x[(row, f)] = if f == contact {
                f64::from(r.gen::<f64>() < p)
            } else {
                r.gen_range(bounds.lows[f]..bounds.highs[f])
            };
        }
    }
    Ok(x)
}

/// Labels physical states with the teacher: row `i` of the result holds the
/// normalized features of `x`'s row `i` and the teacher's normalized action
/// at that state. A pure mapping; the teacher is queried at the physical
/// state, before any normalization clamp.
pub fn label(
    teacher: &TeacherPolicy,
    x: &DMatrix<f64>,
    bounds: &FeatureBounds,
    tag: RowTag,
) -> Result<Dataset> {
    bounds.validate()?;
    if x.ncols() != STATE_DIM {
        return Err(Error::DimensionMismatch(format!(
            "states have {} columns, expected {STATE_DIM}",
            x.ncols()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("states to label".into()));
    }
    let normalizer = Normalizer::new(*bounds);
    let n = x.nrows();
    let mut xn = DMatrix::zeros(n, STATE_DIM);
    let mut y = DMatrix::zeros(n, ACTION_DIM);
    for row in 0..n {
        let mut state = [0.0; STATE_DIM];
        for f in 0..STATE_DIM {
            state[f] = x[(row, f)];
        }
        let state = StateVector::from_array(state);
        let action = teacher.act(&state);
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("teacher output at row {row}")));
        }
        let features = normalizer.normalize(&state);
        for f in 0..STATE_DIM {
            xn[(row, f)] = features[f];
        }
        for a in 0..ACTION_DIM {
            y[(row, a)] = action[a];
        }
    }
    Dataset::new(xn, y, *bounds, vec![tag; n])
}

// ============================================================================
// Failure harvesting
// ============================================================================

/// Runs `n_episodes` seeded episodes with the *tree* as controller and
/// returns every state visited during episodes that did not end in success,
/// labeled by the *teacher* and tagged `failure-harvest`. Successful episodes
/// contribute nothing. Episodes run in parallel and merge in seed order, so
/// the result is independent of thread count.
pub fn harvest_failures(
    tree: &Tree,
    teacher: &TeacherPolicy,
    env: &EnvConfig,
    bounds: &FeatureBounds,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    tree.validate_dims(STATE_DIM, ACTION_DIM)?;
    let normalizer = Normalizer::new(*bounds);
    let per_episode: Vec<Vec<StateVector>> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| -> Result<Vec<StateVector>> {
            let mut sim = DockingEnv::new(env.clone())?;
            sim.reset(Start::Seeded(rng::mix(seed, ep as u64)))?;
            let controller = tree_controller(tree, &normalizer);
            let traj = run_episode(&mut sim, &controller, env.max_steps, None)?;
            if traj.outcome == Outcome::Success {
                return Ok(Vec::new());
            }
            Ok(traj.steps.into_iter().map(|s| s.state).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let states: Vec<StateVector> = per_episode.into_iter().flatten().collect();
    let x = DMatrix::from_fn(states.len(), STATE_DIM, |r, c| states[r].to_array()[c]);
    label(teacher, &x, bounds, RowTag::FailureHarvest)
}

// ============================================================================
// Distill loop
// ============================================================================

/// Iterative distillation parameters. `seed` drives the initial sampling
/// directly (so `rounds = 1` reproduces `sample_random` + [`label`] +
/// `build_tree` with the same arguments exactly) and derives per-round
/// harvest seeds and the fixed evaluation start set from tagged streams.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Rows in the initial random dataset.
    pub initial_n: usize,
    /// Tree builds; `rounds - 1` harvests run between them.
    pub rounds: usize,
    /// Tree-driven episodes harvested between consecutive builds.
    pub episodes_per_round: usize,
    /// Seeded episodes in the fixed evaluation start set used for the
    /// per-round failure rate; the same starts are replayed every round.
    pub eval_episodes: usize,
    /// Probability that a sampled state has the contact flag set.
    pub contact_probability: f64,
    pub bounds: FeatureBounds,
    pub build: BuildConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            initial_n: 200_000,
            rounds: 3,
            episodes_per_round: 200,
            eval_episodes: 200,
            contact_probability: 0.0,
            bounds: FeatureBounds::default(),
            build: BuildConfig::default(),
            seed: 0,
        }
    }
}

/// Bookkeeping for one distill round, taken right after that round's build.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    pub dataset_size: usize,
    /// Summed squared error of the tree over its own training set.
    pub train_sse: f64,
    /// Fraction of the fixed evaluation starts the tree fails to dock from.
    pub failure_rate: f64,
}

/// Distills `teacher` into a tree: builds an initial random dataset, fits,
/// then alternates failure harvesting, appending, and rebuilding. Returns the
/// final tree, the full (append-only) dataset, and per-round metrics. Fully
/// deterministic for a fixed config.
pub fn distill_loop(
    teacher: &TeacherPolicy,
    env: &EnvConfig,
    config: &DistillConfig,
) -> Result<(Tree, Dataset, Vec<RoundMetrics>)> {
    if config.rounds < 1 {
        return Err(Error::InvalidConfig("distillation needs at least one round".into()));
    }
    env.validate()?;
    let x = sample_random(
        &config.bounds,
        config.initial_n,
        config.seed,
        config.contact_probability,
    )?;
    let mut data = label(teacher, &x, &config.bounds, RowTag::Random)?;
    let mut tree = build_tree(&data.x, &data.y, &config.build)?;
    let eval_seed = rng::mix(config.seed, rng::TAG_EVAL);
    let mut metrics = vec![RoundMetrics {
        round: 1,
        dataset_size: data.len(),
        train_sse: training_sse(&tree, &data),
        failure_rate: tree_failure_rate(&tree, env, &data.normalizer(), config.eval_episodes, eval_seed)?,
    }];
    for round in 2..=config.rounds {
        let harvest_seed = rng::mix(rng::mix(config.seed, rng::TAG_HARVEST), round as u64);
        let harvested = harvest_failures(
            &tree,
            teacher,
            env,
            &config.bounds,
            config.episodes_per_round,
            harvest_seed,
        )?;
        data.append(&harvested)?;
        tree = build_tree(&data.x, &data.y, &config.build)?;
        metrics.push(RoundMetrics {
            round,
            dataset_size: data.len(),
            train_sse: training_sse(&tree, &data),
            failure_rate: tree_failure_rate(
                &tree,
                env,
                &data.normalizer(),
                config.eval_episodes,
                eval_seed,
            )?,
        });
    }
    Ok((tree, data, metrics))
}

fn training_sse(tree: &Tree, data: &Dataset) -> f64 {
    let mut out = [0.0; ACTION_DIM];
    let mut row = [0.0; STATE_DIM];
    let mut sse = 0.0;
    for i in 0..data.len() {
        for f in 0..STATE_DIM {
            row[f] = data.x[(i, f)];
        }
        tree.predict_into(&row, &mut out);
        for a in 0..ACTION_DIM {
            let e = out[a] - data.y[(i, a)];
            sse += e * e;
        }
    }
    sse
}

/// Failure fraction of the tree controller over `episodes` seeded starts.
/// Episodes run in parallel; the count is merged in seed order.
fn tree_failure_rate(
    tree: &Tree,
    env: &EnvConfig,
    normalizer: &Normalizer,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let failures: usize = (0..episodes)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut sim = DockingEnv::new(env.clone())?;
            sim.reset(Start::Seeded(rng::mix(seed, i as u64)))?;
            let controller = tree_controller(tree, normalizer);
            let traj = run_episode(&mut sim, &controller, env.max_steps, None)?;
            Ok(usize::from(traj.outcome != Outcome::Success))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(failures as f64 / episodes as f64)
}

// ============================================================================
// Files
// ============================================================================

const DATASET_MAGIC: &str = "# lmtree dataset v1";

/// Writes the dataset as commented CSV: a magic line, one `# bounds` line per
/// feature, a header row naming the 9 features, 5 actions, and the tag
/// column, then one row per sample with 17-plus significant digits so the
/// round trip is value-exact.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    for f in 0..STATE_DIM {
        out.push_str(&format!(
            "# bounds {} {} {}\n",
            FEATURE_NAMES[f],
            fmt_f64(data.bounds.lows[f]),
            fmt_f64(data.bounds.highs[f])
        ));
    }
    out.push_str(&FEATURE_NAMES.join(","));
    out.push(',');
    out.push_str(&ACTION_NAMES.join(","));
    out.push_str(",tag\n");
    for row in 0..data.len() {
        for f in 0..STATE_DIM {
            out.push_str(&fmt_f64(data.x[(row, f)]));
            out.push(',');
        }
        for a in 0..ACTION_DIM {
            out.push_str(&fmt_f64(data.y[(row, a)]));
            out.push(',');
        }
        out.push_str(data.tags[row].as_str());
        out.push('\n');
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a `lmtree dataset v1` file back; lossless inverse of
/// [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_dataset(&text, &path.display().to_string())
}

fn parse_dataset(text: &str, path: &str) -> Result<Dataset> {
    let bad = |detail: String| Error::Format {
        kind: "dataset",
        path: path.to_string(),
        detail,
    };
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or("");
    if magic != DATASET_MAGIC {
        return Err(Error::Version {
            kind: "dataset",
            path: path.to_string(),
            found: magic.to_string(),
            expected: DATASET_MAGIC.to_string(),
        });
    }
    let mut bounds = FeatureBounds::default();
    for f in 0..STATE_DIM {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing bounds line for {}", FEATURE_NAMES[f])))?;
        let rest = line
            .strip_prefix("# bounds ")
            .ok_or_else(|| bad(format!("expected '# bounds ...', got '{line}'")))?;
        let mut parts = rest.split_whitespace();
        let name = parts.next().unwrap_or("");
        if name != FEATURE_NAMES[f] {
            return Err(bad(format!(
                "bounds line {f} names '{name}', expected '{}'",
                FEATURE_NAMES[f]
            )));
        }
        let mut value = |which: &str| -> Result<f64> {
            let v: f64 = parts
                .next()
                .ok_or_else(|| bad(format!("bounds for {name} missing {which}")))?
                .parse()
                .map_err(|_| bad(format!("bounds for {name}: bad {which}")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{path}: bounds for {name}")));
            }
            Ok(v)
        };
        bounds.lows[f] = value("low")?;
        bounds.highs[f] = value("high")?;
    }
    let header = lines.next().ok_or_else(|| bad("missing header row".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    if names.len() != STATE_DIM + ACTION_DIM + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{path}: header has {} columns, expected {} features + {} actions + tag",
            names.len(),
            STATE_DIM,
            ACTION_DIM
        )));
    }
    for (i, expected) in FEATURE_NAMES.iter().chain(ACTION_NAMES.iter()).enumerate() {
        if names[i] != *expected {
            return Err(bad(format!(
                "header column {i} is '{}', expected '{expected}'",
                names[i]
            )));
        }
    }
    if names[STATE_DIM + ACTION_DIM] != "tag" {
        return Err(bad("header must end with a 'tag' column".into()));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut tags = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != STATE_DIM + ACTION_DIM + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{path}: row {lineno} has {} fields, expected {}",
                fields.len(),
                STATE_DIM + ACTION_DIM + 1
            )));
        }
        for (i, tok) in fields[..STATE_DIM + ACTION_DIM].iter().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| bad(format!("row {lineno}, column {i}: bad float '{tok}'")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{path}: row {lineno}")));
            }
            if i < STATE_DIM {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        let tag = fields[STATE_DIM + ACTION_DIM];
        tags.push(
            RowTag::parse(tag).ok_or_else(|| bad(format!("row {lineno}: unknown tag '{tag}'")))?,
        );
    }
    let n = tags.len();
    let x = DMatrix::from_fn(n, STATE_DIM, |r, c| xs[r * STATE_DIM + c]);
    let y = DMatrix::from_fn(n, ACTION_DIM, |r, c| ys[r * ACTION_DIM + c]);
    Dataset::new(x, y, bounds, tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{scale_action, unscale_action};
    use crate::teacher::MlpPolicy;
    use nalgebra::DVector;
    use std::sync::Arc;

    fn small_bounds() -> FeatureBounds {
        FeatureBounds::default()
    }

    #[test]
    fn sample_random_is_deterministic() {
        let b = small_bounds();
        let a = sample_random(&b, 1000, 7, 0.0).unwrap();
        let c = sample_random(&b, 1000, 7, 0.0).unwrap();
        assert_eq!(a, c);
        let d = sample_random(&b, 1000, 8, 0.0).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn sample_random_respects_bounds_and_contact_default() {
        let b = small_bounds();
        let x = sample_random(&b, 2000, 1, 0.0).unwrap();
        for row in 0..x.nrows() {
            for f in 0..STATE_DIM {
                assert!(x[(row, f)] >= b.lows[f] && x[(row, f)] <= b.highs[f]);
            }
            assert_eq!(x[(row, 6)], 0.0, "collision-free sampling");
        }
        let x1 = sample_random(&b, 500, 1, 1.0).unwrap();
        for row in 0..x1.nrows() {
            assert_eq!(x1[(row, 6)], 1.0);
        }
    }

    #[test]
    fn sample_random_means_near_bounds_midpoints() {
        let b = small_bounds();
        let x = sample_random(&b, 100_000, 2, 0.5).unwrap();
        for f in 0..STATE_DIM {
            let mean = x.column(f).sum() / x.nrows() as f64;
            let mid = (b.lows[f] + b.highs[f]) / 2.0;
            let half = (b.highs[f] - b.lows[f]) / 2.0;
            assert!(
                (mean - mid).abs() <= 0.05 * half,
                "{}: mean {mean}, midpoint {mid}",
                FEATURE_NAMES[f]
            );
        }
    }

    #[test]
    fn label_matches_rowwise_reevaluation() {
        let b = small_bounds();
        let teacher = TeacherPolicy::scripted();
        let x = sample_random(&b, 100, 3, 0.0).unwrap();
        let data = label(&teacher, &x, &b, RowTag::Random).unwrap();
        let normalizer = Normalizer::new(b);
        for row in 0..100 {
            let mut raw = [0.0; STATE_DIM];
            for f in 0..STATE_DIM {
                raw[f] = x[(row, f)];
            }
            let state = StateVector::from_array(raw);
            let want = teacher.act(&state);
            let norm = normalizer.normalize(&state);
            for a in 0..ACTION_DIM {
                assert_eq!(data.y[(row, a)], want[a]);
            }
            for f in 0..STATE_DIM {
                assert_eq!(data.x[(row, f)], norm[f]);
            }
            assert_eq!(data.tags[row], RowTag::Random);
        }
    }

    #[test]
    fn label_zero_network_gives_zero_labels() {
        let b = small_bounds();
        let layers = vec![
            (DMatrix::zeros(8, STATE_DIM), DVector::zeros(8)),
            (DMatrix::zeros(ACTION_DIM, 8), DVector::zeros(ACTION_DIM)),
        ];
        let teacher =
            TeacherPolicy::mlp(MlpPolicy::new(layers).unwrap(), Normalizer::new(b)).unwrap();
        let x = sample_random(&b, 50, 4, 0.0).unwrap();
        let data = label(&teacher, &x, &b, RowTag::Random).unwrap();
        assert!(data.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn label_constant_teacher_gives_equal_rows() {
        let b = small_bounds();
        let teacher = TeacherPolicy::Custom(Arc::new(|_: &StateVector| {
            unscale_action(&[40.0, -20.0, 10.0, 45.0, -60.0])
        }));
        let x = sample_random(&b, 64, 5, 0.0).unwrap();
        let data = label(&teacher, &x, &b, RowTag::Episode).unwrap();
        for row in 0..64 {
            for a in 0..ACTION_DIM {
                assert_eq!(data.y[(row, a)], data.y[(0, a)]);
            }
        }
    }

    #[test]
    fn label_rejects_wrong_feature_width() {
        let b = small_bounds();
        let teacher = TeacherPolicy::scripted();
        let x = DMatrix::zeros(10, STATE_DIM - 1);
        let err = label(&teacher, &x, &b, RowTag::Random).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn dataset_file_round_trip_is_value_exact() {
        let b = small_bounds();
        let teacher = TeacherPolicy::scripted();
        let x = sample_random(&b, 1500, 11, 0.25).unwrap();
        let mut data = label(&teacher, &x, &b, RowTag::Random).unwrap();
        let x2 = sample_random(&b, 300, 12, 0.0).unwrap();
        data.append(&label(&teacher, &x2, &b, RowTag::Episode).unwrap()).unwrap();
        let x3 = sample_random(&b, 200, 13, 0.0).unwrap();
        data.append(&label(&teacher, &x3, &b, RowTag::FailureHarvest).unwrap()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, data, "bitwise round trip");

        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().nth(1 + STATE_DIM).unwrap();
        assert_eq!(
            header,
            "x_rel,y_rel,psi_err,u,v,r,contact,d_obs,psi_obs,f1,f2,f3,alpha1,alpha2,tag"
        );
    }

    #[test]
    fn append_rejects_mismatched_bounds() {
        let b = small_bounds();
        let teacher = TeacherPolicy::scripted();
        let x = sample_random(&b, 10, 1, 0.0).unwrap();
        let mut data = label(&teacher, &x, &b, RowTag::Random).unwrap();
        let mut other_bounds = b;
        other_bounds.highs[0] = 500.0;
        let x2 = sample_random(&other_bounds, 10, 2, 0.0).unwrap();
        let other = label(&teacher, &x2, &other_bounds, RowTag::Random).unwrap();
        assert!(data.append(&other).is_err());
    }

    #[test]
    fn load_rejects_eight_feature_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut text = String::from(DATASET_MAGIC);
        text.push('\n');
        let b = small_bounds();
        for f in 0..STATE_DIM {
            text.push_str(&format!(
                "# bounds {} {} {}\n",
                FEATURE_NAMES[f],
                fmt_f64(b.lows[f]),
                fmt_f64(b.highs[f])
            ));
        }
        text.push_str("x_rel,y_rel,psi_err,u,v,r,contact,d_obs,f1,f2,f3,alpha1,alpha2,tag\n");
        text.push_str("0,0,0,0,0,0,0,0,0,0,0,0,0,random\n");
        std::fs::write(&path, text).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn load_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bounds();
        let teacher = TeacherPolicy::scripted();
        let x = sample_random(&b, 5, 1, 0.0).unwrap();
        let data = label(&teacher, &x, &b, RowTag::Random).unwrap();
        let path = dir.path().join("good.csv");
        save_dataset(&data, &path).unwrap();
        let good = std::fs::read_to_string(&path).unwrap();

        let wrong_magic = good.replacen("v1", "v2", 1);
        let p = dir.path().join("magic.csv");
        std::fs::write(&p, wrong_magic).unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::Version { .. }));

        let bad_float = good.replacen("e0", "xx", 1);
        let p = dir.path().join("float.csv");
        std::fs::write(&p, bad_float).unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::Format { .. }));

        let bad_tag = good.replace(",random", ",mystery");
        let p = dir.path().join("tag.csv");
        std::fs::write(&p, bad_tag).unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::Format { .. }));

        let nan = good.replacen(
            &fmt_f64(data.x[(0, 0)]),
            "NaN",
            1,
        );
        let p = dir.path().join("nan.csv");
        std::fs::write(&p, nan).unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::NonFinite(_)));
    }

    /// A single-leaf tree fit on a constant target predicts that constant
    /// everywhere: a full-thrust controller that fails every episode.
    fn constant_full_thrust_tree(b: &FeatureBounds) -> Tree {
        let x = sample_random(b, 200, 21, 0.0).unwrap();
        let teacher = TeacherPolicy::Custom(Arc::new(|_: &StateVector| {
            unscale_action(&[100.0, 100.0, 0.0, 0.0, 0.0])
        }));
        let data = label(&teacher, &x, b, RowTag::Random).unwrap();
        let config = BuildConfig { max_leaves: 1, ..BuildConfig::default() };
        build_tree(&data.x, &data.y, &config).unwrap()
    }

    #[test]
    fn harvest_collects_every_failed_episode_and_labels_exactly() {
        let b = small_bounds();
        let env = EnvConfig::default();
        let teacher = TeacherPolicy::scripted();
        let tree = constant_full_thrust_tree(&b);
        let episodes = 4;
        let seed = 99;
        let data = harvest_failures(&tree, &teacher, &env, &b, episodes, seed).unwrap();
        assert!(data.tags.iter().all(|t| *t == RowTag::FailureHarvest));

        // Replay the same seeded episodes by hand and compare row for row.
        let normalizer = Normalizer::new(b);
        let mut expected = Vec::new();
        for ep in 0..episodes {
            let mut sim = DockingEnv::new(env.clone()).unwrap();
            sim.reset(Start::Seeded(rng::mix(seed, ep as u64))).unwrap();
            let controller = tree_controller(&tree, &normalizer);
            let traj = run_episode(&mut sim, &controller, env.max_steps, None).unwrap();
            assert_ne!(traj.outcome, Outcome::Success, "full thrust cannot dock");
            expected.extend(traj.steps.into_iter().map(|s| s.state));
        }
        assert_eq!(data.len(), expected.len());
        for (row, state) in expected.iter().enumerate() {
            let want = teacher.act(state);
            let norm = normalizer.normalize(state);
            for a in 0..ACTION_DIM {
                assert_eq!(data.y[(row, a)], want[a]);
            }
            for f in 0..STATE_DIM {
                assert_eq!(data.x[(row, f)], norm[f]);
            }
        }
    }

    #[test]
    fn harvest_skips_successful_episodes() {
        // A mid-size distilled tree docks from some seeded starts but not
        // all; harvested rows must come only from the failures.
        let b = small_bounds();
        let env = EnvConfig::default();
        let teacher = TeacherPolicy::scripted();
        let config = DistillConfig {
            initial_n: 30_000,
            rounds: 1,
            episodes_per_round: 0,
            eval_episodes: 0,
            build: BuildConfig { max_leaves: 256, ..BuildConfig::default() },
            seed: 5,
            ..DistillConfig::default()
        };
        let (tree, _, _) = distill_loop(&teacher, &env, &config).unwrap();

        let episodes = 8;
        let seed = 123;
        let normalizer = Normalizer::new(b);
        let mut failed_rows = 0;
        let mut successes = 0;
        for ep in 0..episodes {
            let mut sim = DockingEnv::new(env.clone()).unwrap();
            sim.reset(Start::Seeded(rng::mix(seed, ep as u64))).unwrap();
            let controller = tree_controller(&tree, &normalizer);
            let traj = run_episode(&mut sim, &controller, env.max_steps, None).unwrap();
            if traj.outcome == Outcome::Success {
                successes += 1;
            } else {
                failed_rows += traj.steps.len();
            }
        }
        assert!(successes > 0, "premise: the mid-size tree docks somewhere");
        let data = harvest_failures(&tree, &teacher, &env, &b, episodes, seed).unwrap();
        assert_eq!(data.len(), failed_rows);
    }

    #[test]
    fn distill_single_round_equals_manual_pipeline() {
        let env = EnvConfig::default();
        let teacher = TeacherPolicy::scripted();
        let config = DistillConfig {
            initial_n: 3000,
            rounds: 1,
            episodes_per_round: 0,
            eval_episodes: 3,
            build: BuildConfig { max_leaves: 32, ..BuildConfig::default() },
            seed: 17,
            ..DistillConfig::default()
        };
        let (tree, data, metrics) = distill_loop(&teacher, &env, &config).unwrap();

        let x = sample_random(&config.bounds, 3000, 17, 0.0).unwrap();
        let manual = label(&teacher, &x, &config.bounds, RowTag::Random).unwrap();
        let manual_tree = build_tree(&manual.x, &manual.y, &config.build).unwrap();
        assert_eq!(data, manual);
        assert_eq!(format!("{tree:?}"), format!("{manual_tree:?}"));
        assert_eq!(metrics.len(), 1);
        assert_eq!(metrics[0].dataset_size, 3000);
    }

    #[test]
    fn distill_is_deterministic_and_append_only() {
        let env = EnvConfig::default();
        let teacher = TeacherPolicy::scripted();
        let config = DistillConfig {
            initial_n: 2000,
            rounds: 2,
            episodes_per_round: 3,
            eval_episodes: 3,
            build: BuildConfig { max_leaves: 16, ..BuildConfig::default() },
            seed: 29,
            ..DistillConfig::default()
        };
        let (tree_a, data_a, metrics_a) = distill_loop(&teacher, &env, &config).unwrap();
        let (tree_b, data_b, metrics_b) = distill_loop(&teacher, &env, &config).unwrap();
        assert_eq!(format!("{tree_a:?}"), format!("{tree_b:?}"));
        assert_eq!(data_a, data_b);
        assert_eq!(metrics_a, metrics_b);

        // A 16-leaf tree cannot dock, so round 2 must have harvested rows,
        // and the first block must be the untouched round-1 data.
        assert!(data_a.len() > 2000, "harvest appended rows");
        let x = sample_random(&config.bounds, 2000, 29, 0.0).unwrap();
        let first = label(&teacher, &x, &config.bounds, RowTag::Random).unwrap();
        assert_eq!(data_a.x.rows(0, 2000), first.x.rows(0, 2000));
        assert_eq!(data_a.y.rows(0, 2000), first.y.rows(0, 2000));
        assert!(data_a.tags[..2000].iter().all(|t| *t == RowTag::Random));
        assert!(data_a.tags[2000..].iter().all(|t| *t == RowTag::FailureHarvest));
        assert_eq!(metrics_a[1].dataset_size, data_a.len());
    }

    #[test]
    fn scale_round_trip_of_labels() {
        // Labels are normalized actions; pushing them through the physical
        // map and back must be lossless for in-range values.
        let b = small_bounds();
        let teacher = TeacherPolicy::scripted();
        let x = sample_random(&b, 50, 31, 0.0).unwrap();
        let data = label(&teacher, &x, &b, RowTag::Random).unwrap();
        for row in 0..50 {
            let mut a = [0.0; ACTION_DIM];
            for i in 0..ACTION_DIM {
                a[i] = data.y[(row, i)];
            }
            let back = unscale_action(&scale_action(&a));
            for i in 0..ACTION_DIM {
                assert!((back[i] - a[i]).abs() <= 1e-12);
            }
        }
    }
}
