//! Ship-docking simulation: a 3-DOF vessel (surge, sway, yaw) maneuvering to
//! a berth beside a segmented quay wall.
//!
//! Conventions: world axes are north/east, headings measured from north
//! toward east, wrapped to `(-pi, pi]`. Body axes are x forward, y starboard.
//! The vessel is a rigid body with diagonal added-mass and linear damping,
//! integrated with a semi-implicit Euler step (velocity first, then pose with
//! the updated velocity). Forces enter in kilonewtons, azimuth angles in
//! degrees; dynamics run in SI units.
//!
//! The observation is the fixed 9-entry feature vector: body-frame offsets to
//! the berth, heading error, body velocities, contact flag, and range/bearing
//! to the closest quay point. Contact of the hull footprint with any quay
//! segment is absorbing: the episode is over and further `step` calls error.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tree::Tree;

pub const STATE_DIM: usize = 9;
pub const ACTION_DIM: usize = 5;

/// Feature order of the observation vector.
pub const FEATURE_NAMES: [&str; STATE_DIM] = [
    "x_rel", "y_rel", "psi_err", "u", "v", "r", "contact", "d_obs", "psi_obs",
];

/// Output order of the action vector.
pub const ACTION_NAMES: [&str; ACTION_DIM] = ["f1", "f2", "f3", "alpha1", "alpha2"];

/// Physical lower bounds: azimuth thrusts (kN), tunnel thrust (kN), azimuth
/// angles (deg).
pub const ACTION_LOWS: [f64; ACTION_DIM] = [-70.0, -70.0, -50.0, -90.0, -90.0];
pub const ACTION_HIGHS: [f64; ACTION_DIM] = [100.0, 100.0, 50.0, 90.0, 90.0];

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Maps a normalized action in `[-1, 1]^5` to physical units (kN, deg).
/// Inputs are clamped to the normalized range first.
pub fn scale_action(normalized: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    let mut out = [0.0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        let x = normalized[i].clamp(-1.0, 1.0);
        out[i] = ACTION_LOWS[i] + (x + 1.0) / 2.0 * (ACTION_HIGHS[i] - ACTION_LOWS[i]);
    }
    out
}

/// Exact inverse of [`scale_action`] on in-range physical actions.
pub fn unscale_action(physical: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    let mut out = [0.0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        out[i] = 2.0 * (physical[i] - ACTION_LOWS[i]) / (ACTION_HIGHS[i] - ACTION_LOWS[i]) - 1.0;
    }
    out
}

// ============================================================================
// State
// ============================================================================

/// The 9-feature observation, physical units. `x_rel`/`y_rel` are the berth
/// offsets in the body frame (meters), `psi_err` the heading error to the
/// berth heading, `u`/`v`/`r` body velocities, `contact` a 0/1 flag, and
/// `d_obs`/`psi_obs` range (m) and body bearing to the closest quay point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub x_rel: f64,
    pub y_rel: f64,
    pub psi_err: f64,
    pub u: f64,
    pub v: f64,
    pub r: f64,
    pub contact: f64,
    pub d_obs: f64,
    pub psi_obs: f64,
}

impl StateVector {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.x_rel, self.y_rel, self.psi_err, self.u, self.v, self.r, self.contact,
            self.d_obs, self.psi_obs,
        ]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        StateVector {
            x_rel: a[0],
            y_rel: a[1],
            psi_err: a[2],
            u: a[3],
            v: a[4],
            r: a[5],
            contact: a[6],
            d_obs: a[7],
            psi_obs: a[8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub north: f64,
    pub east: f64,
    /// Radians, wrapped to `(-pi, pi]`.
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity {
    pub u: f64,
    pub v: f64,
    pub r: f64,
}

// ============================================================================
// Configuration
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub n1: f64,
    pub e1: f64,
    pub n2: f64,
    pub e2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dynamics {
    /// Effective masses including added mass (kg) and yaw inertia (kg m^2).
    pub mass_u: f64,
    pub mass_v: f64,
    pub inertia_z: f64,
    /// Linear damping (N s/m, N s/m, N m s).
    pub damp_u: f64,
    pub damp_v: f64,
    pub damp_r: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics {
            mass_u: 5.0e6,
            mass_v: 8.0e6,
            inertia_z: 1.0e9,
            damp_u: 5.0e4,
            damp_v: 1.2e5,
            damp_r: 1.0e8,
        }
    }
}

/// Thruster geometry in the body frame (m). The two azimuth thrusters sit at
/// `(azimuth_x, +/-azimuth_y)`; the tunnel thruster pushes sideways at
/// `(tunnel_x, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thrusters {
    pub azimuth_x: f64,
    pub azimuth_y: f64,
    pub tunnel_x: f64,
}

impl Default for Thrusters {
    fn default() -> Self {
        Thrusters {
            azimuth_x: -30.0,
            azimuth_y: 8.0,
            tunnel_x: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Berth position tolerance (m).
    pub position: f64,
    /// Heading tolerance (degrees).
    pub heading_deg: f64,
    /// Planar speed tolerance (m/s).
    pub speed: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            position: 1.0,
            heading_deg: 5.0,
            speed: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedLimits {
    pub u: f64,
    pub v: f64,
    pub r: f64,
}

impl Default for SpeedLimits {
    fn default() -> Self {
        SpeedLimits {
            u: 10.0,
            v: 5.0,
            r: 1.0,
        }
    }
}

/// Random-start sampling region. Positions are drawn uniformly in the box and
/// accepted when inside the berth-distance band, clear of the quay, and
/// within `max_quay_distance` of it. Headings are uniform over the full
/// circle. The outer berth-distance bound keeps starts inside the approach
/// fairway: with the step-800 truncation the budget is 400 s, and a hull
/// this heavy cannot close much more than 340 m plus a worst-case rotation
/// in that window, no matter the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartSampling {
    pub north_min: f64,
    pub north_max: f64,
    pub east_min: f64,
    pub east_max: f64,
    pub min_berth_distance: f64,
    pub max_berth_distance: f64,
    pub min_obstacle_clearance: f64,
    pub max_quay_distance: f64,
    pub max_u: f64,
    pub max_v: f64,
    pub max_r: f64,
}

impl Default for StartSampling {
    fn default() -> Self {
        StartSampling {
            north_min: 60.0,
            north_max: 370.0,
            east_min: -280.0,
            east_max: 60.0,
            min_berth_distance: 80.0,
            max_berth_distance: 340.0,
            min_obstacle_clearance: 50.0,
            max_quay_distance: 395.0,
            max_u: 1.0,
            max_v: 0.1,
            max_r: 0.02,
        }
    }
}

/// Per-feature sampling bounds, also used to normalize features to `[-1, 1]`
/// for the tree and the network teacher. Order follows [`FEATURE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureBounds {
    pub lows: [f64; STATE_DIM],
    pub highs: [f64; STATE_DIM],
}

impl Default for FeatureBounds {
    fn default() -> Self {
        FeatureBounds {
            lows: [-400.0, -400.0, -PI, -2.0, -2.0, -0.2, 0.0, 0.0, -PI],
            highs: [400.0, 400.0, PI, 5.0, 2.0, 0.2, 1.0, 600.0, PI],
        }
    }
}

impl FeatureBounds {
    pub fn validate(&self) -> Result<()> {
        for i in 0..STATE_DIM {
            if !(self.lows[i].is_finite() && self.highs[i].is_finite())
                || self.lows[i] >= self.highs[i]
            {
                return Err(Error::InvalidConfig(format!(
                    "feature bounds for {} must satisfy low < high",
                    FEATURE_NAMES[i]
                )));
            }
        }
        Ok(())
    }
}

/// Affine map between physical features and the normalized `[-1, 1]` cube.
/// Normalization clamps, so out-of-range physical states saturate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    bounds: FeatureBounds,
}

impl Normalizer {
    pub fn new(bounds: FeatureBounds) -> Self {
        Normalizer { bounds }
    }

    pub fn bounds(&self) -> &FeatureBounds {
        &self.bounds
    }

    pub fn normalize(&self, state: &StateVector) -> [f64; STATE_DIM] {
        let raw = state.to_array();
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            let (lo, hi) = (self.bounds.lows[i], self.bounds.highs[i]);
            out[i] = (2.0 * (raw[i] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
        }
        out
    }

    pub fn denormalize(&self, features: &[f64; STATE_DIM]) -> StateVector {
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            let (lo, hi) = (self.bounds.lows[i], self.bounds.highs[i]);
            out[i] = lo + (features[i] + 1.0) / 2.0 * (hi - lo);
        }
        StateVector::from_array(out)
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer::new(FeatureBounds::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Integration step (s).
    pub timestep: f64,
    /// Episode step budget used by default episode drivers.
    pub max_steps: usize,
    pub berth: Pose,
    /// Quay wall segments; 2 to 4 of them forming the berth corner.
    pub quay: Vec<Segment>,
    /// Convex hull footprint in the body frame, (x, y) vertices in order.
    pub footprint: Vec<[f64; 2]>,
    pub dynamics: Dynamics,
    pub thrusters: Thrusters,
    pub tolerances: Tolerances,
    pub speed_limits: SpeedLimits,
    pub start: StartSampling,
    pub feature_bounds: FeatureBounds,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            timestep: 0.5,
            max_steps: 800,
            berth: Pose {
                north: 13.0,
                east: 40.0,
                heading: -FRAC_PI_2,
            },
            quay: vec![
                Segment {
                    n1: 0.0,
                    e1: -300.0,
                    n2: 0.0,
                    e2: 100.0,
                },
                Segment {
                    n1: 0.0,
                    e1: 100.0,
                    n2: 100.0,
                    e2: 100.0,
                },
            ],
            footprint: vec![
                [38.0, 0.0],
                [30.0, 8.0],
                [-38.0, 8.0],
                [-38.0, -8.0],
                [30.0, -8.0],
            ],
            dynamics: Dynamics::default(),
            thrusters: Thrusters::default(),
            tolerances: Tolerances::default(),
            speed_limits: SpeedLimits::default(),
            start: StartSampling::default(),
            feature_bounds: FeatureBounds::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestep > 0.0 && self.timestep.is_finite()) {
            return Err(Error::InvalidConfig("timestep must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be >= 1".into()));
        }
        if self.quay.len() < 2 || self.quay.len() > 4 {
            return Err(Error::InvalidConfig(format!(
                "quay needs 2..=4 segments, got {}",
                self.quay.len()
            )));
        }
        for s in &self.quay {
            let len = ((s.n2 - s.n1).powi(2) + (s.e2 - s.e1).powi(2)).sqrt();
            if !(len > 0.0) {
                return Err(Error::InvalidConfig("quay segment has zero length".into()));
            }
        }
        if self.footprint.len() < 3 {
            return Err(Error::InvalidConfig("footprint needs >= 3 vertices".into()));
        }
        // Strict convexity with consistent winding.
        let k = self.footprint.len();
        let mut sign = 0.0f64;
        for i in 0..k {
            let a = self.footprint[i];
            let b = self.footprint[(i + 1) % k];
            let c = self.footprint[(i + 2) % k];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross == 0.0 {
                return Err(Error::InvalidConfig("footprint has collinear vertices".into()));
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return Err(Error::InvalidConfig("footprint must be convex".into()));
            }
        }
        let d = &self.dynamics;
        for (name, v) in [
            ("mass_u", d.mass_u),
            ("mass_v", d.mass_v),
            ("inertia_z", d.inertia_z),
            ("damp_u", d.damp_u),
            ("damp_v", d.damp_v),
            ("damp_r", d.damp_r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let t = &self.tolerances;
        if !(t.position > 0.0 && t.heading_deg > 0.0 && t.speed > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if !(self.speed_limits.u > 0.0 && self.speed_limits.v > 0.0 && self.speed_limits.r > 0.0) {
            return Err(Error::InvalidConfig("speed limits must be positive".into()));
        }
        self.feature_bounds.validate()?;
        Ok(())
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer::new(self.feature_bounds)
    }
}

/// Reads and validates a TOML env config. Missing keys take defaults.
pub fn load_env_config(path: &Path) -> Result<EnvConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config: EnvConfig = toml::from_str(&text).map_err(|e| Error::Format {
        kind: "env config",
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Serializes a config as TOML, the same schema `load_env_config` reads.
pub fn env_config_toml(config: &EnvConfig) -> String {
    toml::to_string_pretty(config).expect("EnvConfig serializes")
}

// ============================================================================
// Forces
// ============================================================================

/// Generalized force from a physical action: (surge kN, sway kN, yaw kN m).
/// Azimuth thrust `f` at angle `alpha` contributes `(f cos a, f sin a)` at its
/// mount; the tunnel thruster pushes purely sideways at the bow. Moments are
/// the cross products of mount position and force.
pub fn thrust_to_force(physical: &[f64; ACTION_DIM], th: &Thrusters) -> (f64, f64, f64) {
    let (f1, f2, f3) = (physical[0], physical[1], physical[2]);
    let a1 = physical[3].to_radians();
    let a2 = physical[4].to_radians();
    let mounts = [(th.azimuth_x, th.azimuth_y), (th.azimuth_x, -th.azimuth_y)];
    let mut fx = 0.0;
    let mut fy = 0.0;
    let mut mz = 0.0;
    for ((mx, my), (f, a)) in mounts.iter().zip([(f1, a1), (f2, a2)]) {
        let (fxa, fya) = (f * a.cos(), f * a.sin());
        fx += fxa;
        fy += fya;
        mz += mx * fya - my * fxa;
    }
    fy += f3;
    mz += th.tunnel_x * f3;
    (fx, fy, mz)
}

// ============================================================================
// Environment
// ============================================================================

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Events {
    pub contact: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub enum Start {
    At { pose: Pose, velocity: Velocity },
    Seeded(u64),
}

#[derive(Debug, Clone)]
pub struct DockingEnv {
    config: EnvConfig,
    pose: Pose,
    velocity: Velocity,
    in_contact: bool,
    terminated: bool,
}

impl DockingEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let berth = config.berth;
        Ok(DockingEnv {
            config,
            pose: berth,
            velocity: Velocity::default(),
            in_contact: false,
            terminated: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn velocity(&self) -> Velocity {
        self.velocity
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Places the vessel and clears termination. Explicit starts in contact
    /// with the quay are rejected; seeded starts are rejection-sampled from
    /// the configured region and never collide.
    pub fn reset(&mut self, start: Start) -> Result<StateVector> {
        let (pose, velocity) = match start {
            Start::At { pose, velocity } => (pose, velocity),
            Start::Seeded(seed) => self.sample_start(seed)?,
        };
        if self.footprint_in_contact(&pose) {
            return Err(Error::StartInContact);
        }
        self.pose = Pose {
            heading: wrap_angle(pose.heading),
            ..pose
        };
        self.velocity = velocity;
        self.in_contact = false;
        self.terminated = false;
        Ok(self.observe())
    }

    fn sample_start(&self, seed: u64) -> Result<(Pose, Velocity)> {
        use rand::Rng;
        let mut rng = rng::stream(seed, rng::TAG_RESET);
        let s = &self.config.start;
        for _ in 0..10_000 {
            let pose = Pose {
                north: rng.gen_range(s.north_min..=s.north_max),
                east: rng.gen_range(s.east_min..=s.east_max),
                heading: wrap_angle(rng.gen_range(-PI..PI)),
            };
            let to_berth = ((pose.north - self.config.berth.north).powi(2)
                + (pose.east - self.config.berth.east).powi(2))
            .sqrt();
            let d_obs = self.distance_to_quay(pose.north, pose.east);
            if to_berth < s.min_berth_distance
                || to_berth > s.max_berth_distance
                || d_obs < s.min_obstacle_clearance
                || d_obs > s.max_quay_distance
                || self.footprint_in_contact(&pose)
            {
                continue;
            }
            let velocity = Velocity {
                u: rng.gen_range(0.0..=s.max_u),
                v: rng.gen_range(-s.max_v..=s.max_v),
                r: rng.gen_range(-s.max_r..=s.max_r),
            };
            return Ok((pose, velocity));
        }
        Err(Error::StartSampling(10_000))
    }

    /// Advances one timestep with a normalized action. Scaling, force
    /// mapping, integration, collision detection, and the success test run in
    /// that order. Errors once the episode was terminated by contact.
    pub fn step(&mut self, action: &[f64; ACTION_DIM]) -> Result<(StateVector, Events)> {
        if self.terminated {
            return Err(Error::Terminated);
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let physical = scale_action(action);
        let (fx, fy, mz) = thrust_to_force(&physical, &self.config.thrusters);
        let d = &self.config.dynamics;
        let dt = self.config.timestep;
        let lim = &self.config.speed_limits;

        // Semi-implicit Euler: velocities first (forces in kN -> N) ...
        let vel = &mut self.velocity;
        vel.u += dt * (1.0e3 * fx - d.damp_u * vel.u) / d.mass_u;
        vel.v += dt * (1.0e3 * fy - d.damp_v * vel.v) / d.mass_v;
        vel.r += dt * (1.0e3 * mz - d.damp_r * vel.r) / d.inertia_z;
        vel.u = vel.u.clamp(-lim.u, lim.u);
        vel.v = vel.v.clamp(-lim.v, lim.v);
        vel.r = vel.r.clamp(-lim.r, lim.r);

        // ... then the pose with the updated velocity.
        let (c, s) = (self.pose.heading.cos(), self.pose.heading.sin());
        self.pose.north += dt * (vel.u * c - vel.v * s);
        self.pose.east += dt * (vel.u * s + vel.v * c);
        self.pose.heading = wrap_angle(self.pose.heading + dt * vel.r);

        let mut events = Events::default();
        if self.footprint_in_contact(&self.pose) {
            self.in_contact = true;
            self.terminated = true;
            events.contact = true;
        }
        let state = self.observe();
        if !events.contact && self.is_success(&state) {
            events.success = true;
        }
        Ok((state, events))
    }

    /// Success test on an observation: inside the position, heading, and
    /// planar-speed tolerances.
    pub fn is_success(&self, state: &StateVector) -> bool {
        let t = &self.config.tolerances;
        let pos = (state.x_rel * state.x_rel + state.y_rel * state.y_rel).sqrt();
        let speed = (state.u * state.u + state.v * state.v).sqrt();
        pos <= t.position && state.psi_err.abs() <= t.heading_deg.to_radians() && speed <= t.speed
    }

    pub fn observe(&self) -> StateVector {
        let b = &self.config.berth;
        let dn = b.north - self.pose.north;
        let de = b.east - self.pose.east;
        let (c, s) = (self.pose.heading.cos(), self.pose.heading.sin());
        let (d_obs, psi_obs) = self.closest_quay_point();
        StateVector {
            x_rel: c * dn + s * de,
            y_rel: -s * dn + c * de,
            psi_err: wrap_angle(b.heading - self.pose.heading),
            u: self.velocity.u,
            v: self.velocity.v,
            r: self.velocity.r,
            contact: if self.in_contact { 1.0 } else { 0.0 },
            d_obs,
            psi_obs,
        }
    }

    fn distance_to_quay(&self, north: f64, east: f64) -> f64 {
        self.config
            .quay
            .iter()
            .map(|seg| {
                let (pn, pe) = closest_point_on_segment(north, east, seg);
                ((north - pn).powi(2) + (east - pe).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Range and body bearing from the vessel origin to the closest point on
    /// any quay segment.
    fn closest_quay_point(&self) -> (f64, f64) {
        let mut best = f64::INFINITY;
        let mut best_point = (0.0, 0.0);
        for seg in &self.config.quay {
            let (pn, pe) = closest_point_on_segment(self.pose.north, self.pose.east, seg);
            let dist = ((self.pose.north - pn).powi(2) + (self.pose.east - pe).powi(2)).sqrt();
            if dist < best {
                best = dist;
                best_point = (pn, pe);
            }
        }
        let dn = best_point.0 - self.pose.north;
        let de = best_point.1 - self.pose.east;
        let bearing = wrap_angle((de).atan2(dn) - self.pose.heading);
        (best, bearing)
    }

    fn footprint_world(&self, pose: &Pose) -> Vec<(f64, f64)> {
        let (c, s) = (pose.heading.cos(), pose.heading.sin());
        self.config
            .footprint
            .iter()
            .map(|[bx, by]| (pose.north + c * bx - s * by, pose.east + s * bx + c * by))
            .collect()
    }

    fn footprint_in_contact(&self, pose: &Pose) -> bool {
        let poly = self.footprint_world(pose);
        self.config
            .quay
            .iter()
            .any(|seg| polygon_intersects_segment(&poly, seg))
    }
}

// ============================================================================
// Geometry helpers
// ============================================================================

fn closest_point_on_segment(pn: f64, pe: f64, seg: &Segment) -> (f64, f64) {
    let dn = seg.n2 - seg.n1;
    let de = seg.e2 - seg.e1;
    let len2 = dn * dn + de * de;
    let t = (((pn - seg.n1) * dn + (pe - seg.e1) * de) / len2).clamp(0.0, 1.0);
    (seg.n1 + t * dn, seg.e1 + t * de)
}

fn orient(ax: f64, ay: f64, bx: f64, by: f64, cx: f64, cy: f64) -> f64 {
    (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
}

fn on_segment(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> bool {
    px >= ax.min(bx) && px <= ax.max(bx) && py >= ay.min(by) && py <= ay.max(by)
}

fn segments_intersect(
    a1: (f64, f64),
    a2: (f64, f64),
    b1: (f64, f64),
    b2: (f64, f64),
) -> bool {
    let d1 = orient(b1.0, b1.1, b2.0, b2.1, a1.0, a1.1);
    let d2 = orient(b1.0, b1.1, b2.0, b2.1, a2.0, a2.1);
    let d3 = orient(a1.0, a1.1, a2.0, a2.1, b1.0, b1.1);
    let d4 = orient(a1.0, a1.1, a2.0, a2.1, b2.0, b2.1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b1.0, b1.1, b2.0, b2.1, a1.0, a1.1))
        || (d2 == 0.0 && on_segment(b1.0, b1.1, b2.0, b2.1, a2.0, a2.1))
        || (d3 == 0.0 && on_segment(a1.0, a1.1, a2.0, a2.1, b1.0, b1.1))
        || (d4 == 0.0 && on_segment(a1.0, a1.1, a2.0, a2.1, b2.0, b2.1))
}

fn point_in_convex_polygon(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let k = poly.len();
    let mut sign = 0.0f64;
    for i in 0..k {
        let a = poly[i];
        let b = poly[(i + 1) % k];
        let cross = orient(a.0, a.1, b.0, b.1, px, py);
        if cross == 0.0 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

fn polygon_intersects_segment(poly: &[(f64, f64)], seg: &Segment) -> bool {
    let s1 = (seg.n1, seg.e1);
    let s2 = (seg.n2, seg.e2);
    let k = poly.len();
    for i in 0..k {
        if segments_intersect(poly[i], poly[(i + 1) % k], s1, s2) {
            return true;
        }
    }
    point_in_convex_polygon(poly, s1.0, s1.1) || point_in_convex_polygon(poly, s2.0, s2.1)
}

// ============================================================================
// Episodes
// ============================================================================

/// Anything that maps an observation to a normalized action in `[-1, 1]^5`.
pub trait Controller: Sync {
    fn act(&self, state: &StateVector) -> [f64; ACTION_DIM];
}

impl<F> Controller for F
where
    F: Fn(&StateVector) -> [f64; ACTION_DIM] + Sync,
{
    fn act(&self, state: &StateVector) -> [f64; ACTION_DIM] {
        self(state)
    }
}

/// Tree-as-controller: normalizes the observation and predicts a normalized
/// action, exactly the input path the tree was trained on.
pub fn tree_controller<'a>(
    tree: &'a Tree,
    normalizer: &'a Normalizer,
) -> impl Controller + 'a {
    move |state: &StateVector| {
        let mut out = [0.0; ACTION_DIM];
        tree.predict_into(&normalizer.normalize(state), &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Contact,
    Timeout,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Success => "Success",
            Outcome::Contact => "Contact",
            Outcome::Timeout => "Timeout",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajStep {
    pub pose: Pose,
    pub state: StateVector,
    /// Normalized action the controller chose at this state. For the terminal
    /// row of a Success/Contact episode it is the would-be response, never
    /// applied.
    pub action: [f64; ACTION_DIM],
    pub explanation: Option<crate::tree::Explanation>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
    pub outcome: Outcome,
}

/// Tree explainer attached to an episode: the observation is normalized and
/// explained alongside whatever controller is driving.
#[derive(Clone, Copy)]
pub struct ExplainHook<'a> {
    pub tree: &'a Tree,
    pub normalizer: &'a Normalizer,
}

/// Drives `controller` until Success, Contact, or `max_steps`. Records one
/// row per decision; Success/Contact episodes get one extra terminal row so
/// the outcome is visible in the final state (contact flag, berth tolerance).
pub fn run_episode(
    env: &mut DockingEnv,
    controller: &dyn Controller,
    max_steps: usize,
    explainer: Option<ExplainHook<'_>>,
) -> Result<Trajectory> {
    let mut steps = Vec::new();
    let mut state = env.observe();
    let explain = |state: &StateVector| {
        explainer.map(|h| h.tree.explain(&h.normalizer.normalize(state)))
    };
    for _ in 0..max_steps {
        let action = controller.act(&state);
        steps.push(TrajStep {
            pose: env.pose(),
            state,
            action,
            explanation: explain(&state),
        });
        let (next, events) = env.step(&action)?;
        state = next;
        if events.contact || events.success {
            let terminal_action = controller.act(&state);
            steps.push(TrajStep {
                pose: env.pose(),
                state,
                action: terminal_action,
                explanation: explain(&state),
            });
            let outcome = if events.contact {
                Outcome::Contact
            } else {
                Outcome::Success
            };
            return Ok(Trajectory { steps, outcome });
        }
    }
    Ok(Trajectory {
        steps,
        outcome: Outcome::Timeout,
    })
}

/// Writes a trajectory as commented CSV: step index, world pose, the 9
/// observation features, normalized and physical actions, flags, and (when
/// explanations were recorded) the leaf id plus 45 signed attribution
/// columns in `att_<action>_<feature>` order.
pub fn write_trajectory(traj: &Trajectory, env: &DockingEnv, path: &Path) -> Result<()> {
    let with_attr = traj.steps.iter().any(|s| s.explanation.is_some());
    let mut out = String::new();
    out.push_str("# lmtree trajectory v1\n");
    out.push_str(&format!("# outcome {}\n", traj.outcome.as_str()));
    out.push_str("step,north,east,heading");
    for name in FEATURE_NAMES {
        out.push_str(&format!(",{name}"));
    }
    for name in ACTION_NAMES {
        out.push_str(&format!(",{name}_cmd"));
    }
    for (i, name) in ACTION_NAMES.iter().enumerate() {
        let unit = if i < 3 { "kn" } else { "deg" };
        out.push_str(&format!(",{name}_{unit}"));
    }
    out.push_str(",success,contact");
    if with_attr {
        out.push_str(",leaf");
        for a in ACTION_NAMES {
            for f in FEATURE_NAMES {
                out.push_str(&format!(",att_{a}_{f}"));
            }
        }
    }
    out.push('\n');
    let fmt = crate::tree::fmt_f64;
    for (i, step) in traj.steps.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}",
            fmt(step.pose.north),
            fmt(step.pose.east),
            fmt(step.pose.heading)
        ));
        for v in step.state.to_array() {
            out.push_str(&format!(",{}", fmt(v)));
        }
        for v in step.action {
            out.push_str(&format!(",{}", fmt(v)));
        }
        for v in scale_action(&step.action) {
            out.push_str(&format!(",{}", fmt(v)));
        }
        let success = env.is_success(&step.state) && step.state.contact == 0.0;
        out.push_str(&format!(
            ",{},{}",
            u8::from(success),
            if step.state.contact > 0.0 { 1 } else { 0 }
        ));
        if with_attr {
            match &step.explanation {
                Some(e) => {
                    out.push_str(&format!(",{}", e.leaf));
                    for o in 0..ACTION_DIM {
                        for f in 0..STATE_DIM {
                            out.push_str(&format!(",{}", fmt(e.attribution.values[(o, f)])));
                        }
                    }
                }
                None => {
                    out.push(',');
                    out.push_str(&",".repeat(ACTION_DIM * STATE_DIM));
                }
            }
        }
        out.push('\n');
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
