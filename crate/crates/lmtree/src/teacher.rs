//! Teacher policies the tree is distilled from: a feed-forward network loaded
//! from a weights file, or a scripted docking controller that needs no
//! training. Both map an observation to a normalized action in `[-1, 1]^5`.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::env::{unscale_action, Controller, Normalizer, StateVector, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::rng;
use crate::tree::fmt_f64;

// ============================================================================
// Feed-forward network
// ============================================================================

/// A dense feed-forward network with ReLU hidden layers and a tanh output
/// layer, so outputs always land strictly inside `(-1, 1)`. Layer `i` maps a
/// vector through `weights * x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl MlpPolicy {
    /// Builds a network from `(weights, bias)` pairs, validating that the
    /// layer dimensions chain and everything is finite.
    pub fn new(layers: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("network needs at least one layer".into()));
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} has an empty weight matrix"
                )));
            }
            if w.nrows() != b.len() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i}: {} weight rows but {} bias entries",
                    w.nrows(),
                    b.len()
                )));
            }
            if i > 0 && w.ncols() != layers[i - 1].0.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    w.ncols(),
                    i - 1,
                    layers[i - 1].0.nrows()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} weights")));
            }
        }
        Ok(MlpPolicy { layers })
    }

    /// An untrained network with Xavier-uniform weights, handy for exercising
    /// the file format and the distillation pipeline without a training run.
    pub fn random(seed: u64, input: usize, hidden: &[usize], output: usize) -> Self {
        use rand::Rng;
        let sizes: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect();
        let mut layers = Vec::new();
        for i in 0..sizes.len() - 1 {
            let (nin, nout) = (sizes[i], sizes[i + 1]);
            let mut r = rng::stream3(seed, rng::TAG_MLP, i as u64);
            let scale = (6.0 / (nin + nout) as f64).sqrt();
            let w = DMatrix::from_fn(nout, nin, |_, _| r.gen_range(-scale..=scale));
            let b = DVector::from_fn(nout, |_, _| r.gen_range(-0.1..=0.1));
            layers.push((w, b));
        }
        MlpPolicy::new(layers).expect("generated layers chain")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.nrows()
    }

    pub fn layers(&self) -> &[(DMatrix<f64>, DVector<f64>)] {
        &self.layers
    }

    /// Forward pass: ReLU after every hidden layer, tanh on the output layer.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut v = DVector::from_column_slice(input);
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            v = w * v + b;
            if i < last {
                v.apply(|x| *x = x.max(0.0));
            } else {
                v.apply(|x| *x = x.tanh());
            }
        }
        Ok(v.iter().copied().collect())
    }
}

const MLP_MAGIC: &str = "lmtree mlp v1";

/// Writes the network in the plain-text `lmtree mlp v1` format: a header
/// naming dimensions and activations, then each layer as its weight rows
/// followed by a `bias` line, and a closing `end`.
pub fn save_mlp(policy: &MlpPolicy, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MLP_MAGIC);
    out.push('\n');
    out.push_str(&format!("input {}\n", policy.input_dim()));
    out.push_str(&format!("output {}\n", policy.output_dim()));
    out.push_str("hidden_activation relu\n");
    out.push_str("output_activation tanh\n");
    out.push_str(&format!("layers {}\n", policy.layers.len()));
    for (i, (w, b)) in policy.layers.iter().enumerate() {
        out.push_str(&format!("layer {} {} {}\n", i, w.nrows(), w.ncols()));
        for row in 0..w.nrows() {
            let line: Vec<String> = (0..w.ncols()).map(|c| fmt_f64(w[(row, c)])).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out.push_str("bias ");
        let line: Vec<String> = b.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads an `lmtree mlp v1` weights file and enforces the docking teacher
/// contract: 9 inputs, 5 outputs, ReLU hidden layers, tanh output.
pub fn load_mlp(path: &Path) -> Result<MlpPolicy> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_mlp(&text, &path.display().to_string())
}

fn parse_mlp(text: &str, path: &str) -> Result<MlpPolicy> {
    let bad = |detail: String| Error::Format {
        kind: "mlp weights",
        path: path.to_string(),
        detail,
    };
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or("");
    if magic != MLP_MAGIC {
        return Err(Error::Version {
            kind: "mlp weights",
            path: path.to_string(),
            found: magic.to_string(),
            expected: MLP_MAGIC.to_string(),
        });
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing {name} line")))?;
        line.strip_prefix(name)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| bad(format!("expected '{name} ...', got '{line}'")))
    };
    let input: usize = field("input")?
        .parse()
        .map_err(|_| bad("input count is not an integer".into()))?;
    let output: usize = field("output")?
        .parse()
        .map_err(|_| bad("output count is not an integer".into()))?;
    let hidden_act = field("hidden_activation")?;
    if hidden_act != "relu" {
        return Err(Error::UnsupportedActivation(hidden_act));
    }
    let output_act = field("output_activation")?;
    if output_act != "tanh" {
        return Err(Error::UnsupportedActivation(output_act));
    }
    let n_layers: usize = field("layers")?
        .parse()
        .map_err(|_| bad("layer count is not an integer".into()))?;
    if n_layers == 0 {
        return Err(bad("layer count must be >= 1".into()));
    }

    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let header = lines
            .next()
            .ok_or_else(|| bad(format!("missing header for layer {i}")))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "layer" {
            return Err(bad(format!("expected 'layer {i} rows cols', got '{header}'")));
        }
        let idx: usize = toks[1].parse().map_err(|_| bad("bad layer index".into()))?;
        if idx != i {
            return Err(bad(format!("layer {idx} out of order, expected {i}")));
        }
        let rows: usize = toks[2].parse().map_err(|_| bad("bad row count".into()))?;
        let cols: usize = toks[3].parse().map_err(|_| bad("bad column count".into()))?;
        if rows == 0 || cols == 0 {
            return Err(bad(format!("layer {i} has zero dimension")));
        }
        let mut w = DMatrix::zeros(rows, cols);
        for row in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("layer {i} truncated at weight row {row}")))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "{path}: layer {i} row {row} has {} values, expected {cols}",
                    vals.len()
                )));
            }
            for (c, tok) in vals.iter().enumerate() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| bad(format!("layer {i} row {row}: bad float '{tok}'")))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{path}: layer {i} weights")));
                }
                w[(row, c)] = v;
            }
        }
        let bias_line = lines
            .next()
            .ok_or_else(|| bad(format!("layer {i} missing bias line")))?;
        let rest = bias_line
            .strip_prefix("bias")
            .ok_or_else(|| bad(format!("expected 'bias ...' after layer {i} rows")))?;
        let vals: Vec<&str> = rest.split_whitespace().collect();
        if vals.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "{path}: layer {i} bias has {} values, expected {rows}",
                vals.len()
            )));
        }
        let mut b = DVector::zeros(rows);
        for (r, tok) in vals.iter().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| bad(format!("layer {i} bias: bad float '{tok}'")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{path}: layer {i} bias")));
            }
            b[r] = v;
        }
        layers.push((w, b));
    }
    match lines.next() {
        Some("end") => {}
        other => return Err(bad(format!("expected 'end', got {other:?}"))),
    }

    let policy = MlpPolicy::new(layers)?;
    if policy.input_dim() != input || policy.output_dim() != output {
        return Err(Error::DimensionMismatch(format!(
            "{path}: declared {input}->{output} but layers give {}->{}",
            policy.input_dim(),
            policy.output_dim()
        )));
    }
    if input != STATE_DIM || output != ACTION_DIM {
        return Err(Error::DimensionMismatch(format!(
            "{path}: docking teacher must map {STATE_DIM} features to {ACTION_DIM} actions, file has {input}->{output}"
        )));
    }
    Ok(policy)
}

// ============================================================================
// Scripted controller
// ============================================================================

/// Hand-written docking controller used as the training-free teacher.
///
/// The approach runs through a fixed pre-dock waypoint offset from the berth
/// along the berth frame's +y axis (open water). Far out, the vessel steers
/// toward that waypoint with a braking-curve speed plan sized to the reverse
/// thrust actually available, putting the bow or the stern on the travel
/// bearing -- whichever turn-plus-transit is quicker -- and its heading
/// target slides to the berth heading as it closes. Inside the blend radius
/// a body-frame PD takes over and slides the vessel sideways onto the spot.
///
/// Thrust allocation blends two fixed-angle geometries. Cruise trim holds
/// both azimuths at 0 deg: shared thrust carries surge at full authority,
/// the differential and the tunnel split the moment. The duty split points
/// thruster 1 at -90 deg to carry sway plus its share of the yaw couple
/// while thruster 2 carries surge -- the only trim that turns hard while
/// braking -- and owns the berth neighborhood plus any moment-heavy moment
/// far out. Each geometry's thrusts are affine in the demands between
/// clamps, and the blend weight is a smooth function of berth distance and
/// demand mix, so no action component ever jumps. That shape is deliberate:
/// a surrogate limited to piecewise-affine maps reproduces affine laws
/// exactly and tracks smooth blends closely, while a pointed-thrust-vector
/// allocation would bury an atan2 angle flip in the action space and the
/// surrogate would average across it. Velocity feedforward terms are tuned
/// to the default hull's damping so tracked speeds have no steady-state
/// sag.
///
/// The controller is a pure function of the observation; on contact it
/// commands zero thrust everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedController {
    /// Usable deceleration for the approach speed plan (m/s^2), the cruise
    /// speed cap (m/s), and the speed still carried at the waypoint handoff
    /// (m/s).
    pub brake_decel: f64,
    pub approach_speed_cap: f64,
    pub handoff_speed: f64,
    /// Pre-dock waypoint offset from the berth toward open water (m), plus a
    /// forward shift along the berth heading that keeps the rotation spot
    /// clear of the quay corner.
    pub waypoint_offset: f64,
    pub waypoint_forward: f64,
    /// Heading target blend: beyond this berth distance (m, logistic width)
    /// the vessel points along its travel bearing, inside it at the berth
    /// heading; the width is generous so the swing overlaps the last leg of
    /// the transit instead of stalling after it.
    pub heading_align_distance: f64,
    pub heading_align_width: f64,
    /// Near-mode approach profile: usable deceleration (m/s^2) behind the
    /// offset-to-speed braking curve, the corner speed (m/s) that rounds the
    /// curve into a finite slope at the origin, and per-axis caps (m/s).
    pub near_brake_decel: f64,
    pub near_soft_speed: f64,
    pub near_u_cap: f64,
    pub near_v_cap: f64,
    /// Extra docking speed (m/s, saturating over dock_bias_scale meters) so
    /// the final approach does not decay asymptotically.
    pub dock_bias: f64,
    pub dock_bias_scale: f64,
    /// Force per unit velocity error (kN s/m): tracking gain, a stiffer gain
    /// when the error opposes the current velocity (braking), and
    /// feedforward per unit desired velocity (kN s/m). The brake gains need
    /// to be stiff: a descending speed plan drags a steady mass*decel error
    /// through them, and a soft gain parks that error on top of the arrival
    /// speed.
    pub surge_gain: f64,
    pub surge_brake_gain: f64,
    pub surge_ff: f64,
    pub sway_gain: f64,
    pub sway_brake_gain: f64,
    pub sway_ff: f64,
    /// Caps on the far-mode beam and astern speed components (m/s). Far-mode
    /// crabbing rides the tunnel alone, whose 50 kN tops out near 0.42 m/s,
    /// so the bow still does the long hauls; backing has thrust to spare
    /// well above its cap, which just keeps stern-first legs slow enough
    /// that the approach plan can always brake them off.
    pub far_sway_cap: f64,
    pub far_reverse_cap: f64,
    /// Route-choice model: achievable mean yaw rate including spin-up
    /// (rad/s) and effective bow-first transit speed including acceleration
    /// (m/s). The controller heads stern-first whenever turning the stern
    /// onto the travel bearing and backing beats turning the bow and driving
    /// forward under this timing -- without the option, a berth far astern
    /// costs a quarter of the step budget in a turnaround that ends exactly
    /// where it started.
    pub route_turn_rate: f64,
    pub route_forward_speed: f64,
    /// Beam drive fades while the hull yaws faster than this (rad/s).
    /// Body-locked sway under rotation sweeps the velocity vector in a
    /// circle, so an un-gated beam demand orbits the aim instead of closing
    /// on it.
    pub beam_yaw_gate: f64,
    /// Moment per radian of heading error (kN m/rad), rate damping (kN m s),
    /// and the commanded-moment cap (kN m).
    pub yaw_gain: f64,
    pub yaw_damping: f64,
    pub moment_cap: f64,
    /// Allocation-geometry mix: the surge demand (kN) that counts as heavily
    /// as steer_mix times its value in moment demand (kN m) when choosing
    /// between cruise trim and the duty split, and the moment level below
    /// which cruise never cedes the azimuths.
    pub steer_mix: f64,
    pub steer_floor: f64,
    /// Near/far force blend midpoint (m) and logistic width (m).
    pub blend_distance: f64,
    pub blend_width: f64,
    /// Commanded force below which a thruster parks at zero (kN).
    pub deadband: f64,
    /// Thruster levers (m): stern azimuth pair and bow tunnel, plus the
    /// lateral mount offset of each azimuth from the centerline.
    pub stern_lever: f64,
    pub bow_lever: f64,
    pub azimuth_spread: f64,
}

impl Default for ScriptedController {
    fn default() -> Self {
        ScriptedController {
            brake_decel: 0.026,
            approach_speed_cap: 4.0,
            handoff_speed: 0.8,
            waypoint_offset: 50.0,
            waypoint_forward: 10.0,
            heading_align_distance: 125.0,
            heading_align_width: 22.0,
            near_brake_decel: 0.010,
            near_soft_speed: 0.12,
            near_u_cap: 0.8,
            near_v_cap: 0.8,
            dock_bias: 0.07,
            dock_bias_scale: 2.0,
            surge_gain: 200.0,
            surge_brake_gain: 600.0,
            surge_ff: 50.0,
            sway_gain: 400.0,
            sway_brake_gain: 1000.0,
            sway_ff: 120.0,
            far_sway_cap: 0.42,
            far_reverse_cap: 1.5,
            route_turn_rate: 0.022,
            route_forward_speed: 2.3,
            beam_yaw_gate: 0.008,
            yaw_gain: 4000.0,
            yaw_damping: 50_000.0,
            moment_cap: 2750.0,
            steer_mix: 10.0,
            steer_floor: 500.0,
            blend_distance: 75.0,
            blend_width: 10.0,
            deadband: 0.5,
            stern_lever: 30.0,
            bow_lever: 25.0,
            azimuth_spread: 8.0,
        }
    }
}

impl ScriptedController {
    /// Normalized action for an observation. Total on any finite input.
    pub fn act(&self, s: &StateVector) -> [f64; ACTION_DIM] {
        if s.contact >= 0.5 {
            return unscale_action(&[0.0; ACTION_DIM]);
        }
        let dist = (s.x_rel * s.x_rel + s.y_rel * s.y_rel).sqrt();

        // Fixed pre-dock waypoint: berth frame (waypoint_forward,
        // waypoint_offset), mapped into the body frame through the heading
        // error.
        let (sp, cp) = (s.psi_err.sin(), s.psi_err.cos());
        let wx = s.x_rel + self.waypoint_forward * cp - self.waypoint_offset * sp;
        let wy = s.y_rel + self.waypoint_forward * sp + self.waypoint_offset * cp;
        let dw = (wx * wx + wy * wy).sqrt();

        // Approach corridor: far out, steer at an aim point lifted above the
        // waypoint along the berth frame's +y (open water) axis. The lift
        // shrinks to zero over the final stretch, so every path funnels in
        // from open water north of the berth instead of arriving along a
        // wall, and approach overshoot lands in clear water.
        let lift = (0.5 * (dw - 20.0).max(0.0)).min(50.0);
        let beta = if dw > 1e-9 {
            (wy + lift * cp).atan2(wx - lift * sp)
        } else {
            s.psi_err
        };

        // Stiffer response when the demand opposes the current velocity, so
        // braking bites at full reverse authority instead of being diluted by
        // the tracking feedforward.
        let axis = |des: f64, cur: f64, gain: f64, brake: f64, ff: f64| {
            let k = if (des - cur) * cur < 0.0 { brake } else { gain };
            k * (des - cur) + ff * des
        };

        // Far mode: braking-curve speed toward the aim point, sized so the
        // reverse thrust can actually hold the plan, and split into bow and
        // beam components so progress never waits on pointing at the aim --
        // a bow-only plan deadlocks whenever the aim sits abeam, and backing
        // toward an astern aim closes distance that would otherwise be spent
        // rotating in place. The curve bottoms out at the handoff speed
        // instead of stalling there.
        let u_plan = (self.handoff_speed * self.handoff_speed + 2.0 * self.brake_decel * dw)
            .sqrt()
            .min(self.approach_speed_cap);
        let u_des_far = (u_plan * beta.cos()).max(-self.far_reverse_cap);
        let spin = 1.0 / (1.0 + (s.r / self.beam_yaw_gate).powi(2));
        let v_des_far =
            (u_plan * beta.sin()).clamp(-self.far_sway_cap, self.far_sway_cap) * spin;
        let fx_far = axis(u_des_far, s.u, self.surge_gain, self.surge_brake_gain, self.surge_ff);
        let fy_far = axis(v_des_far, s.v, self.sway_gain, self.sway_brake_gain, self.sway_ff);

        // Near mode: creep onto the berth in the body frame along a braking-
        // curve speed profile sized so shedding it never demands more than
        // the sway authority actually available -- a steeper (e.g. linear)
        // demand outruns the brakes, and the vessel sails through the berth
        // and hunts. The curve is rounded to a finite slope at the origin,
        // plus a small saturating bias so the last meter does not decay
        // asymptotically. Translation is gated on alignment so a badly
        // misaligned vessel stops and rotates instead of sweeping its bow
        // across the quay; the surge gate is squared (bow-first motion is
        // what hits walls) while sway only needs the first power, since a
        // roughly parallel slide is harmless and letting it start early
        // overlaps the descent with the rotation.
        let c = s.psi_err.cos().max(0.0);
        let creep = |offset: f64, cap: f64, gate: f64| {
            let h = self.near_soft_speed;
            let curve = (2.0 * self.near_brake_decel * offset.abs() + h * h).sqrt() - h;
            let des = curve * offset.signum()
                + self.dock_bias * (offset / self.dock_bias_scale).tanh();
            des.clamp(-cap, cap) * gate
        };
        let u_des = creep(s.x_rel, self.near_u_cap, c * c);
        let v_des = creep(s.y_rel, self.near_v_cap, c);
        let fx_near = axis(u_des, s.u, self.surge_gain, self.surge_brake_gain, self.surge_ff);
        let fy_near = axis(v_des, s.v, self.sway_gain, self.sway_brake_gain, self.sway_ff);

        let w = 1.0 / (1.0 + ((dist - self.blend_distance) / self.blend_width).exp());

        // Course: point the bow or the stern along the travel bearing,
        // whichever entry turn plus transit finishes the leg sooner. The
        // swing still owed to the berth heading on arrival is deliberately
        // not charged: most of it overlaps braking inside the align ring
        // either way. Drive demands are heading-agnostic -- once the stern
        // settles onto the bearing, cos(beta) goes to -1 and the same plan
        // backs the hull in -- so only the heading target flips.
        let back = crate::env::wrap_angle(beta + std::f64::consts::PI);
        let t_bow = beta.abs() / self.route_turn_rate + dw / self.route_forward_speed;
        let t_stern = back.abs() / self.route_turn_rate + dw / self.far_reverse_cap;
        let course = if t_stern < t_bow { back } else { beta };

        // Heading target: travel course far out, berth heading close in.
        // The blend walks the short arc between the two angles and the result
        // is re-wrapped -- without the wrap, a target just past the +-pi seam
        // hands the PD a +-2pi-inflated error and the vessel pirouettes the
        // long way around instead of turning back.
        let gw = 1.0
            / (1.0 + (-(dist - self.heading_align_distance) / self.heading_align_width).exp());
        let g = (1.0 - w) * gw;
        let e_head = crate::env::wrap_angle(
            course + (1.0 - g) * crate::env::wrap_angle(s.psi_err - course),
        );
        let mz = (self.yaw_gain * e_head - self.yaw_damping * s.r)
            .clamp(-self.moment_cap, self.moment_cap);
        let fx = w * fx_near + (1.0 - w) * fx_far;
        let fy = w * fy_near + (1.0 - w) * fy_far;
        let park = |f: f64| if f.abs() < self.deadband { 0.0 } else { f };

        // Duty-split allocation: thruster 2 carries surge at 0 deg; thruster
        // 1 carries sway and its share of the yaw couple at -90 deg, where
        // its moment adds to the tunnel's; the solve below inverts forces
        // (f2, -f1 + f3) and moment (stern*f1 + spread*f2 + bow*f3) for the
        // demands. The tunnel clamp yields sway, never moment -- heading
        // errors swing the hull into walls. Affine in the demands, and the
        // only geometry that turns hard while braking, so it also serves
        // moment-heavy moments far out; its weakness is cruise (surge tops
        // out at one thruster).
        let f2_duty = park(fx.clamp(-70.0, 100.0));
        let couple = mz - self.azimuth_spread * f2_duty;
        let f1_raw = (couple - self.bow_lever * fy) / (self.stern_lever + self.bow_lever);
        let f3_duty = (fy + f1_raw).clamp(-50.0, 50.0);
        let f1_duty = ((couple - self.bow_lever * f3_duty) / self.stern_lever).clamp(-70.0, 100.0);
        let f1_duty = park(f1_duty);
        let f3_duty = park(f3_duty);

        // Cruise allocation: both azimuths hold 0 deg; their shared thrust
        // carries surge at full authority, their differential and the tunnel
        // split the moment, the tunnel also crabs. Exact affine solve when
        // nothing clamps; on saturation the tunnel trades beam for moment
        // and surge keeps only the headroom the differential leaves.
        // Differential steering keeps its sign under reverse thrust, so the
        // map stays continuous where a pointed-thrust-vector allocation
        // would fold an atan2 flip into the action space for a piecewise
        // surrogate to average across.
        let f3_raw = fy.clamp(-50.0, 50.0);
        let d_split = ((mz - self.bow_lever * f3_raw) / (2.0 * self.azimuth_spread))
            .clamp(-70.0, 70.0);
        let residual = mz - self.bow_lever * f3_raw - 2.0 * self.azimuth_spread * d_split;
        let f3_cruise = park((f3_raw + residual / self.bow_lever).clamp(-50.0, 50.0));
        let shared = (fx / 2.0).clamp(-70.0 + d_split.abs(), 100.0 - d_split.abs());
        let f1_cruise = park((shared - d_split).clamp(-70.0, 100.0));
        let f2_cruise = park((shared + d_split).clamp(-70.0, 100.0));

        // Geometry weight: duty split near the berth, and far out whenever
        // the demand mix is moment-heavy (entry turns, the align swing --
        // exactly where cruise trim would starve either the moment or the
        // brake). The mix term is a smooth rational, so the azimuth command
        // sweeps continuously between the two geometries instead of
        // snapping.
        let mu = mz * mz
            / (mz * mz + (self.steer_mix * fx).powi(2) + self.steer_floor * self.steer_floor);
        let duty = w + (1.0 - w) * mu;
        let f1 = (duty * f1_duty + (1.0 - duty) * f1_cruise).clamp(-70.0, 100.0);
        let f2 = (duty * f2_duty + (1.0 - duty) * f2_cruise).clamp(-70.0, 100.0);
        let f3 = (duty * f3_duty + (1.0 - duty) * f3_cruise).clamp(-50.0, 50.0);
        let a1 = (duty * -90.0).clamp(-90.0, 90.0);
        let a2 = 0.0;
        unscale_action(&[f1, f2, f3, a1, a2])
    }
}

impl Controller for ScriptedController {
    fn act(&self, state: &StateVector) -> [f64; ACTION_DIM] {
        ScriptedController::act(self, state)
    }
}

// ============================================================================
// Teacher policy
// ============================================================================

/// The policy labels are distilled from. The network variant normalizes the
/// observation with the same bounds the tree uses, so both see identical
/// inputs.
#[derive(Clone)]
pub enum TeacherPolicy {
    Scripted(ScriptedController),
    Mlp {
        policy: Arc<MlpPolicy>,
        normalizer: Normalizer,
    },
    Custom(Arc<dyn Fn(&StateVector) -> [f64; ACTION_DIM] + Send + Sync>),
}

impl TeacherPolicy {
    pub fn scripted() -> Self {
        TeacherPolicy::Scripted(ScriptedController::default())
    }

    /// Wraps a 9-in 5-out network. Errors if the dimensions are wrong.
    pub fn mlp(policy: MlpPolicy, normalizer: Normalizer) -> Result<Self> {
        if policy.input_dim() != STATE_DIM || policy.output_dim() != ACTION_DIM {
            return Err(Error::DimensionMismatch(format!(
                "teacher network must map {STATE_DIM} features to {ACTION_DIM} actions, got {}->{}",
                policy.input_dim(),
                policy.output_dim()
            )));
        }
        Ok(TeacherPolicy::Mlp {
            policy: Arc::new(policy),
            normalizer,
        })
    }

    pub fn describe(&self) -> String {
        match self {
            TeacherPolicy::Scripted(_) => "scripted".into(),
            TeacherPolicy::Mlp { policy, .. } => {
                let dims: Vec<String> = std::iter::once(policy.input_dim())
                    .chain(policy.layers().iter().map(|(w, _)| w.nrows()))
                    .map(|d| d.to_string())
                    .collect();
                format!("mlp {}", dims.join("-"))
            }
            TeacherPolicy::Custom(_) => "custom".into(),
        }
    }
}

impl Controller for TeacherPolicy {
    fn act(&self, state: &StateVector) -> [f64; ACTION_DIM] {
        match self {
            TeacherPolicy::Scripted(c) => c.act(state),
            TeacherPolicy::Mlp { policy, normalizer } => {
                let out = policy
                    .forward(&normalizer.normalize(state))
                    .expect("dimensions checked at construction");
                let mut a = [0.0; ACTION_DIM];
                a.copy_from_slice(&out);
                a
            }
            TeacherPolicy::Custom(f) => f(state),
        }
    }
}
