//! Drive the scripted controller in the docking environment: one verbose
//! episode from a fixed start, then outcome statistics over seeded random
//! starts.
//!
//!     cargo run --release -p lmtree --example scripted_docking

use lmtree::{
    run_episode, DockingEnv, EnvConfig, Outcome, Pose, ScriptedController, Start, Velocity,
};

fn main() -> lmtree::Result<()> {
    let mut env = DockingEnv::new(EnvConfig::default())?;
    let controller = ScriptedController::default();

    env.reset(Start::At {
        pose: Pose { north: 150.0, east: -60.0, heading: 1.0 },
        velocity: Velocity::default(),
    })?;
    let traj = run_episode(&mut env, &controller, 800, None)?;
    println!("fixed start: {} in {} steps", traj.outcome.as_str(), traj.steps.len());
    println!(
        "{:>5} {:>8} {:>8} {:>8} {:>7} {:>7} {:>8} {:>8}",
        "step", "dist", "psi_err", "u", "v", "r", "d_obs", "heading"
    );
    for (i, s) in traj.steps.iter().enumerate() {
        if i % 40 == 0 || i + 1 == traj.steps.len() {
            let st = &s.state;
            let dist = (st.x_rel.powi(2) + st.y_rel.powi(2)).sqrt();
            println!(
                "{i:>5} {dist:>8.2} {:>8.3} {:>8.3} {:>7.3} {:>7.4} {:>8.2} {:>8.3}",
                st.psi_err, st.u, st.v, st.r, st.d_obs, s.pose.heading
            );
        }
    }

    let episodes = 200;
    let mut success = 0;
    let mut contact = 0;
    let mut timeout = 0;
    let mut steps_sum = 0usize;
    let mut failures = Vec::new();
    for seed in 0..episodes {
        let start = env.reset(Start::Seeded(seed))?;
        let traj = run_episode(&mut env, &controller, 800, None)?;
        steps_sum += traj.steps.len();
        match traj.outcome {
            Outcome::Success => success += 1,
            Outcome::Contact => contact += 1,
            Outcome::Timeout => timeout += 1,
        }
        if traj.outcome != Outcome::Success && failures.len() < 10 {
            failures.push((seed, traj.outcome, start, traj.steps.last().unwrap().state));
        }
    }
    println!(
        "\nseeded starts: {success}/{episodes} success, {contact} contact, {timeout} timeout \
         (mean {} steps)",
        steps_sum / episodes as usize
    );
    for (seed, outcome, s0, s1) in &failures {
        let d0 = (s0.x_rel.powi(2) + s0.y_rel.powi(2)).sqrt();
        let d1 = (s1.x_rel.powi(2) + s1.y_rel.powi(2)).sqrt();
        println!(
            "  seed {seed}: {} | start dist {d0:.0} psi {:.2} | end dist {d1:.1} psi {:.2} \
             u {:.2} v {:.2} d_obs {:.1}",
            outcome.as_str(),
            s0.psi_err,
            s1.psi_err,
            s1.u,
            s1.v,
            s1.d_obs
        );
    }
    Ok(())
}
