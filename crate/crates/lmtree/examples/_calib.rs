//! Scratch probe: trace episodes.

use lmtree::{run_episode, DockingEnv, EnvConfig, ScriptedController, Start, StateVector};

fn trace(env: &EnvConfig, start: Start, label: &str, every: usize, last: usize) {
    let mut sim = DockingEnv::new(env.clone()).unwrap();
    sim.reset(start).unwrap();
    let c = ScriptedController::default();
    let traj = run_episode(&mut sim, &c, env.max_steps, None).unwrap();
    println!("--- {label}: {:?} after {} steps", traj.outcome, traj.steps.len());
    let n = traj.steps.len();
    for (t, step) in traj.steps.iter().enumerate() {
        if t % every == 0 || t + last >= n {
            let s: &StateVector = &step.state;
            println!(
                "t={t:>3} x={:>7.2} y={:>7.2} psi={:>5.2} u={:>5.2} v={:>6.3} r={:>7.4} d={:>5.1} a=[{:>5.2} {:>5.2} {:>5.2} {:>5.2} {:>5.2} ]",
                s.x_rel, s.y_rel, s.psi_err, s.u, s.v, s.r, s.d_obs,
                step.action[0], step.action[1], step.action[2], step.action[3], step.action[4]
            );
        }
    }
}

fn main() {
    let env = EnvConfig::default();
    trace(&env, Start::Seeded(4), "seed 4", 40, 4);
    trace(&env, Start::Seeded(8), "seed 8", 40, 4);
}
