//! Command-line front end. Placeholder while the core modules land.

pub fn main() -> i32 {
    eprintln!("lmtree: commands not wired up yet");
    1
}
