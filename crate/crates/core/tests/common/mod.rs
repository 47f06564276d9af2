#![allow(dead_code)]

use std::io::Write;
use std::time::Instant;

use fu_incentive::scenario::{build_profile, GameProfile, ScenarioConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(seed: u64, n: usize) -> ScenarioConfig {
    ScenarioConfig {
        num_remaining: n,
        ..ScenarioConfig::with_seed(seed)
    }
}

pub fn instance(seed: u64, n: usize) -> GameProfile {
    build_profile(&config(seed, n)).expect("scenario builds")
}

/// Instance with a larger bound constant, where payments start to matter.
pub fn paid_instance(seed: u64, n: usize, bound_constant: f64) -> GameProfile {
    let cfg = ScenarioConfig {
        bound_constant,
        ..config(seed, n)
    };
    build_profile(&cfg).expect("scenario builds")
}

pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Prints the verdict line and fails the test on a red criterion.
pub fn report(id: u32, name: &str, start: Instant, limit_secs: Option<f64>, passed: bool, detail: String) {
    let secs = start.elapsed().as_secs_f64();
    let in_time = limit_secs.is_none_or(|l| secs < l);
    let ok = passed && in_time;
    let limit = limit_secs.map(|l| format!(" (limit {l}s)")).unwrap_or_default();
    // written to the process stdout directly so the line shows even when
    // the harness captures output of passing tests
    let line = format!(
        "criterion {id:>2} [{}] {name}: {detail}; {secs:.2}s{limit}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} exceeded its time limit: {secs:.2}s");
}

static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Timed criteria run one at a time so wall-clock limits are not shared.
pub fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}
