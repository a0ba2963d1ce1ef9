mod common;

use common::{check_case, gradcheck_cases};

const SEEDS: u64 = 20;

fn run<T: featrep::Scalar>(tol: f64) {
    let mut worst = 0.0f64;
    for case in gradcheck_cases() {
        for seed in 0..SEEDS {
            match check_case::<T>(&case, seed, tol) {
                Ok(r) => worst = worst.max(r.max_rel_err()),
                Err(e) => panic!("{} seed {seed}: {e}", case.name),
            }
        }
    }
    println!("worst relative error {worst:.3e} (tolerance {tol:.0e})");
}

#[test]
fn every_layer_passes_in_f32() {
    run::<f32>(1e-4);
}

#[test]
fn every_layer_passes_in_f64() {
    run::<f64>(1e-7);
}
