//! Synthetic scenes, benchmarks, ablations and self-checks behind the CLI.

pub mod ablation;
pub mod bench;
pub mod checks;
mod scene;

pub use ablation::{ablation_config, run_ablation, AblationTable, Arm, ArmResult, SeedResult};
pub use bench::{bench_config, bench_scaling, fit_exponent, method_exponent, write_csv, BenchRecord, Method, CSV_HEADER};
pub use scene::{dist, gen_scene, Motion, SceneSpec, SyntheticScene, LATTICE_STEP, LOOP_CLOSURE_RADIUS, MAX_STEP, ROOM};
