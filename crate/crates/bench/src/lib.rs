//! Fixtures shared by the benchmarks.

use ddlab_core::teacher::{train_teacher, TeacherConfig};
use ddlab_core::{Denoiser, DiffusionProcess, ModelConfig, RngState, SyntheticDataset};

/// Two-position, two-token correlated data under masking.
pub fn bits() -> (SyntheticDataset, DiffusionProcess) {
    (
        SyntheticDataset::correlated_bits(2, 2).expect("valid dataset"),
        DiffusionProcess::masked(2),
    )
}

/// A briefly trained default-width teacher for `bits`.
pub fn teacher() -> Denoiser {
    let (ds, process) = bits();
    let mut rng = RngState::new(0);
    let mut model = Denoiser::new(ModelConfig::for_process(&process, 2), &mut rng).expect("valid config");
    let cfg = TeacherConfig {
        steps: 50,
        eval_every: 0,
        ..TeacherConfig::default()
    };
    train_teacher(&mut model, &ds, &process, &cfg, &mut rng).expect("training runs");
    model
}
