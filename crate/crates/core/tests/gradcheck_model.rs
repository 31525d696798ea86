use falconx_core::gradcheck::{grad_check_model, FD_STEP, FD_TOLERANCE};
use falconx_core::ModelConfig;

#[test]
fn whole_model_gradients_match_central_differences() {
    for seed in [1, 2] {
        let r = grad_check_model(&ModelConfig::tiny(), seed, &[], FD_STEP).unwrap();
        for g in &r.groups {
            println!("seed {seed} {:12} {:.3e} {}", g.group, g.max_rel_error, g.worst);
        }
        assert!(r.failures(FD_TOLERANCE).is_empty(), "{:?}", r.failures(FD_TOLERANCE));
    }
}
