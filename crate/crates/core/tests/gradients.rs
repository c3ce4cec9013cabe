use keysem_core::gradcheck::{run_level, GradcheckConfig, Level};

#[test]
fn all_levels_match_central_differences() {
    let cfg = GradcheckConfig::default();
    for level in Level::ALL {
        let r = run_level(level, &cfg).unwrap();
        println!("{level:?}: max rel err {:.3e} over {} coordinates", r.max_rel_err, r.coordinates);
        assert!(r.max_rel_err < 1e-4, "{r:#?}");
    }
}
