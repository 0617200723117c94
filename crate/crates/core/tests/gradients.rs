mod support {
    pub mod gradcheck;
}

use support::gradcheck::check;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..3 {
        let (occ, disp) = check(seed);
        assert!(occ <= 1e-6, "seed {seed}: occupancy rel err {occ:e}");
        assert!(disp <= 1e-6, "seed {seed}: disparity rel err {disp:e}");
    }
}
