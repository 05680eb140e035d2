// Temporary probe 2: find a violating run and characterize it.
use cemco::engine::fit;
use cemco::simulation::{gen_scenario1, gen_scenario2, gen_scenario3, Scenario};

#[test]
fn find_violators() {
    for seed in 0..12u64 {
        for (scenario, n) in [(Scenario::One, 120usize), (Scenario::Two, 200), (Scenario::Three, 200)] {
            let draw = match scenario {
                Scenario::One => gen_scenario1(n, seed, None).unwrap(),
                Scenario::Two => gen_scenario2(n, seed).unwrap(),
                Scenario::Three => gen_scenario3(n, seed, None).unwrap(),
            };
            let config = scenario.cemco_config(3, seed * 31 + 1);
            let result = fit(&draw.data, &config).unwrap();
            let mut n_viol = 0;
            let mut worst: f64 = 0.0;
            let mut worst_at = 0;
            for (t, w) in result.loglik_trace.windows(2).enumerate() {
                let tol = 1e-6 * w[1].abs().max(1.0);
                if w[1] < w[0] - tol {
                    n_viol += 1;
                    let v = (w[0] - w[1]) / w[0].abs().max(1.0);
                    if v > worst { worst = v; worst_at = t; }
                }
            }
            if n_viol > 0 {
                println!("scenario {:?} n={n} seed={seed}: viol={n_viol} worst={worst:.3e} at iter {worst_at}/{}", scenario, result.loglik_trace.len());
            }
        }
    }
}
