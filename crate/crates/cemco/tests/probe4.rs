// Temporary micro-profiling probe.
use cemco::engine::{e_step, fit_with_params, init_random, m_step, c_step, EmState};
use cemco::model::ModelConfig;
use cemco::simulation::{gen_scenario2, Scenario};
use std::time::Instant;

#[test]
fn profile_pieces() {
    let draw = gen_scenario2(400, 7).unwrap();
    let config = Scenario::Two.cemco_config(1, 13);
    let params = init_random(&draw.data, &config, 99).unwrap();

    let t0 = Instant::now();
    let mut resp = None;
    for _ in 0..50 {
        resp = Some(e_step(&draw.data, &params, &config).unwrap());
    }
    println!("e_step x50: {:?}", t0.elapsed());

    let resp = resp.unwrap();
    let assignment = c_step(&resp);
    let state = EmState {
        params: params.clone(),
        responsibilities: resp,
        assignment,
        loglik: 0.0,
        iteration: 0,
    };
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = m_step(&draw.data, &state, &config).unwrap();
    }
    println!("m_step x50: {:?}", t0.elapsed());

    // single full restart
    let t0 = Instant::now();
    let r = fit_with_params(&draw.data, &config, &params).unwrap();
    println!("one em run: iters={} {:?}", r.n_iter, t0.elapsed());
}
