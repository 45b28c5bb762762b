//! Values frozen from a first run of the implementation.

use fairshare::allocators::Pf;
use fairshare::capacity::CapacityRegion;
use fairshare::fluid::{descent_report, integrate};
use fairshare::lyapunov::LyapunovContext;
use fairshare::stationary::{detailed_balance_residual, pf_prime_stationary};
use fairshare::traffic::TrafficModel;

fn two_link() -> (CapacityRegion, TrafficModel, LyapunovContext) {
    let region = CapacityRegion::two_link_three_class();
    let model = TrafficModel::without_routing(vec![0.4; 3], vec![1.0; 3]).unwrap();
    let ctx = LyapunovContext::new(region.clone(), model.rho().to_vec()).unwrap();
    (region, model, ctx)
}

#[test]
fn two_link_fluid_half_life() {
    let (region, model, ctx) = two_link();
    let traj = integrate(&region, &model, &[1.0, 1.0, 1.0], 20.0, 1e-3).unwrap();
    let rep = descent_report(&traj, &ctx).unwrap();
    assert!(rep.monotone);
    let t_half = rep.t_half.expect("level halves within the horizon");
    assert!((t_half - 2.982).abs() < 1e-9, "t_half = {t_half}");
}

#[test]
fn pf_is_not_reversible_for_the_pf_prime_measure() {
    let (region, model, ctx) = two_link();
    let d = pf_prime_stationary(&ctx, 4).unwrap();
    let res = detailed_balance_residual(&d, &model, &Pf::new(region)).unwrap();
    assert!((res - 1.5657845139503497).abs() <= 1e-9 * res, "residual = {res}");
}
