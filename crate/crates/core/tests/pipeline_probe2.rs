use ifepanel::estimator::{fit, FitOptions};
use ifepanel::likelihood::Family;
use ifepanel::panel::PanelData;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn scenario1(n: usize, t: usize, beta0: f64, family: Family, seed: u64) -> PanelData {
    let mut rng = ifepanel::rng::stream(seed, 0);
    let mut normal = |(_, _): (usize, usize)| -> f64 { StandardNormal.sample(&mut rng) };
    let alpha = DMatrix::from_fn(n, 2, |i, j| normal((i, j)));
    let gamma = DMatrix::from_fn(t, 2, |i, j| normal((i, j)));
    let ax = DMatrix::from_fn(n, 2, |i, j| normal((i, j)));
    let gx = DMatrix::from_fn(t, 2, |i, j| normal((i, j)));
    let x = DMatrix::from_fn(n, t, |i, j| ax.row(i).dot(&gx.row(j)) + normal((i, j)));
    let y = DMatrix::from_fn(n, t, |i, j| {
        let z = beta0 * x[(i, j)] + alpha.row(i).dot(&gamma.row(j));
        let eps: f64 = match family {
            Family::Logit => { let u: f64 = rng.gen(); (u / (1.0 - u)).ln() }
            Family::Probit => StandardNormal.sample(&mut rng),
        };
        if z - eps > 0.0 { 1.0 } else { 0.0 }
    });
    PanelData::from_matrices(y, vec![x]).unwrap()
}

#[test]
fn probe2() {
    for max_iters in [5000usize, 20000, 60000] {
        let opts = FitOptions { refine_max_iters: max_iters, ..FitOptions::default() };
        let data = scenario1(30, 20, 0.5, Family::Logit, 1000);
        let t0 = std::time::Instant::now();
        let res = fit(&data, Family::Logit, 2, &opts).unwrap();
        println!("iters={} conv={} grads={:?} tol={:.2e} loglik={:.3} dt={:.2?}",
            res.iterations, res.converged, res.grad_norms,
            1e-6*(1.0+res.loglik.abs()), res.loglik, t0.elapsed());
    }
}
