use fedsel_core::linalg::{dot, norm2, RowMatrix};
use fedsel_core::synthgen::{
    client_gradient, client_loss, generate_population, population_objective, solve_target_optimum,
    ClientRecord, PopulationSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RIDGE: f64 = 1e-2;

fn pop(num_clients: usize, seed: u64) -> Vec<ClientRecord> {
    generate_population(&PopulationSpec {
        num_clients,
        samples_per_client: 60,
        master_seed: seed,
        ..PopulationSpec::default()
    })
    .unwrap()
}

fn random_theta(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Central differences of `client_loss`, step 1e-5.
fn fd_gradient(c: &ClientRecord, theta: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    (0..theta.len())
        .map(|k| {
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            (client_loss(c, &up, RIDGE).unwrap() - client_loss(c, &dn, RIDGE).unwrap()) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    let pop = pop(10, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let theta = random_theta(&mut rng, 5, 2.0);
        for c in &pop {
            let g = client_gradient(c, &theta, RIDGE).unwrap();
            let fd = fd_gradient(c, &theta);
            let err = norm2(&g.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>());
            let rel = err / norm2(&fd).max(1e-8);
            assert!(rel < 1e-6, "relative error {rel}");
        }
    }
}

#[test]
fn per_client_newton_optimum_is_stationary() {
    let pop = pop(5, 2);
    for c in &pop {
        let sol = solve_target_optimum(std::slice::from_ref(c), RIDGE, 1e-10, 100).unwrap();
        let g = client_gradient(c, &sol.theta_star, RIDGE).unwrap();
        assert!(norm2(&g) < 1e-8);
    }
}

#[test]
fn newton_optimum_beats_random_points_and_strong_convexity_holds() {
    let pop = pop(40, 3);
    let sol = solve_target_optimum(&pop, RIDGE, 1e-10, 100).unwrap();
    assert!(sol.grad_norm < 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let theta = random_theta(&mut rng, 5, 3.0);
        let f = population_objective(&pop, &theta, RIDGE).unwrap();
        assert!(f >= sol.f_star);
        let d: Vec<f64> = theta.iter().zip(&sol.theta_star).map(|(a, b)| a - b).collect();
        assert!(f - sol.f_star >= 0.5 * RIDGE * dot(&d, &d) - 1e-12);
    }
    // small perturbations of θ* never help the population average loss
    for _ in 0..20 {
        let delta = random_theta(&mut rng, 5, 1e-3);
        let moved: Vec<f64> = sol.theta_star.iter().zip(&delta).map(|(a, b)| a + b).collect();
        assert!(population_objective(&pop, &moved, RIDGE).unwrap() >= sol.f_star);
    }
}

#[test]
fn one_dimensional_optimum_matches_grid_search() {
    let spec = PopulationSpec {
        num_clients: 20,
        covariate_dim: 1,
        feature_dim: 1,
        samples_per_client: 50,
        base_param: vec![0.8],
        heterogeneity: RowMatrix::from_rows(&[[0.5]]).unwrap(),
        ridge: RIDGE,
        master_seed: 7,
    };
    let pop = generate_population(&spec).unwrap();
    let sol = solve_target_optimum(&pop, RIDGE, 1e-10, 100).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=100_000 {
        let t = -5.0 + 1e-4 * k as f64;
        let f = population_objective(&pop, &[t], RIDGE).unwrap();
        if f < best.0 {
            best = (f, t);
        }
    }
    assert!((sol.theta_star[0] - best.1).abs() < 2e-4, "{} vs {}", sol.theta_star[0], best.1);
}

#[test]
fn objective_is_order_invariant_up_to_rounding() {
    let pop = pop(25, 8);
    let theta = [0.2, -0.1, 0.4, 0.3, -0.6];
    let f = population_objective(&pop, &theta, RIDGE).unwrap();
    let mut rev = pop.clone();
    rev.reverse();
    let g = population_objective(&rev, &theta, RIDGE).unwrap();
    assert!((f - g).abs() < 1e-14);
    // fixed-order summation is bit-reproducible
    assert_eq!(f, population_objective(&pop, &theta, RIDGE).unwrap());
}
