mod common;

use common::psr_counts;
use proptest::prelude::*;
use psrtr::ingest::EcgSegment;
use psrtr::psr::{embed_samples, grid_count, render_image, segment_image, PhaseVectors, PsrConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(tau: usize, grid_n: usize) -> PsrConfig {
    PsrConfig { tau, grid_n }
}

fn image(x: &[f64], tau: usize, n: usize) -> psrtr::psr::PsrImage {
    grid_count(&embed_samples(x, &cfg(tau, n)).unwrap(), &cfg(tau, n)).unwrap()
}

#[test]
fn embed_examples() {
    let v = embed_samples(&[1.0, 2.0, 3.0, 4.0], &cfg(1, 2)).unwrap();
    assert_eq!(v.q, 4.0);
    assert_eq!(v.rows, vec![(0.25, 0.5), (0.5, 0.75), (0.75, 1.0)]);
    let v = embed_samples(&[-2.0, 0.0, 2.0], &cfg(2, 2)).unwrap();
    assert_eq!((v.rows.clone(), v.q), (vec![(-1.0, 1.0)], 2.0));
    let seg = EcgSegment::new((0..5000).map(|i| (i as f64 * 0.01).sin()).collect(), 500.0, "II");
    assert_eq!(segment_image(&seg, &cfg(4, 32)).unwrap().0.total, 4996);
}

#[test]
fn quadrant_and_corner_cells() {
    let c = cfg(1, 2);
    let img = grid_count(&PhaseVectors { rows: vec![(-0.5, -0.5), (0.5, 0.5)], q: 1.0 }, &c).unwrap();
    assert_eq!(img.counts, vec![1, 0, 0, 1]);
    assert_eq!(img.total, 2);
    for n in [2, 4, 8, 32] {
        let img = grid_count(&PhaseVectors { rows: vec![(1.0, 1.0)], q: 1.0 }, &cfg(1, n)).unwrap();
        assert_eq!(img.count(n - 1, n - 1), 1);
    }
}

#[test]
fn brute_force_oracle_on_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..25 {
        let x: Vec<f64> = (0..1001).map(|_| rng.random_range(-3.0..3.0)).collect();
        for n in [2, 4, 8, 32] {
            for tau in [1, 4, 16] {
                assert_eq!(image(&x, tau, n).counts, psr_counts(&x, tau, n), "N={n} tau={tau}");
            }
        }
    }
}

#[test]
fn render_examples() {
    let uniform = grid_count(
        &PhaseVectors { rows: vec![(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)], q: 1.0 },
        &cfg(1, 2),
    )
    .unwrap();
    assert_eq!(render_image(&uniform), vec![1.0; 4]);
    let single = grid_count(&PhaseVectors { rows: vec![(0.1, -0.9)], q: 1.0 }, &cfg(1, 4)).unwrap();
    let px = render_image(&single);
    assert_eq!(px.iter().filter(|&&v| v == 1.0).count(), 1);
    assert_eq!(px.iter().filter(|&&v| v == 0.0).count(), 15);
}

#[test]
fn degenerate_inputs() {
    assert!(embed_samples(&[0.0; 10], &cfg(1, 4)).is_err());
    assert!(embed_samples(&[1.0, 2.0], &cfg(2, 4)).is_err());
}

fn signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 20..400).prop_filter("nonzero", |x| x.iter().any(|v| v.abs() > 1e-3))
}

proptest! {
    #[test]
    fn mass_is_conserved(x in signal(), tau in 1usize..16, n in 2usize..40) {
        prop_assume!(x.len() > tau);
        let img = image(&x, tau, n);
        prop_assert_eq!(img.counts.iter().map(|&c| c as usize).sum::<usize>(), x.len() - tau);
        prop_assert_eq!(img.total as usize, x.len() - tau);
    }

    #[test]
    fn probabilities_are_normalized(x in signal(), tau in 1usize..16, n in 2usize..40) {
        prop_assume!(x.len() > tau);
        let img = image(&x, tau, n);
        prop_assert!((img.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(img.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn scale_invariant(x in signal(), tau in 1usize..8, c in prop::sample::select(vec![3.0, 0.5, 2.0, 1e3])) {
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert_eq!(image(&scaled, tau, 32), image(&x, tau, 32));
    }

    #[test]
    fn refinement_aggregates(x in signal(), tau in 1usize..8, half in 2usize..17) {
        let fine = image(&x, tau, 2 * half);
        prop_assert_eq!(fine.coarsen().unwrap(), image(&x, tau, half));
    }

    #[test]
    fn pixels_in_unit_interval(x in signal(), tau in 1usize..8) {
        let px = render_image(&image(&x, tau, 32));
        prop_assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(px.contains(&1.0));
    }
}
