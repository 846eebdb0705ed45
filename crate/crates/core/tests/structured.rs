mod common;

use argmaxgrad::gumbel::{GumbelDraw, NoiseStream};
use argmaxgrad::structured::{
    brute_force_map, decoder_lowdim_approx, exact_log_partition, kl_to_uniform, maxflow_map, score, structured_map,
    structured_perturbed_argmax, Assignment, PairwisePotentials,
};
use argmaxgrad::tensor::{Activation, LayerSpec, MlpParams};
use argmaxgrad::Error;
use common::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn score_matches_term_by_term_sum() {
    let mut r = rng(1);
    for _ in 0..50 {
        let p = random_potentials(&mut r, 6, false, 2.0);
        let g = GumbelDraw::sample(1, 12, &mut NoiseStream::new(r.gen(), 0));
        for mask in 0..64 {
            let bits = mask_bits(mask, 6);
            let z = Assignment::new(bits.clone()).unwrap();
            assert_eq!(score(&p, &z, None).unwrap(), naive_score(&p, &bits, None));
            let with = score(&p, &z, Some(g.row(0))).unwrap();
            assert!((with - naive_score(&p, &bits, Some(g.row(0)))).abs() < 1e-12);
        }
    }
}

#[test]
fn maxflow_reaches_brute_force_optimum() {
    let mut r = rng(2);
    for case in 0..300 {
        let n = r.gen_range(2..=12);
        let p = random_potentials(&mut r, n, true, [0.3, 1.0, 5.0][case % 3]);
        let g = GumbelDraw::sample(1, 2 * n, &mut NoiseStream::new(case as u64, 5));
        for gamma in [None, Some(g.row(0))] {
            let a = score(&p, &maxflow_map(&p, gamma).unwrap(), gamma).unwrap();
            let b = score(&p, &brute_force_map(&p, gamma).unwrap(), gamma).unwrap();
            assert!((a - b).abs() <= 1e-9, "case {case}: {a} vs {b}");
            assert!((b - naive_max(&p, gamma)).abs() <= 1e-9);
        }
    }
}

#[test]
fn maxflow_refuses_negative_weights() {
    let mut r = rng(3);
    let p = loop {
        let p = random_potentials(&mut r, 5, false, 1.0);
        if !p.is_supermodular() {
            break p;
        }
    };
    assert!(matches!(maxflow_map(&p, None), Err(Error::Precondition(_))));
    // The dispatcher falls back to enumeration.
    let z = structured_map(&p, None).unwrap();
    assert!((score(&p, &z, None).unwrap() - naive_max(&p, None)).abs() < 1e-12);
}

fn fixture_potentials() -> Vec<(PairwisePotentials, f64, f64)> {
    let fx: serde_json::Value = serde_json::from_str(include_str!("fixtures/oracles.json")).unwrap();
    fx["pairwise"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| {
            let p: PairwisePotentials = serde_json::from_value(serde_json::json!({
                "n": c["n"], "unary": c["unary"], "edges": c["edges"],
            }))
            .unwrap();
            (p, c["log_partition"].as_f64().unwrap(), c["kl_to_uniform"].as_f64().unwrap())
        })
        .collect()
}

#[test]
fn log_partition_and_kl_match_extended_precision() {
    for (p, lz, kl) in fixture_potentials() {
        let got = exact_log_partition(&p).unwrap();
        assert!((got - lz).abs() < 1e-10 * lz.abs().max(1.0), "{got} vs {lz}");
        let got_kl = kl_to_uniform(&p).unwrap();
        assert!((got_kl - kl).abs() < 1e-10 * kl.abs().max(1.0), "{got_kl} vs {kl}");
    }
}

#[test]
fn log_partition_bounds_and_shift() {
    let mut r = rng(4);
    for _ in 0..100 {
        let n = r.gen_range(1..=8);
        let sm: bool = r.gen();
        let p = random_potentials(&mut r, n, sm, 2.0);
        let lz = exact_log_partition(&p).unwrap();
        assert!(lz >= naive_max(&p, None));
        let i = r.gen_range(0..n);
        let c = 3.0 * normal(&mut r);
        let mut delta = vec![[0.0; 2]; n];
        delta[i] = [c, c];
        let shifted = p.with_unary_offset(&delta).unwrap();
        assert!((exact_log_partition(&shifted).unwrap() - lz - c).abs() < 1e-10);
        assert_eq!(brute_force_map(&shifted, None).unwrap(), brute_force_map(&p, None).unwrap());
    }
    // Saturated unaries: the distribution is a point mass and lz = max score.
    let sat = PairwisePotentials::separable(vec![[0.0, 800.0], [-800.0, 0.0]]).unwrap();
    assert_eq!(exact_log_partition(&sat).unwrap(), 800.0);
}

#[test]
fn kl_is_nonnegative_and_zero_at_uniform() {
    let mut r = rng(5);
    for _ in 0..200 {
        let n = r.gen_range(1..=12);
        let sm: bool = r.gen();
        let p = random_potentials(&mut r, n, sm, 1.5);
        assert!(kl_to_uniform(&p).unwrap() >= 0.0);
    }
    for n in 1..=12 {
        assert!(kl_to_uniform(&PairwisePotentials::zeros(n)).unwrap().abs() < 1e-12);
    }
}

fn tiny_decoder(seed: u64, n: usize, d: usize) -> MlpParams {
    MlpParams::init(
        &[LayerSpec::new(2 * n, 5, Activation::Relu), LayerSpec::new(5, d, Activation::Identity)],
        &mut rng(seed),
    )
    .unwrap()
}

#[test]
fn lowdim_approximation_matches_individual_passes() {
    let dec = tiny_decoder(6, 4, 7);
    let x = binary_images(7, 1, 7);
    for mask in 0..16 {
        let z = Assignment::from_mask(mask, 4);
        let table = decoder_lowdim_approx(&dec, x.row(0), &z).unwrap();
        let at_star = log_lik(&dec, &z.two_hot(), x.row(0));
        for i in 0..4 {
            for b in 0..2u8 {
                let mut bits = z.bits().to_vec();
                bits[i] = b;
                let want = log_lik(&dec, &Assignment::new(bits).unwrap().two_hot(), x.row(0));
                assert!((table[i][b as usize] - want).abs() < 1e-12);
            }
            assert_eq!(table[i][z.bits()[i] as usize], table[0][z.bits()[0] as usize]);
            assert!((table[i][z.bits()[i] as usize] - at_star).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbed_structured_argmax_cases() {
    let mut r = rng(8);
    for case in 0..200 {
        let p = random_potentials(&mut r, 8, true, 1.0);
        let g = GumbelDraw::sample(1, 16, &mut NoiseStream::new(case, 8));
        let gamma = Some(g.row(0));
        let f: Vec<[f64; 2]> = (0..8).map(|_| [5.0 * normal(&mut r), 5.0 * normal(&mut r)]).collect();
        let base = structured_map(&p, gamma).unwrap();
        assert_eq!(structured_perturbed_argmax(&p, &f, 0.0, gamma).unwrap(), base);
        let flat: Vec<[f64; 2]> = (0..8).map(|_| { let c = normal(&mut r); [c, c] }).collect();
        assert_eq!(structured_perturbed_argmax(&p, &flat, 2.0, gamma).unwrap(), base);
        let z = structured_perturbed_argmax(&p, &f, 0.5, gamma).unwrap();
        let perturbed = p.with_unary_offset(&f.iter().map(|r| [0.5 * r[0], 0.5 * r[1]]).collect::<Vec<_>>()).unwrap();
        let best = naive_max(&perturbed, gamma);
        assert!((naive_score(&perturbed, z.bits(), gamma) - best).abs() < 1e-9);
    }
}

#[test]
fn factorized_perturb_and_map_marginals() {
    let unary = vec![[0.0, 1.2], [0.4, -0.7], [0.0, 0.0]];
    let p = PairwisePotentials::separable(unary.clone()).unwrap();
    let mut s = NoiseStream::new(9, 0);
    let draws = 200_000;
    let mut ones = [0usize; 3];
    for _ in 0..draws {
        let g = GumbelDraw::sample(1, 6, &mut s);
        let z = structured_map(&p, Some(g.row(0))).unwrap();
        for i in 0..3 {
            ones[i] += z.bits()[i] as usize;
        }
    }
    for i in 0..3 {
        let want = 1.0 / (1.0 + (unary[i][0] - unary[i][1]).exp());
        let se = (want * (1.0 - want) / draws as f64).sqrt();
        assert!((ones[i] as f64 / draws as f64 - want).abs() < 4.0 * se);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn solvers_agree_on_random_supermodular(seed in 0u64..u64::MAX, n in 2usize..10, scale in 0.1f64..5.0) {
        let mut r = rng(seed);
        let p = random_potentials(&mut r, n, true, scale);
        let a = score(&p, &maxflow_map(&p, None).unwrap(), None).unwrap();
        let b = score(&p, &brute_force_map(&p, None).unwrap(), None).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn potentials_json_roundtrip(seed in 0u64..u64::MAX, n in 1usize..8) {
        let p = random_potentials(&mut rng(seed), n, false, 1.0);
        let back: PairwisePotentials = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }
}
