use super::*;
use crate::rng;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn likelihood_scalar_at_the_mode() {
    // v = mu, sigma = 1 (log_sigma = 0): p = 2*sigmoid(0.5) - 1
    let want = 2.0 / (1.0 + (-0.5f64).exp()) - 1.0;
    assert!((likelihood_scalar(0.0, 0.0, 0.0) - want).abs() < 1e-12);
    assert!((likelihood_scalar(3.0, 3.0, 0.0) - want).abs() < 1e-12);
}

#[test]
fn integer_likelihoods_telescope_to_one() {
    for &(mu, ls) in &[(0.0f64, 0.0f64), (1.7, 0.5), (-4.2, 1.0), (0.0, -2.0)] {
        let total: f64 = (-4000..=4000).map(|v| likelihood_scalar(v as f64, mu, ls)).sum();
        assert!((total - 1.0).abs() < 1e-6, "mu={mu} ls={ls}: {total}");
    }
}

#[test]
fn rate_bits_matches_hand_loop() {
    let vals = vec![0.0f32, 1.0, -2.0, 0.5, 3.2, -0.7];
    let mus = vec![0.1f32, -0.4];
    let lss = vec![0.3f32, -0.2];
    let mut tape = Tape::new();
    let v = tape.leaf(vec![1, 2, 1, 3], vals.clone(), true).unwrap();
    let mu = tape.leaf(vec![2], mus.clone(), true).unwrap();
    let ls = tape.leaf(vec![2], lss.clone(), true).unwrap();
    let r = rate_bits(&mut tape, v, mu, ls).unwrap();

    let mut want = 0.0f64;
    for (i, &x) in vals.iter().enumerate() {
        let c = i / 3; // [N=1, C=2, H=1, W=3]
        let p = likelihood_scalar(x as f64, mus[c] as f64, lss[c] as f64)
            .max(LIKELIHOOD_FLOOR as f64);
        want -= p.log2();
    }
    assert!(
        (tape.scalar_value(r) as f64 - want).abs() < 1e-4 * want,
        "{} vs {want}",
        tape.scalar_value(r)
    );
}

#[test]
fn clamped_tail_value_costs_about_thirty_bits() {
    let mut tape = Tape::new();
    let v = tape.leaf(vec![1, 1, 1, 1], vec![1000.0], true).unwrap();
    let mu = tape.leaf(vec![1], vec![0.0], true).unwrap();
    let ls = tape.leaf(vec![1], vec![0.0], true).unwrap();
    let r = rate_bits(&mut tape, v, mu, ls).unwrap();
    let want = -(LIKELIHOOD_FLOOR as f64).log2(); // ~29.897
    assert!((tape.scalar_value(r) as f64 - want).abs() < 1e-3);

    // and the clamp zeroes all gradients
    let g = tape.backward(r).unwrap();
    assert_eq!(g.get(mu).unwrap(), &[0.0]);
    assert_eq!(g.get(ls).unwrap(), &[0.0]);
}

#[test]
fn rate_gradients_match_fd() {
    let mut rg = rng::substream(&[0xe27, 1]);
    let vals: Vec<f32> = (0..12).map(|_| rg.gen_range(-3.0..3.0)).collect();
    let mus: Vec<f32> = (0..3).map(|_| rg.gen_range(-0.5..0.5)).collect();
    let lss: Vec<f32> = (0..3).map(|_| rg.gen_range(-0.5..0.5)).collect();

    // independent f64 oracle for the same rate (layout [2,3,1,2])
    let eval = |vals: &[f32], mus: &[f32], lss: &[f32]| -> f64 {
        let mut total = 0.0f64;
        for (i, &x) in vals.iter().enumerate() {
            let c = (i % 6) / 2;
            let p = likelihood_scalar(x as f64, mus[c] as f64, lss[c] as f64)
                .max(LIKELIHOOD_FLOOR as f64);
            total -= p.log2();
        }
        total
    };

    let mut tape = Tape::new();
    let v = tape.leaf(vec![2, 3, 1, 2], vals.clone(), true).unwrap();
    let mu = tape.leaf(vec![3], mus.clone(), true).unwrap();
    let ls = tape.leaf(vec![3], lss.clone(), true).unwrap();
    let r = rate_bits(&mut tape, v, mu, ls).unwrap();
    let g = tape.backward(r).unwrap();

    let h = 1e-3f32;
    let check = |name: &str, j: usize, an: f32, lp: f64, lm: f64| {
        let fd = (lp - lm) / (2.0 * h as f64);
        let err = (fd - an as f64).abs();
        assert!(
            err <= 1e-4 * fd.abs().max(an.abs() as f64).max(1.0),
            "{name}[{j}]: analytic {an} vs fd {fd}"
        );
    };
    for j in 0..vals.len() {
        let mut p = vals.clone();
        p[j] += h;
        let mut m = vals.clone();
        m[j] -= h;
        check("values", j, g.get(v).unwrap()[j], eval(&p, &mus, &lss), eval(&m, &mus, &lss));
    }
    for j in 0..3 {
        let mut p = mus.clone();
        p[j] += h;
        let mut m = mus.clone();
        m[j] -= h;
        check("mu", j, g.get(mu).unwrap()[j], eval(&vals, &p, &lss), eval(&vals, &m, &lss));
        let mut p = lss.clone();
        p[j] += h;
        let mut m = lss.clone();
        m[j] -= h;
        check("log_sigma", j, g.get(ls).unwrap()[j], eval(&vals, &mus, &p), eval(&vals, &mus, &m));
    }
}

#[test]
fn likelihood_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let v3 = tape.leaf(vec![2, 3, 2], vec![0.0; 12], true).unwrap();
    let mu = tape.leaf(vec![3], vec![0.0; 3], true).unwrap();
    assert!(likelihood(&mut tape, v3, mu, mu).is_err());
    let v4 = tape.leaf(vec![1, 2, 2, 3], vec![0.0; 12], true).unwrap();
    assert!(likelihood(&mut tape, v4, mu, mu).is_err(), "channel count mismatch");
}

// -- CDF tables --------------------------------------------------------

fn default_prior(channels: usize) -> FactorizedPrior {
    FactorizedPrior::new(channels)
}

#[test]
fn tables_are_exhaustive_and_positive() {
    let tables = build_cdf_tables(&default_prior(3), None).unwrap();
    assert_eq!(tables.len(), 3);
    for t in &tables {
        assert_eq!(t.cum[0], 0);
        assert_eq!(*t.cum.last().unwrap(), TOTAL_FREQ);
        for s in 0..t.num_symbols() {
            assert!(t.freq(s) >= 1, "symbol {s} has zero frequency");
        }
    }
}

/// Uniform table over [-l, l] plus escape; handy for mapping tests.
fn uniform_table(l: u16) -> CdfTable {
    let num = 2 * l as usize + 2;
    let base = TOTAL_FREQ / num as u32;
    let mut cum = vec![0u32];
    for i in 0..num {
        let f = if i == num - 1 { TOTAL_FREQ - cum[i] } else { base };
        cum.push(cum[i] + f);
    }
    CdfTable { support: l, cum }
}

#[test]
fn symbol_mapping_roundtrips() {
    let t = &uniform_table(8);
    assert_eq!(t.num_symbols(), 18);
    for v in -8..=8 {
        assert_eq!(t.value_of(t.symbol_of(v)), v);
    }
    assert_eq!(t.symbol_of(9), t.escape_symbol());
    assert_eq!(t.symbol_of(-2000), t.escape_symbol());
}

#[test]
fn symbol_at_inverts_the_cumulative_intervals() {
    let t = &uniform_table(6);
    for s in 0..t.num_symbols() {
        assert_eq!(t.symbol_at(t.cum[s]), s);
        assert_eq!(t.symbol_at(t.cum[s + 1] - 1), s);
    }
}

#[test]
fn zero_centered_tables_are_symmetric() {
    let t = &build_cdf_tables(&default_prior(1), None).unwrap()[0];
    let l = t.support as usize;
    for i in 0..l {
        let a = t.freq(i);
        let b = t.freq(2 * l - i);
        assert!(a.abs_diff(b) <= 1, "freq[{i}]={a} vs freq[{}]={b}", 2 * l - i);
    }
}

#[test]
fn table_code_length_is_close_to_model_entropy() {
    // cross entropy of the model under the quantized table stays within
    // 0.02 bits/symbol of the model entropy
    let mut prior = default_prior(1);
    prior.mu.data_mut()[0] = 0.3;
    prior.log_sigma.data_mut()[0] = 0.4;
    let t = &build_cdf_tables(&prior, None).unwrap()[0];
    let l = t.support as i32;
    let mut entropy = 0.0f64;
    let mut cross = 0.0f64;
    for v in -l..=l {
        let p = likelihood_scalar(v as f64, 0.3, 0.4);
        let q = t.freq(t.symbol_of(v)) as f64 / TOTAL_FREQ as f64;
        entropy -= p * p.log2();
        cross -= p * q.log2();
    }
    assert!(cross - entropy < 0.02, "entropy {entropy} vs cross {cross}");
    assert!(cross + 1e-9 >= entropy, "cross entropy cannot beat entropy");
}

#[test]
fn serialization_roundtrips() {
    let mut prior = default_prior(2);
    prior.mu.data_mut()[1] = -1.2;
    prior.log_sigma.data_mut()[0] = -0.8;
    for t in build_cdf_tables(&prior, None).unwrap() {
        let mut buf = Vec::new();
        t.serialize(&mut buf);
        assert_eq!(buf.len(), 2 + 2 * t.num_symbols());
        let mut pos = 0;
        let back = CdfTable::deserialize(&buf, &mut pos).unwrap();
        assert_eq!(pos, buf.len());
        assert_eq!(back, t);
    }
}

#[test]
fn deserialize_rejects_truncation_and_garbage() {
    let t = build_cdf_tables(&default_prior(1), None).unwrap().remove(0);
    let mut buf = Vec::new();
    t.serialize(&mut buf);
    let mut pos = 0;
    assert!(CdfTable::deserialize(&buf[..buf.len() - 1], &mut pos).is_err());
    // non-monotone payload
    let mut bad = buf.clone();
    bad[2..6].copy_from_slice(&[0xff, 0xff, 0x01, 0x00]);
    let mut pos = 0;
    assert!(CdfTable::deserialize(&bad, &mut pos).is_err());
}

#[test]
fn explicit_support_too_small_is_an_error() {
    let mut prior = default_prior(1);
    prior.log_sigma.data_mut()[0] = 2.0; // wide: needs a large support
    let needed = required_support(&prior);
    assert!(needed > 4);
    let err = build_cdf_tables(&prior, Some(4)).unwrap_err();
    assert!(err.to_string().contains(&format!("L>={needed}")), "{err}");
    assert!(build_cdf_tables(&prior, Some(needed)).is_ok());
}

#[test]
fn auto_support_leaves_little_tail_mass() {
    let mut prior = default_prior(1);
    prior.mu.data_mut()[0] = 2.5;
    prior.log_sigma.data_mut()[0] = 0.7;
    let l = required_support_channel(&prior, 0) as i32;
    let tail = |l: i32| 1.0 - (-l..=l).map(|v| likelihood_scalar(v as f64, 2.5, 0.7)).sum::<f64>();
    assert!(tail(l) < 1e-6, "tail mass {}", tail(l));
    // the bound allocates the tail budget per side, so it may exceed the
    // smallest valid support, but only by a small margin
    let minimal = (1..).find(|&c| tail(c) < 1e-6).unwrap();
    assert!(l >= minimal && l <= minimal + 2, "l={l} vs minimal {minimal}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn tables_stay_valid_for_random_priors(
        mu in -5.0f32..5.0f32,
        ls in -2.0f32..1.5f32,
    ) {
        let mut prior = default_prior(1);
        prior.mu.data_mut()[0] = mu;
        prior.log_sigma.data_mut()[0] = ls;
        let t = &build_cdf_tables(&prior, None).unwrap()[0];
        prop_assert_eq!(*t.cum.last().unwrap(), TOTAL_FREQ);
        prop_assert!(t.cum.windows(2).all(|w| w[0] < w[1]));
        let mut buf = Vec::new();
        t.serialize(&mut buf);
        let mut pos = 0;
        prop_assert_eq!(&CdfTable::deserialize(&buf, &mut pos).unwrap(), t);
    }
}
