use super::*;
use crate::data;
use crate::metrics;
use crate::quant::{Mode, QuantKind};
use crate::tensor::adam::AdamState;

fn tiny_layout() -> CodecLayout {
    CodecLayout { width0: 8, width1: 8, latent_channels: 4 }
}

fn spec(kind: QuantKind) -> QuantizerSpec {
    QuantizerSpec::new(kind)
}

fn random_input(h: usize, w: usize, seed: u64) -> Tensor {
    let set = data::synth_dataset(2, h.max(w).max(16), seed).unwrap();
    let mut r = rng::substream(&[seed, 77]);
    data::random_crop(&set, 1, h, &mut r).unwrap()
}

// -- mse -----------------------------------------------------------------

#[test]
fn mse_examples() {
    let x = vec![0.25f32, 0.5, 0.75];
    assert_eq!(mse(&x, &x).unwrap(), 0.0);
    let zeros = vec![0.0f32; 8];
    let ones = vec![1.0f32; 8];
    assert_eq!(mse(&zeros, &ones).unwrap(), 255.0 * 255.0);
    // flipping half the pixels full-scale costs half the max MSE
    let mut half = zeros.clone();
    for v in half.iter_mut().take(4) {
        *v = 1.0;
    }
    assert_eq!(mse(&zeros, &half).unwrap(), 255.0 * 255.0 / 2.0);
    assert!(mse(&zeros, &x).is_err());
}

// -- shape gates -----------------------------------------------------------

#[test]
fn input_sides_must_be_multiples_of_eight() {
    let params = CodecParams::new(tiny_layout(), &[1]);
    let x = Tensor::zeros(vec![1, 3, 12, 16]);
    assert!(forward_eval(&x, &params).is_err());
    let mut tape = Tape::new();
    let mut ctx = QuantContext::new(Mode::Train, 0, 1);
    let bad = forward_train(
        &mut tape,
        &x,
        &params,
        &spec(QuantKind::Aun),
        &spec(QuantKind::Aun),
        &mut ctx,
        0.01,
    );
    assert!(bad.is_err());
    let grey = Tensor::zeros(vec![1, 1, 16, 16]);
    assert!(forward_eval(&grey, &params).is_err());
}

// -- eval -------------------------------------------------------------------

#[test]
fn eval_shapes_and_determinism() {
    let params = CodecParams::new(tiny_layout(), &[2]);
    let x = random_input(16, 16, 3);
    let a = forward_eval(&x, &params).unwrap();
    let b = forward_eval(&x, &params).unwrap();
    assert_eq!(a.reconstruction.len(), 3 * 16 * 16);
    assert_eq!((a.latent_h, a.latent_w), (2, 2));
    assert_eq!(a.symbols.len(), 4 * 2 * 2);
    assert!(a.bpp_estimated > 0.0);
    assert!(a.reconstruction.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(a.reconstruction, b.reconstruction);
    assert_eq!(a.symbols, b.symbols);
    assert_eq!(a.estimated_bits, b.estimated_bits);
}

#[test]
fn reconstruct_from_symbols_matches_eval() {
    let params = CodecParams::new(tiny_layout(), &[4]);
    let x = random_input(16, 24, 5);
    let out = forward_eval(&x, &params).unwrap();
    let recon = reconstruct_from_symbols(&params, &out.symbols, out.latent_h, out.latent_w).unwrap();
    assert_eq!(recon, out.reconstruction);
    assert!(reconstruct_from_symbols(&params, &out.symbols[1..], 2, 3).is_err());
}

// -- training loss -----------------------------------------------------------

#[test]
fn loss_is_rate_plus_weighted_distortion() {
    let params = CodecParams::new(tiny_layout(), &[6]);
    let x = random_input(16, 16, 7);
    for &lambda in &[0.0f64, 0.01, 0.03] {
        let mut tape = Tape::new();
        let mut ctx = QuantContext::new(Mode::Train, 0, 9);
        let fwd = forward_train(
            &mut tape,
            &x,
            &params,
            &spec(QuantKind::Aun),
            &spec(QuantKind::Aun),
            &mut ctx,
            lambda,
        )
        .unwrap();
        let want = fwd.parts.rate + lambda * fwd.parts.distortion;
        assert!(
            (fwd.parts.total - want).abs() < 1e-3 * want.abs().max(1.0),
            "lambda={lambda}: {} vs {want}",
            fwd.parts.total
        );
        if lambda == 0.0 {
            assert!((fwd.parts.total - fwd.parts.rate).abs() < 1e-6);
        }
        assert_eq!(fwd.latents.y_ent, fwd.latents.y_dec, "identical specs share the latent");
    }
}

#[test]
fn end_to_end_gradients_match_fd_with_frozen_noise() {
    let layout = CodecLayout { width0: 4, width1: 4, latent_channels: 2 };
    let x = random_input(8, 8, 11);
    let lambda = 1e-4; // keeps the loss small so f32 finite differences stay clean
    let mut base = CodecParams::new(layout, &[13]);
    // push every pre-activation well into the positive leaky-relu branch so
    // no finite-difference probe crosses a kink (the negative branch has its
    // own dedicated gradient tests)
    for ti in [1, 3, 5, 7, 9, 11] {
        for v in base.tensors_mut()[ti].data_mut() {
            *v += 1.0;
        }
    }

    let eval_loss = |params: &CodecParams| -> f64 {
        let mut tape = Tape::new();
        // rebuilt context => identical AUN noise draws on every call
        let mut ctx = QuantContext::new(Mode::Train, 5, 21);
        let fwd = forward_train(
            &mut tape,
            &x,
            params,
            &spec(QuantKind::Aun),
            &spec(QuantKind::Aun),
            &mut ctx,
            lambda,
        )
        .unwrap();
        tape.scalar_value(fwd.loss) as f64
    };

    let mut tape = Tape::new();
    let mut ctx = QuantContext::new(Mode::Train, 5, 21);
    let fwd = forward_train(
        &mut tape,
        &x,
        &base,
        &spec(QuantKind::Aun),
        &spec(QuantKind::Aun),
        &mut ctx,
        lambda,
    )
    .unwrap();
    let grads = tape.backward(fwd.loss).unwrap();

    // 5-point stencil: O(h^4) truncation lets h stay big enough to beat the
    // f32 roundoff in the loss
    let stencil = |ti: usize, j: usize, h: f64| -> f64 {
        let at = |step: f64| -> f64 {
            let mut p = base.clone();
            p.tensors_mut()[ti].data_mut()[j] += step as f32;
            eval_loss(&p)
        };
        (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
    };

    let mut checked = 0;
    for (ti, (name, _)) in base.named_tensors().iter().enumerate() {
        let an = grads.get(fwd.param_vars[ti]).unwrap();
        for j in 0..an.len().min(6) {
            let fd = stencil(ti, j, 4e-2);
            let a = an[j] as f64;
            if a.abs().max(fd.abs()) < 2e-2 {
                continue; // below the f32 FD noise floor
            }
            let err = (fd - a).abs();
            assert!(err <= 1e-3 * a.abs().max(fd.abs()), "{name}[{j}]: analytic {a} vs fd {fd}");
            checked += 1;
        }
    }
    assert!(checked >= 15, "only {checked} gradient entries were large enough to check");
}

// -- a short optimization run -------------------------------------------------

fn train_short(lambda: f64, iters: usize, seed: u64) -> (Vec<f64>, CodecParams) {
    let layout = tiny_layout();
    let set = data::synth_dataset(4, 32, 100 + seed).unwrap();
    let mut params = CodecParams::new(layout, &[seed]);
    let mut adam = AdamState::new(1e-3, &params.param_sizes());
    let mut losses = Vec::with_capacity(iters);
    for t in 0..iters {
        let mut data_rng = rng::substream(&[seed, t as u64, slot::DATA]);
        let x = data::random_crop(&set, 2, 16, &mut data_rng).unwrap();
        let mut tape = Tape::new();
        let mut ctx = QuantContext::new(Mode::Train, t as u64, seed);
        let fwd = forward_train(
            &mut tape,
            &x,
            &params,
            &spec(QuantKind::Aun),
            &spec(QuantKind::Aun),
            &mut ctx,
            lambda,
        )
        .unwrap();
        losses.push(fwd.parts.total);
        let grads = tape.backward(fwd.loss).unwrap();
        for (var, tensor) in fwd.param_vars.iter().zip(params.tensors_mut()) {
            grads.write_to(*var, tensor).unwrap();
        }
        adam.step(&mut params.tensors_mut()).unwrap();
    }
    (losses, params)
}

#[test]
fn short_training_run_decreases_the_smoothed_loss() {
    let (losses, _) = train_short(0.01, 300, 1);
    let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = losses[losses.len() - 30..].iter().sum::<f64>() / 30.0;
    assert!(tail < head, "loss went from {head:.3} to {tail:.3}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn higher_lambda_buys_more_bits_and_quality() {
    let eval_set = data::synth_dataset(2, 16, 500).unwrap();
    let mut results = Vec::new();
    for &lambda in &[0.003f64, 0.03] {
        let (_, params) = train_short(lambda, 400, 2);
        let mut bits = 0.0f64;
        let mut err = 0.0f64;
        for img in &eval_set.images {
            let out = forward_eval(&img.to_tensor(), &params).unwrap();
            bits += out.estimated_bits;
            err += mse(img.to_tensor().data(), &out.reconstruction).unwrap();
        }
        results.push((bits, metrics::psnr_from_mse(err / eval_set.images.len() as f64)));
    }
    assert!(results[1].0 > results[0].0, "rate must grow with lambda: {results:?}");
    assert!(results[1].1 > results[0].1, "quality must grow with lambda: {results:?}");
}

// -- checkpointing ------------------------------------------------------------

#[test]
fn checkpoints_roundtrip_and_infer_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.qlt");
    let layout = CodecLayout { width0: 6, width1: 10, latent_channels: 5 };
    let params = CodecParams::new(layout, &[17]);
    params.save(&path).unwrap();

    let loaded = CodecParams::load_infer(&path).unwrap();
    assert_eq!(loaded.layout.width0, 6);
    assert_eq!(loaded.layout.width1, 10);
    assert_eq!(loaded.layout.latent_channels, 5);
    for ((n0, t0), (n1, t1)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
        assert_eq!(n0, &n1);
        assert_eq!(t0.data(), t1.data(), "{n0} differs after reload");
    }

    let x = random_input(16, 16, 19);
    let a = forward_eval(&x, &params).unwrap();
    let b = forward_eval(&x, &loaded).unwrap();
    assert_eq!(a.reconstruction, b.reconstruction);

    let err = CodecParams::load(&path, tiny_layout()).unwrap_err();
    assert!(err.to_string().contains("layout"), "{err}");
}

#[test]
fn init_is_seeded() {
    let a = CodecParams::new(tiny_layout(), &[3]);
    let b = CodecParams::new(tiny_layout(), &[3]);
    let c = CodecParams::new(tiny_layout(), &[4]);
    assert_eq!(a.named_tensors()[0].1.data(), b.named_tensors()[0].1.data());
    assert_ne!(a.named_tensors()[0].1.data(), c.named_tensors()[0].1.data());
}
