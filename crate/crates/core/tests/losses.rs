mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use refsketch::losses::{
    cycle_loss, discriminator_loss, generator_adversarial_loss, line_loss, loss_weights, style_loss, total_generator_loss,
    AdversarialMode, GradientEdgeExtractor, IdentityExtractor, LossTerms,
};
use refsketch::networks::StyleEncoder;
use refsketch::Error;

proptest! {
    #[test]
    fn style_line_weight_never_increases(total in 1usize..400) {
        let mut prev = f64::INFINITY;
        for e in 0..=total {
            let w = loss_weights(e, total).unwrap();
            prop_assert!(w.style <= prev && w.style >= 0.5 - 1e-12 && w.style == w.line);
            prop_assert_eq!((w.cyc, w.adv), (10.0, 1.0));
            prev = w.style;
        }
        let past_end = matches!(loss_weights(total + 1, total), Err(Error::OutOfRangeEpoch { .. }));
        prop_assert!(past_end);
    }
}

#[test]
fn zero_epochs_is_rejected() {
    assert!(loss_weights(0, 0).is_err());
}

#[test]
fn style_loss_needs_a_frozen_encoder() {
    let e = StyleEncoder::new(2, DType::F32, &Device::Cpu, 0).unwrap();
    let x = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(style_loss(&x, &x, &e), Err(Error::EncoderNotFrozen)));
    let e = e.freeze();
    assert_eq!(style_loss(&x, &x, &e).unwrap().to_scalar::<f32>().unwrap(), 0.0);
}

#[test]
fn identical_inputs_cost_nothing() {
    let mut rng = common::rng(5);
    let c = common::uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0).unwrap();
    assert_eq!(cycle_loss(&c, &c).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    let l = line_loss(&c, &c, &GradientEdgeExtractor, &IdentityExtractor).unwrap();
    assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
    let d = common::uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0).unwrap();
    assert!(cycle_loss(&c, &d).unwrap().to_scalar::<f64>().unwrap() > 0.0);
}

#[test]
fn adversarial_terms_are_finite_and_ordered() {
    let real = Tensor::new(&[[4.0f64]], &Device::Cpu).unwrap();
    let fake = Tensor::new(&[[-4.0f64]], &Device::Cpu).unwrap();
    // a confident, correct discriminator has a small loss
    let good = discriminator_loss(&real, &fake).unwrap().to_scalar::<f64>().unwrap();
    let bad = discriminator_loss(&fake, &real).unwrap().to_scalar::<f64>().unwrap();
    assert!(good < bad && good.is_finite() && bad.is_finite());
    // both generator objectives fall as the fake logit rises
    for mode in [AdversarialMode::NonSaturating, AdversarialMode::Saturating] {
        let lo = generator_adversarial_loss(&fake, mode).unwrap().to_scalar::<f64>().unwrap();
        let hi = generator_adversarial_loss(&real, mode).unwrap().to_scalar::<f64>().unwrap();
        assert!(hi < lo && hi.is_finite() && lo.is_finite());
    }
}

#[test]
fn non_finite_terms_are_named() {
    let w = loss_weights(0, 10).unwrap();
    let t = LossTerms { style: 1.0, line: f64::NAN, cyc: 0.0, adv: 0.0 };
    assert!(matches!(total_generator_loss(&t, &w), Err(Error::NonFiniteTerm("line"))));
    let t = LossTerms { style: 1.0, line: 1.0, cyc: 1.0, adv: 1.0 };
    assert_eq!(total_generator_loss(&t, &w).unwrap(), 5.0 + 5.0 + 10.0 + 1.0);
}
