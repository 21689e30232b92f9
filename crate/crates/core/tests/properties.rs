use jnd_core::audio::{energy, measured_snr, pad_silence, rms};
use jnd_core::dataset::Corpus;
use jnd_core::eval::{pearson, spearman};
use jnd_core::jnd::{fit, fit_grid, log_likelihood, next_probe, PriorSpec, ProbePolicy, Trial};
use jnd_core::metric::{MetricModel, NetConfig};
use jnd_core::perturb::{
    apply_axis, strength_to_params, AxisStep, Category, KindTemplate, PerturbContext,
    PerturbationAxis,
};
use jnd_core::reference::ReferencePool;
use jnd_core::session::{LabService, Renderer, Response, ServiceConfig, Stage, StagePayload};
use jnd_core::{synth, AudioBuffer, PadSide};
use proptest::prelude::*;

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = AudioBuffer> {
    prop::collection::vec(-1.0f64..1.0, len).prop_map(|v| AudioBuffer::canonical(v).unwrap())
}

fn template() -> impl Strategy<Value = KindTemplate> {
    use jnd_core::perturb::{EqBand, EqMode};
    prop_oneof![
        Just(KindTemplate::Additive {}),
        Just(KindTemplate::Reverb {}),
        Just(KindTemplate::Mulaw {}),
        Just(KindTemplate::ExternalCodec {}),
        Just(KindTemplate::Eq {
            band: EqBand::Low,
            mode: EqMode::Cut
        }),
        Just(KindTemplate::Eq {
            band: EqBand::High,
            mode: EqMode::Boost
        }),
        Just(KindTemplate::Pops {}),
        Just(KindTemplate::GriffinLim {}),
        Just(KindTemplate::Dropouts {}),
    ]
}

fn trials(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Trial>> {
    trials_within(0..=100, n)
}

fn trials_within(
    rho: std::ops::RangeInclusive<u32>,
    n: std::ops::Range<usize>,
) -> impl Strategy<Value = Vec<Trial>> {
    prop::collection::vec((rho, 0u8..=1), n).prop_map(|v| {
        v.into_iter()
            .map(|(r, h)| Trial::new(r as f64, h))
            .collect()
    })
}

fn small_net() -> NetConfig {
    NetConfig {
        n_layers: 5,
        base_channels: 4,
        channel_double_every: 2,
        min_input_len: 32,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_preserves_energy(x in signal(1..400), secs in 0.0f64..0.05, front in any::<bool>()) {
        let side = if front { PadSide::Front } else { PadSide::Back };
        let y = pad_silence(&x, secs, side).unwrap();
        prop_assert_eq!(energy(y.samples()), energy(x.samples()));
        let lhs = rms(&y).unwrap().powi(2) * y.len() as f64;
        let rhs = rms(&x).unwrap().powi(2) * x.len() as f64;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
    }

    #[test]
    fn doubling_noise_costs_six_db(seed in 0u64..1000, g in 0.001f64..0.5) {
        let clean = synth::speech_like(seed, 800);
        let noise = synth::speech_like(seed + 1, 800);
        let mix = |k: f64| {
            let v = clean.samples().iter().zip(noise.samples()).map(|(c, n)| c + k * g * n).collect();
            clean.with_samples(v).unwrap()
        };
        let drop = measured_snr(&clean, &mix(1.0)).unwrap() - measured_snr(&clean, &mix(2.0)).unwrap();
        prop_assert!((drop - 20.0 * 2f64.log10()).abs() <= 1e-6);
    }

    #[test]
    fn strength_maps_inside_intervals(t in template(), rho in 0.0f64..=100.0, w in 0.001f64..=1.0) {
        prop_assert!(strength_to_params(&t, rho, w).in_range());
    }

    #[test]
    fn additive_axis_is_pure_and_monotone(seed in 0u64..500, r1 in 0.0f64..100.0, gap in 1.0f64..50.0) {
        let ctx = PerturbContext::builtin();
        let axis = PerturbationAxis {
            seed,
            steps: vec![AxisStep { category: Category::Additive, template: KindTemplate::Additive {}, weight: 1.0 }],
            noise_source: Some("pink".into()),
        };
        let x = synth::speech_like(seed, 1200);
        let r2 = (r1 + gap).min(100.0);
        let a = apply_axis(&axis, r1, &x, &ctx).unwrap();
        prop_assert_eq!(&a, &apply_axis(&axis, r1, &x, &ctx).unwrap());
        let b = apply_axis(&axis, r2, &x, &ctx).unwrap();
        prop_assert!(measured_snr(&x, &a).unwrap() > measured_snr(&x, &b).unwrap());
    }

    #[test]
    fn likelihood_bounds_and_flips(ts in trials(1..30), mu in 0.0f64..100.0, sigma in 0.5f64..50.0, k in any::<prop::sample::Index>()) {
        let ll = log_likelihood(&ts, mu, sigma).unwrap();
        prop_assert!(ll <= 0.0);
        // flip one trial against the model's majority prediction
        let i = k.index(ts.len());
        let mut flipped = ts.clone();
        flipped[i].h = u8::from(ts[i].rho < mu);
        prop_assert!(log_likelihood(&flipped, mu, sigma).unwrap() <= ll + 1e-12);
    }

    #[test]
    fn flat_prior_grid_is_translation_equivariant(ts in trials_within(30..=70, 4..20), delta in -10i32..=10) {
        let shifted: Vec<Trial> = ts.iter().map(|t| Trial::new(t.rho + delta as f64, t.h)).collect();
        let a = fit_grid(&ts, &PriorSpec::Flat);
        prop_assume!((12.0..=88.0).contains(&a.mu));
        let b = fit_grid(&shifted, &PriorSpec::Flat);
        prop_assert_eq!(b.mu, a.mu + delta as f64);
        prop_assert_eq!(b.sigma, a.sigma);
    }

    #[test]
    fn balanced_counts_probe_the_estimate(ts in trials(1..20), n in 0usize..12) {
        let policy = ProbePolicy::default();
        let f = fit(&ts, &policy.prior);
        prop_assert_eq!(f, fit(&ts, &policy.prior));
        let index = policy.exploration_schedule.len() + n;
        prop_assert_eq!(next_probe(&f, n, n, index, &policy), f.mu);
    }

    #[test]
    fn spearman_ignores_monotone_maps(v in prop::collection::vec((0i64..1000, 0i64..1000), 3..40)) {
        let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
        let Ok(base) = spearman(&x, &y) else { return Ok(()); };
        let cubed: Vec<f64> = x.iter().map(|a| a * a * a + 7.0).collect();
        prop_assert_eq!(spearman(&cubed, &y).unwrap(), base);
        prop_assert_eq!(spearman(&y, &x).unwrap(), base);
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40), a in 0.01f64..100.0, b in -100.0f64..100.0) {
        let x: Vec<f64> = v.iter().map(|p| p.0).collect();
        let y: Vec<f64> = v.iter().map(|p| p.1).collect();
        let Ok(base) = pearson(&x, &y) else { return Ok(()); };
        let moved: Vec<f64> = x.iter().map(|t| a * t + b).collect();
        prop_assert!((pearson(&moved, &y).unwrap() - base).abs() <= 1e-12);
        prop_assert!((pearson(&y, &x).unwrap() - base).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distance_is_a_symmetric_nonnegative_premetric(seed in 0u64..100, a in signal(40..300), b in signal(40..300)) {
        let model = MetricModel::<f64>::init(small_net(), seed).unwrap();
        prop_assert_eq!(model.distance(&a, &a).unwrap(), 0.0);
        let ab = model.distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - model.distance(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(ab, model.distance(&a, &b).unwrap());
        let (d1, d2) = (ab, ab * 1.5 + 0.1);
        prop_assert!(model.predict(d1) <= model.predict(d2));
    }

    #[test]
    fn illegal_transitions_change_nothing(actions in prop::collection::vec(0u8..7, 1..40)) {
        let renderer = Renderer::new(ReferencePool::synthetic(2, 1, 4000), PerturbContext::builtin(), None);
        let config = ServiceConfig { logical_clock: true, ..Default::default() };
        let mut s = LabService::new(config, renderer, Corpus::in_memory(PriorSpec::default())).unwrap();
        let id = s.create_session().unwrap().session_id;
        let word = s.config().attention.answer.clone();
        let order = [Stage::Calibration, Stage::Attention, Stage::Teaching, Stage::Trials, Stage::Comments, Stage::Done];
        let rank = |st: Stage| order.iter().position(|o| *o == st).unwrap();
        for a in actions {
            let before = s.session_state(&id).unwrap().clone();
            let outcome = match a {
                0 => s.submit_stage(&id, StagePayload::Calibration { acknowledged: true }).map(|_| ()),
                1 => s.submit_stage(&id, StagePayload::Attention { word: word.clone() }).map(|_| ()),
                2 => s.submit_stage(&id, StagePayload::Teaching { answers: vec![Response::Same, Response::Different] }).map(|_| ()),
                3 => s.next_trial(&id).map(|_| ()),
                4 | 5 => match &before.pending {
                    Some(p) => s.submit_answer(&id, p.trial_id, if a == 4 { Response::Same } else { Response::Different }).map(|_| ()),
                    None => s.submit_answer(&id, 0, Response::Same).map(|_| ()),
                },
                _ => s.submit_stage(&id, StagePayload::Comments { text: String::new() }).map(|_| ()),
            };
            let after = s.session_state(&id).unwrap();
            if outcome.is_err() {
                prop_assert_eq!(after, &before);
            }
            prop_assert!(rank(after.stage) >= rank(before.stage));
            prop_assert!(rank(after.stage) <= rank(before.stage) + 1 || after.stage == Stage::Done);
        }
    }
}
