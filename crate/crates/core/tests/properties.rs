use chrono::{DateTime, Duration, FixedOffset};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thermosleep::panel_engine::{brute_force_fit, demean_hdfe, fit, DemeanOptions, FeDim, FitOptions, Panel};
use thermosleep::response_models::{marginal_effects, Season};
use thermosleep::sleep_ingest::{
    aggregate_epochs, read_epochs_csv, write_epochs_csv, ClockWindow, Epoch, EpochStream, SleepState,
    DEFAULT_BRIDGE_GAP_MIN,
};
use thermosleep::synth::{synth_panel, PanelSynthConfig, Truth};

fn panel(seed: u64, n: usize, levels: &[u32], k: usize, clusters: u32) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fe: Vec<FeDim> = levels
        .iter()
        .enumerate()
        .map(|(d, &l)| FeDim {
            name: format!("d{d}"),
            ids: (0..n).map(|_| rng.random_range(0..l)).collect(),
        })
        .collect();
    let x: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let y = (0..n)
        .map(|i| x.iter().map(|c| 0.5 * c[i]).sum::<f64>() + rng.random_range(-1.0..1.0))
        .collect();
    let cluster = (0..n).map(|_| rng.random_range(0..clusters)).collect();
    Panel::new(y, x, (0..k).map(|j| format!("x{j}")).collect(), fe, cluster).unwrap()
}

fn levels_strategy() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(2u32..20, 1..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fit_agrees_with_dummy_oracle(seed in any::<u64>(), n in 60usize..200, levels in levels_strategy(), k in 1usize..=3) {
        let p = panel(seed, n, &levels, k, 6);
        let (a, b) = (fit(&p, &FitOptions::default()), brute_force_fit(&p));
        prop_assume!(a.is_ok() && b.is_ok());
        let (a, b) = (a.unwrap(), b.unwrap());
        prop_assert_eq!(a.k_absorbed, b.k_absorbed);
        for j in 0..k {
            prop_assert!((a.beta[j] - b.beta[j]).abs() < 1e-8);
            prop_assert!((a.se[j] - b.se[j]).abs() <= 1e-6 * b.se[j]);
        }
    }

    #[test]
    fn fixed_effect_shifts_leave_slopes_unchanged(seed in any::<u64>(), levels in levels_strategy()) {
        let p = panel(seed, 150, &levels, 2, 5);
        let base = fit(&p, &FitOptions::default());
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut q = p.clone();
        for d in &p.fe {
            let shift: Vec<f64> = (0..20).map(|_| rng.random_range(-100.0..100.0)).collect();
            for (y, &g) in q.y.iter_mut().zip(&d.ids) {
                *y += shift[g as usize];
            }
        }
        let shifted = fit(&q, &FitOptions::default()).unwrap();
        for j in 0..2 {
            prop_assert!((base.beta[j] - shifted.beta[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn demeaned_columns_have_zero_group_sums(seed in any::<u64>(), levels in levels_strategy()) {
        let p = panel(seed, 150, &levels, 1, 5);
        let dm = demean_hdfe(&p, &DemeanOptions::default());
        prop_assume!(dm.is_ok());
        let dm = dm.unwrap();
        for d in &p.fe {
            let mut sums = vec![0.0; 20];
            for (pos, &row) in dm.rows.iter().enumerate() {
                sums[d.ids[row] as usize] += dm.x[0][pos];
            }
            prop_assert!(sums.iter().all(|s| s.abs() < 1e-6));
        }
    }

    #[test]
    fn scaling_outcome_scales_estimates(seed in any::<u64>(), c in prop::sample::select(vec![-4.0, -0.5, 0.25, 2.0, 8.0])) {
        let p = panel(seed, 120, &[8, 6], 1, 5);
        let a = fit(&p, &FitOptions::default());
        prop_assume!(a.is_ok());
        let a = a.unwrap();
        let mut q = p.clone();
        q.y.iter_mut().for_each(|y| *y *= c);
        let b = fit(&q, &FitOptions::default()).unwrap();
        prop_assert!((b.beta[0] - c * a.beta[0]).abs() < 1e-8 * (1.0 + a.beta[0].abs() * c.abs()));
        prop_assert!((b.se[0] - c.abs() * a.se[0]).abs() < 1e-6 * b.se[0]);
    }

    #[test]
    fn records_are_internally_consistent(runs in prop::collection::vec((1i64..400, any::<bool>()), 1..40)) {
        let t0: DateTime<FixedOffset> = DateTime::parse_from_rfc3339("2016-06-01T18:00:00-05:00").unwrap();
        let mut epochs = Vec::new();
        let mut m = 0;
        for (len, asleep) in runs {
            for _ in 0..len {
                epochs.push(Epoch {
                    timestamp: t0 + Duration::minutes(m),
                    state: if asleep { SleepState::Sleep } else { SleepState::Wake },
                });
                m += 1;
            }
        }
        let stream = EpochStream { user_id: "u".into(), epochs };
        let recs = aggregate_epochs(&stream, ClockWindow::default(), DEFAULT_BRIDGE_GAP_MIN).unwrap();
        let mut dates: Vec<_> = recs.iter().map(|r| r.night_date).collect();
        dates.dedup();
        prop_assert_eq!(dates.len(), recs.len(), "one record per night");
        for r in &recs {
            prop_assert!(r.onset_min < r.offset_min);
            prop_assert!(r.duration_min > 0 && i64::from(r.duration_min) <= r.offset_min - r.onset_min);
            prop_assert_eq!(r.midsleep_min, (r.onset_min + r.offset_min) as f64 / 2.0);
            if let Some(t) = r.total24h_min {
                prop_assert!(t >= r.duration_min);
            }
        }

        let mut buf = Vec::new();
        write_epochs_csv(&mut buf, std::slice::from_ref(&stream)).unwrap();
        let back = read_epochs_csv(buf.as_slice(), "roundtrip").unwrap();
        prop_assert_eq!(back, vec![stream]);
    }
}

#[test]
fn season_slopes_recovered_in_order() {
    let truth = Truth::Season {
        winter: -0.15,
        spring: -0.22,
        summer: -0.45,
        fall: -0.30,
    };
    let cfg = PanelSynthConfig {
        n_admin1: 40,
        users_per_admin1: 10,
        n_nights: 365,
        start_date: chrono::NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
        truth,
        ..PanelSynthConfig::default()
    };
    let sp = synth_panel(&cfg, 21).unwrap();
    let cols: Vec<Vec<f64>> = Season::ALL
        .iter()
        .map(|s| sp.tmin.iter().zip(&sp.season).map(|(&t, r)| if r == s { t } else { 0.0 }).collect())
        .collect();
    let names = Season::ALL.iter().map(|s| format!("tmin:{}", s.name())).collect();
    let f = fit(&sp.with_regressors(sp.panel.y.clone(), names, cols).unwrap(), &FitOptions::default()).unwrap();
    let cats: Vec<String> = Season::ALL.iter().map(|s| s.name().to_string()).collect();
    let me = marginal_effects(&f, "tmin", &cats).unwrap();
    let slope = |name: &str| me.slopes.iter().find(|s| s.category == name).unwrap().slope;
    let (w, sp_, su, fa) = (slope("winter"), slope("spring"), slope("summer"), slope("fall"));
    assert!(su < fa && fa < sp_ && sp_ < w, "summer {su} fall {fa} spring {sp_} winter {w}");
    for (name, truth) in [("winter", -0.15), ("spring", -0.22), ("summer", -0.45), ("fall", -0.30)] {
        let s = me.slopes.iter().find(|s| s.category == name).unwrap();
        assert!((s.slope - truth).abs() <= 3.0 * s.se, "{name}: {} (SE {}) vs {truth}", s.slope, s.se);
    }
    // summer is about three times winter
    assert!((su / w - 3.0).abs() < 1.0, "ratio {}", su / w);
}
