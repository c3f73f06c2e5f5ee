//! Randomized invariants of the optimizer and the run records.

use proptest::prelude::*;

use dropmuon::costmodel::CostParams;
use dropmuon::geometry::{Matrix, NormKind};
use dropmuon::harness::{read_csv, write_csv, RunChecks, RunRecord, RunRow};
use dropmuon::optimizer::{det_step, run, LayerModel, RunConfig, StepPolicy};
use dropmuon::problems::{ForwardCache, Objective, SeparableQuadratic, TableLayout};
use dropmuon::sampling::{ActiveSet, SamplingScheme, SeedStreams, StreamPurpose};

fn norm_kind() -> impl Strategy<Value = NormKind> {
    prop_oneof![Just(NormKind::Euclidean), Just(NormKind::Spectral)]
}

fn quadratic(seed: u64, b: usize) -> SeparableQuadratic {
    let mut r = SeedStreams::new(seed).rng(StreamPurpose::Data, 0);
    let shapes: Vec<(usize, usize)> = (0..b).map(|i| (1 + (i + seed as usize) % 3, 1 + i % 4)).collect();
    let curv = (0..b).map(|i| 0.5 + i as f64).collect();
    SeparableQuadratic::random(&shapes, curv, 1.0, &mut r).unwrap()
}

fn start(p: &SeparableQuadratic, seed: u64) -> Vec<Matrix> {
    let mut r = SeedStreams::new(seed).rng(StreamPurpose::Initialization, 0);
    p.targets().iter().map(|a| a.add(&Matrix::random_normal(a.rows(), a.cols(), &mut r))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn deterministic_step_freezes_inactive_and_descends(
        seed in 0u64..1000,
        norms in prop::collection::vec(norm_kind(), 2..5),
        cut in 0usize..4,
    ) {
        let b = norms.len();
        let cut = cut.min(b - 1);
        let p = quadratic(seed, b);
        let table = p.smoothness_table(&norms, &TableLayout::Rpt).unwrap();
        let mut model = LayerModel::new(start(&p, seed), norms).unwrap();
        let before = model.clone();
        let rep = det_step(&p, &mut model, &ActiveSet::range(cut, b), &StepPolicy::SmoothInverse, &table, &mut ForwardCache::default()).unwrap();
        for i in 0..cut {
            prop_assert_eq!(&model.layers[i], &before.layers[i]);
        }
        prop_assert!(rep.f_after <= rep.f_before + 1e-12);
        prop_assert!(rep.f_after <= rep.descent_bound.unwrap() + 1e-9);
        prop_assert!((p.value(&model.layers).unwrap() - rep.f_after).abs() <= 1e-12);
    }

    #[test]
    fn stochastic_runs_stay_within_radius(
        seed in 0u64..1000,
        b in 2usize..5,
        radius in 0.01f64..0.5,
    ) {
        let p = quadratic(seed, b);
        let model = LayerModel::new(start(&p, seed), vec![NormKind::Spectral; b]).unwrap();
        let cfg = RunConfig {
            scheme: SamplingScheme::TauNice { b, tau: 1 },
            epoch_shift_alpha: None,
            policy: StepPolicy::FixedRadius { radii: vec![radius; b], beta: 0.5 },
            iterations: 10,
            seed,
            noise: None,
            momentum_init: Default::default(),
            orthogonalizer: Default::default(),
            cost: Some(CostParams::new(1.0, vec![1.0; b], vec![0.5; b]).unwrap()),
        };
        let out = run(&p, model, &cfg, None).unwrap();
        for r in &out.reports {
            prop_assert_eq!(r.layers.len(), 1);
            prop_assert!(r.layers[0].displacement <= radius * (1.0 + 1e-9));
            prop_assert!(r.cost_units.unwrap() > 0.0);
        }
    }

    #[test]
    fn csv_round_trips_any_rows(
        rows in prop::collection::vec(
            (-1e6f64..1e6, 0.0f64..1e6, prop::option::of(0.0f64..1e3), 0usize..8, 1usize..8, 0.0f64..100.0, prop::option::of(0u64..1_000_000)),
            0..20,
        )
    ) {
        let mut cumulative = 0.0;
        let rows: Vec<RunRow> = rows
            .into_iter()
            .enumerate()
            .map(|(k, (f, gap, agg, amin, asize, units, macs))| {
                cumulative += units;
                RunRow { k, f, f_gap: gap, grad_aggregate: agg, active_min: amin, active_size: asize, step_units: units, cumulative_units: cumulative, measured_macs: macs }
            })
            .collect();
        let rec = RunRecord {
            variant: "v".into(), seed: 0, initial_f: 1.0, f_star: 0.0, setup_units: 0.0, setup_macs: None,
            rows: rows.clone(), checks: RunChecks::default(), warnings: vec![],
        };
        let mut buf = Vec::new();
        write_csv(&rec, &mut buf).unwrap();
        prop_assert_eq!(read_csv(&buf[..]).unwrap(), rows);
    }
}
