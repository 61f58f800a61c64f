use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tidac_core::anneal::{
    anneal, grid_search, neighbor, temperature_schedule, AnnealParams, GridAxis, MeterObjective, NeighborWindow,
};
use tidac_core::meter::{CaptureConfig, CostScale, SpurMeter};
use tidac_core::plant::{PlantModel, RegisterFile, RegisterMap, RegisterRole, NUM_REGISTERS};
use tidac_core::spectral::{DacConfig, ToneSpec};
use tidac_core::Result;

/// Smooth bowl with its minimum at `target`, plus a fixed ripple.
fn bowl(target: [u32; NUM_REGISTERS]) -> impl FnMut(&RegisterFile) -> Result<f64> {
    move |s: &RegisterFile| {
        Ok(s.codes()
            .iter()
            .zip(&target)
            .map(|(c, t)| {
                let d = *c as f64 - *t as f64;
                d * d + 3.0 * (d * 0.7).sin().abs()
            })
            .sum())
    }
}

#[test]
fn neighbor_register_choice_is_uniform() {
    let map = RegisterMap::default();
    let start = RegisterFile::reset(&map);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 100_000;
    let mut counts = [0usize; NUM_REGISTERS];
    for _ in 0..draws {
        let next = neighbor(&start, &map, NeighborWindow::Lsb(32), &mut rng);
        assert!(start.hamming(&next) <= 1);
        // Self-neighbors leave no trace, so only moves are counted.
        if let Some(i) = (0..NUM_REGISTERS).find(|i| next.codes()[*i] != start.codes()[*i]) {
            counts[i] += 1;
        }
    }
    let moved: usize = counts.iter().sum();
    let expected = moved as f64 / NUM_REGISTERS as f64;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    // 5 degrees of freedom, p = 0.001 critical value.
    assert!(chi2 < 20.52, "chi2 {chi2} counts {counts:?}");
    for c in counts {
        assert!((c as f64 / moved as f64 - 1.0 / 6.0).abs() < 0.01);
    }
}

#[test]
fn full_range_neighbor_is_uniform_over_codes() {
    let map = RegisterMap::default().with_active(&[RegisterRole::DutyFine]);
    let address = map.address_of(RegisterRole::DutyFine);
    let start = RegisterFile::reset(&map);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 256 * 400;
    let mut counts = vec![0usize; 256];
    for _ in 0..draws {
        counts[neighbor(&start, &map, NeighborWindow::FullRange, &mut rng).codes()[address] as usize] += 1;
    }
    let expected = draws as f64 / 256.0;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    // 255 degrees of freedom, p = 0.001 critical value.
    assert!(chi2 < 330.5, "chi2 {chi2}");
}

#[test]
fn huge_beta_never_goes_uphill() {
    let map = RegisterMap::default();
    let start = RegisterFile::reset(&map);
    for seed in 0..20 {
        let params = AnnealParams { beta: 1e12, seed, t_max: 10.0, t_min: 0.1, ..AnnealParams::default() };
        let r = anneal(&mut bowl([100, 140, 90, 128, 60, 200]), &map, &start, &params).unwrap();
        assert_eq!(r.accepted_uphill, 0);
        // Every accepted move is downhill or level.
        let mut current = r.cost_trace[0].cost;
        for e in r.cost_trace.iter().skip(1).filter(|e| e.accepted) {
            assert!(e.cost <= current);
            current = e.cost;
        }
    }
}

#[test]
fn best_cost_is_monotone_and_accounted() {
    let map = RegisterMap::default();
    let start = RegisterFile::reset(&map);
    for seed in 0..10 {
        let params = AnnealParams { seed, t_max: 50.0, t_min: 0.5, beta: 1.0, ..AnnealParams::default() };
        let r = anneal(&mut bowl([10, 250, 128, 3, 77, 190]), &map, &start, &params).unwrap();
        let first = r.cost_trace[0].cost;
        let mut best = f64::INFINITY;
        for e in &r.cost_trace {
            assert!(e.best_cost <= best);
            best = e.best_cost;
        }
        let min_seen = r.cost_trace.iter().map(|e| e.cost).fold(f64::INFINITY, f64::min);
        assert!(r.best_cost <= first);
        assert_eq!(r.best_cost, min_seen);
        assert_eq!(r.measurement_count, r.cost_trace.len());
        assert_eq!(r.measurement_count, 1 + params.k_inner * r.outer_iterations);
        assert_eq!(r.outer_iterations, temperature_schedule(50.0, 0.5, 0.8).len());
    }
}

#[test]
fn schedule_is_exactly_geometric() {
    let temps = temperature_schedule(3.0, 0.02, 0.8);
    for (n, t) in temps.iter().enumerate() {
        assert_eq!(*t, 3.0 * 0.8f64.powi(n as i32));
        assert!(*t > 0.02);
    }
    assert!(3.0 * 0.8f64.powi(temps.len() as i32) <= 0.02);
}

#[test]
fn identical_inputs_give_identical_runs() {
    let plant = PlantModel::default_for(DacConfig::new(50e9, 10).unwrap()).unwrap();
    let capture = CaptureConfig { fft_size: 2048, ..CaptureConfig::default() };
    let tone = ToneSpec::new(18e9, 1.0);
    let run = |seed| {
        let mut meter = SpurMeter::new(plant.clone(), tone, capture, seed).unwrap();
        let mut obj = MeterObjective::new(&mut meter, CostScale::Decibel);
        let params = AnnealParams { seed, t_max: 100.0, t_min: 30.0, ..AnnealParams::default() };
        anneal(&mut obj, &plant.registers, &plant.reset_file(), &params).unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).cost_trace, run(6).cost_trace);
}

#[test]
fn grid_with_the_optimum_on_the_lattice_finds_it() {
    let map = RegisterMap::default();
    let target = [40, 128, 200, 128, 72, 128];
    let axes = [
        GridAxis { address: 0, start: 0, stride: 40, count: 6 },
        GridAxis { address: 2, start: 120, stride: 40, count: 3 },
        GridAxis { address: 4, start: 8, stride: 32, count: 5 },
    ];
    let r = grid_search(&mut bowl(target), &map, &RegisterFile::reset(&map), &axes, 90).unwrap();
    assert_eq!(r.best_state.codes(), target);
    assert_eq!(r.measurement_count, 90);
}

#[test]
fn stride_one_grid_on_a_toy_plant_is_exhaustive() {
    let map = RegisterMap::uniform(4).with_active(&[RegisterRole::CurrentA, RegisterRole::DutyCoarse]);
    let (a, d) = (map.address_of(RegisterRole::CurrentA), map.address_of(RegisterRole::DutyCoarse));
    let mut target = RegisterFile::reset(&map).codes();
    target[a] = 3;
    target[d] = 13;
    let axes = [GridAxis { address: a, start: 0, stride: 1, count: 16 }, GridAxis { address: d, start: 0, stride: 1, count: 16 }];
    let r = grid_search(&mut bowl(target), &map, &RegisterFile::reset(&map), &axes, 256).unwrap();
    assert_eq!(r.best_state.codes(), target);
    assert_eq!(r.measurement_count, 256);
}

#[test]
fn annealing_beats_the_default_grid_at_high_frequency() {
    let dac = DacConfig::new(50e9, 10).unwrap();
    let mut cfg = tidac_core::experiment::ExperimentConfig::default_for(dac);
    cfg.seeds = vec![0, 1, 2];
    let plant = cfg.plant.build(&dac).unwrap();
    let capture = cfg.capture_config();
    let tone = ToneSpec::new(22e9, 1.0);
    for seed in cfg.seeds.clone() {
        let (sa, _) = tidac_core::experiment::calibrate_once(&plant, &tone, &capture, &cfg.anneal, seed).unwrap();
        let grid = tidac_core::experiment::grid_once(&plant, &tone, &capture, &cfg.grid, CostScale::Decibel, seed).unwrap();
        assert!(sa.post_cal_spur_dbc <= grid.post_cal_spur_dbc, "{} vs {}", sa.post_cal_spur_dbc, grid.post_cal_spur_dbc);
        assert!(sa.measurement_count < grid.measurement_count);
    }
}
