use proptest::prelude::*;
use voxsim::assim::{
    apply_offsets, enkf_update, mean_of, twin_experiment, voxel_groups, AssimConfig, TwinConfig, UpdateOptions,
};
use voxsim::engine::EngineConfig;
use voxsim::hemo::BoldConfig;
use voxsim::model::Receptor;
use voxsim::netgen::{generate, ConnectomeSource, NetworkConfig, NeuronScale, Region, RegionTable};

fn small_network() -> voxsim::netgen::Network {
    let cfg = NetworkConfig {
        connectome: ConnectomeSource::Ring {
            voxels: 2,
            region: Region::Subcortex,
        },
        scale: NeuronScale::PerVoxel(300),
        regions: RegionTable::default().with_in_degree(40),
        ..Default::default()
    };
    generate(&cfg, 5).unwrap()
}

fn small_assim() -> AssimConfig {
    AssimConfig {
        members: 5,
        windows: 6,
        bold: BoldConfig {
            window_steps: 400,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn tiny_twin_is_reproducible_and_bounded() {
    let net = small_network();
    let cfg = small_assim();
    let run = || twin_experiment(&net, EngineConfig::default(), &cfg, &TwinConfig::default(), 3).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.result.offsets, b.result.offsets);
    assert_eq!(a.result.fit, b.result.fit);

    let groups = net.voxels.len();
    assert_eq!(a.truth.len(), groups);
    assert_eq!(a.result.fit.len(), cfg.windows);
    assert_eq!(a.result.trajectory.len(), cfg.windows * groups);
    let (lo, hi) = cfg.offset_bounds;
    for t in &a.result.trajectory {
        assert!(t.offset >= lo && t.offset <= hi && t.spread >= 0.0, "{t:?}");
        assert!((t.factor - t.offset.exp()).abs() < 1e-12);
    }
    assert!(a.observed.iter().flatten().all(|b| b.is_finite()));
}

#[test]
fn groups_cover_every_population_once() {
    let net = small_network();
    let groups = voxel_groups(&net, Receptor::Ampa);
    let mut seen: Vec<u32> = groups.iter().flat_map(|g| g.populations.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..net.populations.len() as u32).collect::<Vec<_>>());
}

fn ensemble(m: usize, spread: f64, center: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|j| vec![center + spread * (j as f64 - (m - 1) as f64 / 2.0)])
        .collect()
}

proptest! {
    #[test]
    fn offsets_shift_only_the_grouped_receptor(offsets in prop::collection::vec(-1.0f64..1.0, 2)) {
        let net = small_network();
        let groups = voxel_groups(&net, Receptor::Ampa);
        let base = voxsim::assim::HyperParams {
            populations: vec![std::array::from_fn(|r| voxsim::assim::LogNormal { location: r as f64, scale: 0.2 }); net.populations.len()],
        };
        let h = apply_offsets(&base, &groups, &offsets);
        for (g, o) in groups.iter().zip(&offsets) {
            for &p in &g.populations {
                for r in 0..4 {
                    let want = base.populations[p as usize][r].location + if r == Receptor::Ampa.index() { *o } else { 0.0 };
                    prop_assert_eq!(h.populations[p as usize][r].location, want);
                    prop_assert_eq!(h.populations[p as usize][r].scale, 0.2);
                }
            }
        }
    }

    /// With a linear observation the analysis pulls the predicted mean
    /// toward the observation and never widens the ensemble.
    #[test]
    fn linear_analysis_contracts(
        m in 3usize..12,
        spread in 0.05f64..1.0,
        center in -2.0f64..2.0,
        slope in 0.2f64..3.0,
        y in -4.0f64..4.0,
        var in 0.01f64..2.0,
    ) {
        let mut params = ensemble(m, spread, center);
        let predicted: Vec<Vec<f64>> = params.iter().map(|p| vec![slope * p[0]]).collect();
        let before = mean_of(&params)[0];
        let sd_before = {
            let mu = before;
            (params.iter().map(|p| (p[0] - mu).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
        };
        let opts = UpdateOptions { inflation: 1.0, spread_floor: 0.0, ..Default::default() };
        let stats = enkf_update(&mut params, &predicted, &[y], &[var], &opts).unwrap();
        let after = mean_of(&params)[0];
        prop_assert!((y - slope * after).abs() <= (y - slope * before).abs() + 1e-12);
        prop_assert!(stats.spread[0] <= sd_before + 1e-12);
    }

    #[test]
    fn analysis_is_translation_equivariant(shift in -3.0f64..3.0, y in -2.0f64..2.0) {
        let base = ensemble(6, 0.3, 0.1);
        let predicted: Vec<Vec<f64>> = base.iter().map(|p| vec![2.0 * p[0], p[0] * p[0]]).collect();
        let opts = UpdateOptions { inflation: 1.0, spread_floor: 0.0, ..Default::default() };
        let mut a = base.clone();
        let mut b: Vec<Vec<f64>> = base.iter().map(|p| vec![p[0] + shift]).collect();
        enkf_update(&mut a, &predicted, &[y, 0.5], &[0.1, 0.1], &opts).unwrap();
        enkf_update(&mut b, &predicted, &[y, 0.5], &[0.1, 0.1], &opts).unwrap();
        for (x, z) in a.iter().zip(&b) {
            prop_assert!((x[0] + shift - z[0]).abs() < 1e-9);
        }
    }
}
