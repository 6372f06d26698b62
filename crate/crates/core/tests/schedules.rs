use lipo_amm::lipo::{batch_advantages, AdvantageMethod, Group, LipoConfig, ResponseRecord};
use lipo_amm::sim::{default_tasks, run_seeds, run_simulation, SimConfig};
use lipo_amm::Schedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn groups(n: usize) -> Vec<Group> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    (0..n)
        .map(|g| Group {
            id: format!("g{g}"),
            responses: (0..rng.gen_range(1..8))
                .map(|i| {
                    ResponseRecord::new(
                        format!("r{i}"),
                        rng.gen_range(1..500),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect(),
        })
        .collect()
}

#[test]
fn batch_advantages_ignore_schedule() {
    let gs = groups(500);
    let cfg = LipoConfig::default();
    for method in [AdvantageMethod::Grpo, AdvantageMethod::Lipo] {
        let seq = batch_advantages(&gs, method, &cfg, Schedule::Sequential).unwrap();
        let par = batch_advantages(&gs, method, &cfg, Schedule::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), gs.len());
        assert_eq!(seq[7].group_id.as_deref(), Some("g7"));
    }
}

#[test]
fn seed_sweep_matches_single_runs() {
    let tasks = default_tasks();
    let cfg = SimConfig {
        steps: 30,
        ..SimConfig::default()
    };
    let seeds = [3, 1, 4];
    let par = run_seeds(&cfg, &tasks, &seeds, Schedule::Parallel).unwrap();
    let seq = run_seeds(&cfg, &tasks, &seeds, Schedule::Sequential).unwrap();
    assert_eq!(par, seq);
    for (outcome, &seed) in par.iter().zip(&seeds) {
        let single = run_simulation(
            &SimConfig {
                seed,
                ..cfg.clone()
            },
            &tasks,
        )
        .unwrap();
        assert_eq!(outcome, &single);
    }
    assert_ne!(par[0].metrics, par[1].metrics);
}
