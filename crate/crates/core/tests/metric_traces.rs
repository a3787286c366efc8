mod common;

use common::{fixture_mismatches, metric_fixtures, scan_early_stops};
use num_rational::Ratio;
use roadnorms::metrics::{
    count_early_stops, episode_metrics, lane_change_events, platoon_stats, recompute_rewards, summarize, MetricsError,
};
use roadnorms::orchestrator::EpisodeOutcome;
use roadnorms::{Cell, Status};

#[test]
fn fixtures_match_hand_traces() {
    let fixtures = metric_fixtures();
    assert!(fixtures.len() >= 10);
    let bad = fixture_mismatches(&fixtures);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn both_crash_fixtures_end_in_the_middle() {
    let fixtures = metric_fixtures();
    for name in ["crash without early stops", "crash after early stops"] {
        let f = fixtures.iter().find(|f| f.name == name).unwrap();
        assert_eq!(f.log.outcome, EpisodeOutcome::CrashOccurred);
        for v in f.log.final_state.vehicles.values() {
            assert_eq!((v.position, v.status), (Cell::new(5, 5), Status::Crashed));
        }
    }
}

#[test]
fn fraction_examples() {
    let fixtures = metric_fixtures();
    let get = |name: &str| {
        platoon_stats(&fixtures.iter().find(|f| f.name == name).unwrap().log)
            .unwrap()
            .time_fraction
    };
    assert_eq!(get("platoon every counted step"), Ratio::from_integer(1));
    assert_eq!(get("platoon three of five steps"), Ratio::new(3, 5));
}

#[test]
fn brute_force_scan_agrees() {
    for f in metric_fixtures().iter().filter(|f| f.early_stops.is_some()) {
        for color in ["green", "red"] {
            assert_eq!(
                count_early_stops(&f.log, color).unwrap(),
                scan_early_stops(&f.log, color)
            );
        }
    }
}

#[test]
fn rewards_recompute_from_steps() {
    for f in metric_fixtures() {
        let sums = recompute_rewards(&f.log);
        for (id, v) in &f.log.final_state.vehicles {
            assert_eq!(sums[id], v.cumulative_reward, "{}: {id}", f.name);
        }
    }
}

#[test]
fn wrong_scenario_is_rejected() {
    let fixtures = metric_fixtures();
    let platoon = fixtures.iter().find(|f| f.platoon.is_some()).unwrap();
    let inter = fixtures.iter().find(|f| f.early_stops.is_some()).unwrap();
    assert!(matches!(
        count_early_stops(&platoon.log, "red"),
        Err(MetricsError::WrongScenario { .. })
    ));
    assert!(matches!(
        lane_change_events(&inter.log),
        Err(MetricsError::WrongScenario { .. })
    ));
    assert!(matches!(
        platoon_stats(&inter.log),
        Err(MetricsError::WrongScenario { .. })
    ));
    assert!(matches!(
        count_early_stops(&inter.log, "blue"),
        Err(MetricsError::UnknownColor(_))
    ));

    let mixed = vec![episode_metrics(&platoon.log), episode_metrics(&inter.log)];
    assert!(matches!(summarize(&mixed), Err(MetricsError::MixedScenarios(..))));
}

#[test]
fn summary_rates() {
    let fixtures = metric_fixtures();
    let inter: Vec<_> = fixtures
        .iter()
        .filter(|f| f.early_stops.is_some())
        .map(|f| episode_metrics(&f.log))
        .collect();
    let s = summarize(&inter).unwrap();
    assert_eq!((s.n_episodes, s.n_success), (6, 3));
    assert_eq!(s.rate, Some(Ratio::new(1, 2)));
    assert_eq!(s.rate_text(), "0.50");
    assert_eq!(s.mean_early_stops["red"], Ratio::new(35, 6));
    assert_eq!(s.n_yield_episodes, 1);

    let mut reversed = inter.clone();
    reversed.reverse();
    assert_eq!(summarize(&reversed).unwrap(), s);
}

#[test]
fn table_rows_from_counts() {
    // 48 of 50 and 40 of 50 print as the two-decimal rates of the tables.
    let base = episode_metrics(&metric_fixtures()[2].log);
    let mut batch = vec![base.clone(); 48];
    let mut crash = base;
    crash.outcome = EpisodeOutcome::CrashOccurred;
    crash.norm_adherent = false;
    batch.extend([crash.clone(), crash]);
    let s = summarize(&batch).unwrap();
    assert_eq!(s.rate_text(), "0.96");
    assert_eq!(s.rate, Some(Ratio::new(24, 25)));

    let ok = episode_metrics(&metric_fixtures()[7].log);
    let mut fail = ok.clone();
    fail.platoon.as_mut().unwrap().success = false;
    let mut batch = vec![ok; 40];
    batch.extend(std::iter::repeat_n(fail, 10));
    assert_eq!(summarize(&batch).unwrap().rate_text(), "0.80");
}
