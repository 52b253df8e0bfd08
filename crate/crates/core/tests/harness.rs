use std::collections::HashMap;
use std::path::Path;

use tsc_core::controllers::ControllerParams;
use tsc_core::harness::{
    export_reports, run_baseline, run_eval, run_training, synthesize_flow, write_flow, BasePattern, FlowSource,
    FlowStats, FlowSynthesisSpec, Method, NetworkSource, RunConfig,
};
use tsc_core::learner::{AgentConfig, PpoConfig, TrainConfig};
use tsc_core::network::{NetworkSpec, RoadNetwork};
use tsc_core::neural::MixingMode;
use tsc_core::sim::{FlowSchedule, SimConfig};

fn config(out: &Path, net: NetworkSpec, flow: FlowSource, horizon: u32) -> RunConfig {
    RunConfig {
        network: NetworkSource::Inline(net),
        flow,
        controller: Some("fixed".into()),
        controller_params: ControllerParams::default(),
        learner: None,
        sim: SimConfig {
            t_tsc_s: horizon,
            ..Default::default()
        },
        pressure_form: Default::default(),
        out: out.to_path_buf(),
        seed: 0,
        episodes: 1,
    }
}

fn small() -> NetworkSpec {
    NetworkSpec { rows: 2, cols: 2, lane_length_m: 150.0 }
}

fn small_flow() -> FlowSource {
    FlowSource::Synthesize(FlowSynthesisSpec {
        total_vehicles: 200,
        horizon_s: 600,
        resample_fraction: 0.3,
        seed: 9,
        ..Default::default()
    })
}

/// Independent recomputation: arrivals per 300 s read back from the flow file.
fn recompute_stats(path: &Path, horizon: u32) -> (f64, f64, usize, usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut bins = vec![0usize; (horizon / 300) as usize];
    for line in text.lines().skip(1) {
        let t: u32 = line.split(',').next().unwrap().parse().unwrap();
        bins[(t / 300) as usize] += 1;
    }
    let n = bins.len() as f64;
    let mean = bins.iter().sum::<usize>() as f64 / n;
    let std = (bins.iter().map(|&b| (b as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, std, *bins.iter().max().unwrap(), *bins.iter().min().unwrap())
}

#[test]
fn fluctuation_raises_arrival_spread_and_stats_round_trip() {
    let net = RoadNetwork::build_grid(3, 3, 300.0).unwrap();
    for (seed, pattern) in [(0, BasePattern::Uniform), (1, BasePattern::PeakedOd), (2, BasePattern::RushHourRamp)] {
        let spec = FlowSynthesisSpec {
            pattern,
            total_vehicles: 1500,
            resample_fraction: 0.3,
            fluctuation_factor: 2.0,
            seed,
            ..Default::default()
        };
        let f = synthesize_flow(&net, &spec).unwrap();
        assert!(f.stats.std >= f.base_stats.std, "{pattern:?}");
        assert_eq!(f.flow.len(), 1500 + 900);
        let dir = tempfile::tempdir().unwrap();
        write_flow(dir.path(), &f).unwrap();
        let (mean, std, max, min) = recompute_stats(&dir.path().join("flow.csv"), 3600);
        assert!((mean - f.stats.mean).abs() < 1e-12);
        assert!((std - f.stats.std).abs() < 1e-12);
        assert_eq!((max, min), (f.stats.max, f.stats.min));
        let csv = std::fs::read_to_string(dir.path().join("flow_stats.csv")).unwrap();
        assert!(csv.starts_with("mean,std,max,min\n"));
        let reread = FlowSchedule::load(&dir.path().join("flow.csv")).unwrap();
        assert_eq!(FlowStats::compute(&reread, 3600, 300), f.stats);
    }
}

#[test]
fn peaked_pattern_concentrates_on_middle_roads() {
    let net = RoadNetwork::build_grid(3, 3, 300.0).unwrap();
    let count_middle = |pattern| {
        let spec = FlowSynthesisSpec { pattern, total_vehicles: 3000, seed: 4, ..Default::default() };
        let f = synthesize_flow(&net, &spec).unwrap();
        f.flow
            .entries
            .iter()
            .filter(|e| {
                let lane = net.lane(e.route[0]);
                let x = net.intersection(lane.jurisdiction);
                x.grid_pos.0 == 1 || x.grid_pos.1 == 1
            })
            .count()
    };
    assert!(count_middle(BasePattern::PeakedOd) > count_middle(BasePattern::Uniform) * 5 / 4);
}

#[test]
fn empty_flow_reports_undefined_travel_time() {
    let dir = tempfile::tempdir().unwrap();
    let flow = dir.path().join("empty.csv");
    std::fs::write(&flow, "enter_s,route\n").unwrap();
    let cfg = config(&dir.path().join("run"), small(), FlowSource::Path(flow), 300);
    let r = run_baseline(&cfg).unwrap();
    assert_eq!(r.vehicles, 0);
    assert!(!r.travel_time_defined);
    assert_eq!(r.average_travel_time_s, None);
}

#[test]
fn baseline_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let read = |d: &Path| {
        ["baseline.json", "baseline.csv", "rewards.csv", "manifest.json"]
            .map(|f| std::fs::read(d.join(f)).unwrap())
    };
    let mut cfg = config(&dir.path().join("a"), small(), small_flow(), 600);
    cfg.controller = Some("maxpressure".into());
    run_baseline(&cfg).unwrap();
    let a = read(&cfg.out);
    run_baseline(&cfg).unwrap();
    assert_eq!(a, read(&cfg.out));
}

#[test]
fn max_pressure_beats_fixed_time_on_uniform_flow() {
    let dir = tempfile::tempdir().unwrap();
    let flow = FlowSource::Synthesize(FlowSynthesisSpec { total_vehicles: 2500, seed: 7, ..Default::default() });
    let net = NetworkSpec { rows: 3, cols: 3, lane_length_m: 300.0 };
    let mut cfg = config(dir.path(), net, flow, 3600);
    let fixed = run_baseline(&cfg).unwrap().average_travel_time_s.unwrap();
    cfg.controller = Some("maxpressure".into());
    let mp = run_baseline(&cfg).unwrap().average_travel_time_s.unwrap();
    // First desk run: 176.10 vs 152.87.
    assert!(mp <= fixed - 15.0, "maxpressure {mp} vs fixed {fixed}");
}

#[test]
fn eval_table_lists_every_method_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), small(), small_flow(), 600);
    cfg.episodes = 2;
    let methods: Vec<Method> = ["fixed", "maxpressure", "efficientmp", "advancedmp"]
        .iter()
        .map(|c| Method { label: c.to_string(), controller: c.to_string(), params: ControllerParams::default() })
        .collect();
    let t = run_eval(&cfg, &methods).unwrap();
    assert_eq!(t.rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["fixed", "maxpressure", "efficientmp", "advancedmp"]);
    for r in &t.rows {
        assert_eq!(r.travel_times.len(), 2);
    }
    let md = std::fs::read_to_string(dir.path().join("eval.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 4);
    assert!(md.contains(" ± "));
    assert_eq!(run_eval(&cfg, &methods).unwrap(), t);
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

fn plain_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va.sqrt() * vb.sqrt()))
}

#[test]
fn training_run_exports_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut cfg = config(&run, small(), small_flow(), 600);
    cfg.controller = None;
    cfg.learner = Some(TrainConfig {
        agent: AgentConfig { mixing: MixingMode::LearnedSoftmax, ..Default::default() },
        ppo: PpoConfig { iterations: 2, epochs: 1, minibatch: 16, ..Default::default() },
        ..Default::default()
    });
    let outcome = run_training(&cfg, false).unwrap();
    let files = export_reports(&run, &dir.path().join("reports")).unwrap();

    let (header, rows) = parse_csv(&std::fs::read_to_string(files.value_error.unwrap()).unwrap());
    assert_eq!(header, ["iteration", "value_error"]);
    assert_eq!(rows.len(), outcome.curve.iter().filter(|r| r.value_error.is_some()).count());

    assert_eq!(files.mixing.len(), 4);
    for path in &files.mixing {
        let (_, rows) = parse_csv(&std::fs::read_to_string(path).unwrap());
        assert_eq!(rows.len(), 4);
        for row in rows {
            let s: f64 = row[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    let (lh, ledger) = parse_csv(&std::fs::read_to_string(run.join("rewards.csv")).unwrap());
    let column = |name: &str| {
        let c = lh.iter().position(|h| h == &format!("r_{name}")).unwrap();
        ledger.iter().map(|r| r[c].parse::<f64>().unwrap()).collect::<Vec<_>>()
    };
    let (ch, corr) = parse_csv(&std::fs::read_to_string(files.correlation.unwrap()).unwrap());
    assert_eq!(ch, ["series_a", "series_b", "pearson"]);
    let got: HashMap<(String, String), String> =
        corr.into_iter().map(|r| ((r[0].clone(), r[1].clone()), r[2].clone())).collect();
    assert_eq!(got.len(), 15);
    for ((a, b), v) in &got {
        match plain_pearson(&column(a), &column(b)) {
            Some(want) => assert!((v.parse::<f64>().unwrap() - want).abs() < 1e-9, "{a},{b}"),
            None => assert_eq!(v, "NA"),
        }
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["learner"]["ppo"]["iterations"], 2);
    assert_eq!(manifest["network"]["rows"], 2);
}

#[test]
fn resumed_training_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), small(), small_flow(), 600);
    cfg.controller = None;
    let mut tc = TrainConfig {
        ppo: PpoConfig { iterations: 2, epochs: 1, minibatch: 16, ..Default::default() },
        ..Default::default()
    };
    cfg.learner = Some(tc.clone());
    let straight = run_training(&cfg, false).unwrap();
    // Same run split in two: resuming from a finished state is a no-op.
    let again = run_training(&cfg, true).unwrap();
    assert_eq!(again.curve.len(), 2);
    assert_eq!(again.final_travel_time, straight.final_travel_time);
    tc.ppo.iterations = 3;
    cfg.learner = Some(tc);
    assert!(run_training(&cfg, true).is_err(), "changed configuration must not resume");
}
