use mcast::experiments::*;
use mcast_core::cluster::{build, Topology};
use mcast_core::endhost::LatencySample;
use mcast_core::model::{LinkModel, LinkProfile, LoadClass, ScenarioSpec, Strategy};
use mcast_core::monitor::{MonitorConfig, ServiceModel};

fn uniform(n_oh: u32, n_eh: u32, base: f64, connect: f64) -> ScenarioSpec {
    let mut s = ScenarioSpec::from_presets(n_oh, n_eh, LinkProfile::Fast).unwrap();
    for l in s.links.values_mut() {
        *l = LinkModel::fixed(base, connect);
    }
    for n in s.oh_nodes.iter_mut().chain(s.eh_nodes.iter_mut()) {
        n.load = LoadClass::IDLE;
    }
    s
}

#[test]
fn construction_time_closed_form() {
    // Connect, one ping round trip, then the peer's report one way.
    let (b, c) = (30.0, 120.0);
    let spec = uniform(3, 0, b, c);
    let t = run_fig2(&spec, 1, &[3]).unwrap();
    let got = t.numbers("construction_ms")[0];
    assert!((got - (c + 3.0 * b)).abs() < 1e-3, "{got}");
}

fn construction_ms(spec: &ScenarioSpec) -> f64 {
    let mut c = build(spec, 1, Topology::OVERLAY_ONLY);
    c.run_until_idle();
    c.graph_stats().construction_time_ms.ms()
}

#[test]
fn one_loaded_node_slows_construction() {
    let mut calm = ScenarioSpec::from_presets(10, 0, LinkProfile::Fast).unwrap();
    for n in &mut calm.oh_nodes {
        n.load = LoadClass::IDLE;
    }
    let mut busy = calm.clone();
    busy.oh_nodes[4].load = LoadClass::from_factor(0.8);
    let (a, b) = (construction_ms(&calm), construction_ms(&busy));
    assert!(b > a, "{b} <= {a}");
}

#[test]
fn fig2_grows_with_the_overlay() {
    let t = run_fig2(&default_base(LinkProfile::HeavyTail), 1, &FIG2_OH_COUNTS).unwrap();
    let v = t.numbers("construction_ms");
    assert!(v.windows(2).all(|w| w[0] <= w[1]), "{v:?}");
    assert!(v[0] < 1_000.0 && v[4] > 30_000.0);
}

#[test]
fn mean_never_exceeds_max() {
    let mut base = default_base(LinkProfile::HeavyTail);
    base.strategy = Strategy::default();
    let t = run_fig3_5(&base, 3, &[3, 10, 40], &[10, 100]).unwrap();
    for (a, m) in t.numbers("avg_mi_ms").iter().zip(t.numbers("max_mi_ms")) {
        assert!(*a <= m && *a > 0.0);
    }
}

#[test]
fn fast_links_stay_inside_the_probe_band() {
    let base = default_base(LinkProfile::Fast);
    let spec = sized(&base, 10, 100).unwrap();
    // Bounds from the link model: three round trips, plus at most one connect.
    let (mut lo, mut hi, mut conn) = (f64::INFINITY, 0.0f64, 0.0f64);
    for e in &spec.eh_nodes {
        for o in &spec.oh_nodes {
            let up = spec.link(&e.region, &o.region).unwrap();
            let down = spec.link(&o.region, &e.region).unwrap();
            let (fo, fe) = (1.0 + o.load.load_factor, 1.0 + e.load.load_factor);
            let min = (up.base_latency_ms.ms() - up.jitter_ms.ms()) * fo
                + (down.base_latency_ms.ms() - down.jitter_ms.ms()) * fe;
            let max = (up.base_latency_ms.ms() + up.jitter_ms.ms()) * fo
                + (down.base_latency_ms.ms() + down.jitter_ms.ms()) * fe;
            lo = lo.min(min);
            hi = hi.max(max);
            conn = conn.max(up.connect_fast_ms.ms() * fo);
        }
    }
    let t = run_fig3_5(&base, 5, &[10], &[100]).unwrap();
    let avg = t.numbers("avg_mi_ms")[0];
    assert!(avg >= 3.0 * lo && avg <= 3.0 * hi + conn, "{avg} outside [{}, {}]", 3.0 * lo, 3.0 * hi + conn);
    let reports = measure(&spec, &Strategy::NoReconnect, 5);
    assert!(reports.iter().all(|r| r.samples.iter().all(LatencySample::is_ok)));
}

#[test]
fn strategies_agree_without_a_tail() {
    let (t, _) = run_fig7(&default_base(LinkProfile::Fast), 1, &fig7_strategies()).unwrap();
    let v = t.numbers("avg_mi_ms");
    // Without a tail the connect policies have nothing to cut.
    let (lo, hi) = v[..3].iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    assert!(hi <= lo * 1.05, "{v:?}");
    // Sub-groups probe fewer OHs, so their slowest probe can only be faster.
    assert!(v[3] <= lo, "{v:?}");
}

#[test]
fn everything_measured_without_a_tail() {
    let t = run_fig8(&default_base(LinkProfile::Fast), 1, &[3, 40], &fig8_variants()).unwrap();
    assert!(t.numbers("pct_measured").iter().all(|&p| p == 100.0));
}

#[test]
fn queueing_dominates_monitor_response() {
    let base = default_base(LinkProfile::Fast);
    let t = run_fig6(&base, 1, &[1, 100]).unwrap();
    let v = t.numbers("avg_response_ms");
    // A lone request waits only for its own decision.
    let mh = loaded_monitor(&sized(&base, 40, 1).unwrap(), MonitorConfig::new(base.mh_node.id));
    let ServiceModel::Modeled { per_request, per_op } = mh.config().service else {
        panic!("simulation uses the modeled service time");
    };
    assert!(per_request.ms() < 1.0);
    let single = v[0];
    assert!(single < 1.0, "{single}");
    assert!(single >= per_request.ms() && single <= per_request.ms() + per_op.ms() * 100.0);
    assert!(v[1] > 10.0 * single, "{v:?}");
}

#[test]
fn rows_carry_the_scenario_hash() {
    let base = default_base(LinkProfile::Fast);
    let t = run_fig6(&base, 9, &[1, 10]).unwrap();
    let csv = t.to_csv();
    let h = scenario_hash(&base);
    check_hash(&csv, &h).unwrap();
    assert!(check_hash(&csv, &"0".repeat(64)).is_err());
    let mut other = base.clone();
    other.seed += 1;
    assert_ne!(scenario_hash(&other), h);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(&format!(",9,{h}"))));
}

#[test]
fn presets_are_reproducible() {
    for p in ["fig2", "fig6"] {
        let base = default_base(preset_profile(p));
        let a: Vec<String> = run_preset(p, &base, 4).unwrap().iter().map(Table::to_csv).collect();
        let b: Vec<String> = run_preset(p, &base, 4).unwrap().iter().map(Table::to_csv).collect();
        assert_eq!(a, b);
    }
    assert!(run_preset("fig9", &default_base(LinkProfile::Fast), 1).is_err());
}
