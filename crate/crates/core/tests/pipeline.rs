use fiberqkd::analytic::operating_point;
use fiberqkd::channel::{ChannelConfig, ClassicalTraffic};
use fiberqkd::netsim::{aligned_visibility, run_session, Provider, Topology};

fn compare(arm: ChannelConfig, duration: f64, seed: u64) {
    let topology = Topology::symmetric(arm.clone()).unwrap();
    let provider = Provider::new(topology).unwrap();
    let out = provider
        .schedule_session("alice", "bob", duration, seed)
        .unwrap()
        .run()
        .unwrap();
    let t = provider.topology();
    let v = aligned_visibility(t, &arm, &arm).unwrap();
    let p = operating_point(
        &t.source,
        &arm,
        &arm,
        &t.detectors,
        &t.detectors,
        &t.analysis,
        v,
    )
    .unwrap();

    let r = &out.report;
    let sigma = (p.qber * (1.0 - p.qber) / r.sifted_bits as f64).sqrt();
    assert!(
        (r.qber - p.qber).abs() < 5.0 * sigma + 0.003,
        "qber {} vs {}",
        r.qber,
        p.qber
    );
    // Dead time trims a little off the sampled rate.
    let rel = r.sifted_rate / p.sifted_rate;
    assert!(
        (0.9..1.05).contains(&rel),
        "sifted {} vs {}",
        r.sifted_rate,
        p.sifted_rate
    );
}

#[test]
fn monte_carlo_tracks_closed_form() {
    compare(ChannelConfig::with_length(0.5), 10.0, 1);
    compare(ChannelConfig::with_length(2.0), 20.0, 2);
    let mut active = ChannelConfig::with_length(3.0);
    active.traffic = ClassicalTraffic::counter_propagating(10.5);
    compare(active, 60.0, 3);
}

#[test]
fn tag_dump_reads_back() {
    let topology = Topology::symmetric(ChannelConfig::with_length(1.0)).unwrap();
    let plan = fiberqkd::netsim::schedule_session(&topology, "alice", "bob", 1.0, 9).unwrap();
    let out = run_session(&topology, &plan).unwrap();
    let mut buf = Vec::new();
    fiberqkd::receiver::write_tags(&mut buf, &out.tags_a).unwrap();
    assert_eq!(
        fiberqkd::receiver::read_tags(buf.as_slice()).unwrap(),
        out.tags_a
    );
    let csv = out.coincidence_csv().unwrap();
    assert_eq!(csv.lines().count(), out.coincidences.len() + 1);
}
