use viseme_demo::*;

#[test]
fn response_is_half_power_at_band_edges() {
    let r = response(5, 30.0, 499.0, 30.0, 1000.0, 1001).unwrap();
    assert_eq!(r.freqs.len(), 1001);
    let at = |f: f64| r.db[(f / 0.5).round() as usize];
    assert!((at(30.0) + 3.0103).abs() < 0.01, "{}", at(30.0));
    assert!(at(60.0) < -40.0);
    assert!(at(270.0).abs() < 0.5, "{}", at(270.0));
    assert!(response(5, 30.0, 600.0, 30.0, 1000.0, 10).is_err());
}

#[test]
fn render_spans_cover_the_samples() {
    let r = render(3, 20.0, 0).unwrap();
    assert_eq!(r.spans.first().unwrap().start, 0);
    assert_eq!(r.spans.last().unwrap().end, r.samples.len());
    assert_eq!(r.spans[0].viseme, 0);
    assert!(render(3, 20.0, 99).is_err());
}

#[test]
fn catalog_entries_match_themselves() {
    let cat = catalog(12, 1).unwrap();
    for e in &cat.entries {
        let q: Vec<String> = e.viseme_sequence.iter().map(|c| c.id().to_string()).collect();
        let m = match_query(&q.join(" "), 12, 1).unwrap();
        assert_eq!(m.best, e.id);
        assert_eq!(m.distance, 0);
    }
    assert!(parse_query("1, 2 x").is_err());
    assert!(parse_query("15").is_err());
    assert!(match_query("", 12, 1).is_err());
}
