use viseme_core::alignment::VisemeMap;
use viseme_core::dataset::split_sentences;
use viseme_core::signal_io::ChannelRole;
use viseme_core::synth::*;

/// Nearest-centroid accuracy on raw intervals, trained on 424-of-474-shaped
/// sentence splits of a smaller corpus.
fn centroid_accuracy(snr_db: f64, n_sentences: usize, seed: u64) -> f64 {
    let cfg = SynthConfig { n_sentences, snr_db, seed, ..SynthConfig::default() };
    let corpus = gen_corpus(&cfg).unwrap();
    let map = VisemeMap::default();
    let channels: Vec<usize> = cfg
        .channels()
        .iter()
        .filter(|c| c.role != ChannelRole::Reference)
        .map(|c| c.index)
        .collect();
    let ids = corpus.sentences.iter().map(|s| s.id).collect();
    let split = split_sentences(&ids, n_sentences / 10, seed).unwrap();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in &corpus.sentences {
        let rec = render_recording(s, &cfg, &map).unwrap();
        let rows: Vec<_> = s
            .visemes(&map)
            .unwrap()
            .into_iter()
            .zip(s.spans())
            .map(|(c, span)| (band_power_features(&rec, &channels, span), c.index()))
            .collect();
        if split.test.contains(&s.id) {
            test.extend(rows);
        } else {
            train.extend(rows);
        }
    }
    nearest_centroid_accuracy(&train, &test)
}

#[test]
fn separability_tracks_snr() {
    let high = centroid_accuracy(20.0, 200, 1);
    let mid = centroid_accuracy(-20.0, 200, 1);
    let low = centroid_accuracy(-30.0, 200, 1);
    println!("nearest-centroid accuracy: +20 dB {high:.4}, -20 dB {mid:.4}, -30 dB {low:.4}");
    assert!(high >= 0.90, "high-SNR accuracy {high}");
    assert!((low - 1.0 / 15.0).abs() <= 0.03, "low-SNR accuracy {low}");
    assert!(high > mid && mid > low);
}
