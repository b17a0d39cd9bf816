use proptest::prelude::*;
use viseme_core::alignment::{
    parse_textgrid, parse_textgrid_str, textgrid_to_string, write_textgrid, PhonemeInterval, PhonemeTier, VisemeMap,
    ARPABET, SILENCE,
};
use viseme_core::signal_io::{
    read_brainvision, write_brainvision, write_brainvision_as, BinaryFormat, ChannelMeta, ChannelRole, MarkerList,
    Recording, SignalIoError,
};

fn recording(n_ch: usize, rows: Vec<Vec<f64>>, fs: f64) -> Recording {
    let channels = (0..n_ch)
        .map(|i| ChannelMeta {
            name: format!("E{i}"),
            role: if i + 1 == n_ch { ChannelRole::Emg } else { ChannelRole::Eeg },
            resolution: 0.5,
            index: i,
        })
        .collect();
    Recording::new(channels, fs, rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brainvision_float32_round_trip(
        rows in (1usize..5, 1usize..64).prop_flat_map(|(c, n)| prop::collection::vec(prop::collection::vec(-1e4f64..1e4, n), c)),
        fs in prop::sample::select(vec![250.0, 500.0, 1000.0, 2048.0]),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let rec = recording(rows.len(), rows.clone(), fs);
        let base = dir.path().join("r");
        write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
        let (back, markers) = read_brainvision(base.with_extension("vhdr")).unwrap();
        prop_assert!(markers.entries.is_empty());
        prop_assert_eq!(back.fs(), fs);
        prop_assert_eq!(back.channels(), rec.channels());
        for (c, row) in rows.iter().enumerate() {
            for (got, v) in back.channel(c).iter().zip(row) {
                prop_assert_eq!(*got, ((v / 0.5) as f32) as f64 * 0.5);
            }
        }
    }

    #[test]
    fn brainvision_garbage_never_panics(vhdr in ".{0,400}", eeg in prop::collection::vec(any::<u8>(), 0..64)) {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("g");
        std::fs::write(base.with_extension("vhdr"), format!("Brain Vision Data Exchange Header File Version 1.0\n{vhdr}")).unwrap();
        std::fs::write(base.with_extension("eeg"), eeg).unwrap();
        let _ = read_brainvision(base.with_extension("vhdr"));
    }

    #[test]
    fn textgrid_round_trip(
        durations in prop::collection::vec(1e-3f64..0.5, 0..30),
        labels in prop::collection::vec(prop::sample::select(ARPABET.iter().copied().chain([SILENCE]).collect::<Vec<_>>()), 30),
        start in 0.0f64..10.0,
    ) {
        let mut t = start;
        let intervals: Vec<_> = durations
            .iter()
            .zip(&labels)
            .map(|(d, l)| {
                let iv = PhonemeInterval::new(t, t + d, l).unwrap();
                t += d;
                iv
            })
            .collect();
        let tier = PhonemeTier::new("phones", start, t, intervals).unwrap();
        let text = textgrid_to_string(std::slice::from_ref(&tier)).unwrap();
        prop_assert_eq!(parse_textgrid_str(&text).unwrap().tiers, vec![tier]);
    }

    #[test]
    fn textgrid_garbage_never_panics(text in ".{0,600}") {
        let _ = parse_textgrid_str(&text);
        let _ = parse_textgrid_str(&format!("File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n{text}"));
    }

    #[test]
    fn viseme_lookup_ignores_case_and_stress(i in 0usize..39, stress in prop::sample::select(vec!["", "0", "1", "2"]), lower in any::<bool>()) {
        let map = VisemeMap::default();
        let p = ARPABET[i];
        let label = if lower { p.to_lowercase() } else { p.to_string() };
        prop_assert_eq!(map.get(&format!("{label}{stress}")), map.get(p));
    }
}

#[test]
fn int16_saturates_instead_of_wrapping() {
    let dir = tempfile::tempdir().unwrap();
    let rec = recording(1, vec![vec![1e9, -1e9, 1.0]], 1000.0);
    let base = dir.path().join("s");
    write_brainvision_as(&rec, &MarkerList::default(), &base, BinaryFormat::Int16).unwrap();
    let (back, _) = read_brainvision(base.with_extension("vhdr")).unwrap();
    assert_eq!(back.channel(0), &[32767.0 * 0.5, -32768.0 * 0.5, 1.0]);
}

#[test]
fn latin1_header_is_decoded() {
    let dir = tempfile::tempdir().unwrap();
    let rec = recording(2, vec![vec![1.0; 4], vec![2.0; 4]], 1000.0);
    let base = dir.path().join("l");
    write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
    let path = base.with_extension("vhdr");
    let text = std::fs::read_to_string(&path).unwrap();
    // µ as a single Latin-1 byte
    let bytes: Vec<u8> = text.chars().map(|c| c as u32 as u8).collect();
    std::fs::write(&path, bytes).unwrap();
    let (back, _) = read_brainvision(&path).unwrap();
    assert_eq!(back.n_channels(), 2);
}

#[test]
fn missing_data_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let rec = recording(1, vec![vec![0.0; 3]], 1000.0);
    let base = dir.path().join("m");
    write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
    std::fs::remove_file(base.with_extension("eeg")).unwrap();
    let err = read_brainvision(base.with_extension("vhdr")).unwrap_err();
    assert!(matches!(err, SignalIoError::Io { .. }), "{err:?}");
}

#[test]
fn textgrid_file_round_trip_and_point_tiers() {
    let dir = tempfile::tempdir().unwrap();
    let tier = PhonemeTier::new("phones", 0.0, 0.2, vec![PhonemeInterval::new(0.0, 0.2, "ah1").unwrap()]).unwrap();
    assert_eq!(tier.intervals[0].label, "AH");
    let path = dir.path().join("a.TextGrid");
    write_textgrid(&[tier.clone()], &path).unwrap();
    assert_eq!(parse_textgrid(&path).unwrap(), vec![tier]);
}
