use std::collections::{BTreeSet, HashMap};

use mmpoi::domain::AttributeKey;
use mmpoi::ingest::{CategoryAllowlist, FixtureBackend, GeocoderClient};
use mmpoi::pipeline::{prepare, DescriptionSources, PrepareConfig};
use mmpoi::synth::{generate, oracle_recall_in_topic, SignalMode, SynthConfig};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        users: 80,
        venues: 200,
        topics: 5,
        min_len: 10,
        max_len: 30,
        seed,
        ..SynthConfig::default()
    }
}

fn file_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&cfg(9)).unwrap().write_to(a.path()).unwrap();
    generate(&cfg(9)).unwrap().write_to(b.path()).unwrap();
    let (fa, fb) = (file_bytes(a.path()), file_bytes(b.path()));
    assert_eq!(fa.len(), 6);
    assert_eq!(fa, fb);
}

#[test]
fn written_files_survive_preparation() {
    let data = generate(&cfg(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = data.write_to(dir.path()).unwrap();
    let backend = FixtureBackend::parse(std::io::BufReader::new(
        std::fs::File::open(&files.geocoder).unwrap(),
    ))
    .unwrap();
    let prepared = prepare(
        &files.checkins,
        &files.postal,
        &CategoryAllowlist::foursquare_food(),
        &GeocoderClient::new(Box::new(backend)),
        &DescriptionSources {
            venue_images: Some(files.venue_images.clone()),
            captions: Some(files.captions.clone()),
            ..Default::default()
        },
        &PrepareConfig {
            min_checkins: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let counts = &prepared.counts;
    assert_eq!(counts.malformed_lines, 0);
    assert!(prepared.malformed.is_empty());
    assert_eq!(counts.input_lines, data.checkins.len());
    assert_eq!(counts.interactions, data.checkins.len());
    assert_eq!(counts.users, data.config.users);
    let visited: BTreeSet<&str> = data.checkins.iter().map(|c| c.venue_id.as_str()).collect();
    assert_eq!(counts.final_pois, visited.len());
    assert_eq!(counts.pois_with_description, visited.len());
    assert!(counts.dropped_pois.values().all(|&n| n == 0));

    let topic: HashMap<&str, usize> =
        data.venues.iter().map(|v| (v.venue_id.as_str(), v.topic)).collect();
    for (id, meta) in &prepared.corpus.pois {
        let desc = meta.get(AttributeKey::VenueDesc).unwrap();
        let cell = &data.venues.iter().find(|v| v.venue_id == *id).unwrap().cell;
        assert!(meta.get(AttributeKey::VenueArea).unwrap().ends_with(cell.as_str()), "{id}");
        assert!(!desc.is_empty(), "{id} topic {}", topic[id.as_str()]);
    }
}

/// Pearson chi-square p-value for independence of the two coordinates.
fn independence_p(pairs: &[(usize, usize)], rows: usize, cols: usize) -> f64 {
    let mut table = vec![vec![0.0f64; cols]; rows];
    for &(r, c) in pairs {
        table[r][c] += 1.0;
    }
    let n = pairs.len() as f64;
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let mut stat = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let e = row[r] * col[c] / n;
            if e > 0.0 {
                stat += (table[r][c] - e).powi(2) / e;
            }
        }
    }
    let df = ((rows - 1) * (cols - 1)) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

#[test]
fn category_is_independent_of_topic_in_desc_only_mode() {
    let data = generate(&SynthConfig {
        venues: 1000,
        ..cfg(11)
    })
    .unwrap();
    let pairs: Vec<(usize, usize)> = data
        .venues
        .iter()
        .map(|v| (v.topic, v.category_id[1..].parse().unwrap()))
        .collect();
    let p = independence_p(&pairs, 5, data.config.categories);
    assert!(p > 0.01, "p = {p}");

    let tied = generate(&SynthConfig {
        venues: 1000,
        mode: SignalMode::Category,
        ..cfg(11)
    })
    .unwrap();
    let pairs: Vec<(usize, usize)> = tied
        .venues
        .iter()
        .map(|v| (v.topic, v.category_id[1..].parse().unwrap()))
        .collect();
    assert!(independence_p(&pairs, 5, tied.config.categories) < 1e-6);
}

#[test]
fn oracle_recall_matches_simulation() {
    // An oracle ranking the preferred topic's venues first in random order.
    let data = generate(&cfg(12)).unwrap();
    let topic_size = data.config.venues / data.config.topics;
    let mut rng = mmpoi::rng::substream(12, "test/oracle");
    let (mut hits, mut trials) = (0usize, 0usize);
    let topic: HashMap<&str, usize> =
        data.venues.iter().map(|v| (v.venue_id.as_str(), v.topic)).collect();
    for c in &data.checkins {
        let pref = data.user_topics[&c.user_id];
        if topic[c.venue_id.as_str()] != pref {
            continue;
        }
        let mut slots: Vec<usize> = (0..topic_size).collect();
        rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), &mut rng);
        trials += 1;
        hits += usize::from(slots[0] < 10);
    }
    let sim = hits as f64 / trials as f64;
    assert!((sim - oracle_recall_in_topic(10, topic_size)).abs() < 0.03, "{sim}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn in_topic_rate_matches_fidelity(seed in 0u64..1000, fidelity in 0.2f64..1.0, topics in 2usize..8) {
        let data = generate(&SynthConfig {
            users: 150,
            venues: 20 * topics,
            topics,
            min_len: 20,
            max_len: 40,
            fidelity,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let rate = data.in_topic_transitions as f64 / data.transitions as f64;
        let want = fidelity + (1.0 - fidelity) / topics as f64;
        prop_assert!((rate - want).abs() < 0.02, "rate {} want {}", rate, want);
    }
}
