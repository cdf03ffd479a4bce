use citeprobe::{io, report};
use citeprobe_core::corpus::{chunk_corpus, ChunkOptions, SourceDocument};
use citeprobe_core::experiment::{ConditionCounts, ExperimentSummary};
use citeprobe_core::forge::ForgeCondition;
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = ConditionCounts> {
    (prop::sample::select(ForgeCondition::ALL.to_vec()), 0u64..5000, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(
        |(condition, n_total, a, b)| {
            let n_recovered = (n_total as f64 * a) as u64;
            ConditionCounts {
                condition,
                n_total,
                n_recovered,
                n_adversarial_cited: (n_recovered as f64 * b) as u64,
                n_failed: n_total - n_recovered,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_rows_carry_the_counts(c in counts()) {
        let summary = ExperimentSummary::from_counts(&[c]).unwrap();
        let csv = report::csv(&summary);
        let row = csv.lines().find(|l| l.starts_with(c.condition.as_str())).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        prop_assert_eq!(fields[1].parse::<u64>().unwrap(), c.n_total);
        prop_assert_eq!(fields[3].parse::<u64>().unwrap(), c.n_adversarial_cited);
        let rate: f64 = fields[5].parse().unwrap();
        let expected = if c.n_recovered == 0 { 0.0 } else { c.n_adversarial_cited as f64 / c.n_recovered as f64 };
        prop_assert!((rate - expected).abs() < 1e-6);
        prop_assert_eq!(csv.lines().count(), 1 + ForgeCondition::ALL.len());
    }

    #[test]
    fn chunk_store_round_trips(texts in prop::collection::vec("[a-zA-Z ,.()'\"-]{0,80}", 1..12), size in 1usize..30) {
        let docs: Vec<SourceDocument> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| SourceDocument { doc_id: format!("d{i}"), title: format!("T{i}"), text: t.clone() })
            .collect();
        let chunks = chunk_corpus(&docs, &ChunkOptions { chunk_size: size, ..ChunkOptions::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chunks.jsonl");
        io::save_chunks(&path, &chunks, size).unwrap();
        let (loaded, loaded_size) = io::load_chunks(&path).unwrap();
        prop_assert_eq!(loaded, chunks);
        prop_assert_eq!(loaded_size, size);
    }
}
