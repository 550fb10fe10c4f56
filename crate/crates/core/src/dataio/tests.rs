use super::*;
use proptest::prelude::*;

fn rec(user: &str, item: &str, rating: f64, ts: i64) -> InteractionRecord {
    InteractionRecord {
        user: user.into(),
        item: item.into(),
        rating,
        timestamp: ts,
    }
}

fn parse(text: &str) -> Result<LoadReport, DataError> {
    parse_interactions(text.as_bytes(), &FormatSpec::default())
}

#[test]
fn loads_well_formed_rows() {
    let r = parse("u1,i1,5,10\nu1,i2,4,11\nu2,i1,3,12\n").unwrap();
    assert_eq!(r.records.len(), 3);
    assert_eq!(r.skipped, 0);
    assert_eq!(r.records[2], rec("u2", "i1", 3.0, 12));
}

#[test]
fn malformed_row_is_skipped_and_counted() {
    let r = parse("u1,i1,5,10\nu1,i2,oops,11\nu2,i1,3,12\nu3,i3,4,13\n").unwrap();
    assert_eq!(r.records.len(), 3);
    assert_eq!(r.skipped, 1);
    assert_eq!(r.skipped_lines, vec![2]);
}

#[test]
fn negative_timestamp_is_malformed() {
    let r = parse("u1,i1,5,-1\nu1,i2,4,3\n").unwrap();
    assert_eq!(r.skipped, 1);
}

#[test]
fn empty_input_is_an_error() {
    assert!(matches!(parse(""), Err(DataError::NoValidRows { skipped: 0 })));
}

#[test]
fn missing_file_is_io_error() {
    let err = load_interactions(Path::new("/nonexistent/x.csv"), &FormatSpec::default()).unwrap_err();
    assert!(matches!(err, DataError::Io { .. }));
}

#[test]
fn custom_layout_and_header() {
    let spec = FormatSpec::from_columns("timestamp,-,item,user,rating", '\t', true).unwrap();
    let r = parse_interactions("ts\tx\titem\tuser\tr\n7\tzz\tA\tB\t4.5\n".as_bytes(), &spec).unwrap();
    assert_eq!(r.records, vec![rec("B", "A", 4.5, 7)]);
    assert!(FormatSpec::from_columns("user,item,rating", ',', false).is_err());
    assert!(FormatSpec::from_columns("user,user,item,rating,timestamp", ',', false).is_err());
}

#[test]
fn kcore_single_user_distinct_items_is_empty() {
    let recs: Vec<_> = (0..25).map(|i| rec("u", &format!("i{i}"), 5.0, i)).collect();
    assert!(matches!(kcore_filter(recs, 1, 2, 4.0), Err(DataError::EmptyAfterFilter)));
}

#[test]
fn kcore_identity_when_thresholds_trivial() {
    let recs = vec![rec("a", "x", 5.0, 1), rec("b", "y", 5.0, 2), rec("a", "y", 5.0, 3)];
    assert_eq!(kcore_filter(recs.clone(), 1, 1, 1.0).unwrap(), recs);
}

#[test]
fn kcore_applies_rating_threshold_and_iterates() {
    // Dropping item z takes user c below degree 2, which then drops item y to 1.
    let recs = vec![
        rec("a", "x", 5.0, 1),
        rec("a", "y", 5.0, 2),
        rec("b", "x", 5.0, 3),
        rec("b", "w", 5.0, 4),
        rec("a", "w", 5.0, 5),
        rec("c", "y", 5.0, 6),
        rec("c", "z", 5.0, 7),
        rec("b", "y", 2.0, 8),
    ];
    let out = kcore_filter(recs, 2, 2, 4.0).unwrap();
    let pairs: Vec<_> = out.iter().map(|r| (r.user.as_str(), r.item.as_str())).collect();
    assert_eq!(pairs, vec![("a", "x"), ("b", "x"), ("b", "w"), ("a", "w")]);
}

fn dataset_with_sizes(sizes: &[usize]) -> Dataset {
    let mut recs = Vec::new();
    for (u, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            recs.push(rec(&format!("u{u}"), &format!("i{}", k % 7), 5.0, k as i64));
        }
    }
    Dataset::from_records(&recs)
}

#[test]
fn temporal_split_counts() {
    let ds = temporal_split(dataset_with_sizes(&[10, 20, 23]), 0.8, 0.1, 0.1).unwrap();
    let counts = |u| {
        [Split::Train, Split::Validation, Split::Test].map(|s| ds.split_items(u, s).len())
    };
    assert_eq!(counts(0), [8, 1, 1]);
    assert_eq!(counts(1), [16, 2, 2]);
    assert_eq!(counts(2), [19, 2, 2]);
    ds.validate().unwrap();
}

#[test]
fn temporal_split_rejects_short_users() {
    let err = temporal_split(dataset_with_sizes(&[5, 2]), 0.8, 0.1, 0.1).unwrap_err();
    assert!(matches!(err, DataError::TooFewToSplit { count: 2, .. }));
}

#[test]
fn ids_follow_first_appearance_and_ties_keep_file_order() {
    let recs = vec![rec("b", "q", 5.0, 5), rec("a", "p", 5.0, 1), rec("b", "p", 5.0, 5), rec("b", "r", 5.0, 2)];
    let ds = Dataset::from_records(&recs);
    assert_eq!(ds.user_keys(), ["b", "a"]);
    assert_eq!(ds.item_keys(), ["q", "p", "r"]);
    let items: Vec<u32> = ds.interactions(0).iter().map(|x| x.item).collect();
    assert_eq!(items, vec![2, 0, 1]);
}

#[test]
fn environment_sizes_follow_remainder_rule() {
    assert_eq!(environment_sizes(10, 2), vec![5, 5]);
    assert_eq!(environment_sizes(10, 3), vec![4, 3, 3]);
    let items: Vec<u32> = (0..10).collect();
    assert_eq!(divide_environments(&items, 3).unwrap().counts(), vec![4, 3, 3]);
    assert!(matches!(
        divide_environments(&[1, 2], 3),
        Err(DataError::InsufficientInteractions { have: 2, need: 3 })
    ));
}

#[test]
fn duplicates_collapse_within_environment() {
    let slices = divide_environments(&[4, 1, 4, 2, 2, 2], 2).unwrap();
    assert_eq!(slices.envs, vec![vec![1, 4], vec![2]]);
    assert_eq!(slices.counts(), vec![2, 1]);
}

#[test]
fn multihot_examples() {
    assert_eq!(to_multihot(&[0, 2], 4).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
    assert_eq!(to_multihot(&[], 3).unwrap(), vec![0.0; 3]);
    assert!(matches!(to_multihot(&[3], 3), Err(DataError::IndexOutOfRange { index: 3, num_items: 3 })));
}

#[test]
fn binary_roundtrip_and_bad_magic() {
    let ds = temporal_split(dataset_with_sizes(&[10, 12, 3]), 0.8, 0.1, 0.1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cdrd");
    write_dataset(&path, &ds).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path), Err(DataError::Format(_))));

    write_dataset(&path, &ds).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_dataset(&path), Err(DataError::Format(_))));
}

#[test]
fn stats_summary_lists_counts() {
    let ds = temporal_split(dataset_with_sizes(&[10]), 0.8, 0.1, 0.1).unwrap();
    let s = ds.stats_summary();
    assert!(s.contains("users = 1"));
    assert!(s.contains("train = 8"));
    assert!(s.contains("test = 1"));
}

fn arb_records() -> impl Strategy<Value = Vec<InteractionRecord>> {
    prop::collection::vec((0u8..8, 0u8..10, 1u8..6, 0i64..50), 1..120).prop_map(|v| {
        v.into_iter()
            .map(|(u, i, r, t)| rec(&format!("u{u}"), &format!("i{i}"), f64::from(r), t))
            .collect()
    })
}

proptest! {
    #[test]
    fn kcore_is_idempotent(recs in arb_records(), ku in 1usize..4, ki in 1usize..4) {
        if let Ok(once) = kcore_filter(recs, ku, ki, 3.0) {
            let twice = kcore_filter(once.clone(), ku, ki, 3.0).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn environments_cover_the_history(items in prop::collection::vec(0u32..15, 1..60), t in 1usize..6) {
        prop_assume!(items.len() >= t);
        let slices = divide_environments(&items, t).unwrap();
        let counts = slices.counts();
        let sizes = environment_sizes(items.len(), t);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut start = 0;
        for (env, size) in slices.envs.iter().zip(&sizes) {
            let mut chunk = items[start..start + size].to_vec();
            chunk.sort_unstable();
            chunk.dedup();
            prop_assert_eq!(env, &chunk);
            start += size;
        }
        prop_assert_eq!(counts.len(), t);
    }

    #[test]
    fn split_tags_never_interleave(recs in arb_records()) {
        let ds = Dataset::from_records(&recs);
        if (0..ds.num_users()).all(|u| ds.interactions(u).len() >= 3) {
            let ds = temporal_split(ds, 0.8, 0.1, 0.1).unwrap();
            prop_assert!(ds.validate().is_ok());
        }
    }
}
