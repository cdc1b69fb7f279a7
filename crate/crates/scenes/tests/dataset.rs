//! End-to-end dataset invariants: determinism, class balance, size-bucket
//! coverage, render confinement, storage round-trips, split behavior.

use drivecap_scenes::*;

#[test]
fn generation_is_deterministic() {
    let a = generate(7, 3).unwrap();
    let b = generate(7, 3).unwrap();
    assert_eq!(a, b);
    // And byte-identical once serialized.
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(record_to_line(x), record_to_line(y));
    }
}

#[test]
fn records_are_independent_of_corpus_size() {
    let five = generate(3, 5).unwrap();
    let two = generate(3, 2).unwrap();
    assert_eq!(five[0], two[0]);
    assert_eq!(five[1], two[1]);
}

#[test]
fn scenario_distribution_is_roughly_uniform() {
    let mut counts = [0usize; 3];
    for i in 0..1000 {
        let (s, _, _) = sample_layout(7, i);
        counts[Scenario::ALL.iter().position(|&x| x == s).unwrap()] += 1;
    }
    for c in counts {
        let f = c as f64 / 1000.0;
        assert!((0.25..=0.42).contains(&f), "scenario frequency {f}");
    }
}

#[test]
fn every_size_bucket_gets_at_least_ten_percent() {
    let mut buckets = [0usize; 3];
    for i in 0..1000 {
        let (_, _, b) = sample_layout(0, i);
        let area = b.area();
        let k = if area < 0.01 {
            0
        } else if area < 0.1 {
            1
        } else {
            2
        };
        buckets[k] += 1;
    }
    for (k, c) in buckets.iter().enumerate() {
        assert!(*c >= 100, "bucket {k} has only {c} of 1000 boxes");
    }
}

#[test]
fn boxes_stay_inside_the_unit_square() {
    for i in 0..500 {
        let (_, _, b) = sample_layout(11, i);
        b.validate().unwrap();
        let (x1, y1, x2, y2) = b.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
    }
}

#[test]
fn caption_matches_template_of_attrs() {
    for rec in generate(5, 8).unwrap() {
        assert_eq!(rec.caption, caption_for(rec.scenario, rec.object_attrs));
        assert_eq!(rec.object_attrs.row, RowBand::from_y(rec.box_.y));
        assert_eq!(rec.object_attrs.col, ColBand::from_x(rec.box_.x));
    }
}

#[test]
fn risk_pixels_are_confined_to_the_box() {
    for rec in generate(13, 6).unwrap() {
        let rgb = rec.object_attrs.color.rgb();
        let (x1, y1, x2, y2) = rec.box_.corners();
        for (raster, side) in [(&rec.raster_lo, LO_SIDE), (&rec.raster_hi, HI_SIDE)] {
            let half = 0.5 / side as f64;
            let mut found = 0usize;
            for r in 0..side {
                for c in 0..side {
                    if raster.get(r, c) == rgb {
                        found += 1;
                        let y = (r as f64 + 0.5) / side as f64;
                        let x = (c as f64 + 0.5) / side as f64;
                        assert!(
                            x >= x1 - half && x <= x2 + half && y >= y1 - half && y <= y2 + half,
                            "{}: risk pixel ({x:.4},{y:.4}) outside box",
                            rec.id
                        );
                    }
                }
            }
            assert!(found > 0, "{}: object not visible at side {side}", rec.id);
        }
    }
}

#[test]
fn jsonl_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.jsonl");
    let records = generate(2, 10).unwrap();
    write_jsonl(&records, &path).unwrap();
    let back = read_jsonl(&path).unwrap();
    assert_eq!(back, records);
}

#[test]
fn empty_file_reads_as_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(read_jsonl(&path).unwrap().is_empty());
}

#[test]
fn truncated_line_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.jsonl");
    let records = generate(4, 2).unwrap();
    let mut body = String::new();
    body.push_str(&record_to_line(&records[0]));
    body.push('\n');
    let second = record_to_line(&records[1]);
    body.push_str(&second[..second.len() / 2]); // cut mid-record
    std::fs::write(&path, body).unwrap();
    match read_jsonl(&path) {
        Err(SceneError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected Parse error at line 2, got {other:?}"),
    }
}

#[test]
fn schema_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vnext.jsonl");
    let rec = generate(4, 1).unwrap().pop().unwrap();
    let line = record_to_line(&rec).replace("\"schema_version\":1", "\"schema_version\":2");
    std::fs::write(&path, line + "\n").unwrap();
    match read_jsonl(&path) {
        Err(SceneError::SchemaVersion { line, found, .. }) => {
            assert_eq!((line, found), (1, 2));
        }
        other => panic!("expected SchemaVersion error, got {other:?}"),
    }
}

#[test]
fn split_is_exact_disjoint_and_deterministic() {
    let records = generate(9, 100).unwrap();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let (tr, va, te) = split(records.clone(), [0.7, 0.15, 0.15], 42).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (70, 15, 15));

    let mut union: Vec<String> = tr.iter().chain(&va).chain(&te).map(|r| r.id.clone()).collect();
    union.sort();
    let mut want = ids.clone();
    want.sort();
    assert_eq!(union, want);

    let (tr2, va2, te2) = split(records, [0.7, 0.15, 0.15], 42).unwrap();
    assert_eq!(tr.first().map(|r| &r.id), tr2.first().map(|r| &r.id));
    assert_eq!(va.first().map(|r| &r.id), va2.first().map(|r| &r.id));
    assert_eq!(te.first().map(|r| &r.id), te2.first().map(|r| &r.id));
}

#[test]
fn split_rejects_bad_fractions() {
    let records = generate(9, 4).unwrap();
    assert!(matches!(
        split(records, [0.5, 0.2, 0.2], 1),
        Err(SceneError::BadFractions(_))
    ));
}

#[test]
fn streaming_writer_matches_batch_writer() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("a.jsonl");
    let streamed = dir.path().join("b.jsonl");
    let records = generate(6, 4).unwrap();
    write_jsonl(&records, &batch).unwrap();
    let mut w = JsonlWriter::create(&streamed).unwrap();
    for r in &records {
        w.write(r).unwrap();
    }
    w.finish().unwrap();
    assert_eq!(
        std::fs::read(&batch).unwrap(),
        std::fs::read(&streamed).unwrap()
    );
}
