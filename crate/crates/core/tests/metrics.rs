use avmoe::metrics::*;
use avmoe::Error;

#[test]
fn spearman_with_ties_matches_hand_ranks() {
    // ranks x: 1, 2.5, 2.5, 4; ranks y: 1, 2, 3, 4
    let x = [1.0, 2.0, 2.0, 3.0];
    let y = [10.0, 20.0, 30.0, 40.0];
    assert_eq!(average_ranks(&x), vec![1.0, 2.5, 2.5, 4.0]);
    // Pearson of the rank vectors: sxy = 4.5, sxx = 4.5, syy = 5
    let want = 4.5 / (4.5f64 * 5.0).sqrt();
    assert!((spearman(&x, &y).unwrap() - want).abs() < 1e-12);
    let desc = [5.0, 4.0, 3.0, 2.0, 1.0];
    let asc = [-10.0, -5.0, 0.0, 5.0, 10.0];
    assert!((spearman(&asc, &desc).unwrap() + 1.0).abs() < 1e-15);
}

#[test]
fn spearman_rejects_degenerate_input() {
    assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(spearman(&[1.0], &[2.0]).is_err());
    assert!(spearman(&[1.0, 2.0], &[2.0]).is_err());
}

#[test]
fn coefficient_of_variation_oracle() {
    // mean 2, population variance (1 + 0 + 1) / 3
    let cv = coeff_of_variation(&[1.0, 2.0, 3.0]).unwrap();
    assert!((cv - (2.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
    assert_eq!(coeff_of_variation(&[4.0; 8]).unwrap(), 0.0);
    assert!(coeff_of_variation(&[]).is_err());
    assert!(coeff_of_variation(&[0.0, 0.0]).is_err());
}

#[test]
fn histogram_normalization() {
    assert_eq!(normalize_histogram(&[1.0, 3.0]), vec![0.25, 0.75]);
    assert_eq!(normalize_histogram(&[0.0, 0.0]), vec![0.0, 0.0]);
}

#[test]
fn csv_round_trip_keeps_cell_kinds() {
    let mut t = CsvTable::new(["step", "phase", "loss"]);
    t.push(vec![Cell::Int(0), Cell::Text("supervised".into()), Cell::Float(1.0)]).unwrap();
    t.push(vec![Cell::Int(1), Cell::Text("supervised".into()), Cell::Float(0.1 + 0.2)]).unwrap();
    t.push(vec![Cell::Int(2), Cell::Text("uptrain".into()), Cell::Float(-3.5e-12)]).unwrap();
    let text = t.to_csv_string();
    assert!(text.starts_with("step,phase,loss\n0,supervised,1.0\n"));
    let back = CsvTable::from_csv_str(&text).unwrap();
    assert_eq!(back, t);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_table(&t, &path).unwrap();
    assert_eq!(read_table(&path).unwrap(), t);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    let loss: Vec<f64> = back.column("loss").unwrap().iter().map(|c| c.as_f64().unwrap()).collect();
    assert_eq!(loss[1], 0.1 + 0.2);
    assert!(back.column("missing").is_none());
}

#[test]
fn empty_table_is_header_only() {
    let t = CsvTable::new(["a", "b"]);
    assert!(t.is_empty());
    let text = t.to_csv_string();
    assert_eq!(text, "a,b\n");
    let back = CsvTable::from_csv_str(&text).unwrap();
    assert_eq!(back.header, ["a", "b"]);
    assert!(back.is_empty());
}

#[test]
fn ragged_rows_are_rejected() {
    let mut t = CsvTable::new(["a", "b"]);
    assert!(t.push(vec![Cell::Int(1)]).is_err());
    assert!(CsvTable::from_csv_str("a,b\n1,2,3\n").is_err());
}
