#[test]
fn serde_f64_round_trip() {
    let v: f64 = 199.65614299722697;
    let s = serde_json::to_string(&Some(v)).unwrap();
    let back: Option<f64> = serde_json::from_str(&s).unwrap();
    assert_eq!(back, Some(v), "direct: {s}");
    let val: serde_json::Value = serde_json::from_str(&s).unwrap();
    let b2: f64 = serde_json::from_str(&val.to_string()).unwrap();
    assert_eq!(b2, v, "via value");
}
