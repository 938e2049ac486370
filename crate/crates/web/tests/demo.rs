use serde_json::Value;
use weightgen_web::{interpolation_json, layout_json, normalization_json};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn layout_counts_tokens() {
    let v = parse(layout_json("small_cnn", 289).unwrap());
    assert_eq!(v["tokens"], 48);
    assert_eq!(v["signal"].as_array().unwrap().len(), 48);
    assert_eq!(v["signal"][0], 26);
}

#[test]
fn padding_only_moves_unmasked_stats() {
    let v = parse(normalization_json("2 4", "2 4", 4).unwrap());
    assert_eq!(v["losses"]["masked_per_token"], 0.0);
    assert_eq!(v["stats"][0]["masked"][0], 3.0);
    assert_eq!(v["stats"][0]["padded"][0], 1.5);
    assert!(normalization_json("1 2", "1", 4).is_err());
    assert!(normalization_json("1 x", "1 2", 4).is_err());
}

#[test]
fn alignment_shrinks_distance() {
    let v = parse(interpolation_json(1, 2, 8, 4).unwrap());
    assert_eq!(v["naive"].as_array().unwrap().len(), 5);
    assert!(v["distance_after"].as_f64().unwrap() <= v["distance_before"].as_f64().unwrap());
    assert_eq!(v["naive"][0], v["aligned"][0]);
}
