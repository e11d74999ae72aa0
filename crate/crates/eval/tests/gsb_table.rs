use magicvid_eval::{gsb_ratio, round2};

/// Printed counts and ratios of the human side-by-side comparison table.
const ROWS: [(&str, u64, u64, u64, f64); 5] = [
    ("MoonValley", 4099, 1242, 759, 2.67),
    ("Pika 1.0", 4263, 927, 1010, 2.68),
    ("Morph", 4129, 1230, 741, 2.72),
    ("Gen-2", 3448, 1279, 1373, 1.78),
    ("SVD-XT", 3169, 1591, 1340, 1.62),
];

#[test]
fn printed_rows_reproduce_printed_ratios() {
    for (name, g, s, b, printed) in ROWS {
        let r = gsb_ratio(g, s, b).unwrap();
        // Integer check: |100 (G+S) - cents·(B+S)| <= (B+S) / 2.
        let num = 100 * (g + s) as i64;
        let den = (b + s) as i64;
        let cents = (printed * 100.0).round() as i64;
        assert!((num - cents * den).abs() * 2 <= den, "{name}");
        assert_eq!(round2(r), printed, "{name}: {r}");
    }
}

#[test]
fn ratio_is_full_precision() {
    let r = gsb_ratio(4129, 1230, 741).unwrap();
    assert_eq!(r, 5359.0 / 1971.0);
}
