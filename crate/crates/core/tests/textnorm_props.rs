use nmt_core::textnorm::{
    clean_corpus, decode_html_refs, map_chars, to_halfwidth, CharMapping, Cleaner, RawPair, RuleCounts,
};
use proptest::prelude::*;

fn piece() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9 ;#&]{0,4}",
        "[\u{FF01}-\u{FF5E}\u{3000}]{1,3}",
        Just("&amp;".to_string()),
        Just("&gt;".to_string()),
        Just("&#62;".to_string()),
        Just("&#x3e;".to_string()),
        Just("&#xFF21;".to_string()),
        Just("&#12288;".to_string()),
        Just("&amp;amp;".to_string()),
        Just("＆ｇｔ；".to_string()),
        Just("&#38;".to_string()),
        Just("&#x26;lt;".to_string()),
        Just("體學國".to_string()),
        "[\u{4E00}-\u{4E20}]{1,3}",
        any::<char>().prop_map(String::from),
    ]
}

fn mixed_string() -> impl Strategy<Value = String> {
    prop::collection::vec(piece(), 0..8).prop_map(|v| v.concat())
}

fn mapping() -> CharMapping {
    // 'A' is both a key and the fold of a fullwidth letter.
    let mut pairs: Vec<(char, char)> = vec![('A', 'b'), ('體', '体'), ('學', '学')];
    pairs.extend(CharMapping::sample().pairs());
    CharMapping::new(pairs).unwrap()
}

fn forbidden_after_cleaning(c: char) -> bool {
    c == '\u{FFFD}' || c == '\u{3000}' || ('\u{FF01}'..='\u{FF5E}').contains(&c)
}

fn clean_text(c: &Cleaner, s: &str) -> String {
    c.normalize(s, &mut RuleCounts::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn pipeline_is_idempotent(s in mixed_string()) {
        let c = Cleaner::new(mapping());
        let once = clean_text(&c, &s);
        let twice = clean_text(&c, &once);
        prop_assert_eq!(&once, &twice);
    }

    #[test]
    fn halfwidth_preserves_length(s in mixed_string()) {
        prop_assert_eq!(to_halfwidth(&s).chars().count(), s.chars().count());
    }

    #[test]
    fn html_decoding_never_grows(s in mixed_string()) {
        prop_assert!(decode_html_refs(&s).chars().count() <= s.chars().count());
    }

    #[test]
    fn cleaned_output_has_no_fullwidth_or_replacement(
        rows in prop::collection::vec((mixed_string(), mixed_string()), 0..6)
    ) {
        let raw: Vec<RawPair> = rows
            .iter()
            .enumerate()
            .map(|(i, (a, b))| RawPair { src: a.as_bytes().to_vec(), tgt: b.as_bytes().to_vec(), line_no: i + 1 })
            .collect();
        let (out, report) = clean_corpus(raw, &mapping());
        prop_assert_eq!(report.kept + report.dropped_encoding + report.dropped_empty, rows.len());
        prop_assert_eq!(report.kept, out.len());
        for p in &out {
            for side in [&p.src, &p.tgt] {
                prop_assert!(!side.chars().any(forbidden_after_cleaning));
                prop_assert!(!side.trim().is_empty());
            }
        }
    }

    #[test]
    fn map_chars_is_per_character(s in "[體學國a-c]{0,10}") {
        let m = mapping();
        let expect: String = s.chars().map(|c| m.get(c).unwrap_or(c)).collect();
        prop_assert_eq!(map_chars(&s, &m), expect);
    }
}

#[test]
fn fullwidth_ampersand_reference_decodes_under_fixed_order() {
    let c = Cleaner::default();
    assert_eq!(clean_text(&c, "＆gt;"), ">");
    assert_eq!(to_halfwidth("＆gt;"), "&gt;");
}

#[test]
fn invalid_bytes_drop_the_whole_pair() {
    let raw = vec![
        RawPair { src: b"ok".to_vec(), tgt: vec![0xC3, 0x28], line_no: 1 },
        RawPair { src: b"fine".to_vec(), tgt: b"good".to_vec(), line_no: 2 },
    ];
    let (out, report) = clean_corpus(raw, &CharMapping::default());
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].line_no, 2);
    assert_eq!(report.dropped_encoding, 1);
}

#[test]
fn fullwidth_mapping_targets_are_rejected() {
    assert!(CharMapping::new([('a', 'Ａ')]).is_err());
    assert!(CharMapping::new([('a', '\u{3000}')]).is_err());
}
