use gozone_core::parsing::{parse_box, parse_turn2, render_turn2};
use gozone_core::{BoundingBox, Turn2Output};
use proptest::prelude::*;

/// Character-scanning reference for the answer tuple: find the first `[`
/// that opens four comma-separated decimal numbers followed by `]`, round
/// half-up, clamp, reorder.
fn reference_box(text: &str) -> Option<[i64; 4]> {
    let bytes = text.as_bytes();
    'outer: for start in 0..bytes.len() {
        if bytes[start] != b'[' {
            continue;
        }
        let mut i = start + 1;
        let mut nums = Vec::new();
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let s = i;
            if i < bytes.len() && (bytes[i] == b'-' || bytes[i] == b'+') {
                i += 1;
            }
            let digits_start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            let tok = &text[s..i];
            let body = &text[digits_start..i];
            if body.is_empty() || body == "." || body.matches('.').count() > 1 {
                continue 'outer;
            }
            let Ok(v) = tok.parse::<f64>() else { continue 'outer };
            nums.push(v);
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if nums.len() == 4 {
                if i < bytes.len() && bytes[i] == b']' {
                    break;
                }
                continue 'outer;
            }
            if i < bytes.len() && bytes[i] == b',' {
                i += 1;
            } else {
                continue 'outer;
            }
        }
        let r: Vec<i64> = nums
            .iter()
            .map(|v| ((v + 0.5).floor() as i64).clamp(0, 1000))
            .collect();
        let out = [r[0].min(r[2]), r[1].min(r[3]), r[0].max(r[2]), r[1].max(r[3])];
        if out[0] == out[2] || out[1] == out[3] {
            return None;
        }
        return Some(out);
    }
    None
}

#[test]
fn reordering_example_matches_reference() {
    let raw = "<answer>[560.4, 780.2, 120.0, 340.9]</answer>";
    assert_eq!(reference_box(raw), Some([120, 341, 560, 780]));
    let t = parse_turn2(raw);
    assert_eq!(t.predicted_box.map(|b| b.as_array().map(i64::from)), reference_box(raw));
}

fn coord() -> impl Strategy<Value = String> {
    prop_oneof![
        (0i64..1000).prop_map(|v| v.to_string()),
        (-50.0f64..1100.0).prop_map(|v| format!("{v:.1}")),
        (0.0f64..1000.0).prop_map(|v| format!("{v:.3}")),
        Just("500.5".to_string()),
        Just("0.5".to_string()),
    ]
}

fn field_text() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 ,.()'-]{0,60}[A-Za-z0-9.)]".prop_map(|s| s.to_string())
}

fn valid_output() -> impl Strategy<Value = Turn2Output> {
    (
        field_text(),
        proptest::array::uniform4(field_text()),
        (0i64..999, 0i64..999, 1i64..1000, 1i64..1000),
    )
        .prop_map(|(thinking, f, (x, y, w, h))| {
            let b = BoundingBox::new(x, y, (x + w).min(1000), (y + h).min(1000)).unwrap();
            let mut t = Turn2Output {
                raw_text: String::new(),
                thinking_text: Some(thinking),
                location_text: Some(f[0].clone()),
                exposure_text: Some(f[1].clone()),
                next_action_text: Some(f[2].clone()),
                risk_text: Some(f[3].clone()),
                predicted_box: Some(b),
                format_valid: true,
            };
            t.raw_text = render_turn2(&t);
            t
        })
}

fn same_fields(a: &Turn2Output, b: &Turn2Output) -> bool {
    Turn2Output { raw_text: String::new(), ..a.clone() } == Turn2Output { raw_text: String::new(), ..b.clone() }
}

proptest! {
    #[test]
    fn rendered_outputs_parse_back(t in valid_output()) {
        let parsed = parse_turn2(&t.raw_text);
        prop_assert_eq!(parsed, t);
    }

    #[test]
    fn whitespace_between_blocks_is_ignored(
        t in valid_output(),
        pads in proptest::collection::vec("[ \t\n]{0,6}", 4),
    ) {
        let raw = &t.raw_text;
        let perturbed = format!(
            "{}{}{}",
            pads[0],
            raw.replace("</thinking>\n\n<reasoning>", &format!("</thinking>\n{}\n<reasoning>", pads[1]))
                .replace("</reasoning>\n\n<answer>", &format!("</reasoning>{}<answer>", pads[2])),
            pads[3],
        );
        prop_assert!(same_fields(&parse_turn2(&perturbed), &t));
    }

    #[test]
    fn box_parser_matches_reference(
        prefix in "[a-z \\[\\],.0-9]{0,10}",
        c in proptest::array::uniform4(coord()),
        suffix in "[a-z \\]]{0,6}",
    ) {
        let text = format!("{prefix}[{}, {}, {}, {}]{suffix}", c[0], c[1], c[2], c[3]);
        let ours = parse_box(&text).map(|b| b.as_array().map(i64::from));
        prop_assert_eq!(ours, reference_box(&text), "text: {}", text);
    }
}
