//! Extraction of structured fields from raw model text.
//!
//! Both parsers are total: any input yields an output, with missing pieces
//! left empty. Extraction is lenient so a usable box survives a sloppy
//! response, while [`format_score`] stays strict.

use std::sync::LazyLock;

use regex::Regex;

use crate::domain::{round_half_up, BoundingBox, SurgicalPhase, Turn1Output, Turn2Output, GRID_MAX};

static LETTER_MARKED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([A-D])[).]").expect("valid regex"));
static ANSWER_IS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(?i:answer)\s*(?i:is)?\s*[:\-]?\s*[(*]*\s*([A-D])\b").expect("valid regex")
});
static REASONING_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?im)^[ \t]*(?:\d+[ \t]*[.)][ \t]*)?(?:\*\*)?[ \t]*(location|exposure|next[ \t]+action|critical[ \t]+risk)[ \t]*(?:\*\*)?[ \t]*:(?:\*\*)?",
    )
    .expect("valid regex")
});
static BOX_TUPLE: LazyLock<Regex> = LazyLock::new(|| {
    let num = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+))";
    Regex::new(&format!(
        r"\[\s*{num}\s*,\s*{num}\s*,\s*{num}\s*,\s*{num}\s*\]"
    ))
    .expect("valid regex")
});

/// Strip markdown emphasis and punctuation that commonly wraps a lone letter.
fn bare_token(line: &str) -> &str {
    line.trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '`' | '(' | ')' | '[' | ']' | '.' | ':' | '"' | '\''))
}

fn lone_letter(token: &str) -> Option<char> {
    let mut chars = token.chars();
    match (chars.next(), chars.next()) {
        (Some(c @ 'A'..='D'), None) => Some(c),
        _ => None,
    }
}

/// Extract the multiple-choice phase letter.
///
/// Priority: an uppercase `A`–`D` directly followed by `)` or `.`, or a line
/// holding nothing but the letter; then an "answer is X" / "answer: X"
/// phrase; then a lone trailing letter.
pub fn parse_turn1(raw: &str) -> Turn1Output {
    let marked = LETTER_MARKED.captures(raw).map(|c| (c.get(0).map_or(0, |m| m.start()), c[1].chars().next()));
    let own_line = raw
        .lines()
        .scan(0usize, |offset, line| {
            let start = *offset;
            *offset += line.len() + 1;
            Some((start, line))
        })
        .find_map(|(start, line)| lone_letter(bare_token(line)).map(|c| (start, Some(c))));
    // rule 1 covers both forms; the earliest occurrence wins
    let first_rule = match (marked, own_line) {
        (Some(a), Some(b)) => Some(if a.0 <= b.0 { a.1 } else { b.1 }),
        (a, b) => a.or(b).map(|x| x.1),
    }
    .flatten();

    let letter = first_rule
        .or_else(|| {
            ANSWER_IS
                .captures(raw)
                .and_then(|c| c[1].chars().next())
        })
        .or_else(|| {
            raw.split_whitespace()
                .next_back()
                .and_then(|t| lone_letter(bare_token(t)))
        });
    Turn1Output::from_letter(raw, letter)
}

/// Byte range of the content of the first `<tag>…</tag>` block, taking the
/// innermost opening tag before the first closing tag. Tag names match
/// case-insensitively.
fn block_range(lower: &str, tag: &str, allow_unclosed: bool) -> Option<(usize, usize)> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    match lower.find(&close) {
        Some(end) => {
            let start = lower[..end].rfind(&open)? + open.len();
            Some((start, end))
        }
        None if allow_unclosed => {
            let start = lower.find(&open)? + open.len();
            Some((start, lower.len()))
        }
        None => None,
    }
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

#[derive(Default)]
struct ReasoningFields {
    location: Option<String>,
    exposure: Option<String>,
    next_action: Option<String>,
    risk: Option<String>,
}

fn parse_reasoning(block: &str) -> ReasoningFields {
    let labels: Vec<_> = REASONING_LABEL.captures_iter(block).collect();
    let mut fields = ReasoningFields::default();
    for (i, cap) in labels.iter().enumerate() {
        let whole = cap.get(0).expect("match");
        let end = labels
            .get(i + 1)
            .map_or(block.len(), |next| next.get(0).expect("match").start());
        let value = non_empty(&block[whole.end()..end]);
        let key: String = cap[1]
            .to_ascii_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        let slot = match key.as_str() {
            "location" => &mut fields.location,
            "exposure" => &mut fields.exposure,
            "next action" => &mut fields.next_action,
            _ => &mut fields.risk,
        };
        if slot.is_none() {
            *slot = value;
        }
    }
    fields
}

fn grid_coord(token: &str) -> Option<i64> {
    let v: f64 = token.parse().ok()?;
    v.is_finite()
        .then(|| round_half_up(v).clamp(0, i64::from(GRID_MAX)))
}

/// First bracketed 4-tuple in `text`, rounded, clamped and axis-ordered.
///
/// Returns `None` when no tuple is found or the result has zero area.
pub fn parse_box(text: &str) -> Option<BoundingBox> {
    let cap = BOX_TUPLE.captures(text)?;
    let v: Vec<i64> = (1..=4)
        .map(|i| grid_coord(&cap[i]))
        .collect::<Option<_>>()?;
    BoundingBox::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3])).ok()
}

/// Extract thinking, the four reasoning fields and the answer box.
pub fn parse_turn2(raw: &str) -> Turn2Output {
    // ASCII lowercasing keeps byte offsets aligned with `raw`
    let lower = raw.to_ascii_lowercase();
    let thinking_text = block_range(&lower, "thinking", false).and_then(|(s, e)| non_empty(&raw[s..e]));
    let reasoning = block_range(&lower, "reasoning", false)
        .map(|(s, e)| parse_reasoning(&raw[s..e]))
        .unwrap_or_default();
    let predicted_box = block_range(&lower, "answer", true).and_then(|(s, e)| parse_box(&raw[s..e]));

    let mut out = Turn2Output {
        raw_text: raw.to_string(),
        thinking_text,
        location_text: reasoning.location,
        exposure_text: reasoning.exposure,
        next_action_text: reasoning.next_action,
        risk_text: reasoning.risk,
        predicted_box,
        format_valid: false,
    };
    out.format_valid = out.is_complete();
    out
}

/// Binary format reward.
pub fn format_score(t2: &Turn2Output) -> f64 {
    if t2.format_valid {
        1.0
    } else {
        0.0
    }
}

/// Render fields in the required output layout. Missing fields render empty.
pub fn render_turn2(t2: &Turn2Output) -> String {
    let field = |f: &Option<String>| f.clone().unwrap_or_default();
    let answer = t2
        .predicted_box
        .map(|b| b.to_string())
        .unwrap_or_default();
    format!(
        "<thinking>\n{}\n</thinking>\n\n<reasoning>\n1. Location: {}\n2. Exposure: {}\n3. Next Action: {}\n4. Critical Risk: {}\n</reasoning>\n\n<answer>\n{}\n</answer>",
        field(&t2.thinking_text),
        field(&t2.location_text),
        field(&t2.exposure_text),
        field(&t2.next_action_text),
        field(&t2.risk_text),
        answer,
    )
}

/// Phase letter for the given phase rendered as a bare answer, handy for stubs.
pub fn render_turn1(phase: SurgicalPhase) -> String {
    format!("{}) {}", phase.letter(), phase.display_name())
}
