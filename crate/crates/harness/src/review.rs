//! Blind side-by-side review of reasoning outputs from several systems.
//!
//! Each item shows the same frame with one candidate per system under a
//! shuffled letter. Reviewers pick one candidate and rate each candidate as
//! factually correct (1) or not (0). System names stay on the server until
//! the session is closed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use gozone_core::metrics::format_sig3;
use gozone_core::{BoundingBox, Turn2Output};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReviewError {
    #[error("systems cover different samples: {system} differs from {reference}")]
    CoverageMismatch { system: String, reference: String },
    #[error("at least two systems are required, got {0}")]
    TooFewSystems(usize),
    #[error("at most 26 systems are supported, got {0}")]
    TooManySystems(usize),
    #[error("system {system} lists sample {sample_id} more than once")]
    DuplicateSample { system: String, sample_id: String },
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("session {0} is still open")]
    OpenSession(String),
    #[error("label {0:?} is not shown on this item")]
    InvalidLabel(String),
    #[error("rating for {label} must be 0 or 1, got {value}")]
    InvalidRating { label: String, value: i64 },
    #[error("item {index} out of range (session has {len} items)")]
    ItemOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningFields {
    pub location: String,
    pub exposure: String,
    pub next_action: String,
    pub risk: String,
}

impl From<&Turn2Output> for ReasoningFields {
    fn from(t: &Turn2Output) -> Self {
        let f = |o: &Option<String>| o.clone().unwrap_or_default();
        Self {
            location: f(&t.location_text),
            exposure: f(&t.exposure_text),
            next_action: f(&t.next_action_text),
            risk: f(&t.risk_text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub hidden_system_id: String,
    pub display_label: char,
    pub reasoning: ReasoningFields,
    pub predicted_box: Option<BoundingBox>,
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonItem {
    pub sample_id: String,
    /// Ordered by display label.
    pub candidates: Vec<Candidate>,
    pub selection: Option<char>,
    pub accuracy_ratings: BTreeMap<char, u8>,
}

impl ComparisonItem {
    pub fn is_complete(&self) -> bool {
        self.selection.is_some()
    }

    pub fn labels(&self) -> impl Iterator<Item = char> + '_ {
        self.candidates.iter().map(|c| c.display_label)
    }

    fn system_for(&self, label: char) -> Option<&str> {
        self.candidates
            .iter()
            .find(|c| c.display_label == label)
            .map(|c| c.hidden_system_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub reviewer_id: String,
    pub seed: u64,
    pub status: SessionStatus,
    pub items: Vec<ComparisonItem>,
}

/// System order for item `index`: sorted ids shuffled with a generator
/// seeded by `seed` on stream `index`.
pub fn label_permutation(systems: &[&str], seed: u64, index: usize) -> Vec<String> {
    let mut order: Vec<String> = systems.iter().map(|s| s.to_string()).collect();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    order.shuffle(&mut rng);
    order
}

fn label(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// Build a session with one item per sample.
///
/// `image_refs` maps sample ids to the frame shown to reviewers.
pub fn create_session(
    session_id: &str,
    per_system_outputs: &BTreeMap<String, Vec<(String, Turn2Output)>>,
    reviewer_id: &str,
    seed: u64,
    image_refs: &BTreeMap<String, String>,
) -> Result<ReviewSession, ReviewError> {
    let k = per_system_outputs.len();
    if k < 2 {
        return Err(ReviewError::TooFewSystems(k));
    }
    if k > 26 {
        return Err(ReviewError::TooManySystems(k));
    }
    let mut by_system: BTreeMap<&str, BTreeMap<&str, &Turn2Output>> = BTreeMap::new();
    for (system, outputs) in per_system_outputs {
        let mut map = BTreeMap::new();
        for (sample_id, out) in outputs {
            if map.insert(sample_id.as_str(), out).is_some() {
                return Err(ReviewError::DuplicateSample {
                    system: system.clone(),
                    sample_id: sample_id.clone(),
                });
            }
        }
        by_system.insert(system.as_str(), map);
    }
    let mut systems = by_system.iter();
    let (reference, reference_map) = systems.next().expect("k >= 2");
    let sample_ids: BTreeSet<&str> = reference_map.keys().copied().collect();
    for (system, map) in systems {
        if !map.keys().copied().eq(sample_ids.iter().copied()) {
            return Err(ReviewError::CoverageMismatch {
                system: system.to_string(),
                reference: reference.to_string(),
            });
        }
    }

    let system_ids: Vec<&str> = by_system.keys().copied().collect();
    let items = sample_ids
        .iter()
        .enumerate()
        .map(|(index, sample_id)| {
            let candidates = label_permutation(&system_ids, seed, index)
                .into_iter()
                .enumerate()
                .map(|(i, system)| {
                    let out = by_system[system.as_str()][sample_id];
                    Candidate {
                        display_label: label(i),
                        reasoning: ReasoningFields::from(out),
                        predicted_box: out.predicted_box,
                        image_ref: image_refs.get(*sample_id).cloned(),
                        hidden_system_id: system,
                    }
                })
                .collect();
            ComparisonItem {
                sample_id: sample_id.to_string(),
                candidates,
                selection: None,
                accuracy_ratings: BTreeMap::new(),
            }
        })
        .collect();
    Ok(ReviewSession {
        session_id: session_id.to_string(),
        reviewer_id: reviewer_id.to_string(),
        seed,
        status: SessionStatus::Open,
        items,
    })
}

fn parse_label(item: &ComparisonItem, raw: &str) -> Result<char, ReviewError> {
    let mut chars = raw.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => {
            let c = c.to_ascii_uppercase();
            if item.labels().any(|l| l == c) {
                Ok(c)
            } else {
                Err(ReviewError::InvalidLabel(raw.to_string()))
            }
        }
        _ => Err(ReviewError::InvalidLabel(raw.to_string())),
    }
}

/// Acknowledgment of a stored submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub item_index: usize,
    pub complete: bool,
    pub n_completed: usize,
    pub n_items: usize,
}

impl ReviewSession {
    pub fn n_completed(&self) -> usize {
        self.items.iter().filter(|i| i.is_complete()).count()
    }

    /// First item without a selection.
    pub fn next_index(&self) -> Option<usize> {
        self.items.iter().position(|i| !i.is_complete())
    }

    pub fn item(&self, index: usize) -> Result<&ComparisonItem, ReviewError> {
        self.items.get(index).ok_or(ReviewError::ItemOutOfRange { index, len: self.items.len() })
    }

    /// Record a selection and ratings for one item. Everything is validated
    /// before anything changes; a repeat submission replaces the previous
    /// one.
    pub fn submit(
        &mut self,
        item_index: usize,
        selection: &str,
        ratings: &BTreeMap<String, i64>,
    ) -> Result<SubmitAck, ReviewError> {
        if self.status == SessionStatus::Closed {
            return Err(ReviewError::SessionClosed(self.session_id.clone()));
        }
        let item = self.item(item_index)?;
        let selection = parse_label(item, selection)?;
        let mut parsed = BTreeMap::new();
        for (raw, &value) in ratings {
            let l = parse_label(item, raw)?;
            if value != 0 && value != 1 {
                return Err(ReviewError::InvalidRating { label: raw.clone(), value });
            }
            parsed.insert(l, value as u8);
        }
        let item = &mut self.items[item_index];
        item.selection = Some(selection);
        item.accuracy_ratings = parsed;
        Ok(SubmitAck {
            item_index,
            complete: true,
            n_completed: self.n_completed(),
            n_items: self.items.len(),
        })
    }

    pub fn close(&mut self) {
        self.status = SessionStatus::Closed;
    }

    /// Systems reviewed in this session, sorted.
    pub fn systems(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .items
            .iter()
            .flat_map(|i| i.candidates.iter().map(|c| c.hidden_system_id.as_str()))
            .collect();
        set.into_iter().map(String::from).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    /// Items won, as a share of every item the system appeared in.
    pub selected_ratio_pct: f64,
    /// Mean binary rating; `None` when never rated.
    pub acc_rating_pct: Option<f64>,
    pub n_items: usize,
    pub n_selected: usize,
    pub n_rated: usize,
    pub n_rated_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub n_sessions: usize,
    pub n_items: usize,
    pub n_submitted: usize,
    pub systems: BTreeMap<String, SystemSummary>,
}

/// Pool closed sessions into per-system outcomes. Reviewers are weighted
/// equally per item.
pub fn summarize(sessions: &[ReviewSession]) -> Result<ReviewSummary, ReviewError> {
    #[derive(Default)]
    struct Tally {
        items: usize,
        selected: usize,
        rated: usize,
        correct: usize,
    }
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut n_items = 0;
    let mut n_submitted = 0;
    for s in sessions {
        if s.status != SessionStatus::Closed {
            return Err(ReviewError::OpenSession(s.session_id.clone()));
        }
        for item in &s.items {
            n_items += 1;
            n_submitted += usize::from(item.is_complete());
            for c in &item.candidates {
                tallies.entry(&c.hidden_system_id).or_default().items += 1;
            }
            if let Some(system) = item.selection.and_then(|l| item.system_for(l)) {
                tallies.entry(system).or_default().selected += 1;
            }
            for (&l, &r) in &item.accuracy_ratings {
                if let Some(system) = item.system_for(l) {
                    let t = tallies.entry(system).or_default();
                    t.rated += 1;
                    t.correct += usize::from(r == 1);
                }
            }
        }
    }
    let systems = tallies
        .into_iter()
        .map(|(id, t)| {
            let summary = SystemSummary {
                selected_ratio_pct: if t.items == 0 { 0.0 } else { 100.0 * t.selected as f64 / t.items as f64 },
                acc_rating_pct: (t.rated > 0).then(|| 100.0 * t.correct as f64 / t.rated as f64),
                n_items: t.items,
                n_selected: t.selected,
                n_rated: t.rated,
                n_rated_correct: t.correct,
            };
            (id.to_string(), summary)
        })
        .collect();
    Ok(ReviewSummary { n_sessions: sessions.len(), n_items, n_submitted, systems })
}

impl ReviewSummary {
    /// Plain-text table with one row per system.
    pub fn to_table(&self) -> String {
        let header = ["System", "Selected Ratio (%)", "Acc. Rating", "Items", "Rated"];
        let rows: Vec<[String; 5]> = self
            .systems
            .iter()
            .map(|(id, s)| {
                [
                    id.clone(),
                    format_sig3(s.selected_ratio_pct),
                    s.acc_rating_pct.map_or_else(|| "undef".to_string(), format_sig3),
                    s.n_items.to_string(),
                    s.n_rated.to_string(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(header.to_vec());
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out.push_str(&format!(
            "{} session(s), {} item(s), {} submitted\n",
            self.n_sessions, self.n_items, self.n_submitted
        ));
        out
    }
}

/// One stored submission, replayed on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JournalEntry {
    index: usize,
    selection: Option<char>,
    ratings: BTreeMap<char, u8>,
}

/// File persistence: a JSON snapshot per session plus an append-only journal
/// of item submissions made since the snapshot.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn journal_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.journal.jsonl"))
    }

    /// Write a full snapshot through a temporary file and rename, then drop
    /// the journal it supersedes.
    pub fn save(&self, session: &ReviewSession) -> std::io::Result<()> {
        let target = self.dir.join(format!("{}.json", session.session_id));
        let tmp = self.dir.join(format!(".{}.json.tmp", session.session_id));
        let body = serde_json::to_vec(session).map_err(std::io::Error::other)?;
        fs::write(&tmp, body)?;
        fs::rename(&tmp, target)?;
        match fs::remove_file(self.journal_path(&session.session_id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Append the current state of one item as a single journal line.
    pub fn save_item(&self, session: &ReviewSession, index: usize) -> std::io::Result<()> {
        use std::io::Write;
        let item = session
            .items
            .get(index)
            .ok_or_else(|| std::io::Error::other(format!("no item {index}")))?;
        let entry = JournalEntry {
            index,
            selection: item.selection,
            ratings: item.accuracy_ratings.clone(),
        };
        let mut line = serde_json::to_string(&entry).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.journal_path(&session.session_id))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }

    /// Every stored session with its journal replayed, sorted by id.
    pub fn load_all(&self) -> std::io::Result<Vec<ReviewSession>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with('.') || !name.ends_with(".json") {
                continue;
            }
            let text = fs::read_to_string(&path)?;
            let mut session: ReviewSession = serde_json::from_str(&text)
                .map_err(|e| std::io::Error::other(format!("{}: {e}", path.display())))?;
            self.replay(&mut session)?;
            out.push(session);
        }
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        Ok(out)
    }

    fn replay(&self, session: &mut ReviewSession) -> std::io::Result<()> {
        let path = self.journal_path(&session.session_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        for line in text.lines() {
            // a torn final line from an interrupted write is dropped
            let Ok(entry) = serde_json::from_str::<JournalEntry>(line) else { continue };
            if let Some(item) = session.items.get_mut(entry.index) {
                item.selection = entry.selection;
                item.accuracy_ratings = entry.ratings;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(systems: &[&str], samples: &[&str]) -> BTreeMap<String, Vec<(String, Turn2Output)>> {
        systems
            .iter()
            .map(|s| {
                let list = samples
                    .iter()
                    .map(|id| {
                        let t = Turn2Output {
                            location_text: Some(format!("{s} on {id}")),
                            ..Default::default()
                        };
                        (id.to_string(), t)
                    })
                    .collect();
                (s.to_string(), list)
            })
            .collect()
    }

    fn session(systems: &[&str], n: usize, seed: u64) -> ReviewSession {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        create_session("x", &outputs(systems, &refs), "r", seed, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn labels_are_a_permutation() {
        let s = session(&["p", "q", "r"], 50, 7);
        assert_eq!(s.items.len(), 50);
        for item in &s.items {
            assert_eq!(item.labels().collect::<String>(), "ABC");
            let mut ids: Vec<&str> = item.candidates.iter().map(|c| c.hidden_system_id.as_str()).collect();
            ids.sort();
            assert_eq!(ids, ["p", "q", "r"]);
            for c in &item.candidates {
                assert_eq!(c.reasoning.location, format!("{} on {}", c.hidden_system_id, item.sample_id));
            }
        }
    }

    #[test]
    fn seeds_drive_permutations() {
        let a = session(&["p", "q"], 40, 1);
        let b = session(&["p", "q"], 40, 1);
        let c = session(&["p", "q"], 40, 2);
        assert_eq!(a, b);
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn creation_errors() {
        let one = outputs(&["p"], &["a"]);
        assert_eq!(
            create_session("x", &one, "r", 0, &BTreeMap::new()),
            Err(ReviewError::TooFewSystems(1))
        );
        let mut two = outputs(&["p", "q"], &["a", "b"]);
        two.get_mut("q").unwrap().pop();
        assert!(matches!(
            create_session("x", &two, "r", 0, &BTreeMap::new()),
            Err(ReviewError::CoverageMismatch { .. })
        ));
    }

    #[test]
    fn submission_rules() {
        let mut s = session(&["p", "q"], 3, 0);
        let ok: BTreeMap<String, i64> = [("A".to_string(), 1), ("B".to_string(), 0)].into();
        let ack = s.submit(0, "a", &ok).unwrap();
        assert!(ack.complete);
        assert_eq!(ack.n_completed, 1);
        assert_eq!(s.next_index(), Some(1));

        let bad: BTreeMap<String, i64> = [("A".to_string(), 2)].into();
        assert_eq!(
            s.submit(1, "A", &bad),
            Err(ReviewError::InvalidRating { label: "A".into(), value: 2 })
        );
        assert_eq!(s.submit(1, "C", &ok), Err(ReviewError::InvalidLabel("C".into())));
        let stray: BTreeMap<String, i64> = [("Z".to_string(), 1)].into();
        assert_eq!(s.submit(1, "A", &stray), Err(ReviewError::InvalidLabel("Z".into())));
        assert!(!s.items[1].is_complete());
        assert!(matches!(s.submit(9, "A", &ok), Err(ReviewError::ItemOutOfRange { .. })));

        s.submit(0, "B", &BTreeMap::new()).unwrap();
        assert_eq!(s.items[0].selection, Some('B'));
        assert!(s.items[0].accuracy_ratings.is_empty());

        s.close();
        assert_eq!(s.submit(1, "A", &ok), Err(ReviewError::SessionClosed("x".into())));
    }

    fn system_label(item: &ComparisonItem, system: &str) -> String {
        item.candidates
            .iter()
            .find(|c| c.hidden_system_id == system)
            .unwrap()
            .display_label
            .to_string()
    }

    #[test]
    fn summary_counts() {
        let mut s = session(&["x", "y"], 10, 3);
        for i in 0..10 {
            let winner = if i < 8 { "x" } else { "y" };
            let lx = system_label(&s.items[i], "x");
            let rating = [1, 1, 0, 1];
            let ratings: BTreeMap<String, i64> = if i < 4 { [(lx, rating[i])].into() } else { BTreeMap::new() };
            let sel = system_label(&s.items[i], winner);
            s.submit(i, &sel, &ratings).unwrap();
        }
        assert_eq!(summarize(std::slice::from_ref(&s)), Err(ReviewError::OpenSession("x".into())));
        s.close();
        let sum = summarize(&[s]).unwrap();
        assert_eq!(sum.systems["x"].selected_ratio_pct, 80.0);
        assert_eq!(sum.systems["y"].selected_ratio_pct, 20.0);
        assert_eq!(sum.systems["x"].acc_rating_pct, Some(75.0));
        assert_eq!(sum.systems["y"].acc_rating_pct, None);
        assert_eq!(sum.systems["x"].n_rated, 4);
        let table = sum.to_table();
        assert!(table.contains("Selected Ratio (%)"));
        assert!(table.lines().nth(1).unwrap().starts_with("x "));
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let mut s = session(&["p", "q"], 3, 0);
        store.save(&s).unwrap();
        s.submit(1, "B", &[("A".to_string(), 1)].into()).unwrap();
        store.save_item(&s, 1).unwrap();
        assert_eq!(store.load_all().unwrap(), vec![s.clone()]);
        s.close();
        store.save(&s).unwrap();
        assert!(!dir.path().join("x.journal.jsonl").exists());
        assert_eq!(store.load_all().unwrap(), vec![s]);
    }
}
