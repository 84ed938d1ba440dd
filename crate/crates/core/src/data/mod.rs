//! Event ingestion, session labeling, support/length filtering, temporal
//! splits and dataset files.

pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("input contained lines but no valid records")]
    EmptyInput,
    #[error("split boundary {boundary} leaves one side empty (session starts span {min}..={max})")]
    BoundaryOutOfRange { boundary: i64, min: i64, max: i64 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file: {0}")]
    BadDatasetFile(String),
}

/// One interaction from the raw log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Click,
    Order,
}

impl std::str::FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "click" => Ok(Action::Click),
            "order" => Ok(Action::Order),
            other => Err(format!("unknown action '{other}'")),
        }
    }
}

/// Input encodings for `parse_events`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" => Ok(InputFormat::Jsonl),
            other => Err(format!("unknown input format '{other}'")),
        }
    }
}

/// One click step: the item index and whether the item was ordered anywhere
/// in the same session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub item: u32,
    pub ordered: bool,
}

/// A user's click sequence with per-item order flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    /// Minimum event time over all events of the session.
    pub start_ts: i64,
    pub steps: Vec<Step>,
}

impl Session {
    pub fn click_count(&self) -> usize {
        self.steps.len()
    }

    pub fn order_count(&self) -> usize {
        self.steps.iter().filter(|s| s.ordered).count()
    }
}

/// Bijection between external item ids and dense indices `[0, V)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    ids: Vec<String>,
}

impl Vocab {
    pub fn from_ids(ids: Vec<String>) -> Self {
        debug_assert_eq!(
            ids.iter().collect::<HashSet<_>>().len(),
            ids.len(),
            "duplicate item ids in vocab"
        );
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, index: u32) -> &str {
        &self.ids[index as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.ids.iter().position(|x| x == id).map(|i| i as u32)
    }
}

/// Index-encoded sessions plus their vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: Vocab,
    pub sessions: Vec<Session>,
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn total_clicks(&self) -> usize {
        self.sessions.iter().map(|s| s.click_count()).sum()
    }

    pub fn total_orders(&self) -> usize {
        self.sessions.iter().map(|s| s.order_count()).sum()
    }

    /// Every step's item index must be inside the vocab.
    pub fn check_consistency(&self) -> bool {
        let v = self.vocab.len() as u32;
        self.sessions
            .iter()
            .flat_map(|s| s.steps.iter())
            .all(|st| st.item < v)
    }
}

/// Counter for raw-log oddities surfaced during labeling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelDiagnostics {
    /// Order events whose item was never clicked in the same session.
    pub dangling_orders: usize,
}

const CSV_HEADER: [&str; 4] = ["session_id", "item_id", "timestamp", "action"];

#[derive(Deserialize)]
struct JsonEvent {
    session_id: String,
    item_id: String,
    timestamp: i64,
    action: String,
}

/// Parse a line-oriented byte stream of events. Records come back in input
/// order; any malformed record aborts with its line number.
pub fn parse_events<R: BufRead>(reader: R, format: InputFormat) -> Result<Vec<RawEvent>, DataError> {
    match format {
        InputFormat::Csv => parse_csv(reader),
        InputFormat::Jsonl => parse_jsonl(reader),
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> DataError {
    DataError::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

fn validate_event(
    line: usize,
    session_id: String,
    item_id: String,
    timestamp: i64,
    action: &str,
) -> Result<RawEvent, DataError> {
    if timestamp < 0 {
        return Err(malformed(line, format!("negative timestamp {timestamp}")));
    }
    let action: Action = action.parse().map_err(|e: String| malformed(line, e))?;
    Ok(RawEvent {
        session_id,
        item_id,
        timestamp,
        action,
    })
}

fn parse_csv<R: BufRead>(reader: R) -> Result<Vec<RawEvent>, DataError> {
    let mut lines = 0usize;
    let mut events = Vec::new();
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    {
        let headers = csv_reader
            .headers()
            .map_err(|e| malformed(1, e.to_string()))?;
        if !headers.is_empty() {
            lines += 1;
            let got: Vec<&str> = headers.iter().collect();
            if got != CSV_HEADER {
                return Err(malformed(
                    1,
                    format!("expected header {CSV_HEADER:?}, got {got:?}"),
                ));
            }
        }
    }
    for record in csv_reader.into_records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(lines + 1);
            malformed(line, e.to_string())
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(lines + 1);
        lines += 1;
        if record.len() != 4 {
            return Err(malformed(line, format!("expected 4 fields, got {}", record.len())));
        }
        let timestamp: i64 = record[2]
            .parse()
            .map_err(|_| malformed(line, format!("bad timestamp '{}'", &record[2])))?;
        events.push(validate_event(
            line,
            record[0].to_string(),
            record[1].to_string(),
            timestamp,
            &record[3],
        )?);
    }
    if events.is_empty() && lines > 0 {
        return Err(DataError::EmptyInput);
    }
    Ok(events)
}

fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawEvent>, DataError> {
    let mut lines = 0usize;
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        lines += 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonEvent = serde_json::from_str(&line)
            .map_err(|e| malformed(line_no, e.to_string()))?;
        events.push(validate_event(
            line_no,
            parsed.session_id,
            parsed.item_id,
            parsed.timestamp,
            &parsed.action,
        )?);
    }
    if events.is_empty() && lines > 0 {
        return Err(DataError::EmptyInput);
    }
    Ok(events)
}

/// Group events by session, sort clicks by timestamp (stable on ties) and
/// flag each click whose item has an order event anywhere in the same
/// session. Order events produce no steps; orders for never-clicked items
/// are dropped and tallied.
pub fn build_labeled_sessions(events: &[RawEvent]) -> (Dataset, LabelDiagnostics) {
    // Sessions keep their first-appearance order so the result is
    // independent of any hash iteration order.
    let mut session_order: Vec<&str> = Vec::new();
    let mut by_session: HashMap<&str, Vec<&RawEvent>> = HashMap::new();
    for event in events {
        by_session
            .entry(event.session_id.as_str())
            .or_insert_with(|| {
                session_order.push(event.session_id.as_str());
                Vec::new()
            })
            .push(event);
    }

    let mut vocab_ids: Vec<String> = Vec::new();
    let mut vocab_index: HashMap<&str, u32> = HashMap::new();
    let mut sessions = Vec::with_capacity(session_order.len());
    let mut diagnostics = LabelDiagnostics::default();

    for sid in session_order {
        let evs = &by_session[sid];
        let start_ts = evs.iter().map(|e| e.timestamp).min().expect("non-empty");
        let clicked: HashSet<&str> = evs
            .iter()
            .filter(|e| e.action == Action::Click)
            .map(|e| e.item_id.as_str())
            .collect();
        let mut ordered_items: HashSet<&str> = HashSet::new();
        for e in evs.iter().filter(|e| e.action == Action::Order) {
            if clicked.contains(e.item_id.as_str()) {
                ordered_items.insert(e.item_id.as_str());
            } else {
                diagnostics.dangling_orders += 1;
            }
        }

        let mut clicks: Vec<&RawEvent> = evs
            .iter()
            .filter(|e| e.action == Action::Click)
            .cloned()
            .collect();
        clicks.sort_by_key(|e| e.timestamp);

        let steps = clicks
            .iter()
            .map(|e| {
                let item = *vocab_index.entry(e.item_id.as_str()).or_insert_with(|| {
                    vocab_ids.push(e.item_id.clone());
                    (vocab_ids.len() - 1) as u32
                });
                Step {
                    item,
                    ordered: ordered_items.contains(e.item_id.as_str()),
                }
            })
            .collect();

        sessions.push(Session {
            session_id: sid.to_string(),
            start_ts,
            steps,
        });
    }

    (
        Dataset {
            vocab: Vocab::from_ids(vocab_ids),
            sessions,
        },
        diagnostics,
    )
}

/// Alternately drop items below `min_item_support` and sessions with fewer
/// than `min_session_clicks` clicks until both constraints hold
/// simultaneously; the vocab is re-densified at the end.
pub fn filter_dataset(ds: &Dataset, min_item_support: usize, min_session_clicks: usize) -> Dataset {
    assert!(min_item_support >= 1 && min_session_clicks >= 1);
    let mut sessions = ds.sessions.clone();
    loop {
        let mut support: HashMap<u32, usize> = HashMap::new();
        for step in sessions.iter().flat_map(|s| s.steps.iter()) {
            *support.entry(step.item).or_default() += 1;
        }
        let weak: HashSet<u32> = support
            .iter()
            .filter(|(_, &c)| c < min_item_support)
            .map(|(&i, _)| i)
            .collect();

        let mut changed = false;
        if !weak.is_empty() {
            for session in sessions.iter_mut() {
                let before = session.steps.len();
                session.steps.retain(|s| !weak.contains(&s.item));
                changed |= session.steps.len() != before;
            }
        }
        let before = sessions.len();
        sessions.retain(|s| s.click_count() >= min_session_clicks);
        changed |= sessions.len() != before;

        if !changed {
            break;
        }
    }

    reindex(&ds.vocab, sessions)
}

/// Re-densify indices: surviving items keep their relative order.
fn reindex(vocab: &Vocab, mut sessions: Vec<Session>) -> Dataset {
    let mut used: Vec<u32> = sessions
        .iter()
        .flat_map(|s| s.steps.iter().map(|st| st.item))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    used.sort_unstable();
    let remap: HashMap<u32, u32> = used
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();
    for step in sessions.iter_mut().flat_map(|s| s.steps.iter_mut()) {
        step.item = remap[&step.item];
    }
    let ids = used.iter().map(|&i| vocab.id(i).to_string()).collect();
    Dataset {
        vocab: Vocab::from_ids(ids),
        sessions,
    }
}

/// Minimum clicks a test session must keep after unseen-item removal.
const SPLIT_MIN_CLICKS: usize = 2;

/// Split by session start time: strictly before `boundary` goes to train.
/// Test sessions lose items unseen in training and are dropped when fewer
/// than 2 clicks remain; both sides share the train vocabulary.
pub fn temporal_split(ds: &Dataset, boundary: i64) -> Result<(Dataset, Dataset), DataError> {
    let min = ds.sessions.iter().map(|s| s.start_ts).min();
    let max = ds.sessions.iter().map(|s| s.start_ts).max();
    let (min, max) = match (min, max) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(DataError::BoundaryOutOfRange {
                boundary,
                min: 0,
                max: 0,
            })
        }
    };
    if boundary <= min || boundary > max {
        return Err(DataError::BoundaryOutOfRange { boundary, min, max });
    }

    let mut train_sessions = Vec::new();
    let mut test_sessions = Vec::new();
    for session in &ds.sessions {
        if session.start_ts < boundary {
            train_sessions.push(session.clone());
        } else {
            test_sessions.push(session.clone());
        }
    }

    let train = reindex(&ds.vocab, train_sessions);

    // Restrict test items to the train vocabulary and re-encode with it.
    let train_index: HashMap<&str, u32> = train
        .vocab
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();
    let mut remapped = Vec::new();
    for mut session in test_sessions {
        session.steps = session
            .steps
            .iter()
            .filter_map(|step| {
                train_index
                    .get(ds.vocab.id(step.item))
                    .map(|&item| Step { item, ..*step })
            })
            .collect();
        if session.click_count() >= SPLIT_MIN_CLICKS {
            remapped.push(session);
        }
    }

    let test = Dataset {
        vocab: train.vocab.clone(),
        sessions: remapped,
    };
    Ok((train, test))
}

const DATASET_MAGIC: &str = "MOSRDATA";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    magic: String,
    version: u32,
    vocab: Vec<String>,
    sessions: Vec<Session>,
}

/// Write a dataset as versioned JSON with a leading magic string.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = DatasetFile {
        magic: DATASET_MAGIC.to_string(),
        version: DATASET_VERSION,
        vocab: ds.vocab.ids().to_vec(),
        sessions: ds.sessions.clone(),
    };
    let json = serde_json::to_string(&file).expect("dataset serializes");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let raw = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&raw)
        .map_err(|e| DataError::BadDatasetFile(e.to_string()))?;
    if file.magic != DATASET_MAGIC {
        return Err(DataError::BadDatasetFile(format!(
            "bad magic '{}'",
            file.magic
        )));
    }
    if file.version != DATASET_VERSION {
        return Err(DataError::BadDatasetFile(format!(
            "unsupported version {} (expected {DATASET_VERSION})",
            file.version
        )));
    }
    let ds = Dataset {
        vocab: Vocab::from_ids(file.vocab),
        sessions: file.sessions,
    };
    if !ds.check_consistency() {
        return Err(DataError::BadDatasetFile(
            "session references item outside vocab".into(),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ev(sid: &str, item: &str, ts: i64, action: Action) -> RawEvent {
        RawEvent {
            session_id: sid.into(),
            item_id: item.into(),
            timestamp: ts,
            action,
        }
    }

    fn parse_csv_str(s: &str) -> Result<Vec<RawEvent>, DataError> {
        parse_events(Cursor::new(s.as_bytes()), InputFormat::Csv)
    }

    #[test]
    fn csv_line_maps_directly() {
        let events =
            parse_csv_str("session_id,item_id,timestamp,action\ns1,i9,1000,click\n").unwrap();
        assert_eq!(events, vec![ev("s1", "i9", 1000, Action::Click)]);
    }

    #[test]
    fn unknown_action_is_malformed_with_line_number() {
        let err = parse_csv_str("session_id,item_id,timestamp,action\ns1,i9,1000,purchase\n")
            .unwrap_err();
        match err {
            DataError::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_identified_not_skipped() {
        let input = "session_id,item_id,timestamp,action\n\
                     s1,a,1,click\n\
                     s1,b,notatime,click\n\
                     s1,c,3,click\n";
        let err = parse_csv_str(input).unwrap_err();
        match err {
            DataError::MalformedRecord { line, .. } => assert_eq!(line, 3),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn header_only_csv_is_empty_input() {
        let err = parse_csv_str("session_id,item_id,timestamp,action\n").unwrap_err();
        assert!(matches!(err, DataError::EmptyInput));
    }

    #[test]
    fn zero_byte_stream_yields_no_events() {
        assert!(parse_csv_str("").unwrap().is_empty());
        assert!(
            parse_events(Cursor::new(b"" as &[u8]), InputFormat::Jsonl)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let ok = r#"{"session_id":"s1","item_id":"i9","timestamp":1000,"action":"order"}"#;
        let events = parse_events(Cursor::new(ok.as_bytes()), InputFormat::Jsonl).unwrap();
        assert_eq!(events, vec![ev("s1", "i9", 1000, Action::Order)]);

        let bad = "{\"session_id\":\"s1\"}\n";
        let err = parse_events(Cursor::new(bad.as_bytes()), InputFormat::Jsonl).unwrap_err();
        assert!(matches!(err, DataError::MalformedRecord { line: 1, .. }));
    }

    #[test]
    fn negative_timestamp_rejected() {
        let err = parse_csv_str("session_id,item_id,timestamp,action\ns1,a,-5,click\n")
            .unwrap_err();
        assert!(matches!(err, DataError::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn labeling_flags_ordered_items() {
        let events = vec![
            ev("s1", "A", 1, Action::Click),
            ev("s1", "B", 2, Action::Click),
            ev("s1", "A", 3, Action::Order),
        ];
        let (ds, diag) = build_labeled_sessions(&events);
        assert_eq!(diag.dangling_orders, 0);
        assert_eq!(ds.sessions.len(), 1);
        let steps = &ds.sessions[0].steps;
        assert_eq!(steps.len(), 2);
        assert_eq!(ds.vocab.id(steps[0].item), "A");
        assert!(steps[0].ordered);
        assert_eq!(ds.vocab.id(steps[1].item), "B");
        assert!(!steps[1].ordered);
    }

    #[test]
    fn labeling_no_order_case() {
        let (ds, _) = build_labeled_sessions(&[ev("s1", "A", 1, Action::Click)]);
        assert_eq!(ds.sessions[0].steps, vec![Step { item: 0, ordered: false }]);
    }

    #[test]
    fn order_before_click_still_sets_flag() {
        // "ordered up to time T": any same-session order of a clicked item counts.
        let events = vec![
            ev("s1", "A", 5, Action::Order),
            ev("s1", "A", 9, Action::Click),
        ];
        let (ds, diag) = build_labeled_sessions(&events);
        assert_eq!(diag.dangling_orders, 0);
        assert!(ds.sessions[0].steps[0].ordered);
    }

    #[test]
    fn dangling_order_produces_empty_session_and_tally() {
        let (ds, diag) = build_labeled_sessions(&[ev("s1", "C", 1, Action::Order)]);
        assert_eq!(diag.dangling_orders, 1);
        assert_eq!(ds.sessions.len(), 1);
        assert!(ds.sessions[0].steps.is_empty());
    }

    #[test]
    fn clicks_sorted_by_timestamp_with_stable_ties() {
        let events = vec![
            ev("s1", "B", 2, Action::Click),
            ev("s1", "A", 1, Action::Click),
            ev("s1", "X", 2, Action::Click),
        ];
        let (ds, _) = build_labeled_sessions(&events);
        let items: Vec<&str> = ds.sessions[0]
            .steps
            .iter()
            .map(|s| ds.vocab.id(s.item))
            .collect();
        // A (t=1) first, then B and X keep input order on the t=2 tie.
        assert_eq!(items, vec!["A", "B", "X"]);
    }

    #[test]
    fn labeling_permutation_invariant_given_distinct_timestamps() {
        let events = vec![
            ev("s1", "A", 1, Action::Click),
            ev("s2", "B", 4, Action::Click),
            ev("s1", "C", 2, Action::Click),
            ev("s1", "C", 3, Action::Order),
            ev("s2", "A", 5, Action::Click),
        ];
        let (base, _) = build_labeled_sessions(&events);
        let mut permuted = events.clone();
        permuted.reverse();
        let (other, _) = build_labeled_sessions(&permuted);
        for session in &base.sessions {
            let twin = other
                .sessions
                .iter()
                .find(|s| s.session_id == session.session_id)
                .unwrap();
            let a: Vec<(&str, bool)> = session
                .steps
                .iter()
                .map(|s| (base.vocab.id(s.item), s.ordered))
                .collect();
            let b: Vec<(&str, bool)> = twin
                .steps
                .iter()
                .map(|s| (other.vocab.id(s.item), s.ordered))
                .collect();
            assert_eq!(a, b);
            assert_eq!(session.start_ts, twin.start_ts);
        }
    }

    fn dataset_from_click_lists(lists: &[&[&str]]) -> Dataset {
        let mut events = Vec::new();
        for (i, items) in lists.iter().enumerate() {
            for (t, item) in items.iter().enumerate() {
                events.push(ev(&format!("s{i}"), item, (i * 100 + t) as i64, Action::Click));
            }
        }
        build_labeled_sessions(&events).0
    }

    #[test]
    fn filter_iterates_to_fixpoint() {
        // {[A,B],[A,C],[A,B]}: C has support 1 -> removed, then [A] dropped.
        let ds = dataset_from_click_lists(&[&["A", "B"], &["A", "C"], &["A", "B"]]);
        let filtered = filter_dataset(&ds, 2, 2);
        assert_eq!(filtered.sessions.len(), 2);
        for session in &filtered.sessions {
            let items: Vec<&str> = session
                .steps
                .iter()
                .map(|s| filtered.vocab.id(s.item))
                .collect();
            assert_eq!(items, vec!["A", "B"]);
        }
        assert_eq!(filtered.vocab.len(), 2);
    }

    #[test]
    fn filter_is_identity_on_conforming_dataset() {
        let ds = dataset_from_click_lists(&[&["A", "B"], &["B", "A"]]);
        let filtered = filter_dataset(&ds, 2, 2);
        assert_eq!(filtered, ds);
    }

    #[test]
    fn filter_can_empty_the_dataset() {
        let ds = dataset_from_click_lists(&[&["A", "B"]]);
        let filtered = filter_dataset(&ds, 5, 2);
        assert!(filtered.sessions.is_empty());
        assert!(filtered.vocab.is_empty());
    }

    #[test]
    fn filter_is_idempotent() {
        let ds = dataset_from_click_lists(&[
            &["A", "B", "C"],
            &["A", "C"],
            &["B", "D"],
            &["D"],
        ]);
        let once = filter_dataset(&ds, 2, 2);
        let twice = filter_dataset(&once, 2, 2);
        assert_eq!(once, twice);
    }

    fn session(id: &str, start: i64, items: &[u32]) -> Session {
        Session {
            session_id: id.into(),
            start_ts: start,
            steps: items.iter().map(|&item| Step { item, ordered: false }).collect(),
        }
    }

    #[test]
    fn split_partitions_by_start_time() {
        let ds = Dataset {
            vocab: Vocab::from_ids(vec!["a".into(), "b".into()]),
            sessions: vec![
                session("s1", 100, &[0, 1]),
                session("s2", 200, &[1, 0]),
                session("s3", 300, &[0, 1]),
            ],
        };
        let (train, test) = temporal_split(&ds, 250).unwrap();
        assert_eq!(train.sessions.len(), 2);
        assert_eq!(test.sessions.len(), 1);
        assert_eq!(test.sessions[0].session_id, "s3");
        assert_eq!(train.vocab, test.vocab);
    }

    #[test]
    fn split_drops_unseen_items_and_short_sessions() {
        let ds = Dataset {
            vocab: Vocab::from_ids(vec!["a".into(), "b".into(), "c".into()]),
            sessions: vec![
                session("s1", 100, &[0, 1]),
                // c (index 2) never appears in train: removed from s2,
                // leaving one click -> session dropped.
                session("s2", 300, &[2, 0]),
                session("s3", 310, &[1, 2, 0]),
            ],
        };
        let (train, test) = temporal_split(&ds, 200).unwrap();
        assert_eq!(train.vocab.len(), 2);
        assert_eq!(test.sessions.len(), 1);
        assert_eq!(test.sessions[0].session_id, "s3");
        assert_eq!(test.sessions[0].steps.len(), 2);
        let items: Vec<&str> = test.sessions[0]
            .steps
            .iter()
            .map(|s| test.vocab.id(s.item))
            .collect();
        assert_eq!(items, vec!["b", "a"]);
    }

    #[test]
    fn split_rejects_out_of_range_boundary() {
        let ds = Dataset {
            vocab: Vocab::from_ids(vec!["a".into()]),
            sessions: vec![session("s1", 100, &[0, 0]), session("s2", 200, &[0, 0])],
        };
        assert!(matches!(
            temporal_split(&ds, 50),
            Err(DataError::BoundaryOutOfRange { .. })
        ));
        assert!(matches!(
            temporal_split(&ds, 100),
            Err(DataError::BoundaryOutOfRange { .. })
        ));
        assert!(matches!(
            temporal_split(&ds, 500),
            Err(DataError::BoundaryOutOfRange { .. })
        ));
        assert!(temporal_split(&ds, 150).is_ok());
    }

    #[test]
    fn split_is_a_partition() {
        let ds = dataset_from_click_lists(&[
            &["A", "B"],
            &["B", "A"],
            &["A", "B", "A"],
            &["B", "B"],
        ]);
        let (train, test) = temporal_split(&ds, 150).unwrap();
        let train_ids: HashSet<&str> =
            train.sessions.iter().map(|s| s.session_id.as_str()).collect();
        let test_ids: HashSet<&str> =
            test.sessions.iter().map(|s| s.session_id.as_str()).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        assert_eq!(train.sessions.len() + test.sessions.len(), 4);
    }

    #[test]
    fn dataset_file_roundtrip() {
        let ds = dataset_from_click_lists(&[&["A", "B"], &["B", "A"]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
        // Leading magic string inside the file.
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.starts_with("{\"magic\":\"MOSRDATA\",\"version\":1"));
    }

    #[test]
    fn dataset_file_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        std::fs::write(
            &path,
            r#"{"magic":"NOPE","version":1,"vocab":[],"sessions":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::BadDatasetFile(_))
        ));
        std::fs::write(
            &path,
            r#"{"magic":"MOSRDATA","version":9,"vocab":[],"sessions":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::BadDatasetFile(_))
        ));
    }

    #[test]
    fn label_soundness_every_flag_has_an_order_event() {
        let events = vec![
            ev("s1", "A", 1, Action::Click),
            ev("s1", "B", 2, Action::Click),
            ev("s1", "A", 3, Action::Order),
            ev("s2", "B", 4, Action::Click),
            ev("s2", "B", 5, Action::Order),
            ev("s2", "A", 6, Action::Click),
        ];
        let (ds, _) = build_labeled_sessions(&events);
        for session in &ds.sessions {
            for step in session.steps.iter().filter(|s| s.ordered) {
                let item = ds.vocab.id(step.item);
                assert!(events.iter().any(|e| e.action == Action::Order
                    && e.session_id == session.session_id
                    && e.item_id == item));
            }
        }
    }
}
