#![allow(dead_code)]

use std::sync::Arc;

use elicit_core::domain::{Dataset, QuestionId, Selection, SessionId};
use elicit_core::ingest::{parse_tabular, IngestConfig};
use elicit_core::interview::{Interview, InterviewSettings};
use elicit_core::provider::MockProvider;
use elicit_core::questions::default_bank;
use elicit_core::store::{EventStore, LogicalClock, MemoryStore};

pub const LONG_ANSWER: &str = "each row records one completed bicycle trip";

pub fn bikes() -> Dataset {
    let mut text = String::from("station,duration,started,kind\n");
    for i in 0..40 {
        text.push_str(&format!(
            "S{},{},2024-03-{:02}T08:{:02}:00,{}\n",
            i % 5,
            5 + (i * 7) % 50,
            1 + i % 28,
            i % 60,
            if i % 3 == 0 { "member" } else { "casual" }
        ));
    }
    parse_tabular(text.as_bytes(), "bikes.csv", &IngestConfig::default()).unwrap()
}

pub fn settings(seed: u64) -> InterviewSettings {
    InterviewSettings {
        seed,
        ..InterviewSettings::default()
    }
}

pub fn new_interview(store: Arc<dyn EventStore>, mock: &MockProvider, seed: u64) -> Interview {
    Interview::create(
        store,
        Arc::new(LogicalClock::default()),
        SessionId::from("session-1"),
        bikes(),
        &default_bank(),
        mock,
        settings(seed),
    )
    .unwrap()
}

pub fn memory_interview(mock: &MockProvider, seed: u64) -> Interview {
    new_interview(Arc::new(MemoryStore::new()), mock, seed)
}

pub fn first_on_board(iv: &Interview) -> QuestionId {
    iv.session().board.slots[0].id.clone()
}

/// Every question id in exactly one place: backlog, bank, board, history or removed.
pub fn audit_lifecycle(iv: &Interview) {
    use std::collections::BTreeSet;
    let s = iv.session();
    let mut seen = BTreeSet::new();
    for q in s
        .pool
        .generated_backlog
        .iter()
        .chain(&s.pool.predefined_bank)
        .chain(&s.board.slots)
        .chain(&s.pool.answered_history)
        .chain(&s.pool.removed)
    {
        assert!(seen.insert(q.id.clone()), "{} appears twice", q.id);
    }
    assert!(s.board.len() <= 10);
}

/// Scripted session: annotations and answers interleaved, then export.
pub fn scripted_session(iv: &mut Interview, mock: &MockProvider) -> String {
    let mut answers = 0;
    let mut annotations = 0;
    let mut step = 0;
    while answers < 6 || annotations < 10 {
        if annotations < 10 && (step % 2 == 0 || answers >= 6) {
            let sel = match annotations % 4 {
                0 => Selection::WholeDataset,
                1 => Selection::Columns(vec![annotations % 4]),
                2 => Selection::Rows(vec![annotations, annotations + 1]),
                _ => Selection::Cells(vec![(annotations, 1)]),
            };
            iv.annotate(sel, &format!("note number {annotations} about this table"), mock)
                .unwrap();
            annotations += 1;
        } else {
            if iv.session().board.is_empty() || elicit_core::questions::refill_enabled(&iv.session().board) {
                iv.refill().unwrap();
            }
            let q = first_on_board(iv);
            let out = iv.submit_answer(&q, &format!("{LONG_ANSWER}, answer {answers}"), mock).unwrap();
            assert!(out.result.is_accepted());
            answers += 1;
        }
        step += 1;
    }
    iv.export().unwrap().to_json()
}
