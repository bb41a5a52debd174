//! Acceptance suite: one PASS/FAIL line per primary criterion, run offline
//! against the deterministic mock provider with fixed seeds.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use elicit_core::domain::{Dataset, Question, QuestionId, QuestionOrigin, Selection, SessionId, ThemeId, Verdict};
use elicit_core::export::{export_annotations, ExportDocument};
use elicit_core::ingest::{self, parse_tabular, write_record, IngestConfig, IngestError, LimitKind};
use elicit_core::interview::{Interview, InterviewSettings};
use elicit_core::prompts;
use elicit_core::provider::{CompletionProvider, CompletionRequest, MockProvider, ProviderError, Purpose, Tier};
use elicit_core::questions::{
    default_bank, default_similarity, fill_board, originality, originality_from_mean, refill_enabled,
    select_generated, select_predefined, total_score, DisplayBoard, QuestionPool, SeededRng, BOARD_CAPACITY,
};
use elicit_core::session::Session;
use elicit_core::store::{load_session, replay_session, EventStore, FileStore, LogicalClock, MemoryStore};
use elicit_server::{router, Services, SessionIds};
use rand::seq::SliceRandom;
use rand::Rng;

const LONG_ANSWER: &str = "each row records one completed bicycle trip";

/// The role paragraph, frozen here independently of the crate constant.
const ROLE: &str = "The role of the Data Therapist is to elicit knowledge about the dataset from users by asking appropriate questions that, by answering, could help them understand their own data. The questions should aim to bridge the gap between reality (the situation, environment, and background surrounding the dataset) and the dataset itself. While the data is present, it does not, on its own, explain the background or issues. Ideally, annotations should be made so that even someone unfamiliar with the dataset can understand it by reading those annotations. Although the main goal is to help extract annotations by asking questions, the Data Therapist can also assist in other tasks related to annotation, such as validating questions.";

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn FnOnce() -> Outcome>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- fixtures

fn bikes_csv() -> String {
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
    text
}

fn bikes() -> Dataset {
    parse_tabular(bikes_csv().as_bytes(), "bikes.csv", &IngestConfig::default()).unwrap()
}

/// A random but ingestible table: up to `max_rows` x `max_cols`, mixed types.
fn random_csv(rng: &mut SeededRng, max_rows: usize, max_cols: usize) -> String {
    let rows = rng.random_range(1..=max_rows);
    let cols = rng.random_range(1..=max_cols);
    let mut out = write_record(&(0..cols).map(|c| format!("col {c}")).collect::<Vec<_>>(), ',');
    let kinds: Vec<u8> = (0..cols).map(|_| rng.random_range(0..3)).collect();
    for r in 0..rows {
        let cells: Vec<String> = kinds
            .iter()
            .map(|k| match k {
                0 => format!("{}", rng.random_range(-500i32..500)),
                1 => ["red", "green", "blue, dark", "say \"hi\""][rng.random_range(0..4)].to_string(),
                _ => format!("row {r} note {}", rng.random_range(0..1000)),
            })
            .collect();
        out.push('\n');
        out.push_str(&write_record(&cells, ','));
    }
    out
}

fn settings(seed: u64) -> InterviewSettings {
    InterviewSettings {
        seed,
        ..InterviewSettings::default()
    }
}

fn create(store: Arc<dyn EventStore>, dataset: Dataset, provider: &dyn CompletionProvider, seed: u64) -> Interview {
    Interview::create(
        store,
        Arc::new(LogicalClock::default()),
        SessionId::from("acceptance"),
        dataset,
        &default_bank(),
        provider,
        settings(seed),
    )
    .unwrap()
}

/// Passes requests through while keeping their full text for inspection.
struct Recording<P> {
    inner: P,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl<P: CompletionProvider> Recording<P> {
    fn new(inner: P) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    fn take(&self) -> Vec<CompletionRequest> {
        std::mem::take(&mut self.requests.lock().unwrap())
    }
}

impl<P: CompletionProvider> CompletionProvider for Recording<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self.requests.lock().unwrap().push(request.clone());
        self.inner.complete(request)
    }
}

fn unanswered(s: &Session) -> BTreeMap<QuestionId, u8> {
    s.pool
        .generated_backlog
        .iter()
        .chain(&s.pool.predefined_bank)
        .chain(&s.board.slots)
        .map(|q| (q.id.clone(), q.recency))
        .collect()
}

fn generated_total(s: &Session) -> usize {
    s.pool
        .generated_backlog
        .iter()
        .chain(&s.board.slots)
        .filter(|q| q.origin == QuestionOrigin::Generated)
        .count()
}

fn scored(n: usize, o: u8, r: u8, i: u8) -> Question {
    let mut q = Question::generated(QuestionId(format!("g-{n}")), format!("generated {n}"), None);
    q.originality = o;
    q.recency = r;
    q.importance = i;
    q
}

fn bank_of(themes: &[usize]) -> Vec<Question> {
    themes
        .iter()
        .enumerate()
        .map(|(n, t)| Question::predefined(QuestionId(format!("p-{n}")), ThemeId::ALL[*t], format!("bank {n}")))
        .collect()
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let mut b = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            b = b.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(b.body(body).unwrap()).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn upload(app: &axum::Router, name: &str, content: &str) -> (StatusCode, Vec<u8>) {
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let boundary = "acceptance-boundary";
    let body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"{name}\"\r\n\r\n{content}\r\n--{boundary}--\r\n"
    );
    let req = Request::builder()
        .method(Method::POST)
        .uri("/sessions")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn http_app(seed: u64) -> (axum::Router, Arc<MockProvider>) {
    let mock = Arc::new(MockProvider::new(seed));
    let mut s = Services::new(
        Arc::new(MemoryStore::new()),
        Arc::new(LogicalClock::default()),
        mock.clone(),
        default_bank(),
    );
    s.ids = SessionIds::sequential();
    s.settings.seed = seed;
    s.fixed_seed = true;
    (router(Arc::new(s)), mock)
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

// ---------------------------------------------------------------- criteria

fn bootstrap_contract() -> Outcome {
    let mut rng = SeededRng::new(1);
    let mut datasets = vec![bikes()];
    for n in 0..12 {
        let csv = random_csv(&mut rng, 60, 20);
        datasets.push(parse_tabular(csv.as_bytes(), &format!("random-{n}.csv"), &IngestConfig::default()).unwrap());
    }
    datasets.push(parse_tabular(b"only\n1\n", "tiny.csv", &IngestConfig::default()).unwrap());
    let mut slowest = Duration::ZERO;
    for (n, ds) in datasets.into_iter().enumerate() {
        let mock = Recording::new(MockProvider::new(n as u64));
        let started = Instant::now();
        let iv = create(Arc::new(MemoryStore::new()), ds, &mock, n as u64);
        slowest = slowest.max(started.elapsed());
        let s = iv.session();
        ensure!(generated_total(s) == 30, "dataset {n}: {} generated questions", generated_total(s));
        ensure!(s.pool.generated_backlog.len() == 25, "dataset {n}: backlog {}", s.pool.generated_backlog.len());
        let predefined = s.board.slots.iter().filter(|q| q.origin == QuestionOrigin::Predefined).count();
        ensure!(s.board.len() == 10 && predefined == 5, "dataset {n}: board {} with {predefined} predefined", s.board.len());
        let calls = mock.take();
        let t1: Vec<_> = calls.iter().filter(|r| r.tier == Tier::InitialGeneration).collect();
        ensure!(
            t1.len() == 1 && t1[0].purpose == Purpose::Generation,
            "dataset {n}: {} high-tier calls",
            t1.len()
        );
        ensure!(
            calls.iter().filter(|r| r.purpose == Purpose::Importance).count() == 30,
            "dataset {n}: importance not scored once per generated question"
        );
    }
    ensure!(slowest < Duration::from_secs(1), "slowest bootstrap took {slowest:?}");
    Ok(format!("14 datasets, slowest bootstrap {:.0} ms", slowest.as_secs_f64() * 1e3))
}

fn pool_with(generated: usize, themes: &[usize], seed: u64) -> QuestionPool {
    let mut pool = QuestionPool::new(seed);
    pool.add((0..generated).map(|n| scored(n, 5, 5, 3)));
    pool.add(bank_of(themes));
    pool
}

fn board_with(d: usize) -> DisplayBoard {
    let mut board = DisplayBoard::default();
    for n in 0..d {
        let mut q = scored(n, 5, 5, 3);
        q.id = QuestionId(format!("shown-{n}"));
        board.slots.push(q);
    }
    board
}

fn fill_parity() -> Outcome {
    let ample: Vec<usize> = (0..49).map(|n| n % 7).collect();
    for d in 0..=4 {
        for seed in 0..20 {
            let mut pool = pool_with(30, &ample, seed);
            let mut board = board_with(d);
            let r = fill_board(&mut board, &mut pool);
            let e = 10 - d;
            ensure!(
                r.predefined.len() == e / 2 && r.generated.len() == e.div_ceil(2),
                "d={d}: {}+{}",
                r.predefined.len(),
                r.generated.len()
            );
            ensure!(board.len() == 10, "d={d}: board {}", board.len());
        }
    }
    for (d, p, g) in [(2usize, 4usize, 4usize), (1, 4, 5)] {
        let mut pool = pool_with(30, &ample, 9);
        let r = fill_board(&mut board_with(d), &mut pool);
        ensure!((r.predefined.len(), r.generated.len()) == (p, g), "e={} gave {}+{}", 10 - d, r.predefined.len(), r.generated.len());
    }
    let mut pool = pool_with(30, &[], 3);
    let r = fill_board(&mut board_with(0), &mut pool);
    ensure!(r.predefined.is_empty() && r.generated.len() == 10, "exhausted bank gave {}+{}", r.predefined.len(), r.generated.len());
    Ok("d=0..4 x 20 seeds, e=8 -> 4+4, e=9 -> 4+5, empty bank -> 0+10".into())
}

fn refill_gating() -> Outcome {
    for size in 0..=BOARD_CAPACITY {
        ensure!(refill_enabled(&board_with(size)) == (size <= 4), "size {size}");
    }
    let (app, _) = http_app(3);
    runtime().block_on(async {
        let (status, body) = upload(&app, "bikes.csv", &bikes_csv()).await;
        ensure!(status == StatusCode::CREATED, "upload gave {status}");
        let id = json(&body)["session_id"].as_str().unwrap().to_string();
        for shown in (4..10).rev() {
            let (_, board) = call(&app, Method::GET, &format!("/sessions/{id}/board"), None).await;
            let qid = json(&board)["questions"][0]["id"].as_str().unwrap().to_string();
            call(&app, Method::DELETE, &format!("/sessions/{id}/questions/{qid}"), None).await;
            let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/board/refill"), None).await;
            if shown > 4 {
                ensure!(status == StatusCode::CONFLICT, "{shown} shown: refill gave {status}");
                ensure!(json(&body)["code"] == "refill_not_enabled", "{shown} shown: body {}", json(&body));
            } else {
                ensure!(status == StatusCode::OK, "4 shown: refill gave {status}");
            }
        }
        Ok("sizes 0..10 exact; HTTP 409 refill_not_enabled at 9..5 shown, 200 at 4".to_string())
    })
}

fn annotation_trigger() -> Outcome {
    let mut slowest = Duration::ZERO;
    let mut commits = 0;
    for seed in 0..5u64 {
        let mock = MockProvider::new(seed);
        let started = Instant::now();
        let mut iv = create(Arc::new(MemoryStore::new()), bikes(), &mock, seed);
        let mut rng = SeededRng::new(1000 + seed);
        while iv.session().last_sequence < 100 {
            let before = iv.session().clone();
            let op = rng.random_range(0..10);
            let committed = match op {
                0..=3 => {
                    let cols = rng.random_range(0..4);
                    Some(iv.annotate(Selection::Columns(vec![cols]), "column remark", &mock).unwrap().annotation)
                }
                4..=7 if !before.board.is_empty() => {
                    let q = before.board.slots[rng.random_range(0..before.board.len())].id.clone();
                    let text = if rng.random_bool(0.8) { LONG_ANSWER } else { "short" };
                    iv.submit_answer(&q, text, &mock).unwrap().annotation
                }
                8 if !before.board.is_empty() => {
                    let q = before.board.slots[0].id.clone();
                    iv.remove_question(&q).unwrap();
                    None
                }
                _ => {
                    let _ = iv.refill();
                    None
                }
            };
            let Some(annotation) = committed else { continue };
            commits += 1;
            let after = iv.session();
            let was = unanswered(&before);
            let now = unanswered(after);
            for (id, r) in &was {
                if let Some(r2) = now.get(id) {
                    ensure!(*r2 == (*r).saturating_sub(1).max(1), "seed {seed}: {id} recency {r} -> {r2}");
                }
            }
            let triggered: Vec<_> = now
                .keys()
                .filter(|id| !was.contains_key(*id))
                .filter_map(|id| after.find_question(id))
                .filter(|q| q.trigger_annotation_id.as_ref() == Some(&annotation.id))
                .collect();
            ensure!(triggered.len() == 5, "seed {seed}: {} follow-ups for {}", triggered.len(), annotation.id);
            ensure!(triggered.iter().all(|q| q.recency == 5), "seed {seed}: follow-up recency");
            ensure!(after.pool.generated_backlog.len() >= 10, "seed {seed}: backlog {}", after.pool.generated_backlog.len());
        }
        slowest = slowest.max(started.elapsed());
    }
    ensure!(slowest < Duration::from_secs(5), "slowest sequence took {slowest:?}");
    Ok(format!("5 random 100-event sequences, {commits} commits checked, slowest {:.2} s", slowest.as_secs_f64()))
}

/// Shared shuffle, then repeated max scans keeping the first in shuffled order.
fn select_oracle(backlog: &[Question], k: usize, seed: u64) -> Vec<QuestionId> {
    let mut rng = SeededRng::new(seed);
    let mut order: Vec<usize> = (0..backlog.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    while out.len() < k && !order.is_empty() {
        let mut best = 0;
        for j in 1..order.len() {
            if total_score(&backlog[order[j]]) > total_score(&backlog[order[best]]) {
                best = j;
            }
        }
        out.push(backlog[order.remove(best)].id.clone());
    }
    out
}

fn scoring() -> Outcome {
    let mut rng = SeededRng::new(5);
    for _ in 0..1000 {
        let (o, r, i) = (rng.random_range(1..=5u8), rng.random_range(1..=5u8), rng.random_range(1..=5u8));
        ensure!(total_score(&scored(0, o, r, i)) == o + r + i, "({o},{r},{i})");
    }
    for case in 0..500u64 {
        let n = rng.random_range(0..=50);
        let pool: Vec<Question> = (0..n)
            .map(|j| scored(j, rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5)))
            .collect();
        let k = rng.random_range(0..=12);
        let got = select_generated(&pool, k, &mut SeededRng::new(case));
        ensure!(got == select_oracle(&pool, k, case), "pool {case} (n={n}, k={k}) differs from oracle");
    }
    Ok("1000 triples, 500 pools up to 50 against the oracle".into())
}

fn originality_bounds() -> Outcome {
    let q = "Who collected the data and when?";
    ensure!(originality(q, &[], default_similarity) == 5, "empty history");
    let mut same = scored(0, 5, 5, 3);
    same.text = q.into();
    ensure!(originality(q, &[same.clone(), same], default_similarity) == 1, "identical history");
    let mut last = u8::MAX;
    for i in 0..=1000 {
        let o = originality_from_mean(Some(f64::from(i) / 1000.0));
        ensure!(o <= last && (1..=5).contains(&o), "grid point {i}: {o} after {last}");
        last = o;
    }
    Ok("empty -> 5, identical -> 1, monotone over 1001 grid points".into())
}

fn validation_pipeline() -> Outcome {
    let mock = MockProvider::new(7);
    let mut iv = create(Arc::new(MemoryStore::new()), bikes(), &mock, 7);
    let mut rng = SeededRng::new(77);
    let mut accepted = 0;
    for round in 0..40 {
        let q = iv.session().board.slots[0].id.clone();
        let len = rng.random_range(1..45);
        let mut text: String = LONG_ANSWER.chars().cycle().take(len).collect::<String>().trim().to_string();
        if text.is_empty() {
            text = "x".into();
        }
        let contra = rng.random_bool(0.3);
        if contra {
            text.push_str(" CONTRA");
        }
        let before_hash = iv.session().state_hash();
        let before_count = iv.session().annotations.len();
        mock.clear_log();
        let out = iv.submit_answer(&q, &text, &mock).unwrap();
        let log: Vec<Purpose> = mock.call_log().into_iter().map(|c| c.purpose).collect();
        let short = text.chars().count() < 20;
        match (short, contra) {
            (true, _) => {
                ensure!(out.result.verdict == Verdict::Rejected, "round {round}: short answer accepted");
                ensure!(out.result.stage == Some(elicit_core::domain::ValidationStage::Faithfulness), "round {round}: stage");
                ensure!(!out.result.feedback.is_empty(), "round {round}: empty feedback");
                ensure!(log == [Purpose::Faithfulness], "round {round}: calls {log:?}");
            }
            (false, true) => {
                ensure!(out.result.stage == Some(elicit_core::domain::ValidationStage::Contradiction), "round {round}: stage");
                ensure!(log == [Purpose::Faithfulness, Purpose::Contradiction], "round {round}: calls {log:?}");
            }
            (false, false) => {
                ensure!(out.result.verdict == Verdict::Accepted && out.result.feedback.is_empty(), "round {round}: rejected");
                ensure!(log[..2] == [Purpose::Faithfulness, Purpose::Contradiction], "round {round}: calls {log:?}");
            }
        }
        let after_count = iv.session().annotations.len();
        if out.result.is_accepted() {
            accepted += 1;
            ensure!(after_count == before_count + 1 && out.annotation.is_some(), "round {round}: annotations");
        } else {
            ensure!(after_count == before_count && out.annotation.is_none(), "round {round}: rejection annotated");
            ensure!(iv.session().state_hash() == before_hash, "round {round}: rejection changed state");
        }
        if iv.session().board.len() <= 4 {
            iv.refill().unwrap();
        }
    }
    Ok(format!("40 submissions, {accepted} accepted, state unchanged on every rejection"))
}

fn theme_summaries() -> Outcome {
    let mock = MockProvider::new(8);
    let mut iv = create(Arc::new(MemoryStore::new()), bikes(), &mock, 8);
    for _ in 0..30 {
        if iv.session().board.is_empty() {
            break;
        }
        let q = iv.session().board.slots[0].id.clone();
        iv.submit_answer(&q, LONG_ANSWER, &mock).unwrap();
        for p in iv.session().theme_progress() {
            ensure!(
                p.summary_text.is_some() == (p.answered_count >= 2),
                "{}: answered {} summary {:?}",
                p.theme,
                p.answered_count,
                p.summary_text
            );
        }
        if refill_enabled(&iv.session().board) {
            iv.refill().unwrap();
        }
    }
    let mut rng = SeededRng::new(88);
    for case in 0..300u64 {
        let themes: Vec<usize> = (0..rng.random_range(0..50)).map(|_| rng.random_range(0..7)).collect();
        let bank = bank_of(&themes);
        let k = rng.random_range(0..=10);
        let picked = select_predefined(&bank, k, &mut SeededRng::new(case));
        ensure!(picked.len() == k.min(bank.len()), "case {case}: picked {}", picked.len());
        let mut remaining: Vec<&Question> = bank.iter().collect();
        for id in &picked {
            let mut counts = [0usize; 7];
            for q in &remaining {
                counts[q.theme.unwrap().index()] += 1;
            }
            let pos = remaining.iter().position(|q| &q.id == id).unwrap();
            let theme = remaining[pos].theme.unwrap().index();
            ensure!(counts[theme] == *counts.iter().max().unwrap(), "case {case}: {id} not from a largest theme");
            remaining.remove(pos);
        }
    }
    Ok("summary iff answered >= 2 over 30 answers; 300 banks against the recount oracle".into())
}

fn record_ends(log: &[u8]) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut at = 0;
    while at < log.len() {
        at += 4 + u32::from_le_bytes(log[at..at + 4].try_into().unwrap()) as usize;
        ends.push(at);
    }
    ends
}

fn crashed_copy(src: &Path, dst: &Path, id: &SessionId, k: usize) {
    let log = std::fs::read(src.join(id.as_str()).join("events.log")).unwrap();
    let cut = if k == 0 { 0 } else { record_ends(&log)[k - 1] };
    let dir = dst.join(id.as_str());
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("events.log"), &log[..cut]).unwrap();
    for entry in std::fs::read_dir(src.join(id.as_str())).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        if let Some(seq) = name.strip_prefix("snapshot-").and_then(|s| s.parse::<usize>().ok()) {
            if seq <= k {
                std::fs::copy(entry.path(), dir.join(&name)).unwrap();
            }
        }
    }
}

/// Upload, 10 annotations and 6 accepted answers interleaved.
fn scripted(iv: &mut Interview, provider: &dyn CompletionProvider) {
    let (mut notes, mut answers) = (0, 0);
    while notes < 10 || answers < 6 {
        if notes < 10 {
            let sel = match notes % 3 {
                0 => Selection::WholeDataset,
                1 => Selection::Columns(vec![notes % 4]),
                _ => Selection::Rows(vec![notes]),
            };
            iv.annotate(sel, &format!("remark number {notes}"), provider).unwrap();
            notes += 1;
        }
        if answers < 6 {
            if refill_enabled(&iv.session().board) {
                iv.refill().unwrap();
            }
            let q = iv.session().board.slots[0].id.clone();
            iv.submit_answer(&q, LONG_ANSWER, provider).unwrap();
            answers += 1;
        }
    }
}

fn persistence() -> Outcome {
    let src = tempfile::tempdir().unwrap();
    let mock = MockProvider::new(9);
    let store: Arc<dyn EventStore> = Arc::new(FileStore::open(src.path()).unwrap());
    let mut iv = create(store.clone(), bikes(), &mock, 9);
    scripted(&mut iv, &mock);
    while iv.session().last_sequence < 150 {
        iv.annotate(Selection::WholeDataset, "another general remark", &mock).unwrap();
    }
    let id = iv.session().id.clone();
    let events = iv.events().unwrap();
    ensure!(events.len() <= 200, "{} events", events.len());
    for k in 1..=events.len() {
        let dst = tempfile::tempdir().unwrap();
        crashed_copy(src.path(), dst.path(), &id, k);
        let loaded = load_session(&FileStore::open(dst.path()).unwrap(), &id).unwrap();
        let replayed = Session::replay(id.clone(), &events[..k]).unwrap();
        ensure!(loaded.state_hash() == replayed.state_hash(), "crash after event {k}: hash differs");
        ensure!(loaded == replayed, "crash after event {k}: state differs");
    }
    let snapshot = store.latest_snapshot(&id).unwrap().ok_or("no snapshot written")?;
    let loaded = load_session(store.as_ref(), &id).unwrap();
    let full = replay_session(store.as_ref(), &id).unwrap();
    ensure!(loaded.state_hash() == full.state_hash() && loaded == full, "snapshot + tail differs from replay");

    let json = iv.export().unwrap().to_json();
    let doc = ExportDocument::parse(&json).map_err(|e| e.to_string())?;
    ensure!(doc.to_annotations() == iv.session().annotations, "exported annotations differ after reload");
    let reopened = load_session(store.as_ref(), &id).unwrap();
    ensure!(export_annotations(&reopened) == doc, "reloaded session exports differently");
    ensure!(export_annotations(&reopened).to_json() == json, "export bytes differ after reload");
    Ok(format!(
        "{} crash points, snapshot at {}, export round trip exact",
        events.len(),
        snapshot.last_sequence
    ))
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum Expected {
    Parsed { columns: Vec<String>, rows: Vec<Vec<String>> },
    Error { error: String },
}

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/corpus")
}

fn ingestion_and_stats() -> Outcome {
    let mut cases = 0;
    for entry in std::fs::read_dir(corpus_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|x| x != "csv") {
            continue;
        }
        cases += 1;
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let expected: Expected =
            serde_json::from_str(&std::fs::read_to_string(corpus_dir().join(format!("{stem}.expected.json"))).unwrap())
                .unwrap();
        let got = parse_tabular(&std::fs::read(&path).unwrap(), &stem, &IngestConfig::default());
        match (expected, got) {
            (Expected::Parsed { columns, rows }, Ok(ds)) => {
                let names: Vec<String> = ds.columns().iter().map(|c| c.name.clone()).collect();
                let raw: Vec<Vec<String>> = ds.rows().iter().map(|r| r.iter().map(|c| c.raw.clone()).collect()).collect();
                ensure!(names == columns && raw == rows, "{stem}: parsed content differs");
            }
            (Expected::Error { error }, Err(e)) => ensure!(e.name() == error, "{stem}: {} instead of {error}", e.name()),
            (_, got) => return Err(format!("{stem}: unexpected outcome {:?}", got.map(|d| d.row_count()))),
        }
    }
    ensure!(cases >= 17, "corpus has {cases} cases");

    let table = |rows: usize, cols: usize| {
        let mut out = (0..cols).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",");
        for r in 0..rows {
            out.push('\n');
            out.push_str(&vec![r.to_string(); cols].join(","));
        }
        out.into_bytes()
    };
    let cfg = IngestConfig::default();
    ensure!(parse_tabular(&table(10_000, 20), "max", &cfg).is_ok(), "10000 x 20 rejected");
    ensure!(
        matches!(parse_tabular(&table(10_001, 2), "rows", &cfg), Err(IngestError::LimitExceeded { kind: LimitKind::Rows, limit: 10_000 })),
        "10001 rows accepted"
    );
    ensure!(
        matches!(parse_tabular(&table(2, 21), "cols", &cfg), Err(IngestError::LimitExceeded { kind: LimitKind::Columns, limit: 20 })),
        "21 columns accepted"
    );

    let mut rng = SeededRng::new(10);
    for case in 0..100 {
        let rows = rng.random_range(1..=200);
        let cols = rng.random_range(1..=10);
        let data: Vec<Vec<Option<f64>>> = (0..cols)
            .map(|_| {
                let mut col: Vec<Option<f64>> = (0..rows)
                    .map(|_| rng.random_bool(0.9).then(|| f64::from(rng.random_range(-400i32..400)) / 8.0))
                    .collect();
                if col.iter().all(Option::is_none) {
                    col[0] = Some(0.5);
                }
                col
            })
            .collect();
        let mut csv = String::from("label");
        for c in 0..cols {
            csv.push_str(&format!(",v{c}"));
        }
        for r in 0..rows {
            csv.push_str(&format!("\nr{r}"));
            for col in &data {
                csv.push(',');
                if let Some(v) = col[r] {
                    csv.push_str(&v.to_string());
                }
            }
        }
        let ds = parse_tabular(csv.as_bytes(), "random", &cfg).unwrap();
        for (c, col) in data.iter().enumerate() {
            let bins = rng.random_range(1..=25);
            let h = ingest::histogram(&ds, c + 1, bins).map_err(|e| e.to_string())?;
            let values: Vec<(usize, f64)> = col.iter().enumerate().filter_map(|(r, v)| v.map(|v| (r, v))).collect();
            let min = values.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let max = values.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let edges: Vec<f64> = if min == max {
                vec![min - 0.5, max + 0.5]
            } else {
                let w = (max - min) / bins as f64;
                (0..bins).map(|i| min + w * i as f64).chain([max]).collect()
            };
            ensure!(h.bin_edges == edges, "case {case} col {c}: edges differ");
            let n = edges.len() - 1;
            let mut expected = vec![Vec::new(); n];
            for &(r, v) in &values {
                let b = (0..n)
                    .find(|&b| edges[b] <= v && (v < edges[b + 1] || (b == n - 1 && v <= edges[b + 1])))
                    .unwrap();
                expected[b].push(r);
            }
            ensure!(h.matching_row_ids == expected, "case {case} col {c}: bin membership differs");
            ensure!(h.counts.iter().sum::<usize>() == values.len(), "case {case} col {c}: counts do not sum");
            let (lo, hi) = (f64::from(rng.random_range(-60i32..0)), f64::from(rng.random_range(0i32..60)));
            let scan: Vec<usize> = values.iter().filter(|p| lo <= p.1 && p.1 <= hi).map(|p| p.0).collect();
            ensure!(ingest::rows_in_range(&ds, c + 1, lo, hi).unwrap() == scan, "case {case} col {c}: range differs");
        }
    }
    Ok(format!("{cases} corpus files, limits enforced, 100 random datasets against oracles"))
}

fn markers(prompt: &str) -> Vec<&str> {
    prompt.lines().filter(|l| l.starts_with("### ")).collect()
}

fn prompt_fidelity() -> Outcome {
    const T1: &[&str] = &["### DATASET", "### TASK", "### OUTPUT FORMAT"];
    const T2: &[&str] = &[
        "### DATASET",
        "### ANSWERED QUESTIONS",
        "### ANNOTATIONS",
        "### RECENT QUESTION",
        "### RECENT ANNOTATION",
        "### TASK",
        "### OUTPUT FORMAT",
    ];
    let expected = |r: &CompletionRequest| -> &'static [&'static str] {
        match (r.purpose, r.tier) {
            (Purpose::Generation, Tier::InitialGeneration) => T1,
            (Purpose::Generation | Purpose::FollowUp, _) => T2,
            (Purpose::Importance, _) => &["### DATASET", "### QUESTION", "### TASK", "### OUTPUT FORMAT"],
            (Purpose::Faithfulness, _) => &["### QUESTION", "### ANSWER", "### TASK", "### OUTPUT FORMAT"],
            (Purpose::Contradiction, _) => {
                &["### EXISTING ANNOTATIONS", "### CANDIDATE ANNOTATION", "### TASK", "### OUTPUT FORMAT"]
            }
            (Purpose::Summary, _) => &["### THEME", "### QUESTIONS AND ANSWERS", "### TASK", "### OUTPUT FORMAT"],
            (Purpose::Report, _) => &["### DATASET", "### ANNOTATIONS", "### TASK", "### OUTPUT FORMAT"],
        }
    };

    let mock = Recording::new(MockProvider::new(11));
    let mut iv = create(Arc::new(MemoryStore::new()), bikes(), &mock, 11);
    scripted(&mut iv, &mock);
    iv.report(&mock).unwrap();
    let requests = mock.take();
    let mut seen = BTreeMap::new();
    for r in &requests {
        ensure!(r.prompt.starts_with(&format!("{ROLE}\n\n")), "{} prompt lacks the role prefix", r.purpose);
        ensure!(markers(&r.prompt) == expected(r), "{} segments {:?}", r.purpose, markers(&r.prompt));
        *seen.entry(r.purpose.as_str()).or_insert(0) += 1;
    }
    ensure!(seen.len() == 7, "only saw {:?}", seen.keys());
    let t1 = &requests[0].prompt;
    ensure!(
        t1.contains("Read the dataset. Generate 30 key questions you would ask the experts of the dataset"),
        "T1 task sentence missing"
    );

    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/prompts");
    let text = prompts::serialize_dataset(&bikes(), 6000).unwrap();
    let renders = [
        ("t1.txt", prompts::render_t1(&text).unwrap()),
        ("v1.txt", prompts::render_v1("What does a row represent?", "One completed trip.").unwrap()),
        ("importance.txt", prompts::render_importance(&text, "Who collected the data?").unwrap()),
    ];
    for (name, rendered) in renders {
        let frozen = std::fs::read_to_string(golden.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(rendered == frozen, "{name} differs from its golden file");
    }
    ensure!(t1 == &prompts::render_t1(&text).unwrap(), "bootstrap prompt differs from a fresh render");
    Ok(format!("{} live prompts across 7 purposes, 3 golden files", requests.len()))
}

fn determinism(suite_started: Instant) -> Outcome {
    let run = |seed: u64| -> Result<(Vec<u8>, Vec<elicit_core::provider::CallRecord>), String> {
        let (app, mock) = http_app(seed);
        runtime().block_on(async {
            let (status, body) = upload(&app, "bikes.csv", &bikes_csv()).await;
            ensure!(status == StatusCode::CREATED, "upload gave {status}");
            let id = json(&body)["session_id"].as_str().unwrap().to_string();
            let (mut notes, mut answers) = (0, 0);
            while notes < 10 || answers < 6 {
                if notes < 10 {
                    let body = serde_json::json!({"selection": {"kind": "rows", "row_indices": [notes]}, "text": format!("remark {notes}")});
                    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/annotations"), Some(body)).await;
                    ensure!(status == StatusCode::CREATED, "annotation gave {status}");
                    notes += 1;
                }
                if answers < 6 {
                    let (_, board) = call(&app, Method::GET, &format!("/sessions/{id}/board"), None).await;
                    let board = json(&board);
                    if board["refill_enabled"] == true {
                        call(&app, Method::POST, &format!("/sessions/{id}/board/refill"), None).await;
                    }
                    let (_, board) = call(&app, Method::GET, &format!("/sessions/{id}/board"), None).await;
                    let qid = json(&board)["questions"][0]["id"].as_str().unwrap().to_string();
                    let body = serde_json::json!({"text": LONG_ANSWER});
                    let (_, out) = call(&app, Method::POST, &format!("/sessions/{id}/questions/{qid}/answer"), Some(body)).await;
                    ensure!(json(&out)["verdict"] == "accepted", "answer rejected");
                    answers += 1;
                }
            }
            let (status, export) = call(&app, Method::GET, &format!("/sessions/{id}/export"), None).await;
            ensure!(status == StatusCode::OK, "export gave {status}");
            Ok((export, mock.call_log()))
        })
    };
    let (a, b) = (run(12)?, run(12)?);
    ensure!(a.0 == b.0, "exports differ between identical runs");
    ensure!(a.1 == b.1, "call logs differ between identical runs");
    let doc = ExportDocument::parse(std::str::from_utf8(&a.0).unwrap()).map_err(|e| e.to_string())?;
    ensure!(doc.annotations.len() == 16, "{} annotations exported", doc.annotations.len());
    let elapsed = suite_started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "suite took {elapsed:?}");
    Ok(format!(
        "{} byte export and {} calls identical; suite so far {:.1} s",
        a.0.len(),
        a.1.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- runner

static LAST_PANIC: Mutex<Option<String>> = Mutex::new(None);

fn run_guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(_) => Err(LAST_PANIC.lock().unwrap().take().unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|info| {
        let at = info.location().map(|l| format!("{}:{}: ", l.file(), l.line())).unwrap_or_default();
        let msg = info
            .payload()
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| info.payload().downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        *LAST_PANIC.lock().unwrap() = Some(format!("panic at {at}{msg}"));
    }));

    let started = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("bootstrap contract", Box::new(bootstrap_contract)),
        ("fill parity", Box::new(fill_parity)),
        ("refill gating", Box::new(refill_gating)),
        ("annotation trigger contract", Box::new(annotation_trigger)),
        ("priority scoring", Box::new(scoring)),
        ("originality boundaries", Box::new(originality_bounds)),
        ("validation pipeline", Box::new(validation_pipeline)),
        ("theme summaries", Box::new(theme_summaries)),
        ("persistence", Box::new(persistence)),
        ("ingestion and stats", Box::new(ingestion_and_stats)),
        ("prompt fidelity", Box::new(prompt_fidelity)),
        ("determinism", Box::new(move || determinism(started))),
    ];
    let total = criteria.len();
    let mut failed = 0;
    for (n, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = run_guarded(f);
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2} s): {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2} s): {why}", n + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{total} passed in {:.1} s",
        total - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
