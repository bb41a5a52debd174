//! Question lifecycle: generation, scoring, selection and the display board.
//!
//! Questions move pooled -> displayed -> answered | removed. The pool keeps
//! generated and predefined questions apart so the board can mix them, and
//! every random choice draws from the pool's seeded generator.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{
    Annotation, AnnotationId, Question, QuestionId, QuestionOrigin, QuestionStatus, ThemeId,
    MAX_SCORE, MIN_SCORE,
};
use crate::prompts::{self, FollowUpContext, GeneratedQuestion, ParseError, PromptError};
use crate::provider::{CompletionProvider, CompletionRequest, ProviderError, Purpose, Tier};

pub const BOARD_CAPACITY: usize = 10;
pub const REFILL_THRESHOLD: usize = 4;
pub const INITIAL_GENERATED: usize = prompts::INITIAL_QUESTION_COUNT;
pub const FOLLOW_UP_COUNT: usize = 5;
pub const REPLENISH_BELOW: usize = 10;
pub const REPLENISH_COUNT: usize = 10;
pub const DEFAULT_IMPORTANCE: u8 = 3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("provider output could not be parsed after a repair attempt: {0}")]
    MalformedProviderOutput(ParseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("unknown question {0}")]
    UnknownQuestion(QuestionId),
    #[error("question {0} is not on the board")]
    NotDisplayed(QuestionId),
    #[error("refill needs at most {REFILL_THRESHOLD} displayed questions, board has {0}")]
    RefillNotEnabled(usize),
    #[error("predefined question bank is empty")]
    EmptyBank,
}

impl EngineError {
    pub fn name(&self) -> &'static str {
        match self {
            EngineError::Provider(e) => e.name(),
            EngineError::MalformedProviderOutput(_) => "MalformedProviderOutput",
            EngineError::Prompt(_) => "PromptError",
            EngineError::UnknownQuestion(_) => "UnknownQuestion",
            EngineError::NotDisplayed(_) => "NotDisplayed",
            EngineError::RefillNotEnabled(_) => "RefillNotEnabled",
            EngineError::EmptyBank => "EmptyBank",
        }
    }
}

/// ChaCha8 stream whose position survives serialization.
#[derive(Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn at(seed: u64, word_pos: u128) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_word_pos(word_pos);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }
}

impl fmt::Debug for SeededRng {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeededRng")
            .field("seed", &self.seed)
            .field("word_pos", &self.word_pos())
            .finish()
    }
}

impl PartialEq for SeededRng {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.word_pos() == other.word_pos()
    }
}

impl Eq for SeededRng {}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[derive(Serialize, Deserialize)]
struct RngWire {
    seed: u64,
    word_pos: u64,
}

impl Serialize for SeededRng {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let word_pos = u64::try_from(self.word_pos()).map_err(serde::ser::Error::custom)?;
        RngWire {
            seed: self.seed,
            word_pos,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SeededRng {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = RngWire::deserialize(d)?;
        Ok(SeededRng::at(w.seed, u128::from(w.word_pos)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionPool {
    pub generated_backlog: Vec<Question>,
    pub predefined_bank: Vec<Question>,
    pub answered_history: Vec<Question>,
    pub removed: Vec<Question>,
    pub rng: SeededRng,
}

impl QuestionPool {
    pub fn new(seed: u64) -> Self {
        Self {
            generated_backlog: Vec::new(),
            predefined_bank: Vec::new(),
            answered_history: Vec::new(),
            removed: Vec::new(),
            rng: SeededRng::new(seed),
        }
    }

    /// Adds fresh questions to the backlog or bank according to their origin.
    pub fn add(&mut self, questions: impl IntoIterator<Item = Question>) {
        for q in questions {
            assert_eq!(q.status, QuestionStatus::Pooled, "only pooled questions enter the pool");
            match q.origin {
                QuestionOrigin::Generated => self.generated_backlog.push(q),
                QuestionOrigin::Predefined => self.predefined_bank.push(q),
            }
        }
    }

    pub fn find(&self, id: &QuestionId) -> Option<&Question> {
        self.generated_backlog
            .iter()
            .chain(&self.predefined_bank)
            .chain(&self.answered_history)
            .chain(&self.removed)
            .find(|q| &q.id == id)
    }

    fn take_pooled(&mut self, id: &QuestionId) -> Option<Question> {
        for list in [&mut self.generated_backlog, &mut self.predefined_bank] {
            if let Some(pos) = list.iter().position(|q| &q.id == id) {
                return Some(list.remove(pos));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayBoard {
    pub slots: Vec<Question>,
    /// Bumped on every board mutation so clients can poll cheaply.
    pub version: u64,
}

impl DisplayBoard {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: &QuestionId) -> Option<&Question> {
        self.slots.iter().find(|q| &q.id == id)
    }
}

pub fn refill_enabled(board: &DisplayBoard) -> bool {
    board.len() <= REFILL_THRESHOLD
}

pub fn total_score(q: &Question) -> u8 {
    q.originality + q.recency + q.importance
}

/// Jaccard coefficient of lowercased word sets with punctuation stripped.
pub fn default_similarity(a: &str, b: &str) -> f64 {
    fn words(s: &str) -> BTreeSet<String> {
        s.split_whitespace()
            .map(|w| {
                w.chars()
                    .filter(|c| c.is_alphanumeric())
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }
    let (wa, wb) = (words(a), words(b));
    if wa.is_empty() && wb.is_empty() {
        return 1.0;
    }
    let inter = wa.intersection(&wb).count();
    let union = wa.union(&wb).count();
    inter as f64 / union as f64
}

/// Maps mean similarity s to `clamp(round(5 - 4s), 1, 5)`; empty history gives 5.
pub fn originality_from_mean(mean: Option<f64>) -> u8 {
    match mean {
        None => MAX_SCORE,
        Some(s) => (5.0 - 4.0 * s).round().clamp(f64::from(MIN_SCORE), f64::from(MAX_SCORE)) as u8,
    }
}

pub fn originality(
    question: &str,
    answered_history: &[Question],
    similarity: impl Fn(&str, &str) -> f64,
) -> u8 {
    if answered_history.is_empty() {
        return originality_from_mean(None);
    }
    let sum: f64 = answered_history
        .iter()
        .map(|h| similarity(question, &h.text))
        .sum();
    originality_from_mean(Some(sum / answered_history.len() as f64))
}

/// Recomputes originality for every unanswered question against the history.
pub fn refresh_originality(pool: &mut QuestionPool, board: &mut DisplayBoard) {
    let history = std::mem::take(&mut pool.answered_history);
    for q in pool
        .generated_backlog
        .iter_mut()
        .chain(pool.predefined_bank.iter_mut())
        .chain(board.slots.iter_mut())
    {
        q.originality = originality(&q.text, &history, default_similarity);
    }
    pool.answered_history = history;
}

/// Decrements recency of every pooled and displayed question, never below 1.
pub fn decay_recency(pool: &mut QuestionPool, board: &mut DisplayBoard) {
    for q in pool
        .generated_backlog
        .iter_mut()
        .chain(pool.predefined_bank.iter_mut())
        .chain(board.slots.iter_mut())
    {
        q.recency = q.recency.saturating_sub(1).max(MIN_SCORE);
    }
}

/// The k highest-scoring questions; ties fall in a seeded random order.
///
/// The candidates are shuffled first and then stably sorted by descending
/// score, which makes every ordering of a tie group equally likely.
pub fn select_generated<R: Rng + ?Sized>(backlog: &[Question], k: usize, rng: &mut R) -> Vec<QuestionId> {
    let mut order: Vec<usize> = (0..backlog.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| Reverse(total_score(&backlog[i])));
    order
        .into_iter()
        .take(k)
        .map(|i| backlog[i].id.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeCounts {
    pub answered: usize,
    pub unanswered: usize,
}

/// Per-theme answered count (history) and unanswered count (predefined bank).
pub fn theme_progress(pool: &QuestionPool) -> BTreeMap<ThemeId, ThemeCounts> {
    let mut out: BTreeMap<ThemeId, ThemeCounts> =
        ThemeId::ALL.iter().map(|t| (*t, ThemeCounts::default())).collect();
    for q in &pool.answered_history {
        if let Some(t) = q.theme {
            out.get_mut(&t).unwrap().answered += 1;
        }
    }
    for q in &pool.predefined_bank {
        if let Some(t) = q.theme {
            out.get_mut(&t).unwrap().unanswered += 1;
        }
    }
    out
}

/// Picks one question at a time from the theme with the most unanswered bank
/// items, recounting after every pick. Ties between themes and within a theme
/// are broken with `rng`.
pub fn select_predefined<R: Rng + ?Sized>(bank: &[Question], k: usize, rng: &mut R) -> Vec<QuestionId> {
    let mut remaining: Vec<&Question> = bank.iter().filter(|q| q.theme.is_some()).collect();
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let mut counts = [0usize; 7];
        for q in &remaining {
            counts[q.theme.unwrap().index()] += 1;
        }
        let max = *counts.iter().max().unwrap();
        if max == 0 {
            break;
        }
        let tied: Vec<ThemeId> = ThemeId::ALL
            .into_iter()
            .filter(|t| counts[t.index()] == max)
            .collect();
        let theme = tied[rng.random_range(0..tied.len())];
        let candidates: Vec<usize> = remaining
            .iter()
            .enumerate()
            .filter(|(_, q)| q.theme == Some(theme))
            .map(|(i, _)| i)
            .collect();
        let at = candidates[rng.random_range(0..candidates.len())];
        picked.push(remaining.remove(at).id.clone());
    }
    picked
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillReport {
    pub predefined: Vec<QuestionId>,
    pub generated: Vec<QuestionId>,
    /// True when backlog and bank together could not cover the empty slots.
    pub insufficient: bool,
}

impl FillReport {
    /// Board order: predefined picks first, then generated.
    pub fn displayed(&self) -> Vec<QuestionId> {
        self.predefined.iter().chain(&self.generated).cloned().collect()
    }
}

/// Fills the empty slots: half predefined (rounded down), the rest generated.
/// A shortfall on either side is made up from the other.
pub fn plan_fill(board: &DisplayBoard, pool: &mut QuestionPool) -> FillReport {
    let empty = BOARD_CAPACITY.saturating_sub(board.len());
    let want_predefined = empty / 2;
    let want_generated = empty - want_predefined;

    let mut predefined = select_predefined(&pool.predefined_bank, want_predefined, &mut pool.rng);
    let generated_target = want_generated + (want_predefined - predefined.len());
    let generated = select_generated(&pool.generated_backlog, generated_target, &mut pool.rng);
    if generated.len() < generated_target {
        let rest: Vec<Question> = pool
            .predefined_bank
            .iter()
            .filter(|q| !predefined.contains(&q.id))
            .cloned()
            .collect();
        predefined.extend(select_predefined(
            &rest,
            generated_target - generated.len(),
            &mut pool.rng,
        ));
    }
    let insufficient = predefined.len() + generated.len() < empty;
    FillReport {
        predefined,
        generated,
        insufficient,
    }
}

/// Moves pooled questions onto the board in the given order.
pub fn display(board: &mut DisplayBoard, pool: &mut QuestionPool, ids: &[QuestionId]) -> Result<(), EngineError> {
    for id in ids {
        if board.len() >= BOARD_CAPACITY {
            panic!("board capacity exceeded while displaying {id}");
        }
        let mut q = pool
            .take_pooled(id)
            .ok_or_else(|| EngineError::UnknownQuestion(id.clone()))?;
        q.transition(QuestionStatus::Displayed);
        board.slots.push(q);
    }
    if !ids.is_empty() {
        board.version += 1;
    }
    Ok(())
}

pub fn fill_board(board: &mut DisplayBoard, pool: &mut QuestionPool) -> FillReport {
    let report = plan_fill(board, pool);
    display(board, pool, &report.displayed()).expect("planned questions come from the pool");
    report
}

/// User-requested refill; only allowed once few enough questions remain.
pub fn refill(board: &mut DisplayBoard, pool: &mut QuestionPool) -> Result<FillReport, EngineError> {
    if !refill_enabled(board) {
        return Err(EngineError::RefillNotEnabled(board.len()));
    }
    Ok(fill_board(board, pool))
}

fn take_displayed(board: &mut DisplayBoard, pool: &QuestionPool, id: &QuestionId) -> Result<Question, EngineError> {
    match board.slots.iter().position(|q| &q.id == id) {
        Some(pos) => Ok(board.slots.remove(pos)),
        None if pool.find(id).is_some() => Err(EngineError::NotDisplayed(id.clone())),
        None => Err(EngineError::UnknownQuestion(id.clone())),
    }
}

pub fn remove_question(board: &mut DisplayBoard, pool: &mut QuestionPool, id: &QuestionId) -> Result<(), EngineError> {
    let mut q = take_displayed(board, pool, id)?;
    q.transition(QuestionStatus::Removed);
    pool.removed.push(q);
    board.version += 1;
    Ok(())
}

pub fn mark_answered(board: &mut DisplayBoard, pool: &mut QuestionPool, id: &QuestionId) -> Result<(), EngineError> {
    let mut q = take_displayed(board, pool, id)?;
    q.transition(QuestionStatus::Answered);
    pool.answered_history.push(q);
    board.version += 1;
    refresh_originality(pool, board);
    Ok(())
}

/// Question ids are allocated sequentially per session.
pub fn question_id(n: u64) -> QuestionId {
    QuestionId(format!("q-{n:06}"))
}

/// Completion with one repair round: on a parse failure the prompt is re-sent
/// with the error appended.
pub fn complete_structured<T>(
    provider: &dyn CompletionProvider,
    request: &CompletionRequest,
    parse: impl Fn(&str) -> Result<T, ParseError>,
) -> Result<T, EngineError> {
    let first = provider.complete(request)?;
    let err = match parse(&first) {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    let repair = CompletionRequest {
        prompt: prompts::with_repair(&request.prompt, &err),
        ..request.clone()
    };
    let second = provider.complete(&repair)?;
    parse(&second).map_err(EngineError::MalformedProviderOutput)
}

/// Importance rating; provider failures fall back to 3 with the degraded flag.
pub fn importance(dataset_text: &str, question_text: &str, provider: &dyn CompletionProvider) -> (u8, bool) {
    let prompt = match prompts::render_importance(dataset_text, question_text) {
        Ok(p) => p,
        Err(_) => return (DEFAULT_IMPORTANCE, true),
    };
    let request = CompletionRequest::standard(Purpose::Importance, prompt);
    match provider.complete(&request).map(|out| prompts::parse_rating(&out)) {
        Ok(Ok(v)) => (v, false),
        _ => (DEFAULT_IMPORTANCE, true),
    }
}

/// Turns provider output into scored, pooled questions with fresh ids.
pub fn materialize(
    raw: Vec<GeneratedQuestion>,
    next_id: &mut u64,
    trigger: Option<&AnnotationId>,
    dataset_text: &str,
    answered_history: &[Question],
    provider: &dyn CompletionProvider,
) -> Vec<Question> {
    raw.into_iter()
        .map(|g| {
            let mut q = Question::generated(question_id(*next_id), g.text, g.theme);
            *next_id += 1;
            let (imp, degraded) = importance(dataset_text, &q.text, provider);
            q.importance = imp;
            q.importance_degraded = degraded;
            q.originality = originality(&q.text, answered_history, default_similarity);
            q.trigger_annotation_id = trigger.cloned();
            q
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntry {
    pub theme: ThemeId,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("bank file is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bank entry {0} has empty text")]
    EmptyText(usize),
    #[error("could not read bank file: {0}")]
    Io(#[from] std::io::Error),
}

const DEFAULT_BANK_JSON: &str = include_str!("../assets/default_bank.json");

/// Parses a bank file: a JSON array of `{theme, text}` records, order kept.
pub fn parse_bank(json: &str) -> Result<Vec<BankEntry>, BankError> {
    let entries: Vec<BankEntry> = serde_json::from_str(json)?;
    for (i, e) in entries.iter().enumerate() {
        if e.text.trim().is_empty() {
            return Err(BankError::EmptyText(i));
        }
    }
    Ok(entries)
}

pub fn load_bank(path: &std::path::Path) -> Result<Vec<BankEntry>, BankError> {
    parse_bank(&std::fs::read_to_string(path)?)
}

/// Seven questions for each of the seven themes.
pub fn default_bank() -> Vec<BankEntry> {
    parse_bank(DEFAULT_BANK_JSON).expect("bundled bank is valid")
}

pub fn bank_questions(bank: &[BankEntry], next_id: &mut u64) -> Vec<Question> {
    bank.iter()
        .map(|e| {
            let q = Question::predefined(question_id(*next_id), e.theme, e.text.clone());
            *next_id += 1;
            q
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bootstrap {
    pub pool: QuestionPool,
    pub board: DisplayBoard,
    pub bank: Vec<Question>,
    pub generated: Vec<Question>,
    pub fill: FillReport,
}

/// Initial state for a new dataset: the predefined bank, 30 generated
/// questions from the high-reasoning tier, and a first board fill.
///
/// Nothing is returned unless every provider step succeeded.
pub fn bootstrap(
    dataset_text: &str,
    provider: &dyn CompletionProvider,
    bank_source: &[BankEntry],
    seed: u64,
    next_id: &mut u64,
) -> Result<Bootstrap, EngineError> {
    if bank_source.is_empty() {
        return Err(EngineError::EmptyBank);
    }
    let request = CompletionRequest::new(
        Tier::InitialGeneration,
        Purpose::Generation,
        prompts::render_t1(dataset_text)?,
    );
    let raw = complete_structured(provider, &request, |out| {
        prompts::parse_questions(out, INITIAL_GENERATED)
    })?;

    let mut ids = *next_id;
    let bank = bank_questions(bank_source, &mut ids);
    let generated = materialize(raw, &mut ids, None, dataset_text, &[], provider);
    *next_id = ids;

    let mut pool = QuestionPool::new(seed);
    pool.add(bank.clone());
    pool.add(generated.clone());
    let mut board = DisplayBoard::default();
    let fill = fill_board(&mut board, &mut pool);
    Ok(Bootstrap {
        pool,
        board,
        bank,
        generated,
        fill,
    })
}

/// Generates `count` questions from a follow-up style prompt.
pub fn generate_follow_ups(
    ctx: &FollowUpContext<'_>,
    count: usize,
    purpose: Purpose,
    provider: &dyn CompletionProvider,
) -> Result<Vec<GeneratedQuestion>, EngineError> {
    let request = CompletionRequest::standard(purpose, prompts::render_t2(ctx, count)?);
    complete_structured(provider, &request, |out| prompts::parse_questions(out, count))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitReport {
    pub follow_ups: Vec<Question>,
    pub replenished: Vec<Question>,
}

/// Reacts to a committed annotation: recency decay, five follow-ups tied to
/// it, then ten more generated questions if the backlog is still short.
///
/// Decay is applied even when generation fails.
pub fn on_annotation_committed(
    pool: &mut QuestionPool,
    board: &mut DisplayBoard,
    annotation: &Annotation,
    ctx: &FollowUpContext<'_>,
    provider: &dyn CompletionProvider,
    next_id: &mut u64,
) -> Result<CommitReport, EngineError> {
    decay_recency(pool, board);
    let raw = generate_follow_ups(ctx, FOLLOW_UP_COUNT, Purpose::FollowUp, provider)?;
    let follow_ups = materialize(
        raw,
        next_id,
        Some(&annotation.id),
        ctx.dataset_text,
        &pool.answered_history,
        provider,
    );
    pool.add(follow_ups.clone());
    let mut replenished = Vec::new();
    if pool.generated_backlog.len() < REPLENISH_BELOW {
        let raw = generate_follow_ups(ctx, REPLENISH_COUNT, Purpose::Generation, provider)?;
        replenished = materialize(raw, next_id, None, ctx.dataset_text, &pool.answered_history, provider);
        pool.add(replenished.clone());
    }
    Ok(CommitReport {
        follow_ups,
        replenished,
    })
}
