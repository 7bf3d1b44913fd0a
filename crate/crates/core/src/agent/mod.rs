//! The per-step decision loop: retrieve memories, summarize them, reason
//! over the ten adjustment ranges, pick an action, and remember what
//! happened. Every stage degrades gracefully, so a step always yields a
//! usable scale.

pub mod backend;
pub mod parse;
pub mod templates;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::auction::{Bidder, BidderDecision, BidderError, EnvState, StepContext, StepReport};
use crate::memory::{
    BidRecord, MemoryBank, MemoryEntry, MemoryKind, MemoryPayload, Reflection, RetrievalScope,
    StepOutcome,
};
use backend::{CompletionRequest, LlmBackend};
use parse::ParseError;
use templates::TemplateSet;

/// The ten adjustment ranges, in bin order. The last bin is closed.
pub const BIN_LABELS: [&str; 10] = [
    "[-0.5,-0.4)",
    "[-0.4,-0.3)",
    "[-0.3,-0.2)",
    "[-0.2,-0.1)",
    "[-0.1,0.0)",
    "[0.0,0.1)",
    "[0.1,0.2)",
    "[0.2,0.3)",
    "[0.3,0.4)",
    "[0.4,0.5]",
];

/// Bin index holding `a`; values outside the bounds clamp to the end bins.
pub fn bin_of(a: f64) -> usize {
    (((a + 0.5) * 10.0 + 1e-9).floor() as i64).clamp(0, 9) as usize
}

/// Center of bin `i`, exact in binary floating point.
pub fn bin_midpoint(i: usize) -> f64 {
    (i as f64 - 4.5) / 10.0
}

/// Nearest bin midpoint; boundary values snap toward the upper bin.
pub fn snap_to_bin_midpoint(a: f64) -> f64 {
    bin_midpoint(((a + 0.45) / 0.1).round().clamp(0.0, 9.0) as usize)
}

pub const REMINDER: &str =
    "Return only the JSON object in the required format, with no extra text.";
pub const FALLBACK_REASON: &str = "fallback: unparseable output";

/// The decision of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub adjustment: f64,
    pub bin_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum Stage {
    Summarize { kind: MemoryKind },
    Insight,
    Act,
    Reflect { kind: MemoryKind },
}

/// One backend attempt, logged verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCall {
    #[serde(flatten)]
    pub stage: Stage,
    pub attempt: usize,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub completion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_request: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTranscript {
    pub day: usize,
    pub step: usize,
    pub lambda_base: f64,
    pub lambda: f64,
    /// Concatenated per-kind summaries fed to later stages.
    pub history: String,
    pub insights: Vec<String>,
    pub action: Action,
    pub fallback: bool,
    pub degraded_summarize: bool,
    pub degraded_insight: bool,
    pub calls: Vec<LlmCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTranscript {
    pub day: usize,
    pub reflections: Vec<Reflection>,
    pub degraded: Vec<MemoryKind>,
    pub calls: Vec<LlmCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Step(StepTranscript),
    EndOfDay(ReflectionTranscript),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub retrieval: RetrievalScope,
    /// Re-prompts after a schema violation before degrading.
    pub retries: usize,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Cap on raw-history substitutions in degraded mode.
    pub history_char_cap: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            retrieval: RetrievalScope::default(),
            retries: 2,
            temperature: 0.0,
            max_tokens: None,
            history_char_cap: 4000,
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    }
}

fn render_entry(e: &MemoryEntry) -> String {
    match &e.payload {
        MemoryPayload::Env(s) => format!(
            "day {} step {}: spent {}/{} (remaining {}), bids {}, wins {} (rate {:.3}), clicks {}, cpc {}, avg price seen {}",
            e.day,
            e.step.map_or("?".into(), |s| s.to_string()),
            s.total_cost,
            s.total_budget,
            s.remaining_budget,
            s.bids_made,
            s.wins,
            s.win_rate,
            s.clicks,
            fmt_opt(s.cpc),
            fmt_opt(s.avg_market_price_seen),
        ),
        MemoryPayload::Bid(b) => format!(
            "day {} step {}: scale {:.4} (adj {:+.3}) -> {} imps, {} wins, cost {}, clicks {}; reason: {}",
            e.day,
            e.step.map_or("?".into(), |s| s.to_string()),
            b.lambda,
            b.adjustment,
            b.outcome.impressions,
            b.outcome.wins,
            b.outcome.cost,
            b.outcome.clicks,
            b.reason,
        ),
        MemoryPayload::Ref(r) => format!("day {} [{}] {}", e.day, r.about, r.text),
    }
}

fn render_entries(entries: &[&MemoryEntry]) -> String {
    if entries.is_empty() {
        "(none)".to_string()
    } else {
        entries.iter().map(|e| render_entry(e)).collect::<Vec<_>>().join("\n")
    }
}

fn truncate_chars(s: &str, cap: usize) -> String {
    if s.chars().count() <= cap {
        s.to_string()
    } else {
        let mut out: String = s.chars().take(cap).collect();
        out.push_str("...");
        out
    }
}

type Vars<'a> = BTreeMap<&'a str, String>;

/// Calls the backend until `parse` accepts a completion or attempts run
/// out; retries re-send the prompt with a terse format reminder. Every
/// attempt lands in `calls`.
fn call_parsed<T>(
    backend: &mut (dyn LlmBackend + Send),
    stage: Stage,
    prompt: &str,
    config: &AgentConfig,
    parse: impl Fn(&str) -> Result<T, ParseError>,
    calls: &mut Vec<LlmCall>,
) -> Option<T> {
    for attempt in 1..=config.retries + 1 {
        let prompt_used =
            if attempt == 1 { prompt.to_string() } else { format!("{prompt}\n\n{REMINDER}") };
        let request = CompletionRequest {
            prompt: prompt_used.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        };
        let mut call = LlmCall {
            stage,
            attempt,
            prompt: prompt_used,
            completion: None,
            error: None,
            raw_request: None,
            raw_response: None,
        };
        match backend.complete(&request) {
            Err(e) => {
                call.error = Some(e.to_string());
                calls.push(call);
            }
            Ok(completion) => {
                call.completion = Some(completion.text.clone());
                call.raw_request = completion.raw_request;
                call.raw_response = completion.raw_response;
                match parse(&completion.text) {
                    Ok(value) => {
                        calls.push(call);
                        return Some(value);
                    }
                    Err(pe) => {
                        call.error = Some(pe.to_string());
                        calls.push(call);
                    }
                }
            }
        }
    }
    None
}

/// A bidder that delegates the per-step adjustment to a completion
/// backend, with three memory stores and a full call transcript.
pub struct AgentBidder {
    label: String,
    backend: Box<dyn LlmBackend + Send>,
    templates: TemplateSet,
    config: AgentConfig,
    memory: MemoryBank,
    transcript: Vec<TranscriptEvent>,
    pending_reason: Option<String>,
}

impl AgentBidder {
    pub fn new(
        label: impl Into<String>,
        backend: Box<dyn LlmBackend + Send>,
        templates: TemplateSet,
        config: AgentConfig,
    ) -> Self {
        AgentBidder {
            label: label.into(),
            backend,
            templates,
            config,
            memory: MemoryBank::new(),
            transcript: Vec::new(),
            pending_reason: None,
        }
    }

    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }

    pub fn transcript(&self) -> &[TranscriptEvent] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEvent> {
        std::mem::take(&mut self.transcript)
    }

    pub fn backend_name(&self) -> String {
        self.backend.name()
    }

    fn summarize_history(
        &mut self,
        day: usize,
        step: usize,
        steps_per_day: usize,
        calls: &mut Vec<LlmCall>,
    ) -> Result<(String, bool), BidderError> {
        let mut degraded = false;
        let mut blocks = Vec::new();
        for kind in [MemoryKind::Bid, MemoryKind::Env, MemoryKind::Ref] {
            let entries = self.memory.store(kind).retrieve(&self.config.retrieval, day, step);
            let entries_text = render_entries(&entries);
            let mut vars = Vars::new();
            vars.insert("kind", kind.to_string());
            vars.insert("day", day.to_string());
            vars.insert("step", step.to_string());
            vars.insert("steps_per_day", steps_per_day.to_string());
            vars.insert("entries", entries_text.clone());
            let prompt = self
                .templates
                .sum
                .render(&vars)
                .map_err(|e| BidderError::Template(e.to_string()))?;
            let summary = call_parsed(
                &mut *self.backend,
                Stage::Summarize { kind },
                &prompt,
                &self.config,
                parse::parse_summary,
                calls,
            );
            let text = match summary {
                Some(s) => s,
                None => {
                    degraded = true;
                    truncate_chars(&entries_text, self.config.history_char_cap)
                }
            };
            blocks.push(format!("[{kind} memory]\n{text}"));
        }
        Ok((blocks.join("\n\n"), degraded))
    }
}

fn status_json(state: &EnvState) -> String {
    serde_json::to_string_pretty(&state.status()).expect("status serializes")
}

fn bidding_reference(state: &EnvState) -> String {
    format!(
        "expert base scale lambda_base = {}; each impression is bid floor(pctr * lambda) where lambda = lambda_base * (1 + a)",
        state.lambda_base
    )
}

impl Bidder for AgentBidder {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn decide(
        &mut self,
        state: &EnvState,
        ctx: &StepContext<'_>,
    ) -> Result<BidderDecision, BidderError> {
        let (day, step, spd) = (ctx.day_index, ctx.step_index, ctx.steps_per_day);
        let mut calls = Vec::new();
        let (history, degraded_summarize) =
            self.summarize_history(day, step, spd, &mut calls)?;

        let mut vars = Vars::new();
        vars.insert("day", day.to_string());
        vars.insert("step", step.to_string());
        vars.insert("steps_per_day", spd.to_string());
        vars.insert("environment_status", status_json(state));
        vars.insert("history", history.clone());
        vars.insert("bidding_reference", bidding_reference(state));
        let ins_prompt = self
            .templates
            .ins
            .render(&vars)
            .map_err(|e| BidderError::Template(e.to_string()))?;
        let insight = call_parsed(
            &mut *self.backend,
            Stage::Insight,
            &ins_prompt,
            &self.config,
            parse::parse_insight,
            &mut calls,
        );
        let (insights, degraded_insight) = match insight {
            Some(v) => (v, false),
            None => (vec![String::new(); 10], true),
        };

        let insights_text = BIN_LABELS
            .iter()
            .zip(&insights)
            .map(|(label, text)| format!("- {label}: {text}"))
            .collect::<Vec<_>>()
            .join("\n");
        vars.insert("insights", insights_text);
        let act_prompt = self
            .templates
            .act
            .render(&vars)
            .map_err(|e| BidderError::Template(e.to_string()))?;
        let act = call_parsed(
            &mut *self.backend,
            Stage::Act,
            &act_prompt,
            &self.config,
            parse::parse_action,
            &mut calls,
        );
        let (adjustment, reason, fallback) = match act {
            Some((a, reason)) => (a, reason, false),
            None => (0.0, FALLBACK_REASON.to_string(), true),
        };
        let action = Action { adjustment, bin_index: bin_of(adjustment), reason };
        let lambda = state.lambda_base * (1.0 + adjustment);
        self.pending_reason = Some(action.reason.clone());
        self.transcript.push(TranscriptEvent::Step(StepTranscript {
            day,
            step,
            lambda_base: state.lambda_base,
            lambda,
            history,
            insights,
            action,
            fallback,
            degraded_summarize,
            degraded_insight,
            calls,
        }));
        Ok(BidderDecision { lambda, adjustment })
    }

    fn observe_step(&mut self, report: &StepReport, state: &EnvState) -> Result<(), BidderError> {
        let wrap = |e: crate::memory::MemoryError| BidderError::Other(e.to_string());
        self.memory
            .env
            .append(report.day_index, Some(report.step_index), MemoryPayload::Env(state.status()))
            .map_err(wrap)?;
        let record = BidRecord {
            lambda: report.lambda,
            adjustment: report.adjustment,
            reason: self.pending_reason.take().unwrap_or_else(|| "(none)".to_string()),
            outcome: StepOutcome {
                impressions: report.impressions,
                wins: report.wins,
                cost: report.cost,
                clicks: report.clicks,
            },
        };
        self.memory
            .bid
            .append(report.day_index, Some(report.step_index), MemoryPayload::Bid(record))
            .map_err(wrap)?;
        Ok(())
    }

    fn end_day(&mut self, state: &EnvState) -> Result<(), BidderError> {
        let day = state.day_index;
        let mut calls = Vec::new();
        let mut degraded = Vec::new();
        let mut reflections = Vec::new();
        for kind in [MemoryKind::Bid, MemoryKind::Env, MemoryKind::Ref] {
            let entries: Vec<&MemoryEntry> =
                self.memory.store(kind).entries_for_day(day).collect();
            let entries_text = render_entries(&entries);
            let mut vars = Vars::new();
            vars.insert("kind", kind.to_string());
            vars.insert("day", day.to_string());
            vars.insert("entries", entries_text.clone());
            vars.insert("environment_status", status_json(state));
            let prompt = self
                .templates
                .reflect
                .render(&vars)
                .map_err(|e| BidderError::Template(e.to_string()))?;
            let text = match call_parsed(
                &mut *self.backend,
                Stage::Reflect { kind },
                &prompt,
                &self.config,
                parse::parse_reflection,
                &mut calls,
            ) {
                Some(t) => t,
                None => {
                    degraded.push(kind);
                    truncate_chars(&entries_text, self.config.history_char_cap)
                }
            };
            reflections.push(Reflection { about: kind, text });
        }
        for r in &reflections {
            self.memory
                .reflections
                .append(day, None, MemoryPayload::Ref(r.clone()))
                .map_err(|e| BidderError::Other(e.to_string()))?;
        }
        self.transcript.push(TranscriptEvent::EndOfDay(ReflectionTranscript {
            day,
            reflections,
            degraded,
            calls,
        }));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::backend::{BackendError, Completion, StubBackend};
    use super::*;
    use crate::auction::{run_day, FixedLambdaBidder};
    use crate::ctr::{train, FeatureIndexer, TrainConfig};
    use crate::dataset::{synthesize_campaign, SynthParams};

    #[test]
    fn bins_cover_the_range() {
        assert_eq!(bin_of(-0.5), 0);
        assert_eq!(bin_of(-0.45), 0);
        assert_eq!(bin_of(-0.4), 1);
        assert_eq!(bin_of(-0.2), 3);
        assert_eq!(bin_of(0.0), 5);
        assert_eq!(bin_of(0.15), 6);
        assert_eq!(bin_of(0.35), 8);
        assert_eq!(bin_of(0.4), 9);
        assert_eq!(bin_of(0.5), 9);
    }

    #[test]
    fn midpoints_are_exact_and_snapping_is_nearest() {
        assert_eq!(bin_midpoint(0), -0.45);
        assert_eq!(bin_midpoint(5), 0.05);
        assert_eq!(bin_midpoint(8), 0.35);
        assert_eq!(snap_to_bin_midpoint(0.36), 0.35);
        assert_eq!(snap_to_bin_midpoint(-0.45), -0.45);
        assert_eq!(snap_to_bin_midpoint(0.0), 0.05);
        assert_eq!(snap_to_bin_midpoint(0.31), 0.35);
        assert_eq!(snap_to_bin_midpoint(-0.08), -0.05);
        for i in 0..10 {
            assert_eq!(bin_of(bin_midpoint(i)), i);
        }
    }

    fn small_campaign() -> (crate::dataset::CampaignDataset, crate::ctr::FMModel) {
        let params = SynthParams { days: 4, events_per_day: 250, ..SynthParams::default() };
        let ds = synthesize_campaign(11, &params).unwrap();
        let trained = train(
            &ds.train,
            FeatureIndexer::new(12).unwrap(),
            &TrainConfig { epochs: 2, k: 4, ..TrainConfig::default() },
        )
        .unwrap();
        (ds, trained.model)
    }

    #[test]
    fn zero_stub_matches_fixed_lambda_step_for_step() {
        let (ds, model) = small_campaign();
        let lambda = 30_000.0;
        let mut agent = AgentBidder::new(
            "agent",
            Box::new(StubBackend::zero()),
            TemplateSet::default(),
            AgentConfig::default(),
        );
        for day in &ds.test_days {
            let budget = day.cost / 8;
            let fixed_report =
                run_day(day, &model, lambda, budget, &mut FixedLambdaBidder::new(lambda)).unwrap();
            let agent_report = run_day(day, &model, lambda, budget, &mut agent).unwrap();
            assert_eq!(agent_report, fixed_report);
        }
    }

    #[test]
    fn one_day_produces_full_memory_and_transcript() {
        let (ds, model) = small_campaign();
        let mut agent = AgentBidder::new(
            "agent",
            Box::new(StubBackend::pacing()),
            TemplateSet::default(),
            AgentConfig::default(),
        );
        let day = &ds.test_days[0];
        run_day(day, &model, 30_000.0, day.cost / 8, &mut agent).unwrap();
        let t = day.steps.len();
        assert_eq!(agent.memory().bid.len(), t);
        assert_eq!(agent.memory().env.len(), t);
        assert_eq!(agent.memory().reflections.len(), 3);
        let events = agent.transcript();
        assert_eq!(events.len(), t + 1);
        for event in &events[..t] {
            match event {
                TranscriptEvent::Step(s) => {
                    assert_eq!(s.calls.len(), 5, "3 summaries + insight + act");
                    assert_eq!(s.insights.len(), 10);
                    assert!(!s.fallback);
                    assert_eq!(s.lambda, s.lambda_base * (1.0 + s.action.adjustment));
                }
                other => panic!("expected step transcript, got {other:?}"),
            }
        }
        match &events[t] {
            TranscriptEvent::EndOfDay(r) => {
                assert_eq!(r.reflections.len(), 3);
                assert!(r.degraded.is_empty());
            }
            other => panic!("expected end-of-day transcript, got {other:?}"),
        }
    }

    struct Garbage;
    impl LlmBackend for Garbage {
        fn name(&self) -> String {
            "garbage".into()
        }
        fn complete(&mut self, _req: &CompletionRequest) -> Result<Completion, BackendError> {
            Ok(Completion { text: "not json at all".into(), raw_request: None, raw_response: None })
        }
    }

    #[test]
    fn garbage_backend_degrades_to_zero_adjustment() {
        let (ds, model) = small_campaign();
        let lambda = 30_000.0;
        let mut agent = AgentBidder::new(
            "agent",
            Box::new(Garbage),
            TemplateSet::default(),
            AgentConfig::default(),
        );
        let day = &ds.test_days[0];
        let report = run_day(day, &model, lambda, day.cost / 8, &mut agent).unwrap();
        let fixed =
            run_day(day, &model, lambda, day.cost / 8, &mut FixedLambdaBidder::new(lambda))
                .unwrap();
        assert_eq!(report, fixed, "fallback adjustment 0 bids like the base scale");
        for event in agent.transcript() {
            match event {
                TranscriptEvent::Step(s) => {
                    assert!(s.fallback && s.degraded_summarize && s.degraded_insight);
                    assert_eq!(s.action.adjustment, 0.0);
                    assert_eq!(s.action.reason, FALLBACK_REASON);
                    // Every stage exhausted 1 + retries attempts.
                    assert_eq!(s.calls.len(), 5 * 3);
                }
                TranscriptEvent::EndOfDay(r) => {
                    assert_eq!(r.degraded.len(), 3);
                }
            }
        }
    }

    struct FlakyOnce {
        failed: bool,
        inner: StubBackend,
    }
    impl LlmBackend for FlakyOnce {
        fn name(&self) -> String {
            "flaky".into()
        }
        fn complete(&mut self, req: &CompletionRequest) -> Result<Completion, BackendError> {
            if !self.failed {
                self.failed = true;
                return Err(BackendError::Transport("connection reset".into()));
            }
            self.inner.complete(req)
        }
    }

    #[test]
    fn transient_failure_retries_with_reminder() {
        let mut agent = AgentBidder::new(
            "agent",
            Box::new(FlakyOnce { failed: false, inner: StubBackend::zero() }),
            TemplateSet::default(),
            AgentConfig::default(),
        );
        let state = EnvState::new(0, 24, 1000, 20.0);
        let ctx = StepContext { day_index: 0, step_index: 0, steps_per_day: 24, pctrs: &[] };
        let decision = agent.decide(&state, &ctx).unwrap();
        assert_eq!(decision.lambda, 20.0);
        let TranscriptEvent::Step(step) = &agent.transcript()[0] else { panic!() };
        assert_eq!(step.calls.len(), 6, "one extra attempt on the first stage");
        assert!(step.calls[0].error.is_some());
        assert_eq!(step.calls[0].attempt, 1);
        assert_eq!(step.calls[1].attempt, 2);
        assert!(step.calls[1].prompt.ends_with(REMINDER));
        assert!(!step.degraded_summarize);
    }

    #[test]
    fn unbound_template_placeholder_aborts_the_step() {
        let mut templates = TemplateSet::default();
        templates.sum = templates::Template::new("sum", "broken {nonexistent_var}");
        let mut agent = AgentBidder::new(
            "agent",
            Box::new(StubBackend::zero()),
            templates,
            AgentConfig::default(),
        );
        let state = EnvState::new(0, 24, 1000, 20.0);
        let ctx = StepContext { day_index: 0, step_index: 0, steps_per_day: 24, pctrs: &[] };
        assert!(matches!(agent.decide(&state, &ctx), Err(BidderError::Template(_))));
    }

    #[test]
    fn reflections_feed_the_next_day() {
        let (ds, model) = small_campaign();
        let mut agent = AgentBidder::new(
            "agent",
            Box::new(StubBackend::zero()),
            TemplateSet::default(),
            AgentConfig::default(),
        );
        run_day(&ds.test_days[0], &model, 30_000.0, ds.test_days[0].cost / 8, &mut agent).unwrap();
        run_day(&ds.test_days[1], &model, 30_000.0, ds.test_days[1].cost / 8, &mut agent).unwrap();
        let day1 = ds.test_days[1].day_index;
        let events = agent.take_transcript();
        // The first step of day 1 must see day 0's reflections in the
        // summarize prompt for the ref store.
        let first_day1_step = events
            .iter()
            .find_map(|e| match e {
                TranscriptEvent::Step(s) if s.day == day1 && s.step == 0 => Some(s),
                _ => None,
            })
            .expect("day-1 step transcript");
        let ref_call = first_day1_step
            .calls
            .iter()
            .find(|c| matches!(c.stage, Stage::Summarize { kind: MemoryKind::Ref }))
            .expect("ref summarize call");
        assert!(ref_call.prompt.contains(&format!("day {} [bid]", day1 - 1)));
    }
}
