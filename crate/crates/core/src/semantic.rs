//! Semantic reward shaping.
//!
//! Each finished episode is summarised and labelled `rigid`, `unsafe` and/or
//! `inefficient`, either by fixed rules or by a remote chat-completion model.
//! Active labels subtract their weights from every step reward of that
//! episode. At configured iterations a guidance stage raises the weight of
//! labels that keep recurring.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::env::EpisodeSummary;
use crate::error::{Error, Result};

pub const LABELER_PROMPT: &str = include_str!("../assets/prompts/labeler.txt");
pub const GUIDANCE_PROMPT: &str = include_str!("../assets/prompts/guidance.txt");

pub const ENV_ENDPOINT: &str = "AVMC_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "AVMC_LLM_API_KEY";
pub const ENV_MODEL: &str = "AVMC_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SemanticLabels {
    pub rigid: bool,
    #[serde(rename = "unsafe")]
    pub unsafe_: bool,
    pub inefficient: bool,
    pub rationale: String,
}

impl SemanticLabels {
    pub fn any(&self) -> bool {
        self.rigid || self.unsafe_ || self.inefficient
    }

    pub fn flags(&self) -> [bool; 3] {
        [self.rigid, self.unsafe_, self.inefficient]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingWeights {
    pub lambda_rigid: f64,
    pub lambda_unsafe: f64,
    pub lambda_ineff: f64,
}

impl Default for ShapingWeights {
    fn default() -> Self {
        Self {
            lambda_rigid: 0.01,
            lambda_unsafe: 0.01,
            lambda_ineff: 0.01,
        }
    }
}

impl ShapingWeights {
    pub fn zero() -> Self {
        Self {
            lambda_rigid: 0.0,
            lambda_unsafe: 0.0,
            lambda_ineff: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda_rigid, self.lambda_unsafe, self.lambda_ineff]
    }

    fn from_array(a: [f64; 3]) -> Self {
        Self {
            lambda_rigid: a[0],
            lambda_unsafe: a[1],
            lambda_ineff: a[2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|&l| l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::config("semantic.shaping", "weights must be non-negative"))
        }
    }

    /// Per-step penalty implied by `labels`.
    pub fn penalty(&self, labels: &SemanticLabels) -> f64 {
        let mut p = 0.0;
        if labels.rigid {
            p += self.lambda_rigid;
        }
        if labels.unsafe_ {
            p += self.lambda_unsafe;
        }
        if labels.inefficient {
            p += self.lambda_ineff;
        }
        p
    }
}

/// `R - λ_rigid·1{rigid} - λ_unsafe·1{unsafe} - λ_ineff·1{inefficient}`.
pub fn shaped_reward(reward: f64, labels: &SemanticLabels, weights: &ShapingWeights) -> f64 {
    reward - weights.penalty(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleThresholds {
    /// Sign changes per step.
    pub oscillation_max: f64,
    pub force_max_n: f64,
    pub reach_time_max_s: f64,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        Self {
            oscillation_max: 0.3,
            force_max_n: 60.0,
            reach_time_max_s: 1.0,
        }
    }
}

pub fn rule_label(summary: &EpisodeSummary, th: &RuleThresholds) -> SemanticLabels {
    let rigid = summary.oscillation > th.oscillation_max;
    let unsafe_ = summary.peak_f_rep > th.force_max_n;
    let inefficient = summary.reach_time > th.reach_time_max_s || !summary.success;
    let mut reasons = Vec::new();
    if rigid {
        reasons.push(format!("oscillation {:.3} > {}", summary.oscillation, th.oscillation_max));
    }
    if unsafe_ {
        reasons.push(format!("peak repulsive force {:.1} N > {} N", summary.peak_f_rep, th.force_max_n));
    }
    if inefficient {
        if summary.success {
            reasons.push(format!("reach time {:.3} s > {} s", summary.reach_time, th.reach_time_max_s));
        } else {
            reasons.push(format!("target not reached (final error {:.3} m)", summary.final_error));
        }
    }
    SemanticLabels {
        rigid,
        unsafe_,
        inefficient,
        rationale: if reasons.is_empty() {
            "smooth, contact-free and timely".into()
        } else {
            reasons.join("; ")
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSettings {
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Also ask the model for guidance-stage weight decisions.
    #[serde(default)]
    pub remote_guidance: bool,
}

fn default_model() -> String {
    "gpt-4o".into()
}
fn default_temperature() -> f64 {
    0.1
}
fn default_max_tokens() -> u32 {
    300
}
fn default_timeout() -> f64 {
    10.0
}
fn default_retries() -> u32 {
    1
}

impl RemoteSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: default_model(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            timeout_s: default_timeout(),
            retries: default_retries(),
            remote_guidance: false,
        }
    }

    /// Build settings from `AVMC_LLM_ENDPOINT` / `AVMC_LLM_MODEL`, falling
    /// back to `base` for anything unset.
    pub fn from_env(base: Option<&RemoteSettings>) -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().or_else(|| base.map(|b| b.endpoint.clone()));
        let endpoint = endpoint.ok_or_else(|| {
            Error::config("labeler.remote.endpoint", format!("remote labeler needs an endpoint (set {ENV_ENDPOINT})"))
        })?;
        let mut s = base.cloned().unwrap_or_else(|| RemoteSettings::new(endpoint.clone()));
        s.endpoint = endpoint;
        if let Ok(m) = std::env::var(ENV_MODEL) {
            s.model = m;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelerBackend {
    Rules,
    Remote(RemoteSettings),
}

/// Where a label set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "reason")]
pub enum LabelSource {
    Rules,
    Remote,
    Fallback(String),
}

#[derive(Debug, Clone)]
pub struct Labeler {
    pub backend: LabelerBackend,
    pub thresholds: RuleThresholds,
    pub success_threshold: f64,
    labeler_prompt: String,
    guidance_prompt: String,
    agent: Option<ureq::Agent>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelReply {
    rigid: u8,
    #[serde(rename = "unsafe")]
    unsafe_: u8,
    inefficient: u8,
    rationale: String,
}

fn binary(v: u8, key: &str) -> std::result::Result<bool, String> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(format!("`{key}` must be 0 or 1, got {other}")),
    }
}

/// Parse the strict label object `{"rigid":0|1,"unsafe":0|1,"inefficient":0|1,"rationale":string}`.
pub fn parse_label_object(text: &str) -> std::result::Result<SemanticLabels, String> {
    let reply: LabelReply = serde_json::from_str(text.trim()).map_err(|e| format!("malformed label JSON: {e}"))?;
    Ok(SemanticLabels {
        rigid: binary(reply.rigid, "rigid")?,
        unsafe_: binary(reply.unsafe_, "unsafe")?,
        inefficient: binary(reply.inefficient, "inefficient")?,
        rationale: reply.rationale,
    })
}

/// Extract `choices[0].message.content` from a chat-completion response.
pub fn chat_completion_content(body: &str) -> std::result::Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| "response lacks choices[0].message.content".to_string())
}

fn render(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// Label rates over a window of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelIncidence {
    pub episodes: usize,
    pub rigid: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_: f64,
    pub inefficient: f64,
}

impl LabelIncidence {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a SemanticLabels>) -> Self {
        let mut n = 0usize;
        let mut counts = [0usize; 3];
        for l in labels {
            n += 1;
            for (c, f) in counts.iter_mut().zip(l.flags()) {
                *c += f as usize;
            }
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            episodes: n,
            rigid: counts[0] as f64 / n as f64,
            unsafe_: counts[1] as f64 / n as f64,
            inefficient: counts[2] as f64 / n as f64,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.rigid, self.unsafe_, self.inefficient]
    }
}

impl Labeler {
    pub fn rules(thresholds: RuleThresholds, success_threshold: f64) -> Self {
        Self {
            backend: LabelerBackend::Rules,
            thresholds,
            success_threshold,
            labeler_prompt: LABELER_PROMPT.to_string(),
            guidance_prompt: GUIDANCE_PROMPT.to_string(),
            agent: None,
        }
    }

    pub fn remote(settings: RemoteSettings, thresholds: RuleThresholds, success_threshold: f64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(settings.timeout_s.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            backend: LabelerBackend::Remote(settings),
            thresholds,
            success_threshold,
            labeler_prompt: LABELER_PROMPT.to_string(),
            guidance_prompt: GUIDANCE_PROMPT.to_string(),
            agent: Some(agent),
        }
    }

    pub fn with_prompts(mut self, labeler: String, guidance: String) -> Self {
        self.labeler_prompt = labeler;
        self.guidance_prompt = guidance;
        self
    }

    pub fn render_label_prompt(&self, s: &EpisodeSummary) -> String {
        let th = &self.thresholds;
        render(
            &self.labeler_prompt,
            &[
                ("oscillation_max", th.oscillation_max.to_string()),
                ("force_max", th.force_max_n.to_string()),
                ("reach_time_max", th.reach_time_max_s.to_string()),
                ("final_error", format!("{:.4}", s.final_error)),
                ("success_threshold", self.success_threshold.to_string()),
                ("success", s.success.to_string()),
                ("reach_time", format!("{:.3}", s.reach_time)),
                ("peak_f_rep", format!("{:.2}", s.peak_f_rep)),
                ("mean_f_rep", format!("{:.2}", s.mean_f_rep)),
                ("torque_energy", format!("{:.2}", s.torque_energy)),
                ("oscillation", format!("{:.3}", s.oscillation)),
            ],
        )
    }

    /// Label one episode. Remote failures fall back to the rules and are
    /// reported in the returned source.
    pub fn label(&self, summary: &EpisodeSummary) -> (SemanticLabels, LabelSource) {
        match &self.backend {
            LabelerBackend::Rules => (rule_label(summary, &self.thresholds), LabelSource::Rules),
            LabelerBackend::Remote(settings) => match self.ask(settings, self.render_label_prompt(summary)) {
                Ok(labels) => (labels, LabelSource::Remote),
                Err(reason) => {
                    log::warn!("remote labeler failed ({reason}); using rule-based labels");
                    (rule_label(summary, &self.thresholds), LabelSource::Fallback(reason))
                }
            },
        }
    }

    /// Which weights to raise at a guidance stage: by rule unless the remote
    /// backend is configured for guidance decisions.
    pub fn guidance_decision(
        &self,
        incidence: &LabelIncidence,
        weights: &ShapingWeights,
        rule: &GuidanceConfig,
    ) -> ([bool; 3], String, LabelSource) {
        let by_rule = || {
            let d = incidence.as_array().map(|r| r > rule.incidence_threshold);
            let names = ["rigid", "unsafe", "inefficient"];
            let raised: Vec<_> = names.iter().zip(d).filter(|(_, f)| *f).map(|(n, _)| *n).collect();
            let why = if raised.is_empty() {
                format!("all incidences at or below {}", rule.incidence_threshold)
            } else {
                format!("incidence above {} for {}", rule.incidence_threshold, raised.join(", "))
            };
            (d, why)
        };
        match &self.backend {
            LabelerBackend::Remote(settings) if settings.remote_guidance => {
                let prompt = render(
                    &self.guidance_prompt,
                    &[
                        ("episodes", incidence.episodes.to_string()),
                        ("rigid_rate", format!("{:.3}", incidence.rigid)),
                        ("unsafe_rate", format!("{:.3}", incidence.unsafe_)),
                        ("inefficient_rate", format!("{:.3}", incidence.inefficient)),
                        ("lambda_rigid", weights.lambda_rigid.to_string()),
                        ("lambda_unsafe", weights.lambda_unsafe.to_string()),
                        ("lambda_ineff", weights.lambda_ineff.to_string()),
                    ],
                );
                match self.ask(settings, prompt) {
                    Ok(l) => (l.flags(), l.rationale, LabelSource::Remote),
                    Err(reason) => {
                        log::warn!("remote guidance failed ({reason}); using rule-based decision");
                        let (d, why) = by_rule();
                        (d, why, LabelSource::Fallback(reason))
                    }
                }
            }
            _ => {
                let (d, why) = by_rule();
                (d, why, LabelSource::Rules)
            }
        }
    }

    fn ask(&self, settings: &RemoteSettings, prompt: String) -> std::result::Result<SemanticLabels, String> {
        let agent = self.agent.as_ref().ok_or("remote agent not initialised")?;
        let body = serde_json::json!({
            "model": settings.model,
            "temperature": settings.temperature,
            "max_tokens": settings.max_tokens,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": "You label robot-control episodes. Reply with strict JSON only."},
                {"role": "user", "content": prompt},
            ],
        });
        let key = std::env::var(ENV_API_KEY).ok();
        let mut last_err = String::new();
        for attempt in 0..=settings.retries {
            let mut req = agent.post(&settings.endpoint).header("Content-Type", "application/json");
            if let Some(k) = &key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            let result = req.send(body.to_string()).map_err(|e| format!("request failed: {e}")).and_then(|mut resp| {
                let status = resp.status().as_u16();
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| format!("reading response failed: {e}"))?;
                if !(200..300).contains(&status) {
                    return Err(format!("HTTP {status}"));
                }
                Ok(text)
            });
            match result.and_then(|text| chat_completion_content(&text)).and_then(|c| parse_label_object(&c)) {
                Ok(labels) => return Ok(labels),
                Err(e) => {
                    log::debug!("remote attempt {} failed: {e}", attempt + 1);
                    last_err = e;
                }
            }
        }
        Err(last_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Iterations between stages; `None` spaces `max_stages` stages evenly
    /// over the run.
    #[serde(default)]
    pub every_n_iterations: Option<usize>,
    pub max_stages: usize,
    pub incidence_threshold: f64,
    pub factor: f64,
    pub cap: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            every_n_iterations: None,
            max_stages: 2,
            incidence_threshold: 0.25,
            factor: 2.0,
            cap: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn period(&self, total_iterations: usize) -> usize {
        self.every_n_iterations
            .unwrap_or_else(|| total_iterations.div_ceil(self.max_stages + 1))
            .max(1)
    }

    /// Whether a stage fires after `completed` iterations.
    pub fn fires(&self, completed: usize, total_iterations: usize, stages_done: usize) -> bool {
        stages_done < self.max_stages && completed > 0 && completed % self.period(total_iterations) == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GuidanceStage {
    pub index: usize,
}

/// One guidance-log entry (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub stage: usize,
    pub iteration: usize,
    pub incidence: LabelIncidence,
    pub old_weights: ShapingWeights,
    pub new_weights: ShapingWeights,
    pub raised: [bool; 3],
    pub source: LabelSource,
    pub rationale: String,
}

/// Multiply the weights of the selected labels by `factor`, capped at `cap`.
pub fn raise_weights(weights: &ShapingWeights, raise: [bool; 3], cfg: &GuidanceConfig) -> ShapingWeights {
    let mut w = weights.as_array();
    for (l, r) in w.iter_mut().zip(raise) {
        if r {
            *l = (*l * cfg.factor).min(cfg.cap.max(*l));
        }
    }
    ShapingWeights::from_array(w)
}

/// Rule-based stage update: raise every label whose incidence exceeds the
/// threshold, advance the stage counter and return the log entry.
pub fn apply_guidance_stage(
    incidence: &LabelIncidence,
    stage: &mut GuidanceStage,
    weights: &ShapingWeights,
    cfg: &GuidanceConfig,
    iteration: usize,
) -> (ShapingWeights, GuidanceRecord) {
    let labeler = Labeler::rules(RuleThresholds::default(), 0.0);
    apply_guidance_stage_with(&labeler, incidence, stage, weights, cfg, iteration)
}

pub fn apply_guidance_stage_with(
    labeler: &Labeler,
    incidence: &LabelIncidence,
    stage: &mut GuidanceStage,
    weights: &ShapingWeights,
    cfg: &GuidanceConfig,
    iteration: usize,
) -> (ShapingWeights, GuidanceRecord) {
    let (raise, rationale, source) = labeler.guidance_decision(incidence, weights, cfg);
    let new_weights = raise_weights(weights, raise, cfg);
    stage.index += 1;
    let record = GuidanceRecord {
        stage: stage.index,
        iteration,
        incidence: *incidence,
        old_weights: *weights,
        new_weights,
        raised: raise,
        source,
        rationale,
    };
    (new_weights, record)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn good_episode() -> EpisodeSummary {
        EpisodeSummary {
            steps: 200,
            final_error: 0.02,
            reach_time: 0.3,
            peak_f_rep: 0.0,
            mean_f_rep: 0.0,
            torque_energy: 1.0,
            oscillation: 0.01,
            success: true,
            fault: false,
        }
    }

    #[test]
    fn rule_labels() {
        let th = RuleThresholds::default();
        let l = rule_label(&good_episode(), &th);
        assert!(!l.any());
        let mut s = good_episode();
        s.peak_f_rep = 90.0;
        let l = rule_label(&s, &th);
        assert!(l.unsafe_ && !l.rigid && !l.inefficient);
        assert_eq!(l, rule_label(&s, &th));
        s.success = false;
        assert!(rule_label(&s, &th).inefficient);
        s.success = true;
        s.reach_time = 1.5;
        s.oscillation = 0.4;
        let l = rule_label(&s, &th);
        assert!(l.inefficient && l.rigid);
    }

    #[test]
    fn shaping_examples() {
        let w = ShapingWeights::default();
        let none = SemanticLabels::default();
        assert_eq!(shaped_reward(-0.05, &none, &w), -0.05);
        let unsafe_only = SemanticLabels {
            unsafe_: true,
            ..Default::default()
        };
        assert!((shaped_reward(-0.05, &unsafe_only, &w) + 0.06).abs() < 1e-15);
    }

    #[test]
    fn strict_label_parsing() {
        let l = parse_label_object(r#"{"rigid":1,"unsafe":0,"inefficient":1,"rationale":"stiff"}"#).unwrap();
        assert!(l.rigid && !l.unsafe_ && l.inefficient);
        assert_eq!(l.rationale, "stiff");
        assert!(parse_label_object(r#"{"rigid":2,"unsafe":0,"inefficient":1,"rationale":""}"#).is_err());
        assert!(parse_label_object(r#"{"rigid":true,"unsafe":0,"inefficient":1,"rationale":""}"#).is_err());
        assert!(parse_label_object(r#"{"rigid":1,"unsafe":0,"rationale":""}"#).is_err());
        assert!(parse_label_object(r#"{"rigid":1,"unsafe":0,"inefficient":0,"rationale":"","x":1}"#).is_err());
        assert!(parse_label_object("```json\n{}\n```").is_err());
    }

    #[test]
    fn guidance_stage_rules() {
        let cfg = GuidanceConfig::default();
        let w = ShapingWeights::default();
        let mut stage = GuidanceStage::default();
        let inc = LabelIncidence {
            episodes: 10,
            rigid: 0.1,
            unsafe_: 0.4,
            inefficient: 0.25,
        };
        let (nw, rec) = apply_guidance_stage(&inc, &mut stage, &w, &cfg, 5);
        assert_eq!(nw.lambda_unsafe, 0.02);
        assert_eq!(nw.lambda_rigid, 0.01);
        assert_eq!(nw.lambda_ineff, 0.01);
        assert_eq!(stage.index, 1);
        assert_eq!(rec.raised, [false, true, false]);

        let calm = LabelIncidence {
            episodes: 10,
            ..Default::default()
        };
        let (same, _) = apply_guidance_stage(&calm, &mut stage, &w, &cfg, 6);
        assert_eq!(same, w);
        assert_eq!(stage.index, 2);
    }

    #[test]
    fn weights_are_capped() {
        let cfg = GuidanceConfig::default();
        let w = ShapingWeights {
            lambda_rigid: 0.08,
            ..Default::default()
        };
        let nw = raise_weights(&w, [true, false, false], &cfg);
        assert_eq!(nw.lambda_rigid, 0.1);
    }

    #[test]
    fn stage_schedule() {
        let cfg = GuidanceConfig::default();
        let mut done = 0;
        let mut fired = Vec::new();
        for k in 1..=147 {
            if cfg.fires(k, 147, done) {
                fired.push(k);
                done += 1;
            }
        }
        assert_eq!(fired, vec![49, 98]);
        assert_eq!(cfg.period(20), 7);
    }

    #[test]
    fn incidence_rates() {
        let a = SemanticLabels {
            rigid: true,
            ..Default::default()
        };
        let b = SemanticLabels::default();
        let inc = LabelIncidence::from_labels([&a, &b, &a, &b]);
        assert_eq!(inc.episodes, 4);
        assert_eq!(inc.rigid, 0.5);
        assert_eq!(inc.unsafe_, 0.0);
    }

    #[test]
    fn prompt_renders_metrics() {
        let l = Labeler::rules(RuleThresholds::default(), 0.12);
        let p = l.render_label_prompt(&good_episode());
        assert!(p.contains("final error: 0.0200 m"));
        assert!(!p.contains("{{"));
    }
}
