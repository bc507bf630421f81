//! Labeler contracts against a local chat-completion stand-in.

mod common;

use std::time::{Duration, Instant};

use adaptive_vmc::env::EpisodeSummary;
use adaptive_vmc::semantic::{
    chat_completion_content, parse_label_object, raise_weights, rule_label, GuidanceConfig, LabelSource, Labeler,
    RemoteSettings, RuleThresholds, ShapingWeights,
};
use common::{completion, MockServer, Reply};
use proptest::prelude::*;

fn summary(success: bool, peak: f64, osc: f64, reach: f64) -> EpisodeSummary {
    EpisodeSummary {
        steps: 100,
        final_error: if success { 0.05 } else { 0.4 },
        reach_time: reach,
        peak_f_rep: peak,
        mean_f_rep: peak / 4.0,
        torque_energy: 10.0,
        oscillation: osc,
        success,
        fault: false,
    }
}

fn remote(url: &str, retries: u32) -> Labeler {
    let settings = RemoteSettings {
        timeout_s: 0.5,
        retries,
        ..RemoteSettings::new(url)
    };
    Labeler::remote(settings, RuleThresholds::default(), 0.12)
}

#[test]
fn rules_follow_the_thresholds() {
    let th = RuleThresholds::default();
    let calm = rule_label(&summary(true, 10.0, 0.1, 0.5), &th);
    assert!(!calm.any());
    let l = rule_label(&summary(true, 80.0, 0.5, 1.5), &th);
    assert_eq!(l.flags(), [true, true, true]);
    assert!(rule_label(&summary(false, 0.0, 0.0, 0.0), &th).inefficient);
}

#[test]
fn well_formed_replies_are_taken_verbatim() {
    let server = MockServer::start(Reply::Content(
        r#"{"rigid":0,"unsafe":1,"inefficient":1,"rationale":"close to the obstacle"}"#.into(),
    ));
    let (labels, source) = remote(&server.url, 0).label(&summary(true, 0.0, 0.0, 0.1));
    assert_eq!(source, LabelSource::Remote);
    assert_eq!(labels.flags(), [false, true, true]);
    assert_eq!(labels.rationale, "close to the obstacle");
    assert_eq!(server.hits(), 1);
}

#[test]
fn failures_fall_back_to_the_rules() {
    let s = summary(true, 80.0, 0.0, 0.2);
    let expected = rule_label(&s, &RuleThresholds::default());
    for reply in [
        Reply::Raw("{}".into()),
        Reply::Raw("<html>".into()),
        Reply::Content("the episode looks fine".into()),
        Reply::Content(r#"{"rigid":1,"unsafe":0,"inefficient":0}"#.into()),
        Reply::Content(r#"{"rigid":1,"unsafe":0,"inefficient":0,"rationale":"x","extra":1}"#.into()),
        Reply::Status(503),
    ] {
        let server = MockServer::start(reply.clone());
        let (labels, source) = remote(&server.url, 0).label(&s);
        assert!(matches!(source, LabelSource::Fallback(_)), "{reply:?}");
        assert_eq!(labels, expected);
    }
}

#[test]
fn retries_are_bounded() {
    let server = MockServer::start(Reply::Status(500));
    let (_, source) = remote(&server.url, 2).label(&summary(true, 0.0, 0.0, 0.1));
    assert!(matches!(source, LabelSource::Fallback(ref r) if r.contains("500")));
    assert_eq!(server.hits(), 3);
}

#[test]
fn a_stalled_endpoint_times_out() {
    let server = MockServer::start(Reply::Stall(Duration::from_secs(5)));
    let t0 = Instant::now();
    let (_, source) = remote(&server.url, 0).label(&summary(true, 0.0, 0.0, 0.1));
    assert!(matches!(source, LabelSource::Fallback(_)));
    assert!(t0.elapsed() < Duration::from_secs(3));
}

#[test]
fn unreachable_endpoint_falls_back() {
    let (_, source) = remote("http://127.0.0.1:9/v1/chat/completions", 0).label(&summary(true, 0.0, 0.0, 0.1));
    assert!(matches!(source, LabelSource::Fallback(_)));
}

#[test]
fn completion_envelope_is_unwrapped() {
    let body = completion("{\"a\":1}");
    assert_eq!(chat_completion_content(&body).unwrap(), "{\"a\":1}");
    assert!(chat_completion_content("{\"choices\":[]}").is_err());
}

#[test]
fn prompt_carries_the_episode_statistics() {
    let l = Labeler::rules(RuleThresholds::default(), 0.12);
    let p = l.render_label_prompt(&summary(false, 42.5, 0.25, 0.9));
    assert!(p.contains("42.5"));
    assert!(!p.contains("{{"));
}

proptest! {
    #[test]
    fn label_parser_accepts_exactly_binary_flags(r in 0u8..4, u in 0u8..4, i in 0u8..4) {
        let text = format!(r#"{{"rigid":{r},"unsafe":{u},"inefficient":{i},"rationale":"ok"}}"#);
        let parsed = parse_label_object(&text);
        prop_assert_eq!(parsed.is_ok(), r < 2 && u < 2 && i < 2);
        if let Ok(l) = parsed {
            prop_assert_eq!(l.flags(), [r == 1, u == 1, i == 1]);
        }
    }

    #[test]
    fn raised_weights_grow_and_respect_the_cap(
        w in prop::array::uniform3(0.0f64..1.0),
        raise in prop::array::uniform3(any::<bool>()),
    ) {
        let cfg = GuidanceConfig::default();
        let old = ShapingWeights { lambda_rigid: w[0], lambda_unsafe: w[1], lambda_ineff: w[2] };
        let new = raise_weights(&old, raise, &cfg);
        for k in 0..3 {
            let (a, b) = (old.as_array()[k], new.as_array()[k]);
            if raise[k] {
                prop_assert!(b >= a && b <= cfg.cap.max(a));
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }
}
