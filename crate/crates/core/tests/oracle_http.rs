//! HTTP oracle client against a local mock endpoint, and oracle properties.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use proptest::prelude::*;
use serde_json::Value;

use pianist_core::oracle::*;

fn summary() -> PerformanceSummary {
    PerformanceSummary {
        song: "toy".into(),
        precision: 0.9,
        recall: 0.7,
        f1: 0.8,
        tempo_dev: 0.1,
        style_dev_left_m: 0.02,
        style_dev_right_m: 0.03,
        timing_jitter_s: 0.05,
    }
}

struct Captured {
    auth: Option<String>,
    body: Value,
}

/// Serves `responses.len()` requests, answering each with the given
/// `(status, body)`, and reports what it received.
fn mock(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/judge", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => auth = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Captured {
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn client(url: &str, retries: u32) -> HttpOracle {
    let mut cfg = HttpOracleConfig::new(url);
    cfg.auth_header = Some("Bearer t0k".into());
    cfg.timeout_s = 5.0;
    cfg.retries = retries;
    HttpOracle::new(cfg)
}

#[test]
fn scores_pass_through_with_request_shape() {
    let (url, rx) = mock(vec![(200, r#"{"coherence": 0.9, "style": 0.4}"#.into())]);
    let out = client(&url, 0).evaluate(&summary());
    assert!(!out.fallback);
    assert_eq!((out.scores.s_coh, out.scores.s_sty), (0.9, 0.4));
    let got = rx.recv().unwrap();
    assert_eq!(got.auth.as_deref(), Some("Bearer t0k"));
    assert_eq!(got.body["song"], "toy");
    assert_eq!(got.body["stats"]["f1"], 0.8);
    assert_eq!(got.body["stats"]["style_dev_m"], 0.025);
    assert_eq!(got.body["stats"]["timing_jitter_s"], 0.05);
    assert_eq!(got.body["stats"]["tempo_dev"], 0.1);
    assert!(got.body["prompt"].as_str().unwrap().contains("coherence"));
}

#[test]
fn out_of_range_scores_are_clamped() {
    let (url, _rx) = mock(vec![(200, r#"{"coherence": 1.7, "style": -0.3}"#.into())]);
    let out = client(&url, 0).evaluate(&summary());
    assert_eq!((out.scores.s_coh, out.scores.s_sty), (1.0, 0.0));
}

#[test]
fn one_retry_recovers_from_a_bad_reply() {
    let (url, rx) = mock(vec![
        (200, r#"{"coherence": "high"}"#.into()),
        (200, r#"{"coherence": 0.6, "style": 0.2}"#.into()),
    ]);
    let out = client(&url, 1).evaluate(&summary());
    assert!(!out.fallback);
    assert_eq!(out.scores.s_coh, 0.6);
    assert_eq!(rx.iter().take(2).count(), 2);
}

#[test]
fn failures_fall_back_to_scripted_scores() {
    let scripted = ScriptedOracle.evaluate(&summary()).scores;
    let (url, _rx) = mock(vec![(500, "{}".into()), (200, "not json".into())]);
    let out = client(&url, 1).evaluate(&summary());
    assert!(out.fallback);
    assert_eq!(out.scores, scripted);

    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let dead = format!("http://{}/judge", closed.local_addr().unwrap());
    drop(closed);
    let out = client(&dead, 1).evaluate(&summary());
    assert!(out.fallback);
    assert_eq!(out.scores, scripted);
}

#[test]
fn malformed_reply_is_reported_by_request() {
    let (url, _rx) = mock(vec![(200, r#"{"style": 0.5}"#.into())]);
    assert!(matches!(client(&url, 0).request(&summary()), Err(OracleError::MalformedResponse(_))));
}

proptest! {
    #[test]
    fn hand_rewards_are_bounded(c in 0.0f64..=1.0, s in 0.0f64..=1.0) {
        let (l, r) = hand_rewards(&OracleScores::new(c, s));
        prop_assert!((0.0..=1.0).contains(&l) && (0.0..=1.0).contains(&r));
    }

    #[test]
    fn left_follows_coherence_right_follows_style(c in 0.0f64..=1.0, s in 0.0f64..=1.0, d in 0.0f64..=0.5) {
        let base = hand_rewards(&OracleScores::new(c, s));
        prop_assert!(hand_rewards(&OracleScores::new(c + d, s)).0 >= base.0);
        prop_assert!(hand_rewards(&OracleScores::new(c, s + d)).1 >= base.1);
    }

    #[test]
    fn scripted_oracle_is_deterministic(f1 in 0.0f64..=1.0, j in 0.0f64..0.5, dev in 0.0f64..0.1) {
        let mut s = summary();
        s.f1 = f1;
        s.timing_jitter_s = j;
        s.style_dev_left_m = dev;
        let a = ScriptedOracle.evaluate(&s);
        prop_assert_eq!(a, ScriptedOracle.evaluate(&s));
        prop_assert!(!a.fallback);
    }
}
