//! Performance oracle: coherence and style scores for an episode, the
//! hand-specific modulation factors, and the per-hand oracle rewards.
//!
//! Two oracles are provided. [`ScriptedOracle`] maps episode statistics to
//! scores with fixed formulas. [`HttpOracle`] posts the statistics and a
//! rendered prompt to a JSON endpoint and falls back to the scripted oracle
//! on any transport or parse failure.

use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::KeyFrame;
use crate::metrics::{frame_prf, onset_jitter_s, tempo_deviation, MetricsError, Prf};

/// Weight of coherence in the left-hand modulation factor.
pub const LAMBDA_LEFT: f64 = 0.8;
/// Weight of coherence in the right-hand modulation factor.
pub const LAMBDA_RIGHT: f64 = 0.2;
/// Style deviation at which the scripted style score reaches 0.
pub const STYLE_DEV_SCALE_M: f64 = 0.05;
/// Penalty per second of onset jitter in the scripted coherence score.
pub const JITTER_PENALTY_PER_S: f64 = 2.0;
pub const DEFAULT_TIMEOUT_S: f64 = 10.0;
pub const DEFAULT_RETRIES: u32 = 1;

pub const ENV_ORACLE_URL: &str = "PIANIST_ORACLE_URL";
pub const ENV_ORACLE_AUTH: &str = "PIANIST_ORACLE_AUTH";
pub const ENV_ORACLE_TIMEOUT_S: &str = "PIANIST_ORACLE_TIMEOUT_S";

/// Episode statistics presented to an oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    pub song: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean absolute tempo deviation, as a fraction.
    pub tempo_dev: f64,
    /// Mean fingertip distance from the reference, per hand, in metres.
    pub style_dev_left_m: f64,
    pub style_dev_right_m: f64,
    /// Mean absolute onset offset, in seconds.
    pub timing_jitter_s: f64,
}

impl PerformanceSummary {
    /// Statistics of a played episode against its goal.
    pub fn from_episode(
        song: impl Into<String>,
        goal: &[KeyFrame],
        pressed: &[KeyFrame],
        control_rate_hz: f64,
        style_dev_m: [f64; 2],
    ) -> Result<Self, MetricsError> {
        let prf: Prf = frame_prf(goal, pressed)?;
        Ok(PerformanceSummary {
            song: song.into(),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            tempo_dev: tempo_deviation(goal, pressed),
            style_dev_left_m: style_dev_m[0],
            style_dev_right_m: style_dev_m[1],
            timing_jitter_s: onset_jitter_s(goal, pressed, control_rate_hz),
        })
    }

    pub fn style_dev_m(&self) -> f64 {
        0.5 * (self.style_dev_left_m + self.style_dev_right_m)
    }
}

/// Coherence and style scores with the derived modulation and combined score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    pub s_coh: f64,
    pub s_sty: f64,
    pub eta_left: f64,
    pub eta_right: f64,
    pub s_llm: f64,
}

impl OracleScores {
    /// Clamps both scores to `[0, 1]` and derives the remaining fields.
    pub fn new(s_coh: f64, s_sty: f64) -> Self {
        let (s_coh, s_sty) = (clamp01(s_coh), clamp01(s_sty));
        let (eta_left, eta_right) = modulation(s_coh, s_sty);
        OracleScores {
            s_coh,
            s_sty,
            eta_left,
            eta_right,
            s_llm: 0.5 * (s_coh + s_sty),
        }
    }
}

/// Result of one oracle query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub scores: OracleScores,
    /// Set when the scores come from the scripted fallback of a remote oracle.
    pub fallback: bool,
}

fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `eta = lambda * s_coh + (1 - lambda) * s_sty` for each hand.
pub fn modulation(s_coh: f64, s_sty: f64) -> (f64, f64) {
    (
        LAMBDA_LEFT * s_coh + (1.0 - LAMBDA_LEFT) * s_sty,
        LAMBDA_RIGHT * s_coh + (1.0 - LAMBDA_RIGHT) * s_sty,
    )
}

/// `(S_LLM * eta_left, S_LLM * eta_right)`.
pub fn hand_rewards(scores: &OracleScores) -> (f64, f64) {
    (scores.s_llm * scores.eta_left, scores.s_llm * scores.eta_right)
}

/// `(clamp(F1 - 2 * jitter), clamp(1 - style_dev / 0.05 m))`.
pub fn scripted_oracle(summary: &PerformanceSummary) -> (f64, f64) {
    (
        clamp01(summary.f1 - JITTER_PENALTY_PER_S * summary.timing_jitter_s),
        clamp01(1.0 - summary.style_dev_m() / STYLE_DEV_SCALE_M),
    )
}

pub trait Oracle {
    fn evaluate(&self, summary: &PerformanceSummary) -> OracleOutcome;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedOracle;

impl Oracle for ScriptedOracle {
    fn evaluate(&self, summary: &PerformanceSummary) -> OracleOutcome {
        let (c, s) = scripted_oracle(summary);
        OracleOutcome {
            scores: OracleScores::new(c, s),
            fallback: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle request timed out")]
    Timeout,
    #[error("oracle transport error: {0}")]
    Transport(String),
    #[error("malformed oracle response: {0}")]
    MalformedResponse(String),
    #[error("invalid oracle configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpOracleConfig {
    pub url: String,
    /// Full `Authorization` header value, if any.
    pub auth_header: Option<String>,
    pub timeout_s: f64,
    /// Additional attempts after the first failure.
    pub retries: u32,
}

impl HttpOracleConfig {
    pub fn new(url: impl Into<String>) -> Self {
        HttpOracleConfig {
            url: url.into(),
            auth_header: None,
            timeout_s: DEFAULT_TIMEOUT_S,
            retries: DEFAULT_RETRIES,
        }
    }

    /// Reads the endpoint from `PIANIST_ORACLE_URL`, with optional
    /// `PIANIST_ORACLE_AUTH` and `PIANIST_ORACLE_TIMEOUT_S`.
    pub fn from_env() -> Result<Self, OracleError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, OracleError> {
        let url = get(ENV_ORACLE_URL).ok_or_else(|| OracleError::Config(format!("{ENV_ORACLE_URL} is not set")))?;
        let mut cfg = HttpOracleConfig::new(url);
        cfg.auth_header = get(ENV_ORACLE_AUTH);
        if let Some(t) = get(ENV_ORACLE_TIMEOUT_S) {
            cfg.timeout_s = t
                .parse::<f64>()
                .ok()
                .filter(|v| *v > 0.0 && v.is_finite())
                .ok_or_else(|| OracleError::Config(format!("{ENV_ORACLE_TIMEOUT_S}={t} is not a positive number")))?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct RequestStats {
    f1: f64,
    timing_jitter_s: f64,
    style_dev_m: f64,
    tempo_dev: f64,
}

#[derive(Debug, Serialize)]
struct OracleRequest<'a> {
    song: &'a str,
    stats: RequestStats,
    prompt: String,
}

#[derive(Debug, Deserialize)]
struct OracleResponse {
    coherence: f64,
    style: f64,
}

/// Natural-language request sent alongside the statistics.
pub fn render_prompt(summary: &PerformanceSummary) -> String {
    format!(
        "You are judging a robot piano performance of \"{song}\".\n\
         Frame-level F1: {f1:.3} (precision {p:.3}, recall {r:.3}).\n\
         Mean onset timing jitter: {j:.3} s. Mean tempo deviation: {t:.1}%.\n\
         Mean fingertip deviation from the reference motion: left {sl:.4} m, right {sr:.4} m.\n\
         Rate the overall musical coherence and the stylistic expressiveness, each from 0 to 1.\n\
         Reply with JSON only: {{\"coherence\": <number>, \"style\": <number>}}.",
        song = summary.song,
        f1 = summary.f1,
        p = summary.precision,
        r = summary.recall,
        j = summary.timing_jitter_s,
        t = 100.0 * summary.tempo_dev,
        sl = summary.style_dev_left_m,
        sr = summary.style_dev_right_m,
    )
}

/// Oracle backed by a remote JSON endpoint.
#[derive(Debug, Clone)]
pub struct HttpOracle {
    config: HttpOracleConfig,
    agent: ureq::Agent,
}

impl HttpOracle {
    pub fn new(config: HttpOracleConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .build()
            .into();
        HttpOracle { config, agent }
    }

    pub fn config(&self) -> &HttpOracleConfig {
        &self.config
    }

    /// One round trip; returns the raw (unclamped) `(coherence, style)`.
    pub fn request(&self, summary: &PerformanceSummary) -> Result<(f64, f64), OracleError> {
        let body = OracleRequest {
            song: &summary.song,
            stats: RequestStats {
                f1: summary.f1,
                timing_jitter_s: summary.timing_jitter_s,
                style_dev_m: summary.style_dev_m(),
                tempo_dev: summary.tempo_dev,
            },
            prompt: render_prompt(summary),
        };
        let mut req = self.agent.post(&self.config.url);
        if let Some(auth) = &self.config.auth_header {
            req = req.header("Authorization", auth);
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => OracleError::Timeout,
            other => OracleError::Transport(other.to_string()),
        })?;
        let parsed: OracleResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| OracleError::MalformedResponse(e.to_string()))?;
        if !parsed.coherence.is_finite() || !parsed.style.is_finite() {
            return Err(OracleError::MalformedResponse("non-finite score".into()));
        }
        Ok((parsed.coherence, parsed.style))
    }
}

impl Oracle for HttpOracle {
    fn evaluate(&self, summary: &PerformanceSummary) -> OracleOutcome {
        let mut last = None;
        for _ in 0..=self.config.retries {
            match self.request(summary) {
                Ok((c, s)) => {
                    return OracleOutcome {
                        scores: OracleScores::new(c, s),
                        fallback: false,
                    }
                }
                Err(e) => last = Some(e),
            }
        }
        if let Some(e) = last {
            warn!("oracle request for `{}` failed, using scripted scores: {e}", summary.song);
        }
        OracleOutcome {
            fallback: true,
            ..ScriptedOracle.evaluate(summary)
        }
    }
}

/// Oracle chosen at run time.
#[derive(Debug, Clone)]
pub enum OracleKind {
    Scripted(ScriptedOracle),
    Http(HttpOracle),
}

impl Oracle for OracleKind {
    fn evaluate(&self, summary: &PerformanceSummary) -> OracleOutcome {
        match self {
            OracleKind::Scripted(o) => o.evaluate(summary),
            OracleKind::Http(o) => o.evaluate(summary),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(f1: f64, jitter: f64, dev: f64) -> PerformanceSummary {
        PerformanceSummary {
            song: "toy".into(),
            precision: f1,
            recall: f1,
            f1,
            tempo_dev: 0.0,
            style_dev_left_m: dev,
            style_dev_right_m: dev,
            timing_jitter_s: jitter,
        }
    }

    #[test]
    fn scripted_cases() {
        assert_eq!(scripted_oracle(&summary(1.0, 0.0, 0.0)), (1.0, 1.0));
        assert_eq!(scripted_oracle(&summary(0.0, 0.3, 0.0)).0, 0.0);
        let (c, s) = scripted_oracle(&summary(0.8, 0.05, 0.025));
        assert!((c - 0.7).abs() < 1e-12 && (s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn modulation_cases() {
        assert_eq!(modulation(1.0, 1.0), (1.0, 1.0));
        let (l, r) = modulation(1.0, 0.0);
        assert!((l - 0.8).abs() < 1e-15 && (r - 0.2).abs() < 1e-15);
        assert_eq!(modulation(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn hand_reward_cases() {
        assert_eq!(hand_rewards(&OracleScores::new(1.0, 1.0)), (1.0, 1.0));
        let (l, r) = hand_rewards(&OracleScores::new(1.0, 0.0));
        assert!((l - 0.4).abs() < 1e-15 && (r - 0.1).abs() < 1e-15);
        assert_eq!(hand_rewards(&OracleScores::new(0.0, 0.0)), (0.0, 0.0));
    }

    #[test]
    fn scores_are_clamped() {
        let s = OracleScores::new(1.7, -0.2);
        assert_eq!((s.s_coh, s.s_sty), (1.0, 0.0));
        assert_eq!(OracleScores::new(f64::NAN, 0.5).s_coh, 0.0);
    }

    #[test]
    fn env_config() {
        let vars = |k: &str| match k {
            ENV_ORACLE_URL => Some("http://127.0.0.1:9/x".to_string()),
            ENV_ORACLE_TIMEOUT_S => Some("2.5".to_string()),
            _ => None,
        };
        let cfg = HttpOracleConfig::from_lookup(vars).unwrap();
        assert_eq!(cfg.timeout_s, 2.5);
        assert_eq!(cfg.retries, 1);
        assert!(HttpOracleConfig::from_lookup(|_| None).is_err());
        let bad = |k: &str| (k != ENV_ORACLE_AUTH).then(|| "abc".to_string());
        assert!(HttpOracleConfig::from_lookup(bad).is_err());
    }

    #[test]
    fn prompt_mentions_song_and_format() {
        let p = render_prompt(&summary(0.5, 0.0, 0.0));
        assert!(p.contains("\"toy\"") && p.contains("\"coherence\""));
    }
}
