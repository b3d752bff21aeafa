//! Binary LLM-judge harness with a pluggable client.
//!
//! Each category fills a prompt template with the reference and generated
//! reports and expects a strict `0`/`1` answer. The mock client scores the
//! same prompts deterministically from rule-based label extraction, so the
//! whole judge path is reproducible offline; the HTTP client speaks a small
//! JSON protocol ({"prompt": ...} → {"text": ...}) configured through the
//! `LLM_ENDPOINT` / `LLM_API_KEY` environment variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::labels::{extract_labels, AbnormalityLexicon, NEGATION_CUES};

/// Abstract completion client: prompt text in, response text out.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Binary judge categories: the four chest report qualities plus the seven
/// rectal findings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeCategory {
    Presence,
    Location,
    Severity,
    Hallucination,
    TumorLocation,
    PeritonealInvolvement,
    TStaging,
    CrmInvolvement,
    AnalSphincterInvolvement,
    MesorectalLymphNodeInvolvement,
    ExtramuralVenousInvasion,
}

impl JudgeCategory {
    pub const CHEST: [JudgeCategory; 4] = [
        JudgeCategory::Presence,
        JudgeCategory::Location,
        JudgeCategory::Severity,
        JudgeCategory::Hallucination,
    ];

    pub const RECTAL: [JudgeCategory; 7] = [
        JudgeCategory::TumorLocation,
        JudgeCategory::PeritonealInvolvement,
        JudgeCategory::TStaging,
        JudgeCategory::CrmInvolvement,
        JudgeCategory::AnalSphincterInvolvement,
        JudgeCategory::MesorectalLymphNodeInvolvement,
        JudgeCategory::ExtramuralVenousInvasion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            JudgeCategory::Presence => "presence",
            JudgeCategory::Location => "location",
            JudgeCategory::Severity => "severity",
            JudgeCategory::Hallucination => "hallucination",
            JudgeCategory::TumorLocation => "tumor_location",
            JudgeCategory::PeritonealInvolvement => "peritoneal_involvement",
            JudgeCategory::TStaging => "t_staging",
            JudgeCategory::CrmInvolvement => "crm_involvement",
            JudgeCategory::AnalSphincterInvolvement => "anal_sphincter_involvement",
            JudgeCategory::MesorectalLymphNodeInvolvement => "mesorectal_lymph_node_involvement",
            JudgeCategory::ExtramuralVenousInvasion => "extramural_venous_invasion",
        }
    }

    fn criterion(self) -> &'static str {
        match self {
            JudgeCategory::Presence => {
                "every abnormal finding stated in the reference report is also stated in the \
                 generated report, with matching positive/negative polarity"
            }
            JudgeCategory::Location => {
                "for every abnormal finding in the reference report, the generated report gives \
                 the same anatomical location"
            }
            JudgeCategory::Severity => {
                "for every abnormal finding in the reference report, the generated report gives \
                 the same severity or measurement"
            }
            JudgeCategory::Hallucination => {
                "the generated report contains no finding that is absent from the reference report"
            }
            JudgeCategory::TumorLocation => {
                "the generated report states the same tumor location (distance from the anal \
                 verge) as the reference report"
            }
            JudgeCategory::PeritonealInvolvement => {
                "the generated report states the same degree of peritoneal involvement as the \
                 reference report"
            }
            JudgeCategory::TStaging => {
                "the generated report assigns the same T stage as the reference report"
            }
            JudgeCategory::CrmInvolvement => {
                "the generated report agrees with the reference report on circumferential \
                 resection margin involvement"
            }
            JudgeCategory::AnalSphincterInvolvement => {
                "the generated report agrees with the reference report on anal sphincter \
                 involvement"
            }
            JudgeCategory::MesorectalLymphNodeInvolvement => {
                "the generated report agrees with the reference report on mesorectal lymph node \
                 involvement"
            }
            JudgeCategory::ExtramuralVenousInvasion => {
                "the generated report agrees with the reference report on extramural venous \
                 invasion"
            }
        }
    }

    /// Keywords the mock uses to locate a rectal finding's sentences.
    fn keywords(self) -> &'static [&'static str] {
        match self {
            JudgeCategory::TumorLocation => &["anal verge", "tumor location"],
            JudgeCategory::PeritonealInvolvement => &["peritoneal", "peritoneum"],
            JudgeCategory::TStaging => &["t1", "t2", "t3", "t4", "t stage", "staging"],
            JudgeCategory::CrmInvolvement => &["resection margin", "crm"],
            JudgeCategory::AnalSphincterInvolvement => &["sphincter"],
            JudgeCategory::MesorectalLymphNodeInvolvement => &["lymph node", "mlni"],
            JudgeCategory::ExtramuralVenousInvasion => &["venous invasion", "emvi"],
            _ => &[],
        }
    }
}

impl std::fmt::Display for JudgeCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const JUDGE_TEMPLATE: &str = "You are an expert radiologist grading a generated radiology report \
against a reference report.\n\nCATEGORY: {category}\nCRITERION: answer 1 if {criterion}; \
answer 0 if the generated report contains any factual error for this category.\n\n\
REFERENCE REPORT:\n{reference}\n\nGENERATED REPORT:\n{generated}\n\n\
Respond with a single character, 0 or 1, and nothing else.";

/// Fill the judge template for one category and report pair.
pub fn build_judge_prompt(category: JudgeCategory, reference: &str, generated: &str) -> String {
    JUDGE_TEMPLATE
        .replace("{category}", category.name())
        .replace("{criterion}", category.criterion())
        .replace("{reference}", reference)
        .replace("{generated}", generated)
}

/// Strict parse of the client's binary verdict.
pub fn parse_binary_verdict(text: &str) -> Result<u8> {
    match text.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse(format!(
            "expected a bare 0 or 1 from the judge, got {other:?}"
        ))),
    }
}

/// Score one report pair on one category through the client.
pub fn judge_evaluate(
    generated: &str,
    reference: &str,
    category: JudgeCategory,
    client: &dyn LlmClient,
) -> Result<u8> {
    let prompt = build_judge_prompt(category, reference, generated);
    let response = client.complete(&prompt)?;
    parse_binary_verdict(&response)
}

// ---- clients ----

/// Test client returning a fixed reply.
pub struct CannedClient {
    reply: String,
}

impl CannedClient {
    pub fn new(reply: impl Into<String>) -> Self {
        CannedClient { reply: reply.into() }
    }
}

impl LlmClient for CannedClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        Ok(self.reply.clone())
    }
}

/// Deterministic stand-in for an external judge.
///
/// The mock re-parses the two reports out of the filled template and scores
/// them with rule-based extraction: label agreement for presence, co-mention
/// agreement for location/severity, no fabricated findings for hallucination,
/// and keyword-sentence agreement for the rectal categories.
pub struct MockJudgeClient {
    lexicon: AbnormalityLexicon,
}

impl MockJudgeClient {
    pub fn new(lexicon: AbnormalityLexicon) -> Self {
        MockJudgeClient { lexicon }
    }

    fn verdict(&self, category: JudgeCategory, reference: &str, generated: &str) -> u8 {
        match category {
            JudgeCategory::Presence => {
                u8::from(extract_labels(generated, &self.lexicon) == extract_labels(reference, &self.lexicon))
            }
            JudgeCategory::Location | JudgeCategory::Severity => {
                let wanted = if category == JudgeCategory::Location { Detail::Location } else { Detail::Size };
                let r = finding_details(reference, &self.lexicon, wanted);
                let g = finding_details(generated, &self.lexicon, wanted);
                u8::from(r.iter().all(|(name, detail)| g.get(name) == Some(detail)))
            }
            JudgeCategory::Hallucination => {
                let r = extract_labels(reference, &self.lexicon);
                let g = extract_labels(generated, &self.lexicon);
                u8::from(g.iter().all(|(name, &gv)| gv == 0 || r[name.as_str()] == 1))
            }
            rectal => {
                let r = keyword_sentences(reference, rectal.keywords());
                let g = keyword_sentences(generated, rectal.keywords());
                u8::from(r == g)
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Detail {
    Location,
    Size,
}

const REGION_WORDS: [&str; 6] = ["left", "right", "upper", "lower", "central", "bilateral"];

/// For each positively mentioned finding: the detail tokens (region words or
/// numeric sizes) sharing a sentence with its trigger.
fn finding_details(
    report: &str,
    lexicon: &AbnormalityLexicon,
    wanted: Detail,
) -> std::collections::BTreeMap<String, Vec<String>> {
    let mut out = std::collections::BTreeMap::new();
    for sentence in report.split(['.', '!', '?']) {
        let tokens: Vec<String> = sentence
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if tokens.iter().any(|t| NEGATION_CUES.contains(&t.as_str())) {
            continue;
        }
        for entry in lexicon.entries() {
            let mentioned = entry.triggers.iter().any(|trig| {
                let phrase: Vec<&str> = trig.split_whitespace().collect();
                tokens
                    .windows(phrase.len().max(1))
                    .any(|w| w.iter().map(String::as_str).eq(phrase.iter().copied()))
            });
            if !mentioned {
                continue;
            }
            let details: Vec<String> = tokens
                .iter()
                .filter(|t| match wanted {
                    Detail::Location => REGION_WORDS.contains(&t.as_str()),
                    Detail::Size => t.chars().all(|c| c.is_ascii_digit()),
                })
                .cloned()
                .collect();
            out.entry(entry.name.clone()).or_insert(details);
        }
    }
    out
}

fn keyword_sentences(report: &str, keywords: &[&str]) -> Vec<String> {
    report
        .split(['.', '!', '?'])
        .map(|s| s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| keywords.iter().any(|k| s.contains(k)))
        .collect()
}

impl LlmClient for MockJudgeClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let category = JudgeCategory::CHEST
            .iter()
            .chain(JudgeCategory::RECTAL.iter())
            .copied()
            .find(|c| prompt.contains(&format!("CATEGORY: {}", c.name())))
            .ok_or_else(|| Error::Parse("mock judge: no category marker in prompt".into()))?;
        let reference = section(prompt, "REFERENCE REPORT:\n", "\n\nGENERATED REPORT:")?;
        let generated = section(prompt, "GENERATED REPORT:\n", "\n\nRespond")?;
        Ok(self.verdict(category, &reference, &generated).to_string())
    }
}

fn section(prompt: &str, start: &str, end: &str) -> Result<String> {
    let s = prompt
        .find(start)
        .ok_or_else(|| Error::Parse(format!("mock judge: missing {start:?}")))?
        + start.len();
    let e = prompt[s..]
        .find(end)
        .ok_or_else(|| Error::Parse(format!("mock judge: missing {end:?}")))?;
    Ok(prompt[s..s + e].to_string())
}

/// HTTP-JSON adapter: POST {"prompt": text}, expect {"text": reply}.
pub struct HttpClient {
    endpoint: String,
    api_key: Option<String>,
    inner: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Result<Self> {
        Ok(HttpClient {
            endpoint: endpoint.into(),
            api_key,
            inner: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(60))
                .build()
                .map_err(|e| Error::Client(e.to_string()))?,
        })
    }

    /// Configure from `LLM_ENDPOINT` and `LLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("LLM_ENDPOINT")
            .map_err(|_| Error::Client("LLM_ENDPOINT not set".into()))?;
        let api_key = std::env::var("LLM_API_KEY").ok();
        HttpClient::new(endpoint, api_key)
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut req = self.inner.post(&self.endpoint).json(&HttpRequest { prompt });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Client(format!("endpoint returned {}", resp.status())));
        }
        let body: HttpResponse = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        Ok(body.text)
    }
}

/// Judge outcome over a report set for one category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub category: String,
    pub mean_score: f64,
    pub scored: usize,
    pub skipped: usize,
}

/// Score every (generated, reference) pair on a category, retrying each
/// sample up to two extra times; unparseable samples are skipped and counted.
pub fn judge_report_set(
    pairs: &[(String, String)],
    category: JudgeCategory,
    client: &dyn LlmClient,
) -> JudgeSummary {
    let mut total = 0u64;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (generated, reference) in pairs {
        let mut verdict = None;
        for _attempt in 0..3 {
            match judge_evaluate(generated, reference, category, client) {
                Ok(v) => {
                    verdict = Some(v);
                    break;
                }
                Err(_) => continue,
            }
        }
        match verdict {
            Some(v) => {
                total += v as u64;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    JudgeSummary {
        category: category.name().to_string(),
        mean_score: if scored > 0 { total as f64 / scored as f64 } else { 0.0 },
        scored,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canned_one_scores_one() {
        let client = CannedClient::new("1");
        let score = judge_evaluate("a", "b", JudgeCategory::Presence, &client).unwrap();
        assert_eq!(score, 1);
    }

    #[test]
    fn non_binary_reply_is_parse_error() {
        let client = CannedClient::new("maybe");
        assert!(judge_evaluate("a", "b", JudgeCategory::Presence, &client).is_err());
    }

    #[test]
    fn four_chest_categories() {
        let names: Vec<&str> = JudgeCategory::CHEST.iter().map(|c| c.name()).collect();
        assert_eq!(names, vec!["presence", "location", "severity", "hallucination"]);
    }

    #[test]
    fn seven_rectal_categories() {
        assert_eq!(JudgeCategory::RECTAL.len(), 7);
    }

    #[test]
    fn prompt_contains_both_reports_once() {
        let p = build_judge_prompt(JudgeCategory::Severity, "ref text", "gen text");
        assert_eq!(p.matches("ref text").count(), 1);
        assert_eq!(p.matches("gen text").count(), 1);
        assert!(p.contains("CATEGORY: severity"));
    }

    #[test]
    fn mock_presence_agrees_on_identical_reports() {
        let client = MockJudgeClient::new(AbnormalityLexicon::synthetic());
        let report = "there is a nodule . no effusion .";
        let v = judge_evaluate(report, report, JudgeCategory::Presence, &client).unwrap();
        assert_eq!(v, 1);
    }

    #[test]
    fn mock_presence_flags_missed_finding() {
        let client = MockJudgeClient::new(AbnormalityLexicon::synthetic());
        let v = judge_evaluate(
            "no nodule is identified .",
            "there is a nodule .",
            JudgeCategory::Presence,
            &client,
        )
        .unwrap();
        assert_eq!(v, 0);
    }

    #[test]
    fn mock_hallucination_flags_fabrication() {
        let client = MockJudgeClient::new(AbnormalityLexicon::synthetic());
        let v = judge_evaluate(
            "there is a nodule . there is an effusion .",
            "there is a nodule .",
            JudgeCategory::Hallucination,
            &client,
        )
        .unwrap();
        assert_eq!(v, 0);
        // missing a finding is not a hallucination
        let v = judge_evaluate(
            "there is a nodule .",
            "there is a nodule . there is an effusion .",
            JudgeCategory::Hallucination,
            &client,
        )
        .unwrap();
        assert_eq!(v, 1);
    }

    #[test]
    fn mock_location_checks_region_words() {
        let client = MockJudgeClient::new(AbnormalityLexicon::synthetic());
        let r = "there is a nodule in the left lower region .";
        let good = "there is a nodule in the left lower region measuring 9 mm .";
        let bad = "there is a nodule in the right upper region .";
        assert_eq!(judge_evaluate(good, r, JudgeCategory::Location, &client).unwrap(), 1);
        assert_eq!(judge_evaluate(bad, r, JudgeCategory::Location, &client).unwrap(), 0);
    }

    #[test]
    fn judge_set_counts_skips() {
        let client = CannedClient::new("nope");
        let pairs = vec![("a".to_string(), "b".to_string())];
        let summary = judge_report_set(&pairs, JudgeCategory::Presence, &client);
        assert_eq!(summary.scored, 0);
        assert_eq!(summary.skipped, 1);
    }
}
