//! Synthetic VQA pair construction.
//!
//! The deterministic path instantiates fixed templates from finding specs
//! (presence, location, size per present finding). The client path asks an
//! external LLM to decompose a free-text report into QA pairs and falls back
//! to the deterministic templates, driven by extracted labels, when the
//! client output cannot be parsed.

use crate::error::Result;
use crate::eval::judge::LlmClient;
use crate::eval::labels::{extract_labels, AbnormalityLexicon};
use crate::volume::{FindingSpec, QaPair};

/// Per present finding: presence, location, and size QA; a single global
/// negative pair when nothing is present.
pub fn synth_vqa_from_findings(findings: &[FindingSpec]) -> Vec<QaPair> {
    let mut out = Vec::new();
    for f in findings.iter().filter(|f| f.present) {
        let name = f.finding_type.name();
        out.push(QaPair {
            q: format!("is there a {name} ?"),
            a: format!("yes , there is a {name} ."),
        });
        out.push(QaPair {
            q: format!("where is the {name} located ?"),
            a: format!("the {name} is in the {} region .", f.location),
        });
        out.push(QaPair {
            q: format!("what is the size of the {name} ?"),
            a: format!("the {name} measures {} mm .", f.size_mm.round() as i64),
        });
    }
    if out.is_empty() {
        out.push(QaPair {
            q: "are there any abnormalities ?".to_string(),
            a: "no abnormalities are present .".to_string(),
        });
    }
    out
}

/// Instruction handed to an external LLM to decompose a report into QA pairs.
pub const VQA_GENERATION_TEMPLATE: &str = "You are given a radiology report. Decompose it into \
question-answer pairs, one pair per finding, each asking about the presence, location, or size \
of a single finding. Output one pair per line in the exact form `Q: <question> A: <answer>` and \
nothing else.\n\nREPORT:\n{report}\n";

fn parse_qa_lines(text: &str) -> Vec<QaPair> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix("Q:") else { continue };
        let Some(split) = rest.find("A:") else { continue };
        let q = rest[..split].trim().to_string();
        let a = rest[split + 2..].trim().to_string();
        if !q.is_empty() && !a.is_empty() {
            out.push(QaPair { q, a });
        }
    }
    out
}

/// Presence-only deterministic fallback derived from report labels.
fn vqa_from_report_labels(report: &str, lexicon: &AbnormalityLexicon) -> Vec<QaPair> {
    let labels = extract_labels(report, lexicon);
    let mut out = Vec::new();
    for (name, &v) in labels.iter() {
        if v == 1 {
            out.push(QaPair {
                q: format!("is there a {name} ?"),
                a: format!("yes , there is a {name} ."),
            });
        }
    }
    if out.is_empty() {
        out.push(QaPair {
            q: "are there any abnormalities ?".to_string(),
            a: "no abnormalities are present .".to_string(),
        });
    }
    out
}

/// Ask the client to decompose `report`; fall back to label-driven templates
/// when the call fails or yields no parseable pairs.
pub fn synth_vqa_via_client(
    report: &str,
    client: &dyn LlmClient,
    lexicon: &AbnormalityLexicon,
) -> Result<Vec<QaPair>> {
    let prompt = VQA_GENERATION_TEMPLATE.replace("{report}", report);
    let pairs = match client.complete(&prompt) {
        Ok(response) => parse_qa_lines(&response),
        Err(_) => Vec::new(),
    };
    if pairs.is_empty() {
        return Ok(vqa_from_report_labels(report, lexicon));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::judge::CannedClient;
    use crate::volume::{FindingType, Region};

    fn nodule(present: bool) -> FindingSpec {
        FindingSpec {
            finding_type: FindingType::Nodule,
            location: Region::LeftLower,
            size_mm: 8.0,
            present,
        }
    }

    #[test]
    fn empty_findings_yield_single_negative_pair() {
        let pairs = synth_vqa_from_findings(&[]);
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].a.contains("no abnormalities"));
    }

    #[test]
    fn three_present_findings_yield_nine_pairs() {
        let findings = vec![
            nodule(true),
            FindingSpec {
                finding_type: FindingType::Effusion,
                location: Region::RightUpper,
                size_mm: 6.0,
                present: true,
            },
            FindingSpec {
                finding_type: FindingType::Consolidation,
                location: Region::Central,
                size_mm: 10.0,
                present: true,
            },
        ];
        assert_eq!(synth_vqa_from_findings(&findings).len(), 9);
    }

    #[test]
    fn absent_findings_contribute_nothing() {
        let pairs = synth_vqa_from_findings(&[nodule(false)]);
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].a.contains("no abnormalities"));
    }

    #[test]
    fn location_answer_mentions_region() {
        let pairs = synth_vqa_from_findings(&[nodule(true)]);
        let loc = pairs.iter().find(|p| p.q.contains("where")).unwrap();
        assert!(loc.a.contains("left lower"), "answer: {}", loc.a);
    }

    #[test]
    fn client_lines_are_parsed() {
        let client = CannedClient::new("Q: is there a nodule ? A: yes .\nQ: where ? A: left lower .");
        let lex = AbnormalityLexicon::synthetic();
        let pairs = synth_vqa_via_client("there is a nodule .", &client, &lex).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].a, "yes .");
    }

    #[test]
    fn unparseable_client_output_falls_back() {
        let client = CannedClient::new("sorry, I cannot help with that");
        let lex = AbnormalityLexicon::synthetic();
        let pairs = synth_vqa_via_client("there is a nodule .", &client, &lex).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].q.contains("nodule"));
    }
}
