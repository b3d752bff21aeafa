//! Rule-based, negation-aware abnormality label extraction from report text.

use indexmap::IndexMap;

use crate::volume::FINDING_TYPES;

/// Negation cues: a trigger phrase preceded by any of these within its
/// sentence counts as negated.
pub const NEGATION_CUES: [&str; 4] = ["no", "without", "absent", "not"];

#[derive(Debug, Clone)]
pub struct LexiconEntry {
    pub name: String,
    /// Lowercase trigger phrases (may span multiple tokens).
    pub triggers: Vec<String>,
}

/// Ordered finding vocabulary with trigger phrases per finding.
#[derive(Debug, Clone)]
pub struct AbnormalityLexicon {
    entries: Vec<LexiconEntry>,
}

impl AbnormalityLexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Self {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            assert!(seen.insert(e.name.clone()), "duplicate lexicon name {}", e.name);
        }
        AbnormalityLexicon { entries }
    }

    /// Desk-scale lexicon mirroring the synthetic finding types.
    pub fn synthetic() -> Self {
        AbnormalityLexicon::new(
            FINDING_TYPES
                .iter()
                .map(|t| LexiconEntry {
                    name: t.name().to_string(),
                    triggers: vec![t.name().to_string()],
                })
                .collect(),
        )
    }

    /// The 18 chest abnormality categories used for full-scale chest CT
    /// report labeling.
    pub fn chest_ct() -> Self {
        let names: [(&str, &[&str]); 18] = [
            ("medical material", &["medical material"]),
            ("arterial wall calcification", &["arterial wall calcification"]),
            ("cardiomegaly", &["cardiomegaly"]),
            ("pericardial effusion", &["pericardial effusion"]),
            (
                "coronary artery wall calcification",
                &["coronary artery wall calcification", "coronary calcification"],
            ),
            ("hiatal hernia", &["hiatal hernia"]),
            ("lymphadenopathy", &["lymphadenopathy", "enlarged lymph node"]),
            ("emphysema", &["emphysema"]),
            ("atelectasis", &["atelectasis"]),
            ("lung nodule", &["lung nodule", "nodule"]),
            ("lung opacity", &["lung opacity", "opacity"]),
            ("pulmonary fibrotic sequela", &["pulmonary fibrotic sequela", "fibrotic"]),
            ("pleural effusion", &["pleural effusion"]),
            ("mosaic attenuation pattern", &["mosaic attenuation"]),
            ("peribronchial thickening", &["peribronchial thickening"]),
            ("consolidation", &["consolidation"]),
            ("bronchiectasis", &["bronchiectasis"]),
            ("interlobular septal thickening", &["interlobular septal thickening"]),
        ];
        AbnormalityLexicon::new(
            names
                .iter()
                .map(|(name, triggers)| LexiconEntry {
                    name: name.to_string(),
                    triggers: triggers.iter().map(|t| t.to_string()).collect(),
                })
                .collect(),
        )
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// finding → {0, 1}, keyed in lexicon order.
pub type LabelVector = IndexMap<String, u8>;

fn sentence_tokens(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Token index where `phrase` first occurs in `tokens`, if anywhere.
fn find_phrase(tokens: &[String], phrase: &[String]) -> Option<usize> {
    if phrase.is_empty() || tokens.len() < phrase.len() {
        return None;
    }
    (0..=tokens.len() - phrase.len())
        .find(|&i| tokens[i..i + phrase.len()].iter().zip(phrase).all(|(a, b)| a == b))
}

/// Per finding: 1 if any trigger phrase occurs in a sentence without a
/// preceding negation cue in that sentence, else 0.
pub fn extract_labels(report: &str, lexicon: &AbnormalityLexicon) -> LabelVector {
    let sentences: Vec<Vec<String>> = report
        .split(['.', '!', '?'])
        .map(sentence_tokens)
        .filter(|s| !s.is_empty())
        .collect();
    let mut out = LabelVector::new();
    for entry in &lexicon.entries {
        let mut label = 0u8;
        'sentences: for tokens in &sentences {
            for trigger in &entry.triggers {
                let phrase: Vec<String> = trigger.split_whitespace().map(|t| t.to_string()).collect();
                if let Some(pos) = find_phrase(tokens, &phrase) {
                    let negated = tokens[..pos].iter().any(|t| NEGATION_CUES.contains(&t.as_str()));
                    if !negated {
                        label = 1;
                        break 'sentences;
                    }
                }
            }
        }
        out.insert(entry.name.clone(), label);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_mention_sets_label() {
        // "There is pleural effusion." -> effusion = 1
        let lex = AbnormalityLexicon::synthetic();
        let labels = extract_labels("There is pleural effusion.", &lex);
        assert_eq!(labels["effusion"], 1);
    }

    #[test]
    fn direct_negation_clears_label() {
        let lex = AbnormalityLexicon::synthetic();
        let labels = extract_labels("No pleural effusion.", &lex);
        assert_eq!(labels["effusion"], 0);
    }

    #[test]
    fn empty_report_is_all_zeros() {
        let lex = AbnormalityLexicon::synthetic();
        let labels = extract_labels("", &lex);
        assert!(labels.values().all(|&v| v == 0));
        assert_eq!(labels.len(), lex.len());
    }

    #[test]
    fn negation_is_sentence_scoped() {
        let lex = AbnormalityLexicon::synthetic();
        let labels = extract_labels("no effusion is present . there is a nodule .", &lex);
        assert_eq!(labels["effusion"], 0);
        assert_eq!(labels["nodule"], 1);
    }

    #[test]
    fn case_and_whitespace_insensitive() {
        let lex = AbnormalityLexicon::synthetic();
        let a = extract_labels("THERE IS A NODULE.   ", &lex);
        let b = extract_labels("there is a nodule.", &lex);
        assert_eq!(a, b);
    }

    #[test]
    fn chest_lexicon_has_18_categories() {
        assert_eq!(AbnormalityLexicon::chest_ct().len(), 18);
    }
}
