//! Evaluation: VQA synthesis, NLG metrics, clinical-accuracy metrics via a
//! rule-based label extractor, and the binary LLM-judge harness.

pub mod judge;
pub mod labels;
pub mod metrics;
pub mod vqa;

pub use judge::{
    build_judge_prompt, judge_evaluate, CannedClient, HttpClient, JudgeCategory, LlmClient,
    MockJudgeClient,
};
pub use labels::{extract_labels, AbnormalityLexicon, LabelVector};
pub use metrics::{bleu4, ca_metrics, meteor, rouge_l, CaReport, Prf};
pub use vqa::{synth_vqa_from_findings, synth_vqa_via_client};
