//! Rule-based synthetic datasets: template sentences with planted entity
//! spans, and premise/hypothesis pairs with lexical entailment cues. They
//! make the full pipeline trainable and testable without any external data.

use crate::data::{NerRecord, NliRecord};
use crate::ner::{bio_labels, spans_to_tags, EntitySpan, EntityType};
use crate::nli::NliLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const COMPANIES: [&[&str]; 4] = [
    &["acme", "corp"],
    &["betaworks"],
    &["gamma", "holdings"],
    &["delta", "retail"],
];

const LAWS: [&[&str]; 4] = [
    &["privacy", "act"],
    &["consumer", "code"],
    &["wage", "statute"],
    &["robocall", "rule"],
];

const VIOLATIONS: [&[&str]; 4] = [
    &["overcharged"],
    &["leaked", "records"],
    &["withheld", "pay"],
    &["sent", "unsolicited", "calls"],
];

const VICTIMS: [&[&str]; 4] = [
    &["customers"],
    &["employees"],
    &["subscribers"],
    &["online", "buyers"],
];

const DOMAINS: [&str; 4] = ["Consumer Protection", "Privacy", "TCPA", "Wage"];

fn push_span(
    tokens: &mut Vec<String>,
    spans: &mut Vec<EntitySpan>,
    words: &[&str],
    entity: EntityType,
) {
    let start = tokens.len();
    tokens.extend(words.iter().map(|w| w.to_string()));
    spans.push(EntitySpan::new(start, tokens.len(), entity));
}

fn push_words(tokens: &mut Vec<String>, words: &[&str]) {
    tokens.extend(words.iter().map(|w| w.to_string()));
}

/// Template sentences, each planting all four entity types.
pub fn synthetic_ner(n: usize, seed: u64) -> Vec<NerRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = bio_labels();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let company = COMPANIES[rng.random_range(0..COMPANIES.len())];
        let law = LAWS[rng.random_range(0..LAWS.len())];
        let violation = VIOLATIONS[rng.random_range(0..VIOLATIONS.len())];
        let victim = VICTIMS[rng.random_range(0..VICTIMS.len())];

        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        if i % 2 == 0 {
            push_words(&mut tokens, &["the", "filing", "says"]);
            push_span(&mut tokens, &mut spans, company, EntityType::ViolatedBy);
            push_span(&mut tokens, &mut spans, violation, EntityType::Violation);
            push_words(&mut tokens, &["against"]);
            push_span(&mut tokens, &mut spans, victim, EntityType::ViolatedOn);
            push_words(&mut tokens, &["under", "the"]);
            push_span(&mut tokens, &mut spans, law, EntityType::Law);
        } else {
            push_words(&mut tokens, &["under", "the"]);
            push_span(&mut tokens, &mut spans, law, EntityType::Law);
            push_words(&mut tokens, &[",", "regulators", "claim"]);
            push_span(&mut tokens, &mut spans, company, EntityType::ViolatedBy);
            push_span(&mut tokens, &mut spans, violation, EntityType::Violation);
            push_words(&mut tokens, &["harming"]);
            push_span(&mut tokens, &mut spans, victim, EntityType::ViolatedOn);
        }
        let tags = spans_to_tags(&spans, tokens.len()).expect("template spans are disjoint");
        let ner_tags = tags.iter().map(|&t| labels[t as usize].clone()).collect();
        out.push(NerRecord {
            tokens,
            ner_tags,
        });
    }
    out
}

/// Premise/hypothesis pairs, `per_class` for each of the three classes, with
/// distinct lexical cues per class and a cycling `legal_act` key.
pub fn synthetic_nli(per_class: usize, seed: u64) -> Vec<NliRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 3);
    for i in 0..per_class {
        let company = COMPANIES[rng.random_range(0..COMPANIES.len())].join(" ");
        let violation = VIOLATIONS[rng.random_range(0..VIOLATIONS.len())].join(" ");
        let victim = VICTIMS[rng.random_range(0..VICTIMS.len())].join(" ");
        let premise = format!("the complaint states that {company} {violation} affecting {victim}");
        let domain = DOMAINS[i % DOMAINS.len()].to_string();

        let entailed = NliRecord {
            premise: premise.clone(),
            hypothesis: format!("indeed the review confirms {company} {violation}"),
            label: NliLabel::Entailed.name().to_string(),
            legal_act: domain.clone(),
        };
        let neutral = NliRecord {
            premise: premise.clone(),
            hypothesis: format!("somebody posted about store hours and parking near {victim}"),
            label: NliLabel::Neutral.name().to_string(),
            legal_act: domain.clone(),
        };
        let contradict = NliRecord {
            premise,
            hypothesis: format!("reviewers deny this and say {company} never {violation}"),
            label: NliLabel::Contradict.name().to_string(),
            legal_act: domain,
        };
        out.push(entailed);
        out.push(neutral);
        out.push(contradict);
    }
    out
}
