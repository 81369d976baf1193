//! Natural-language-inference providers and verdict thresholds.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::relation::{parse_statement, strip_subject, RelationExtractor};
use super::FilterError;
use crate::remote::{RemoteClient, RemoteOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub label: NliLabel,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NliThresholds {
    pub contradiction: f64,
    pub entailment: f64,
}

impl Default for NliThresholds {
    fn default() -> Self {
        NliThresholds { contradiction: 0.99, entailment: 0.85 }
    }
}

impl NliThresholds {
    /// Labels below their threshold become neutral.
    pub fn apply(&self, v: NliVerdict) -> NliLabel {
        match v.label {
            NliLabel::Contradiction if v.probability >= self.contradiction => NliLabel::Contradiction,
            NliLabel::Entailment if v.probability >= self.entailment => NliLabel::Entailment,
            _ => NliLabel::Neutral,
        }
    }
}

pub trait NliProvider: Send + Sync {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliVerdict, FilterError>;
}

/// Rule-based NLI over templated statements.
///
/// Both texts must read "Compared to A, B <predicate>" about the same two
/// entities. With the same orientation, equal relations entail and
/// antonymous relations contradict; with the orientation swapped the roles
/// flip. Anything else is neutral. All verdicts carry probability 1.
#[derive(Debug, Clone)]
pub struct AntonymNli {
    extractor: RelationExtractor,
    antonyms: HashSet<(String, String)>,
}

impl AntonymNli {
    pub fn new<S: AsRef<str>>(adjectives: &[S], antonyms: &[(String, String)]) -> Self {
        let mut set = HashSet::new();
        for (a, b) in antonyms {
            let (a, b) = (a.to_lowercase(), b.to_lowercase());
            set.insert((b.clone(), a.clone()));
            set.insert((a, b));
        }
        AntonymNli { extractor: RelationExtractor::new(adjectives), antonyms: set }
    }

    pub fn are_antonyms(&self, a: &str, b: &str) -> bool {
        if self.antonyms.contains(&(a.to_string(), b.to_string())) {
            return true;
        }
        // "more X" against "less X" / "fewer X"
        match (a.split_once(' '), b.split_once(' ')) {
            (Some((qa, wa)), Some((qb, wb))) if wa == wb => {
                let up = |q: &str| q == "more";
                let down = |q: &str| q == "less" || q == "fewer";
                (up(qa) && down(qb)) || (down(qa) && up(qb))
            }
            _ => false,
        }
    }

    fn relation(&self, predicate: &str) -> Option<String> {
        self.extractor.extract(predicate)
    }
}

fn same(a: &str, b: &str) -> bool {
    a.eq_ignore_ascii_case(b)
}

impl NliProvider for AntonymNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliVerdict, FilterError> {
        let neutral = NliVerdict { label: NliLabel::Neutral, probability: 1.0 };
        let (Some(p), Some(h)) = (parse_statement(premise), parse_statement(hypothesis)) else {
            return Ok(neutral);
        };
        // predicates to compare and whether the orientation is swapped
        let (swapped, p_pred, h_pred) = if same(p.reference, h.reference) {
            let first = |s: &str| s.split_whitespace().next().unwrap_or_default().to_lowercase();
            if first(p.rest) != first(h.rest) {
                return Ok(neutral);
            }
            (false, p.rest.to_string(), h.rest.to_string())
        } else {
            match (strip_subject(p.rest, h.reference), strip_subject(h.rest, p.reference)) {
                (Some(pp), Some(hp)) => (true, pp.to_string(), hp.to_string()),
                _ => return Ok(neutral),
            }
        };
        let (Some(rp), Some(rh)) = (self.relation(&p_pred), self.relation(&h_pred)) else {
            return Ok(neutral);
        };
        let label = match (rp == rh, self.are_antonyms(&rp, &rh), swapped) {
            (true, _, false) | (false, true, true) => NliLabel::Entailment,
            (true, _, true) | (false, true, false) => NliLabel::Contradiction,
            _ => NliLabel::Neutral,
        };
        Ok(NliVerdict { label, probability: 1.0 })
    }
}

#[derive(Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct NliResponse {
    label: String,
    probability: f64,
}

/// Client for a `/v1/nli` endpoint.
pub struct RemoteNli {
    client: RemoteClient,
}

impl RemoteNli {
    pub fn new(options: RemoteOptions) -> Self {
        RemoteNli { client: RemoteClient::new(options) }
    }
}

impl NliProvider for RemoteNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliVerdict, FilterError> {
        let reply: NliResponse = self
            .client
            .post("/v1/nli", &NliRequest { premise, hypothesis })
            .map_err(|e| FilterError::Provider(e.to_string()))?;
        let label = match reply.label.to_ascii_lowercase().as_str() {
            "entailment" => NliLabel::Entailment,
            "contradiction" => NliLabel::Contradiction,
            "neutral" => NliLabel::Neutral,
            other => return Err(FilterError::Provider(format!("unknown NLI label {other:?}"))),
        };
        if !(0.0..=1.0).contains(&reply.probability) {
            return Err(FilterError::Provider(format!("NLI probability {} outside [0, 1]", reply.probability)));
        }
        Ok(NliVerdict { label, probability: reply.probability })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon;
    use crate::remote::testing::TestServer;
    use serde_json::json;

    fn reference() -> AntonymNli {
        AntonymNli::new(&lexicon::comparative_adjectives(), &lexicon::default_antonyms())
    }

    fn label(p: &str, h: &str) -> NliLabel {
        reference().classify(p, h).unwrap().label
    }

    #[test]
    fn thresholds() {
        let t = NliThresholds::default();
        let v = |label, probability| NliVerdict { label, probability };
        assert_eq!(t.apply(v(NliLabel::Contradiction, 0.99)), NliLabel::Contradiction);
        assert_eq!(t.apply(v(NliLabel::Contradiction, 0.98)), NliLabel::Neutral);
        assert_eq!(t.apply(v(NliLabel::Entailment, 0.85)), NliLabel::Entailment);
        assert_eq!(t.apply(v(NliLabel::Entailment, 0.84)), NliLabel::Neutral);
    }

    #[test]
    fn antonyms_contradict() {
        let p = "Compared to cars, trucks are often heavier.";
        assert_eq!(label(p, "Compared to cars, trucks are typically lighter."), NliLabel::Contradiction);
        assert_eq!(label(p, "Compared to cars, trucks are always heavier."), NliLabel::Entailment);
        assert_eq!(label(p, "Compared to cars, trucks are often faster."), NliLabel::Neutral);
        assert_eq!(label(p, "Compared to cars, boats are often lighter."), NliLabel::Neutral);
    }

    #[test]
    fn swapped_orientation_flips() {
        let p = "Compared to cars, trucks are heavier.";
        assert_eq!(label(p, "Compared to trucks, cars are heavier."), NliLabel::Contradiction);
        assert_eq!(label(p, "Compared to trucks, cars are lighter."), NliLabel::Entailment);
    }

    #[test]
    fn more_less_pairs() {
        let p = "Compared to cars, trucks have more wheels.";
        assert_eq!(label(p, "Compared to cars, trucks have fewer wheels."), NliLabel::Contradiction);
        assert_eq!(label(p, "Compared to boats, trucks have fewer wheels."), NliLabel::Neutral);
        assert_eq!(label("kiwis rule", p), NliLabel::Neutral);
    }

    #[test]
    fn remote_provider() {
        let server = TestServer::start(Box::new(|path, body| match path {
            "/v1/nli" if body["premise"] == body["hypothesis"] => {
                (200, json!({"label": "entailment", "probability": 0.97}))
            }
            "/v1/nli" => (200, json!({"label": "CONTRADICTION", "probability": 0.995})),
            _ => (404, json!({})),
        }));
        let nli = RemoteNli::new(RemoteOptions::new(&server.url));
        assert_eq!(nli.classify("a", "a").unwrap().label, NliLabel::Entailment);
        let v = nli.classify("a", "b").unwrap();
        assert_eq!((v.label, v.probability), (NliLabel::Contradiction, 0.995));
    }
}
