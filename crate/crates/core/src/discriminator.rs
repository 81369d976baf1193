//! Knowledge discriminator: a logistic-regression accept/reject classifier
//! with a held-out early-stopping protocol, plus a scorer interface.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::RelationExtractor;
use crate::lexicon;
use crate::remote::{RemoteClient, RemoteOptions};
use crate::text;

#[derive(Debug, Error)]
pub enum DiscriminatorError {
    #[error("cannot featurize empty text")]
    EmptyText,
    #[error("training data: {0}")]
    Data(String),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Model(#[from] serde_json::Error),
    #[error(transparent)]
    Remote(#[from] crate::remote::RemoteError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Anything that maps a statement to an accept probability.
pub trait KnowledgeScorer: Send + Sync {
    fn score(&self, text: &str) -> Result<f64, DiscriminatorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledComparative {
    pub text: String,
    pub label: Label,
}

/// Crowdworker judgement categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Judgement {
    #[serde(rename = "True")]
    True,
    #[serde(rename = "False")]
    False,
    #[serde(rename = "Too subjective to judge")]
    TooSubjective,
    #[serde(rename = "Too vague to judge")]
    TooVague,
    #[serde(rename = "Too unfamiliar to judge")]
    TooUnfamiliar,
    #[serde(rename = "Invalid")]
    Invalid,
}

/// Majority label of one item's judgements. `None` when there is no strict
/// majority or the majority finds the item too unfamiliar.
pub fn aggregate_judgements(votes: &[Judgement]) -> Option<Label> {
    let mut counts: BTreeMap<Judgement, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let (&top, &n) = counts.iter().max_by_key(|(_, &n)| n)?;
    if 2 * n <= votes.len() {
        return None;
    }
    match top {
        Judgement::TooUnfamiliar => None,
        Judgement::True => Some(Label::Accept),
        _ => Some(Label::Reject),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedComparative {
    pub text: String,
    pub votes: Vec<Judgement>,
}

/// Reads labeled data, one JSON object per line. Lines may carry either a
/// `label` or raw `votes`; voted items without a usable majority are dropped.
pub fn read_labeled(src: &str) -> Result<Vec<LabeledComparative>, DiscriminatorError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Row {
        Labeled(LabeledComparative),
        Annotated(AnnotatedComparative),
    }
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line)
            .map_err(|e| DiscriminatorError::Line { line: i + 1, message: e.to_string() })?;
        match row {
            Row::Labeled(l) => out.push(l),
            Row::Annotated(a) => {
                if let Some(label) = aggregate_judgements(&a.votes) {
                    out.push(LabeledComparative { text: a.text, label });
                }
            }
        }
    }
    Ok(out)
}

const HEDGES: &[&str] = &["can", "may", "considered"];

fn default_extractor() -> &'static RelationExtractor {
    static EX: OnceLock<RelationExtractor> = OnceLock::new();
    EX.get_or_init(|| RelationExtractor::new(lexicon::comparative_adjectives()))
}

fn length_bucket(n: usize) -> &'static str {
    match n {
        0..=5 => "len:1-5",
        6..=10 => "len:6-10",
        11..=15 => "len:11-15",
        _ => "len:16+",
    }
}

/// Sorted sparse features: unigrams, bigrams, relation, hedges and a
/// length bucket.
pub fn featurize(text: &str) -> Result<Vec<(String, f64)>, DiscriminatorError> {
    let words = text::lower_words(text);
    if words.is_empty() {
        return Err(DiscriminatorError::EmptyText);
    }
    let mut f: BTreeMap<String, f64> = BTreeMap::new();
    for w in &words {
        *f.entry(format!("u:{w}")).or_default() += 1.0;
        if HEDGES.contains(&w.as_str()) {
            f.insert(format!("hedge:{w}"), 1.0);
        }
    }
    for p in words.windows(2) {
        *f.entry(format!("b:{}_{}", p[0], p[1])).or_default() += 1.0;
    }
    if let Some(rel) = default_extractor().extract(text) {
        f.insert(format!("rel:{rel}"), 1.0);
    }
    f.insert(length_bucket(words.len()).to_string(), 1.0);
    Ok(f.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Recall at which validation precision is monitored.
    pub monitor_recall: f64,
    pub learning_rate: f64,
    pub l2: f64,
    /// Settings for an external neural critic; the linear model ignores them.
    pub neural_learning_rate: f64,
    pub neural_batch_size: usize,
    pub neural_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_fraction: 0.8,
            max_epochs: 50,
            patience: 5,
            monitor_recall: 0.8,
            learning_rate: 0.1,
            l2: 1e-4,
            neural_learning_rate: 5e-6,
            neural_batch_size: 32,
            neural_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiscriminatorError> {
        let bad = |m: &str| Err(DiscriminatorError::Config(m.to_string()));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must be in (0, 1)");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.monitor_recall > 0.0 && self.monitor_recall <= 1.0) {
            return bad("monitor_recall must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || self.l2 < 0.0 {
            return bad("learning_rate must be positive and l2 non-negative");
        }
        Ok(())
    }
}

/// Precision at the highest score threshold whose recall reaches `recall`.
/// Tied scores are admitted together. 0 when there are no positives.
pub fn precision_at_recall(scored: &[(f64, bool)], recall: f64) -> f64 {
    let positives = scored.iter().filter(|(_, y)| *y).count();
    if positives == 0 {
        return 0.0;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0);
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp as f64 >= recall * positives as f64 - 1e-12 {
            return tp as f64 / (tp + fp) as f64;
        }
    }
    tp as f64 / (tp + fp) as f64
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, best_epoch: 0, stale: 0 }
    }

    /// Records the metric for `epoch`; true means stop now.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= self.patience
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch && self.best.is_some()
    }
}

/// Trained logistic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticScorer {
    pub bias: f64,
    pub weights: BTreeMap<String, f64>,
}

impl LogisticScorer {
    fn logit(&self, features: &[(String, f64)]) -> f64 {
        self.bias + features.iter().map(|(k, v)| self.weights.get(k).copied().unwrap_or(0.0) * v).sum::<f64>()
    }

    pub fn to_json(&self) -> Result<String, DiscriminatorError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(src: &str) -> Result<Self, DiscriminatorError> {
        Ok(serde_json::from_str(src)?)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl KnowledgeScorer for LogisticScorer {
    fn score(&self, text: &str) -> Result<f64, DiscriminatorError> {
        Ok(sigmoid(self.logit(&featurize(text)?)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Monitored metric per epoch.
    pub history: Vec<f64>,
    pub train_size: usize,
    pub validation_size: usize,
}

/// Stratified split: each class is shuffled and cut at `train_fraction`.
pub fn split(
    data: &[LabeledComparative],
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in [Label::Accept, Label::Reject] {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == label).collect();
        idx.shuffle(rng);
        let cut = ((idx.len() as f64 * train_fraction).round() as usize).min(idx.len());
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains with SGD, monitoring validation precision at the configured
/// recall after every epoch and keeping the best checkpoint.
pub fn train(
    data: &[LabeledComparative],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LogisticScorer, TrainReport), DiscriminatorError> {
    train_with_monitor(data, cfg, seed, |model, val| {
        let scored: Vec<(f64, bool)> = val
            .iter()
            .map(|(x, y)| (sigmoid(model.logit(x)), *y))
            .collect();
        precision_at_recall(&scored, cfg.monitor_recall)
    })
}

type Example = (Vec<(String, f64)>, bool);

/// [`train`] with a replaceable validation metric.
pub fn train_with_monitor<M>(
    data: &[LabeledComparative],
    cfg: &TrainConfig,
    seed: u64,
    mut monitor: M,
) -> Result<(LogisticScorer, TrainReport), DiscriminatorError>
where
    M: FnMut(&LogisticScorer, &[Example]) -> f64,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = split(data, cfg.train_fraction, &mut rng);
    let has = |idx: &[usize], l: Label| idx.iter().any(|&i| data[i].label == l);
    if !has(&train_idx, Label::Accept) || !has(&train_idx, Label::Reject) {
        return Err(DiscriminatorError::Data("training split needs both accept and reject examples".into()));
    }
    if !has(&val_idx, Label::Accept) {
        return Err(DiscriminatorError::Data("validation split has no accept examples".into()));
    }
    let featurized = |idx: &[usize]| -> Result<Vec<Example>, DiscriminatorError> {
        idx.iter().map(|&i| Ok((featurize(&data[i].text)?, data[i].label == Label::Accept))).collect()
    };
    let train_set = featurized(&train_idx)?;
    let val_set = featurized(&val_idx)?;

    let mut model = LogisticScorer { bias: 0.0, weights: BTreeMap::new() };
    let mut best = model.clone();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = &train_set[i];
            let g = sigmoid(model.logit(x)) - if *y { 1.0 } else { 0.0 };
            model.bias -= cfg.learning_rate * g;
            for (k, v) in x {
                let w = model.weights.entry(k.clone()).or_insert(0.0);
                *w -= cfg.learning_rate * (g * v + cfg.l2 * *w);
            }
        }
        let metric = monitor(&model, &val_set);
        history.push(metric);
        let stop = stopper.observe(epoch, metric);
        if stopper.improved_at(epoch) {
            best = model.clone();
        }
        if stop {
            break;
        }
    }
    let (best_epoch, best_metric) = stopper.best().unwrap_or((0, 0.0));
    let report = TrainReport {
        epochs_run: history.len(),
        best_epoch,
        best_metric,
        history,
        train_size: train_set.len(),
        validation_size: val_set.len(),
    };
    Ok((best, report))
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    accept_prob: f64,
}

/// Client for a `/v1/score_knowledge` endpoint.
pub struct RemoteScorer {
    client: RemoteClient,
}

impl RemoteScorer {
    pub fn new(options: RemoteOptions) -> Self {
        RemoteScorer { client: RemoteClient::new(options) }
    }
}

impl KnowledgeScorer for RemoteScorer {
    fn score(&self, text: &str) -> Result<f64, DiscriminatorError> {
        if text.trim().is_empty() {
            return Err(DiscriminatorError::EmptyText);
        }
        let r: ScoreResponse = self.client.post("/v1/score_knowledge", &ScoreRequest { text })?;
        if !(0.0..=1.0).contains(&r.accept_prob) {
            return Err(DiscriminatorError::Data(format!("accept_prob {} outside [0, 1]", r.accept_prob)));
        }
        Ok(r.accept_prob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    pub(crate) fn separable(n_per_class: usize) -> Vec<LabeledComparative> {
        let fillers = ["cars", "planes", "boats", "trains", "bikes", "trucks", "ships"];
        let mut out = Vec::new();
        for i in 0..n_per_class {
            let a = fillers[i % fillers.len()];
            let b = fillers[(i / fillers.len() + i + 1) % fillers.len()];
            out.push(LabeledComparative {
                text: format!("Compared to {a}, {b} are often good number {i}."),
                label: Label::Accept,
            });
            out.push(LabeledComparative {
                text: format!("Compared to {a}, {b} are often bad number {i}."),
                label: Label::Reject,
            });
        }
        out
    }

    fn keys(text: &str) -> BTreeSet<String> {
        featurize(text).unwrap().into_iter().map(|(k, _)| k).collect()
    }

    #[test]
    fn features_are_deterministic() {
        assert_eq!(featurize("planes are faster").unwrap(), featurize("planes are faster").unwrap());
        assert!(matches!(featurize(""), Err(DiscriminatorError::EmptyText)));
    }

    #[test]
    fn relation_features_differ() {
        let a = keys("are heavier");
        let b = keys("are lighter");
        let diff: BTreeSet<String> = a.symmetric_difference(&b).cloned().collect();
        let want: BTreeSet<String> =
            ["u:heavier", "u:lighter", "b:are_heavier", "b:are_lighter", "rel:heavier", "rel:lighter"]
                .into_iter()
                .map(String::from)
                .collect();
        assert_eq!(diff, want);
    }

    #[test]
    fn hedges_and_length() {
        let k = keys("kiwifruits can be considered healthier");
        assert!(k.contains("hedge:can") && k.contains("hedge:considered") && k.contains("len:1-5"));
    }

    #[test]
    fn separable_set_trains_to_high_precision() {
        let data = separable(200);
        let (model, report) = train(&data, &TrainConfig::default(), 7).unwrap();
        assert_eq!(report.best_metric, 1.0, "{report:?}");
        assert!(report.epochs_run <= 50);
        let good = model.score("Compared to cars, planes are often good.").unwrap();
        let bad = model.score("Compared to cars, planes are often bad.").unwrap();
        assert!(good > 0.5 && bad < 0.5, "{good} {bad}");
        assert_eq!(model.score("same text").unwrap(), model.score("same text").unwrap());
        assert!(model.score("").is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = separable(40);
        let a = train(&data, &TrainConfig::default(), 3).unwrap();
        let b = train(&data, &TrainConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(split(&data, 0.8, &mut rng1), split(&data, 0.8, &mut rng2));
    }

    #[test]
    fn split_is_stratified() {
        let data = separable(50);
        let (train_idx, val_idx) = split(&data, 0.8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((train_idx.len(), val_idx.len()), (80, 20));
        assert_eq!(train_idx.iter().filter(|&&i| data[i].label == Label::Accept).count(), 40);
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = separable(20).into_iter().filter(|d| d.label == Label::Accept).collect();
        assert!(matches!(train(&data, &TrainConfig::default(), 1), Err(DiscriminatorError::Data(_))));
    }

    #[test]
    fn patience_stops_after_plateau() {
        let metrics = [0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3];
        let mut s = EarlyStopper::new(5);
        let stopped = (1..=metrics.len()).find(|&e| s.observe(e, metrics[e - 1]));
        assert_eq!(stopped, Some(8));
        assert_eq!(s.best(), Some((3, 0.3)));

        // the same sequence fed through training
        let data = separable(20);
        let mut epoch = 0;
        let (_, report) = train_with_monitor(&data, &TrainConfig::default(), 1, |_, _| {
            epoch += 1;
            metrics[(epoch - 1).min(metrics.len() - 1)]
        })
        .unwrap();
        assert_eq!((report.epochs_run, report.best_epoch), (8, 3));
    }

    #[test]
    fn precision_at_recall_examples() {
        let s = [(0.9, true), (0.8, false), (0.7, true), (0.6, true), (0.5, true), (0.1, false)];
        // recall 0.75 needs 3 of 4 positives: admitted down to 0.6
        assert_eq!(precision_at_recall(&s, 0.75), 0.75);
        assert_eq!(precision_at_recall(&s, 0.25), 1.0);
        assert_eq!(precision_at_recall(&[(0.5, false)], 0.8), 0.0);
    }

    #[test]
    fn judgement_aggregation() {
        use Judgement::*;
        assert_eq!(aggregate_judgements(&[True, True, False]), Some(Label::Accept));
        assert_eq!(aggregate_judgements(&[False, Invalid, Invalid]), Some(Label::Reject));
        assert_eq!(aggregate_judgements(&[True, False, Invalid]), None);
        assert_eq!(aggregate_judgements(&[TooUnfamiliar, TooUnfamiliar, True]), None);
    }

    #[test]
    fn labeled_file_formats() {
        let src = concat!(
            "{\"text\": \"a are faster\", \"label\": \"accept\"}\n",
            "{\"text\": \"b are slower\", \"votes\": [\"True\", \"False\", \"False\"]}\n",
            "{\"text\": \"c\", \"votes\": [\"True\", \"False\", \"Invalid\"]}\n",
        );
        let got = read_labeled(src).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].label, Label::Reject);
        let err = read_labeled("{\"text\": 1}\n").unwrap_err();
        assert!(err.to_string().starts_with("line 1"));
    }

    #[test]
    fn model_round_trips_through_json() {
        let (model, _) = train(&separable(20), &TrainConfig::default(), 2).unwrap();
        let back = LogisticScorer::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
