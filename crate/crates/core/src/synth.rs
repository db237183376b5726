//! Seeded generators with planted ground truth.
//!
//! * [`gen_conversations`]: two-channel call transcripts with millisecond
//!   timing, plus a side channel of the labels the generator intended
//!   (pause, overtalk, disfluency, question class, role, response length,
//!   turn taking).
//! * [`corrupt_transcript`]: ASR-style corruption returning the planted edit
//!   script.
//! * [`gen_feature_store`] / [`plant_dataset`] / [`gen_shared_subspace`]:
//!   class-conditional Gaussian representations with one informative layer.
//! * attention helpers for dependency, entity-value and segment probes.
//!
//! Every generator draws from [`crate::rng::Stream`]s keyed by the spec seed,
//! a sub-generator tag and the item index, so output is byte-identical for a
//! given seed regardless of generation order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::align::AlignmentOp;
use crate::linalg;
use crate::model::{
    Annotations, ChannelInfo, Conversation, DependencySentence, Label, ProbeInstance,
    QuestionClass, Role, Split, TimedToken, Turn,
};
use crate::rng::{tags, Stream};
use crate::store::{Matrix, RecordKey, TensorStore};
use crate::taskgen::{lexicon, LabelSet, ProbeDataset};
use crate::{Error, Result};

/// Shared everyday words, used by both roles and by substitutions.
pub const SHARED_VOCAB: &[&str] = &[
    "the", "that", "is", "to", "it", "for", "we", "can", "have", "today", "time", "this", "with",
    "on", "your", "a", "will", "be", "there", "now", "call", "number", "day", "one", "two",
    "three", "four", "five", "last", "week", "month", "just", "right", "sure", "great", "thanks",
    "again", "here", "name", "date", "email", "address", "phone", "order", "service", "plan",
    "payment", "card", "help", "issue", "back", "check",
];

pub const AGENT_VOCAB: &[&str] = &[
    "verify", "account", "assist", "appreciate", "policy", "transfer", "update", "confirm",
    "ticket", "escalate", "record", "apologize", "process", "system", "team", "option",
    "refunded", "credited", "schedule", "technician",
];

pub const CUSTOMER_VOCAB: &[&str] = &[
    "my", "bill", "charged", "refund", "internet", "broken", "twice", "cancel", "slow",
    "router", "tried", "yesterday", "waiting", "money", "wrong", "still", "working", "keeps",
    "dropping", "frustrated",
];

const QUESTION_TEMPLATES: [&[&[&str]]; 4] = [
    &[
        &["can", "i", "get", "your", "full", "name", "please"],
        &["and", "your", "date", "of", "birth", "please"],
        &["what", "is", "your", "account", "number"],
    ],
    &[
        &["what", "seems", "to", "be", "the", "problem"],
        &["how", "did", "this", "happen"],
        &["why", "did", "the", "payment", "fail"],
    ],
    &[
        &["is", "that", "correct"],
        &["did", "you", "try", "to", "restart", "it"],
        &["are", "you", "still", "there"],
    ],
    &[
        &["do", "you", "want", "the", "monthly", "or", "yearly", "plan"],
        &["should", "i", "email", "or", "text", "you"],
    ],
];

/// Short turns never exceed this span; long turns always exceed
/// [`LONG_TURN_MIN_MS`]. Both sit on either side of the default 30 s rule.
pub const SHORT_TURN_MAX_MS: u64 = 28_000;
pub const LONG_TURN_MIN_MS: u64 = 32_000;
const MAX_TOKENS_PER_SHORT_TURN: usize = 14;

/// Corpus generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_conversations: usize,
    /// Inclusive range of turns per conversation.
    pub turns_per_conv: (usize, usize),
    /// Inclusive range of content tokens in a short turn.
    pub tokens_per_turn: (usize, usize),
    /// Probability that a turn contains an intra-turn gap above 5 s.
    pub pause_rate: f64,
    /// Probability that a turn is overlapped by the next (other-channel) turn.
    pub overtalk_rate: f64,
    pub disfluency_rate: f64,
    /// Probability that a fluent turn still carries a disfluency cue
    /// (a discourse marker or two short intermittent pauses).
    pub fluent_cue_rate: f64,
    /// Per-class probability, in [`QuestionClass::ASKED`] order.
    pub question_rate: [f64; 4],
    /// Probability that the next turn is taken by the same channel.
    pub continue_rate: f64,
    /// Probability that a turn lasts longer than [`LONG_TURN_MIN_MS`].
    pub long_turn_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_conversations: 100,
            turns_per_conv: (8, 16),
            tokens_per_turn: (4, 12),
            pause_rate: 0.3,
            overtalk_rate: 0.15,
            disfluency_rate: 0.25,
            fluent_cue_rate: 0.3,
            question_rate: [0.06, 0.06, 0.06, 0.06],
            continue_rate: 0.25,
            long_turn_rate: 0.3,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("pause_rate", self.pause_rate),
            ("overtalk_rate", self.overtalk_rate),
            ("disfluency_rate", self.disfluency_rate),
            ("fluent_cue_rate", self.fluent_cue_rate),
            ("continue_rate", self.continue_rate),
            ("long_turn_rate", self.long_turn_rate),
        ];
        for (name, r) in rates.iter().chain(
            self.question_rate
                .iter()
                .map(|r| ("question_rate", *r))
                .collect::<Vec<_>>()
                .iter(),
        ) {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::InvalidConfig(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        if self.question_rate.iter().sum::<f64>() > 1.0 {
            return Err(Error::InvalidConfig("question rates sum above 1".into()));
        }
        let (lo, hi) = self.turns_per_conv;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("turns_per_conv range {lo}..={hi} is empty")));
        }
        let (lo, hi) = self.tokens_per_turn;
        if lo < 4 || lo > hi || hi > MAX_TOKENS_PER_SHORT_TURN {
            return Err(Error::InvalidConfig(format!(
                "tokens_per_turn range {lo}..={hi} must lie within 4..={MAX_TOKENS_PER_SHORT_TURN}"
            )));
        }
        Ok(())
    }
}

/// What the generator planted for one turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnGold {
    pub role: Role,
    /// Contains an intra-turn gap above 5 s.
    pub pause: bool,
    pub disfluent: bool,
    pub question: QuestionClass,
    /// Overlaps an adjacent turn on the other channel.
    pub overtalk: bool,
    /// Lasts longer than [`LONG_TURN_MIN_MS`].
    pub long: bool,
    /// One entry per pause-delimited segment: `Some(true)` if the same
    /// channel speaks next, `Some(false)` if the other one does, `None` for
    /// the final segment of the conversation.
    pub segment_continues: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationGold {
    pub id: String,
    pub turns: Vec<TurnGold>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub conversations: Vec<Conversation>,
    pub gold: Vec<ConversationGold>,
}

struct TurnPlan {
    channel: u32,
    pause: bool,
    disfluent: bool,
    question: QuestionClass,
    long: bool,
    overlaps_next: bool,
}

/// Generates a corpus of two-channel (agent, customer) conversations.
pub fn gen_conversations(spec: &CorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut conversations = Vec::with_capacity(spec.n_conversations);
    let mut gold = Vec::with_capacity(spec.n_conversations);
    for c in 0..spec.n_conversations {
        let (conv, g) = gen_one_conversation(spec, c);
        conversations.push(conv);
        gold.push(g);
    }
    Ok(SynthCorpus {
        conversations,
        gold,
    })
}

fn gen_one_conversation(spec: &CorpusSpec, index: usize) -> (Conversation, ConversationGold) {
    let mut rng = Stream::new(spec.seed, tags::CONVERSATION, index as u64);
    let id = format!("conv{index:05}");
    let n_turns = rng.range(spec.turns_per_conv.0 as u64, spec.turns_per_conv.1 as u64) as usize;

    let mut plans: Vec<TurnPlan> = Vec::with_capacity(n_turns);
    let mut channel = 0u32;
    for t in 0..n_turns {
        if t > 0 && !rng.bernoulli(spec.continue_rate) {
            channel = 1 - channel;
        }
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut question = QuestionClass::None;
        for (k, r) in spec.question_rate.iter().enumerate() {
            acc += r;
            if u < acc {
                question = QuestionClass::ASKED[k];
                break;
            }
        }
        plans.push(TurnPlan {
            channel,
            pause: rng.bernoulli(spec.pause_rate),
            disfluent: rng.bernoulli(spec.disfluency_rate),
            question,
            long: rng.bernoulli(spec.long_turn_rate),
            overlaps_next: false,
        });
    }
    // Overlaps only between a turn and the next other-channel turn, never chained.
    for t in 0..n_turns.saturating_sub(1) {
        let chained = t > 0 && plans[t - 1].overlaps_next;
        let switch = plans[t].channel != plans[t + 1].channel;
        let draw = rng.bernoulli(spec.overtalk_rate);
        if switch && !chained && draw {
            plans[t].overlaps_next = true;
        }
    }

    let mut turns: Vec<Turn> = Vec::with_capacity(n_turns);
    let mut segments: Vec<usize> = Vec::with_capacity(n_turns);
    let mut clock = 0u64;
    let mut horizon = 0u64;
    for t in 0..n_turns {
        let plan = &plans[t];
        let start = if t > 0 && plans[t - 1].overlaps_next {
            let prev = &turns[t - 1];
            let span = prev.duration_ms();
            prev.start_ms() + span / 4 + rng.below(span / 2 + 1)
        } else if t == 0 {
            rng.range(0, 2_000)
        } else {
            horizon + rng.range(300, 1_500)
        };
        let role = if plan.channel == 0 { Role::Agent } else { Role::Customer };
        let (tokens, n_segments) = build_turn_tokens(spec, plan, role, start, &mut rng);
        let mut turn = Turn::new(plan.channel, tokens);
        turn.annotations = Annotations {
            disfluent: Some(plan.disfluent),
            question: Some(plan.question),
        };
        clock = clock.max(turn.end_ms());
        horizon = clock;
        turns.push(turn);
        segments.push(n_segments);
    }

    let mut gold_turns = Vec::with_capacity(n_turns);
    for t in 0..n_turns {
        let plan = &plans[t];
        let mut cont = vec![Some(true); segments[t]];
        let last = cont.len() - 1;
        cont[last] = plans.get(t + 1).map(|next| next.channel == plan.channel);
        gold_turns.push(TurnGold {
            role: if plan.channel == 0 { Role::Agent } else { Role::Customer },
            pause: plan.pause,
            disfluent: plan.disfluent,
            question: plan.question,
            overtalk: plan.overlaps_next || (t > 0 && plans[t - 1].overlaps_next),
            long: plan.long,
            segment_continues: cont,
        });
    }

    let conv = Conversation {
        id: id.clone(),
        channels: vec![
            ChannelInfo {
                channel: 0,
                role: Role::Agent,
            },
            ChannelInfo {
                channel: 1,
                role: Role::Customer,
            },
        ],
        turns,
    };
    (conv, ConversationGold { id, turns: gold_turns })
}

fn draw_word<'a>(rng: &mut Stream, role: Role, prev: Option<&str>) -> &'a str {
    loop {
        let w = if rng.bernoulli(0.6) {
            *rng.choose(SHARED_VOCAB)
        } else if role == Role::Agent {
            *rng.choose(AGENT_VOCAB)
        } else {
            *rng.choose(CUSTOMER_VOCAB)
        };
        if Some(w) != prev {
            return w;
        }
    }
}

/// Builds the words of one turn, then lays them out in time. Returns the
/// tokens and the number of pause-delimited segments.
fn build_turn_tokens(
    spec: &CorpusSpec,
    plan: &TurnPlan,
    role: Role,
    start: u64,
    rng: &mut Stream,
) -> (Vec<TimedToken>, usize) {
    let mut words: Vec<&str> = Vec::new();
    if plan.question != QuestionClass::None {
        let k = QuestionClass::ASKED
            .iter()
            .position(|q| *q == plan.question)
            .unwrap_or(0);
        words.extend_from_slice(rng.choose(QUESTION_TEMPLATES[k]));
    }
    let n_content = if plan.long {
        spec.tokens_per_turn.1
    } else {
        rng.range(spec.tokens_per_turn.0 as u64, spec.tokens_per_turn.1 as u64) as usize
    };
    let n_content = n_content.saturating_sub(words.len()).max(2);
    for _ in 0..n_content {
        let prev = words.last().copied();
        words.push(draw_word(rng, role, prev));
    }

    let mut intermittent = false;
    if plan.disfluent {
        match rng.below(3) {
            0 => {
                let at = rng.index(words.len());
                words.insert(at, *rng.choose(lexicon::FILLERS));
            }
            1 => {
                let at = rng.index(words.len());
                let w = words[at];
                words.insert(at, w);
            }
            _ => {
                let at = rng.index(words.len());
                let marker = *rng.choose(lexicon::MULTIWORD_MARKERS);
                for (k, w) in marker.split(' ').enumerate() {
                    words.insert(at + k, w);
                }
            }
        }
    } else if rng.bernoulli(spec.fluent_cue_rate) {
        if rng.bernoulli(0.5) {
            words.insert(0, *rng.choose(lexicon::MARKERS));
        } else {
            intermittent = true;
        }
    }

    // Choose gap slots: long pause and the two intermittent gaps never share a slot.
    let n_gaps = words.len() - 1;
    let pause_slot = plan.pause.then(|| rng.index(n_gaps));
    let mut intermittent_slots = Vec::new();
    if intermittent && n_gaps >= 3 {
        let mut a = rng.index(n_gaps - 1);
        if Some(a) == pause_slot || Some(a + 1) == pause_slot {
            a = (0..n_gaps - 1)
                .find(|&s| Some(s) != pause_slot && Some(s + 1) != pause_slot)
                .unwrap_or(a);
        }
        if Some(a) != pause_slot && Some(a + 1) != pause_slot {
            intermittent_slots.extend([a, a + 1]);
        }
    }

    let mut tokens = Vec::with_capacity(words.len() + 32);
    let mut t = start;
    let long_target = plan.long.then(|| LONG_TURN_MIN_MS + rng.below(20_001));
    let mut k = 0usize;
    let mut prev_word: Option<&str> = None;
    loop {
        let word = if k < words.len() {
            words[k]
        } else {
            match long_target {
                Some(target) if t - start < target => draw_word(rng, role, prev_word),
                _ => break,
            }
        };
        if k > 0 {
            let gap = if Some(k - 1) == pause_slot {
                rng.range(5_200, 9_000)
            } else if intermittent_slots.contains(&(k - 1)) {
                rng.range(1_200, 3_000)
            } else {
                rng.range(20, 300)
            };
            t += gap;
        }
        let dur = rng.range(120, 500);
        tokens.push(TimedToken::new(word, t, t + dur));
        t += dur;
        prev_word = Some(word);
        k += 1;
    }
    let n_segments = 1 + usize::from(pause_slot.is_some());
    (tokens, n_segments)
}

/// Probabilities of planting a substitution, deletion or insertion at each
/// reference position. At most one edit is planted per position, so the
/// three must sum to at most 1 and the expected WER is their sum times 100.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    /// Reference positions forced intact after each planted edit.
    pub min_gap: usize,
}

impl Default for ErrorRates {
    /// Expected WER 18.4.
    fn default() -> Self {
        Self {
            p_sub: 0.10,
            p_del: 0.04,
            p_ins: 0.044,
            min_gap: 0,
        }
    }
}

impl ErrorRates {
    pub fn new(p_sub: f64, p_del: f64, p_ins: f64) -> Result<Self> {
        let r = Self {
            p_sub,
            p_del,
            p_ins,
            min_gap: 0,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn with_min_gap(mut self, gap: usize) -> Self {
        self.min_gap = gap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in [("p_sub", self.p_sub), ("p_del", self.p_del), ("p_ins", self.p_ins)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{n} = {p} is outside [0, 1]")));
            }
        }
        if self.p_sub + self.p_del + self.p_ins > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(
                "p_sub + p_del + p_ins must not exceed 1".into(),
            ));
        }
        Ok(())
    }

    /// Expected WER percentage of a corrupted corpus (ignoring `min_gap`).
    pub fn expected_wer(&self) -> f64 {
        100.0 * (self.p_sub + self.p_del + self.p_ins)
    }
}

/// Corrupts `reference` with the stream for item 0. See [`corrupt_indexed`].
pub fn corrupt_transcript(
    reference: &[String],
    rates: &ErrorRates,
    seed: u64,
) -> (Vec<String>, Vec<AlignmentOp>) {
    corrupt_indexed(reference, rates, seed, 0)
}

/// Corrupts one reference transcript. Substitutions draw a different word
/// from [`SHARED_VOCAB`]; insertions place a filler from
/// [`lexicon::FILLERS`] right after an intact word. Returns the hypothesis
/// and the planted script, which replays `reference` into it exactly.
pub fn corrupt_indexed(
    reference: &[String],
    rates: &ErrorRates,
    seed: u64,
    index: u64,
) -> (Vec<String>, Vec<AlignmentOp>) {
    let mut rng = Stream::new(seed, tags::CORRUPTION, index);
    let mut hyp: Vec<String> = Vec::with_capacity(reference.len() + 4);
    let mut ops = Vec::with_capacity(reference.len() + 4);
    let mut cooldown = 0usize;
    for (r, word) in reference.iter().enumerate() {
        if cooldown > 0 {
            cooldown -= 1;
            ops.push(AlignmentOp::matched(r, hyp.len()));
            hyp.push(word.clone());
            continue;
        }
        let u = rng.uniform();
        if u < rates.p_sub {
            let replacement = loop {
                let w = *rng.choose(SHARED_VOCAB);
                if w != word {
                    break w;
                }
            };
            ops.push(AlignmentOp::substitute(r, hyp.len()));
            hyp.push(replacement.to_string());
            cooldown = rates.min_gap;
        } else if u < rates.p_sub + rates.p_del {
            ops.push(AlignmentOp::delete(r));
            cooldown = rates.min_gap;
        } else if u < rates.p_sub + rates.p_del + rates.p_ins {
            ops.push(AlignmentOp::matched(r, hyp.len()));
            hyp.push(word.clone());
            ops.push(AlignmentOp::insert(hyp.len()));
            hyp.push((*rng.choose(lexicon::FILLERS)).to_string());
            cooldown = rates.min_gap;
        } else {
            ops.push(AlignmentOp::matched(r, hyp.len()));
            hyp.push(word.clone());
        }
    }
    (hyp, ops)
}

/// Random reference sentence of `len` words drawn from [`SHARED_VOCAB`],
/// never repeating a word twice in a row.
pub fn random_sentence(len: usize, rng: &mut Stream) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(len);
    while out.len() < len {
        let w = *rng.choose(SHARED_VOCAB);
        if out.last().map(String::as_str) != Some(w) {
            out.push(w.to_string());
        }
    }
    out
}

/// Planted Gaussian features: every item gets one vector per layer
/// `0..=layers`; only `informative_layer` carries the class signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub classes: Vec<String>,
    pub dim: usize,
    /// Euclidean distance between any two class means.
    pub separation: f64,
    pub noise_sigma: f64,
    pub n_per_class: usize,
    /// Highest layer index; the store holds layers `0..=layers`.
    pub layers: u32,
    pub informative_layer: u32,
    pub seed: u64,
}

impl FeatureSpec {
    fn validate(&self, n_classes: usize) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be at least 1".into()));
        }
        if n_classes > 2 && self.dim < n_classes {
            return Err(Error::InvalidConfig(format!(
                "{n_classes} classes need dim >= {n_classes}"
            )));
        }
        if self.informative_layer > self.layers {
            return Err(Error::InvalidConfig(format!(
                "informative layer {} above top layer {}",
                self.informative_layer, self.layers
            )));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.noise_sigma >= 0.0) || !self.separation.is_finite() {
            return Err(Error::InvalidConfig("noise_sigma and separation must be finite".into()));
        }
        Ok(())
    }
}

/// Class mean for class `c` of `k`: two classes sit at `+-separation/2` on
/// the first axis, more classes at `separation/sqrt(2)` on their own axis.
fn class_mean(c: usize, k: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    if k <= 2 {
        m[0] = if c == 0 { -separation / 2.0 } else { separation / 2.0 };
    } else {
        m[c] = separation / core::f64::consts::SQRT_2;
    }
    m
}

fn noisy(mean: &[f64], sigma: f64, rng: &mut Stream) -> Vec<f32> {
    mean.iter().map(|m| (m + sigma * rng.normal()) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFeatures {
    pub store: TensorStore,
    /// `(utterance id, class index)` in generation order.
    pub items: Vec<(String, usize)>,
}

impl PlantedFeatures {
    /// Instances labeled with class names, all in `split`.
    pub fn instances(&self, classes: &[String], split: Split) -> Vec<ProbeInstance> {
        self.items
            .iter()
            .map(|(id, c)| ProbeInstance {
                id: id.clone(),
                conv_id: id.clone(),
                text: String::new(),
                label: Label::Class(classes[*c].clone()),
                split,
                position: None,
            })
            .collect()
    }
}

/// Generates `n_per_class` items per class with planted utterance vectors.
pub fn gen_feature_store(spec: &FeatureSpec) -> Result<PlantedFeatures> {
    let k = spec.classes.len();
    spec.validate(k)?;
    let mut items = Vec::with_capacity(k * spec.n_per_class);
    for _ in 0..spec.n_per_class {
        for c in 0..k {
            items.push((format!("u{:07}", items.len()), c));
        }
    }
    let store = plant_utterance_vectors(&items, k, spec)?;
    Ok(PlantedFeatures { store, items })
}

/// Planted utterance vectors for caller-chosen `(id, class)` items.
pub fn plant_utterance_vectors(
    items: &[(String, usize)],
    n_classes: usize,
    spec: &FeatureSpec,
) -> Result<TensorStore> {
    spec.validate(n_classes)?;
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| class_mean(c, n_classes, spec.dim, spec.separation))
        .collect();
    let zero = vec![0.0; spec.dim];
    let mut store = TensorStore::new();
    for (idx, (id, c)) in items.iter().enumerate() {
        let mut rng = Stream::new(spec.seed, tags::FEATURES, idx as u64);
        for layer in 0..=spec.layers {
            let mean = if layer == spec.informative_layer { &means[*c] } else { &zero };
            let v = noisy(mean, spec.noise_sigma, &mut rng);
            store.insert(RecordKey::utterance(id.clone(), layer), Matrix::new(1, spec.dim, v)?)?;
        }
    }
    Ok(store)
}

/// Planted representations for an existing probe dataset.
///
/// Utterance-level instances get one vector per layer under their id;
/// token-level instances share a token matrix per utterance (`conv_id`)
/// whose labeled rows carry the signal and whose other rows are noise.
/// Regression labels are standardized and scaled onto the first axis.
pub fn plant_dataset(dataset: &ProbeDataset, spec: &FeatureSpec) -> Result<TensorStore> {
    let n_classes = match &dataset.label_set {
        LabelSet::Classes(c) => c.len(),
        LabelSet::Regression => 1,
    };
    spec.validate(n_classes)?;
    let (mu, sd) = match &dataset.label_set {
        LabelSet::Regression => {
            let ys: Vec<f64> = dataset.instances.iter().filter_map(|i| i.label.value()).collect();
            (linalg::mean(&ys), linalg::std_dev(&ys).max(1e-12))
        }
        LabelSet::Classes(_) => (0.0, 1.0),
    };
    let mean_for = |inst: &ProbeInstance| -> Result<Vec<f64>> {
        match &dataset.label_set {
            LabelSet::Classes(classes) => {
                let c = dataset.class_index(inst)?;
                Ok(class_mean(c, classes.len(), spec.dim, spec.separation))
            }
            LabelSet::Regression => {
                let mut m = vec![0.0; spec.dim];
                m[0] = (inst.label.value().unwrap_or(mu) - mu) / sd * spec.separation / 2.0;
                Ok(m)
            }
        }
    };
    let zero = vec![0.0; spec.dim];
    let mut store = TensorStore::new();

    // Utterance-level instances, in dataset order.
    let mut idx = 0u64;
    for inst in dataset.instances.iter().filter(|i| i.position.is_none()) {
        let mut rng = Stream::new(spec.seed, tags::FEATURES, idx);
        idx += 1;
        let mean = mean_for(inst)?;
        for layer in 0..=spec.layers {
            let m = if layer == spec.informative_layer { &mean } else { &zero };
            let v = noisy(m, spec.noise_sigma, &mut rng);
            store.insert(RecordKey::utterance(inst.id.clone(), layer), Matrix::new(1, spec.dim, v)?)?;
        }
    }

    // Token-level instances grouped by utterance, in first-seen order.
    let mut groups: Vec<(&str, usize, Vec<&ProbeInstance>)> = Vec::new();
    for inst in dataset.instances.iter().filter(|i| i.position.is_some()) {
        let rows = inst.text.split_whitespace().count();
        match groups.iter_mut().find(|g| g.0 == inst.conv_id) {
            Some(g) => g.2.push(inst),
            None => groups.push((inst.conv_id.as_str(), rows, vec![inst])),
        }
    }
    for (id, rows, insts) in groups {
        let mut rng = Stream::new(spec.seed, tags::FEATURES, idx);
        idx += 1;
        let rows = insts
            .iter()
            .filter_map(|i| i.position)
            .map(|p| p + 1)
            .max()
            .unwrap_or(0)
            .max(rows);
        let mut row_means = vec![zero.clone(); rows];
        for inst in &insts {
            row_means[inst.position.unwrap_or(0)] = mean_for(inst)?;
        }
        for layer in 0..=spec.layers {
            let mut data = Vec::with_capacity(rows * spec.dim);
            for m in &row_means {
                let m = if layer == spec.informative_layer { m } else { &zero };
                data.extend(noisy(m, spec.noise_sigma, &mut rng));
            }
            store.insert(RecordKey::tokens(id, layer), Matrix::new(rows, spec.dim, data)?)?;
        }
    }
    Ok(store)
}

/// Planted utterance vectors shared by several datasets. Each task gets its
/// own block of axes (one for binary and regression tasks, one per class
/// otherwise); an id labeled by several tasks carries the sum of their
/// means. A single dataset is planted exactly as [`plant_dataset`] does.
pub fn plant_datasets(datasets: &[&ProbeDataset], spec: &FeatureSpec) -> Result<TensorStore> {
    match datasets {
        [] => return Err(Error::InvalidConfig("no datasets to plant".into())),
        [one] => return plant_dataset(one, spec),
        _ => {}
    }
    let mut offsets = Vec::with_capacity(datasets.len());
    let mut used = 0usize;
    for ds in datasets {
        if ds.instances.iter().any(|i| i.position.is_some()) {
            return Err(Error::InvalidConfig(format!(
                "token-level task {} cannot share a planted store",
                ds.task
            )));
        }
        let width = match &ds.label_set {
            LabelSet::Classes(c) if c.len() > 2 => c.len(),
            _ => 1,
        };
        offsets.push((used, width));
        used += width;
    }
    if used > spec.dim {
        return Err(Error::InvalidConfig(format!("{used} task axes need dim >= {used}")));
    }
    spec.validate(1)?;

    let mut order: Vec<String> = Vec::new();
    let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (ds, &(off, width)) in datasets.iter().zip(&offsets) {
        let (mu, sd) = match &ds.label_set {
            LabelSet::Regression => {
                let ys: Vec<f64> = ds.instances.iter().filter_map(|i| i.label.value()).collect();
                (linalg::mean(&ys), linalg::std_dev(&ys).max(1e-12))
            }
            LabelSet::Classes(_) => (0.0, 1.0),
        };
        for inst in &ds.instances {
            let block = match &ds.label_set {
                LabelSet::Classes(c) => class_mean(ds.class_index(inst)?, c.len(), width, spec.separation),
                LabelSet::Regression => {
                    vec![(inst.label.value().unwrap_or(mu) - mu) / sd * spec.separation / 2.0]
                }
            };
            let m = means.entry(inst.id.clone()).or_insert_with(|| {
                order.push(inst.id.clone());
                vec![0.0; spec.dim]
            });
            for (k, v) in block.into_iter().enumerate() {
                m[off + k] += v;
            }
        }
    }

    let zero = vec![0.0; spec.dim];
    let mut store = TensorStore::new();
    for (idx, id) in order.iter().enumerate() {
        let mut rng = Stream::new(spec.seed, tags::FEATURES, idx as u64);
        for layer in 0..=spec.layers {
            let m = if layer == spec.informative_layer { &means[id] } else { &zero };
            let v = noisy(m, spec.noise_sigma, &mut rng);
            store.insert(RecordKey::utterance(id.clone(), layer), Matrix::new(1, spec.dim, v)?)?;
        }
    }
    Ok(store)
}

/// Binary tasks whose labels each shift the representation along their own
/// direction; all tasks share one store (layer 0).
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSubspaceSpec {
    pub dim: usize,
    pub n_items: usize,
    /// One direction per task (normalized internally).
    pub directions: Vec<Vec<f64>>,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedSubspace {
    pub store: TensorStore,
    pub ids: Vec<String>,
    /// `labels[task][item]` in {0, 1}.
    pub labels: Vec<Vec<usize>>,
}

impl SharedSubspace {
    /// Instances for one task, with splits assigned by item order:
    /// the first `train` items, then `valid`, then the rest.
    pub fn instances(&self, task: usize, train: usize, valid: usize) -> Vec<ProbeInstance> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| ProbeInstance {
                id: id.clone(),
                conv_id: id.clone(),
                text: String::new(),
                label: Label::Class(if self.labels[task][i] == 1 { "pos" } else { "neg" }.into()),
                split: if i < train {
                    Split::Train
                } else if i < train + valid {
                    Split::Valid
                } else {
                    Split::Test
                },
                position: None,
            })
            .collect()
    }
}

pub fn gen_shared_subspace(spec: &SharedSubspaceSpec) -> Result<SharedSubspace> {
    if spec.dim == 0 || spec.directions.iter().any(|d| d.len() != spec.dim) {
        return Err(Error::InvalidConfig("every direction must have length dim".into()));
    }
    let dirs: Vec<Vec<f64>> = spec
        .directions
        .iter()
        .map(|d| {
            let n = linalg::norm(d).max(1e-300);
            d.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut store = TensorStore::new();
    let mut ids = Vec::with_capacity(spec.n_items);
    let mut labels = vec![Vec::with_capacity(spec.n_items); dirs.len()];
    for i in 0..spec.n_items {
        let mut rng = Stream::new(spec.seed, tags::FEATURES, i as u64);
        let mut mean = vec![0.0; spec.dim];
        for (t, d) in dirs.iter().enumerate() {
            let y = rng.below(2) as usize;
            labels[t].push(y);
            let s = if y == 1 { 0.5 } else { -0.5 } * spec.separation;
            for (m, x) in mean.iter_mut().zip(d) {
                *m += s * x;
            }
        }
        let id = format!("s{i:07}");
        let v = noisy(&mean, spec.noise_sigma, &mut rng);
        store.insert(RecordKey::utterance(id.clone(), 0), Matrix::new(1, spec.dim, v)?)?;
        ids.push(id);
    }
    Ok(SharedSubspace { store, ids, labels })
}

/// A `t x t` row-stochastic matrix: softmax of standard-normal logits per row.
pub fn random_attention(t: usize, rng: &mut Stream) -> Matrix {
    let mut data = Vec::with_capacity(t * t);
    for _ in 0..t {
        let mut row: Vec<f64> = (0..t).map(|_| rng.normal()).collect();
        linalg::softmax(&mut row);
        data.extend(row.into_iter().map(|x| x as f32));
    }
    Matrix { rows: t, cols: t, data }
}

/// Row `i` puts all of its mass on `targets[i]`.
pub fn one_hot_attention(targets: &[usize]) -> Matrix {
    let t = targets.len();
    let mut m = Matrix::zeros(t, t);
    for (i, &j) in targets.iter().enumerate() {
        m.data[i * t + j] = 1.0;
    }
    m
}

pub fn uniform_attention(t: usize) -> Matrix {
    Matrix {
        rows: t,
        cols: t,
        data: vec![1.0 / t as f32; t * t],
    }
}

/// Dependency-probe store: every (layer, head) is random except the planted
/// one, where each dependent attends with weight 1 to its gold head (root
/// tokens attend to themselves).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub layers: u32,
    pub heads: u32,
    pub planted: Option<(u32, u32)>,
    pub seed: u64,
}

pub fn plant_dependency_attention(
    sentences: &[(String, DependencySentence)],
    spec: &AttentionSpec,
) -> Result<TensorStore> {
    let mut store = TensorStore::new();
    for (idx, (id, sent)) in sentences.iter().enumerate() {
        sent.check()?;
        let t = sent.len();
        let targets: Vec<usize> = sent
            .heads
            .iter()
            .enumerate()
            .map(|(i, &h)| if h == 0 { i } else { h - 1 })
            .collect();
        let mut rng = Stream::new(spec.seed, tags::ATTENTION, idx as u64);
        for layer in 0..=spec.layers {
            for head in 0..spec.heads {
                let m = if spec.planted == Some((layer, head)) {
                    one_hot_attention(&targets)
                } else {
                    random_attention(t, &mut rng)
                };
                store.insert(RecordKey::attention(id.clone(), layer, head), m)?;
            }
        }
    }
    Ok(store)
}

/// Random head assignment over `t` tokens with exactly one root; every
/// other token points at a uniformly chosen different token, so the result
/// need not be a tree. Relations come from `relations`.
pub fn random_dependency_sentence(t: usize, relations: &[&str], rng: &mut Stream) -> DependencySentence {
    let root = rng.index(t);
    let mut heads = vec![0usize; t];
    for (i, h) in heads.iter_mut().enumerate() {
        if i == root {
            continue;
        }
        let mut j = rng.index(t);
        while j == i {
            j = rng.index(t);
        }
        *h = j + 1;
    }
    DependencySentence {
        tokens: (0..t).map(|i| format!("w{i}")).collect(),
        heads,
        relations: (0..t)
            .map(|i| {
                if i == root {
                    "root".to_string()
                } else {
                    (*rng.choose(relations)).to_string()
                }
            })
            .collect(),
    }
}
