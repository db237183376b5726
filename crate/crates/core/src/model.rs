//! Canonical domain types shared by every module.
//!
//! Timing is carried in integer milliseconds throughout; token text is
//! lowercase with no internal whitespace.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// A recognized word with its time span on one channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimedToken {
    pub text: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl TimedToken {
    pub fn new(text: impl Into<String>, start_ms: u64, end_ms: u64) -> Self {
        Self {
            text: text.into(),
            start_ms,
            end_ms,
        }
    }
}

/// Question classes used by the question-identification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionClass {
    Entity,
    Descriptive,
    Boolean,
    Choice,
    None,
}

impl QuestionClass {
    pub const ASKED: [QuestionClass; 4] = [
        QuestionClass::Entity,
        QuestionClass::Descriptive,
        QuestionClass::Boolean,
        QuestionClass::Choice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionClass::Entity => "entity",
            QuestionClass::Descriptive => "descriptive",
            QuestionClass::Boolean => "boolean",
            QuestionClass::Choice => "choice",
            QuestionClass::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "entity" => QuestionClass::Entity,
            "descriptive" => QuestionClass::Descriptive,
            "boolean" => QuestionClass::Boolean,
            "choice" => QuestionClass::Choice,
            "none" => QuestionClass::None,
            _ => return None,
        })
    }
}

/// Optional human (or generator) labels attached to a turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Annotations {
    pub disfluent: Option<bool>,
    pub question: Option<QuestionClass>,
}

impl Annotations {
    pub fn is_empty(&self) -> bool {
        self.disfluent.is_none() && self.question.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Turn {
    pub channel: u32,
    pub tokens: Vec<TimedToken>,
    pub annotations: Annotations,
}

impl Turn {
    pub fn new(channel: u32, tokens: Vec<TimedToken>) -> Self {
        Self {
            channel,
            tokens,
            annotations: Annotations::default(),
        }
    }

    /// `[first token start, last token end]`, or `None` for an empty turn.
    pub fn span(&self) -> Option<(u64, u64)> {
        let first = self.tokens.first()?;
        let last = self.tokens.last()?;
        Some((first.start_ms, last.end_ms))
    }

    pub fn start_ms(&self) -> u64 {
        self.tokens.first().map_or(0, |t| t.start_ms)
    }

    pub fn end_ms(&self) -> u64 {
        self.tokens.last().map_or(0, |t| t.end_ms)
    }

    pub fn duration_ms(&self) -> u64 {
        self.end_ms().saturating_sub(self.start_ms())
    }

    /// Space-joined token text.
    pub fn text(&self) -> String {
        join_tokens(self.tokens.iter().map(|t| t.text.as_str()))
    }

    /// Gaps between consecutive tokens, `start[i+1] - end[i]`, clamped at 0.
    pub fn gaps_ms(&self) -> impl Iterator<Item = u64> + '_ {
        self.tokens
            .windows(2)
            .map(|w| w[1].start_ms.saturating_sub(w[0].end_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Agent,
    Customer,
    Ivr,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Agent, Role::Customer, Role::Ivr];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Agent => "agent",
            Role::Customer => "customer",
            Role::Ivr => "ivr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "agent" => Role::Agent,
            "customer" => Role::Customer,
            "ivr" => Role::Ivr,
            _ => return None,
        })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelInfo {
    pub channel: u32,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Conversation {
    pub id: String,
    pub channels: Vec<ChannelInfo>,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn role_of(&self, channel: u32) -> Option<Role> {
        self.channels
            .iter()
            .find(|c| c.channel == channel)
            .map(|c| c.role)
    }
}

/// One invariant violation found by [`validate_conversation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub turn: Option<usize>,
    pub token: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.turn, self.token) {
            (Some(t), Some(k)) => write!(f, "turn {t} token {k}: {}", self.message),
            (Some(t), None) => write!(f, "turn {t}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

fn violation(turn: Option<usize>, token: Option<usize>, message: String) -> Violation {
    Violation {
        turn,
        token,
        message,
    }
}

/// Checks every structural invariant of a conversation. An empty result
/// means the conversation is well formed.
pub fn validate_conversation(conv: &Conversation) -> Vec<Violation> {
    let mut out = Vec::new();

    for (i, c) in conv.channels.iter().enumerate() {
        if conv.channels[..i].iter().any(|p| p.channel == c.channel) {
            out.push(violation(
                None,
                None,
                format!("channel index {} declared more than once", c.channel),
            ));
        }
    }

    let mut prev_start: Option<u64> = None;
    for (ti, turn) in conv.turns.iter().enumerate() {
        if conv.role_of(turn.channel).is_none() {
            out.push(violation(
                Some(ti),
                None,
                format!("channel {} is not declared", turn.channel),
            ));
        }
        if turn.tokens.is_empty() {
            out.push(violation(Some(ti), None, "turn has no tokens".to_string()));
            continue;
        }
        for (ki, tok) in turn.tokens.iter().enumerate() {
            if tok.text.is_empty() {
                out.push(violation(Some(ti), Some(ki), "empty token text".to_string()));
            } else if tok.text.chars().any(char::is_whitespace) {
                out.push(violation(
                    Some(ti),
                    Some(ki),
                    format!("token {:?} contains whitespace", tok.text),
                ));
            } else if tok.text.chars().any(char::is_uppercase) {
                out.push(violation(
                    Some(ti),
                    Some(ki),
                    format!("token {:?} is not lowercase", tok.text),
                ));
            }
            if tok.end_ms < tok.start_ms {
                out.push(violation(
                    Some(ti),
                    Some(ki),
                    format!("end_ms {} precedes start_ms {}", tok.end_ms, tok.start_ms),
                ));
            }
            if ki > 0 && tok.start_ms < turn.tokens[ki - 1].start_ms {
                out.push(violation(
                    Some(ti),
                    Some(ki),
                    "tokens not sorted by start_ms".to_string(),
                ));
            }
        }
        let start = turn.start_ms();
        if let Some(p) = prev_start {
            if start < p {
                out.push(violation(
                    Some(ti),
                    None,
                    "turns not sorted by start time".to_string(),
                ));
            }
        }
        prev_start = Some(start);
    }
    out
}

/// A reference transcript and an ASR hypothesis for the same utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UtterancePair {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

impl UtterancePair {
    /// Lowercases and whitespace-splits both sides. Fails on an empty reference.
    pub fn from_text(id: impl Into<String>, reference: &str, hypothesis: &str) -> crate::Result<Self> {
        let id = id.into();
        let reference = normalize_tokens(reference);
        if reference.is_empty() {
            return Err(crate::Error::EmptyReference { id });
        }
        Ok(Self {
            id,
            reference,
            hypothesis: normalize_tokens(hypothesis),
        })
    }
}

/// Whitespace tokenization plus lowercasing, the only normalization applied
/// to transcript text.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn join_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for (i, t) in tokens.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// A sentence with 1-based head indices (0 = root) and relation labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DependencySentence {
    pub tokens: Vec<String>,
    pub heads: Vec<usize>,
    pub relations: Vec<String>,
}

impl DependencySentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn check(&self) -> crate::Result<()> {
        let n = self.tokens.len();
        if self.heads.len() != n || self.relations.len() != n {
            return Err(crate::Error::LengthMismatch(format!(
                "{} tokens, {} heads, {} relations",
                n,
                self.heads.len(),
                self.relations.len()
            )));
        }
        if let Some(i) = self.heads.iter().position(|&h| h > n) {
            return Err(crate::Error::SpanOutOfRange(format!(
                "row {} has head {} in a {}-token sentence",
                i + 1,
                self.heads[i],
                n
            )));
        }
        Ok(())
    }
}

/// A free-text utterance with a categorical label, e.g. a dialog act.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledUtterance {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(String),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Option<&str> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Label::Value(v) => Some(*v),
            Label::Class(_) => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => f.write_str(c),
            Label::Value(v) => write!(f, "{v}"),
        }
    }
}

/// One labeled probe example.
///
/// `conv_id` groups instances for conversation-disjoint splitting. For
/// token-level tasks `position` indexes the token inside the utterance
/// identified by `conv_id`, and features are read from that utterance's
/// token matrix; utterance-level tasks read the vector stored under `id`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInstance {
    pub id: String,
    pub conv_id: String,
    pub text: String,
    pub label: Label,
    pub split: Split,
    pub position: Option<usize>,
}

impl ProbeInstance {
    /// The tensor-store id holding this instance's representation.
    pub fn feature_id(&self) -> &str {
        if self.position.is_some() {
            &self.conv_id
        } else {
            &self.id
        }
    }
}
