//! Traces, segments, contexts, and the reserved vocabulary layout.

use super::PolicyError;
use serde::{Deserialize, Serialize};

pub type Token = u32;

/// Reserved token ids. The layout is fixed: one delimiter per segment kind,
/// the two mask tokens, then content tokens.
pub mod vocab {
    use super::Token;

    pub const DELIM_THINKING: Token = 0;
    pub const DELIM_INTERMEDIATE: Token = 1;
    pub const DELIM_REFLECTION: Token = 2;
    pub const DELIM_OUTPUT: Token = 3;
    pub const DELIM_MASK: Token = 4;
    pub const MASK_OFF: Token = 5;
    pub const MASK_ON: Token = 6;
    /// First content token id.
    pub const CONTENT_BASE: Token = 7;

    /// Minimum vocabulary size for a policy that emits mask blocks.
    pub const MIN_VOCAB: usize = CONTENT_BASE as usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Thinking,
    Intermediate,
    Reflection,
    Output,
    Mask,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::Thinking,
        SegmentKind::Intermediate,
        SegmentKind::Reflection,
        SegmentKind::Output,
        SegmentKind::Mask,
    ];

    /// Delimiter token fed as the previous-token input at the start of a
    /// trace beginning with this segment.
    pub fn delimiter(self) -> Token {
        match self {
            SegmentKind::Thinking => vocab::DELIM_THINKING,
            SegmentKind::Intermediate => vocab::DELIM_INTERMEDIATE,
            SegmentKind::Reflection => vocab::DELIM_REFLECTION,
            SegmentKind::Output => vocab::DELIM_OUTPUT,
            SegmentKind::Mask => vocab::DELIM_MASK,
        }
    }

    fn order(self) -> u8 {
        match self {
            SegmentKind::Thinking => 0,
            SegmentKind::Intermediate => 1,
            SegmentKind::Reflection => 2,
            SegmentKind::Output => 3,
            SegmentKind::Mask => 4,
        }
    }
}

/// The multimodal input stand-in: a feature vector plus a short prompt.
///
/// For tabular policies the first prompt token encodes the context class as
/// `CONTENT_BASE + class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContextRepr", into = "ContextRepr")]
pub struct Context {
    pub features: Vec<f64>,
    pub prompt: Vec<Token>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextRepr {
    features: Vec<f64>,
    prompt: Vec<Token>,
}

impl TryFrom<ContextRepr> for Context {
    type Error = String;
    fn try_from(r: ContextRepr) -> Result<Self, String> {
        Context::new(r.features, r.prompt).map_err(|e| e.to_string())
    }
}

impl From<Context> for ContextRepr {
    fn from(c: Context) -> Self {
        ContextRepr {
            features: c.features,
            prompt: c.prompt,
        }
    }
}

impl Context {
    pub fn new(features: Vec<f64>, prompt: Vec<Token>) -> Result<Self, PolicyError> {
        if features.iter().any(|f| !f.is_finite()) {
            return Err(PolicyError::InvalidInput(
                "context features must be finite".into(),
            ));
        }
        Ok(Self { features, prompt })
    }

    /// Context class encoded in the first prompt token, if any.
    pub fn class(&self) -> Option<usize> {
        self.prompt
            .first()
            .and_then(|&t| (t as usize).checked_sub(vocab::CONTENT_BASE as usize))
    }
}

/// A segmented token sequence. Segment kinds appear at most once each, in
/// the fixed thinking < intermediate < reflection < output < mask order,
/// and every present segment is non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(SegmentKind, Vec<Token>)>", into = "Vec<(SegmentKind, Vec<Token>)>")]
pub struct Trace {
    segments: Vec<(SegmentKind, Vec<Token>)>,
}

impl Trace {
    pub fn new(segments: Vec<(SegmentKind, Vec<Token>)>) -> Result<Self, PolicyError> {
        if segments.is_empty() {
            return Err(PolicyError::InvalidInput("trace has no segments".into()));
        }
        let mut last: Option<u8> = None;
        for (kind, tokens) in &segments {
            if tokens.is_empty() {
                return Err(PolicyError::InvalidInput(format!(
                    "segment {kind:?} is empty"
                )));
            }
            if let Some(prev) = last {
                if kind.order() <= prev {
                    return Err(PolicyError::InvalidInput(
                        "segments out of canonical order or duplicated".into(),
                    ));
                }
            }
            last = Some(kind.order());
        }
        Ok(Self { segments })
    }

    pub fn single(kind: SegmentKind, tokens: Vec<Token>) -> Result<Self, PolicyError> {
        Self::new(vec![(kind, tokens)])
    }

    pub fn segments(&self) -> &[(SegmentKind, Vec<Token>)] {
        &self.segments
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&[Token]> {
        self.segments
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, t)| t.as_slice())
    }

    /// Range of flattened positions occupied by `kind`.
    pub fn segment_range(&self, kind: SegmentKind) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for (k, tokens) in &self.segments {
            if *k == kind {
                return Some(start..start + tokens.len());
            }
            start += tokens.len();
        }
        None
    }

    pub fn first_kind(&self) -> SegmentKind {
        self.segments[0].0
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn flat_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.segments.iter().flat_map(|(_, t)| t.iter().copied())
    }
}

impl TryFrom<Vec<(SegmentKind, Vec<Token>)>> for Trace {
    type Error = String;
    fn try_from(v: Vec<(SegmentKind, Vec<Token>)>) -> Result<Self, String> {
        Trace::new(v).map_err(|e| e.to_string())
    }
}

impl From<Trace> for Vec<(SegmentKind, Vec<Token>)> {
    fn from(t: Trace) -> Self {
        t.segments
    }
}

/// Requested token counts per segment for sampling. Zero-length segments
/// are omitted from the sampled trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub thinking: usize,
    pub intermediate: usize,
    pub reflection: usize,
    pub output: usize,
    pub mask: usize,
}

impl SegmentPlan {
    pub fn lengths(&self) -> [(SegmentKind, usize); 5] {
        [
            (SegmentKind::Thinking, self.thinking),
            (SegmentKind::Intermediate, self.intermediate),
            (SegmentKind::Reflection, self.reflection),
            (SegmentKind::Output, self.output),
            (SegmentKind::Mask, self.mask),
        ]
    }

    pub fn total_len(&self) -> usize {
        self.thinking + self.intermediate + self.reflection + self.output + self.mask
    }

    /// Plan with the same segment lengths as an existing trace.
    pub fn of_trace(trace: &Trace) -> Self {
        let get = |k| trace.segment(k).map_or(0, <[Token]>::len);
        Self {
            thinking: get(SegmentKind::Thinking),
            intermediate: get(SegmentKind::Intermediate),
            reflection: get(SegmentKind::Reflection),
            output: get(SegmentKind::Output),
            mask: get(SegmentKind::Mask),
        }
    }

    pub fn validate(&self, grid_side: usize) -> Result<(), PolicyError> {
        if self.mask != 0 && self.mask != grid_side * grid_side {
            return Err(PolicyError::InvalidInput(format!(
                "mask segment length {} must be 0 or {}",
                self.mask,
                grid_side * grid_side
            )));
        }
        if self.total_len() == 0 {
            return Err(PolicyError::InvalidInput("empty segment plan".into()));
        }
        Ok(())
    }
}
