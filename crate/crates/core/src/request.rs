//! Inference request model.

/// Opaque token identifier. No tokenizer is involved anywhere in this crate.
pub type Token = u32;

/// Prompt content. Traces either carry full token sequences (required for
/// prefix features) or lengths only (common for published datasets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    /// Full prompt token sequence.
    Tokens(Vec<Token>),
    /// Length-only form: token count without identities.
    Length(usize),
}

/// One inference request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    /// Unique identifier within a trace.
    pub id: String,
    /// Prompt tokens or prompt length.
    pub prompt: Prompt,
    /// Decode tokens produced so far.
    pub generated: usize,
    /// Simulation step at which the request becomes schedulable.
    pub arrival_step: usize,
    /// Optional cap on decode tokens; the simulator stops growing the
    /// request once `generated` reaches it.
    pub output_len: Option<usize>,
}

impl Request {
    /// Request with a full token sequence and no decode history.
    pub fn with_tokens(id: impl Into<String>, tokens: Vec<Token>) -> Self {
        Self {
            id: id.into(),
            prompt: Prompt::Tokens(tokens),
            generated: 0,
            arrival_step: 0,
            output_len: None,
        }
    }

    /// Length-only request with no decode history.
    pub fn with_len(id: impl Into<String>, prompt_len: usize) -> Self {
        Self {
            id: id.into(),
            prompt: Prompt::Length(prompt_len),
            generated: 0,
            arrival_step: 0,
            output_len: None,
        }
    }

    /// Prompt token count.
    pub fn prompt_len(&self) -> usize {
        match &self.prompt {
            Prompt::Tokens(tokens) => tokens.len(),
            Prompt::Length(len) => *len,
        }
    }

    /// Effective length `L`: prompt tokens plus decode tokens so far.
    pub fn effective_len(&self) -> usize {
        self.prompt_len() + self.generated
    }

    /// Prompt tokens, when the trace carries them.
    pub fn tokens(&self) -> Option<&[Token]> {
        match &self.prompt {
            Prompt::Tokens(tokens) => Some(tokens),
            Prompt::Length(_) => None,
        }
    }

    /// Whether this request carries a full token sequence.
    pub fn has_tokens(&self) -> bool {
        matches!(self.prompt, Prompt::Tokens(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_len_sums_prompt_and_generated() {
        let mut req = Request::with_len("r1", 64);
        assert_eq!(req.effective_len(), 64);
        req.generated = 5;
        assert_eq!(req.effective_len(), 69);
    }

    #[test]
    fn token_form_exposes_tokens() {
        let req = Request::with_tokens("r1", vec![1, 2, 3]);
        assert_eq!(req.prompt_len(), 3);
        assert_eq!(req.tokens(), Some(&[1, 2, 3][..]));
        assert!(req.has_tokens());

        let req = Request::with_len("r2", 3);
        assert_eq!(req.tokens(), None);
        assert!(!req.has_tokens());
    }
}
