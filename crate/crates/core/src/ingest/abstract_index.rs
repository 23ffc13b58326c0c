use std::collections::BTreeMap;

/// OpenAlex ships abstracts as `token -> [positions]`.
pub type InvertedIndex = BTreeMap<String, Vec<i64>>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AbstractError {
    #[error("position {position} claimed by both `{first}` and `{second}`")]
    DuplicatePosition {
        position: i64,
        first: String,
        second: String,
    },
    #[error("token `{token}` has negative position {position}")]
    NegativePosition { token: String, position: i64 },
}

/// Places every token at its positions and joins them with single spaces.
/// Gaps in the position sequence simply collapse.
pub fn reconstruct_abstract(index: &InvertedIndex) -> Result<String, AbstractError> {
    let mut slots: Vec<(i64, &str)> = Vec::new();
    for (token, positions) in index {
        for &p in positions {
            if p < 0 {
                return Err(AbstractError::NegativePosition {
                    token: token.clone(),
                    position: p,
                });
            }
            slots.push((p, token));
        }
    }
    slots.sort_unstable();
    if let Some(w) = slots.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(AbstractError::DuplicatePosition {
            position: w[0].0,
            first: w[0].1.to_string(),
            second: w[1].1.to_string(),
        });
    }
    Ok(slots.into_iter().map(|(_, t)| t).collect::<Vec<_>>().join(" "))
}

/// Whitespace tokenization followed by inversion; the inverse of
/// [`reconstruct_abstract`] for text with single spaces.
pub fn invert_text(text: &str) -> InvertedIndex {
    let mut index = InvertedIndex::new();
    for (i, tok) in text.split_whitespace().enumerate() {
        index.entry(tok.to_string()).or_default().push(i as i64);
    }
    index
}
