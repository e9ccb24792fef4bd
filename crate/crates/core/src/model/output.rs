use crate::scalar::Scalar;

/// Attention of the query heads sharing one KV head, at one position.
///
/// `rows[g]`, `outputs[g]` and `queries[g]` belong to the g-th query head of
/// the group. Each row spans the store's entries at attention time, in
/// entry order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupAttention<T> {
    pub rows: Vec<Vec<T>>,
    pub outputs: Vec<Vec<T>>,
    pub queries: Vec<Vec<T>>,
}

impl<T: Scalar> GroupAttention<T> {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            rows: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            queries: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, query: Vec<T>, row: Vec<T>, output: Vec<T>) {
        self.queries.push(query);
        self.rows.push(row);
        self.outputs.push(output);
    }

    /// Rows only, for scripted replays that never look at outputs.
    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        Self {
            rows,
            outputs: Vec::new(),
            queries: Vec::new(),
        }
    }
}

/// The group rows produced by one prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow<T> {
    pub producer: usize,
    pub rows: Vec<Vec<T>>,
}

/// What one forward step hands to the eviction layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    /// Absolute position of the token just processed.
    pub position: usize,
    pub token: u32,
    pub logits: Vec<T>,
    /// One entry per store, indexed `layer * n_kv_heads + kv_head`.
    pub attention: Vec<GroupAttention<T>>,
    /// Prefill only: per store, rows of the last `R` prompt positions, oldest first.
    pub prefill_window: Vec<Vec<WindowRow<T>>>,
}

impl<T: Scalar> StepOutput<T> {
    /// A hand-built step with no logits.
    pub fn scripted(position: usize, attention: Vec<GroupAttention<T>>) -> Self {
        Self {
            position,
            token: 0,
            logits: Vec::new(),
            attention,
            prefill_window: Vec::new(),
        }
    }

    pub fn with_prefill_window(mut self, window: Vec<Vec<WindowRow<T>>>) -> Self {
        self.prefill_window = window;
        self
    }
}
