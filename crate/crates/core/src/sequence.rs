use serde::Serialize;

use crate::SeqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqStatus {
    Waiting,
    Running,
    Preempted,
    Finished,
}

/// Scheduler-side bookkeeping for one request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceState {
    pub id: SeqId,
    pub prompt_len: usize,
    pub max_output: usize,
    /// Tokens generated so far; survives preemption.
    pub generated: usize,
    pub status: SeqStatus,
    pub last_compressed_at: Option<u64>,
    /// Step of the most recent admission (re-set on re-admission after preemption).
    pub admitted_at: u64,
    /// Monotone admission counter; breaks ties between admissions in one step.
    pub admission_seq: u64,
    /// Tokens appended since the last compression of this sequence.
    pub uncompressed_tokens: usize,
}

impl SequenceState {
    pub fn new(id: SeqId, prompt_len: usize, max_output: usize) -> Self {
        Self {
            id,
            prompt_len,
            max_output,
            generated: 0,
            status: SeqStatus::Waiting,
            last_compressed_at: None,
            admitted_at: 0,
            admission_seq: 0,
            uncompressed_tokens: 0,
        }
    }

    /// Tokens whose KVs the sequence would hold with no eviction.
    pub fn total_tokens(&self) -> usize {
        self.prompt_len + self.generated
    }

    pub fn is_finished(&self) -> bool {
        self.generated >= self.max_output
    }
}
