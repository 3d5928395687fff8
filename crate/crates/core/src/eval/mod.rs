//! Metrics, channel-averaged inference and attention alignments.

pub mod alignment;
pub mod inference;
pub mod metrics;

pub use alignment::{
    align_split, alignment_csv, alignment_purity, decode_vectors, encode_vectors, export_alignments, ground_truth,
    landing_rate, purity_from_histograms, read_vectors, snippet_window, AlignmentRecord, ExportSummary,
    HeadAlignment, HeadPurity, PurityReport, SnippetSelection, ALIGNMENT_HEADER, VECTORS_MAGIC,
};
pub use inference::{average_probs, evaluate, infer_clip, infer_many, predict_split, ClipResult, EvalReport};
pub use metrics::{macro_f1, ClassScore, ConfusionMatrix, F1Report};
