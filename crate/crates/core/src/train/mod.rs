//! Training, metrics, ablation.
