//! Prompt-tuned detector.
