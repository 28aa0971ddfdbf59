//! Prompt optimization loop.
