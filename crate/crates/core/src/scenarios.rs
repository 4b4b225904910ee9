//! Named scenarios (placeholder).
