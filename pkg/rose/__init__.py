"""One-stage fingerprint singular point detection."""
