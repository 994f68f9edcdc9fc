"""Controllers module - Command orchestration layer."""
