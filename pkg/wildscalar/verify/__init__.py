"""Weak-form residuals, constraint diagnostics and the run audit trail."""
