"""Desk-scale RLHF with model-soup KL references."""
