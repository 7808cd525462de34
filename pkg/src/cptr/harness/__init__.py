"""Recall task, experiment orchestration, reports and checkpoints."""
