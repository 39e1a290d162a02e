"""Orchestration, dataset I/O, synthetic worlds and evaluation."""
