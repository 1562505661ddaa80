"""Fine-tuning and inference for the downstream tasks."""
