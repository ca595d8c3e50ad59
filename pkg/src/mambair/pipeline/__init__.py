"""Data, losses, optimizer, metrics, checkpoints and the training loop."""
