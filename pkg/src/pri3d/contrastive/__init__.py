"""Contrastive objective, tiny encoders and the training loop."""
