"""jala-desk: joint latent-action alignment pretraining at desk scale."""

__version__ = "0.1.0"
