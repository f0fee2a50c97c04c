"""Language-augmented contrastive language-image pretraining at desk scale."""

__version__ = "0.1.0"

FORMAT_TAG = "#laclip-kit v1"
