"""Online unsupervised domain adaptation for re-identification on feature
streams: source-guided support-set distillation, EMA teacher, MMD
alignment, DBSCAN pseudo-labeling, and retrieval evaluation."""

__version__ = "0.1.0"
