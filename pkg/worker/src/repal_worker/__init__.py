"""Fine-tuning worker for entailment-style relation classifiers."""

__version__ = "0.1.0"
