"""Child-sum and binary Tree-LSTMs with tree attention for sentence-pair relatedness."""

__version__ = "0.1.0"
