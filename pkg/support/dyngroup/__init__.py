"""Dynamic latent-group tensor model: simulation, filter-based EM, order selection and ingestion."""

__version__ = "0.3.0"
