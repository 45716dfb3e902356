"""Open-domain table filling: retrieve, read, rank, and re-rank with
relational coherence."""

__version__ = "0.1.0"
