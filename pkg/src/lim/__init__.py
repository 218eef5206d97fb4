"""Local Info Max: speaker embeddings from raw waveforms by maximising the
mutual information between chunks of the same utterance."""

__version__ = "0.1.0"
