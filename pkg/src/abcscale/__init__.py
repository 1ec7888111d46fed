"""ABC notation bar synchronization, BPE tokenization and symbolic-music scaling laws."""

__version__ = "0.1.0"
