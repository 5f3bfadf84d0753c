"""labprompt: lab time-series prompt embeddings aligned with clinical text
for multi-label disease diagnosis with a frozen language model."""

__version__ = "0.1.0"
