"""conceptseq: concept-grounded CNN-LSTM annotation at desk scale.

A self-contained float64 toolkit: a reverse-mode autodiff tape, a small
conv stack and LSTM decoder, synthetic structured-label scenes, staged
training (unary pretrain, decoder pretrain, joint finetune), greedy/beam
inference, and multi-label / BLEU evaluation. See the README for the CLI
and the acceptance suite.
"""

__version__ = "0.1.0"

from . import autodiff, decode, labelseq, lstm, metrics, nn, seqmodel, synthdata, unary

__all__ = [
    "autodiff", "decode", "labelseq", "lstm", "metrics", "nn",
    "seqmodel", "synthdata", "unary", "__version__",
]
