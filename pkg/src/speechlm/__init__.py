"""Toy-scale speech translation stack.

A frozen decoder-only text LM learns to condition on compressed acoustic
embeddings (with optional low-rank adapters), alongside a from-scratch speech
decoder and an encoder-decoder baseline, all trained and evaluated on a
synthetic cipher-reversal translation corpus.
"""

from .tensor import Parameter, Tensor, grad_check, no_grad

__all__ = ["Tensor", "Parameter", "grad_check", "no_grad"]
__version__ = "0.1.0"
