"""Desk-scale semi-parametric text-to-text modeling kit.

Subpackages cover the full pipeline: typed knowledge storage (`store`),
deterministic hashed embeddings (`embedding`), exact/IVF inner-product search
(`index`), keyword/entity pre-filtered retrieval (`retrieval`), a manually
differentiated encoder-decoder backbone (`model`), the sequence-level expert
router (`router`), multitask training (`training`), choice-scoring evaluation
(`evaluation`), and the `kic` command line (`cli`).
"""

__version__ = "0.1.0"
