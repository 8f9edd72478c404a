"""Prompt learning for low-shot open-set domain generalization.

Trains attribute-conditioned domain-specific prompts and visually
initialized domain-agnostic prompts on a frozen dual encoder, supervises an
explicit "unknown" class with synthesized pseudo-open samples, and evaluates
under the leave-one-domain-out protocol.
"""

__version__ = "0.1.0"
