"""Domain-agnostic prompt assembly.

Each class prompt is built from one shared context: the first q tokens are
directly learnable, the remaining context tokens are projected live from the
visual prompt through a small two-layer meta-net, and the class-name tokens
follow. Every class, including "unknown", shares the same context
parameters; the projection is recomputed on every forward pass so gradients
reach the visual prompt through both the image-encoder and projector paths.
"""

from __future__ import annotations

import torch
from torch import nn

from .encoders import BackboneHandle, TokenSeq, VisualPrompt
from .errors import ConfigurationError, InputError

UNKNOWN_CLASS = "unknown"


class GenericPromptParams(nn.Module):
    """The q directly learnable context tokens plus the class vocabulary."""

    def __init__(self, nu: torch.Tensor, context_length: int, class_vocabulary: list[str]):
        super().__init__()
        n_learned = nu.shape[0]
        if not 0 <= n_learned <= context_length:
            raise InputError(f"need 0 <= q <= M, got q={n_learned}, M={context_length}")
        if UNKNOWN_CLASS not in class_vocabulary:
            raise InputError(f"class vocabulary must include {UNKNOWN_CLASS!r}")
        if len(set(class_vocabulary)) != len(class_vocabulary):
            raise InputError("class vocabulary has duplicates")
        self.nu = nn.Parameter(nu)
        self.context_length = context_length
        self.class_vocabulary = list(class_vocabulary)

    @property
    def n_learned(self) -> int:
        return self.nu.shape[0]

    @classmethod
    def create(cls, backbone: BackboneHandle, known_classes: list[str],
               context_length: int = 4, n_learned: int = 2, seed: int = 0,
               init_text: str = "photo of a", noise_std: float = 0.02) -> "GenericPromptParams":
        """Initialize the learnable tokens from a text snippet.

        The snippet's token embeddings are truncated or padded with small
        noise to exactly ``n_learned`` tokens; the vocabulary is the sorted
        known classes followed by the unknown class.
        """
        gen = torch.Generator().manual_seed(seed)
        if n_learned > 0:
            base = backbone.tokenize(init_text).tokens.detach().clone()
            if base.shape[0] >= n_learned:
                nu = base[:n_learned].clone()
            else:
                extra = torch.empty(n_learned - base.shape[0], backbone.d_tok,
                                    dtype=base.dtype).normal_(std=noise_std, generator=gen)
                nu = torch.cat([base, extra], dim=0)
            nu = nu + torch.empty_like(nu).normal_(std=noise_std, generator=gen)
        else:
            nu = torch.zeros(0, backbone.d_tok, dtype=torch.float64)
        vocabulary = sorted(known_classes) + [UNKNOWN_CLASS]
        return cls(nu=nu, context_length=context_length, class_vocabulary=vocabulary)


class ProjectorParams(nn.Module):
    """Two-layer meta-net mapping the flattened visual prompt to context tokens."""

    def __init__(self, n_visual_tokens: int, d_patch: int, n_projected: int,
                 d_tok: int, hidden: int = 32, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if hidden <= 0:
            raise InputError("projector hidden width must be positive")
        self.n_projected = n_projected
        self.d_tok = d_tok
        in_features = max(n_visual_tokens * d_patch, 1)
        gen = torch.Generator().manual_seed(seed)
        self.layer1 = nn.Linear(in_features, hidden, dtype=dtype)
        self.layer2 = nn.Linear(hidden, max(n_projected * d_tok, 1), dtype=dtype)
        with torch.no_grad():
            self.layer1.weight.normal_(std=in_features ** -0.5, generator=gen)
            self.layer1.bias.zero_()
            self.layer2.weight.normal_(std=hidden ** -0.5, generator=gen)
            self.layer2.bias.zero_()


def project_visual_to_text(vp: VisualPrompt, proj: ProjectorParams) -> torch.Tensor:
    """Project the visual prompt into (M - q) context tokens.

    Flattening is token-major: token 0's dimensions come first. Returns an
    empty (0, d_tok) tensor when no projected tokens are configured.
    """
    if proj.n_projected == 0:
        return torch.zeros(0, proj.d_tok, dtype=proj.layer1.weight.dtype)
    if vp.length == 0:
        raise InputError("projected context tokens require a nonempty visual prompt")
    flat = vp.tokens.reshape(-1)
    if flat.shape[0] != proj.layer1.in_features:
        raise ConfigurationError(
            f"flattened visual prompt has {flat.shape[0]} features, "
            f"projector expects {proj.layer1.in_features}")
    hidden = torch.relu(proj.layer1(flat))
    out = proj.layer2(hidden)
    return out.reshape(proj.n_projected, proj.d_tok)


def assemble_generic_prompt(params: GenericPromptParams, vp: VisualPrompt,
                            proj: ProjectorParams, class_name: str,
                            backbone: BackboneHandle) -> TokenSeq:
    """Build [learned tokens][projected tokens][class tokens] for one class."""
    if class_name not in params.class_vocabulary:
        raise InputError(f"class {class_name!r} not in vocabulary {params.class_vocabulary}")
    projected = project_visual_to_text(vp, proj)
    if params.n_learned + projected.shape[0] != params.context_length:
        raise ConfigurationError(
            f"context split q={params.n_learned} + projected={projected.shape[0]} "
            f"!= M={params.context_length}")
    class_tokens = backbone.tokenize(class_name).tokens
    return TokenSeq(torch.cat([params.nu, projected, class_tokens], dim=0))
