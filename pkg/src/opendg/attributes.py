"""Dynamic domain-specific prompts via image-to-attribute cross-attention.

A static "<domain> of a <class>" template is enriched per image: the image
embedding queries the class's attribute-phrase embeddings through a small
cross-attention head, the per-class outputs are averaged into one
class-agnostic encoding, and that encoding is bridged into token space and
broadcast-added onto the template's context tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .encoders import (
    BackboneHandle,
    Image,
    JointEmbedding,
    TokenSeq,
    VisualPrompt,
    stack_attribute_embeddings,
)
from .errors import ConfigurationError, InputError

ATTRIBUTE_PROVENANCES = ("llm", "manifest")


@dataclass
class AttributeSet:
    """Ordered attribute phrases for one class, shared across domains."""

    class_name: str
    phrases: list[str]
    provenance: str = "manifest"

    def __post_init__(self):
        if not self.phrases:
            raise InputError(f"class {self.class_name!r} has no attribute phrases")
        if any(not p.strip() for p in self.phrases):
            raise InputError(f"class {self.class_name!r} has an empty attribute phrase")
        if len({p.lower() for p in self.phrases}) != len(self.phrases):
            raise InputError(f"class {self.class_name!r} has duplicate attribute phrases")
        if self.provenance not in ATTRIBUTE_PROVENANCES:
            raise InputError(f"provenance must be one of {ATTRIBUTE_PROVENANCES}")

    @property
    def count(self) -> int:
        return len(self.phrases)


def save_attribute_manifest(sets: list[AttributeSet], path: str | Path) -> None:
    """One JSON record per line, fields in stable order."""
    lines = [
        json.dumps({"class_name": s.class_name, "phrases": s.phrases,
                    "provenance": s.provenance})
        for s in sets
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_attribute_manifest(path: str | Path) -> dict[str, AttributeSet]:
    sets = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        attr = AttributeSet(class_name=rec["class_name"], phrases=list(rec["phrases"]),
                            provenance=rec.get("provenance", "manifest"))
        sets[attr.class_name] = attr
    return sets


@dataclass
class DomainPromptTemplate:
    """Static "<domain> of a <class>" prompt rendered into token space.

    Context tokens are padded (with zero vectors) or truncated to exactly
    ``context_length``; the class-name tokens follow unmodified.
    """

    domain_name: str
    class_name: str
    context_tokens: torch.Tensor  # (context_length, d_tok)
    class_tokens: torch.Tensor    # (n_class_tokens, d_tok)

    @classmethod
    def build(cls, domain_name: str, class_name: str, backbone: BackboneHandle,
              context_length: int) -> "DomainPromptTemplate":
        raw = backbone.tokenize(f"{domain_name} of a").tokens
        if raw.shape[0] >= context_length:
            context = raw[:context_length]
        else:
            pad = torch.zeros(context_length - raw.shape[0], raw.shape[1], dtype=raw.dtype)
            context = torch.cat([raw, pad], dim=0)
        class_tokens = backbone.tokenize(class_name).tokens
        return cls(domain_name=domain_name, class_name=class_name,
                   context_tokens=context.detach().clone(),
                   class_tokens=class_tokens.detach().clone())

    @property
    def context_length(self) -> int:
        return self.context_tokens.shape[0]

    def token_seq(self) -> TokenSeq:
        return TokenSeq(torch.cat([self.context_tokens, self.class_tokens], dim=0))


class CrossAttentionParams(nn.Module):
    """Learnable query/key/value maps for image-to-attribute attention."""

    def __init__(self, d_joint: int, d: int | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.d = d if d is not None else d_joint
        gen = torch.Generator().manual_seed(seed)
        self.w_q = nn.Linear(d_joint, self.d, bias=False, dtype=dtype)
        self.w_k = nn.Linear(d_joint, self.d, bias=False, dtype=dtype)
        self.w_v = nn.Linear(d_joint, self.d, bias=False, dtype=dtype)
        with torch.no_grad():
            for layer in (self.w_q, self.w_k, self.w_v):
                layer.weight.normal_(std=d_joint ** -0.5, generator=gen)


class EncodingToTokenBridge(nn.Module):
    """Affine map from the attention output width into token space.

    The bias starts at zero so a zero encoding initially leaves prompts
    untouched (additive identity); both weight and bias are trainable.
    """

    def __init__(self, d: int, d_tok: int, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.linear = nn.Linear(d, d_tok, bias=True, dtype=dtype)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.linear.weight.normal_(std=d ** -0.5, generator=gen)
            self.linear.bias.zero_()

    def forward(self, encoding: torch.Tensor) -> torch.Tensor:
        return self.linear(encoding)


def cross_attend(image_emb: JointEmbedding, attr_embs: torch.Tensor,
                 params: CrossAttentionParams, return_weights: bool = False):
    """Attend from an image embedding over a class's attribute stack.

    Computes softmax(q k^T / sqrt(d)) v with q from the image and k, v from
    the (B, d_joint) attribute embeddings; the result is a length-d vector
    in the convex hull of the value-projected attribute rows.
    """
    if attr_embs.ndim != 2 or attr_embs.shape[0] == 0:
        raise InputError("attribute stack must be (B >= 1, d_joint)")
    if attr_embs.shape[1] != params.w_k.in_features:
        raise ConfigurationError(
            f"attribute dim {attr_embs.shape[1]} != cross-attention input {params.w_k.in_features}")
    q = params.w_q(image_emb.vector)
    k = params.w_k(attr_embs)
    v = params.w_v(attr_embs)
    weights = torch.softmax((k @ q) / params.d ** 0.5, dim=0)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def class_agnostic_encoding(image: Image, domain_classes: list[AttributeSet],
                            params: CrossAttentionParams, backbone: BackboneHandle,
                            prompt: VisualPrompt | None = None) -> torch.Tensor:
    """Average the per-class attended encodings over a domain's class list."""
    if not domain_classes:
        raise InputError("domain class list is empty")
    image_emb = backbone.encode_image(image, prompt=prompt)
    stacks = [stack_attribute_embeddings(a.phrases, backbone) for a in domain_classes]
    return class_agnostic_encoding_from_embeddings(image_emb, stacks, params)


def class_agnostic_encoding_from_embeddings(image_emb: JointEmbedding,
                                            attr_stacks: list[torch.Tensor],
                                            params: CrossAttentionParams) -> torch.Tensor:
    """Same as :func:`class_agnostic_encoding` over precomputed embeddings."""
    if not attr_stacks:
        raise InputError("no attribute stacks supplied")
    outputs = [cross_attend(image_emb, stack, params) for stack in attr_stacks]
    return torch.stack(outputs).mean(dim=0)


def compose_domain_prompt(template: DomainPromptTemplate, encoding: torch.Tensor,
                          projector_to_token: EncodingToTokenBridge) -> TokenSeq:
    """Broadcast-add the bridged encoding onto the template's context tokens.

    Class-name tokens are left unmodified so the contrastive objective keeps
    a clean class identity.
    """
    shift = projector_to_token(encoding)
    if shift.shape != (template.context_tokens.shape[1],):
        raise ConfigurationError(
            f"bridged encoding has shape {tuple(shift.shape)}, "
            f"expected ({template.context_tokens.shape[1]},)")
    context = template.context_tokens + shift
    return TokenSeq(torch.cat([context, template.class_tokens], dim=0))
