"""Frozen dual-encoder backbone with visual-prompt injection.

Two backends share one contract: a deterministic tiny transformer for
desk-scale testing, and a named-array adapter seam for loading pretrained
dual-encoder checkpoints (intended for ViT-B/32-scale models). Both expose

  * an image tower that accepts learnable prompt tokens at its first block
    (prompt slots are dropped from the sequence after that block),
  * a text tower over raw token-embedding sequences, and
  * a shared joint embedding space with L2-normalized outputs.

All backbone weights are frozen; gradients flow only into injected prompts
and any learnable tokens inside text sequences.
"""

from __future__ import annotations

import json
import re
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError, SequenceTooLongError

NORM_TOL = 1e-6


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class Image:
    """An H x W x C intensity array in [0, 1] plus its domain of origin."""

    pixels: np.ndarray
    domain_tag: str = "target"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or min(px.shape) <= 0:
            raise InputError(f"image must be H x W x C with positive dims, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InputError("image intensities must lie in [0, 1]")
        self.pixels = px


@dataclass
class TokenSeq:
    """An ordered sequence of token vectors in token-embedding space."""

    tokens: torch.Tensor  # (length, d_tok)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise InputError(f"token sequence must be (length >= 1, d_tok), got {tuple(self.tokens.shape)}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_tok(self) -> int:
        return self.tokens.shape[1]


@dataclass
class JointEmbedding:
    """A vector in the shared image-text embedding space."""

    vector: torch.Tensor  # (d_joint,)
    normalized: bool = False

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise InputError(f"embedding must be a flat vector, got shape {tuple(self.vector.shape)}")
        if self.normalized:
            norm = float(self.vector.detach().norm())
            if abs(norm - 1.0) > NORM_TOL:
                raise InputError(f"embedding flagged normalized has norm {norm}")


class VisualPrompt(nn.Module):
    """m learnable tokens injected into the image tower's first block."""

    def __init__(self, tokens: torch.Tensor):
        super().__init__()
        if tokens.ndim != 2:
            raise InputError(f"visual prompt must be (m, d_patch), got {tuple(tokens.shape)}")
        self.tokens = nn.Parameter(tokens)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def create(cls, m: int, d_patch: int, seed: int = 0, std: float = 0.02,
               dtype: torch.dtype = torch.float64) -> "VisualPrompt":
        gen = torch.Generator().manual_seed(seed)
        tokens = torch.empty(m, d_patch, dtype=dtype).normal_(std=std, generator=gen)
        return cls(tokens)


# ---------------------------------------------------------------------------
# Backbone contract
# ---------------------------------------------------------------------------


class BackboneHandle(ABC):
    """Contract every dual-encoder backend fulfils.

    Implementations must be frozen (no trainable backbone parameters) and
    deterministic: identical inputs produce identical outputs.
    """

    d_patch: int
    d_tok: int
    d_joint: int
    image_size: int
    patch_size: int
    channels: int
    context_capacity: int

    @abstractmethod
    def tokenize(self, text: str) -> TokenSeq:
        """Map a text string to a sequence of token-embedding vectors."""

    @abstractmethod
    def encode_text(self, seq: TokenSeq) -> JointEmbedding:
        """Encode a token sequence into the joint space."""

    @abstractmethod
    def encode_image(self, image: Image, prompt: VisualPrompt | None = None,
                     return_trace: bool = False):
        """Encode an image, optionally injecting prompt tokens at block 1."""

    @property
    def frozen(self) -> bool:
        return True


def _linear(d_in: int, d_out: int, gen: torch.Generator, std: float | None = None,
            bias: bool = True) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias, dtype=torch.float64)
    std = std if std is not None else d_in ** -0.5
    with torch.no_grad():
        layer.weight.normal_(std=std, generator=gen)
        if bias:
            layer.bias.zero_()
    return layer


class _Block(nn.Module):
    """Pre-norm transformer block with single-head attention."""

    def __init__(self, width: int, gen: torch.Generator):
        super().__init__()
        self.width = width
        self.ln_attn = nn.LayerNorm(width, dtype=torch.float64)
        self.ln_mlp = nn.LayerNorm(width, dtype=torch.float64)
        self.w_query = _linear(width, width, gen)
        self.w_key = _linear(width, width, gen)
        self.w_value = _linear(width, width, gen)
        self.w_out = _linear(width, width, gen)
        self.mlp_in = _linear(width, 2 * width, gen)
        self.mlp_out = _linear(2 * width, width, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln_attn(x)
        q, k, v = self.w_query(h), self.w_key(h), self.w_value(h)
        attn = torch.softmax(q @ k.T / self.width ** 0.5, dim=-1)
        x = x + self.w_out(attn @ v)
        h = self.ln_mlp(x)
        x = x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(h)))
        return x


class TinyBackbone(BackboneHandle, nn.Module):
    """Deterministic frozen dual encoder used for desk-scale testing.

    Both towers are small pre-norm transformers with fixed random weights in
    float64. The image tower patchifies the input, prepends a class token,
    and reads out that token after the final block; the text tower consumes
    raw token vectors behind a fixed start-of-sequence token. Both project
    to the joint dimension and L2-normalize.
    """

    N_TOKEN_BUCKETS = 4096

    def __init__(self, seed: int, d_patch: int, d_tok: int, d_joint: int,
                 depth: int = 2, image_size: int = 32, patch_size: int = 8,
                 channels: int = 3, context_capacity: int = 16):
        if min(d_patch, d_tok, d_joint) <= 0:
            raise InputError("backbone dimensions must be positive")
        if depth < 2:
            raise InputError(f"depth must be >= 2, got {depth}")
        if image_size % patch_size != 0:
            raise InputError("image_size must be divisible by patch_size")
        nn.Module.__init__(self)
        self.seed = seed
        self.d_patch, self.d_tok, self.d_joint = d_patch, d_tok, d_joint
        self.depth = depth
        self.image_size, self.patch_size, self.channels = image_size, patch_size, channels
        self.context_capacity = context_capacity
        self.n_patches = (image_size // patch_size) ** 2

        gen = torch.Generator().manual_seed(seed)
        patch_dim = patch_size * patch_size * channels
        self.patch_proj = _linear(patch_dim, d_patch, gen)
        # Small class-token residual and strong positional signal keep the
        # readout sensitive to image content rather than shared constants.
        self.cls_token = nn.Parameter(
            torch.empty(d_patch, dtype=torch.float64).normal_(std=0.02, generator=gen))
        self.image_pos = nn.Parameter(
            torch.empty(1 + self.n_patches, d_patch, dtype=torch.float64).normal_(std=1.0, generator=gen))
        self.image_blocks = nn.ModuleList(_Block(d_patch, gen) for _ in range(depth))
        self.image_ln = nn.LayerNorm(d_patch, dtype=torch.float64)
        self.image_proj = _linear(d_patch, d_joint, gen, bias=False)

        self.token_table = nn.Parameter(
            torch.empty(self.N_TOKEN_BUCKETS, d_tok, dtype=torch.float64).normal_(std=0.5, generator=gen))
        self.bos_token = nn.Parameter(torch.empty(d_tok, dtype=torch.float64).normal_(generator=gen))
        self.text_pos = nn.Parameter(
            torch.empty(1 + context_capacity, d_tok, dtype=torch.float64).normal_(std=0.2, generator=gen))
        self.text_blocks = nn.ModuleList(_Block(d_tok, gen) for _ in range(depth))
        self.text_ln = nn.LayerNorm(d_tok, dtype=torch.float64)
        self.text_proj = _linear(d_tok, d_joint, gen, bias=False)

        for p in self.parameters():
            p.requires_grad_(False)

    # -- text tower ---------------------------------------------------------

    def token_bucket(self, word: str) -> int:
        return zlib.crc32(word.encode("utf-8")) % self.N_TOKEN_BUCKETS

    def tokenize(self, text: str) -> TokenSeq:
        words = re.findall(r"[a-z0-9]+", text.lower())
        if not words:
            raise InputError(f"text {text!r} contains no tokenizable words")
        rows = [self.token_table[self.token_bucket(w)] for w in words]
        return TokenSeq(torch.stack(rows))

    def encode_text(self, seq: TokenSeq) -> JointEmbedding:
        if seq.d_tok != self.d_tok:
            raise ConfigurationError(f"token dim {seq.d_tok} != backbone d_tok {self.d_tok}")
        if seq.length > self.context_capacity:
            raise SequenceTooLongError(
                f"sequence length {seq.length} exceeds context capacity {self.context_capacity}")
        x = torch.cat([self.bos_token.unsqueeze(0), seq.tokens], dim=0)
        x = x + self.text_pos[: x.shape[0]]
        for block in self.text_blocks:
            x = block(x)
        vec = self.text_proj(self.text_ln(x[0]))
        return JointEmbedding(vec / vec.norm(), normalized=True)

    # -- image tower ---------------------------------------------------------

    def _patchify(self, image: Image) -> torch.Tensor:
        px = image.pixels
        if px.shape != (self.image_size, self.image_size, self.channels):
            raise ConfigurationError(
                f"image shape {px.shape} does not match backbone patching "
                f"({self.image_size}x{self.image_size}x{self.channels})")
        n = self.image_size // self.patch_size
        patches = (
            torch.from_numpy(px)
            .reshape(n, self.patch_size, n, self.patch_size, self.channels)
            .permute(0, 2, 1, 3, 4)
            .reshape(n * n, -1)
        )
        return patches

    def encode_image(self, image: Image, prompt: VisualPrompt | None = None,
                     return_trace: bool = False):
        embeddings = self.patch_proj(self._patchify(image))
        cls = (self.cls_token + self.image_pos[0]).unsqueeze(0)
        patches = embeddings + self.image_pos[1:]

        trace = {"block_inputs": [], "block_outputs": []}
        if prompt is None:
            x = torch.cat([cls, patches], dim=0)
            trace["block_inputs"].append(x.shape[0])
            x = self.image_blocks[0](x)
        else:
            if prompt.tokens.shape[1] != self.d_patch:
                raise ConfigurationError(
                    f"visual prompt dim {prompt.tokens.shape[1]} != backbone d_patch {self.d_patch}")
            m = prompt.length
            x = torch.cat([cls, prompt.tokens, patches], dim=0)
            trace["block_inputs"].append(x.shape[0])
            x = self.image_blocks[0](x)
            # Prompt-slot outputs are dropped: later blocks never see them.
            x = torch.cat([x[:1], x[1 + m:]], dim=0)
        trace["block_outputs"].append(x.shape[0])

        for block in self.image_blocks[1:]:
            trace["block_inputs"].append(x.shape[0])
            x = block(x)
            trace["block_outputs"].append(x.shape[0])

        vec = self.image_proj(self.image_ln(x[0]))
        emb = JointEmbedding(vec / vec.norm(), normalized=True)
        if return_trace:
            return emb, trace
        return emb

    # -- named-array adapter seam ---------------------------------------------

    def config(self) -> dict:
        return {
            "seed": self.seed, "d_patch": self.d_patch, "d_tok": self.d_tok,
            "d_joint": self.d_joint, "depth": self.depth,
            "image_size": self.image_size, "patch_size": self.patch_size,
            "channels": self.channels, "context_capacity": self.context_capacity,
        }

    def to_named_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.detach().numpy().copy() for name, p in self.named_parameters()}


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def make_tiny_backbone(seed: int, dims: dict, depth: int = 2, **kwargs) -> TinyBackbone:
    """Build the deterministic desk-scale backbone.

    ``dims`` must carry ``d_patch``, ``d_tok`` and ``d_joint``. The same seed
    always yields bitwise-identical weights and forward outputs.
    """
    missing = {"d_patch", "d_tok", "d_joint"} - dims.keys()
    if missing:
        raise InputError(f"dims missing {sorted(missing)}")
    return TinyBackbone(seed=seed, d_patch=dims["d_patch"], d_tok=dims["d_tok"],
                        d_joint=dims["d_joint"], depth=depth, **kwargs)


def encode_image(image: Image, prompt: VisualPrompt | None, backbone: BackboneHandle) -> JointEmbedding:
    """Encode an image with optional prompt injection at the first block."""
    return backbone.encode_image(image, prompt)


def encode_text(seq: TokenSeq, backbone: BackboneHandle) -> JointEmbedding:
    """Encode a token sequence; overlong sequences fail loudly."""
    return backbone.encode_text(seq)


def embed_attribute_phrase(phrase: str, backbone: BackboneHandle) -> JointEmbedding:
    """Embed a single attribute phrase into the joint space."""
    if not phrase or not phrase.strip():
        raise InputError("attribute phrase must be nonempty")
    return backbone.encode_text(backbone.tokenize(phrase))


def stack_attribute_embeddings(phrases: list[str], backbone: BackboneHandle) -> torch.Tensor:
    """Embed a class's attribute phrases into a (B, d_joint) stack."""
    return torch.stack([embed_attribute_phrase(p, backbone).vector for p in phrases])


# ---------------------------------------------------------------------------
# Checkpoint adapter (named-array container with shape metadata)
# ---------------------------------------------------------------------------

# The adapter seam is exercised with TinyBackbone round-trips; the same
# container layout is the loading contract for pretrained dual-encoder
# checkpoints (ViT-B/32-scale) converted offline into named arrays.


def save_backbone_arrays(backbone: TinyBackbone, path: str | Path) -> None:
    """Write a backbone as an .npz of named arrays plus a JSON sidecar."""
    path = Path(path)
    np.savez(path, **backbone.to_named_arrays())
    meta = dict(backbone.config())
    meta["schema"] = "opendg-backbone-v1"
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_backbone_arrays(path: str | Path) -> TinyBackbone:
    """Reconstruct a backbone from a named-array container.

    Array names and shapes must match the architecture described by the
    sidecar metadata; mismatches raise a configuration error rather than
    loading a partially initialized model.
    """
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not path.exists() or not meta_path.exists():
        raise ConfigurationError(f"backbone checkpoint incomplete: need {path} and {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.pop("schema", None) != "opendg-backbone-v1":
        raise ConfigurationError("unrecognized backbone checkpoint schema")
    backbone = TinyBackbone(**meta)
    arrays = np.load(path)
    expected = backbone.to_named_arrays()
    if set(arrays.files) != set(expected):
        raise ConfigurationError(
            f"checkpoint arrays {sorted(arrays.files)} do not match "
            f"expected parameter names {sorted(expected)}")
    state = {}
    for name in arrays.files:
        if arrays[name].shape != expected[name].shape:
            raise ConfigurationError(
                f"array {name!r} has shape {arrays[name].shape}, expected {expected[name].shape}")
        state[name] = torch.from_numpy(arrays[name])
    backbone.load_state_dict(state)
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone
