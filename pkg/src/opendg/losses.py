"""The three training objectives and their unweighted sum.

A single forward per batch feeds all three terms: the cosine-softmax
classification loss over per-domain attribute-conditioned prompts, the
context alignment between domain-agnostic and domain-specific prompt
embeddings, and the cosine-softmax classification loss over the
domain-agnostic prompts for all known classes plus "unknown".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
from torch import nn

from .attributes import (
    AttributeSet,
    CrossAttentionParams,
    DomainPromptTemplate,
    EncodingToTokenBridge,
    class_agnostic_encoding_from_embeddings,
    compose_domain_prompt,
)
from .data import LabeledBatch, LabeledExample
from .encoders import (
    BackboneHandle,
    Image,
    JointEmbedding,
    VisualPrompt,
    stack_attribute_embeddings,
)
from .errors import ConfigurationError, InputError
from .prompts import (
    UNKNOWN_CLASS,
    GenericPromptParams,
    ProjectorParams,
    assemble_generic_prompt,
)


@dataclass
class LossConfig:
    """Temperature and gradient-routing knobs; loss weights are fixed at 1."""

    tau: float = 0.01
    align_stop_domain_grad: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise InputError(f"temperature must be positive, got {self.tau}")


@dataclass
class LossTerms:
    dom_spec: torch.Tensor
    align: torch.Tensor
    dom_gen: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.dom_spec + self.align + self.dom_gen

    def detached(self) -> dict[str, float]:
        return {
            "loss_dom_spec": float(self.dom_spec.detach()),
            "loss_align": float(self.align.detach()),
            "loss_dom_gen": float(self.dom_gen.detach()),
            "loss_total": float(self.total.detach()),
        }


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Scale-invariant cosine similarity of two vectors."""
    return (a / a.norm()) @ (b / b.norm())


def posterior_from_similarities(sims: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature softmax over a vector of cosine similarities."""
    return torch.softmax(sims / tau, dim=0)


def nll_from_posterior(p_true: torch.Tensor) -> torch.Tensor:
    return -torch.log(p_true)


def alignment_term(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cosine; 0 for aligned, 2 for antipodal embeddings."""
    return 1.0 - cosine(a, b)


class TrainableModules(nn.Module):
    """Everything the optimizer touches, grouped in one container.

    Holds the visual prompt, the cross-attention maps, the encoding-to-token
    bridge, the learnable generic-context tokens and the visual-to-text
    projector. The backbone stays outside and frozen.
    """

    def __init__(self, visual_prompt: VisualPrompt, cross_attn: CrossAttentionParams,
                 bridge: EncodingToTokenBridge, generic: GenericPromptParams,
                 projector: ProjectorParams):
        super().__init__()
        self.visual_prompt = visual_prompt
        self.cross_attn = cross_attn
        self.bridge = bridge
        self.generic = generic
        self.projector = projector

    def parameter_groups(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


def build_modules(backbone: BackboneHandle, known_classes: list[str],
                  context_length: int = 4, n_learned: int = 2,
                  n_visual_tokens: int = 2, projector_hidden: int = 32,
                  cross_attn_dim: int | None = None, seed: int = 0) -> TrainableModules:
    """Construct a seeded, deterministic set of trainable modules."""
    visual_prompt = VisualPrompt.create(m=n_visual_tokens, d_patch=backbone.d_patch,
                                        seed=seed)
    cross_attn = CrossAttentionParams(d_joint=backbone.d_joint, d=cross_attn_dim,
                                      seed=seed + 1)
    bridge = EncodingToTokenBridge(d=cross_attn.d, d_tok=backbone.d_tok, seed=seed + 2)
    generic = GenericPromptParams.create(backbone, known_classes,
                                         context_length=context_length,
                                         n_learned=n_learned, seed=seed + 3)
    projector = ProjectorParams(n_visual_tokens=n_visual_tokens, d_patch=backbone.d_patch,
                                n_projected=context_length - n_learned,
                                d_tok=backbone.d_tok, hidden=projector_hidden,
                                seed=seed + 4)
    return TrainableModules(visual_prompt, cross_attn, bridge, generic, projector)


class PromptPipeline:
    """Shared forward machinery binding backbone, prompts, and attributes.

    Attribute-phrase embeddings and static prompt templates depend only on
    the frozen backbone, so they are computed once at construction.
    """

    def __init__(self, backbone: BackboneHandle, modules: TrainableModules,
                 domain_class_names: dict[str, list[str]],
                 attribute_sets: dict[str, AttributeSet],
                 prompt_domain_names: dict[str, str],
                 config: LossConfig | None = None):
        self.backbone = backbone
        self.modules = modules
        self.config = config or LossConfig()
        self.domain_class_names = {d: sorted(names) for d, names in domain_class_names.items()}
        self.prompt_domain_names = dict(prompt_domain_names)

        known = sorted({name for names in self.domain_class_names.values() for name in names})
        missing = [c for c in known if c not in attribute_sets]
        if missing:
            raise ConfigurationError(f"no attribute sets for classes: {missing}")
        vocab = modules.generic.class_vocabulary
        if set(vocab) != set(known) | {UNKNOWN_CLASS}:
            raise ConfigurationError(
                f"generic prompt vocabulary {vocab} does not cover the known classes {known}")

        with torch.no_grad():
            self._attr_stacks = {
                name: stack_attribute_embeddings(attribute_sets[name].phrases, backbone).detach()
                for name in known
            }
        self._templates = {
            (domain, name): DomainPromptTemplate.build(
                self.prompt_domain_names.get(domain, domain), name, backbone,
                context_length=modules.generic.context_length)
            for domain, names in self.domain_class_names.items()
            for name in names
        }

    # -- shared encoders -----------------------------------------------------

    def image_embedding(self, image: Image) -> JointEmbedding:
        return self.backbone.encode_image(image, prompt=self.modules.visual_prompt)

    def class_agnostic_encoding(self, image_emb: JointEmbedding, domain: str) -> torch.Tensor:
        names = self._domain_classes(domain)
        stacks = [self._attr_stacks[name] for name in names]
        return class_agnostic_encoding_from_embeddings(image_emb, stacks, self.modules.cross_attn)

    def composed_prompt_embedding(self, domain: str, class_name: str,
                                  encoding: torch.Tensor) -> torch.Tensor:
        seq = compose_domain_prompt(self._templates[(domain, class_name)], encoding,
                                    self.modules.bridge)
        return self.backbone.encode_text(seq).vector

    def generic_prompt_embedding(self, class_name: str) -> torch.Tensor:
        seq = assemble_generic_prompt(self.modules.generic, self.modules.visual_prompt,
                                      self.modules.projector, class_name, self.backbone)
        return self.backbone.encode_text(seq).vector

    def generic_prompt_embeddings(self) -> dict[str, torch.Tensor]:
        return {name: self.generic_prompt_embedding(name)
                for name in self.modules.generic.class_vocabulary}

    def _domain_classes(self, domain: str) -> list[str]:
        if domain not in self.domain_class_names:
            raise ConfigurationError(f"domain {domain!r} has no registered class set")
        names = self.domain_class_names[domain]
        if not names:
            raise ConfigurationError(f"domain {domain!r} has an empty class set")
        return names

    # -- posteriors ------------------------------------------------------------

    def domain_specific_similarities(self, image: Image, domain: str,
                                     image_emb: JointEmbedding | None = None):
        """Cosine similarities against each composed prompt of a domain.

        Returns the domain's sorted class names, the similarity vector, and
        the per-class composed-prompt embeddings for reuse.
        """
        names = self._domain_classes(domain)
        emb = image_emb if image_emb is not None else self.image_embedding(image)
        encoding = self.class_agnostic_encoding(emb, domain)
        text_embs = {name: self.composed_prompt_embedding(domain, name, encoding)
                     for name in names}
        sims = torch.stack([cosine(text_embs[name], emb.vector) for name in names])
        return names, sims, text_embs

    def domain_specific_posteriors(self, image: Image, domain: str,
                                   image_emb: JointEmbedding | None = None):
        names, sims, text_embs = self.domain_specific_similarities(image, domain, image_emb)
        return names, posterior_from_similarities(sims, self.config.tau), text_embs

    def domain_specific_posterior(self, image: Image, domain: str, class_name: str) -> torch.Tensor:
        names, probs, _ = self.domain_specific_posteriors(image, domain)
        if class_name not in names:
            raise InputError(f"class {class_name!r} is not in domain {domain!r} set {names}")
        return probs[names.index(class_name)]

    def generic_similarities(self, image_emb: JointEmbedding,
                             gen_embs: dict[str, torch.Tensor] | None = None):
        vocab = self.modules.generic.class_vocabulary
        gen_embs = gen_embs if gen_embs is not None else self.generic_prompt_embeddings()
        sims = torch.stack([cosine(gen_embs[name], image_emb.vector) for name in vocab])
        return vocab, sims

    def generic_posteriors(self, image_emb: JointEmbedding,
                           gen_embs: dict[str, torch.Tensor] | None = None):
        vocab, sims = self.generic_similarities(image_emb, gen_embs)
        return vocab, posterior_from_similarities(sims, self.config.tau)

    # -- losses ------------------------------------------------------------------

    def compute_losses(self, batch: LabeledBatch) -> LossTerms:
        """Evaluate all three objectives with one shared forward per item."""
        if not batch.items:
            raise InputError("empty batch")
        zero = torch.zeros((), dtype=torch.float64)
        image_embs = [self.image_embedding(e.image) for e in batch.items]

        known = [(e, emb) for e, emb in zip(batch.items, image_embs) if not e.is_pseudo_open]
        if not known:
            warnings.warn("batch has only pseudo-open items; "
                          "domain-specific and alignment terms contribute 0")

        # Domain-specific classification: mean over domains of per-domain NLL.
        per_domain_nll: dict[str, list[torch.Tensor]] = {}
        spec_embs: list[tuple[LabeledExample, torch.Tensor]] = []
        for example, emb in known:
            names, probs, text_embs = self.domain_specific_posteriors(
                example.image, example.domain, image_emb=emb)
            if example.label not in names:
                raise ConfigurationError(
                    f"label {example.label!r} outside domain {example.domain!r} set {names}")
            per_domain_nll.setdefault(example.domain, []).append(
                nll_from_posterior(probs[names.index(example.label)]))
            spec_embs.append((example, text_embs[example.label]))
        if per_domain_nll:
            domain_means = [torch.stack(v).mean() for v in per_domain_nll.values()]
            loss_dom_spec = torch.stack(domain_means).mean()
        else:
            loss_dom_spec = zero.clone()

        # Context alignment between generic and domain-specific prompts.
        gen_embs = self.generic_prompt_embeddings()
        if spec_embs:
            terms = []
            for example, spec_emb in spec_embs:
                if self.config.align_stop_domain_grad:
                    spec_emb = spec_emb.detach()
                terms.append(alignment_term(gen_embs[example.label], spec_emb))
            loss_align = torch.stack(terms).mean()
        else:
            loss_align = zero.clone()

        # Generic classification over known classes plus unknown.
        vocab = self.modules.generic.class_vocabulary
        nlls = []
        for example, emb in zip(batch.items, image_embs):
            _, probs = self.generic_posteriors(emb, gen_embs)
            nlls.append(nll_from_posterior(probs[vocab.index(example.label)]))
        loss_dom_gen = torch.stack(nlls).mean()

        return LossTerms(dom_spec=loss_dom_spec, align=loss_align, dom_gen=loss_dom_gen)

    def loss_dom_spec(self, batch: LabeledBatch) -> torch.Tensor:
        return self.compute_losses(batch).dom_spec

    def loss_align(self, batch: LabeledBatch) -> torch.Tensor:
        return self.compute_losses(batch).align

    def loss_dom_gen(self, batch: LabeledBatch) -> torch.Tensor:
        return self.compute_losses(batch).dom_gen

    def total_loss(self, batch: LabeledBatch) -> torch.Tensor:
        return self.compute_losses(batch).total
