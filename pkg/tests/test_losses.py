import math
import warnings

import numpy as np
import pytest
import torch

from opendg.attributes import AttributeSet
from opendg.data import LabeledBatch, LabeledExample
from opendg.errors import ConfigurationError, InputError
from opendg.losses import (
    LossConfig,
    PromptPipeline,
    alignment_term,
    build_modules,
    cosine,
    nll_from_posterior,
    posterior_from_similarities,
)

from .conftest import random_image
from .helpers import check_group_grads

DOMAIN_CLASSES = {"flat": ["circle", "square", "triangle"],
                  "noisy": ["circle", "square", "triangle"]}
ATTRIBUTES = {
    "circle": AttributeSet("circle", ["round outline", "no corners"]),
    "square": AttributeSet("square", ["four corners", "straight edges"]),
    "triangle": AttributeSet("triangle", ["three corners", "slanted edges"]),
}
PROMPT_DOMAINS = {"flat": "Flat", "noisy": "Noisy"}


def make_pipeline(backbone, seed=0, config=None):
    modules = build_modules(backbone, ["circle", "square", "triangle"],
                            context_length=4, n_learned=2, n_visual_tokens=2, seed=seed)
    return PromptPipeline(backbone, modules, DOMAIN_CLASSES, ATTRIBUTES,
                          PROMPT_DOMAINS, config=config)


def make_batch(rng, n_known_per_domain=2, n_pseudo=2):
    items = []
    labels = ["circle", "square", "triangle"]
    for domain in DOMAIN_CLASSES:
        for i in range(n_known_per_domain):
            items.append(LabeledExample(image=random_image(rng, domain=domain),
                                        label=labels[i % 3], domain=domain))
    for i in range(n_pseudo):
        domain = list(DOMAIN_CLASSES)[i % 2]
        items.append(LabeledExample(image=random_image(rng, domain=domain),
                                    label="unknown", domain=domain))
    return LabeledBatch(items=items)


class TestPosteriorHelpers:
    def test_singleton_softmax_is_one(self):
        probs = posterior_from_similarities(torch.tensor([0.3], dtype=torch.float64), tau=0.01)
        assert probs.item() == pytest.approx(1.0)

    def test_uniform_similarities_uniform_posterior(self):
        probs = posterior_from_similarities(torch.full((5,), 0.2, dtype=torch.float64), tau=0.01)
        assert torch.allclose(probs, torch.full((5,), 0.2, dtype=torch.float64))

    def test_perfect_posterior_zero_loss(self):
        assert nll_from_posterior(torch.tensor(1.0, dtype=torch.float64)).item() == 0.0

    def test_uniform_posterior_log4(self):
        probs = torch.full((4,), 0.25, dtype=torch.float64)
        assert nll_from_posterior(probs[0]).item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_temperature_must_be_positive(self):
        with pytest.raises(InputError):
            LossConfig(tau=0.0)


class TestAlignmentTerm:
    def test_identical_zero(self, rng):
        v = torch.from_numpy(rng.normal(size=6))
        assert alignment_term(v, v).item() == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_two(self, rng):
        v = torch.from_numpy(rng.normal(size=6))
        assert alignment_term(v, -v).item() == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_one(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        b = torch.tensor([0.0, 1.0], dtype=torch.float64)
        assert alignment_term(a, b).item() == pytest.approx(1.0, abs=1e-12)


class TestDomainSpecificPosterior:
    def test_sums_to_one(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        _, probs, _ = pipeline.domain_specific_posteriors(random_image(rng), "flat")
        assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert (probs >= 0).all()

    def test_matches_scalar_loop_oracle(self, tiny_backbone, rng):
        """Softmax recomputed with explicit python loops from the cosines."""
        pipeline = make_pipeline(tiny_backbone)
        for trial in range(30):
            image = random_image(rng)
            names, sims, _ = pipeline.domain_specific_similarities(image, "flat")
            tau = pipeline.config.tau
            raw = [float(s) / tau for s in sims.detach()]
            peak = max(raw)
            exp = [math.exp(v - peak) for v in raw]
            total = sum(exp)
            expected = [v / total for v in exp]
            _, probs, _ = pipeline.domain_specific_posteriors(image, "flat")
            for got, want in zip(probs.tolist(), expected):
                assert got == pytest.approx(want, abs=1e-6)

    def test_single_op_returns_requested_class(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        image = random_image(rng)
        names, probs, _ = pipeline.domain_specific_posteriors(image, "flat")
        p = pipeline.domain_specific_posterior(image, "flat", "square")
        assert p.item() == pytest.approx(probs[names.index("square")].item())

    def test_unknown_domain_rejected(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        with pytest.raises(ConfigurationError):
            pipeline.domain_specific_posteriors(random_image(rng), "cubist")

    def test_scale_invariance_of_cosine(self, rng):
        a = torch.from_numpy(rng.normal(size=5))
        b = torch.from_numpy(rng.normal(size=5))
        assert cosine(3.7 * a, b).item() == pytest.approx(cosine(a, b).item(), abs=1e-12)


class TestLossTerms:
    def test_total_equals_recomputed_sum(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        batch = make_batch(rng)
        terms = pipeline.compute_losses(batch)
        recomputed = (pipeline.loss_dom_spec(batch) + pipeline.loss_align(batch)
                      + pipeline.loss_dom_gen(batch))
        assert terms.total.item() == pytest.approx(recomputed.item(), abs=1e-7)

    def test_align_in_range(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        for _ in range(10):
            batch = make_batch(rng, n_known_per_domain=1, n_pseudo=0)
            val = pipeline.loss_align(batch).item()
            assert 0.0 <= val <= 2.0

    def test_nonnegative_terms(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        terms = pipeline.compute_losses(make_batch(rng))
        assert terms.dom_spec.item() >= 0.0
        assert terms.dom_gen.item() >= 0.0

    def test_pseudo_open_only_batch_warns_and_zeroes(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        batch = make_batch(rng, n_known_per_domain=0, n_pseudo=3)
        with pytest.warns(UserWarning):
            terms = pipeline.compute_losses(batch)
        assert terms.dom_spec.item() == 0.0
        assert terms.align.item() == 0.0
        assert terms.dom_gen.item() > 0.0

    def test_generic_posterior_sums_to_one_per_item(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        for _ in range(5):
            emb = pipeline.image_embedding(random_image(rng))
            vocab, probs = pipeline.generic_posteriors(emb)
            assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)
            assert vocab[-1] == "unknown"

    def test_uniform_generic_posterior_closed_form(self):
        """Uniform over |C|+1 = 7 classes costs ln 7."""
        probs = torch.full((7,), 1.0 / 7.0, dtype=torch.float64)
        assert nll_from_posterior(probs[3]).item() == pytest.approx(math.log(7.0), abs=1e-12)

    def test_empty_batch_rejected(self, tiny_backbone):
        pipeline = make_pipeline(tiny_backbone)
        with pytest.raises(InputError):
            pipeline.compute_losses(LabeledBatch(items=[]))

    def test_label_outside_domain_set_rejected(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        batch = LabeledBatch(items=[LabeledExample(image=random_image(rng, domain="flat"),
                                                   label="hexagon", domain="flat")])
        with pytest.raises(ConfigurationError):
            pipeline.compute_losses(batch)

    def test_backbone_gets_no_gradient(self, tiny_backbone, rng):
        pipeline = make_pipeline(tiny_backbone)
        loss = pipeline.total_loss(make_batch(rng))
        loss.backward()
        assert all(p.grad is None for p in tiny_backbone.parameters())
        assert pipeline.modules.visual_prompt.tokens.grad is not None

    def test_stop_gradient_flag_blocks_domain_branch(self, tiny_backbone, rng):
        batch = make_batch(rng, n_known_per_domain=2, n_pseudo=0)
        flowing = make_pipeline(tiny_backbone, config=LossConfig(align_stop_domain_grad=False))
        stopped = make_pipeline(tiny_backbone, config=LossConfig(align_stop_domain_grad=True))
        flowing.loss_align(batch).backward()
        stopped.loss_align(batch).backward()
        assert flowing.modules.cross_attn.w_v.weight.grad.abs().max() > 0
        grad = stopped.modules.cross_attn.w_v.weight.grad
        assert grad is None or grad.abs().max() == 0


class TestGradientSuite:
    @pytest.mark.parametrize("loss_name", ["dom_spec", "align", "dom_gen", "total"])
    def test_every_group_matches_finite_differences(self, tiny_backbone, rng, loss_name):
        pipeline = make_pipeline(tiny_backbone, seed=3)
        batch = make_batch(rng, n_known_per_domain=2, n_pseudo=1)
        fn = {
            "dom_spec": pipeline.loss_dom_spec,
            "align": pipeline.loss_align,
            "dom_gen": pipeline.loss_dom_gen,
            "total": pipeline.total_loss,
        }[loss_name]
        check_group_grads(lambda: fn(batch), pipeline.modules.parameter_groups(),
                          rel_tol=1e-4)
