from importlib import resources

import numpy as np
import pytest

from opendg.data import (
    DATASET_REGISTRY,
    BatchPlan,
    FolderDataset,
    LabeledBatch,
    LabeledExample,
    ShotConfig,
    build_splits,
    canonical_split_table,
    make_batches,
    prompt_domain_name,
    sample_k_shot,
)
from opendg.errors import InputError, InsufficientDataError
from opendg.synthetic import SyntheticShapeDataset

FIXTURES = resources.files("opendg") / "fixtures" / "splits"


class TestSplitRegistry:
    @pytest.mark.parametrize("name", ["pacs", "vlcs", "office_home"])
    def test_byte_identical_to_shipped_fixture(self, name):
        shipped = (FIXTURES / f"{name}.json").read_bytes()
        assert canonical_split_table(name).encode() == shipped

    @pytest.mark.parametrize("name", sorted(DATASET_REGISTRY))
    def test_all_registered_tables_have_fixtures(self, name):
        shipped = (FIXTURES / f"{name}.json").read_bytes()
        assert canonical_split_table(name).encode() == shipped

    def test_pacs_source_sets(self):
        split = build_splits("pacs", "sketch")
        assert [set(s) for s in split.per_source_classes] == [
            {3, 0, 1}, {4, 0, 2}, {5, 1, 2}]
        assert split.target_classes == frozenset(range(7))

    def test_pacs_known_novel(self):
        split = build_splits("pacs", "photo")
        assert split.target_known == frozenset(range(6))
        assert split.target_novel == frozenset({6})
        assert split.class_name(6) == "person"

    def test_vlcs_split(self):
        split = build_splits("vlcs", "voc2007")
        assert [set(s) for s in split.per_source_classes] == [{0, 1}, {1, 2}, {2, 3}]
        assert split.target_classes == frozenset(range(5))
        assert split.target_novel == frozenset({4})

    def test_union_invariant_everywhere(self):
        for name, info in DATASET_REGISTRY.items():
            for target in info.domains:
                split = build_splits(name, target)
                assert split.target_known == frozenset().union(*split.per_source_classes)
                assert not (split.target_known & split.target_novel)

    def test_unknown_dataset_or_domain(self):
        with pytest.raises(InputError):
            build_splits("imagenet", "photo")
        with pytest.raises(InputError):
            build_splits("pacs", "watercolor")

    def test_source_positions_follow_sorted_domains(self):
        split = build_splits("pacs", "cartoon")
        assert split.source_domains == ["art_painting", "photo", "sketch"]

    def test_prompt_domain_names(self):
        assert prompt_domain_name("pacs", "art_painting") == "Art Painting"
        assert prompt_domain_name("vlcs", "caltech") == "Photo"
        assert prompt_domain_name("multi_dataset", "sketch") == "Photo"


class TestKShotSampling:
    def test_deterministic_under_seed(self):
        split = build_splits("synthetic-shapes", "outline")
        data = SyntheticShapeDataset(seed=1)
        a = sample_k_shot(split, ShotConfig(k=2, seed=5), data)
        b = sample_k_shot(split, ShotConfig(k=2, seed=5), data)
        assert [(e.label, e.domain) for e in a] == [(e.label, e.domain) for e in b]
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.image.pixels, eb.image.pixels)

    def test_seed_changes_selection(self):
        split = build_splits("synthetic-shapes", "outline")
        data = SyntheticShapeDataset(seed=1)
        a = sample_k_shot(split, ShotConfig(k=1, seed=5), data)
        b = sample_k_shot(split, ShotConfig(k=1, seed=6), data)
        same = all(np.array_equal(ea.image.pixels, eb.image.pixels) for ea, eb in zip(a, b))
        assert not same

    def test_counts_match_split_table(self):
        """One shot of a three-class-per-source split yields 3 x 3 items."""
        split = build_splits("pacs", "sketch")
        data = _FakeDataset(split, per_class=4)
        examples = sample_k_shot(split, ShotConfig(k=1, seed=0), data)
        assert len(examples) == 9
        per_domain = {}
        for e in examples:
            per_domain.setdefault(e.domain, []).append(e.label)
        assert all(len(v) == 3 for v in per_domain.values())

    def test_never_samples_outside_domain_class_set(self):
        split = build_splits("pacs", "sketch")
        data = _FakeDataset(split, per_class=4)
        examples = sample_k_shot(split, ShotConfig(k=2, seed=0), data)
        allowed = split.domain_class_names()
        for e in examples:
            assert e.label in allowed[e.domain]

    def test_insufficient_images_error_names_pair(self):
        split = build_splits("pacs", "sketch")
        data = _FakeDataset(split, per_class=1)
        with pytest.raises(InsufficientDataError, match="art_painting.*dog|dog.*art_painting"):
            sample_k_shot(split, ShotConfig(k=2, seed=0), data)

    def test_k_must_be_positive(self):
        with pytest.raises(InputError):
            ShotConfig(k=0)


class _FakeDataset:
    """Per-(domain, class) pools of distinct constant-ish images."""

    def __init__(self, split, per_class):
        self.split = split
        self.per_class = per_class

    def domains(self):
        return list(self.split.source_domains) + [self.split.target_domain]

    def class_names(self):
        return list(self.split.class_names)

    def images(self, domain, class_name):
        from opendg.encoders import Image
        idx = self.split.class_names.index(class_name)
        return [Image(pixels=np.full((8, 8, 3), (idx * self.per_class + i + 1) / 64.0),
                      domain_tag=domain)
                for i in range(self.per_class)]


def _pseudo_items(styles, per_style):
    from opendg.encoders import Image
    items = []
    for s, style in enumerate(styles):
        for i in range(per_style):
            items.append(LabeledExample(
                image=Image(pixels=np.full((8, 8, 3), (s * per_style + i + 1) / 32.0),
                            domain_tag=style),
                label="unknown", domain=style))
    return items


class TestMakeBatches:
    def setup_method(self):
        split = build_splits("pacs", "sketch")
        data = _FakeDataset(split, per_class=4)
        self.split = split
        self.known = sample_k_shot(split, ShotConfig(k=2, seed=0), data)  # 18 items
        self.pseudo = _pseudo_items(split.source_domains, per_style=5)

    def test_batch_composition_six_plus_nine(self):
        batches = make_batches(self.known + self.pseudo, BatchPlan(6, 3), epoch_seed=1,
                               source_domains=self.split.source_domains)
        for batch in batches:
            assert len(batch.known_items) == 6
            assert len(batch.pseudo_open_items) == 9
            assert all(e.label == "unknown" for e in batch.pseudo_open_items)
            per_style = {}
            for e in batch.pseudo_open_items:
                per_style[e.domain] = per_style.get(e.domain, 0) + 1
            assert per_style == {d: 3 for d in self.split.source_domains}

    def test_epoch_covers_each_known_item_exactly_once(self):
        """Multiset-equality oracle over the epoch's known items."""
        batches = make_batches(self.known + self.pseudo, BatchPlan(6, 3), epoch_seed=1,
                               source_domains=self.split.source_domains)
        seen = [id(e) for b in batches for e in b.known_items]
        assert sorted(seen) == sorted(id(e) for e in self.known)

    def test_pure_known_batches(self):
        batches = make_batches(self.known, BatchPlan(6, 0), epoch_seed=1,
                               source_domains=self.split.source_domains)
        assert all(not b.pseudo_open_items for b in batches)

    def test_remainder_batch_flagged(self):
        batches = make_batches(self.known + self.pseudo, BatchPlan(4, 3), epoch_seed=1,
                               source_domains=self.split.source_domains)
        assert [b.remainder for b in batches] == [False, False, False, False, True]
        assert len(batches[-1].known_items) == 2
        assert len(batches[-1].pseudo_open_items) == 9

    def test_no_pseudo_open_available_errors(self):
        with pytest.raises(InputError):
            make_batches(self.known, BatchPlan(6, 3), epoch_seed=1,
                         source_domains=self.split.source_domains)

    def test_shuffle_deterministic_per_epoch_seed(self):
        a = make_batches(self.known + self.pseudo, BatchPlan(6, 3), epoch_seed=7,
                         source_domains=self.split.source_domains)
        b = make_batches(self.known + self.pseudo, BatchPlan(6, 3), epoch_seed=7,
                         source_domains=self.split.source_domains)
        c = make_batches(self.known + self.pseudo, BatchPlan(6, 3), epoch_seed=8,
                         source_domains=self.split.source_domains)
        ids = lambda bs: [[id(e) for e in b.items] for b in bs]
        assert ids(a) == ids(b)
        assert ids(a) != ids(c)


class TestFolderDataset:
    def test_layout_and_resize(self, tmp_path):
        from PIL import Image as PILImage
        for domain in ("photo", "sketch"):
            for cls in ("dog", "house"):
                folder = tmp_path / domain / cls
                folder.mkdir(parents=True)
                PILImage.new("RGB", (40, 24), color=(128, 64, 32)).save(folder / "a.png")
        ds = FolderDataset(tmp_path, image_size=16)
        assert ds.domains() == ["photo", "sketch"]
        assert ds.class_names() == ["dog", "house"]
        imgs = ds.images("photo", "dog")
        assert len(imgs) == 1
        assert imgs[0].pixels.shape == (16, 16, 3)
        assert imgs[0].domain_tag == "photo"

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(InputError):
            FolderDataset(tmp_path / "nope", image_size=16)
