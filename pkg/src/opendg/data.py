"""Dataset registry, known/novel splits, k-shot sampling and batch assembly.

The registry encodes, per benchmark, the per-source-position class-index
sets and the target class list, with indices bound to class names in
alphabetical order. Under leave-one-domain-out, the non-target domains take
the source positions in canonical (sorted) domain order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image as PILImage

from .encoders import Image
from .errors import ConfigurationError, InputError, InsufficientDataError
from .prompts import UNKNOWN_CLASS
from .synthetic import ALL_CLASSES as SYNTHETIC_CLASSES
from .synthetic import STYLES as SYNTHETIC_STYLES
from .synthetic import SYNTHETIC_DATASET, stable_seed


def _span(*chunks) -> list[int]:
    """Expand (start, stop-inclusive) pairs and bare ints into an index list."""
    out = []
    for chunk in chunks:
        if isinstance(chunk, tuple):
            out.extend(range(chunk[0], chunk[1] + 1))
        else:
            out.append(chunk)
    return sorted(out)


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    domains: tuple[str, ...]
    source_classes: tuple[tuple[int, ...], ...]  # one tuple per source position
    target_classes: tuple[int, ...]
    class_names: tuple[str, ...] | None = None   # alphabetical; None = resolve from disk
    prompt_domain: str | None = None             # fixed prompt domain word, e.g. "Photo"
    notes: str = ""


DATASET_REGISTRY: dict[str, DatasetInfo] = {
    "pacs": DatasetInfo(
        name="pacs",
        domains=("art_painting", "cartoon", "photo", "sketch"),
        source_classes=(tuple(_span(0, 1, 3)), tuple(_span(0, 2, 4)), tuple(_span(1, 2, 5))),
        target_classes=tuple(_span((0, 6))),
        class_names=("dog", "elephant", "giraffe", "guitar", "horse", "house", "person"),
    ),
    "vlcs": DatasetInfo(
        name="vlcs",
        domains=("caltech", "labelme", "sun09", "voc2007"),
        source_classes=((0, 1), (1, 2), (2, 3)),
        target_classes=tuple(_span((0, 4))),
        class_names=("bird", "car", "chair", "dog", "person"),
        prompt_domain="Photo",
    ),
    "office_home": DatasetInfo(
        name="office_home",
        domains=("art", "clipart", "product", "real_world"),
        source_classes=(
            tuple(_span((0, 14), (21, 31))),
            tuple(_span((0, 8), (15, 20), (32, 42))),
            tuple(_span((0, 2), (9, 20), (43, 53))),
        ),
        target_classes=tuple(_span(0, (3, 4), (9, 10), (15, 16), (21, 23),
                                   (32, 34), (43, 45), (54, 64))),
    ),
    "multi_dataset": DatasetInfo(
        name="multi_dataset",
        domains=("clipart", "painting", "real", "sketch"),
        source_classes=(
            tuple(_span((0, 30))),
            tuple(_span(1, (31, 41))),
            tuple(_span(31, (33, 34), (41, 47))),
        ),
        target_classes=tuple(_span(0, 1, (5, 6), (10, 11), 14, 17, 20, 26,
                                   (31, 36), (39, 43), (45, 46), (48, 67))),
        prompt_domain="Photo",
        notes="source positions are bound to the sorted non-target domains; "
              "the published split table does not name them",
    ),
    "mini_domainnet": DatasetInfo(
        name="mini_domainnet",
        domains=("clipart", "painting", "real", "sketch"),
        source_classes=(
            tuple(_span((0, 19), (40, 59))),
            tuple(_span((0, 9), (20, 39), (80, 89))),
            tuple(_span((10, 19), (40, 49), (60, 79))),
        ),
        target_classes=tuple(_span((0, 4), (8, 17), (25, 34), (43, 47),
                                   (75, 79), (83, 87), (90, 125))),
        notes="source positions are bound to the sorted non-target domains; "
              "the published split table does not name them",
    ),
    SYNTHETIC_DATASET: DatasetInfo(
        name=SYNTHETIC_DATASET,
        domains=tuple(SYNTHETIC_STYLES),
        source_classes=(
            tuple(sorted(SYNTHETIC_CLASSES.index(c) for c in ("circle", "cross", "square", "triangle"))),
        ) * 3,
        target_classes=tuple(range(len(SYNTHETIC_CLASSES))),
        class_names=tuple(SYNTHETIC_CLASSES),
    ),
}


@dataclass
class SplitSpec:
    """Per-domain class-index sets plus the target known/novel partition."""

    dataset_name: str
    target_domain: str
    source_domains: list[str]
    per_source_classes: list[frozenset[int]]
    target_classes: frozenset[int]
    target_known: frozenset[int]
    target_novel: frozenset[int]
    class_names: list[str] | None = None

    def __post_init__(self):
        union = frozenset().union(*self.per_source_classes)
        if self.target_known != union:
            raise ConfigurationError("target_known must equal the union of source class sets")
        if self.target_known & self.target_novel:
            raise ConfigurationError("known and novel target classes overlap")

    def class_name(self, index: int) -> str:
        if self.class_names is None:
            raise ConfigurationError(
                f"{self.dataset_name} has no registered class names; resolve them from the dataset")
        return self.class_names[index]

    def known_class_names(self) -> list[str]:
        return sorted(self.class_name(i) for i in self.target_known)

    def domain_class_names(self) -> dict[str, list[str]]:
        return {
            domain: sorted(self.class_name(i) for i in classes)
            for domain, classes in zip(self.source_domains, self.per_source_classes)
        }


def canonical_split_table(dataset_name: str) -> str:
    """Serialize a dataset's split table for byte-comparison with fixtures."""
    info = _dataset_info(dataset_name)
    table = {
        "dataset": info.name,
        "domains": list(info.domains),
        "class_names": list(info.class_names) if info.class_names else None,
        "source_classes": [sorted(s) for s in info.source_classes],
        "target_classes": sorted(info.target_classes),
        "notes": info.notes,
    }
    return json.dumps(table, indent=1, sort_keys=True) + "\n"


def _dataset_info(dataset_name: str) -> DatasetInfo:
    if dataset_name not in DATASET_REGISTRY:
        raise InputError(f"unknown dataset {dataset_name!r}; "
                         f"registered: {sorted(DATASET_REGISTRY)}")
    return DATASET_REGISTRY[dataset_name]


def prompt_domain_name(dataset_name: str, domain: str) -> str:
    """The domain word rendered into domain-specific prompts."""
    info = _dataset_info(dataset_name)
    if info.prompt_domain is not None:
        return info.prompt_domain
    return domain.replace("_", " ").title()


def build_splits(dataset_name: str, target_domain: str) -> SplitSpec:
    """Assemble the leave-one-domain-out split for one target domain."""
    info = _dataset_info(dataset_name)
    if target_domain not in info.domains:
        raise InputError(f"unknown domain {target_domain!r} for {dataset_name}; "
                         f"registered: {list(info.domains)}")
    sources = [d for d in info.domains if d != target_domain]
    if len(sources) != len(info.source_classes):
        raise ConfigurationError(
            f"{dataset_name} registers {len(info.source_classes)} source positions "
            f"but {len(sources)} non-target domains")
    per_source = [frozenset(s) for s in info.source_classes]
    known = frozenset().union(*per_source)
    target = frozenset(info.target_classes)
    return SplitSpec(
        dataset_name=dataset_name,
        target_domain=target_domain,
        source_domains=sources,
        per_source_classes=per_source,
        target_classes=target,
        target_known=known,
        target_novel=target - known,
        class_names=list(info.class_names) if info.class_names else None,
    )


# ---------------------------------------------------------------------------
# Examples and batches
# ---------------------------------------------------------------------------


@dataclass
class LabeledExample:
    """One image with its class label and the domain it came from.

    Pseudo-open samples carry the unknown label and their styled domain tag;
    target-domain novel items keep their true (novel) class name as label.
    """

    image: Image
    label: str
    domain: str

    @property
    def is_pseudo_open(self) -> bool:
        return self.label == UNKNOWN_CLASS


@dataclass
class LabeledBatch:
    items: list[LabeledExample]
    remainder: bool = False

    @property
    def known_items(self) -> list[LabeledExample]:
        return [e for e in self.items if not e.is_pseudo_open]

    @property
    def pseudo_open_items(self) -> list[LabeledExample]:
        return [e for e in self.items if e.is_pseudo_open]

    def counts_per_domain(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.items:
            counts[e.domain] = counts.get(e.domain, 0) + 1
        return counts


@dataclass
class ShotConfig:
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"shots per class must be >= 1, got {self.k}")


@dataclass
class BatchPlan:
    known_batch_size: int
    pseudo_open_per_source_domain: int = 3

    def __post_init__(self):
        if self.known_batch_size < 0 or self.pseudo_open_per_source_domain < 0:
            raise InputError("batch plan counts must be >= 0")


class SourceDataset(Protocol):
    def domains(self) -> list[str]: ...
    def class_names(self) -> list[str]: ...
    def images(self, domain: str, class_name: str) -> list[Image]: ...


class FolderDataset:
    """Images laid out as root/domain/class_name/files.

    Every image is resized (shorter side, bilinear interpolation) and
    center-cropped to the requested square resolution at load time.
    """

    def __init__(self, root: str | Path, image_size: int):
        self.root = Path(root)
        self.image_size = image_size
        if not self.root.is_dir():
            raise InputError(f"dataset root {self.root} is not a directory")

    def domains(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def class_names(self) -> list[str]:
        names = set()
        for domain in self.domains():
            names.update(p.name for p in (self.root / domain).iterdir() if p.is_dir())
        return sorted(names)

    def image_paths(self, domain: str, class_name: str) -> list[Path]:
        folder = self.root / domain / class_name
        if not folder.is_dir():
            return []
        return sorted(p for p in folder.iterdir() if p.is_file())

    def load(self, path: Path, domain: str) -> Image:
        with PILImage.open(path) as img:
            img = img.convert("RGB")
            w, h = img.size
            scale = self.image_size / min(w, h)
            img = img.resize((max(round(w * scale), self.image_size),
                              max(round(h * scale), self.image_size)),
                             PILImage.BILINEAR)
            w, h = img.size
            left = (w - self.image_size) // 2
            top = (h - self.image_size) // 2
            img = img.crop((left, top, left + self.image_size, top + self.image_size))
            px = np.asarray(img, dtype=np.float64) / 255.0
        return Image(pixels=px, domain_tag=domain)

    def images(self, domain: str, class_name: str) -> list[Image]:
        return [self.load(p, domain) for p in self.image_paths(domain, class_name)]


def sample_k_shot(split: SplitSpec, shots: ShotConfig, dataset: SourceDataset) -> list[LabeledExample]:
    """Draw exactly k images per (source domain, class in that domain's set).

    Selection is seeded per (seed, domain, class) so it is independent of
    iteration order and reproducible across runs.
    """
    examples = []
    for domain, class_indices in zip(split.source_domains, split.per_source_classes):
        for index in sorted(class_indices):
            name = split.class_name(index)
            pool = dataset.images(domain, name)
            if len(pool) < shots.k:
                raise InsufficientDataError(
                    f"domain {domain!r} class {name!r} has {len(pool)} images, "
                    f"need k={shots.k}")
            rng = np.random.default_rng(stable_seed("kshot", shots.seed, domain, name))
            chosen = rng.choice(len(pool), size=shots.k, replace=False)
            examples.extend(
                LabeledExample(image=pool[i], label=name, domain=domain)
                for i in sorted(int(i) for i in chosen)
            )
    return examples


class _StylePool:
    """Draws pseudo-open items of one style without replacement, recycling
    (reshuffled) once the pool is exhausted."""

    def __init__(self, items: list[LabeledExample], rng: np.random.Generator):
        self.items = items
        self.rng = rng
        self.order = list(rng.permutation(len(items)))
        self.cursor = 0

    def draw(self, count: int) -> list[LabeledExample]:
        out = []
        for _ in range(count):
            if self.cursor >= len(self.order):
                self.order = list(self.rng.permutation(len(self.items)))
                self.cursor = 0
            out.append(self.items[self.order[self.cursor]])
            self.cursor += 1
        return out


def make_batches(examples: list[LabeledExample], plan: BatchPlan, epoch_seed: int,
                 source_domains: list[str]) -> list[LabeledBatch]:
    """Assemble one epoch of batches from the augmented example set.

    Each batch holds ``known_batch_size`` known items (every known item
    appears exactly once per epoch; a short final batch is flagged) plus
    ``pseudo_open_per_source_domain`` unknown-labeled items per source style.
    """
    known = [e for e in examples if not e.is_pseudo_open]
    pseudo = [e for e in examples if e.is_pseudo_open]
    if not known:
        raise InputError("no known-class examples to batch")
    if plan.known_batch_size == 0:
        raise InputError("known_batch_size must be positive to form batches")

    pools: dict[str, _StylePool] = {}
    if plan.pseudo_open_per_source_domain > 0:
        by_style: dict[str, list[LabeledExample]] = {}
        for e in pseudo:
            by_style.setdefault(e.domain, []).append(e)
        missing = [d for d in source_domains if not by_style.get(d)]
        if missing:
            raise InputError(
                f"no pseudo-open items for source style(s) {missing}; "
                f"set pseudo_open_per_source_domain=0 to train without them")
        pools = {
            d: _StylePool(by_style[d], np.random.default_rng(stable_seed("pool", epoch_seed, d)))
            for d in source_domains
        }

    rng = np.random.default_rng(stable_seed("batches", epoch_seed))
    order = rng.permutation(len(known))
    batches = []
    for start in range(0, len(known), plan.known_batch_size):
        chunk = [known[i] for i in order[start:start + plan.known_batch_size]]
        items = list(chunk)
        for domain in source_domains:
            if plan.pseudo_open_per_source_domain > 0:
                items.extend(pools[domain].draw(plan.pseudo_open_per_source_domain))
        batches.append(LabeledBatch(items=items, remainder=len(chunk) < plan.known_batch_size))
    return batches
