"""Inference over the domain-agnostic prompts and open-set metrics.

Prediction is the cosine argmax over the generic prompts for every known
class plus "unknown"; closed-set accuracy counts only true-known target
items (a known item predicted "unknown" is an error), novel accuracy is the
fraction of novel items mapped to "unknown", and the H-score is their
harmonic mean.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import LabeledExample
from .encoders import BackboneHandle, Image
from .errors import InputError
from .losses import TrainableModules, cosine
from .prompts import UNKNOWN_CLASS, assemble_generic_prompt
from .synthetic import stable_seed
from .trainer import load_checkpoint, modules_from_checkpoint


class Predictor:
    """Frozen inference head: image embedding vs generic prompt embeddings."""

    def __init__(self, backbone: BackboneHandle, modules: TrainableModules):
        self.backbone = backbone
        self.modules = modules
        self.vocabulary = list(modules.generic.class_vocabulary)
        with torch.no_grad():
            self._prompt_embs = torch.stack([
                backbone.encode_text(
                    assemble_generic_prompt(modules.generic, modules.visual_prompt,
                                            modules.projector, name, backbone)).vector
                for name in self.vocabulary
            ])

    @classmethod
    def from_checkpoint(cls, path: str | Path, backbone: BackboneHandle) -> "Predictor":
        payload = load_checkpoint(path)
        return cls(backbone, modules_from_checkpoint(payload, backbone))

    def similarities(self, image: Image) -> np.ndarray:
        with torch.no_grad():
            emb = self.backbone.encode_image(image, prompt=self.modules.visual_prompt)
            sims = torch.stack([cosine(p, emb.vector) for p in self._prompt_embs])
        return sims.numpy()

    def predict(self, image: Image) -> str:
        # np.argmax takes the first maximum: ties break to the lowest index.
        return self.vocabulary[int(np.argmax(self.similarities(image)))]


def predict(image: Image, checkpoint: str | Path | Predictor,
            backbone: BackboneHandle | None = None) -> str:
    """One-off prediction from a checkpoint path or a prebuilt predictor."""
    if isinstance(checkpoint, Predictor):
        return checkpoint.predict(image)
    if backbone is None:
        raise InputError("a backbone is required when predicting from a checkpoint path")
    return Predictor.from_checkpoint(checkpoint, backbone).predict(image)


def compute_h_score(closed_acc: float, novel_acc: float) -> float:
    """Harmonic mean of closed-set and novel-rejection accuracy."""
    for value in (closed_acc, novel_acc):
        if not 0.0 <= value <= 1.0:
            raise InputError(f"accuracies must lie in [0, 1], got {value}")
    if closed_acc + novel_acc == 0.0:
        return 0.0
    return 2.0 * closed_acc * novel_acc / (closed_acc + novel_acc)


@dataclass
class EvalReport:
    closed_acc: float
    novel_acc: float
    h_score: float
    n_known: int
    n_novel: int
    known_classes: list[str]
    confusion: list[list] = field(default_factory=list)  # [true, pred, count] rows

    def to_json(self) -> str:
        record = {
            "closed_acc": self.closed_acc, "novel_acc": self.novel_acc,
            "h_score": self.h_score, "n_known": self.n_known, "n_novel": self.n_novel,
            "known_classes": self.known_classes, "confusion": self.confusion,
        }
        return json.dumps(record, sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        record = json.loads(text)
        return cls(closed_acc=record["closed_acc"], novel_acc=record["novel_acc"],
                   h_score=record["h_score"], n_known=record["n_known"],
                   n_novel=record["n_novel"], known_classes=record["known_classes"],
                   confusion=[list(r) for r in record["confusion"]])

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def report_from_confusion(confusion: list[list], known_classes: list[str]) -> EvalReport:
    """Recompute all three metrics from stored confusion counts."""
    known = set(known_classes)
    n_known = n_novel = known_correct = novel_rejected = 0
    for true, pred, count in confusion:
        if true in known:
            n_known += count
            if pred == true:
                known_correct += count
        else:
            n_novel += count
            if pred == UNKNOWN_CLASS:
                novel_rejected += count
    closed = known_correct / n_known if n_known else 0.0
    novel = novel_rejected / n_novel if n_novel else 0.0
    return EvalReport(closed_acc=closed, novel_acc=novel,
                      h_score=compute_h_score(closed, novel),
                      n_known=n_known, n_novel=n_novel,
                      known_classes=sorted(known_classes), confusion=confusion)


def evaluate(target_items: list[LabeledExample], predict_fn: Callable[[Image], str],
             known_classes: list[str]) -> EvalReport:
    """Score a labeled target set; items with labels outside the known set
    are the novel items and must map to the unknown class."""
    if not target_items:
        raise InputError("target set is empty")
    counts: dict[tuple[str, str], int] = {}
    for item in target_items:
        pred = predict_fn(item.image)
        counts[(item.label, pred)] = counts.get((item.label, pred), 0) + 1
    confusion = [[true, pred, count] for (true, pred), count in sorted(counts.items())]
    return report_from_confusion(confusion, known_classes)


def evaluate_checkpoint(target_items: list[LabeledExample], checkpoint: str | Path,
                        backbone: BackboneHandle) -> EvalReport:
    predictor = Predictor.from_checkpoint(checkpoint, backbone)
    known = [c for c in predictor.vocabulary if c != UNKNOWN_CLASS]
    return evaluate(target_items, predictor.predict, known)


@dataclass
class SweepPoint:
    ratio: float
    novel_classes: list[str]
    report: EvalReport


def openness_sweep(target_items: list[LabeledExample], predict_fn: Callable[[Image], str],
                   known_classes: list[str], ratios: list[float],
                   seed: int = 0) -> list[SweepPoint]:
    """Evaluate at several novel-to-known class-count ratios.

    For each ratio the novel classes are subsampled (seeded); ratios that
    round to zero or exceed the available novel classes are skipped with a
    warning.
    """
    known = set(known_classes)
    novel_classes = sorted({e.label for e in target_items if e.label not in known})
    known_present = sorted({e.label for e in target_items if e.label in known})
    if not known_present:
        raise InputError("target set has no known-class items to sweep over")
    points = []
    for ratio in ratios:
        wanted = round(ratio * len(known_present))
        if wanted < 1 or wanted > len(novel_classes):
            warnings.warn(f"openness ratio {ratio} is infeasible with "
                          f"{len(novel_classes)} novel classes; skipped")
            continue
        rng = np.random.default_rng(stable_seed("openness", seed, ratio))
        chosen = sorted(rng.choice(novel_classes, size=wanted, replace=False).tolist())
        subset = [e for e in target_items
                  if e.label in known or e.label in chosen]
        report = evaluate(subset, predict_fn, known_classes)
        points.append(SweepPoint(ratio=ratio, novel_classes=chosen, report=report))
    return points


SWEEP_COLUMNS = ("ratio", "n_novel_classes", "closed_acc", "novel_acc", "h_score", "seed")


def write_sweep_table(points: list[SweepPoint], path: str | Path, seed: int = 0) -> None:
    """Plot-ready delimited table, one row per sweep point."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for p in points:
            writer.writerow([p.ratio, len(p.novel_classes), p.report.closed_acc,
                             p.report.novel_acc, p.report.h_score, seed])


def mean_report(reports: list[EvalReport]) -> EvalReport:
    """Arithmetic mean over per-seed or per-target reports."""
    if not reports:
        raise InputError("no reports to average")
    known = sorted({c for r in reports for c in r.known_classes})
    return EvalReport(
        closed_acc=sum(r.closed_acc for r in reports) / len(reports),
        novel_acc=sum(r.novel_acc for r in reports) / len(reports),
        h_score=sum(r.h_score for r in reports) / len(reports),
        n_known=sum(r.n_known for r in reports),
        n_novel=sum(r.n_novel for r in reports),
        known_classes=known,
        confusion=[],
    )
