"""Training orchestration: batches, the three-term objective, checkpoints.

One optimizer step per batch over the augmented dataset, per-step loss
breakdown appended to a line-delimited log, and an epoch-end checkpoint
carrying exactly the trainable parameter groups plus optimizer state. Epoch
shuffling seeds derive deterministically from the run seed, so a resumed run
replays the identical batch schedule.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .attributes import AttributeSet
from .data import BatchPlan, LabeledExample, make_batches
from .encoders import BackboneHandle
from .errors import CheckpointSchemaError, ConfigurationError, TrainingDivergedError
from .losses import LossConfig, PromptPipeline, TrainableModules, build_modules
from .prompts import UNKNOWN_CLASS
from .synthetic import stable_seed

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 10
    optimizer: str = "adamw"
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    seed: int = 0
    batch_plan: BatchPlan = field(default_factory=lambda: BatchPlan(known_batch_size=6))
    loss: LossConfig = field(default_factory=LossConfig)
    context_length: int = 4
    n_learned_tokens: int = 2
    n_visual_tokens: int = 2
    projector_hidden: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigurationError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return _hash_dict(self.to_dict())

    def arch_hash(self) -> str:
        """Hash of everything a resumed run must share (epochs may differ)."""
        fields = self.to_dict()
        fields.pop("epochs")
        return _hash_dict(fields)


def _hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class TrainingSetup:
    """Everything train() needs besides the config: data and wiring."""

    backbone: BackboneHandle
    domain_class_names: dict[str, list[str]]
    prompt_domain_names: dict[str, str]
    attribute_sets: dict[str, AttributeSet]
    examples: list[LabeledExample]
    source_domains: list[str]

    def known_classes(self) -> list[str]:
        return sorted({c for names in self.domain_class_names.values() for c in names})


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epoch_mean_losses: list[float]


def make_optimizer(config: TrainConfig, modules: TrainableModules) -> torch.optim.Optimizer:
    params = list(modules.parameters())
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def build_pipeline(config: TrainConfig, setup: TrainingSetup,
                   modules: TrainableModules | None = None) -> PromptPipeline:
    if modules is None:
        modules = build_modules(setup.backbone, setup.known_classes(),
                                context_length=config.context_length,
                                n_learned=config.n_learned_tokens,
                                n_visual_tokens=config.n_visual_tokens,
                                projector_hidden=config.projector_hidden,
                                seed=config.seed)
    return PromptPipeline(setup.backbone, modules, setup.domain_class_names,
                          setup.attribute_sets, setup.prompt_domain_names,
                          config=config.loss)


def save_checkpoint(path: str | Path, config: TrainConfig, modules: TrainableModules,
                    optimizer: torch.optim.Optimizer, epoch: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config_hash": config.config_hash(),
        "arch_hash": config.arch_hash(),
        "config": config.to_dict(),
        "epoch": epoch,
        "modules": modules.state_dict(),
        "optimizer": optimizer.state_dict(),
        "class_vocabulary": list(modules.generic.class_vocabulary),
        "rng_state": torch.random.get_rng_state(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointSchemaError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointSchemaError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointSchemaError(f"checkpoint {path} has no schema header")
    if payload["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointSchemaError(
            f"checkpoint schema {payload['schema_version']} != "
            f"supported {CHECKPOINT_SCHEMA_VERSION}")
    return payload


def modules_from_checkpoint(payload: dict, backbone: BackboneHandle) -> TrainableModules:
    cfg = payload["config"]
    known = [c for c in payload["class_vocabulary"] if c != UNKNOWN_CLASS]
    modules = build_modules(backbone, known,
                            context_length=cfg["context_length"],
                            n_learned=cfg["n_learned_tokens"],
                            n_visual_tokens=cfg["n_visual_tokens"],
                            projector_hidden=cfg["projector_hidden"],
                            seed=cfg["seed"])
    modules.load_state_dict(payload["modules"])
    return modules


class _StepLogger:
    def __init__(self, path: Path, append: bool):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("")

    def log(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")


def _run_epochs(config: TrainConfig, setup: TrainingSetup, pipeline: PromptPipeline,
                optimizer: torch.optim.Optimizer, out_dir: Path, start_epoch: int,
                step: int, logger: _StepLogger) -> TrainResult:
    checkpoint_path = out_dir / "checkpoint.pt"
    last_saved = checkpoint_path if checkpoint_path.exists() else None
    epoch_means: list[float] = []
    modules = pipeline.modules

    for epoch in range(start_epoch, config.epochs):
        epoch_seed = stable_seed("epoch", config.seed, epoch)
        batches = make_batches(setup.examples, config.batch_plan, epoch_seed,
                               setup.source_domains)
        totals = []
        for batch in batches:
            optimizer.zero_grad(set_to_none=True)
            terms = pipeline.compute_losses(batch)
            total = terms.total
            if not math.isfinite(float(total.detach())):
                salvage = None
                if all(torch.isfinite(p).all() for p in modules.parameters()):
                    salvage = save_checkpoint(out_dir / "checkpoint_salvage.pt",
                                              config, modules, optimizer, epoch)
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1} step {step + 1}",
                    last_checkpoint=salvage or last_saved)
            total.backward()
            optimizer.step()
            step += 1
            logger.log({"step": step, "epoch": epoch + 1, **terms.detached()})
            totals.append(float(total.detach()))
        epoch_means.append(sum(totals) / len(totals))
        last_saved = save_checkpoint(checkpoint_path, config, modules, optimizer,
                                     epoch + 1)

    if last_saved is None:
        last_saved = save_checkpoint(checkpoint_path, config, modules, optimizer,
                                     start_epoch)
    return TrainResult(checkpoint_path=Path(last_saved), log_path=logger.path,
                       epoch_mean_losses=epoch_means)


def train(config: TrainConfig, setup: TrainingSetup, out_dir: str | Path) -> TrainResult:
    """Run the full optimization loop from a fresh, seeded initialization.

    The backbone stays frozen; the optimizer sees exactly the prompt-side
    parameter groups. Aborts with the last finite checkpoint if the loss
    stops being finite.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = build_pipeline(config, setup)
    optimizer = make_optimizer(config, pipeline.modules)
    logger = _StepLogger(out_dir / "train_log.jsonl", append=False)
    return _run_epochs(config, setup, pipeline, optimizer, out_dir,
                       start_epoch=0, step=0, logger=logger)


def resume(checkpoint_path: str | Path, config: TrainConfig, setup: TrainingSetup,
           out_dir: str | Path) -> TrainResult:
    """Continue training from a checkpoint with restored optimizer state.

    The checkpoint must share the run's architecture fingerprint (everything
    but the epoch horizon); running zero additional epochs rewrites an
    identical checkpoint.
    """
    payload = load_checkpoint(checkpoint_path)
    if payload["arch_hash"] != config.arch_hash():
        raise CheckpointSchemaError(
            "checkpoint was produced by a different run configuration; "
            "only the epoch horizon may change on resume")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modules = modules_from_checkpoint(payload, setup.backbone)
    pipeline = build_pipeline(config, setup, modules=modules)
    optimizer = make_optimizer(config, modules)
    optimizer.load_state_dict(payload["optimizer"])
    start_epoch = int(payload["epoch"])
    logger = _StepLogger(out_dir / "train_log.jsonl",
                         append=Path(out_dir / "train_log.jsonl").exists())
    step = _count_log_steps(out_dir / "train_log.jsonl")
    return _run_epochs(config, setup, pipeline, optimizer, out_dir,
                       start_epoch=start_epoch, step=step, logger=logger)


def _count_log_steps(path: Path) -> int:
    if not path.exists():
        return 0
    return sum(1 for line in path.read_text().splitlines() if line.strip())
