"""Operator entry point: synthesize, train, eval, sweep, and report.

Every command reads one declarative YAML config (with ``--override
key=value`` dotted-path patches), validates it fully before any side
effect, and writes its artifacts under the run's output directory. A lock
file keeps concurrent runs out of the same directory.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .attributes import AttributeSet, load_attribute_manifest
from .data import (
    DATASET_REGISTRY,
    BatchPlan,
    FolderDataset,
    LabeledExample,
    ShotConfig,
    SplitSpec,
    build_splits,
    prompt_domain_name,
    sample_k_shot,
)
from .encoders import load_backbone_arrays, make_tiny_backbone
from .errors import (
    CheckpointSchemaError,
    ConfigurationError,
    CredentialError,
    InputError,
    MissingFilesError,
    OpenDGError,
    ServiceError,
    TrainingDivergedError,
)
from .evaluator import (
    EvalReport,
    Predictor,
    evaluate,
    mean_report,
    openness_sweep,
    write_sweep_table,
)
from .losses import LossConfig
from .prompts import UNKNOWN_CLASS
from .synthesis import (
    ChatCompletionClient,
    DiffusionClient,
    FixtureImageClient,
    FixtureNameClient,
    OpenClassNameSet,
    PseudoOpenManifest,
    build_augmented_dataset,
    generate_open_class_names,
    synthesize_open_images,
)
from .synthetic import (
    SYNTHETIC_ATTRIBUTES,
    SYNTHETIC_DATASET,
    SYNTHETIC_PSEUDO_OPEN_NAMES,
    SyntheticShapeDataset,
    stable_seed,
)
from .trainer import TrainConfig, TrainingSetup, train

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_RUNTIME_FAILURE = 2

DEFAULT_CONFIG = {
    "dataset": SYNTHETIC_DATASET,
    "target_domain": "outline",
    "k": 1,
    "seeds": [0],
    "output_dir": "runs/default",
    "backbone": {
        "kind": "tiny",
        "seed": 7,
        "d_patch": 32,
        "d_tok": 32,
        "d_joint": 16,
        "depth": 2,
        "image_size": 32,
        "patch_size": 8,
        "channels": 3,
        "context_capacity": 16,
        "checkpoint": None,
    },
    "data": {"root": None, "per_class": 8, "dataset_seed": 2},
    "attributes": {"manifest": None},
    "synthesis": {
        "mode": "manifest",
        "manifest_path": None,
        "names": None,
        "names_fixture": None,
        "count_per_name": 3,
        "name_seed": 0,
        "llm_endpoint": None,
        "diffusion_endpoint": None,
        "llm_credential_env": "OPENDG_LLM_API_KEY",
        "diffusion_credential_env": "OPENDG_DIFFUSION_API_KEY",
    },
    "train": {
        "epochs": 10,
        "optimizer": "adamw",
        "learning_rate": 2e-3,
        "weight_decay": 0.0,
        "momentum": 0.9,
        "batch_plan": {"known_batch_size": 6, "pseudo_open_per_source_domain": 3},
        "loss": {"tau": 0.01, "align_stop_domain_grad": False},
        "context_length": 4,
        "n_learned_tokens": 2,
        "n_visual_tokens": 2,
        "projector_hidden": 32,
    },
    "eval": {"sweep_ratios": [], "sweep_seed": 0},
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(config: dict, spec: str) -> None:
    """Patch a dotted path, e.g. train.learning_rate=0.01."""
    if "=" not in spec:
        raise InputError(f"override {spec!r} must look like key=value")
    key, raw = spec.split("=", 1)
    value = yaml.safe_load(raw)
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


@dataclass
class RunConfig:
    """Validated view over the merged config dictionary."""

    raw: dict
    dataset: str
    target_domain: str
    k: int
    seeds: list[int]
    output_dir: Path
    offline: bool = False

    @classmethod
    def from_dict(cls, raw: dict, offline: bool = False) -> "RunConfig":
        merged = _deep_merge(DEFAULT_CONFIG, raw)
        if offline:
            merged["synthesis"]["mode"] = "manifest"
        config = cls(raw=merged, dataset=merged["dataset"],
                     target_domain=merged["target_domain"], k=int(merged["k"]),
                     seeds=[int(s) for s in merged["seeds"]],
                     output_dir=Path(merged["output_dir"]), offline=offline)
        config.validate()
        return config

    def validate(self) -> None:
        if self.dataset not in DATASET_REGISTRY:
            raise InputError(f"unknown dataset {self.dataset!r}; "
                             f"registered: {sorted(DATASET_REGISTRY)}")
        domains = DATASET_REGISTRY[self.dataset].domains
        if self.target_domain != "all" and self.target_domain not in domains:
            raise InputError(f"target domain {self.target_domain!r} not in {list(domains)}")
        if self.k < 1:
            raise InputError("k must be >= 1")
        if not self.seeds:
            raise InputError("at least one seed is required")
        backbone = self.raw["backbone"]
        if backbone["kind"] not in ("tiny", "pretrained"):
            raise InputError("backbone.kind must be tiny or pretrained")
        if backbone["kind"] == "pretrained":
            path = backbone.get("checkpoint")
            if not path or not Path(path).exists():
                raise InputError("backbone.checkpoint must point at an existing "
                                 "named-array container for kind=pretrained")
        synthesis = self.raw["synthesis"]
        if synthesis["mode"] not in ("live", "manifest"):
            raise InputError("synthesis.mode must be live or manifest")
        if self.raw["data"]["root"] is not None and not Path(self.raw["data"]["root"]).is_dir():
            raise InputError(f"data.root {self.raw['data']['root']!r} is not a directory")
        manifest_path = synthesis.get("manifest_path")
        if manifest_path and not Path(manifest_path).exists():
            raise InputError(f"synthesis.manifest_path {manifest_path!r} does not exist")
        attrs = self.raw["attributes"].get("manifest")
        if attrs and not Path(attrs).exists():
            raise InputError(f"attributes.manifest {attrs!r} does not exist")
        fixture = synthesis.get("names_fixture")
        if fixture and not Path(fixture).exists():
            raise InputError(f"synthesis.names_fixture {fixture!r} does not exist")

    # -- derived pieces ------------------------------------------------------

    def targets(self) -> list[str]:
        if self.target_domain == "all":
            return list(DATASET_REGISTRY[self.dataset].domains)
        return [self.target_domain]

    def backbone(self):
        spec = self.raw["backbone"]
        if spec["kind"] == "pretrained":
            return load_backbone_arrays(spec["checkpoint"])
        dims = {k: int(spec[k]) for k in ("d_patch", "d_tok", "d_joint")}
        return make_tiny_backbone(
            seed=int(spec["seed"]), dims=dims, depth=int(spec["depth"]),
            image_size=int(spec["image_size"]), patch_size=int(spec["patch_size"]),
            channels=int(spec["channels"]),
            context_capacity=int(spec["context_capacity"]))

    def dataset_source(self, backbone):
        root = self.raw["data"]["root"]
        if root is not None:
            return FolderDataset(root, image_size=backbone.image_size)
        if self.dataset != SYNTHETIC_DATASET:
            raise InputError(f"dataset {self.dataset!r} needs data.root pointing at "
                             f"root/domain/class_name image folders")
        return SyntheticShapeDataset(seed=int(self.raw["data"]["dataset_seed"]),
                                     size=backbone.image_size,
                                     per_class=int(self.raw["data"]["per_class"]))

    def train_config(self, seed: int) -> TrainConfig:
        spec = self.raw["train"]
        return TrainConfig(
            epochs=int(spec["epochs"]), optimizer=spec["optimizer"],
            learning_rate=float(spec["learning_rate"]),
            weight_decay=float(spec["weight_decay"]), momentum=float(spec["momentum"]),
            seed=seed,
            batch_plan=BatchPlan(
                known_batch_size=int(spec["batch_plan"]["known_batch_size"]),
                pseudo_open_per_source_domain=int(
                    spec["batch_plan"]["pseudo_open_per_source_domain"])),
            loss=LossConfig(tau=float(spec["loss"]["tau"]),
                            align_stop_domain_grad=bool(spec["loss"]["align_stop_domain_grad"])),
            context_length=int(spec["context_length"]),
            n_learned_tokens=int(spec["n_learned_tokens"]),
            n_visual_tokens=int(spec["n_visual_tokens"]),
            projector_hidden=int(spec["projector_hidden"]),
        )

    def attribute_sets(self, known_classes: list[str]) -> dict[str, AttributeSet]:
        manifest = self.raw["attributes"].get("manifest")
        if manifest:
            sets = load_attribute_manifest(manifest)
        elif self.dataset == SYNTHETIC_DATASET:
            sets = {name: AttributeSet(name, SYNTHETIC_ATTRIBUTES[name])
                    for name in SYNTHETIC_ATTRIBUTES}
        else:
            raise InputError(f"dataset {self.dataset!r} needs attributes.manifest")
        missing = [c for c in known_classes if c not in sets]
        if missing:
            raise InputError(f"attribute manifest lacks classes: {missing}")
        return sets

    def pseudo_open_names(self) -> list[str]:
        spec = self.raw["synthesis"]
        if spec.get("names"):
            return list(spec["names"])
        if spec.get("names_fixture"):
            record = json.loads(Path(spec["names_fixture"]).read_text(encoding="utf-8"))
            names = [n for group in record.get("related", {}).values() for n in group]
            return names + record.get("additional", [])
        if self.dataset == SYNTHETIC_DATASET:
            return list(SYNTHETIC_PSEUDO_OPEN_NAMES)
        raise InputError("synthesis.names or synthesis.names_fixture is required "
                         "for manifest-mode synthesis on this dataset")

    def manifest_path(self, target: str) -> Path:
        spec = self.raw["synthesis"].get("manifest_path")
        if spec:
            return Path(spec)
        return self.output_dir / f"target-{target}" / "pseudo_open" / "manifest.jsonl"


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """One run per output directory, enforced with an O_EXCL lock file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InputError(f"output directory {out_dir} is locked by another run "
                         f"(remove {lock} if that run is dead)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_run_config(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file {path} does not exist")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    for spec in args.override or []:
        apply_override(raw, spec)
    if args.output:
        raw["output_dir"] = args.output
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    return RunConfig.from_dict(raw, offline=bool(args.offline))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _name_client(config: RunConfig):
    spec = config.raw["synthesis"]
    if spec["mode"] == "manifest":
        return FixtureNameClient(config.pseudo_open_names())
    endpoint = spec.get("llm_endpoint")
    if not endpoint:
        raise InputError("synthesis.llm_endpoint is required in live mode")
    return ChatCompletionClient(endpoint, credential_env=spec["llm_credential_env"])


def _image_client(config: RunConfig, backbone):
    spec = config.raw["synthesis"]
    if spec["mode"] == "manifest":
        return FixtureImageClient(image_size=backbone.image_size)
    endpoint = spec.get("diffusion_endpoint")
    if not endpoint:
        raise InputError("synthesis.diffusion_endpoint is required in live mode")
    return DiffusionClient(endpoint, credential_env=spec["diffusion_credential_env"])


def cmd_synthesize(config: RunConfig) -> int:
    backbone = config.backbone()
    name_client = _name_client(config)
    image_client = _image_client(config, backbone)
    for target in config.targets():
        split = build_splits(config.dataset, target)
        known = split.known_class_names()
        names = generate_open_class_names(known, name_client,
                                          seed=int(config.raw["synthesis"]["name_seed"]))
        manifest_path = config.manifest_path(target)
        out_dir = manifest_path.parent
        all_records, kept, filtered, failed = [], 0, 0, 0
        for style in split.source_domains:
            manifest, summary = synthesize_open_images(
                names, style, int(config.raw["synthesis"]["count_per_name"]),
                image_client, out_dir / "images",
                seed=int(config.raw["synthesis"]["name_seed"]))
            all_records.extend(manifest.records)
            kept += summary.kept
            filtered += summary.filtered
            failed += summary.failed
        combined = PseudoOpenManifest(all_records)
        combined.validate()
        combined.save(manifest_path)
        print(f"[synthesize] target={target} names={len(names.names)} "
              f"kept={kept} filtered={filtered} failed={failed} -> {manifest_path}")
    return EXIT_OK


def _load_manifest(config: RunConfig, target: str, plan: BatchPlan) -> PseudoOpenManifest:
    path = config.manifest_path(target)
    if not path.exists():
        if plan.pseudo_open_per_source_domain == 0:
            return PseudoOpenManifest()
        raise InputError(f"pseudo-open manifest {path} not found; "
                         f"run the synthesize command first or set "
                         f"train.batch_plan.pseudo_open_per_source_domain=0")
    manifest = PseudoOpenManifest.load(path)
    manifest.validate()
    return manifest


def _training_setup(config: RunConfig, backbone, split: SplitSpec, seed: int,
                    manifest: PseudoOpenManifest) -> TrainingSetup:
    dataset = config.dataset_source(backbone)
    if split.class_names is None:
        split.class_names = dataset.class_names()
    known = sample_k_shot(split, ShotConfig(k=config.k, seed=seed), dataset)
    examples = build_augmented_dataset(known, manifest)
    known_classes = split.known_class_names()
    return TrainingSetup(
        backbone=backbone,
        domain_class_names=split.domain_class_names(),
        prompt_domain_names={d: prompt_domain_name(config.dataset, d)
                             for d in split.source_domains},
        attribute_sets=config.attribute_sets(known_classes),
        examples=examples,
        source_domains=split.source_domains,
    )


def cmd_train(config: RunConfig) -> int:
    backbone = config.backbone()
    for target in config.targets():
        split = build_splits(config.dataset, target)
        train_cfg = config.train_config(config.seeds[0])
        manifest = _load_manifest(config, target, train_cfg.batch_plan)
        for seed in config.seeds:
            run_dir = config.output_dir / f"target-{target}" / f"seed-{seed}"
            setup = _training_setup(config, backbone, split, seed, manifest)
            result = train(config.train_config(seed), setup, run_dir)
            print(f"[train] target={target} seed={seed} "
                  f"epoch_loss={result.epoch_mean_losses[0]:.4f}"
                  f"->{result.epoch_mean_losses[-1]:.4f} "
                  f"checkpoint={result.checkpoint_path}")
    return EXIT_OK


def _target_items(config: RunConfig, backbone, split: SplitSpec) -> list[LabeledExample]:
    dataset = config.dataset_source(backbone)
    if split.class_names is None:
        split.class_names = dataset.class_names()
    items = []
    for index in sorted(split.target_classes):
        name = split.class_name(index)
        for image in dataset.images(split.target_domain, name):
            items.append(LabeledExample(image=image, label=name,
                                        domain=split.target_domain))
    if not items:
        raise InputError(f"no target images found for {split.target_domain!r}")
    return items


def _check_vocabulary(predictor: Predictor, split: SplitSpec, checkpoint: Path) -> None:
    expected = sorted(split.known_class_names()) + [UNKNOWN_CLASS]
    if predictor.vocabulary != expected:
        raise InputError(
            f"checkpoint {checkpoint} was trained for classes "
            f"{predictor.vocabulary}, but the target split expects {expected}")


def cmd_eval(config: RunConfig, with_sweep: bool = False) -> int:
    backbone = config.backbone()
    per_target_means = []
    for target in config.targets():
        split = build_splits(config.dataset, target)
        items = _target_items(config, backbone, split)
        eval_dir = config.output_dir / f"target-{target}" / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)
        reports = []
        for seed in config.seeds:
            checkpoint = config.output_dir / f"target-{target}" / f"seed-{seed}" / "checkpoint.pt"
            if not checkpoint.exists():
                raise InputError(f"checkpoint {checkpoint} not found; train first")
            predictor = Predictor.from_checkpoint(checkpoint, backbone)
            _check_vocabulary(predictor, split, checkpoint)
            known = split.known_class_names()
            report = evaluate(items, predictor.predict, known)
            report.save(eval_dir / f"report-seed-{seed}.json")
            reports.append(report)
            print(f"[eval] target={target} seed={seed} closed_acc={report.closed_acc:.4f} "
                  f"novel_acc={report.novel_acc:.4f} h_score={report.h_score:.4f}")
            ratios = [float(r) for r in config.raw["eval"]["sweep_ratios"]]
            if with_sweep and ratios:
                points = openness_sweep(items, predictor.predict, known, ratios,
                                        seed=int(config.raw["eval"]["sweep_seed"]))
                write_sweep_table(points, eval_dir / f"sweep-seed-{seed}.csv",
                                  seed=int(config.raw["eval"]["sweep_seed"]))
        mean = mean_report(reports)
        mean.save(eval_dir / "report-mean.json")
        per_target_means.append(mean)
        print(f"[eval] target={target} mean({len(reports)} seeds) "
              f"closed_acc={mean.closed_acc:.4f} novel_acc={mean.novel_acc:.4f} "
              f"h_score={mean.h_score:.4f}")
    if len(per_target_means) > 1:
        overall = mean_report(per_target_means)
        overall.save(config.output_dir / "report-leave-one-out.json")
        print(f"[eval] leave-one-out average over {len(per_target_means)} targets: "
              f"closed_acc={overall.closed_acc:.4f} novel_acc={overall.novel_acc:.4f} "
              f"h_score={overall.h_score:.4f}")
    return EXIT_OK


def cmd_sweep(config: RunConfig) -> int:
    if not config.raw["eval"]["sweep_ratios"]:
        raise InputError("eval.sweep_ratios is empty; nothing to sweep")
    return cmd_eval(config, with_sweep=True)


def cmd_report(args) -> int:
    path = Path(args.report_file)
    if not path.exists():
        raise InputError(f"report file {path} does not exist")
    report = EvalReport.load(path)
    print(f"report: {path}")
    print(f"  closed-set accuracy : {report.closed_acc:.4f} over {report.n_known} items")
    print(f"  novel rejection     : {report.novel_acc:.4f} over {report.n_novel} items")
    print(f"  h-score             : {report.h_score:.4f}")
    if report.confusion:
        print("  confusion (true -> predicted: count):")
        for true, pred, count in report.confusion:
            print(f"    {true} -> {pred}: {count}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opendg",
        description="Low-shot open-set domain generalization via prompt learning")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted-path config override (repeatable)")
    common.add_argument("--output", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="single seed (overrides config seeds)")
    common.add_argument("--offline", action="store_true",
                        help="force manifest/fixture mode; never touch the network")

    sub.add_parser("synthesize", parents=[common],
                   help="generate pseudo-open names and styled images")
    sub.add_parser("train", parents=[common], help="train prompts per target and seed")
    eval_parser = sub.add_parser("eval", parents=[common],
                                 help="evaluate checkpoints on the held-out target")
    eval_parser.add_argument("--sweep", action="store_true",
                             help="also run the openness sweep from eval.sweep_ratios")
    sub.add_parser("sweep", parents=[common], help="openness sweep over eval.sweep_ratios")
    report_parser = sub.add_parser("report", help="pretty-print a saved eval report")
    report_parser.add_argument("report_file")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args)
        config = load_run_config(args)
        with output_lock(config.output_dir):
            if args.command == "synthesize":
                return cmd_synthesize(config)
            if args.command == "train":
                return cmd_train(config)
            if args.command == "eval":
                return cmd_eval(config, with_sweep=bool(getattr(args, "sweep", False)))
            if args.command == "sweep":
                return cmd_sweep(config)
            raise InputError(f"unknown command {args.command!r}")
    except (InputError, ConfigurationError, CredentialError, CheckpointSchemaError,
            MissingFilesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER_ERROR
    except (TrainingDivergedError, ServiceError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME_FAILURE
    except OpenDGError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
