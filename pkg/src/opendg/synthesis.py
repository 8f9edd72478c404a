"""Pseudo-open class-name and image synthesis, filtering, and D-aug assembly.

Two generative services sit behind one client interface: a chat-completion
endpoint that proposes class names semantically close to (but distinct from)
the known set, and a text-to-image endpoint that renders those names in each
source domain's style. Fixture implementations replay canned names and a
deterministic renderer so the whole path runs offline; live clients talk
HTTP and require credentials from the environment. Responses are cached by
(prompt, seed) either way.

Degenerate generations are dropped by a grey-level entropy filter before a
record is admitted to the manifest.
"""

from __future__ import annotations

import json
import logging
import os
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .data import LabeledExample
from .encoders import Image
from .errors import CredentialError, InputError, MissingFilesError, ServiceError
from .prompts import UNKNOWN_CLASS
from .synthetic import render_image, stable_seed

logger = logging.getLogger(__name__)

ENTROPY_THRESHOLD = 0.2
NAME_PROMPT_TEMPLATE = (
    "Generate semantic category names closely related but visually distinct "
    "from classes in {classes}."
)
IMAGE_PROMPT_TEMPLATE = "Generate images in the style of {style} depicting {name}."
MANIFEST_FIELDS = ("open_class_name", "domain_style", "image_path", "generator_id",
                   "seed", "entropy")


# ---------------------------------------------------------------------------
# Service clients
# ---------------------------------------------------------------------------


class GenerativeServiceClient(ABC):
    """Base client: (prompt, seed)-keyed cache, retries, and rate limiting."""

    generator_id = "generic"

    def __init__(self, max_retries: int = 2, min_call_interval: float = 0.0):
        self.max_retries = max_retries
        self.min_call_interval = min_call_interval
        self._cache: dict[tuple[str, int], object] = {}
        self._last_call = 0.0
        self.service_calls = 0

    def request(self, prompt: str, seed: int):
        key = (prompt, seed)
        if key in self._cache:
            return self._cache[key]
        last_error = None
        for attempt in range(self.max_retries + 1):
            try:
                self._throttle()
                result = self._request_uncached(prompt, seed)
                self.service_calls += 1
                self._cache[key] = result
                return result
            except (CredentialError, InputError):
                raise
            except Exception as exc:  # noqa: BLE001 - retried, then surfaced
                last_error = exc
                logger.warning("service call failed (attempt %d): %s", attempt + 1, exc)
        raise ServiceError(f"service failed after {self.max_retries + 1} attempts: {last_error}")

    def _throttle(self):
        if self.min_call_interval <= 0:
            return
        wait = self._last_call + self.min_call_interval - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        self._last_call = time.monotonic()

    @abstractmethod
    def _request_uncached(self, prompt: str, seed: int):
        ...


def _require_credential(env_var: str) -> str:
    value = os.environ.get(env_var)
    if not value:
        raise CredentialError(env_var)
    return value


class ChatCompletionClient(GenerativeServiceClient):
    """Live LLM client for proposing pseudo-open class names.

    Expects a chat-completion style endpoint; the response's text content is
    parsed as one candidate name per line or comma-separated.
    """

    generator_id = "chat-completion"

    def __init__(self, endpoint: str, credential_env: str = "OPENDG_LLM_API_KEY",
                 model: str = "gpt-4o", **kwargs):
        super().__init__(**kwargs)
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.model = model

    def _request_uncached(self, prompt: str, seed: int):
        import requests

        key = _require_credential(self.credential_env)
        response = requests.post(
            self.endpoint,
            headers={"Authorization": f"Bearer {key}"},
            json={"model": self.model, "seed": seed,
                  "messages": [{"role": "user", "content": prompt}]},
            timeout=60,
        )
        response.raise_for_status()
        content = response.json()["choices"][0]["message"]["content"]
        return [part.strip() for chunk in content.splitlines()
                for part in chunk.split(",") if part.strip()]


class DiffusionClient(GenerativeServiceClient):
    """Live text-to-image client returning H x W x 3 arrays in [0, 1]."""

    generator_id = "diffusion"

    def __init__(self, endpoint: str, credential_env: str = "OPENDG_DIFFUSION_API_KEY",
                 **kwargs):
        super().__init__(**kwargs)
        self.endpoint = endpoint
        self.credential_env = credential_env

    def _request_uncached(self, prompt: str, seed: int):
        import io

        import requests

        key = _require_credential(self.credential_env)
        response = requests.post(
            self.endpoint,
            headers={"Authorization": f"Bearer {key}"},
            json={"prompt": prompt, "seed": seed},
            timeout=120,
        )
        response.raise_for_status()
        with PILImage.open(io.BytesIO(response.content)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


class FixtureNameClient(GenerativeServiceClient):
    """Replays canned pseudo-open names; never touches the network."""

    generator_id = "fixture-names"

    def __init__(self, names: list[str], **kwargs):
        super().__init__(**kwargs)
        self.names = list(names)

    @classmethod
    def from_fixture_file(cls, path: str | Path) -> "FixtureNameClient":
        record = json.loads(Path(path).read_text(encoding="utf-8"))
        names = [n for group in record.get("related", {}).values() for n in group]
        names += record.get("additional", [])
        return cls(names)

    def _request_uncached(self, prompt: str, seed: int):
        return list(self.names)


class FixtureImageClient(GenerativeServiceClient):
    """Renders images deterministically instead of calling a service.

    The image prompt is parsed back into (style, class name) and handed to
    the synthetic renderer, which falls back to a seeded procedural texture
    for names it does not model explicitly.
    """

    generator_id = "fixture-render"

    def __init__(self, image_size: int = 32, **kwargs):
        super().__init__(**kwargs)
        self.image_size = image_size

    def _request_uncached(self, prompt: str, seed: int):
        style, name = parse_image_prompt(prompt)
        return render_image(name, style.lower(), seed=seed, size=self.image_size)


def parse_image_prompt(prompt: str) -> tuple[str, str]:
    """Recover (style, class name) from the image prompt template."""
    prefix = "Generate images in the style of "
    middle = " depicting "
    if not prompt.startswith(prefix) or middle not in prompt:
        raise InputError(f"unrecognized image prompt {prompt!r}")
    style, name = prompt[len(prefix):].rstrip(".").split(middle, 1)
    return style.strip(), name.strip()


# ---------------------------------------------------------------------------
# Pseudo-open class names
# ---------------------------------------------------------------------------


@dataclass
class OpenClassNameSet:
    names: list[str]
    related_to: dict[str, str] | None = None
    provenance: str = "llm"

    def __post_init__(self):
        lowered = [n.lower() for n in self.names]
        if len(set(lowered)) != len(lowered):
            raise InputError("pseudo-open names must be distinct (case-insensitive)")


def generate_open_class_names(known: list[str], client: GenerativeServiceClient,
                              seed: int = 0) -> OpenClassNameSet:
    """Ask the service for names near the known set, then sanitize them.

    Empty candidates, duplicates, and names colliding (case-insensitively)
    with the known classes are dropped and logged.
    """
    if not known:
        raise InputError("known class set is empty")
    prompt = NAME_PROMPT_TEMPLATE.format(classes=", ".join(sorted(known)))
    raw = client.request(prompt, seed)
    known_lower = {c.lower() for c in known}
    accepted, seen, rejected = [], set(), []
    for candidate in raw:
        name = str(candidate).strip()
        if not name or name.lower() in known_lower or name.lower() in seen:
            rejected.append(candidate)
            continue
        seen.add(name.lower())
        accepted.append(name)
    if rejected:
        logger.info("rejected %d pseudo-open name candidates: %s", len(rejected), rejected)
    if not accepted:
        raise ServiceError("no usable pseudo-open names returned", partial=rejected)
    provenance = "manifest" if isinstance(client, FixtureNameClient) else "llm"
    return OpenClassNameSet(names=accepted, provenance=provenance)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    open_class_name: str
    domain_style: str
    image_path: str
    generator_id: str
    seed: int
    entropy: float

    def to_json(self) -> str:
        return json.dumps({f: getattr(self, f) for f in MANIFEST_FIELDS})


@dataclass
class PseudoOpenManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(r.to_json() for r in self.records) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PseudoOpenManifest":
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            records.append(ManifestRecord(
                open_class_name=rec["open_class_name"], domain_style=rec["domain_style"],
                image_path=rec["image_path"], generator_id=rec["generator_id"],
                seed=int(rec["seed"]), entropy=float(rec["entropy"])))
        return cls(records=records)

    def validate(self, entropy_threshold: float = ENTROPY_THRESHOLD) -> None:
        missing = [r.image_path for r in self.records if not Path(r.image_path).exists()]
        if missing:
            raise MissingFilesError(missing)
        bad = [r for r in self.records if r.entropy <= entropy_threshold]
        if bad:
            raise InputError(
                f"{len(bad)} manifest records at or below the entropy threshold "
                f"{entropy_threshold}")

    def styles(self) -> list[str]:
        return sorted({r.domain_style for r in self.records})


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def grey_entropy(image: Image) -> float:
    """Shannon entropy (bits) of the 256-bin luminance histogram."""
    px = image.pixels
    if px.shape[2] >= 3:
        lum = 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]
    else:
        lum = px[:, :, 0]
    counts, _ = np.histogram(lum, bins=256, range=(0.0, 1.0))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mixup_pseudo_open(x_i: Image, x_j: Image, lam: float) -> Image:
    """Pixelwise convex blend of two source images (mixup baseline)."""
    if x_i.pixels.shape != x_j.pixels.shape:
        raise InputError(f"shape mismatch {x_i.pixels.shape} vs {x_j.pixels.shape}")
    if not 0.3 <= lam <= 0.7:
        raise InputError(f"mixing coefficient must lie in [0.3, 0.7], got {lam}")
    blended = lam * x_i.pixels + (1.0 - lam) * x_j.pixels
    return Image(pixels=blended, domain_tag=f"{x_i.domain_tag}+{x_j.domain_tag}")


def sample_mixup_coefficient(rng: np.random.Generator) -> float:
    return float(rng.uniform(0.3, 0.7))


@dataclass
class SynthesisSummary:
    kept: int
    filtered: int
    failed: int


def synthesize_open_images(names: OpenClassNameSet, domain_style: str,
                           count_per_name: int, client: GenerativeServiceClient,
                           out_dir: str | Path, seed: int = 0,
                           entropy_threshold: float = ENTROPY_THRESHOLD,
                           ) -> tuple[PseudoOpenManifest, SynthesisSummary]:
    """Render each pseudo-open name in one domain style and filter results.

    Low-entropy (degenerate) images are rejected before manifest admission;
    per-image failures are skipped and logged, but if nothing at all is
    produced the whole call fails.
    """
    if count_per_name < 1:
        raise InputError("count_per_name must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, filtered, failed = [], 0, 0
    for name in names.names:
        prompt = IMAGE_PROMPT_TEMPLATE.format(style=domain_style, name=name)
        for i in range(count_per_name):
            image_seed = stable_seed("synth", seed, domain_style, name.lower(), i)
            try:
                pixels = client.request(prompt, image_seed)
            except ServiceError:
                failed += 1
                logger.warning("generation failed for %r in style %r", name, domain_style)
                continue
            image = Image(pixels=np.clip(pixels, 0.0, 1.0), domain_tag=domain_style)
            entropy = grey_entropy(image)
            if entropy <= entropy_threshold:
                filtered += 1
                logger.info("filtered low-entropy (%.3f) image for %r", entropy, name)
                continue
            slug = name.lower().replace(" ", "_")
            path = out_dir / f"{domain_style}_{slug}_{i}.png"
            PILImage.fromarray((image.pixels * 255.0).round().astype(np.uint8)).save(path)
            records.append(ManifestRecord(
                open_class_name=name, domain_style=domain_style, image_path=str(path),
                generator_id=client.generator_id, seed=image_seed, entropy=entropy))
    if not records and (failed or filtered):
        raise ServiceError(
            f"no images admitted for style {domain_style!r} "
            f"({failed} failed, {filtered} filtered)",
            partial=SynthesisSummary(kept=0, filtered=filtered, failed=failed))
    return PseudoOpenManifest(records), SynthesisSummary(len(records), filtered, failed)


def load_manifest_image(record: ManifestRecord) -> Image:
    with PILImage.open(record.image_path) as img:
        px = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return Image(pixels=px, domain_tag=record.domain_style)


def build_augmented_dataset(known: list[LabeledExample],
                            manifest: PseudoOpenManifest) -> list[LabeledExample]:
    """Union of the labeled source set with unknown-labeled pseudo-open items."""
    manifest.validate()
    augmented = list(known)
    for record in manifest.records:
        augmented.append(LabeledExample(image=load_manifest_image(record),
                                        label=UNKNOWN_CLASS, domain=record.domain_style))
    return augmented
