"""Caption and reformulation backends.

Two families: deterministic oracles driven by the synthetic attribute
grammar (the default for every reproducible run), and HTTP clients for
hosted caption/reformulation models. Both expose the same two-method
surface so the pipeline never cares which one it talks to.
"""

from __future__ import annotations

import base64
import io
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import BackendUnavailable, EmptyCaption, EmptyReformulation, InvalidConfig
from .prompts import CAPTION_PROMPT, render_reformulation_prompt
from .records import ImageRecord

ORACLE_CAPTION_ID = "oracle-caption"
ORACLE_REFORM_ID = "oracle-reform"

KEEP_SAME_TEXT = "keep the item the same"

# Words the oracle grammars can emit besides attribute names and values.
GRAMMAR_WORDS = ("a", "and", "change", "from", "item", "keep", "same", "the", "to")


class CaptionBackend(Protocol):
    backend_id: str

    def caption(self, image: ImageRecord) -> str: ...


class ReformulationBackend(Protocol):
    backend_id: str

    def reformulate(self, caption_a: str, caption_b: str) -> str: ...


class OracleCaptionBackend:
    """Caption as a pure function of the attribute tuple.

    Grammar: "a" followed by the attribute values in schema order, e.g.
    "a red striped fitted dress". Injective over tuples because values are
    unique within and across attributes.
    """

    backend_id = ORACLE_CAPTION_ID

    def __init__(self, attributes: dict[str, list[str]]):
        self.attributes = {k: list(v) for k, v in attributes.items()}

    def caption(self, image: ImageRecord) -> str:
        if not image.attributes:
            raise BackendUnavailable(
                f"oracle caption backend needs attribute metadata (image {image.id!r})"
            )
        words = ["a"]
        for name in self.attributes:
            if name in image.attributes:
                words.append(image.attributes[name])
        if len(words) == 1:
            raise BackendUnavailable(
                f"image {image.id!r} has no attributes from the configured schema"
            )
        return " ".join(words)


class OracleReformulationBackend:
    """Reformulation as a deterministic diff of the two captioned tuples.

    Parses both captions back through the injective caption grammar, then
    emits one clause per differing attribute in schema order: "change
    {name} from {old} to {new}", with later clauses dropping the leading
    "change" so that two-attribute diffs stay within the 12-word cap.
    Identical tuples yield "keep the item the same". Attributes present in
    only one caption are ignored.
    """

    backend_id = ORACLE_REFORM_ID

    def __init__(self, attributes: dict[str, list[str]], word_cap: int = 12):
        self.attributes = {k: list(v) for k, v in attributes.items()}
        self.word_cap = word_cap
        self._value_sets = {k: set(v) for k, v in self.attributes.items()}

    def parse_caption(self, caption: str) -> dict[str, str]:
        words = caption.strip().lower().split()
        if not words or words[0] != "a":
            raise BackendUnavailable(f"cannot parse caption {caption!r}")
        rest = words[1:]
        parsed: dict[str, str] = {}
        pos = 0
        for name in self.attributes:
            if pos < len(rest) and rest[pos] in self._value_sets[name]:
                parsed[name] = rest[pos]
                pos += 1
        if pos != len(rest) or not parsed:
            raise BackendUnavailable(f"cannot parse caption {caption!r}")
        return parsed

    def reformulate(self, caption_a: str, caption_b: str) -> str:
        attrs_a = self.parse_caption(caption_a)
        attrs_b = self.parse_caption(caption_b)
        clauses = []
        for name in self.attributes:
            if name in attrs_a and name in attrs_b and attrs_a[name] != attrs_b[name]:
                head = "change " if not clauses else ""
                clauses.append(f"{head}{name} from {attrs_a[name]} to {attrs_b[name]}")
        if not clauses:
            return KEEP_SAME_TEXT
        text = " and ".join(clauses)
        words = text.split()
        if len(words) > self.word_cap:
            words = words[: self.word_cap]
        return " ".join(words)


@dataclass
class HttpBackendConfig:
    """Client settings for a hosted caption/reformulation service."""

    endpoint: str
    model: str = "default"
    timeout: float = 30.0
    max_retries: int = 3
    retry_wait: float = 0.5

    def validate(self) -> None:
        if not self.endpoint:
            raise InvalidConfig("backend endpoint must be set")
        if self.max_retries < 1:
            raise InvalidConfig("max_retries must be >= 1")


def _post_json(cfg: HttpBackendConfig, payload: dict) -> dict:
    import requests

    last_error: Exception | None = None
    for attempt in range(cfg.max_retries):
        try:
            resp = requests.post(cfg.endpoint, json=payload, timeout=cfg.timeout)
            resp.raise_for_status()
            return resp.json()
        except Exception as exc:  # noqa: BLE001 - any transport failure retries
            last_error = exc
            if attempt + 1 < cfg.max_retries:
                time.sleep(cfg.retry_wait)
    raise BackendUnavailable(
        f"backend at {cfg.endpoint} failed after {cfg.max_retries} attempts: {last_error}"
    )


def _png_base64(pixels: np.ndarray) -> str:
    from PIL import Image

    arr = np.clip(pixels * 255.0, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpCaptionBackend:
    """Captioning via a JSON-over-HTTP model server."""

    def __init__(self, cfg: HttpBackendConfig):
        cfg.validate()
        self.cfg = cfg
        self.backend_id = f"http-caption:{cfg.model}"

    def caption(self, image: ImageRecord) -> str:
        payload = {
            "model": self.cfg.model,
            "prompt": CAPTION_PROMPT,
            "image_id": image.id,
            "image_png_base64": _png_base64(image.pixels),
        }
        reply = _post_json(self.cfg, payload)
        text = (reply.get("text") or "").strip()
        if not text:
            raise EmptyCaption(f"backend returned blank caption for {image.id!r}")
        return text


class HttpReformulationBackend:
    """Reformulation via a JSON-over-HTTP model server."""

    def __init__(self, cfg: HttpBackendConfig):
        cfg.validate()
        self.cfg = cfg
        self.backend_id = f"http-reform:{cfg.model}"

    def reformulate(self, caption_a: str, caption_b: str) -> str:
        payload = {
            "model": self.cfg.model,
            "prompt": render_reformulation_prompt(caption_a, caption_b),
        }
        reply = _post_json(self.cfg, payload)
        text = (reply.get("text") or "").strip()
        if not text:
            raise EmptyReformulation("backend returned blank reformulation")
        return text


def make_caption_backend(spec: dict, attributes: dict[str, list[str]]) -> CaptionBackend:
    kind = spec.get("kind", "oracle")
    if kind == "oracle":
        return OracleCaptionBackend(attributes)
    if kind == "http":
        return HttpCaptionBackend(HttpBackendConfig(**{k: v for k, v in spec.items() if k != "kind"}))
    raise InvalidConfig(f"unknown caption backend kind {kind!r}")


def make_reformulation_backend(
    spec: dict, attributes: dict[str, list[str]], word_cap: int = 12
) -> ReformulationBackend:
    kind = spec.get("kind", "oracle")
    if kind == "oracle":
        return OracleReformulationBackend(attributes, word_cap=word_cap)
    if kind == "http":
        return HttpReformulationBackend(HttpBackendConfig(**{k: v for k, v in spec.items() if k != "kind"}))
    raise InvalidConfig(f"unknown reformulation backend kind {kind!r}")
