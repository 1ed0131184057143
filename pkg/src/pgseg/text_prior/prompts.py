"""Per-organ text prompts from a medical LLM endpoint, with a template fallback."""

from __future__ import annotations

import json
import logging
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal, Sequence

from pgseg.vocab import ORGANS, check_organs

log = logging.getLogger(__name__)

ENDPOINT_ENV = "PGSEG_LLM_ENDPOINT"
KEY_ENV = "PGSEG_LLM_KEY"
DEFAULT_MODEL = "medical-llm"
DEFAULT_TIMEOUT = 10.0

TEMPLATE = "A CT scan showing the {organ}, a {descriptor}"

SYSTEM_MESSAGE = (
    "You are a radiologist. Describe the requested abdominal organ as it appears "
    "on an axial contrast-enhanced CT slice in one precise anatomical sentence."
)


@dataclass(frozen=True)
class TextPrompt:
    organ: str
    text: str
    source: Literal["llm", "template"]
    fallback: bool = False

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"empty prompt text for {self.organ!r}")


def organ_phrase(organ: str) -> str:
    """'kidney_left' -> 'left kidney'."""
    if organ.startswith("kidney_"):
        return f"{organ.split('_', 1)[1]} kidney"
    return organ.replace("_", " ")


def load_descriptors() -> dict[str, str]:
    raw = resources.files("pgseg.text_prior").joinpath("descriptors.json").read_text()
    return json.loads(raw)


def template_prompt(organ: str, descriptors: dict[str, str] | None = None) -> TextPrompt:
    descriptors = descriptors if descriptors is not None else load_descriptors()
    text = TEMPLATE.format(organ=organ_phrase(organ), descriptor=descriptors[organ])
    return TextPrompt(organ=organ, text=text, source="template")


class LLMUnavailable(RuntimeError):
    pass


class PromptCache:
    """JSON file mapping ``"organ|model-id"`` to prompt text."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._data: dict[str, str] = {}
        if self.path is not None and self.path.exists():
            self._data = json.loads(self.path.read_text())

    @staticmethod
    def key(organ: str, model: str) -> str:
        return f"{organ}|{model}"

    def get(self, organ: str, model: str) -> str | None:
        return self._data.get(self.key(organ, model))

    def put(self, organ: str, model: str, text: str) -> None:
        with self._lock:
            self._data[self.key(organ, model)] = text
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text(json.dumps(self._data, indent=2, sort_keys=True))
                tmp.replace(self.path)

    def __len__(self) -> int:
        return len(self._data)


def _extract_text(payload) -> str:
    # OpenAI-style chat completions first, then a few flat layouts
    if isinstance(payload, dict):
        choices = payload.get("choices")
        if choices:
            first = choices[0]
            msg = first.get("message") if isinstance(first, dict) else None
            if isinstance(msg, dict) and msg.get("content"):
                return str(msg["content"])
            if isinstance(first, dict) and first.get("text"):
                return str(first["text"])
        for field in ("text", "content", "response", "output"):
            if isinstance(payload.get(field), str):
                return payload[field]
        if isinstance(payload.get("message"), dict) and payload["message"].get("content"):
            return str(payload["message"]["content"])
    raise LLMUnavailable(f"no text field in LLM response: {str(payload)[:200]}")


class LLMClient:
    """Minimal chat-completion client: POST ``{model, messages}`` and read back one text field."""

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str = DEFAULT_MODEL,
        timeout: float = DEFAULT_TIMEOUT,
        cache: PromptCache | None = None,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(KEY_ENV)
        self.model = model
        self.timeout = timeout
        self.cache = cache if cache is not None else PromptCache()
        if not self.endpoint:
            raise ValueError(f"no LLM endpoint configured (pass one or set {ENDPOINT_ENV})")

    def _post(self, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(
            self.endpoint, data=json.dumps(body).encode(), headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError, json.JSONDecodeError) as exc:
            raise LLMUnavailable(f"{self.endpoint}: {exc}") from exc

    def describe(self, organ: str) -> str:
        cached = self.cache.get(organ, self.model)
        if cached is not None:
            return cached
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": f"Describe the {organ_phrase(organ)}."},
            ],
        }
        text = _extract_text(self._post(body)).strip()
        if not text:
            raise LLMUnavailable("LLM returned empty text")
        self.cache.put(organ, self.model, text)
        return text


def generate_prompt(
    organs: Sequence[str],
    mode: Literal["template", "client"] = "template",
    client: LLMClient | None = None,
    vocabulary: Sequence[str] = ORGANS,
) -> list[TextPrompt]:
    """One prompt per organ.

    In client mode an unreachable endpoint does not raise: every organ falls
    back to its template sentence with ``fallback=True``.
    """
    organs = check_organs(organs, vocabulary)
    descriptors = load_descriptors()
    if mode == "template":
        return [template_prompt(o, descriptors) for o in organs]
    if mode != "client":
        raise ValueError(f"unknown prompt mode {mode!r}")
    if client is None:
        client = LLMClient()
    out = []
    for organ in organs:
        try:
            out.append(TextPrompt(organ=organ, text=client.describe(organ), source="llm"))
        except LLMUnavailable as exc:
            log.warning("LLM prompt for %s failed (%s); using template", organ, exc)
            tp = template_prompt(organ, descriptors)
            out.append(TextPrompt(organ=organ, text=tp.text, source="template", fallback=True))
    return out
