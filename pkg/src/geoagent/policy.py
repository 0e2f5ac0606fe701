"""Chat-style model clients.

Messages are plain dicts ``{"role": ..., "content": [part, ...]}`` where a part
is ``{"type": "text", "text": ...}`` or ``{"type": "image", "image": ImageRef}``.
The HTTP client turns image parts into base64 data URLs for an
OpenAI-compatible ``/chat/completions`` endpoint.
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol, Sequence

import requests

from .tools.images import ImageRef

Message = dict


class PolicyUnavailable(Exception):
    """The endpoint could not be reached or returned an unusable reply."""


@dataclass(frozen=True)
class PolicyReply:
    text: str
    usage_tokens: int | None = None


class ChatClient(Protocol):
    def complete(self, messages: Sequence[Message], *, sample_id: str | None = None) -> PolicyReply: ...


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(image: ImageRef) -> dict:
    return {"type": "image", "image": image}


def message(role: str, *parts: Any) -> Message:
    content = [text_part(p) if isinstance(p, str) else p for p in parts]
    return {"role": role, "content": content}


def message_text(msg: Message) -> str:
    content = msg["content"]
    if isinstance(content, str):
        return content
    return "".join(p.get("text", "") for p in content if p.get("type") == "text")


def count_assistant_turns(messages: Sequence[Message]) -> int:
    return sum(1 for m in messages if m["role"] == "assistant")


UNAVAILABLE = "!unavailable"


class ScriptedPolicy:
    """Deterministic stand-in for a model.

    ``script`` is a list of replies (shared by every sample), a mapping from
    sample id to such a list (``"*"`` is the fallback), or a callable
    ``(sample_id, turn_index, messages) -> str``. The reply for turn ``i`` is
    item ``i``; past the end the last item repeats. An item that is an
    exception instance, or the string ``"!unavailable"``, is raised as a
    transport failure.
    """

    def __init__(self, script: Sequence[Any] | Mapping[str, Sequence[Any]] | Callable):
        self.script = script
        self.calls = 0
        self._lock = threading.Lock()

    def _item(self, sample_id: str | None, turn: int, messages: Sequence[Message]) -> Any:
        if callable(self.script):
            return self.script(sample_id, turn, messages)
        if isinstance(self.script, Mapping):
            replies = self.script.get(sample_id)
            if replies is None:
                replies = self.script.get("*")
            if replies is None:
                raise PolicyUnavailable(f"no script for sample {sample_id!r}")
        else:
            replies = self.script
        if isinstance(replies, str):
            replies = [replies]
        if not replies:
            raise PolicyUnavailable("empty script")
        return replies[min(turn, len(replies) - 1)]

    def complete(self, messages: Sequence[Message], *, sample_id: str | None = None) -> PolicyReply:
        with self._lock:
            self.calls += 1
        item = self._item(sample_id, count_assistant_turns(messages), messages)
        if isinstance(item, BaseException):
            raise item
        if item == UNAVAILABLE:
            raise PolicyUnavailable("scripted outage")
        if isinstance(item, PolicyReply):
            return item
        return PolicyReply(str(item))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


@dataclass
class SamplingParams:
    temperature: float = 1.0
    max_new_tokens: int = 2048
    top_p: float | None = None
    seed: int | None = None


class HttpChatClient:
    """Client for an OpenAI-compatible chat completions endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 sampling: SamplingParams | None = None, timeout: float = 300.0,
                 session: requests.Session | None = None):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = api_key
        self.sampling = sampling or SamplingParams()
        self.timeout = timeout
        self._session = session or requests.Session()
        # encoded images keyed by identity of the reference, so history images are encoded once
        self._encoded: dict[tuple, str] = {}
        self._lock = threading.Lock()

    def _data_url(self, image: ImageRef) -> str:
        key = (image.path, image.width, image.height, id(image.pixels) if image.path is None else None)
        with self._lock:
            cached = self._encoded.get(key)
        if cached is not None:
            return cached
        buf = io.BytesIO()
        image.load().save(buf, format="PNG")
        url = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")
        with self._lock:
            self._encoded[key] = url
        return url

    def _wire_messages(self, messages: Sequence[Message]) -> list[dict]:
        wire = []
        for msg in messages:
            content = msg["content"]
            if isinstance(content, str):
                wire.append({"role": msg["role"], "content": content})
                continue
            parts = []
            for part in content:
                if part["type"] == "image":
                    parts.append({"type": "image_url", "image_url": {"url": self._data_url(part["image"])}})
                else:
                    parts.append({"type": "text", "text": part["text"]})
            if msg["role"] == "assistant" or msg["role"] == "system":
                wire.append({"role": msg["role"], "content": "".join(p.get("text", "") for p in parts)})
            else:
                wire.append({"role": msg["role"], "content": parts})
        return wire

    def complete(self, messages: Sequence[Message], *, sample_id: str | None = None) -> PolicyReply:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": self._wire_messages(messages),
            "temperature": self.sampling.temperature,
            "max_tokens": self.sampling.max_new_tokens,
        }
        if self.sampling.top_p is not None:
            body["top_p"] = self.sampling.top_p
        if self.sampling.seed is not None:
            body["seed"] = self.sampling.seed
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._session.post(self.url, json=body, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (requests.RequestException, ValueError, KeyError, IndexError, TypeError) as exc:
            raise PolicyUnavailable(f"chat request failed: {exc}") from exc
        usage = payload.get("usage") or {}
        total = usage.get("total_tokens")
        return PolicyReply(text or "", int(total) if isinstance(total, (int, float)) else None)
