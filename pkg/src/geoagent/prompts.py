"""Pinned prompt assets.

Every prompt the harness sends is stored as a text file under ``assets/`` and
checked against a SHA-256 digest on load, so a silently edited prompt fails
loudly instead of skewing results.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

PINNED_SHA256 = {
    "system_prompt": "128e634276237075917ed29e0b93c42bde61b5e822660a5d2a4320dbcc81e6a0",
    "forced_answer": "34e9fcbe07602762a9c55928176bb4bb19f276c4997ab197a319615107cdc6d4",
    "verifier": "8acda5673e956efd5f1da42ba51e068145b9017e590d3743dff7f29e6679bb77",
    "localizability_judge": "bc20705a591468750de9944f44b2cc373d02461c54c496dbe1d05c94991e6d86",
    "proposer_regions": "33d71d3b1d0427d4439289f2c11ba3b8c19e2c347a3c0e6a852e2e048342a356",
    "proposer_queries": "2fb145286dc57f19cf5e248f63ae496e0a5bf52a53732d51b0e43710eff88908",
    "proposer_final": "067a9b68bc9e1f74ce9a6bf102e5d050114b61d28d93fcac14d76b3644441798",
}


class AssetError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def load_asset(name: str) -> str:
    if name not in PINNED_SHA256:
        raise AssetError(f"unknown prompt asset {name!r}")
    try:
        data = resources.files("geoagent").joinpath(f"assets/{name}.txt").read_bytes()
    except (FileNotFoundError, OSError) as exc:
        raise AssetError(f"prompt asset {name!r} is missing") from exc
    digest = hashlib.sha256(data).hexdigest()
    if digest != PINNED_SHA256[name]:
        raise AssetError(f"prompt asset {name!r} is corrupt (sha256 {digest})")
    return data.decode("utf-8")


def render_system_prompt() -> str:
    """Return the agent system prompt, byte-identical to the pinned asset."""
    return load_asset("system_prompt")
