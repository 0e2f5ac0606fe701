"""Tool executors: crop-and-zoom, web search, geocoding."""

from __future__ import annotations

from dataclasses import dataclass

from ..protocol import SEARCH_TOOL, ZOOM_TOOL, Observation, ToolInvocation
from .base import ProviderError, TokenBucket, ToolFailure, normalize_key
from .geocoding import Geocoder, GeocodeResult, geocode
from .images import (
    DEFAULT_PIXEL_BUDGET,
    DEFAULT_ZOOM_TARGET,
    ImageRef,
    ImageStore,
    crop_and_zoom,
    downsample_to_budget,
)
from .search import SearchProvider, SearchResult, render_search_observation, search_web

__all__ = [
    "ToolFailure",
    "ProviderError",
    "TokenBucket",
    "normalize_key",
    "Geocoder",
    "GeocodeResult",
    "geocode",
    "ImageRef",
    "ImageStore",
    "crop_and_zoom",
    "downsample_to_budget",
    "SearchProvider",
    "SearchResult",
    "search_web",
    "render_search_observation",
    "Toolbox",
    "ToolOutcome",
]


@dataclass(frozen=True)
class ToolOutcome:
    observation: Observation
    failed: bool
    image: ImageRef | None = None


@dataclass
class Toolbox:
    """Executes parsed tool calls against one sample's image."""

    search: SearchProvider
    store: ImageStore
    pixel_budget: int = DEFAULT_PIXEL_BUDGET
    zoom_target: int = DEFAULT_ZOOM_TARGET
    search_limit: int = 10

    def execute(self, invocation: ToolInvocation, image: ImageRef) -> ToolOutcome:
        try:
            if invocation.name == ZOOM_TOOL:
                zoomed = crop_and_zoom(image, invocation.bbox, zoom_target=self.zoom_target,
                                       pixel_budget=self.pixel_budget)
                stored = self.store.put(zoomed)
                obs = Observation("image", image_path=stored.path, width=stored.width, height=stored.height)
                return ToolOutcome(obs, False, stored)
            if invocation.name == SEARCH_TOOL:
                results = search_web(invocation.query, self.search, self.search_limit)
                text = render_search_observation(invocation.query, results)
                return ToolOutcome(Observation("text", text=text), False)
        except ToolFailure as exc:
            return ToolOutcome(Observation("error", text=f"Tool error ({invocation.name}): {exc}"), True)
        raise ValueError(f"unknown tool {invocation.name!r}")
