from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest
from PIL import Image, ImageChops

sys.path.insert(0, str(Path(__file__).parent))

from geoagent.geo import GeoLabel, GeoPoint  # noqa: E402
from geoagent.tools import ImageStore, Toolbox  # noqa: E402
from geoagent.tools.geocoding import FixtureGeocodeProvider, Geocoder  # noqa: E402
from geoagent.tools.search import FixtureSearchProvider  # noqa: E402

# Hamburg city-centre coordinates from a public gazetteer.
HAMBURG = (53.5511, 9.9937)

SEARCH_FIXTURE = {
    "The palace museum": [
        {"title": "The Palace Museum", "snippet": "The Palace Museum is a national museum housed in the Forbidden City in Beijing.",
         "url": "https://en.dpm.org.cn/"},
        {"title": "Forbidden City - Wikipedia", "snippet": "The Forbidden City is the imperial palace complex in the center of the Imperial City of Beijing.",
         "url": "https://en.wikipedia.org/wiki/Forbidden_City"},
        {"title": "Visiting the Palace Museum", "snippet": "Opening hours, tickets and visitor information. " + "x" * 700,
         "url": "https://example.org/visit"},
    ],
    "schoneberger strasse hamburg": [
        {"title": "Schöneberger Straße, Hamburg", "snippet": "Street in the Rahlstedt quarter of Hamburg.",
         "url": "https://example.org/schoneberger"},
    ],
}

GEOCODE_FIXTURE = {
    "Hamburg, Germany": {"lat": HAMBURG[0], "lon": HAMBURG[1]},
    "Schöneberger Straße, 22149 Hamburg, Germany": {"lat": 53.5966, "lon": 10.1467},
    "Los Angeles, California, USA": {"lat": 34.0522, "lon": -118.2437},
}


def make_image(path: Path, width: int, height: int) -> Path:
    """Deterministic gradient image (content varies so crops differ)."""
    horiz = Image.linear_gradient("L").rotate(90).resize((width, height))
    vert = Image.linear_gradient("L").resize((width, height))
    mixed = ImageChops.add_modulo(horiz, vert)
    img = Image.merge("RGB", (horiz, vert, mixed))
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def make_flat_image(path: Path, width: int, height: int, color=(90, 120, 150)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (width, height), color).save(path)
    return path


@pytest.fixture
def image_1024(tmp_path) -> Path:
    return make_image(tmp_path / "img1024.png", 1024, 1024)


@pytest.fixture
def search_provider():
    return FixtureSearchProvider(SEARCH_FIXTURE)


@pytest.fixture
def geocoder():
    return Geocoder(FixtureGeocodeProvider(GEOCODE_FIXTURE))


@pytest.fixture
def toolbox(tmp_path, search_provider) -> Toolbox:
    return Toolbox(search_provider, ImageStore(tmp_path / "out"))


@pytest.fixture
def la_label() -> GeoLabel:
    return GeoLabel("USA", "California", "Los Angeles", GeoPoint(34.0522, -118.2437))


@pytest.fixture
def hamburg_label() -> GeoLabel:
    return GeoLabel("Germany", "Hamburg", "Hamburg", GeoPoint(*HAMBURG))


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=1), encoding="utf-8")
    return path


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")
    return path


def manifest_record(sample_id, image_path, label=("Germany", "Hamburg", "Hamburg", HAMBURG), data_type="photo",
                    width=320, height=240, **extra):
    country, province, city, (lat, lon) = label
    rec = {"sample_id": sample_id, "image_path": image_path, "lat": lat, "lon": lon, "country": country,
           "province": province, "city": city, "data_type": data_type, "width": width, "height": height}
    rec.update(extra)
    return rec


def build_workspace(root: Path, records, policy_script=None, extra_config=None) -> Path:
    """Write images, fixtures, a manifest and a YAML config under ``root``; returns the config path."""
    import yaml

    root.mkdir(parents=True, exist_ok=True)
    for rec in records:
        if not (root / rec["image_path"]).exists():
            make_image(root / rec["image_path"], rec["width"], rec["height"])
    write_jsonl(root / "manifest.jsonl", records)
    write_json(root / "search.json", SEARCH_FIXTURE)
    write_json(root / "geocode.json", GEOCODE_FIXTURE)
    config = {
        "manifest": "manifest.jsonl",
        "workers": 3,
        "search": {"kind": "fixture", "path": "search.json"},
        "geocode": {"kind": "fixture", "path": "geocode.json"},
    }
    if policy_script is not None:
        write_json(root / "policy.json", policy_script)
        config["policy"] = {"kind": "scripted", "script": "policy.json"}
    config.update(extra_config or {})
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    return path


def read_rows(path: Path) -> list[dict]:
    """JSONL rows without the header line."""
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [r for r in rows if "header" not in r]


# Lines recorded by the acceptance suite, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
