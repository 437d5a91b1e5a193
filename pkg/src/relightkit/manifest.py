"""Scene manifests: JSON bundles pairing scene captures with environment maps.

Example::

    {
      "version": 1,
      "scene": "courtyard",
      "camera": {"type": "pinhole", "focal": 800.0, "principal": [320, 240]},
      "captures": [
        {
          "lighting": "t0",
          "scene_timestamp": 1700000000.0,
          "envmap_timestamp": 1700000038.0,
          "exposures": [{"path": "t0_a.exr", "exposure": 0.01},
                        {"path": "t0_b.exr", "exposure": 0.04}],
          "envmap": "env_t0.exr",
          "mask": "static.png"
        }
      ]
    }

Each capture has either ``image`` (one linear EXR) or ``exposures``. Paths are
resolved relative to the manifest's directory. Unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Camera:
    kind: str = "directional"
    view: tuple = (0.0, 0.0, 1.0)
    focal: float | None = None
    principal: tuple | None = None


@dataclass(frozen=True)
class Exposure:
    path: Path
    exposure: float


@dataclass(frozen=True)
class Capture:
    lighting: str
    scene_timestamp: float
    envmap_timestamp: float
    envmap: Path
    image: Path | None = None
    exposures: tuple = ()
    mask: Path | None = None
    gbuffer: Path | None = None


@dataclass(frozen=True)
class SceneManifest:
    scene: str
    camera: Camera
    captures: tuple
    root: Path

    @property
    def lighting_ids(self) -> list[str]:
        return [c.lighting for c in self.captures]

    def capture(self, lighting: str) -> Capture:
        for c in self.captures:
            if c.lighting == lighting:
                return c
        raise KeyError(lighting)


def _join(where: str, key: str) -> str:
    return f"{where}.{key}" if where else key


def _keys(obj, where: str, required: set, optional: set = frozenset()) -> None:
    if not isinstance(obj, dict):
        raise ManifestError(where or "<root>", "expected an object")
    for k in obj:
        if k not in required and k not in optional:
            raise ManifestError(_join(where, k), "unknown field")
    for k in required:
        if k not in obj:
            raise ManifestError(_join(where, k), "missing required field")


def _number(obj, key: str, where: str, *, positive: bool = False) -> float:
    val = obj[key]
    path = _join(where, key)
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ManifestError(path, "expected a finite number")
    if positive and val <= 0:
        raise ManifestError(path, "must be > 0")
    return float(val)


def _string(obj, key: str, where: str) -> str:
    val = obj[key]
    if not isinstance(val, str) or not val:
        raise ManifestError(_join(where, key), "expected a non-empty string")
    return val


def _file(root: Path, obj, key: str, where: str, check: bool, *, directory: bool = False) -> Path:
    path = root / _string(obj, key, where)
    exists = path.is_dir() if directory else path.is_file()
    if check and not exists:
        raise ManifestError(f"{where}.{key}", f"{'directory' if directory else 'file'} not found: {path}")
    return path


def _vector(val, path: str, n: int) -> tuple:
    if not isinstance(val, list) or len(val) != n:
        raise ManifestError(path, f"expected a list of {n} numbers")
    out = []
    for i, x in enumerate(val):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ManifestError(f"{path}[{i}]", "expected a finite number")
        out.append(float(x))
    return tuple(out)


def _camera(obj) -> Camera:
    if not isinstance(obj, dict) or "type" not in obj:
        raise ManifestError("camera.type", "missing required field")
    kind = obj["type"]
    if kind == "directional":
        _keys(obj, "camera", {"type"}, {"view"})
        view = _vector(obj.get("view", [0.0, 0.0, 1.0]), "camera.view", 3)
        if math.hypot(*view) == 0:
            raise ManifestError("camera.view", "zero-length view direction")
        return Camera(kind, view=view)
    if kind == "pinhole":
        _keys(obj, "camera", {"type", "focal"}, {"principal"})
        focal = _number(obj, "focal", "camera", positive=True)
        principal = _vector(obj["principal"], "camera.principal", 2) if "principal" in obj else None
        return Camera(kind, focal=focal, principal=principal)
    raise ManifestError("camera.type", f"unknown camera type {kind!r} (expected 'directional' or 'pinhole')")


def _capture(obj, i: int, root: Path, check: bool) -> Capture:
    where = f"captures[{i}]"
    _keys(
        obj,
        where,
        {"lighting", "scene_timestamp", "envmap_timestamp", "envmap"},
        {"image", "exposures", "mask", "gbuffer"},
    )
    has_image, has_stack = "image" in obj, "exposures" in obj
    if has_image == has_stack:
        raise ManifestError(where, "exactly one of 'image' or 'exposures' is required")
    exposures = ()
    if has_stack:
        stack = obj["exposures"]
        if not isinstance(stack, list) or not stack:
            raise ManifestError(f"{where}.exposures", "expected a non-empty list")
        items = []
        for j, e in enumerate(stack):
            ew = f"{where}.exposures[{j}]"
            _keys(e, ew, {"path", "exposure"})
            items.append(Exposure(_file(root, e, "path", ew, check), _number(e, "exposure", ew, positive=True)))
        exposures = tuple(items)
    return Capture(
        lighting=_string(obj, "lighting", where),
        scene_timestamp=_number(obj, "scene_timestamp", where),
        envmap_timestamp=_number(obj, "envmap_timestamp", where),
        envmap=_file(root, obj, "envmap", where, check),
        image=_file(root, obj, "image", where, check) if has_image else None,
        exposures=exposures,
        mask=_file(root, obj, "mask", where, check) if "mask" in obj else None,
        gbuffer=_file(root, obj, "gbuffer", where, check, directory=True) if "gbuffer" in obj else None,
    )


def parse_manifest(doc, root, *, check_files: bool = True) -> SceneManifest:
    root = Path(root)
    _keys(doc, "", {"version", "scene", "captures"}, {"camera"})
    if doc["version"] != MANIFEST_VERSION:
        raise ManifestError("version", f"unsupported manifest version {doc['version']!r}")
    scene = _string(doc, "scene", "")
    camera = _camera(doc["camera"]) if "camera" in doc else Camera()
    caps = doc["captures"]
    if not isinstance(caps, list) or not caps:
        raise ManifestError("captures", "expected a non-empty list")
    captures = tuple(_capture(c, i, root, check_files) for i, c in enumerate(caps))
    seen = set()
    for i, c in enumerate(captures):
        if c.lighting in seen:
            raise ManifestError(f"captures[{i}].lighting", f"duplicate lighting id {c.lighting!r}")
        seen.add(c.lighting)
    return SceneManifest(scene=scene, camera=camera, captures=captures, root=root)


def load_manifest(path, *, check_files: bool = True) -> SceneManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such manifest: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError("<root>", f"invalid JSON ({exc})") from exc
    return parse_manifest(doc, path.parent, check_files=check_files)
