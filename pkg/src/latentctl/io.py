"""Tensor blobs, PPM images, weight directories and run configs."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError, IntegrityError

MAGIC = b"SBZT"
VERSION = 1


# -- tensor blobs ------------------------------------------------------------------
def blob_bytes(t) -> bytes:
    data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")  # tobytes() is C order
    payload = data.tobytes()
    header = MAGIC + struct.pack("<HH", VERSION, data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape)
    return header + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def blob_from_bytes(raw: bytes) -> Tensor:
    if raw[:4] != MAGIC:
        raise IntegrityError("bad magic, not a tensor blob")
    version, rank = struct.unpack_from("<HH", raw, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported blob version {version}")
    off = 8
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    n = int(np.prod(dims)) if rank else 1
    payload = raw[off:off + 8 * n]
    if len(payload) != 8 * n or len(raw) != off + 8 * n + 4:
        raise IntegrityError("blob length does not match its header")
    (crc,) = struct.unpack_from("<I", raw, off + 8 * n)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise IntegrityError("CRC mismatch")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64))


def save_blob(t, path) -> None:
    Path(path).write_bytes(blob_bytes(t))


def load_blob(path) -> Tensor:
    return blob_from_bytes(Path(path).read_bytes())


def save_weights(path, params: dict, meta: dict) -> None:
    """A weight set is a directory: ``manifest.json`` plus one blob per tensor."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for i, name in enumerate(names):
        save_blob(params[name], d / f"{i:03d}.sbzt")
    (d / "manifest.json").write_text(json.dumps({"meta": meta, "tensors": names}, indent=1))


def load_weights(path) -> tuple[dict, dict]:
    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text())
    params = {name: load_blob(d / f"{i:03d}.sbzt") for i, name in enumerate(manifest["tensors"])}
    return params, manifest["meta"]


def save_denoiser(path, weights) -> None:
    meta = {k: getattr(weights, k) for k in ("channels", "height", "width", "d_attn", "d_cond", "blocks", "hidden")}
    save_weights(path, weights.params, {"type": "denoiser", **meta})


def load_denoiser(path):
    from .denoiser import DenoiserWeights

    params, meta = load_weights(path)
    meta.pop("type", None)
    return DenoiserWeights(params=params, **meta)


def save_projector(path, proj) -> None:
    meta = {k: getattr(proj, k) for k in ("kind", "d_desc", "n_tok", "d_cond", "d_attn", "blocks")}
    save_weights(path, proj.params, {"type": "projector", **meta})


def load_projector(path):
    from .conditioning import ProjectorWeights

    params, meta = load_weights(path)
    meta.pop("type", None)
    return ProjectorWeights(params=params, **meta)


BUILTIN_DIR = Path(__file__).parent / "data"


def builtin_path(name: str) -> Path:
    """Location of a shipped weight set (``denoiser``, ``style_projector`` or ``object_projector``)."""
    return BUILTIN_DIR / name


def load_builtin(name: str):
    if name == "denoiser":
        return load_denoiser(builtin_path(name))
    return load_projector(builtin_path(name))


# -- images ------------------------------------------------------------------------------
def ppm_bytes(img) -> bytes:
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"expected a 3 x H x W image, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    _, h, w = arr.shape
    pixels = np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    return f"P6 {w} {h} 255\n".encode("ascii") + pixels.tobytes()


def write_image(img, path) -> None:
    Path(path).write_bytes(ppm_bytes(img))


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise IntegrityError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    body = raw[len(raw) - 3 * w * h:]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1) / float(maxval)


# -- run configuration ----------------------------------------------------------------------
@dataclass
class ControllerConfig:
    M: int = 5
    eta: float = 0.1
    gamma_nc: float = 1.0
    gamma_ns: float = 1.0
    mode: str = "first-order"
    zo_eps: float = 1e-3
    zo_samples: int = 4
    x0_mode: str = "ddim-standard"
    optimizer: str = "adam"
    seed: int = 0

    def validate(self):
        _check(self.M >= 0, "M", "must be >= 0")
        _check(self.mode in ("first-order", "zero-order", "off"), "mode", "must be first-order, zero-order or off")
        _check(self.M == 0 or self.mode == "off" or self.eta > 0, "eta", "must be > 0 when M > 0")
        _check(self.gamma_nc >= 0, "gamma_nc", "must be >= 0")
        _check(self.gamma_ns >= 0, "gamma_ns", "must be >= 0")
        _check(self.mode != "zero-order" or self.zo_eps > 0, "zo_eps", "must be > 0 in zero-order mode")
        _check(self.zo_samples >= 1, "zo_samples", "must be >= 1")
        _check(self.x0_mode in ("ddim-standard", "paper-eq2"), "x0_mode", "must be ddim-standard or paper-eq2")
        _check(self.optimizer in ("adam", "sgd"), "optimizer", "must be adam or sgd")
        return self


@dataclass
class AggregationConfig:
    mu_s0: float = 0.6
    mu_c: float = 0.5
    zeta: float = 0.4
    mu_cap: float = 1.5
    rejection: str = "reject"
    update_source: str = "L_nc"

    def validate(self):
        _check(self.mu_c >= 0, "mu_c", "must be >= 0")
        _check(self.mu_cap >= self.mu_s0, "mu_cap", "must be >= mu_s0")
        _check(self.rejection in ("reject", "project", "none"), "rejection", "must be reject, project or none")
        _check(self.update_source in ("L_nc", "L_ns"), "update_source", "must be L_nc or L_ns")
        return self


@dataclass
class CostPairing:
    """Which reference each cost term compares against (``sub`` or ``sty``)."""

    L_c: str = "sub"
    L_s: str = "sty"
    L_nc: str = "sty"
    L_ns: str = "sub"

    def validate(self):
        for k, v in dataclasses.asdict(self).items():
            _check(v in ("sub", "sty"), k, "pairing must be 'sub' or 'sty'")
        return self


@dataclass
class RunConfig:
    denoiser: str = "builtin"
    style_projector: str = "builtin"
    object_projector: str = "builtin"
    decoder: str = "linear"
    schedule: str = "cosine"
    T: int = 8
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    pairing: CostPairing = field(default_factory=CostPairing)
    style_descriptor: str = "gram"
    subject_descriptor: str = "layout"
    prompt: str = ""
    subjects: list = field(default_factory=list)
    styles: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "out"
    seed: int = 0

    def validate(self, base: Path | None = None):
        _check(self.T >= 1, "T", "must be >= 1")
        _check(self.schedule in ("cosine", "linear"), "schedule", "must be cosine or linear")
        _check(self.decoder in ("linear", "identity"), "decoder", "must be linear or identity")
        from .conditioning import STYLE_PROFILES, SUBJECT_PROFILES

        _check(self.style_descriptor in STYLE_PROFILES, "style_descriptor", "unknown profile")
        _check(self.subject_descriptor in SUBJECT_PROFILES, "subject_descriptor", "unknown profile")
        _check(isinstance(self.seeds, list) and all(isinstance(s, int) for s in self.seeds) and self.seeds,
               "seeds", "must be a non-empty list of integers")
        for key in ("denoiser", "style_projector", "object_projector"):
            value = getattr(self, key)
            if value != "builtin":
                p = Path(value) if base is None or Path(value).is_absolute() else base / value
                _check(p.exists(), key, f"file not found: {value}")
        for key in ("subjects", "styles"):
            for ref in getattr(self, key):
                if isinstance(ref, str):
                    p = Path(ref) if base is None or Path(ref).is_absolute() else base / ref
                    _check(p.exists(), key, f"file not found: {ref}")
                else:
                    _check(isinstance(ref, dict), key, "entries must be a path or a synthetic reference object")
        self.controller.validate()
        self.aggregation.validate()
        self.pairing.validate()
        return self


def _check(ok, key, message):
    if not ok:
        raise ConfigError(key, message)


_NESTED = {"controller": ControllerConfig, "aggregation": AggregationConfig, "pairing": CostPairing}


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(prefix + key, "unknown key")
        if key in _NESTED and cls is RunConfig:
            kwargs[key] = _build(_NESTED[key], value, prefix + key + ".")
            continue
        default = fields[key].default
        if default is dataclasses.MISSING:
            default = fields[key].default_factory()
        kwargs[key] = _coerce(prefix + key, value, default)
    return cls(**kwargs)


def _coerce(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def config_from_dict(data: dict, base: Path | None = None) -> RunConfig:
    return _build(RunConfig, data).validate(base)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return config_from_dict(data, base=path.parent)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def resolve(cfg_path_base: Path | None, value: str) -> Path:
    p = Path(value)
    if cfg_path_base is not None and not p.is_absolute():
        p = cfg_path_base / p
    return p


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
