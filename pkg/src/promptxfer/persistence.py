"""Binary prompt files, model and dataset directories, run configs and report export.

Prompt file layout (little-endian)::

    magic        4s   b"TVP1"
    version      u16
    h, w, p      3 x u32
    method       4s   ASCII, NUL padded
    source hash  8s   blake2b-64 of the comma-joined source model ids
    config hash  8s   blake2b-64 of the producing RunConfig
    payload      3*h*w f32, channel-major then row-major
    checksum     8s   blake2b-64 of every preceding byte
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import TransferReport
from .imaging import LabeledSample, SceneObject, SceneSpec
from .losses import LossWeights
from .models import DualEncoder, SurrogateModel, get_arch
from .prompt import VisualPrompt
from .trainer import TrainConfig

MAGIC = b"TVP1"
VERSION = 1
_HEADER = struct.Struct("<4sHIII4s8s8s")
_CHECK = 8


class PersistenceError(Exception):
    pass


class PromptFormatError(PersistenceError):
    pass


class CorruptFileError(PersistenceError):
    pass


class ConfigParseError(PersistenceError):
    pass


class ResolutionError(PersistenceError):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_CHECK).digest()


def source_hash(sources: Iterable[str]) -> bytes:
    return digest(",".join(sources).encode())


# --------------------------------------------------------------------------
# prompts
# --------------------------------------------------------------------------

def encode_prompt(prompt: VisualPrompt, config_hash: bytes = b"\0" * 8) -> bytes:
    md = prompt.metadata
    method = str(md.get("method", "")).encode("ascii")
    if len(method) > 4:
        raise PromptFormatError(f"method tag {method!r} longer than 4 bytes")
    src = md.get("source_hash")
    src = bytes.fromhex(src) if isinstance(src, str) else source_hash(md.get("sources", []))
    if len(config_hash) != 8:
        raise PromptFormatError("config hash must be 8 bytes")
    head = _HEADER.pack(MAGIC, VERSION, prompt.canvas_h, prompt.canvas_w, prompt.width_p,
                        method.ljust(4, b"\0"), src, config_hash)
    body = head + prompt.delta.astype("<f4").tobytes(order="C")
    return body + digest(body)


def decode_prompt(blob: bytes, origin: str = "<bytes>") -> VisualPrompt:
    if len(blob) < _HEADER.size + _CHECK:
        raise PromptFormatError(f"{origin}: truncated prompt file ({len(blob)} bytes)")
    magic, version, h, w, p, method, src, cfg = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise PromptFormatError(f"{origin}: bad magic {magic!r}")
    if digest(blob[:-_CHECK]) != blob[-_CHECK:]:
        raise CorruptFileError(f"{origin}: checksum mismatch")
    if version != VERSION:
        raise PromptFormatError(f"{origin}: unsupported version {version}")
    n = 3 * h * w
    if len(blob) != _HEADER.size + 4 * n + _CHECK:
        raise PromptFormatError(f"{origin}: payload length does not match {h}x{w} header")
    delta = np.frombuffer(blob, dtype="<f4", count=n, offset=_HEADER.size).astype(np.float64)
    md = {"method": method.rstrip(b"\0").decode("ascii"), "source_hash": src.hex(),
          "config_hash": cfg.hex()}
    return VisualPrompt(delta.reshape(3, h, w), p, h, w, md)


def save_prompt(prompt: VisualPrompt, path, config_hash: bytes = b"\0" * 8) -> None:
    Path(path).write_bytes(encode_prompt(prompt, config_hash))


def load_prompt(path) -> VisualPrompt:
    path = Path(path)
    if not path.is_file():
        raise ResolutionError(f"prompt file not found: {path}")
    return decode_prompt(path.read_bytes(), str(path))


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Flat experiment description; every random stream derives from ``seed``."""

    experiment: str = "default"
    task: str = "shapes"
    pretrain_tasks: str = "shapes,counting,presence"
    zoo: str = "attn16:0,mix16:0,attn16:1,mix16:1"
    source: str = "attn16-s0"
    method: str = "tvp"
    gamma0: float = 10.0
    epochs: int = 10
    batch_size: int = 16
    lambda1: float = 0.003
    lambda2: float = 0.0005
    tau: float = 2.0
    input_diversity: str = "auto"
    width: int = 8
    init: str = "zeros"
    canvas: int = 64
    n_pretrain: int = 1500
    pretrain_epochs: int = 10
    n_train: int = 640
    n_val: int = 100
    n_test: int = 400
    widths: str = "2,4,8,12,16,24"
    fractions: str = "1,5,10,25,50,100"
    cross_task: str = "shapes_alt"
    corruptions: str = "gaussian_noise,impulse_noise,gaussian_blur,brightness,contrast"
    severities: str = "1,3,5"
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("vp", "evp", "tvp"):
            raise ValueError(f"method must be vp, evp or tvp, got {self.method!r}")
        if self.input_diversity not in ("auto", "true", "false"):
            raise ValueError("input_diversity must be auto, true or false")
        self.zoo_spec()

    def zoo_spec(self) -> list[tuple[str, int]]:
        out = []
        for item in self.zoo.split(","):
            variant, _, seed = item.strip().partition(":")
            if not seed:
                raise ValueError(f"zoo entry {item!r} is not variant:seed")
            out.append((variant, int(seed)))
        return out

    @property
    def model_ids(self) -> list[str]:
        return [f"{v}-s{s}" for v, s in self.zoo_spec()]

    @property
    def sources(self) -> list[str]:
        return [s.strip() for s in self.source.split(",") if s.strip()]

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.tau)

    def train_config(self, method: Optional[str] = None, **overrides) -> TrainConfig:
        method = (method or self.method).upper()
        div = None if self.input_diversity == "auto" else self.input_diversity == "true"
        w = self.weights() if method == "TVP" else LossWeights(0.0, 0.0, self.tau)
        cfg = TrainConfig(method=method, gamma0=self.gamma0, epochs=self.epochs,
                          batch_size=self.batch_size, weights=w, input_diversity=div,
                          model_ids=tuple(self.sources), rng_seed=self.seed,
                          width=self.width, init=self.init, canvas=self.canvas)
        return replace(cfg, **overrides)

    def canonical(self) -> str:
        """Every field as a config line; parses back to an equal config."""
        def text(v):
            return repr(v) if isinstance(v, float) else str(v)
        return "".join(f"{f.name} = {text(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> bytes:
        return digest(self.canonical().encode())

    def int_list(self, name: str) -> list[int]:
        return [int(v) for v in getattr(self, name).split(",") if v.strip()]


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not eq or not key:
            raise ConfigParseError(f"{origin}:{lineno}: expected 'key = value'")
        if key not in _FIELD_TYPES:
            raise ConfigParseError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigParseError(f"{origin}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        if key in ("method", "input_diversity"):
            raw = raw.lower()
        try:
            values[key] = _coerce(_FIELD_TYPES[key], raw)
        except ValueError:
            raise ConfigParseError(f"{origin}:{lineno}: bad {_FIELD_TYPES[key]} value {raw!r} for {key!r}") from None
        seen[key] = lineno
    try:
        return RunConfig(**values)
    except ValueError as e:
        key = next((k for k in seen if k in str(e)), None)
        where = f"{origin}:{seen[key]}" if key else origin
        raise ConfigParseError(f"{where}: {e}") from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ResolutionError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

def _write_params(params: dict[str, ad.Tensor], d: Path, header: list[str]) -> None:
    buf = io.BytesIO()
    lines = list(header)
    for name in sorted(params):
        arr = params[name].data
        lines.append(f"param {name} {','.join(map(str, arr.shape))}")
        buf.write(arr.astype("<f8").tobytes(order="C"))
    blob = buf.getvalue()
    lines.append(f"checksum {digest(blob).hex()}")
    d.mkdir(parents=True, exist_ok=True)
    (d / "params.bin").write_bytes(blob)
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def _read_params(d: Path) -> tuple[dict[str, str], dict[str, ad.Tensor]]:
    man, binf = d / "manifest.txt", d / "params.bin"
    for f in (man, binf):
        if not f.is_file():
            raise ResolutionError(f"missing model file: {f}")
    blob = binf.read_bytes()
    meta, shapes = {}, []
    for line in man.read_text().splitlines():
        key, _, rest = line.partition(" ")
        if key == "param":
            name, shp = rest.split(" ")
            shapes.append((name, tuple(int(v) for v in shp.split(",") if v)))
        else:
            meta[key] = rest
    if digest(blob).hex() != meta.get("checksum"):
        raise CorruptFileError(f"{binf}: checksum mismatch")
    params, off = {}, 0
    for name, shp in shapes:
        n = int(np.prod(shp)) if shp else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shp)
        params[name] = ad.Tensor(arr, requires_grad=False, name=name)
        off += 8 * n
    if off != len(blob):
        raise CorruptFileError(f"{binf}: {len(blob) - off} trailing bytes")
    return meta, params


def save_model(m: SurrogateModel, d, config_hash: bytes = b"\0" * 8) -> None:
    a = m.arch
    _write_params(m.params, Path(d), [
        "kind surrogate", f"model_id {m.model_id}", f"variant {a.variant}", f"seed {m.seed}",
        f"canvas {a.canvas}", f"vocab {m.tokenizer.vocab_hash()}", f"config {config_hash.hex()}"])


def load_model(d) -> SurrogateModel:
    meta, params = _read_params(Path(d))
    if meta.get("kind") != "surrogate":
        raise PromptFormatError(f"{d}: not a surrogate model directory")
    arch = get_arch(meta["variant"], int(meta["canvas"]))
    m = SurrogateModel(arch, params, int(meta["seed"]), model_id=meta["model_id"])
    if m.tokenizer.vocab_hash() != meta["vocab"]:
        raise PromptFormatError(f"{d}: vocabulary mismatch")
    return m.freeze()


def save_dual(e: DualEncoder, d, config_hash: bytes = b"\0" * 8) -> None:
    _write_params(e.params, Path(d), [
        "kind dual", f"seed {e.seed}", f"patch {e.patch}", f"d_hidden {e.d_hidden}",
        f"d_clip {e.d_clip}", f"temperature {e.temperature!r}", f"canvas {e.canvas}",
        f"config {config_hash.hex()}"])


def load_dual(d) -> DualEncoder:
    meta, params = _read_params(Path(d))
    if meta.get("kind") != "dual":
        raise PromptFormatError(f"{d}: not a dual encoder directory")
    e = DualEncoder(params, int(meta["seed"]), int(meta["patch"]), int(meta["d_hidden"]),
                    int(meta["d_clip"]), float(meta["temperature"]), int(meta["canvas"]))
    return e.freeze()


DUAL_DIR = "dual"


def save_zoo(models: Sequence[SurrogateModel], dual: Optional[DualEncoder], d,
             config_hash: bytes = b"\0" * 8) -> None:
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    for m in models:
        save_model(m, d / m.model_id, config_hash)
    if dual is not None:
        save_dual(dual, d / DUAL_DIR, config_hash)
    (d / "zoo.txt").write_text("".join(f"{m.model_id}\n" for m in models))


def load_zoo(d) -> tuple[list[SurrogateModel], Optional[DualEncoder]]:
    d = Path(d)
    index = d / "zoo.txt"
    if not index.is_file():
        raise ResolutionError(f"model zoo index not found: {index}")
    models = [load_model(d / mid) for mid in index.read_text().split()]
    dual = load_dual(d / DUAL_DIR) if (d / DUAL_DIR).is_dir() else None
    return models, dual


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def _scene_json(s: SceneSpec) -> dict:
    return {"background": list(s.background), "canvas": list(s.canvas),
            "objects": [{"shape": o.shape, "color": o.color, "center": list(o.center),
                         "radius": o.radius} for o in s.objects]}


def _scene_from(d: dict) -> SceneSpec:
    objs = tuple(SceneObject(o["shape"], o["color"], tuple(o["center"]), o["radius"]) for o in d["objects"])
    return SceneSpec(objs, tuple(d["background"]), tuple(d["canvas"]))


def save_dataset(samples: Sequence[LabeledSample], d, config_hash: bytes = b"\0" * 8) -> None:
    """``images.bin`` (f64, sample-major) plus a JSON manifest of everything else."""
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    blob = b"".join(s.image.astype("<f8").tobytes(order="C") for s in samples)
    shape = list(samples[0].image.shape) if samples else [3, 0, 0]
    manifest = {
        "config": config_hash.hex(), "image_shape": shape, "checksum": digest(blob).hex(),
        "samples": [{"id": s.sample_id, "label": s.label_index, "prompt": s.prompt_text,
                     "target": s.target_text, "description": s.description_text,
                     "scene": _scene_json(s.scene)} for s in samples],
    }
    (d / "images.bin").write_bytes(blob)
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_dataset(d) -> list[LabeledSample]:
    d = Path(d)
    for f in ("images.bin", "manifest.json"):
        if not (d / f).is_file():
            raise ResolutionError(f"missing dataset file: {d / f}")
    man = json.loads((d / "manifest.json").read_text())
    blob = (d / "images.bin").read_bytes()
    if digest(blob).hex() != man["checksum"]:
        raise CorruptFileError(f"{d / 'images.bin'}: checksum mismatch")
    shape = tuple(man["image_shape"])
    imgs = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape((-1,) + shape)
    return [LabeledSample(img, r["prompt"], r["target"], r["description"], r["label"],
                          _scene_from(r["scene"]), r["id"])
            for img, r in zip(imgs, man["samples"])]


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

CSV_COLUMNS = ("dataset", "method", "source_model", "target_model", "metric", "is_source",
               "zero_shot", "delta")


def report_csv(rep: TransferReport) -> str:
    """One line per (row, model) plus an ``avg`` line per row; percentages to 2 decimals."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for mid in rep.models:
        w.writerow([rep.dataset, "zero-shot", "", mid, rep.metric, 0, f"{rep.zero_shot[mid]:.2f}", "0.00"])
    for r in rep.rows:
        for mid in rep.models:
            w.writerow([rep.dataset, r.method, r.source, mid, rep.metric, int(r.is_source.get(mid, False)),
                        f"{rep.zero_shot[mid]:.2f}", f"{r.metrics[mid] - rep.zero_shot[mid]:.2f}"])
        zs = float(np.mean([rep.zero_shot[m] for m in rep.delta_models]))
        w.writerow([rep.dataset, r.method, r.source, "avg", rep.metric, 0, f"{zs:.2f}", f"{r.avg_delta:.2f}"])
    return out.getvalue()


def report_json(rep: TransferReport) -> str:
    obj = {"dataset": rep.dataset, "metric": rep.metric, "models": rep.models,
           "avg_models": rep.delta_models,
           "zero_shot": rep.zero_shot, "metadata": rep.metadata,
           "rows": [{"method": r.method, "source": r.source, "metrics": r.metrics,
                     "avg_delta": r.avg_delta, "is_source": r.is_source} for r in rep.rows]}
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_report(rep: TransferReport, path) -> None:
    """Write ``path`` as CSV and a JSON mirror next to it."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    path.write_text(report_csv(rep))
    path.with_suffix(".json").write_text(report_json(rep))


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def atomic_write(path, data: bytes) -> None:
    tmp = Path(f"{path}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    tmp.replace(path)
