"""On-disk formats.

Feature file (``.aslf``), all integers little-endian::

    b"ASLF" | u32 version=1 | u32 T | u32 D | T*D float64 (time-major)

Checkpoint (``.aslm``)::

    b"ASLM" | u32 version=1 | u32 n | n bytes model config (key=value lines)
    | u32 count | count * (u32 name_len | name | u32 rank | rank * u32 dims
    | prod(dims) float64)

Predictions are tab-separated text with a fixed header
``video_id label start_s end_s score`` and 6-decimal fixed-point numbers.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .core import ActionInstance, QueryAnnotation, TimeSegment, VideoAnnotation
from .network import ModelConfig
from .postprocess import SegmentPrediction

FEATURE_MAGIC = b"ASLF"
CHECKPOINT_MAGIC = b"ASLM"
FORMAT_VERSION = 1
MANIFEST_FORMAT = "aslkit-manifest"
PREDICTION_HEADER = ("video_id", "label", "start_s", "end_s", "score")


class FormatError(ValueError):
    """Malformed or unsupported file content; ``offset`` is the byte position when known."""

    def __init__(self, path, message: str, offset: int | None = None):
        self.path = str(path)
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{path}{where}: {message}")


class ConfigError(ValueError):
    pass


# feature files

def save_features(path, data: np.ndarray) -> None:
    arr = np.ascontiguousarray(data, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("features contain non-finite values")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(path, f"header truncated: expected 16 bytes, got {len(raw)}", offset=len(raw))
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(path, f"bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}", offset=0)
    version, T, D = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported feature file version {version} (supported: {FORMAT_VERSION})", offset=4)
    expected = T * D * 8
    actual = len(raw) - 16
    if actual != expected:
        raise FormatError(path, f"payload length mismatch: expected {expected} bytes, got {actual}", offset=16 + min(actual, expected))
    data = np.frombuffer(raw, dtype="<f8", offset=16).reshape(T, D).astype(np.float64)
    bad = ~np.isfinite(data)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise FormatError(path, "non-finite value in payload", offset=16 + 8 * first)
    return data


# manifests

@dataclass
class QueryEntry:
    query_id: str
    segment: TimeSegment
    tokens: str


@dataclass
class VideoEntry:
    video_id: str
    duration: float
    stride_seconds: float
    features: list[str]
    split: str = "train"
    instances: list[ActionInstance] = field(default_factory=list)
    queries: list[QueryEntry] = field(default_factory=list)

    def annotation(self) -> VideoAnnotation:
        return VideoAnnotation(self.video_id, self.duration, tuple(self.instances))


@dataclass
class DatasetManifest:
    mode: str
    num_classes: int
    source_dims: list[int]
    videos: list[VideoEntry]
    root: Path = Path(".")
    text_dim: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def split(self, name: str | None) -> list[VideoEntry]:
        if name in (None, "all"):
            return list(self.videos)
        return [v for v in self.videos if v.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> dict:
        vids = []
        for v in self.videos:
            item = {
                "id": v.video_id,
                "duration": v.duration,
                "stride_seconds": v.stride_seconds,
                "split": v.split,
                "features": list(v.features),
            }
            if self.mode == "mq":
                item["instances"] = [
                    {"start": i.segment.start, "end": i.segment.end, "label": i.label} for i in v.instances
                ]
            else:
                item["queries"] = [
                    {"id": q.query_id, "start": q.segment.start, "end": q.segment.end, "tokens": q.tokens}
                    for q in v.queries
                ]
            vids.append(item)
        out = {
            "format": MANIFEST_FORMAT,
            "version": FORMAT_VERSION,
            "mode": self.mode,
            "num_classes": self.num_classes,
            "source_dims": list(self.source_dims),
            "videos": vids,
        }
        if self.mode == "nlq":
            out["text_dim"] = self.text_dim
        if self.meta:
            out["meta"] = self.meta
        return out


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=False) + "\n")


def _req(obj: dict, key: str, where: str):
    if key not in obj:
        raise FormatError(where, f"missing field {key!r}")
    return obj[key]


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest, including referenced feature files."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON: {exc.msg}", offset=exc.pos) from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(path, f"not a dataset manifest (format={doc.get('format')!r})")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(path, f"unsupported manifest version {doc.get('version')}")
    mode = _req(doc, "mode", str(path))
    if mode not in ("mq", "nlq"):
        raise FormatError(path, f"mode must be 'mq' or 'nlq', got {mode!r}")
    num_classes = int(_req(doc, "num_classes", str(path)))
    if mode == "nlq" and num_classes != 1:
        raise FormatError(path, "nlq manifests have exactly one class")
    source_dims = [int(d) for d in _req(doc, "source_dims", str(path))]
    text_dim = int(doc.get("text_dim", 0))
    videos = []
    seen: set[str] = set()
    for n, item in enumerate(_req(doc, "videos", str(path))):
        where = f"{path}: videos[{n}]"
        vid = str(_req(item, "id", where))
        if vid in seen:
            raise FormatError(path, f"duplicate video id {vid!r}")
        seen.add(vid)
        try:
            duration = float(_req(item, "duration", where))
            stride = float(_req(item, "stride_seconds", where))
            insts = [
                ActionInstance(TimeSegment(float(i["start"]), float(i["end"])), int(i["label"]))
                for i in item.get("instances", [])
            ]
            queries = [
                QueryEntry(str(q["id"]), TimeSegment(float(q["start"]), float(q["end"])), str(q["tokens"]))
                for q in item.get("queries", [])
            ]
            entry = VideoEntry(vid, duration, stride, list(_req(item, "features", where)), str(item.get("split", "train")), insts, queries)
            entry.annotation().check_labels(num_classes)
            for q in queries:
                if q.segment.end > duration + 1e-9:
                    raise ValueError(f"query {q.query_id} exceeds video duration")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(where, str(exc)) from None
        if len(entry.features) != len(source_dims):
            raise FormatError(where, f"expected {len(source_dims)} feature files, got {len(entry.features)}")
        videos.append(entry)
    manifest = DatasetManifest(mode, num_classes, source_dims, videos, path.parent, text_dim, doc.get("meta", {}))
    if check_files:
        validate_manifest_files(manifest)
    return manifest


def _feature_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:4] != FEATURE_MAGIC:
        raise FormatError(path, "not a feature file", offset=0)
    version, T, D = struct.unpack_from("<III", head, 4)
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported feature file version {version}", offset=4)
    return T, D


def validate_manifest_files(manifest: DatasetManifest) -> None:
    """Referential checks: files exist, dims match, duration agrees with T * stride."""
    for v in manifest.videos:
        Ts = []
        for rel, dim in zip(v.features, manifest.source_dims):
            p = manifest.resolve(rel)
            if not p.exists():
                raise FormatError(p, f"feature file referenced by video {v.video_id!r} does not exist")
            T, D = _feature_header(p)
            if D != dim:
                raise FormatError(p, f"feature dim {D} does not match manifest source dim {dim}")
            Ts.append(T)
        if len(set(Ts)) > 1:
            raise FormatError(manifest.root, f"video {v.video_id!r}: sources disagree on T: {Ts}")
        if abs(Ts[0] * v.stride_seconds - v.duration) > v.stride_seconds + 1e-9:
            raise FormatError(manifest.root, f"video {v.video_id!r}: duration {v.duration} inconsistent with T={Ts[0]} x stride {v.stride_seconds}")
        for q in v.queries:
            p = manifest.resolve(q.tokens)
            if not p.exists():
                raise FormatError(p, f"token file for query {q.query_id!r} does not exist")
            _, D = _feature_header(p)
            if D != manifest.text_dim:
                raise FormatError(p, f"token dim {D} does not match manifest text_dim {manifest.text_dim}")


def load_video_features(manifest: DatasetManifest, entry: VideoEntry) -> list[np.ndarray]:
    return [load_features(manifest.resolve(rel)) for rel in entry.features]


def query_annotations(manifest: DatasetManifest, entry: VideoEntry) -> list[QueryAnnotation]:
    return [
        QueryAnnotation(q.query_id, entry.video_id, q.segment, load_features(manifest.resolve(q.tokens)))
        for q in entry.queries
    ]


# run configuration

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _positive(v):
    if v <= 0:
        raise ValueError("must be positive")
    return v


def _non_negative(v):
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _unit_open(v):
    if not 0.0 < v < 1.0:
        raise ValueError("must be in (0, 1)")
    return v


def _unit(v):
    if not 0.0 <= v <= 1.0:
        raise ValueError("must be in [0, 1]")
    return v


def _mode(v):
    if v not in ("mq", "nlq"):
        raise ValueError("must be 'mq' or 'nlq'")
    return v


# key: (parser, default, validator)
CONFIG_SCHEMA: dict[str, tuple] = {
    "model.embed_dim": (int, 64, _positive),
    "model.heads": (int, 4, _positive),
    "model.depth": (int, 2, _non_negative),
    "model.levels": (int, 4, _positive),
    "model.head_layers": (int, 2, _positive),
    "model.head_kernel": (int, 3, _positive),
    "model.proj_dims": (_ints, (), None),
    "model.ffn_ratio": (int, 2, _positive),
    "model.text_depth": (int, 1, _non_negative),
    "model.fusion_depth": (int, 1, _positive),
    "model.max_tokens": (int, 32, _positive),
    "model.pos_encoding": (_parse_bool, True, None),
    "model.text_pos_encoding": (_parse_bool, False, None),
    "loss.focal_alpha": (float, 0.25, _unit_open),
    "loss.focal_gamma": (float, 2.0, _non_negative),
    "loss.nce_temperature": (float, 0.07, _positive),
    "loss.lambda_cls": (float, 1.0, _non_negative),
    "loss.lambda_loc": (float, 1.0, _non_negative),
    "loss.lambda_nce": (float, 0.5, _non_negative),
    "loss.asl": (_parse_bool, True, None),
    "loss.mu_init": (float, 0.5, _unit),
    "loss.sigma_init": (float, 2.0, _positive),
    "loss.sigma_min": (float, 0.1, _positive),
    "loss.sigma_max": (float, 1.0e4, _positive),
    "train.lr": (float, 1e-3, _positive),
    "train.sens_lr": (float, 2e-3, _non_negative),
    "train.epochs": (int, 10, _positive),
    "train.warmup_epochs": (float, 1.0, _non_negative),
    "train.batch": (int, 8, _positive),
    "train.seed": (int, 0, _non_negative),
    "train.beta1": (float, 0.9, _unit_open),
    "train.beta2": (float, 0.999, _unit_open),
    "train.eps": (float, 1e-8, _positive),
    "train.split": (str, "train", None),
    "decode.score_floor": (float, 0.001, _unit),
    "decode.pre_nms_topk": (int, 2000, _positive),
    "decode.nms_sigma": (float, 0.5, _positive),
    "decode.min_score": (float, 0.001, _unit),
    "decode.max_keep": (int, 2000, _positive),
    "eval.split": (str, "val", None),
    "eval.thresholds": (_floats, (0.1, 0.2, 0.3, 0.4, 0.5), None),
    "eval.recall_k": (int, 1, _positive),
    "eval.recall_tiou": (float, 0.5, _unit),
    "eval.nlq_ks": (_ints, (1, 5), None),
    "eval.nlq_tious": (_floats, (0.3, 0.5), None),
    "eval.figures": (_parse_bool, True, None),
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Validated flat key=value configuration with schema defaults."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: spec[1] for k, spec in CONFIG_SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parse, _, check = CONFIG_SCHEMA[key]
        try:
            v = parse(value) if isinstance(value, str) else value
            if parse is float:
                v = float(v)
                if not math.isfinite(v):
                    raise ValueError("must be finite")
            elif parse is int:
                v = int(v)
            if check is not None:
                v = check(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key}: {value!r} ({exc})") from None
        self._values[key] = v

    def __getitem__(self, key: str):
        return self._values[key]

    def get(self, key: str, default=None):
        return self._values.get(key, default)

    def apply_overrides(self, overrides) -> None:
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k.strip(), v.strip())

    def items(self):
        return sorted(self._values.items())

    def dumps(self) -> str:
        return "".join(f"{k}={_format_value(v)}\n" for k, v in self.items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected KEY=VALUE, got {line!r}")
            k, v = line.split("=", 1)
            try:
                cfg.set(k.strip(), v.strip())
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(), str(path))

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values


def model_config_from(run: RunConfig, manifest: DatasetManifest) -> ModelConfig:
    E = run["model.embed_dim"]
    proj = run["model.proj_dims"]
    if not proj:
        # split the embedding evenly across sources, remainder to the first
        n = len(manifest.source_dims)
        proj = tuple([E // n + E % n] + [E // n] * (n - 1))
    return ModelConfig(
        input_dims=tuple(manifest.source_dims),
        proj_dims=tuple(proj),
        embed_dim=E,
        heads=run["model.heads"],
        depth=run["model.depth"],
        levels=run["model.levels"],
        head_layers=run["model.head_layers"],
        head_kernel=run["model.head_kernel"],
        num_classes=manifest.num_classes,
        mode=manifest.mode,
        ffn_ratio=run["model.ffn_ratio"],
        text_dim=manifest.text_dim,
        text_depth=run["model.text_depth"],
        fusion_depth=run["model.fusion_depth"],
        max_tokens=run["model.max_tokens"],
        pos_encoding=run["model.pos_encoding"],
        text_pos_encoding=run["model.text_pos_encoding"],
    )


# checkpoints

def _model_config_text(cfg: ModelConfig) -> bytes:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in fields(ModelConfig)]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_model_config(text: str) -> ModelConfig:
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    kw: dict[str, Any] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, v = line.split("=", 1)
        if k not in kinds:
            raise ValueError(f"unknown model config field {k!r}")
        default = getattr(ModelConfig, k, None)
        if k in ("input_dims", "proj_dims"):
            kw[k] = _ints(v)
        elif isinstance(default, bool):
            kw[k] = _parse_bool(v)
        elif isinstance(default, int):
            kw[k] = int(v)
        else:
            kw[k] = v
    return ModelConfig(**kw)


def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    cfg = _model_config_text(config)
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(cfg)) + cfg
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(path, f"truncated {what}: expected {n} bytes, got {len(raw) - pos}", offset=pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    def u32(what: str) -> int:
        return struct.unpack("<I", take(4, what))[0]

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(path, f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version = u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version} (supported: {FORMAT_VERSION})", offset=4)
    n_cfg = u32("config length")
    cfg_off = pos
    try:
        config = _parse_model_config(take(n_cfg, "model config").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(path, f"bad model config: {exc}", offset=cfg_off) from None
    params = {}
    for _ in range(u32("parameter count")):
        name = take(u32("name length"), "parameter name").decode("utf-8")
        rank = u32("rank")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        off = pos
        arr = np.frombuffer(take(8 * n, f"data of {name!r}"), dtype="<f8").astype(np.float64).reshape(dims)
        if not np.all(np.isfinite(arr)):
            raise FormatError(path, f"non-finite values in parameter {name!r}", offset=off)
        params[name] = arr
    if pos != len(raw):
        raise FormatError(path, f"{len(raw) - pos} trailing bytes", offset=pos)
    return config, params


# predictions

def format_predictions(preds) -> str:
    lines = ["\t".join(PREDICTION_HEADER)]
    for p in preds:
        lines.append(f"{p.video_id}\t{p.label}\t{p.start:.6f}\t{p.end:.6f}\t{p.score:.6f}")
    return "\n".join(lines) + "\n"


def save_predictions(path, preds) -> None:
    Path(path).write_text(format_predictions(preds))


def load_predictions(path) -> list[SegmentPrediction]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or tuple(lines[0].split("\t")) != PREDICTION_HEADER:
        raise FormatError(path, f"prediction header must be {' '.join(PREDICTION_HEADER)!r}", offset=0)
    out = []
    offset = len(lines[0]) + 1
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            vid, label, s, e, score = parts
            score_f = float(score)
            if not math.isfinite(score_f):
                raise ValueError("non-finite score")
            out.append(SegmentPrediction(vid, TimeSegment(float(s), float(e)), int(label), score_f))
        except ValueError as exc:
            raise FormatError(path, f"line {n}: {exc}", offset=offset) from None
        offset += len(line) + 1
    return out
