"""Deterministic synthetic benchmarks with planted class-sensitive regions.

Each class ``c`` gets a sensitive position ``pi_c`` in [0.1, 0.9], drawn once.
An instance of class ``c`` is only visible inside a window of random width
centred on ``pi_c``::

    g(u) * (actionness * a + class_amp * s_c)

where ``u`` is the normalized position inside the instance, ``a`` a vector
shared by all classes, ``s_c`` a class signature and ``g`` equal to one inside
the window with a short Gaussian ramp down to ``floor`` outside it.  The rest
of the annotated span looks like background, so the true extent cannot be read
off the features and the model has to learn where in an instance of each class
the evidence sits.  Additive Gaussian noise covers the whole video.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ActionInstance, TimeSegment
from .data_io import DatasetManifest, QueryEntry, VideoEntry, save_features, save_manifest


@dataclass(frozen=True)
class SynthSpec:
    n_videos: int = 200
    T: int = 256
    D: int = 32
    C: int = 5
    instances_per_video: int = 4
    noise: float = 1.0
    mode: str = "mq"
    n_val: int = 0
    stride_seconds: float = 1.0
    n_sources: int = 1
    min_len: int = 8
    max_len: int = 40
    actionness: float = 1.0
    class_amp: float = 2.5
    floor: float = 0.0
    min_visible: float = 0.2
    max_visible: float = 0.7
    ramp: float = 1.5
    text_dim: int = 16
    tokens_per_query: int = 6
    text_noise: float = 0.3

    def __post_init__(self):
        if self.mode not in ("mq", "nlq"):
            raise ValueError(f"mode must be 'mq' or 'nlq', got {self.mode!r}")
        if min(self.n_videos, self.T, self.D, self.C, self.n_sources) < 1:
            raise ValueError("n_videos, T, D, C and n_sources must be >= 1")
        if self.n_val < 0 or self.n_val > self.n_videos:
            raise ValueError("n_val must be in [0, n_videos]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_len + 2 > self.T:
            raise ValueError(f"max_len={self.max_len} does not fit in T={self.T}")
        if self.noise < 0 or self.stride_seconds <= 0:
            raise ValueError("noise must be >= 0 and stride_seconds > 0")
        room = self.instances_per_video * (self.max_len + 2)
        if room > self.T:
            raise ValueError(f"{self.instances_per_video} instances of up to {self.max_len} steps do not fit in T={self.T}")


@dataclass(frozen=True)
class ClassStructure:
    actionness: np.ndarray  # (S, D)
    signatures: np.ndarray  # (S, C, D)
    sensitive: np.ndarray  # (C,)
    text_protos: np.ndarray  # (C, text_dim)


def class_structure(seed: int, spec: SynthSpec) -> ClassStructure:
    rng = np.random.default_rng([seed, 0])

    def unit(shape):
        v = rng.normal(size=shape)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    act = unit((spec.n_sources, spec.D))
    sig = unit((spec.n_sources, spec.C, spec.D))
    sensitive = rng.uniform(0.1, 0.9, size=spec.C)
    # text prototypes are a fixed random linear image of the first source's signatures
    proj = rng.normal(size=(spec.D, spec.text_dim)) / np.sqrt(spec.D)
    protos = sig[0] @ proj
    protos /= np.linalg.norm(protos, axis=-1, keepdims=True)
    return ClassStructure(act, sig, sensitive, protos)


def sensitivity_profile(u: np.ndarray, center: float, half_width: float, length: float, spec: SynthSpec) -> np.ndarray:
    """Visibility of each step: 1 within ``half_width`` of ``center`` (instance-relative),
    a Gaussian ramp of ``spec.ramp`` steps outside it, never below ``spec.floor``."""
    gap = np.maximum(0.0, np.abs(u - center) - half_width) * length
    return spec.floor + (1.0 - spec.floor) * np.exp(-(gap**2) / (2.0 * spec.ramp**2))


def _place(rng: np.random.Generator, spec: SynthSpec) -> list[tuple[int, int]]:
    """Non-overlapping (start_step, length) pairs with at least one gap step."""
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=spec.instances_per_video)
    slack = spec.T - 1 - int(lengths.sum()) - len(lengths)
    gaps = rng.multinomial(slack, np.ones(len(lengths) + 1) / (len(lengths) + 1))
    out, pos = [], 0
    for n, g in zip(lengths, gaps):
        pos += int(g) + 1
        out.append((pos, int(n)))
        pos += int(n)
    return out


def plant_video(rng: np.random.Generator, spec: SynthSpec, cs: ClassStructure, labels: np.ndarray, spans):
    """Noise-free tracks, one (T, D) array per source."""
    tracks = [np.zeros((spec.T, spec.D)) for _ in range(spec.n_sources)]
    for c, (start, length) in zip(labels, spans):
        steps = np.arange(start, start + length + 1)
        u = (steps - start) / length
        half_width = rng.uniform(spec.min_visible, spec.max_visible) / 2.0
        g = sensitivity_profile(u, cs.sensitive[c], half_width, length, spec)[:, None]
        for s in range(spec.n_sources):
            tracks[s][steps] = g * (spec.actionness * cs.actionness[s] + spec.class_amp * cs.signatures[s, c])
    return tracks


def synth_generate(seed: int, spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a dataset (features, token files, manifest.json) under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    if spec.mode == "nlq":
        (out_dir / "text").mkdir(exist_ok=True)
    cs = class_structure(seed, spec)
    videos = []
    n_train = spec.n_videos - spec.n_val
    for v in range(spec.n_videos):
        rng = np.random.default_rng([seed, 1, v])
        vid = f"v{v:04d}"
        spans = _place(rng, spec)
        labels = rng.integers(0, spec.C, size=len(spans))
        tracks = plant_video(rng, spec, cs, labels, spans)
        rels = []
        for s, tr in enumerate(tracks):
            feats = tr + spec.noise * rng.normal(size=tr.shape) if spec.noise > 0 else tr
            rel = f"features/{vid}_s{s}.aslf"
            save_features(out_dir / rel, feats)
            rels.append(rel)
        st = spec.stride_seconds
        segs = [TimeSegment(a * st, (a + n) * st) for a, n in spans]
        entry = VideoEntry(vid, spec.T * st, st, rels, "train" if v < n_train else "val")
        if spec.mode == "mq":
            entry.instances = [ActionInstance(seg, int(c)) for seg, c in zip(segs, labels)]
        else:
            for q, (seg, c) in enumerate(zip(segs, labels)):
                qid = f"{vid}_q{q}"
                n_tok = spec.tokens_per_query
                tokens = spec.text_noise * rng.normal(size=(n_tok, spec.text_dim))
                tokens[: max(1, n_tok // 2)] += cs.text_protos[c]
                rel = f"text/{qid}.aslf"
                save_features(out_dir / rel, tokens)
                entry.queries.append(QueryEntry(qid, seg, rel))
        videos.append(entry)
    meta = {
        "seed": seed,
        "spec": asdict(spec),
        "sensitive_positions": [float(x) for x in cs.sensitive],
    }
    manifest = DatasetManifest(
        mode=spec.mode,
        num_classes=spec.C if spec.mode == "mq" else 1,
        source_dims=[spec.D] * spec.n_sources,
        videos=videos,
        root=out_dir,
        text_dim=spec.text_dim if spec.mode == "nlq" else 0,
        meta=meta,
    )
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest
