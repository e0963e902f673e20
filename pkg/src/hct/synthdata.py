"""Synthetic hierarchical workflow clips.

Every clip is drawn top-down through a taxonomy: a step (stratified over the
split), its parent phase, then instruments and actions permitted by the
step's co-occurrence rows. Pixels encode the labels:

* a phase-specific colour offset and a step-specific drifting plane wave,
* one square blob per instrument, coloured by instrument class and moving
  with a velocity determined by the action it performs,
* additive Gaussian noise.

Detector output is simulated from the final frame: jittered boxes around the
blobs with a confidence score, filtered at 0.75, and 256-d box features made
of a fixed class embedding plus noise.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

DEFAULT_SIZES = (4, 10, 49, 13)
CLIP_LEN = 16
BOX_DIM = 256
CONFIDENCE_THRESHOLD = 0.75
BLOB = 6

MAGIC = b"HCTD"
VERSION = 1


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0])


@dataclass
class Taxonomy:
    seed: int
    phases: list[str]
    steps: list[str]
    step_parent: list[int]
    actions: list[str]
    instruments: list[str]
    step_actions: np.ndarray  # [steps, actions], rows sum to 1
    step_instruments: np.ndarray  # [steps, instruments], rows sum to 1

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.phases), len(self.steps), len(self.actions), len(self.instruments)

    def class_counts(self) -> dict[str, int]:
        p, s, a, i = self.sizes
        return {"phase": p, "step": s, "action": a, "instrument": i}

    def validate(self) -> None:
        P, S, A, I = self.sizes
        if len(self.step_parent) != S or min(self.step_parent) < 0 or max(self.step_parent) >= P:
            raise ConfigError("every step needs exactly one parent phase")
        for name, table, width in (("action", self.step_actions, A), ("instrument", self.step_instruments, I)):
            if table.shape != (S, width) or (table < 0).any() or not np.allclose(table.sum(axis=1), 1.0):
                raise ConfigError(f"step->{name} rows must be probability vectors")
        if not (self.step_actions > 0).any(axis=0).all():
            raise ConfigError("every action must be reachable from at least one step")

    def box_embeddings(self) -> np.ndarray:
        """Fixed per-instrument feature prototypes, ``[instruments, 256]``."""
        rng = _rng(self.seed, 0xB0C5)
        e = rng.standard_normal((len(self.instruments), BOX_DIM))
        return e / np.linalg.norm(e, axis=1, keepdims=True) * 4.0

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "phases": self.phases, "steps": self.steps, "step_parent": self.step_parent,
            "actions": self.actions, "instruments": self.instruments,
            "step_actions": self.step_actions.tolist(), "step_instruments": self.step_instruments.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Taxonomy":
        tax = cls(int(d["seed"]), list(d["phases"]), list(d["steps"]), [int(p) for p in d["step_parent"]],
                  list(d["actions"]), list(d["instruments"]),
                  np.asarray(d["step_actions"], dtype=np.float64), np.asarray(d["step_instruments"], dtype=np.float64))
        tax.validate()
        return tax

    def __eq__(self, other) -> bool:
        return isinstance(other, Taxonomy) and json.dumps(self.to_json()) == json.dumps(other.to_json())


def _cooccurrence(rng: np.random.Generator, n_steps: int, n_items: int, lo: int, hi: int) -> np.ndarray:
    """Sparse step->item probability rows with every item used by some step."""
    lo = min(lo, n_items)
    hi = max(min(hi, n_items), math.ceil(n_items / n_steps), lo)
    allowed = [set() for _ in range(n_steps)]
    for k, item in enumerate(rng.permutation(n_items)):
        allowed[k % n_steps].add(int(item))
    for s in range(n_steps):
        target = int(rng.integers(max(lo, len(allowed[s])), hi + 1))
        spare = [i for i in rng.permutation(n_items) if i not in allowed[s]]
        allowed[s].update(int(i) for i in spare[:max(0, target - len(allowed[s]))])
    table = np.zeros((n_steps, n_items))
    for s, items in enumerate(allowed):
        idx = sorted(items)
        w = rng.uniform(0.5, 1.5, size=len(idx))
        table[s, idx] = w / w.sum()
    return table


def sample_taxonomy(seed: int, sizes: Sequence[int] = DEFAULT_SIZES) -> Taxonomy:
    """Deterministic phase > step hierarchy with sparse action/instrument co-occurrence."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 4 or min(sizes) < 1:
        raise ConfigError(f"taxonomy sizes must be four integers >= 1, got {sizes}")
    P, S, A, I = sizes
    if S < P:
        raise ConfigError(f"need at least as many steps as phases, got {S} steps for {P} phases")
    rng = _rng(seed, 0x7A40)
    parents = list(range(P)) + [int(p) for p in rng.integers(0, P, size=S - P)]
    parents.sort()
    tax = Taxonomy(
        seed=int(seed),
        phases=[f"phase_{k}" for k in range(P)],
        steps=[f"step_{k}" for k in range(S)],
        step_parent=parents,
        actions=[f"action_{k}" for k in range(A)],
        instruments=[f"instrument_{k}" for k in range(I)],
        step_actions=_cooccurrence(rng, S, A, 2, 6),
        step_instruments=_cooccurrence(rng, S, I, 1, 3),
    )
    tax.validate()
    return tax


@dataclass
class ClipSample:
    clip: np.ndarray  # float32 [T, H, W, C]
    phase: int
    step: int
    actions: np.ndarray  # uint8 multi-hot [A]
    boxes: np.ndarray  # float32 [n, 4] detector boxes (x1, y1, x2, y2), confidence >= threshold
    box_classes: np.ndarray  # int [n]
    box_actions: np.ndarray  # int [n]
    box_conf: np.ndarray  # float32 [n]
    box_features: np.ndarray  # float32 [n, 256]
    gt_boxes: np.ndarray  # float32 [g, 4]
    gt_classes: np.ndarray  # int [g]
    gt_actions: np.ndarray  # int [g]
    clip_id: int = 0
    video_id: int = 0
    seed: int = 0
    split: str = "train"

    def equals(self, other: "ClipSample") -> bool:
        """Bit-exact comparison of every field."""
        for k in self.__dataclass_fields__:
            a, b = getattr(self, k), getattr(other, k)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    return False
            elif a != b:
                return False
        return True


def _action_velocity(action: int, n_actions: int) -> tuple[float, float]:
    g = max(1, math.ceil(math.sqrt(n_actions)))
    c = (g - 1) / 2.0
    return 0.5 * ((action % g) - c), 0.5 * ((action // g) - c)


def _step_wave(taxonomy: Taxonomy, step: int):
    rng = _rng(taxonomy.seed, 0x57E9, step)
    kx, ky = (int(v) for v in rng.integers(-3, 4, size=2))
    if kx == 0 and ky == 0:
        kx = 1
    return kx, ky, float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(-0.4, 0.4)), rng.uniform(-1, 1, size=3)


def _phase_colour(taxonomy: Taxonomy, phase: int, channels: int) -> np.ndarray:
    return _rng(taxonomy.seed, 0xF4A5, phase).uniform(-0.6, 0.6, size=channels)


def _instrument_colour(taxonomy: Taxonomy, inst: int, channels: int) -> np.ndarray:
    c = _rng(taxonomy.seed, 0x1257, inst).uniform(-1, 1, size=channels)
    return 1.5 * c / max(np.abs(c).max(), 1e-6)


def _bounce(p0: float, v: float, t: np.ndarray, span: float) -> np.ndarray:
    if span <= 0:
        return np.zeros_like(t, dtype=np.float64)
    x = np.mod(p0 + v * t, 2 * span)
    return np.where(x > span, 2 * span - x, x)


def generate_clip(taxonomy: Taxonomy, seed: int, noise: float = 0.1, step: int | None = None,
                  frame_size: tuple[int, int] = (32, 32), channels: int = 3, clip_len: int = CLIP_LEN,
                  clip_id: int = 0, video_id: int = 0, split: str = "train", label_flip: float = 0.0,
                  box_noise: float = 0.5) -> ClipSample:
    """Draw one labelled clip; a pure function of its arguments."""
    P, S, A, I = taxonomy.sizes
    rng = _rng(seed, 0xC11B)
    if step is None:
        step = int(rng.integers(S))
    if not 0 <= step < S:
        raise ConfigError(f"step {step} outside [0, {S})")
    H, W = frame_size
    t = np.arange(clip_len, dtype=np.float64)

    inst_row = taxonomy.step_instruments[step]
    permitted = np.flatnonzero(inst_row)
    n_inst = int(rng.integers(1, min(3, len(permitted)) + 1))
    insts = rng.choice(len(inst_row), size=n_inst, replace=False, p=inst_row)
    acts = [int(rng.choice(A, p=taxonomy.step_actions[step])) for _ in insts]

    phase = taxonomy.step_parent[step]
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    kx, ky, phi, omega, colour = _step_wave(taxonomy, step)
    wave = np.cos(2 * np.pi * (kx * xx[None] / W + ky * yy[None] / H) + phi + omega * t[:, None, None])
    video = wave[..., None] * colour[:channels] + _phase_colour(taxonomy, phase, channels)

    span_x, span_y = W - BLOB, H - BLOB
    gt_boxes, gt_classes, gt_actions = [], [], []
    for inst, act in zip(insts, acts):
        vx, vy = _action_velocity(act, A)
        px = _bounce(rng.uniform(0, span_x), vx, t, span_x)
        py = _bounce(rng.uniform(0, span_y), vy, t, span_y)
        col = _instrument_colour(taxonomy, int(inst), channels)
        for k in range(clip_len):
            x0, y0 = int(round(px[k])), int(round(py[k]))
            video[k, y0:y0 + BLOB, x0:x0 + BLOB, :] += col
        x0, y0 = float(round(px[-1])), float(round(py[-1]))
        gt_boxes.append((x0, y0, x0 + BLOB, y0 + BLOB))
        gt_classes.append(int(inst))
        gt_actions.append(act)
    video += noise * rng.standard_normal(video.shape)

    # detector simulation on the key (last) frame
    emb = taxonomy.box_embeddings()
    conf = rng.uniform(0.6, 1.0, size=len(gt_boxes))
    jitter = rng.normal(0.0, 0.5, size=(len(gt_boxes), 4))
    feat_noise = rng.standard_normal((len(gt_boxes), BOX_DIM))
    keep = conf >= CONFIDENCE_THRESHOLD
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4) + jitter
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, W)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, H)
    feats = emb[np.asarray(gt_classes, dtype=np.int64)] + box_noise * feat_noise

    actions = np.zeros(A, dtype=np.uint8)
    actions[acts] = 1

    if label_flip > 0 and rng.uniform() < label_flip:
        siblings = [s for s in range(S) if taxonomy.step_parent[s] == phase and s != step]
        if siblings:
            step = int(rng.choice(siblings))

    return ClipSample(
        clip=video.astype(np.float32),
        phase=int(phase), step=int(step), actions=actions,
        boxes=boxes[keep].astype(np.float32),
        box_classes=np.asarray(gt_classes, dtype=np.int64)[keep],
        box_actions=np.asarray(gt_actions, dtype=np.int64)[keep],
        box_conf=conf[keep].astype(np.float32),
        box_features=feats[keep].astype(np.float32),
        gt_boxes=np.asarray(gt_boxes, dtype=np.float32).reshape(-1, 4),
        gt_classes=np.asarray(gt_classes, dtype=np.int64),
        gt_actions=np.asarray(gt_actions, dtype=np.int64),
        clip_id=int(clip_id), video_id=int(video_id), seed=int(seed), split=split,
    )


@dataclass
class DatasetManifest:
    taxonomy_seed: int
    data_seed: int
    sizes: tuple[int, int, int, int]
    noise: float
    label_flip: float
    clips_per_video: int
    splits: dict[str, list[int]]  # split -> video ids
    frequencies: dict[str, dict[str, list[int]]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "format": "HCTD", "version": VERSION,
            "taxonomy_seed": self.taxonomy_seed, "data_seed": self.data_seed, "sizes": list(self.sizes),
            "noise": self.noise, "label_flip": self.label_flip, "clips_per_video": self.clips_per_video,
            "splits": self.splits, "counts": self.counts, "frequencies": self.frequencies,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(int(d["taxonomy_seed"]), int(d["data_seed"]), tuple(d["sizes"]), float(d["noise"]),
                   float(d["label_flip"]), int(d["clips_per_video"]),
                   {k: [int(v) for v in vs] for k, vs in d["splits"].items()},
                   d.get("frequencies", {}), d.get("counts", {}))


def class_frequencies(samples: Sequence[ClipSample], taxonomy: Taxonomy) -> dict[str, list[int]]:
    P, S, A, I = taxonomy.sizes
    phase = np.zeros(P, dtype=np.int64)
    step = np.zeros(S, dtype=np.int64)
    action = np.zeros(A, dtype=np.int64)
    inst = np.zeros(I, dtype=np.int64)
    for s in samples:
        phase[s.phase] += 1
        step[s.step] += 1
        action += s.actions.astype(np.int64)
        np.add.at(inst, s.box_classes, 1)
    return {"phase": phase.tolist(), "step": step.tolist(), "action": action.tolist(), "instrument": inst.tolist()}


@dataclass
class Dataset:
    taxonomy: Taxonomy
    samples: list[ClipSample]
    manifest: DatasetManifest

    def split(self, name: str) -> list[ClipSample]:
        return [s for s in self.samples if s.split == name]


def _stratified_steps(rng: np.random.Generator, n: int, n_steps: int) -> list[int]:
    out: list[int] = []
    while len(out) < n:
        out.extend(int(s) for s in rng.permutation(n_steps))
    return out[:n]


def generate_dataset(taxonomy: Taxonomy, seed: int, n_train: int, n_test: int = 0, noise: float = 0.1,
                     clips_per_video: int = 16, label_flip: float = 0.0, frame_size=(32, 32),
                     channels: int = 3, clip_len: int = CLIP_LEN) -> Dataset:
    """Train and test clips drawn from disjoint synthetic videos.

    Steps are stratified within each split (every step appears before any
    repeats), so all classes are covered once a split has at least as many
    clips as steps.
    """
    if n_train < 0 or n_test < 0 or clips_per_video < 1:
        raise ConfigError("clip counts must be >= 0 and clips_per_video >= 1")
    S = taxonomy.sizes[1]
    samples: list[ClipSample] = []
    splits: dict[str, list[int]] = {"train": [], "test": []}
    clip_id = 0
    video_base = 0
    for split, n in (("train", n_train), ("test", n_test)):
        steps = _stratified_steps(_rng(seed, 0x5EED, 0 if split == "train" else 1), n, S)
        for k, step in enumerate(steps):
            video = video_base + k // clips_per_video
            if not splits[split] or splits[split][-1] != video:
                splits[split].append(video)
            samples.append(generate_clip(taxonomy, derive_seed(seed, clip_id), noise, step, frame_size, channels,
                                         clip_len, clip_id, video, split, label_flip))
            clip_id += 1
        video_base += -(-n // clips_per_video)
    manifest = DatasetManifest(taxonomy.seed, int(seed), taxonomy.sizes, float(noise), float(label_flip),
                               clips_per_video, splits)
    manifest.counts = {k: sum(1 for s in samples if s.split == k) for k in splits}
    manifest.frequencies = {k: class_frequencies([s for s in samples if s.split == k], taxonomy) for k in splits}
    return Dataset(taxonomy, samples, manifest)


# -- binary container ---------------------------------------------------------------
_HEADER = struct.Struct("<IIQBHH4H")
_SPLITS = ("train", "test")


def _encode_sample(s: ClipSample) -> bytes:
    n, g = len(s.boxes), len(s.gt_boxes)
    parts = [
        _HEADER.pack(s.clip_id, s.video_id, s.seed, _SPLITS.index(s.split), s.phase, s.step, *s.clip.shape),
        struct.pack("<H", len(s.actions)), s.actions.astype(np.uint8).tobytes(),
        struct.pack("<H", n),
        s.boxes.astype("<f4").tobytes(), s.box_classes.astype("<u2").tobytes(), s.box_actions.astype("<u2").tobytes(),
        s.box_conf.astype("<f4").tobytes(), s.box_features.astype("<f4").tobytes(),
        struct.pack("<H", g),
        s.gt_boxes.astype("<f4").tobytes(), s.gt_classes.astype("<u2").tobytes(), s.gt_actions.astype("<u2").tobytes(),
        s.clip.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0, end: int | None = None):
        self.buf = buf
        self.pos = offset
        self.end = len(buf) if end is None else end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated {what}: need {n} bytes, {self.end - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct | str, what: str):
        st = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return st.unpack(self.take(st.size, what))

    def array(self, dtype: str, shape: tuple, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) * dt.itemsize
        return np.frombuffer(self.take(n, what), dtype=dt).reshape(shape)


def _decode_sample(r: _Reader) -> ClipSample:
    clip_id, video_id, seed, split, phase, step, *shape = r.unpack(_HEADER, "sample header")
    if split >= len(_SPLITS):
        raise FormatError(f"unknown split code {split}", r.pos)
    (na,) = r.unpack("<H", "action count")
    actions = r.array("u1", (na,), "actions").astype(np.uint8)
    (n,) = r.unpack("<H", "box count")
    boxes = r.array("<f4", (n, 4), "boxes").astype(np.float32)
    box_classes = r.array("<u2", (n,), "box classes").astype(np.int64)
    box_actions = r.array("<u2", (n,), "box actions").astype(np.int64)
    box_conf = r.array("<f4", (n,), "box confidences").astype(np.float32)
    box_features = r.array("<f4", (n, BOX_DIM), "box features").astype(np.float32)
    (g,) = r.unpack("<H", "ground-truth count")
    gt_boxes = r.array("<f4", (g, 4), "ground-truth boxes").astype(np.float32)
    gt_classes = r.array("<u2", (g,), "ground-truth classes").astype(np.int64)
    gt_actions = r.array("<u2", (g,), "ground-truth actions").astype(np.int64)
    clip = r.array("<f4", tuple(shape), "clip data").astype(np.float32)
    return ClipSample(clip, phase, step, actions, boxes, box_classes, box_actions, box_conf, box_features,
                      gt_boxes, gt_classes, gt_actions, clip_id, video_id, seed, _SPLITS[split])


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    """Write the binary container and its JSON manifest sidecar."""
    path = Path(path)
    tax = json.dumps(dataset.taxonomy.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tax)))
        fh.write(tax)
        fh.write(struct.pack("<I", len(dataset.samples)))
        for s in dataset.samples:
            rec = _encode_sample(s)
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)
    manifest_path(path).write_text(json.dumps(dataset.manifest.to_json(), indent=2, sort_keys=True), encoding="utf-8")


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an HCTD dataset", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (tlen,) = r.unpack("<I", "taxonomy length")
    at = r.pos
    try:
        taxonomy = Taxonomy.from_json(json.loads(r.take(tlen, "taxonomy block").decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"unreadable taxonomy block: {exc}", at) from exc
    (count,) = r.unpack("<I", "sample count")
    samples = []
    for _ in range(count):
        (rlen,) = r.unpack("<I", "record length")
        start = r.pos
        if start + rlen > len(buf):
            raise FormatError(f"truncated record: need {rlen} bytes, {len(buf) - start} left", start)
        sub = _Reader(buf, start, start + rlen)
        samples.append(_decode_sample(sub))
        if sub.pos != start + rlen:
            raise FormatError(f"record length {rlen} disagrees with decoded size {sub.pos - start}", start)
        r.pos = start + rlen
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = DatasetManifest.from_json(json.loads(mpath.read_text(encoding="utf-8")))
    else:
        raise DataError(f"missing manifest sidecar {mpath}")
    return Dataset(taxonomy, samples, manifest)
