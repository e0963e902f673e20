"""Training loop, evaluation, checkpoints, and the gradcheck / paramcount reports."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .adapters import FreezePlan, apply_freeze, count_params
from .config import RunConfig
from .errors import ConfigError, DataError, FormatError, NumericalError
from .hram import TaskId
from .layers import make_rng
from .metrics import (Detection, GroundTruth, MetricsReport, TaskMetrics, accuracy, balanced_accuracy,
                      map_classification, map_detection, per_class_ap, recall)
from .model import HCTModel
from .objectives import Labels, inverse_frequency_weights, supervised_losses, total_loss
from .optim import AdamW, cosine_warmup_lr
from .synthdata import ClipSample, Dataset, Taxonomy, class_frequencies, generate_clip, sample_taxonomy

CKPT_MAGIC = b"HCTC"
CKPT_VERSION = 1
LOSS_KEYS = {TaskId.PHASE: "L_p", TaskId.STEP: "L_s", TaskId.ACTION: "L_a", TaskId.INSTRUMENT: "L_t"}


# -- model construction ------------------------------------------------------------
def build_model(cfg: RunConfig, taxonomy: Taxonomy, train_samples: Sequence[ClipSample] | None = None) -> HCTModel:
    """Model for ``taxonomy``, class weights from ``train_samples``, freeze plan applied."""
    with T.default_dtype(cfg.dtype):
        model = HCTModel(cfg.model_config(taxonomy.class_counts()), seed=cfg.seed)
    if train_samples is not None and cfg.loss.class_weights == "inverse_frequency":
        freq = class_frequencies(train_samples, taxonomy)
        model.heads.set_class_weights({TaskId.parse(k): inverse_frequency_weights(v) for k, v in freq.items()})
    apply_freeze(model, cfg.freeze_plan())
    return model


@dataclass
class Batch:
    clips: np.ndarray
    boxes: list
    labels: Labels
    samples: list


def collate(samples: Sequence[ClipSample], dtype) -> Batch:
    clips = np.stack([s.clip for s in samples]).astype(dtype)
    labels = Labels(
        phase=np.array([s.phase for s in samples], dtype=np.int64),
        step=np.array([s.step for s in samples], dtype=np.int64),
        action=np.stack([s.actions for s in samples]).astype(np.float64),
        instrument=np.concatenate([s.box_classes for s in samples]).astype(np.int64),
        clip_ids=np.array([s.clip_id for s in samples]),
    )
    return Batch(clips, [s.box_features for s in samples], labels, list(samples))


def batches(samples: Sequence[ClipSample], size: int, order: np.ndarray | None = None,
            min_size: int = 1) -> list[list[ClipSample]]:
    idx = np.arange(len(samples)) if order is None else order
    out = [[samples[i] for i in idx[k:k + size]] for k in range(0, len(idx), size)]
    return [b for b in out if len(b) >= min_size]


def compute_losses(model: HCTModel, batch: Batch, cfg: RunConfig) -> tuple[T.Tensor, dict[str, T.Tensor]]:
    out = model(batch.clips, batch.boxes)
    sup = supervised_losses(model.heads, out.logits, batch.labels)
    icl = model.icl_losses(out)
    total = total_loss(sup, icl, cfg.loss_weights())
    parts = {LOSS_KEYS[t]: v for t, v in sup.items()}
    parts.update(icl)
    parts["L_f"] = total
    return total, parts


def _clip_grads(params, max_norm: float) -> None:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


# -- checkpoints -------------------------------------------------------------------
@dataclass
class Checkpoint:
    config: RunConfig
    taxonomy: Taxonomy
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]
    class_weights: dict[str, list]
    epoch: int
    step: int
    rng_state: dict
    config_hash: str = ""

    def build_model(self) -> HCTModel:
        model = build_model(self.config, self.taxonomy)
        model.load_state_dict(self.params)
        if self.class_weights:
            model.heads.set_class_weights({TaskId.parse(k): np.asarray(v) for k, v in self.class_weights.items()})
        return model


def _arrays_header(arrays: dict[str, np.ndarray], kind: str, offset: int) -> tuple[list, list, int]:
    entries, blobs = [], []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "kind": kind, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return entries, blobs, offset


def save_checkpoint(path: str | Path, cfg: RunConfig, taxonomy: Taxonomy, model: HCTModel, opt: AdamW | None,
                    epoch: int, rng: np.random.Generator | None) -> Path:
    """Magic, version, header length, JSON header, then raw little-endian arrays."""
    entries, blobs, off = _arrays_header(model.state_dict(), "param", 0)
    if opt is not None:
        e2, b2, off = _arrays_header(opt.state_dict(), "moment", off)
        entries += e2
        blobs += b2
    header = {
        "version": CKPT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "taxonomy": taxonomy.to_json(),
        "epoch": int(epoch),
        "step": int(opt.step_count if opt is not None else 0),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "class_weights": {t.value: w.tolist() for t, w in model.heads._class_weights.items()},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path: str | Path, expected: RunConfig | None = None, force: bool = False) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header", len(buf))
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = 16 + hlen
    if start > len(buf):
        raise FormatError("truncated checkpoint header", len(buf))
    try:
        header = json.loads(buf[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", 16) from None
    cfg = RunConfig.from_dict(header["config"])
    if expected is not None and expected.hash() != header["config_hash"] and not force:
        raise ConfigError(f"checkpoint config hash {header['config_hash']} does not match run config "
                          f"{expected.hash()}; pass --force to override")
    params, moments = {}, {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(buf):
            raise FormatError(f"truncated tensor {e['name']}", len(buf))
        arr = np.frombuffer(buf[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        (params if e["kind"] == "param" else moments)[e["name"]] = arr
    return Checkpoint(cfg, Taxonomy.from_json(header["taxonomy"]), params, moments, header["class_weights"],
                      header["epoch"], header["step"], header["rng_state"], header["config_hash"])


# -- training ----------------------------------------------------------------------
@dataclass
class TrainResult:
    model: HCTModel
    optimizer: AdamW
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def train(cfg: RunConfig, dataset: Dataset, out_dir: str | Path | None = None,
          resume: Checkpoint | None = None, on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded-shuffle AdamW training; one JSON line per epoch.

    Non-finite values anywhere in the forward or backward pass abort with
    the epoch and step that produced them.
    """
    train_set = dataset.split("train")
    if not train_set:
        raise DataError("dataset has no training clips")
    _check_taxonomy(cfg, dataset.taxonomy)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    model = build_model(cfg, dataset.taxonomy, train_set)
    opt = AdamW(model.named_parameters(), cfg.optim.lr, cfg.optim.betas, cfg.optim.eps, cfg.optim.weight_decay)
    shuffle = make_rng(cfg.seed + 1)
    start_epoch = 0
    if resume is not None:
        model = resume.build_model()
        opt = AdamW(model.named_parameters(), cfg.optim.lr, cfg.optim.betas, cfg.optim.eps,
                    cfg.optim.weight_decay)
        opt.load_state_dict(resume.moments, resume.step)
        shuffle.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch

    min_size = 2 if model.icl_proj else 1
    steps_per_epoch = len(batches(train_set, cfg.schedule.batch, min_size=min_size))
    if steps_per_epoch == 0:
        raise ConfigError(f"{len(train_set)} training clips cannot fill a batch of >= {min_size}")
    total = cfg.schedule.epochs * steps_per_epoch
    warmup = cfg.schedule.warmup_epochs * steps_per_epoch
    trainable = [p for _, p in model.named_parameters() if p.requires_grad]
    log: list[dict] = []
    log_path = out / "train_log.jsonl"
    ckpt_path = None
    out.mkdir(parents=True, exist_ok=True)
    if resume is None and log_path.exists():
        log_path.unlink()

    with T.default_dtype(cfg.dtype):
        for epoch in range(start_epoch, cfg.schedule.epochs):
            order = shuffle.permutation(len(train_set))
            sums: dict[str, float] = {}
            lr = 0.0
            for k, chunk in enumerate(batches(train_set, cfg.schedule.batch, order, min_size)):
                step = epoch * steps_per_epoch + k
                lr = cosine_warmup_lr(step, total, warmup, cfg.optim.lr)
                batch = collate(chunk, T.get_default_dtype())
                opt.zero_grad()
                try:
                    loss, parts = compute_losses(model, batch, cfg)
                    if not np.isfinite(loss.item()):
                        raise NumericalError(f"loss is {loss.item()}")
                    T.backward(loss)
                except NumericalError as exc:
                    raise NumericalError(f"non-finite value at epoch {epoch + 1} step {k + 1}: {exc}") from exc
                if cfg.optim.grad_clip > 0:
                    _clip_grads(trainable, cfg.optim.grad_clip)
                opt.step(lr)
                for name, v in parts.items():
                    sums[name] = sums.get(name, 0.0) + v.item()
            record = {"epoch": epoch + 1, "lr": lr, "steps": steps_per_epoch}
            record.update({name: s / steps_per_epoch for name, s in sums.items()})
            log.append(record)
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if on_log is not None:
                on_log(record)
            last = epoch + 1 == cfg.schedule.epochs
            if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                name = "final.ckpt" if last else f"epoch{epoch + 1:03d}.ckpt"
                ckpt_path = save_checkpoint(out / name, cfg, dataset.taxonomy, model, opt, epoch + 1, shuffle)
    return TrainResult(model, opt, log, ckpt_path)


def _check_taxonomy(cfg: RunConfig, taxonomy: Taxonomy, reference: Taxonomy | None = None) -> None:
    if reference is not None and reference != taxonomy:
        raise ConfigError("dataset taxonomy differs from the checkpoint's taxonomy")


# -- evaluation --------------------------------------------------------------------
def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _single_label_metrics(probs: np.ndarray, labels: np.ndarray) -> TaskMetrics:
    preds = probs.argmax(axis=1)
    onehot = np.zeros_like(probs, dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    return TaskMetrics(map_classification(probs, labels), accuracy(preds, labels), balanced_accuracy(preds, labels),
                       recall(probs, onehot), per_class_ap(probs, onehot).tolist())


def _multi_label_metrics(probs: np.ndarray, targets: np.ndarray) -> TaskMetrics:
    targets = targets.astype(bool)
    pred = probs >= 0.5
    bacc = []
    for c in range(targets.shape[1]):
        parts = [np.mean(pred[targets[:, c], c]) if targets[:, c].any() else None,
                 np.mean(~pred[~targets[:, c], c]) if (~targets[:, c]).any() else None]
        parts = [p for p in parts if p is not None]
        bacc.append(np.mean(parts))
    ap = per_class_ap(probs, targets)
    return TaskMetrics(float(np.nanmean(ap)), float(np.mean(pred == targets)), float(np.mean(bacc)),
                       recall(probs, targets), ap.tolist())


def predict(model: HCTModel, samples: Sequence[ClipSample], batch_size: int, dtype) -> dict[str, np.ndarray]:
    """Class probabilities for every clip (and every detector box)."""
    phase, step, action, inst = [], [], [], []
    with T.no_grad(), T.default_dtype(dtype):
        for chunk in batches(samples, batch_size):
            b = collate(chunk, T.get_default_dtype())
            out = model(b.clips, b.boxes)
            phase.append(_softmax(out.logits[TaskId.PHASE].data))
            step.append(_softmax(out.logits[TaskId.STEP].data))
            action.append(_sigmoid(out.logits[TaskId.ACTION].data))
            inst.append(_softmax(out.logits[TaskId.INSTRUMENT].data))
    return {"phase": np.concatenate(phase), "step": np.concatenate(step), "action": np.concatenate(action),
            "instrument": np.concatenate(inst)}


def detection_map(samples: Sequence[ClipSample], probs: dict[str, np.ndarray], thr: float = 0.5) -> dict[str, float]:
    """mAP@thr for instruments and actions over detector boxes.

    An instrument detection is (box, class) scored by the box's class
    probability. An action detection is (box, action) scored by the clip's
    action probability, since actions are predicted per clip.
    """
    inst_preds, act_preds, inst_gt, act_gt = [], [], [], []
    row = 0
    for i, s in enumerate(samples):
        for k, box in enumerate(s.boxes):
            box = tuple(float(v) for v in box)
            p = probs["instrument"][row + k]
            inst_preds.extend(Detection(i, box, c, float(p[c])) for c in range(len(p)))
            pa = probs["action"][i]
            act_preds.extend(Detection(i, box, a, float(pa[a])) for a in range(len(pa)))
        row += len(s.boxes)
        for box, c, a in zip(s.gt_boxes, s.gt_classes, s.gt_actions):
            box = tuple(float(v) for v in box)
            inst_gt.append(GroundTruth(i, box, int(c)))
            act_gt.append(GroundTruth(i, box, int(a)))
    return {"instrument": map_detection(inst_preds, inst_gt, thr), "action": map_detection(act_preds, act_gt, thr)}


def evaluate(model: HCTModel, samples: Sequence[ClipSample], cfg: RunConfig) -> MetricsReport:
    """Side-effect-free evaluation of ``samples``."""
    if not samples:
        raise DataError("no clips to evaluate")
    probs = predict(model, samples, cfg.schedule.batch, cfg.dtype)
    tasks = {
        "phase": _single_label_metrics(probs["phase"], np.array([s.phase for s in samples])),
        "step": _single_label_metrics(probs["step"], np.array([s.step for s in samples])),
        "instrument": _single_label_metrics(probs["instrument"], np.concatenate([s.box_classes for s in samples])),
        "action": _multi_label_metrics(probs["action"], np.stack([s.actions for s in samples])),
    }
    total, tunable, frac = count_params(model)
    return MetricsReport(tasks, detection_map(samples, probs), {"total": total, "tunable": tunable, "fraction": frac},
                         len(samples))


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Dataset, split: str = "test") -> MetricsReport:
    if ckpt.taxonomy != dataset.taxonomy:
        raise ConfigError("dataset taxonomy differs from the checkpoint's taxonomy")
    samples = dataset.split(split)
    if not samples:
        raise DataError(f"dataset has no {split!r} clips")
    return evaluate(ckpt.build_model(), samples, ckpt.config)


# -- reports -----------------------------------------------------------------------
def tiny_config(base: RunConfig | None = None) -> RunConfig:
    """Single-block, C=12 model on 4x8x8 clips (8 tokens) for finite-difference checks."""
    cfg = RunConfig.from_dict(base.to_dict()) if base is not None else RunConfig()
    cfg.dtype = "float64"
    cfg.model.clip_len, cfg.model.frame_size = 4, [8, 8]
    cfg.model.channels, cfg.model.heads, cfg.model.mlp_ratio = 12, 2, 2
    cfg.model.q_strides = [[1, 1, 1]]
    cfg.adapters.temporal = cfg.adapters.spatial = True
    cfg.adapters.freeze, cfg.adapters.unfreeze = [], []
    cfg.schedule.batch = 2
    return cfg.validate()


def gradcheck_cmd(cfg: RunConfig | None = None, max_coords: int = 6, eps: float = 1e-4) -> dict:
    """Finite-difference check of every parameter tensor of a tiny full model.

    Adapter up-projections start at zero, which would hide the gradient of
    everything behind them, and the small default query/key weights give
    near-uniform attention whose gradients (~1e-8) drown in cancellation
    error. Both are re-drawn at a larger scale before checking.
    """
    cfg = tiny_config(cfg)
    taxonomy = sample_taxonomy(cfg.seed, (3, 6, 5, 4))
    # clips need detector boxes, or the instrument contrastive path has nothing to check
    samples, seed = [], 100
    while len(samples) < 2:
        s = generate_clip(taxonomy, seed, 0.1, len(samples) % 6, tuple(cfg.model.frame_size), 3,
                          cfg.model.clip_len, clip_id=len(samples))
        if len(s.boxes):
            samples.append(s)
        seed += 1
    model = build_model(cfg, taxonomy, samples)
    rng = make_rng(cfg.seed + 7)
    with T.default_dtype("float64"):
        for name, p in model.named_parameters():
            if name.endswith(("up.weight", ".q.weight", ".k.weight")):
                p.data = rng.normal(0.0, 0.3, p.shape)
        batch = collate(samples, np.float64)
        named = list(model.named_parameters())

        def f(*_):
            return compute_losses(model, batch, cfg)[0]

        worst, per = 0.0, {}
        for k, (name, p) in enumerate(named):
            others = [q for n, q in named if n != name]
            saved = [q.requires_grad for q in others]
            for q in others:
                q.requires_grad = False
            try:
                err = T.grad_check(f, [p], eps=eps, max_coords=max_coords, seed=k)
            finally:
                for q, r in zip(others, saved):
                    q.requires_grad = r
            per[name] = err
            worst = max(worst, err)
    return {"max_rel_err": worst, "tensors": len(per), "per_tensor": per,
            "coords_per_tensor": max_coords, "passed": worst < 1e-4}


PARAMCOUNT_ROWS = ("full", "w/o ST", "w/ S", "w/ T", "w/ ST")


def paramcount_cmd(cfg: RunConfig) -> list[dict]:
    """Total / tunable / fraction for full fine-tuning and frozen-trunk adapter variants."""
    taxonomy = sample_taxonomy(0)
    rows = []
    for row in PARAMCOUNT_ROWS:
        c = RunConfig.from_dict(cfg.to_dict())
        c.adapters.temporal = row in ("w/ T", "w/ ST")
        c.adapters.spatial = row in ("w/ S", "w/ ST")
        c.adapters.freeze, c.adapters.unfreeze = [], []
        model = build_model(c, taxonomy)
        plan = FreezePlan() if row == "full" else FreezePlan.backbone()
        total, tunable, frac = count_params(model, plan)
        rows.append({"config": row, "total": total, "tunable": tunable, "fraction": frac})
    return rows


def format_paramcount(rows: list[dict]) -> str:
    lines = [f"{'Config':<10}{'Total':>10}{'Tunable':>10}{'Fraction':>10}", "-" * 40]
    lines += [f"{r['config']:<10}{r['total']:>10}{r['tunable']:>10}{100 * r['fraction']:>9.2f}%" for r in rows]
    return "\n".join(lines)
