"""Referee metrics for generated clips.

The probe is a small convolutional classifier trained on the labelled
synthetic corpus.  It reads generated clips only as image files, so it never
depends on generator internals.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import CompatibilityError, ContractError, DataError
from .media import read_frame
from .nn import Conv2d, Linear, Module
from .optim import AdamW
from .scenes import STREETSCAPES, TRAFFIC_LEVELS, WEATHERS, attributes_from_tags, load_clips
from .tensor import Tensor
from .text import TagVocabulary

logger = logging.getLogger(__name__)

ATTRIBUTES = {"weather": WEATHERS, "traffic": TRAFFIC_LEVELS, "streetscape": STREETSCAPES}
CHANCE = {k: 1.0 / len(v) for k, v in ATTRIBUTES.items()}


def consistency(frames) -> float:
    """Mean absolute difference between consecutive frames, on a [0, 1] pixel scale.

    Byte frames are divided by 255; float frames are taken to span [-1, 1].
    """
    frames = np.asarray(frames)
    if frames.shape[0] < 2:
        raise ContractError("temporal consistency needs at least two frames")
    if frames.dtype == np.uint8:
        diff = np.abs(np.diff(frames.astype(np.int64), axis=0))
        return float(np.mean(diff)) / 255.0
    diff = np.abs(np.diff(frames.astype(np.float64), axis=0))
    return float(np.mean(diff)) / 2.0


def wrap_pad(x: Tensor) -> Tensor:
    """Pad by one pixel: circular across width, since vehicles wrap around, zeros across height."""
    x = T.concat([T.getitem(x, (Ellipsis, slice(-1, None))), x, T.getitem(x, (Ellipsis, slice(0, 1)))], axis=3)
    b, c, _, w = x.shape
    zeros = Tensor(np.zeros((b, c, 1, w), x.dtype))
    return T.concat([zeros, x, zeros], axis=2)


class ProbeClassifier(Module):
    def __init__(self, rng, width: int = 16, rows: int = 8, dtype=np.float32):
        self.conv1 = Conv2d(3, width, 3, rng, padding=0, dtype=dtype)
        self.conv2 = Conv2d(width, 2 * width, 3, rng, stride=2, padding=0, dtype=dtype)
        self.conv3 = Conv2d(2 * width, 2 * width, 3, rng, stride=2, padding=0, dtype=dtype)
        feat = 4 * width + 2 * width * rows
        self.heads = {k: Linear(feat, len(v), rng, dtype=dtype) for k, v in ATTRIBUTES.items()}

    def features(self, x: Tensor) -> Tensor:
        h = T.silu(self.conv1(wrap_pad(x)))
        h = T.silu(self.conv2(wrap_pad(h)))
        h = T.silu(self.conv3(wrap_pad(h)))
        # mean and max pooling: the max keeps small bright sprites visible
        mean = T.mean(h, axis=(2, 3))
        b, c = h.shape[:2]
        flat = T.reshape(h, (b, c, h.shape[2] * h.shape[3]))
        peak = T.getitem(flat, (np.arange(b)[:, None], np.arange(c)[None, :], np.argmax(flat.data, axis=2)))
        # lanes are horizontal bands, so a per-row profile helps with counting
        profile = T.reshape(T.mean(h, axis=3), (b, c * h.shape[2]))
        return T.concat([mean, peak, profile], axis=1)

    def forward(self, x: Tensor) -> dict:
        f = self.features(x)
        return {k: head(f) for k, head in self.heads.items()}

    def predict(self, images: np.ndarray, batch: int = 256) -> dict:
        out = {k: [] for k in ATTRIBUTES}
        with T.no_grad():
            for i in range(0, len(images), batch):
                logits = self(Tensor(images[i:i + batch]))
                for k in ATTRIBUTES:
                    out[k].append(np.argmax(logits[k].data, axis=1))
        return {k: np.concatenate(v) if v else np.zeros(0, np.int64) for k, v in out.items()}


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    shift = logits.data.max(axis=1, keepdims=True)
    z = T.sub(logits, Tensor(shift, dtype=logits.dtype))
    lse = T.log(T.sum_(T.exp(z), axis=1))
    picked = T.getitem(z, (np.arange(len(labels)), labels))
    return T.mean(T.sub(lse, picked))


def labels_of(records) -> dict:
    out = {k: [] for k in ATTRIBUTES}
    for r in records:
        attrs = attributes_from_tags(r.tags)
        for k, values in ATTRIBUTES.items():
            if attrs[k] is None:
                raise DataError(f"{r.clip_id}: no {k} tag, cannot label it for the probe")
            out[k].append(values.index(attrs[k]))
    return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}


@dataclass
class Probe:
    model: ProbeClassifier
    vocab_sha256: str
    val_accuracy: dict

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(self.model.state_dict(), {"type": "PROBE", "vocab_sha256": self.vocab_sha256,
                                                    "val_accuracy": self.val_accuracy})

    @classmethod
    def load(cls, path) -> "Probe":
        ckpt = Checkpoint.load(path, expect_type="PROBE")
        width = ckpt.tensors["conv1.weight"].shape[0]
        rows = (ckpt.tensors["heads.weather.weight"].shape[1] - 4 * width) // (2 * width)
        model = ProbeClassifier(np.random.default_rng(0), width, rows)
        model.load_state_dict(ckpt.tensors)
        return cls(model, ckpt.metadata["vocab_sha256"], ckpt.metadata.get("val_accuracy", {}))


def _per_frame(arrays, records):
    frames = arrays.frames
    n, f = frames.shape[:2]
    x = frames.reshape((n * f,) + frames.shape[2:])
    labels = {k: np.repeat(v, f) for k, v in labels_of(records).items()}
    return x, labels


def accuracy(pred: dict, labels: dict) -> dict:
    return {k: {"accuracy": float(np.mean(pred[k] == labels[k])) if len(labels[k]) else float("nan"),
                "n": int(len(labels[k]))} for k in ATTRIBUTES}


def train_probe(manifest, epochs: int = 20, lr: float = 3e-3, batch_size: int = 32, seed: int = 0,
                width: int = 16) -> Probe:
    manifest = Path(manifest)
    clips = load_clips(manifest, with_depth=False)
    vocab_path = manifest.parent / "vocab.txt"
    vocab = TagVocabulary.load(vocab_path) if vocab_path.exists() else TagVocabulary.reference()
    train, val = clips.split("train"), clips.split("val")
    x, y = _per_frame(train, train.records)
    rng = np.random.default_rng(seed)
    model = ProbeClassifier(rng, width, rows=x.shape[2] // 4)
    opt = AdamW({"probe": list(model.named_parameters())})
    for epoch in range(epochs):
        perm = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), batch_size):
            idx = np.sort(perm[s:s + batch_size])
            logits = model(Tensor(x[idx]))
            loss = logits_loss(logits, {k: v[idx] for k, v in y.items()})
            loss.backward()
            opt.step({"probe": lr})
            opt.zero_grad()
            total += loss.item() * len(idx)
        logger.info("probe epoch %d: loss %.4f", epoch, total / len(x))
    if len(val):
        vx, vy = _per_frame(val, val.records)
        val_acc = accuracy(model.predict(vx), vy)
    else:
        val_acc = {}
    return Probe(model, vocab.digest(), val_acc)


def logits_loss(logits: dict, labels: dict) -> Tensor:
    losses = [cross_entropy(logits[k], labels[k]) for k in ATTRIBUTES]
    return T.add(T.add(losses[0], losses[1]), losses[2])


# -- generated clip folders -------------------------------------------------------------------

INDEX = "index.jsonl"


def write_index(root, entries) -> Path:
    """``entries``: dicts with ``dir`` (relative clip folder) and ``prompt``."""
    path = Path(root) / INDEX
    path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries), encoding="utf-8")
    return path


def read_clip_dir(root) -> list[tuple[dict, np.ndarray]]:
    """Clips listed in ``index.jsonl`` as ``(entry, frames [F, H, W, 3] uint8)``."""
    root = Path(root)
    index = root / INDEX
    if not index.exists():
        raise DataError(f"{root} has no {INDEX}")
    out = []
    for line in index.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        folder = root / entry["dir"]
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".ppm", ".png") and p.stem.startswith("frame"))
        if not files:
            raise DataError(f"{folder}: no frame files")
        out.append((entry, np.stack([read_frame(p) for p in files])))
    return out


def eval_probe(clip_root, probe: Probe, vocab: TagVocabulary) -> dict:
    if probe.vocab_sha256 != vocab.digest():
        raise CompatibilityError("probe was trained against a different tag vocabulary")
    clips = read_clip_dir(clip_root)
    images, labels = [], {k: [] for k in ATTRIBUTES}
    for entry, frames in clips:
        attrs = attributes_from_tags(t.strip() for t in entry["prompt"].split(","))
        for k, values in ATTRIBUTES.items():
            if attrs[k] is None:
                raise DataError(f"prompt {entry['prompt']!r} has no {k} tag")
            labels[k].extend([values.index(attrs[k])] * len(frames))
        images.append(frames.transpose(0, 3, 1, 2).astype(np.float32) / 127.5 - 1.0)
    if not images:
        raise DataError(f"{clip_root}: no clips")
    pred = probe.model.predict(np.concatenate(images))
    return accuracy(pred, {k: np.asarray(v) for k, v in labels.items()})


def eval_consistency(clip_root, baseline_root=None) -> dict:
    clips = read_clip_dir(clip_root)
    scores = {e["dir"]: consistency(f) for e, f in clips}
    report = {"mean": float(np.mean(list(scores.values()))), "n": len(scores), "per_clip": scores}
    if baseline_root is not None:
        base = {e["dir"]: consistency(f) for e, f in read_clip_dir(baseline_root)}
        shared = sorted(set(scores) & set(base))
        if not shared:
            raise DataError("no clip folders shared between the two sample sets")
        wins = sum(scores[k] < base[k] for k in shared)
        report["baseline_mean"] = float(np.mean([base[k] for k in shared]))
        report["paired"] = len(shared)
        report["fraction_lower"] = wins / len(shared)
    return report
