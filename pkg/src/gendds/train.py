"""Staged training: codec, base diffusion, LoRA, control branch, temporal blocks.

Every stage reads the corpus manifest plus the checkpoints of the stages it
depends on, and writes its own directory holding the checkpoint, a metrics
CSV and a JSON summary.  Randomness comes from one generator seeded by the
plan, so a stage is a pure function of (plan, inputs).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lora as lora_mod
from . import tensor as T
from .checkpoint import Checkpoint, content_hash
from .codec import IdentityCodec, LatentCodec, train_codec
from .control import ControlBranch, build_control
from .diffusion import NoiseSchedule, diffusion_loss
from .errors import CompatibilityError, ConfigurationError, ContractError, NumericError, PlanError
from .optim import AdamW, warmup_constant
from .pipeline import DiffusionModel, TextConfig
from .scenes import ClipArrays, load_clips
from .temporal import VideoModel, attach_temporal
from .text import TagVocabulary, null_ids, tokenize
from .unet import UNetConfig

logger = logging.getLogger(__name__)

STAGES = ("codec", "base", "lora", "control", "temporal")
DEPENDENCIES = {"codec": (), "base": ("codec",), "lora": ("codec", "base"), "control": ("codec", "base"),
                "temporal": ("codec", "base")}
METRICS_HEADER = ("step", "stage", "loss", "lr_unet", "lr_text", "wall_ms")


@dataclass
class TrainPlan:
    stage: str
    epochs: int = 10
    batch_size: int = 16
    lr_unet: float = 1e-4
    lr_text: float | None = None
    prompt_dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    grad_accum: int = 1
    warmup: float = 0.05
    weight_decay: float = 0.0
    val_batch: int = 256
    # lora
    rank: int = 8
    alpha: float = 8.0
    targets: list = field(default_factory=lambda: list(lora_mod.DEFAULT_TARGETS))
    train_text: bool = False
    filter_tags: list = field(default_factory=list)
    # temporal
    frames: int = 8
    heads: int = 4
    sites: list | str | None = None  # None: attention levels; "all": every site
    # codec
    latent_channels: int = 4
    patience: int = 3
    pixel_space: bool = False

    def __post_init__(self):
        if self.lr_text is None:
            self.lr_text = self.lr_unet / 2
        self.validate()

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.lr_unet <= 0 or self.lr_text <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigurationError("need epochs >= 0, batch_size >= 1 and grad_accum >= 1")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ConfigurationError("prompt dropout must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsLog:
    """Append-only CSV ``step,stage,loss,lr_unet,lr_text,wall_ms``."""

    def __init__(self, path, stage: str):
        self.path = Path(path)
        self.stage = stage
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._t0 = time.perf_counter()
        self.losses = []

    def __call__(self, step: int, loss: float, lr_unet: float, lr_text: float = 0.0):
        wall = int(round((time.perf_counter() - self._t0) * 1000))
        self._writer.writerow([step, self.stage, repr(float(loss)), repr(float(lr_unet)), repr(float(lr_text)), wall])
        self.losses.append(float(loss))

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class StageResult:
    checkpoint: Path
    metrics: Path
    summary: dict


def frozen_hash(params) -> str:
    return content_hash({n: p.data for n, p in params})


def fit(plan: TrainPlan, groups: dict, base_lrs: dict, n_items: int, loss_fn, log: MetricsLog,
        on_epoch=None, snapshot=None, last_good_path=None) -> int:
    """Shared optimisation loop; returns the number of optimizer steps taken.

    ``loss_fn(indices, rng)`` builds the loss graph for a batch.  On a
    non-finite loss or gradient the weights from before the failing step are
    written to ``last_good_path`` (via ``snapshot``) and :class:`NumericError`
    is raised.
    """
    if n_items == 0:
        raise PlanError(f"{plan.stage}: no training items")
    rng = np.random.default_rng(plan.seed)
    opt = AdamW(groups, weight_decay=plan.weight_decay)
    per_step = plan.batch_size * plan.grad_accum
    steps_per_epoch = math.ceil(n_items / per_step)
    total = steps_per_epoch * plan.epochs
    step = 0
    for epoch in range(plan.epochs):
        perm = rng.permutation(n_items)
        for s in range(steps_per_epoch):
            chunk = perm[s * per_step:(s + 1) * per_step]
            lrs = {k: warmup_constant(v, step, total, plan.warmup) for k, v in base_lrs.items()}
            good = snapshot() if snapshot is not None else None
            total_loss = 0.0
            try:
                micro = [chunk[i:i + plan.batch_size] for i in range(0, len(chunk), plan.batch_size)]
                for idx in micro:
                    loss = loss_fn(np.sort(idx), rng)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericError(f"{plan.stage}: loss became {value} at step {step}")
                    (loss * (1.0 / len(micro)) if len(micro) > 1 else loss).backward()
                    total_loss += value / len(micro)
                opt.step({k: lrs[k] for k in opt.groups})
            except NumericError as exc:
                if good is not None and last_good_path is not None:
                    good.save(last_good_path)
                    raise NumericError(f"{exc}; last good weights kept at {last_good_path}") from None
                raise
            finally:
                opt.zero_grad()
                T.current_tape().reset()
            log(step, total_loss, lrs.get("unet", 0.0), lrs.get("text", 0.0))
            step += 1
        if on_epoch is not None:
            on_epoch(epoch)
    return step


# -- inputs ----------------------------------------------------------------------------------

@dataclass
class LatentCorpus:
    latents: np.ndarray       # [N, F, c, h, w]
    ids: np.ndarray           # [N, M]
    depths: np.ndarray | None  # [N, F, 1, H, W]
    records: list

    def split(self, name: str) -> "LatentCorpus":
        idx = [i for i, r in enumerate(self.records) if r.split == name]
        return LatentCorpus(self.latents[idx], self.ids[idx], None if self.depths is None else self.depths[idx],
                            [self.records[i] for i in idx])

    def filtered(self, tags) -> "LatentCorpus":
        if not tags:
            return self
        idx = [i for i, r in enumerate(self.records) if set(tags) <= set(r.tags)]
        return LatentCorpus(self.latents[idx], self.ids[idx], None if self.depths is None else self.depths[idx],
                            [self.records[i] for i in idx])

    def __len__(self):
        return len(self.records)


def prompt_of(tags) -> str:
    return ", ".join(tags)


def encode_corpus(clips: ClipArrays, codec, vocab: TagVocabulary, max_len: int = 16) -> LatentCorpus:
    n, f = clips.frames.shape[:2]
    flat = clips.frames.reshape((n * f,) + clips.frames.shape[2:])
    lat = codec.encode_array(flat)
    lat = lat.reshape((n, f) + lat.shape[1:]).astype(np.float32)
    ids = np.stack([tokenize(prompt_of(r.tags), vocab, max_len).ids for r in clips.records])
    return LatentCorpus(lat, ids, clips.depths, clips.records)


def load_codec(path, pixel_space: bool = False):
    if pixel_space:
        return IdentityCodec()
    if not Path(path).exists():
        raise PlanError(f"codec checkpoint {path} not found; run the codec stage first")
    return LatentCodec.from_checkpoint(Checkpoint.load(path, expect_type="CODEC"))


def load_base(path) -> tuple[DiffusionModel, Checkpoint]:
    if not Path(path).exists():
        raise PlanError(f"base checkpoint {path} not found; run the base stage first")
    ckpt = Checkpoint.load(path, expect_type="BASE")
    return DiffusionModel.from_checkpoint(ckpt), ckpt


def apply_dropout(ids: np.ndarray, rate: float, rng) -> np.ndarray:
    drop = rng.random(len(ids)) < rate
    out = ids.copy()
    out[drop] = null_ids(ids.shape[1])
    return out


def _write_summary(out_dir: Path, summary: dict) -> None:
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _finish(out_dir, stage, ckpt: Checkpoint, log: MetricsLog, summary: dict) -> StageResult:
    log.close()
    path = ckpt.save(Path(out_dir) / f"{stage}.gdds")
    summary = dict(summary, checkpoint_sha256=ckpt.content_hash(), steps=len(log.losses))
    _write_summary(Path(out_dir), summary)
    return StageResult(path, log.path, summary)


def _smoothed(values, window: int = 3) -> float:
    tail = values[-window:]
    return float(np.mean(tail)) if tail else float("nan")


# -- stages -------------------------------------------------------------------------------------

def run_codec(plan: TrainPlan, manifest, out_dir) -> StageResult:
    out_dir = Path(out_dir)
    clips = load_clips(manifest, with_depth=False)
    def frames_of(split):
        arr = clips.split(split).frames
        return arr.reshape((-1,) + arr.shape[2:])

    log = MetricsLog(out_dir / "metrics.csv", "codec")
    codec, report = train_codec(frames_of("train"), frames_of("val"), epochs=plan.epochs, lr=plan.lr_unet,
                                batch_size=plan.batch_size, seed=plan.seed, latent_channels=plan.latent_channels,
                                patience=plan.patience, log=lambda s, l, lr: log(s, l, lr, 0.0))
    ckpt = codec.to_checkpoint({"stage": "codec", "plan": plan.to_dict()})
    summary = {"stage": "codec", "train_mse": report.train_mse, "val_mse": report.val_mse,
               "plateau": report.plateau, "scale_factor": codec.scale_factor}
    return _finish(out_dir, "codec", ckpt, log, summary)


def validation_loss(unet, latents: np.ndarray, cond, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule,
                    batch: int = 64) -> float:
    """Mean noise-prediction error on a fixed batch; a pure function of weights and batch."""
    total = 0.0
    with T.no_grad():
        for i in range(0, len(latents), batch):
            sl = slice(i, i + batch)
            sub = type(cond)(T.Tensor(cond.matrix.data[sl]), cond.mask[sl])
            loss = diffusion_loss(latents[sl], t[sl], eps[sl], unet, sub, schedule)
            total += loss.item() * len(latents[sl])
    return total / len(latents)


def _fixed_val(corpus: LatentCorpus, plan: TrainPlan, schedule: NoiseSchedule):
    val = corpus.split("val")
    if len(val) == 0:
        val = corpus.split("train")
    f = val.latents.shape[1]
    x = val.latents.reshape((-1,) + val.latents.shape[2:])
    ids = np.repeat(val.ids, f, axis=0)
    rng = np.random.default_rng([plan.seed, 7919])
    pick = np.sort(rng.permutation(len(x))[:plan.val_batch])
    t = rng.integers(0, schedule.steps, len(pick))
    eps = rng.standard_normal((len(pick),) + x.shape[1:]).astype(np.float32)
    return x[pick], ids[pick], t, eps


def run_base(plan: TrainPlan, manifest, codec_path, out_dir, unet_config: UNetConfig, text_config: TextConfig,
             schedule: NoiseSchedule | None = None) -> StageResult:
    out_dir = Path(out_dir)
    schedule = schedule or NoiseSchedule()
    codec = load_codec(codec_path, plan.pixel_space)
    if unet_config.latent_channels != codec.latent_channels:
        raise PlanError(f"U-Net expects {unet_config.latent_channels} latent channels, "
                        f"codec produces {codec.latent_channels}")
    manifest = Path(manifest)
    vocab_path = manifest.parent / "vocab.txt"
    vocab = TagVocabulary.load(vocab_path) if vocab_path.exists() else TagVocabulary.reference()
    corpus = encode_corpus(load_clips(manifest, with_depth=False), codec, vocab, text_config.max_len)
    train = corpus.split("train")
    f = train.latents.shape[1]
    x_all = train.latents.reshape((-1,) + train.latents.shape[2:])
    ids_all = np.repeat(train.ids, f, axis=0)
    model = DiffusionModel(unet_config, text_config, vocab, np.random.default_rng(plan.seed))
    model._unconditional = plan.prompt_dropout >= 1.0
    vx, vids, vt, veps = _fixed_val(corpus, plan, schedule)
    log = MetricsLog(out_dir / "metrics.csv", "base")
    val_history = []

    def loss_fn(idx, rng):
        x0 = x_all[idx]
        t = rng.integers(0, schedule.steps, len(idx))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        ids = apply_dropout(ids_all[idx], plan.prompt_dropout, rng)
        return diffusion_loss(x0, t, eps, model.unet, model.text(ids), schedule)

    def on_epoch(epoch):
        with T.no_grad():
            cond = model.text(vids)
        val_history.append(validation_loss(model.unet, vx, cond, vt, veps, schedule))
        logger.info("base epoch %d: validation loss %.4f", epoch, val_history[-1])
        if plan.checkpoint_every and (epoch + 1) % plan.checkpoint_every == 0 and epoch + 1 < plan.epochs:
            model.to_checkpoint(meta(epoch + 1)).save(out_dir / f"base_epoch{epoch + 1:03d}.gdds")

    def meta(epochs_done):
        return {"stage": "base", "plan": plan.to_dict(), "epochs_done": epochs_done,
                "codec_sha256": _codec_hash(codec), "schedule": schedule.to_dict()}

    groups = {"unet": list(model.unet.named_parameters("unet.")), "text": list(model.text.named_parameters("text."))}
    fit(plan, groups, {"unet": plan.lr_unet, "text": plan.lr_text}, len(x_all), loss_fn, log, on_epoch,
        snapshot=lambda: model.to_checkpoint(meta(None)), last_good_path=out_dir / "base.last_good.gdds")
    summary = {"stage": "base", "val_loss": val_history, "smoothed_val_loss": _smoothed(val_history),
               "train_items": len(x_all)}
    return _finish(out_dir, "base", model.to_checkpoint(meta(plan.epochs)), log, summary)


def _codec_hash(codec) -> str | None:
    return content_hash(codec.state_dict()) if isinstance(codec, LatentCodec) else None


def _stage_inputs(plan, manifest, codec_path, base_path, with_depth=False):
    codec = load_codec(codec_path, plan.pixel_space)
    model, base_ckpt = load_base(base_path)
    if model.unet.config.latent_channels != codec.latent_channels:
        raise PlanError("base model and codec disagree on latent channels")
    clips = load_clips(manifest, with_depth=with_depth)
    if with_depth and clips.depths is None:
        raise PlanError("control stage needs depth maps for every clip in the manifest")
    corpus = encode_corpus(clips, codec, model.vocab, model.text.max_len)
    return codec, model, base_ckpt, corpus


def run_lora(plan: TrainPlan, manifest, codec_path, base_path, out_dir,
             schedule: NoiseSchedule | None = None) -> StageResult:
    out_dir = Path(out_dir)
    schedule = schedule or NoiseSchedule()
    codec, model, base_ckpt, corpus = _stage_inputs(plan, manifest, codec_path, base_path)
    train = corpus.split("train").filtered(plan.filter_tags)
    if len(train) == 0:
        raise PlanError(f"no training clips carry tags {plan.filter_tags}")
    base_hash = model.base_hash()
    unet_before = frozen_hash(model.unet.named_parameters())
    adapters = lora_mod.attach(model, plan.targets, plan.rank, plan.alpha, np.random.default_rng(plan.seed),
                               metadata={"base_hash": base_hash, "vocab_sha256": model.vocab.digest()})
    groups = {"unet": list(adapters.named_parameters())}
    if plan.train_text:
        model.text.unfreeze()
        groups["text"] = list(model.text.named_parameters("text."))
    f = train.latents.shape[1]
    x_all = train.latents.reshape((-1,) + train.latents.shape[2:])
    ids_all = np.repeat(train.ids, f, axis=0)
    log = MetricsLog(out_dir / "metrics.csv", "lora")

    def loss_fn(idx, rng):
        x0 = x_all[idx]
        t = rng.integers(0, schedule.steps, len(idx))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        ids = apply_dropout(ids_all[idx], plan.prompt_dropout, rng)
        if plan.train_text:
            cond = model.text(ids)
        else:
            with T.no_grad():
                cond = model.text(ids)
        return diffusion_loss(x0, t, eps, model.unet, cond, schedule)

    def checkpoint():
        ck = adapters.to_checkpoint()
        ck.metadata.update({"stage": "lora", "plan": plan.to_dict()})
        if plan.train_text:
            ck.tensors.update({f"text_encoder.{k}": v for k, v in model.text.state_dict().items()})
        return ck

    fit(plan, groups, {k: (plan.lr_unet if k == "unet" else plan.lr_text) for k in groups}, len(x_all), loss_fn,
        log, snapshot=checkpoint, last_good_path=out_dir / "lora.last_good.gdds")
    if frozen_hash(model.unet.named_parameters()) != unet_before:
        raise ContractError("LoRA training modified frozen U-Net weights")
    summary = {"stage": "lora", "base_hash": base_hash, "adapter_params": adapters.num_parameters(),
               "targets": len(adapters), "train_items": len(x_all)}
    return _finish(out_dir, "lora", checkpoint(), log, summary)


def run_control(plan: TrainPlan, manifest, codec_path, base_path, out_dir,
                schedule: NoiseSchedule | None = None) -> StageResult:
    out_dir = Path(out_dir)
    schedule = schedule or NoiseSchedule()
    codec, model, base_ckpt, corpus = _stage_inputs(plan, manifest, codec_path, base_path, with_depth=True)
    train = corpus.split("train")
    base_hash = model.base_hash()
    model.freeze()
    branch = build_control(model.unet, codec.downsample, np.random.default_rng(plan.seed))
    f = train.latents.shape[1]
    x_all = train.latents.reshape((-1,) + train.latents.shape[2:])
    d_all = train.depths.reshape((-1,) + train.depths.shape[2:])
    ids_all = np.repeat(train.ids, f, axis=0)
    log = MetricsLog(out_dir / "metrics.csv", "control")

    def loss_fn(idx, rng):
        x0 = x_all[idx]
        t = rng.integers(0, schedule.steps, len(idx))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        ids = apply_dropout(ids_all[idx], plan.prompt_dropout, rng)
        with T.no_grad():
            cond = model.text(ids)
        depth = d_all[idx]

        def controlled(z, tt, c):
            return model.unet(z, tt, c, control=branch(z, tt, c, depth))

        return diffusion_loss(x0, t, eps, controlled, cond, schedule)

    def checkpoint():
        return branch.to_checkpoint({"stage": "control", "plan": plan.to_dict(), "base_hash": base_hash})

    fit(plan, {"unet": list(branch.named_parameters())}, {"unet": plan.lr_unet}, len(x_all), loss_fn, log,
        snapshot=checkpoint, last_good_path=out_dir / "control.last_good.gdds")
    if model.base_hash() != base_hash:
        raise ContractError("control training modified the frozen base model")
    summary = {"stage": "control", "base_hash": base_hash, "branch_params": branch.num_parameters(),
               "train_items": len(x_all)}
    return _finish(out_dir, "control", checkpoint(), log, summary)


def run_temporal(plan: TrainPlan, manifest, codec_path, base_path, out_dir,
                 schedule: NoiseSchedule | None = None) -> StageResult:
    out_dir = Path(out_dir)
    schedule = schedule or NoiseSchedule()
    codec, model, base_ckpt, corpus = _stage_inputs(plan, manifest, codec_path, base_path)
    train = corpus.split("train")
    frames = train.latents.shape[1]
    if frames != plan.frames:
        raise PlanError(f"corpus clips have {frames} frames but the plan asks for F={plan.frames}")
    base_hash = model.base_hash()
    model.freeze()
    video = attach_temporal(model.unet, plan.sites, frames, np.random.default_rng(plan.seed), plan.heads)
    log = MetricsLog(out_dir / "metrics.csv", "temporal")
    x_all = train.latents

    def loss_fn(idx, rng):
        x0 = x_all[idx]
        b = len(idx)
        t = np.repeat(rng.integers(0, schedule.steps, b), frames)
        flat = x0.reshape((b * frames,) + x0.shape[2:])
        eps = rng.standard_normal(flat.shape).astype(np.float32)
        ids = apply_dropout(train.ids[idx], plan.prompt_dropout, rng)
        with T.no_grad():
            cond = model.text(ids).repeat(frames)

        def forward(z, tt, c):
            return model.unet(z, tt, c, hook=video.hooks(frames))

        return diffusion_loss(flat, t, eps, forward, cond, schedule)

    def checkpoint():
        return video.to_checkpoint({"stage": "temporal", "plan": plan.to_dict(), "base_hash": base_hash})

    fit(plan, {"unet": list(video.named_parameters())}, {"unet": plan.lr_unet}, len(train), loss_fn, log,
        snapshot=checkpoint, last_good_path=out_dir / "temporal.last_good.gdds")
    if model.base_hash() != base_hash:
        raise ContractError("temporal training modified the frozen spatial model")
    gammas = {s: float(b.gamma.data[0]) for s, b in video.blocks.items()}
    summary = {"stage": "temporal", "base_hash": base_hash, "temporal_params": video.num_parameters(),
               "gamma": gammas, "train_items": len(train)}
    return _finish(out_dir, "temporal", checkpoint(), log, summary)


def load_video(path, model: DiffusionModel, frames: int | None = None) -> VideoModel:
    ckpt = Checkpoint.load(path, expect_type="TEMPORAL")
    stored = ckpt.metadata.get("base_hash")
    if stored is not None and stored != model.base_hash():
        raise CompatibilityError("temporal blocks were trained on a different base model")
    return VideoModel.from_checkpoint(ckpt, model.unet, frames)


def load_control(path, model: DiffusionModel) -> ControlBranch:
    return ControlBranch.from_checkpoint(Checkpoint.load(path, expect_type="CONTROL"), model.unet, model.base_hash())


def load_lora(path, model: DiffusionModel) -> lora_mod.AdapterSet:
    ckpt = Checkpoint.load(path, expect_type="LORA")
    text_state = {k[len("text_encoder."):]: v for k, v in ckpt.tensors.items() if k.startswith("text_encoder.")}
    adapter_ckpt = Checkpoint({k: v for k, v in ckpt.tensors.items() if not k.startswith("text_encoder.")},
                              ckpt.metadata)
    adapters = lora_mod.AdapterSet.from_checkpoint(adapter_ckpt)
    lora_mod.apply(adapters, model)
    if text_state:
        model.text.load_state_dict(text_state)
    return adapters
