"""Command-line entry point: ``gendds <group> <action> [options]``.

Every command works inside a run directory (``--out``, default ``run``)::

    run/data/       manifest.jsonl, vocab.txt, frames/
    run/<stage>/    <stage>.gdds, metrics.csv, summary.json
    run/probe/      probe.gdds
    run/samples/<name>/
    run/eval/

Each output directory receives ``config.json``, the effective configuration,
which can be passed back through ``--config`` to reproduce the run.
"""

from __future__ import annotations

import os

if os.environ.get("GENDDS_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["GENDDS_THREADS"])

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigurationError, DataError, GenDDSError

logger = logging.getLogger("gendds")

TRAIN_STAGES = ("codec", "base", "lora", "control", "temporal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _globals() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--config", default=argparse.SUPPRESS, help="YAML or JSON run configuration")
    p.add_argument("--out", default=argparse.SUPPRESS, help="run directory (default: run)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _globals()
    parser = _Parser(prog="gendds", parents=[g], description="Desk-scale driving-scene diffusion pipeline.")
    groups = parser.add_subparsers(dest="group", metavar="{dataset,train,sample,eval}", parser_class=_Parser)
    groups.required = True

    ds = groups.add_parser("dataset", help="build, ingest or validate a corpus").add_subparsers(
        dest="action", parser_class=_Parser)
    ds.required = True
    gen = ds.add_parser("gen", parents=[g], help="render a procedural corpus")
    gen.add_argument("--count", type=int)
    gen.add_argument("--split", type=float, help="train fraction")
    gen.add_argument("--frames", type=int)
    gen.add_argument("--resolution", type=int)
    gen.add_argument("--format", choices=("png", "ppm"))
    ing = ds.add_parser("ingest", parents=[g], help="import folders of frames with caption.txt sidecars")
    ing.add_argument("--source", help="folder of frames, or folder of such folders")
    ing.add_argument("--frames", type=int)
    ing.add_argument("--resolution", type=int)
    val = ds.add_parser("validate", parents=[g], help="check a manifest")
    val.add_argument("--manifest")

    tr = groups.add_parser("train", help="run one training stage").add_subparsers(dest="action", parser_class=_Parser)
    tr.required = True
    for stage in TRAIN_STAGES:
        sp = tr.add_parser(stage, parents=[g], help=f"{stage} stage")
        sp.add_argument("--manifest")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float, help="learning rate (U-Net / trainable part)")
        if stage in ("base", "lora"):
            sp.add_argument("--lr-text", type=float)
            sp.add_argument("--prompt-dropout", type=float)
        if stage == "lora":
            sp.add_argument("--rank", type=int)
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--targets", help="comma-separated name patterns")
            sp.add_argument("--filter-tags", help="only clips carrying all these tags")
            sp.add_argument("--train-text", action="store_true", default=None)

    sm = groups.add_parser("sample", help="generate images or clips").add_subparsers(dest="action", parser_class=_Parser)
    sm.required = True
    for kind in ("image", "video"):
        sp = sm.add_parser(kind, parents=[g], help=f"sample {kind}s")
        sp.add_argument("--prompt")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--cfg", type=float)
        sp.add_argument("--sampler", choices=("ddpm", "ddim", "dpmpp_2m"))
        sp.add_argument("--eta", type=float)
        sp.add_argument("--count", type=int, help="samples per prompt")
        sp.add_argument("--grid", action="store_true", default=None, help="one sample per attribute-grid cell")
        sp.add_argument("--grid-count", type=int)
        sp.add_argument("--lora", action="store_true", default=None)
        sp.add_argument("--control", action="store_true", default=None)
        sp.add_argument("--depth-seed", type=int)
        sp.add_argument("--name")
        sp.add_argument("--format", choices=("ppm", "png"))
        if kind == "video":
            sp.add_argument("--frames", type=int)
            sp.add_argument("--no-temporal", action="store_true", default=None,
                            help="independent frames (temporal blocks off)")

    ev = groups.add_parser("eval", help="probe, consistency and summary reports").add_subparsers(
        dest="action", parser_class=_Parser)
    ev.required = True
    pr = ev.add_parser("probe", parents=[g], help="train (if needed) and apply the attribute probe")
    pr.add_argument("--clips", help="generated clip folder (default: held-out corpus frames)")
    pr.add_argument("--retrain", action="store_true")
    pr.add_argument("--epochs", type=int)
    co = ev.add_parser("consistency", parents=[g], help="inter-frame difference of generated clips")
    co.add_argument("--clips", required=True)
    co.add_argument("--baseline")
    ev.add_parser("report", parents=[g], help="collect stage summaries and evaluations")
    return parser


def _overrides(args) -> dict:
    a = vars(args)
    o = {}

    def put(key, dotted, fn=lambda v: v):
        if a.get(key) is not None:
            o[dotted] = fn(a[key])

    put("seed", "seed")
    if args.group == "dataset":
        for k in ("count", "split", "frames", "resolution", "format", "source"):
            put(k, f"dataset.{k}")
    elif args.group == "train":
        st = args.action
        if st == "codec":
            put("epochs", "codec.epochs")
            put("batch_size", "codec.batch_size")
            put("lr", "codec.lr")
        else:
            put("epochs", f"train.{st}.epochs")
            put("batch_size", f"train.{st}.batch_size")
            put("lr", f"train.{st}.lr_unet")
            put("lr_text", f"train.{st}.lr_text")
            put("prompt_dropout", f"train.{st}.prompt_dropout")
            put("rank", f"train.{st}.rank")
            put("alpha", f"train.{st}.alpha")
            put("targets", f"train.{st}.targets", lambda v: [t.strip() for t in v.split(",") if t.strip()])
            put("filter_tags", f"train.{st}.filter_tags", lambda v: [t.strip() for t in v.split(",") if t.strip()])
            put("train_text", f"train.{st}.train_text")
    elif args.group == "sample":
        put("prompt", "sample.prompt")
        put("steps", "sampler.steps")
        put("cfg", "sampler.cfg_scale")
        put("sampler", "sampler.kind")
        put("eta", "sampler.eta")
        for k in ("count", "grid", "grid_count", "lora", "control", "depth_seed", "name", "format", "frames"):
            put(k, f"sample.{k}")
        if a.get("no_temporal"):
            o["sample.temporal"] = False
    elif args.group == "eval" and args.action == "probe":
        put("epochs", "probe.epochs")
    return o


def _paths(run: Path) -> dict:
    return {"data": run / "data", "manifest": run / "data" / "manifest.jsonl",
            **{s: run / s / f"{s}.gdds" for s in TRAIN_STAGES}, "probe": run / "probe" / "probe.gdds"}


# -- commands ----------------------------------------------------------------------------------

def cmd_dataset(args, cfg, run: Path) -> int:
    from .scenes import build_corpus, ingest_external, validate_manifest

    d = cfg["dataset"]
    out = run / "data"
    if args.action == "gen":
        if d["count"] <= 0:
            raise DataError("empty corpus: --count must be positive")
        path = build_corpus(d["count"], out, d["split"], cfg["seed"], d["frames"], d["resolution"], d["format"])
        config_mod.echo(cfg, out)
        print(f"wrote {d['count']} clips to {path}")
    elif args.action == "ingest":
        if not d["source"]:
            raise ConfigurationError("dataset ingest needs --source")
        path, report = ingest_external(d["source"], out, d["frames"], d["resolution"], d["split"], cfg["seed"])
        config_mod.echo(cfg, out)
        print(f"ingested {report.clips} clips into {path}; dropped {report.dropped_tags} unknown tags; "
              f"{report.proxy_depth_clips} clips use luminance-proxy depth; {len(report.skipped_files)} files skipped")
        for line in report.skipped_files:
            print(f"  skipped {line}", file=sys.stderr)
    else:
        manifest = Path(args.manifest) if getattr(args, "manifest", None) else run / "data" / "manifest.jsonl"
        problems = validate_manifest(manifest)
        for p in problems:
            print(p, file=sys.stderr)
        if problems:
            raise DataError(f"{manifest}: {len(problems)} problem(s)")
        print(f"{manifest}: ok")
    return 0


def _plan(cfg, stage):
    from .train import TrainPlan

    if stage == "codec":
        c = cfg["codec"]
        return TrainPlan("codec", epochs=c["epochs"], batch_size=c["batch_size"], lr_unet=c["lr"],
                         seed=cfg["seed"], latent_channels=c["latent_channels"], patience=c["patience"])
    params = dict(cfg["train"][stage])
    return TrainPlan(stage, seed=cfg["seed"], pixel_space=not cfg["codec"]["enabled"], frames=cfg["dataset"]["frames"],
                     **params)


def cmd_train(args, cfg, run: Path) -> int:
    from . import train
    from .pipeline import TextConfig
    from .unet import UNetConfig

    p = _paths(run)
    stage = args.action
    manifest = Path(args.manifest) if args.manifest else p["manifest"]
    if not manifest.exists():
        raise DataError(f"manifest {manifest} not found; run `dataset gen` first")
    plan = _plan(cfg, stage)
    out = run / stage
    if stage == "codec":
        if not cfg["codec"]["enabled"]:
            raise ConfigurationError("codec.enabled is false: the pipeline runs in pixel space, nothing to train")
        result = train.run_codec(plan, manifest, out)
    elif stage == "base":
        result = train.run_base(plan, manifest, p["codec"], out, UNetConfig.from_dict(cfg["model"]["unet"]),
                                TextConfig(**cfg["model"]["text"]))
    else:
        runner = {"lora": train.run_lora, "control": train.run_control, "temporal": train.run_temporal}[stage]
        result = runner(plan, manifest, p["codec"], p["base"], out)
    config_mod.echo(cfg, out)
    print(f"{stage}: wrote {result.checkpoint}")
    return 0


def _grid_prompts(n: int) -> list[str]:
    from .scenes import BASE_TAGS, grid_cell, traffic_tag

    return [", ".join([*BASE_TAGS, w, traffic_tag(t), s]) for w, t, s in (grid_cell(i) for i in range(n))]


def _depth_for(prompt: str, frames: int, resolution: int, seed: int) -> np.ndarray:
    from .scenes import SceneSpec, attributes_from_tags, render_scene

    attrs = attributes_from_tags(t.strip() for t in prompt.split(","))
    spec = SceneSpec(attrs["weather"] or "sunny", attrs["traffic"] or "light", attrs["streetscape"] or "city",
                     seed, frames, resolution)
    return render_scene(spec).depths[:, None].astype(np.float32)


def cmd_sample(args, cfg, run: Path) -> int:
    from .codec import IdentityCodec
    from .diffusion import SamplerConfig
    from .evaluate import write_index
    from .media import write_clip
    from .pipeline import generate
    from .train import load_base, load_codec, load_control, load_lora, load_video

    p = _paths(run)
    s = cfg["sample"]
    video_mode = args.action == "video"
    frames = s["frames"] if video_mode else 1
    codec = IdentityCodec() if not cfg["codec"]["enabled"] else load_codec(p["codec"])
    model, _ = load_base(p["base"])
    video = control = None
    if s["control"]:
        control = load_control(p["control"], model)
    if video_mode:
        if s["temporal"]:
            video = load_video(p["temporal"], model, frames)
        else:
            from .temporal import attach_temporal
            video = attach_temporal(model.unet, frames=frames)
    if s["lora"]:
        load_lora(p["lora"], model)
    prompts = _grid_prompts(s["grid_count"]) if s["grid"] else [s["prompt"]] * s["count"]
    name = s["name"] or (f"{args.action}_grid" if s["grid"] else f"{args.action}_seed{cfg['seed']}")
    out = run / "samples" / name
    resolution = cfg["dataset"]["resolution"]
    entries = []
    for start in range(0, len(prompts), s["chunk"]):
        chunk = prompts[start:start + s["chunk"]]
        sampler = SamplerConfig(cfg["sampler"]["kind"], cfg["sampler"]["steps"], cfg["sampler"]["cfg_scale"],
                                rho=cfg["sampler"]["rho"], eta=cfg["sampler"]["eta"], seed=cfg["seed"] + start)
        depth = None
        if control is not None:
            dseed = cfg["seed"] if s["depth_seed"] is None else s["depth_seed"]
            depth = np.stack([_depth_for(pr, frames, resolution, dseed + start + i) for i, pr in enumerate(chunk)])
        clips = generate(model, codec, chunk, sampler, frames, video, control, depth, resolution=resolution)
        for i, clip in enumerate(clips):
            rel = f"clip_{start + i:03d}"
            write_clip(out / rel, clip, fmt=s["format"], gif=video_mode)
            entries.append({"dir": rel, "prompt": chunk[i]})
    write_index(out, entries)
    config_mod.echo(cfg, out)
    print(f"wrote {len(entries)} {'clips' if video_mode else 'images'} to {out}")
    return 0


def cmd_eval(args, cfg, run: Path) -> int:
    from .evaluate import Probe, eval_consistency, eval_probe, train_probe
    from .text import TagVocabulary

    p = _paths(run)
    out = run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    if args.action == "probe":
        if args.retrain or not p["probe"].exists():
            pc = cfg["probe"]
            probe = train_probe(p["manifest"], pc["epochs"], pc["lr"], pc["batch_size"], cfg["seed"], pc["width"])
            probe.to_checkpoint().save(p["probe"])
            config_mod.echo(cfg, p["probe"].parent)
            print(f"probe held-out accuracy: {json.dumps(probe.val_accuracy, sort_keys=True)}")
        probe = Probe.load(p["probe"])
        vocab = TagVocabulary.load(p["data"] / "vocab.txt")
        if args.clips:
            report = eval_probe(args.clips, probe, vocab)
            name = Path(args.clips).name
        else:
            report = probe.val_accuracy
            name = "heldout"
        path = out / f"probe_{name}.json"
    elif args.action == "consistency":
        report = eval_consistency(args.clips, args.baseline)
        path = out / f"consistency_{Path(args.clips).name}.json"
    else:
        report = {}
        for stage in TRAIN_STAGES:
            summary = run / stage / "summary.json"
            if summary.exists():
                report[stage] = json.loads(summary.read_text(encoding="utf-8"))
        for f in sorted(out.glob("*.json")):
            if f.name != "config.json":
                report[f"eval/{f.stem}"] = json.loads(f.read_text(encoding="utf-8"))
        path = run / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    config_mod.echo(cfg, out)
    print(json.dumps(report, sort_keys=True) if args.action != "report" else f"wrote {path}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = Path(getattr(args, "out", "run"))
    try:
        cfg = config_mod.resolve(getattr(args, "config", None), _overrides(args))
        handler = {"dataset": cmd_dataset, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}[args.group]
        return handler(args, cfg, run)
    except GenDDSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
