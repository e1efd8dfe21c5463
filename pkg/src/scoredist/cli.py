"""Command-line entry point: ``scoredist <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes ``run_manifest.json`` next to its outputs;
``scoredist replay`` re-runs a command from that file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import distcore
from .adversarial import PerturbConfig, adversarial_run, heatmap, write_heatmap_csv, write_trace
from .data import (
    SynthSpec,
    load_corpus,
    load_image,
    parse_annotations,
    parse_predictions,
    save_gray,
    save_image,
    synth_corpus,
    write_corpus,
    write_predictions,
)
from .errors import DataError, ScoreDistError, StageOrderError, UsageError
from .model import (
    BackboneConfig,
    HeadConfig,
    NetConfig,
    Network,
    learn_fusion_weight,
    load_checkpoint,
    min_input_size,
    save_checkpoint,
)
from .training import (
    OptimizerConfig,
    TeacherClassifier,
    TeacherTargets,
    dual_from_dist,
    evaluate,
    generate_teacher_targets,
    ground_truths,
    network_from_distilled,
    predict_branches_corpus,
    train_aesthetic,
    train_distill,
    train_teacher,
    write_curve,
)

log = logging.getLogger("scoredist")

RUN_MANIFEST = "run_manifest.json"
# recorded as absolute paths so a manifest replays from any working directory
PATH_ARGS = ("data", "out", "targets", "init_from", "checkpoint", "image", "pred", "gt", "config")

CORPUS_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["seed", "spec", "images", "split"],
    "properties": {
        "seed": {"type": "integer"},
        "spec": {"type": "object", "required": ["n_images", "n_classes", "outlier_rate", "seed"]},
        "images": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["class", "height", "width", "luminance", "edge_density", "rule_mean", "std", "outlier", "clean_probs"],
                "properties": {
                    "class": {"type": "integer", "minimum": 0},
                    "height": {"type": "integer", "minimum": 1},
                    "width": {"type": "integer", "minimum": 1},
                    "luminance": {"type": "number"},
                    "edge_density": {"type": "number"},
                    "rule_mean": {"type": "number", "minimum": 1, "maximum": 10},
                    "std": {"type": "number", "exclusiveMinimum": 0},
                    "outlier": {"type": "boolean"},
                    "clean_probs": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 10, "maxItems": 10},
                },
            },
        },
        "split": {
            "type": "object",
            "required": ["train", "val", "test", "seed"],
            "properties": {k: {"type": "array", "items": {"type": "string"}} for k in ("train", "val", "test")},
        },
    },
}

RUN_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["command", "config", "seed", "tool_version", "started", "finished", "inputs", "outputs"],
}


def _tool_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ints(s):
    return tuple(int(v) for v in s.split(","))


def _write_manifest(out_dir, command, args, inputs, outputs, started):
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}
    for k in PATH_ARGS:
        if cfg.get(k):
            cfg[k] = str(Path(cfg[k]).resolve())
    manifest = {
        "command": command,
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "tool_version": _tool_version(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "inputs": {k: str(Path(v).resolve()) for k, v in inputs.items()},
        "outputs": {k: str(Path(v).resolve()) for k, v in outputs.items()},
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / RUN_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _split_ids(corpus, which):
    if which == "all":
        return list(corpus.ids)
    if corpus.split is None:
        raise DataError("corpus has no split; use --split all")
    ids = getattr(corpus.split, which)
    if not ids:
        raise DataError(f"split {which!r} is empty")
    return list(ids)


def _opt_config(args):
    return OptimizerConfig.desk(
        base_lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        step_iters=args.step_iters,
        lr_factor=args.lr_factor,
        iters=args.iters,
        seed=args.seed,
        sigma=args.sigma,
        eval_every=args.eval_every,
    )


# commands

def cmd_synth(args):
    started = _now()
    spec = SynthSpec(
        n_images=args.n,
        min_size=args.min_size,
        max_size=args.max_size,
        outlier_rate=args.outlier_rate,
        outlier_mass=args.outlier_mass,
        seed=args.seed,
    )
    corpus = synth_corpus(spec, val_count=args.val, test_count=args.test)
    out = Path(args.out)
    write_corpus(corpus, out)
    _write_manifest(out, "synth", args, {}, {"corpus": out}, started)
    print(f"wrote {len(corpus.ids)} images to {out}")


def cmd_teacher(args):
    started = _now()
    corpus = load_corpus(args.data)
    ids = _split_ids(corpus, "train")
    if not corpus.info:
        raise DataError("teacher training needs latent class labels from the corpus manifest")
    n_classes = int(corpus.spec.get("n_classes", max(corpus.classes()) + 1))
    teacher = train_teacher(
        [corpus.images[i] for i in ids], corpus.classes(ids), n_classes, iters=args.iters, temperature=args.temperature, seed=args.seed
    )
    targets = generate_teacher_targets(teacher, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    targets.save(out / "targets.csv")
    with open(out / "teacher.json", "w") as f:
        json.dump(teacher.to_dict(), f)
    _write_manifest(out, "teacher", args, {"data": args.data}, {"targets": out / "targets.csv", "teacher": out / "teacher.json"}, started)
    print(f"wrote teacher targets for {len(targets.ids)} images to {out / 'targets.csv'}")


def _net_config(args, variant):
    bb = BackboneConfig(channels=args.channels)
    return NetConfig(bb, HeadConfig(args.hidden, variant), args.spp_n, args.dtype)


def cmd_train(args):
    started = _now()
    corpus = load_corpus(args.data)
    train_ids = _split_ids(corpus, "train")
    val_ids = corpus.split.val if corpus.split else []
    cfg = _opt_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"data": args.data}
    outputs = {"checkpoint": out / "checkpoint.ckpt", "loss_curve": out / "loss.csv"}

    if args.stage == "distill":
        if not args.targets:
            raise UsageError("--stage distill requires --targets (run `scoredist teacher` first)")
        if args.init_from or args.from_scratch:
            raise UsageError("--init-from/--from-scratch apply to the aesthetic stage only")
        targets = TeacherTargets.load(args.targets)
        inputs["targets"] = args.targets
        net = Network(_net_config(args, "dist"), seed=args.seed)
        res = train_distill(net, corpus, train_ids, targets, cfg)
        write_curve(res.curve, out / "loss.csv")
        save_checkpoint(res.net, out / "checkpoint.ckpt", {"ce_before": res.ce_before, "ce_after": res.ce_after})
        summary = {"ce_before": res.ce_before, "ce_after": res.ce_after}
    else:
        if args.targets:
            raise UsageError("--targets applies to the distill stage only")
        if args.init_from and args.from_scratch:
            raise UsageError("choose one of --init-from and --from-scratch")
        lr_mult = None
        if args.from_scratch:
            init = "scratch"
            net = Network(_net_config(args, args.variant), seed=args.seed)
        elif args.init_from:
            inputs["init_from"] = args.init_from
            src = load_checkpoint(args.init_from)
            if src.stage == "distilled":
                if args.variant == "dual":
                    raise StageOrderError("the dual variant starts from a trained dist-head checkpoint, not a distilled one")
                init = "distilled"
                net = network_from_distilled(src, HeadConfig(args.hidden, args.variant), seed=args.seed)
            elif src.stage == "aesthetic" and args.variant == "dual":
                init = "aesthetic"
                net, lr_mult = dual_from_dist(src, seed=args.seed)
            else:
                raise StageOrderError(
                    f"checkpoint {args.init_from} is at stage {src.stage!r}; the aesthetic stage needs a distilled checkpoint "
                    "(or an aesthetic dist checkpoint for --variant dual)"
                )
        else:
            raise StageOrderError(
                "aesthetic training needs --init-from <distilled checkpoint> or an explicit --from-scratch "
                "(distillation comes first: scoredist train --stage distill)"
            )
        res = train_aesthetic(net, corpus, train_ids, cfg, loss=args.loss, init=init, val_ids=val_ids, lr_mult=lr_mult, clean_val=args.clean)
        net = res.net
        summary = {}
        if net.cfg.head.variant == "dual" and val_ids:
            a, b = predict_branches_corpus(net, corpus, val_ids)
            net.fusion_weight = learn_fusion_weight(a, b, ground_truths(corpus, val_ids, args.clean))
            summary["fusion_weight"] = net.fusion_weight
        write_curve(res.curve, out / "loss.csv")
        save_checkpoint(net, out / "checkpoint.ckpt")
        if val_ids:
            rep, _ = evaluate(net, corpus, val_ids, clean=args.clean)
            (out / "val_report.json").write_text(rep.to_json() + "\n")
            outputs["val_report"] = out / "val_report.json"
            summary["val"] = rep.to_dict()
    _write_manifest(out, "train", args, inputs, outputs, started)
    print(json.dumps(summary, indent=2))


def cmd_eval(args):
    started = _now()
    net = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    ids = _split_ids(corpus, args.split)
    rep, preds = evaluate(net, corpus, ids, t=args.threshold, clean=args.clean)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json() + "\n")
    write_predictions(preds, out / "predictions.csv")
    _write_manifest(
        out, "eval", args, {"checkpoint": args.checkpoint, "data": args.data}, {"report": out / "report.json", "predictions": out / "predictions.csv"}, started
    )
    print(rep.to_json())


def cmd_metrics(args):
    started = _now()
    preds = parse_predictions(args.pred)
    gts = {r.image_id: r.distribution for r in parse_annotations(args.gt)}
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        raise DataError(f"image id mismatch: no prediction for {missing_pred}; no ground truth for {missing_gt}")
    ids = sorted(gts)
    rep = distcore.dataset_metrics([preds[i] for i in ids], [gts[i] for i in ids], args.threshold)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(rep.to_json() + "\n")
        _write_manifest(out, "metrics", args, {"pred": args.pred, "gt": args.gt}, {"report": out / "report.json"}, started)
    print(rep.to_json())


def cmd_adversarial(args):
    started = _now()
    net = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    cfg = PerturbConfig(
        direction=args.direction, shift_amount=args.shift, steps=args.steps, step_size=args.step_size, linf_budget=args.budget, sigma=args.sigma
    )
    res = adversarial_run(net, image, cfg)
    h = heatmap(image, res.image, res.trace[0].mean, res.trace[-1].mean, res.iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(res.image, out / "perturbed.png")
    save_gray(h.values, out / "heatmap.png")
    write_heatmap_csv(h, out / "heatmap.csv")
    write_trace(res.trace, out / "trace.csv")
    outputs = {k: out / f for k, f in [("perturbed", "perturbed.png"), ("heatmap", "heatmap.png"), ("heatmap_csv", "heatmap.csv"), ("trace", "trace.csv")]}
    _write_manifest(out, "adversarial", args, {"checkpoint": args.checkpoint, "image": args.image}, outputs, started)
    print(json.dumps({"original_mean": h.original_mean, "perturbed_mean": h.perturbed_mean, "iterations": h.iterations, **h.summary}, indent=2))


def cmd_min_size(args):
    if args.checkpoint:
        print(load_checkpoint(args.checkpoint).min_input_size)
    else:
        print(min_input_size(NetConfig(BackboneConfig(channels=args.channels), spp_n=args.spp_n)))


def cmd_replay(args):
    with open(args.manifest) as f:
        manifest = json.load(f)
    command = manifest.get("command")
    if command not in COMMANDS:
        raise DataError(f"{args.manifest}: unknown command {command!r}")
    cfg = dict(manifest["config"])
    if args.out:
        cfg["out"] = args.out
    for k in ("channels",):
        if isinstance(cfg.get(k), list):
            cfg[k] = tuple(cfg[k])
    COMMANDS[command](argparse.Namespace(**cfg))


COMMANDS = {
    "synth": cmd_synth,
    "teacher": cmd_teacher,
    "train": cmd_train,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "adversarial": cmd_adversarial,
}


def build_parser():
    p = _Parser(prog="scoredist", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--val", type=int, default=300)
    s.add_argument("--test", type=int, default=500)
    s.add_argument("--min-size", type=int, default=40)
    s.add_argument("--max-size", type=int, default=56)
    s.add_argument("--outlier-rate", type=float, default=0.0)
    s.add_argument("--outlier-mass", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("teacher", help="train the teacher classifier and write soft targets")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--temperature", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_teacher)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", choices=("distill", "aesthetic"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--targets")
    s.add_argument("--init-from")
    s.add_argument("--from-scratch", action="store_true")
    s.add_argument("--loss", choices=("huber", "euclidean"), default="huber")
    s.add_argument("--variant", choices=("dist", "mean", "dual"), default="dist")
    d = OptimizerConfig.desk()
    s.add_argument("--iters", type=int, default=d.iters)
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--lr", type=float, default=d.base_lr)
    s.add_argument("--momentum", type=float, default=d.momentum)
    s.add_argument("--weight-decay", type=float, default=d.weight_decay)
    s.add_argument("--step-iters", type=int, default=d.step_iters)
    s.add_argument("--lr-factor", type=float, default=d.lr_factor)
    s.add_argument("--sigma", type=float, default=d.sigma)
    s.add_argument("--eval-every", type=int, default=0)
    s.add_argument("--hidden", type=int, default=256)
    s.add_argument("--channels", type=_ints, default=BackboneConfig().channels)
    s.add_argument("--spp-n", type=int, default=3)
    s.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    s.add_argument("--clean", action="store_true", help="validate against uncorrupted synthetic distributions")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("-t", "--threshold", type=float, default=distcore.DEFAULT_THRESHOLD)
    s.add_argument("--clean", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("metrics", help="score a prediction file against an annotation file")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.add_argument("-t", "--threshold", type=float, default=distcore.DEFAULT_THRESHOLD)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("adversarial", help="perturb an image toward a better or worse prediction")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--direction", choices=("improve", "worsen"), default="worsen")
    s.add_argument("--shift", type=float, default=0.5)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--step-size", type=float, default=PerturbConfig().step_size)
    s.add_argument("--budget", type=float, default=None, help="optional L-inf budget")
    s.add_argument("--sigma", type=float, default=distcore.DEFAULT_SIGMA)
    s.set_defaults(func=cmd_adversarial)

    s = sub.add_parser("min-size", help="print the minimum input side length")
    s.add_argument("--checkpoint")
    s.add_argument("--channels", type=_ints, default=BackboneConfig().channels)
    s.add_argument("--spp-n", type=int, default=3)
    s.set_defaults(func=cmd_min_size)

    s = sub.add_parser("replay", help="re-run a command from its run_manifest.json")
    s.add_argument("manifest")
    s.add_argument("--out", help="write outputs here instead of the recorded location")
    s.set_defaults(func=cmd_replay)
    return p


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as f:
                defaults = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read --config {args.config}: {e}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ScoreDistError as e:
        print(f"scoredist: error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, FileNotFoundError) as e:
        print(f"scoredist: error: {e}", file=sys.stderr)
        return 1 if isinstance(e, ValueError) else 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
