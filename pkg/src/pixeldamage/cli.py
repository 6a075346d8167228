"""Command-line entry point: ``pixeldamage {train,infer,eval,inspect,gradcheck,synth}``.

Progress goes to stderr; reports (eval, inspect --json, gradcheck) go to stdout.
Exit codes: 0 success, 1 usage error, 2 data validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradcheck as gc
from .architectures import ARCHS, ROLES, Network, count_parameters, network_spec
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import (DataError, SplitManifest, apply_split, derive_binary_mask, generate_synthetic,
                   load_dataset, split, write_dataset)
from .fusion import REPORT_SCHEMA, evaluate, fuse, render_overlay
from .multiscale import DIVISOR
from .tensor import NumericError, RngState
from .training import predict_proba, train

log = logging.getLogger("pixeldamage")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.override("runtime", "seed", args.seed)
    return cfg


def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.override("model", "arch", args.arch).override("model", "role", args.role)
    cfg.override("data", "dir", args.data)
    if cfg["data"]["dir"] is None:
        raise UsageError("no data directory (--data or data.dir)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    samples = load_dataset(cfg["data"]["dir"], size=int(cfg["data"]["size"]), errors=errors)
    if not samples:
        raise DataError(f"no valid image/mask pairs in {cfg['data']['dir']}")
    if cfg["data"]["split_manifest"]:
        manifest = SplitManifest.load(cfg["data"]["split_manifest"])
    else:
        manifest = split(samples, int(cfg["data"]["split_seed"]))
    manifest.save(out / "split.json")
    try:
        train_set, test_set = apply_split(samples, manifest)
    except KeyError as e:
        raise DataError(f"split manifest names sample {e} which is not in the dataset") from None
    if not train_set:
        raise DataError("split leaves the training set empty")
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    root = RngState(cfg.seed)
    net = Network.build(cfg.arch, cfg.role, root.split(0), cfg.dtype, float(cfg["model"]["keep_prob"]))
    label_fn = derive_binary_mask if cfg.role == "segmenter" else None
    log.info("training %s %s on %d samples (%d held out, %d skipped)",
             cfg.arch, cfg.role, len(train_set), len(test_set), len(errors))
    with _threads(cfg.thread_count):
        train(net, train_set, test_set, cfg.train_config(), root.split(1), out_dir=out,
              metrics_path=out / "metrics.jsonl", label_fn=label_fn)
    log.info("wrote %s", out / "final.ckpt")
    return EXIT_OK


def _load_pair(seg_path, cls_path):
    seg, cls = load_checkpoint(seg_path), load_checkpoint(cls_path)
    if seg.role != "segmenter":
        raise DataError(f"{seg_path} holds a {seg.role}, expected a segmenter")
    if cls.role != "classifier":
        raise DataError(f"{cls_path} holds a {cls.role}, expected a classifier")
    return seg, cls


def _fused_masks(seg, cls, images, fusion_cfg):
    """Fuse both networks' outputs; images of any size are reflect-padded to a multiple of 16 and cropped back."""
    images = np.stack(images)
    h, w = images.shape[-2:]
    ph, pw = -h % DIVISOR, -w % DIVISOR
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    sp = predict_proba(seg.network(), images, seg.mean, seg.std)
    cp = predict_proba(cls.network(), images, cls.mean, cls.std)
    return fuse(cp, sp, fusion_cfg)[:, :h, :w]


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1).copy()
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None


def cmd_infer(args) -> int:
    cfg = _config(args)
    seg, cls = _load_pair(args.segmenter, args.classifier)
    image = _read_image(args.input)
    fusion_cfg = cfg.fusion.validate()
    with _threads(cfg.thread_count):
        mask = _fused_masks(seg, cls, [image], fusion_cfg)[0]
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask, mode="L").save(args.output)
    if args.overlay:
        Image.fromarray(render_overlay(image, mask)).save(args.overlay)
    log.info("%s: %d of %d pixels labelled damage", args.input, int((mask > 0).sum()), mask.size)
    return EXIT_OK


def cmd_eval(args) -> int:
    import jsonschema

    cfg = _config(args)
    seg, cls = _load_pair(args.segmenter, args.classifier)
    size = args.size or int(cfg["data"]["size"])
    samples = load_dataset(args.data, size=size)
    if args.split:
        try:
            _, samples = apply_split(samples, SplitManifest.load(args.split))
        except KeyError as e:
            raise DataError(f"split manifest names sample {e} which is not in the dataset") from None
    if not samples:
        raise DataError(f"no samples to evaluate in {args.data}")
    fusion_cfg = cfg.fusion.validate()
    preds = []
    with _threads(cfg.thread_count):
        for i in range(0, len(samples), 5):
            preds.append(_fused_masks(seg, cls, [s.image for s in samples[i:i + 5]], fusion_cfg))
    result = evaluate(np.concatenate(preds), np.stack([s.mask for s in samples]),
                      config={"fusion": fusion_cfg.to_json(), "samples": len(samples)})
    report = result.to_json()
    jsonschema.validate(report, REPORT_SCHEMA)
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n")
    print(text)
    log.info("overall pixel accuracy %.4f on %d samples", result.overall_accuracy, len(samples))
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.ckpt:
        ck = load_checkpoint(args.ckpt)
        spec, params = ck.spec, ck.params
    elif args.arch and args.role:
        spec, params = network_spec(args.arch, args.role), None
    else:
        raise UsageError("inspect needs --ckpt or both --arch and --role")
    rep = count_parameters(spec, params)
    if args.json:
        print(json.dumps(rep.to_json(), indent=2))
    else:
        print(f"{spec.arch} {spec.role}")
        print("\n".join(rep.lines()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gc.run(trials=args.trials, seed=args.seed)
    failed = sorted(k for k, v in errors.items() if not v < args.tolerance)
    print(json.dumps({"tolerance": args.tolerance, "trials": args.trials, "max_relative_error": errors,
                      "failed": failed}, indent=2))
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.size % DIVISOR:
        raise UsageError(f"--size must be a multiple of {DIVISOR}")
    samples = generate_synthetic(args.n, RngState(args.seed), size=args.size)
    write_dataset(samples, args.out)
    log.info("wrote %d synthetic pairs to %s", len(samples), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pixeldamage", description="Multiscale pixel-wise damage detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one network (segmenter or classifier)")
    t.add_argument("--config", help="JSON run config; missing keys take defaults")
    t.add_argument("--role", choices=ROLES)
    t.add_argument("--arch", choices=ARCHS)
    t.add_argument("--data", help="directory of image_*.png / mask_*.png pairs")
    t.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="fused damage mask for one image")
    i.add_argument("--segmenter", required=True)
    i.add_argument("--classifier", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True, help="mask PNG (class ids 0..6)")
    i.add_argument("--overlay", help="optional colour overlay PNG")
    i.add_argument("--config")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="confusion matrix and accuracy report")
    e.add_argument("--segmenter", required=True)
    e.add_argument("--classifier", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="also write the JSON report here")
    e.add_argument("--split", help="split manifest; evaluate its test ids only")
    e.add_argument("--size", type=int, help="input size (default: data.size from config)")
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("inspect", help="per-layer parameter accounting")
    n.add_argument("--ckpt")
    n.add_argument("--arch", choices=ARCHS)
    n.add_argument("--role", choices=ROLES)
    n.add_argument("--json", action="store_true")
    n.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=gc.TOLERANCE)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=288)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"pixeldamage {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"pixeldamage {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"pixeldamage {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
