"""Command-line entry point: ``fogflow {synth,fog,train,eval,align-demo}``.

Exit status is 0 on success, 2 when an input fails validation and 3 when
training aborts on divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .trainer import DivergenceError

log = logging.getLogger("fogflow")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc


def cmd_synth(args, conf: dict) -> None:
    from .scene import SceneConfig, make_scene, random_scene_config

    if conf:
        cfg = SceneConfig.from_dict(conf)
    else:
        cfg = random_scene_config(np.random.default_rng(args.seed), args.width, args.height)
    s = make_scene(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("left_t", "left_t1", "right_t", "right_t1"):
        io.write_ppm(out / f"{name}.ppm", getattr(s, name))
    io.write_pfm(out / "depth_t.pfm", s.depth_t)
    io.write_pfm(out / "depth_t1.pfm", s.depth_t1)
    io.write_flo(out / "flow.flo", s.flow)
    io.write_pfm(out / "nonrigid.pfm", s.nonrigid.astype(np.float32))
    (out / "scene.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    log.info("wrote scene %d to %s", args.seed, out)


def cmd_fog(args, conf: dict) -> None:
    from .fog import FogParams, add_fog

    params = FogParams.from_dict(_load_config(args.params) if args.params else (conf or {"beta": args.beta}))
    image = io.read_ppm(args.image)
    depth = io.read_pfm(args.depth)
    if depth.shape != image.shape[:2]:
        raise ValueError(f"depth {depth.shape} does not match image {image.shape[:2]}")
    io.write_ppm(args.out, np.clip(add_fog(image, depth, params), 0.0, 1.0))


def cmd_train(args, conf: dict) -> None:
    from dataclasses import replace

    from .trainer import TrainConfig, report_json, run_ablation, run_pipeline

    cfg = TrainConfig.from_dict(conf) if conf else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    report = run_pipeline(cfg, out_dir=out)
    if args.ablation:
        seeds = [int(s) for s in args.seeds.split(",")]
        report["ablation"] = run_ablation(cfg, args.ablation.split(","), seeds)
        (out / "report.json").write_text(report_json(report))
    print(json.dumps(report["final"], sort_keys=True))


def cmd_eval(args, conf: dict) -> None:
    from .metrics import aggregate, evaluate

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gts = sorted(gt_dir.glob("*.flo"))
    if not gts:
        raise ValueError(f"no .flo files in {gt_dir}")
    per_file, reports = {}, []
    for g in gts:
        p = pred_dir / g.name
        if not p.exists():
            raise ValueError(f"missing prediction {p}")
        rep = evaluate(io.read_flo(p), io.read_flo(g))
        per_file[g.name] = rep.to_dict()
        reports.append(rep)
    summary = aggregate(reports).to_dict()
    text = json.dumps({"overall": summary, "files": per_file}, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(json.dumps({"epe": summary["epe"], "f1_all": summary["f1_all"]}))


def cmd_align_demo(args, conf: dict) -> None:
    from .cda import CdaConfig, histogram, kl_value, sample_correlations
    from .costvolume import load_stack, normalize

    cfg = CdaConfig.from_dict(conf) if conf else CdaConfig(seed=args.seed or 0)
    rng = np.random.default_rng(cfg.seed)
    cv_r = normalize(load_stack(args.real, args.radius))
    cv_s = normalize(load_stack(args.syn, args.radius))
    p_r = histogram(sample_correlations(cv_r, cfg, rng), cfg).numpy
    p_s = histogram(sample_correlations(cv_s, cfg, rng), cfg).numpy
    print(json.dumps({"p_r": p_r.tolist(), "p_s": p_s.tolist(), "kl": kl_value(p_r, p_s)}, indent=1))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fogflow", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="global seed")
    ap.add_argument("--config", default=None, help="JSON config for the subcommand")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="render a procedural stereo scene pair")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fog", help="apply the scattering model to an image")
    p.add_argument("--image", required=True, help="clean PPM")
    p.add_argument("--depth", required=True, help="PFM depth in meters")
    p.add_argument("--params", default=None, help="JSON fog parameters")
    p.add_argument("--beta", type=float, default=0.12)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fog)

    p = sub.add_parser("train", help="run the adaptation pipeline")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", default=None, help="comma-separated ablation rows")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score .flo predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("align-demo", help="correlation histograms and KL of two volume dumps")
    p.add_argument("--real", required=True, help="real-domain volume stack (PFM)")
    p.add_argument("--syn", required=True, help="synthetic-domain volume stack (PFM)")
    p.add_argument("--radius", type=int, default=3)
    p.set_defaults(func=cmd_align_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.cmd == "synth" and args.seed is None:
        args.seed = 0
    try:
        args.func(args, _load_config(args.config))
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (ValueError, KeyError, TypeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
