"""Command-line driver.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines) and a
flag per configuration field (``--lr 3e-3``, ``--hs-adapter false``); flags
win over the file. Without ``--data`` the synthetic domains are generated on
the fly from ``domains``, ``n_images``, ``seed`` and ``size``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from ..instances import read_instance_png, write_instance_csv, write_instance_png
from ..metrics import score, write_reports_csv
from ..prompt import read_points_csv, render_density, write_density, write_density_preview
from . import protocols as P
from .config import RunConfig, _coerce, dump_config, field_types, load_config
from .data import generate_domain, load_domain, save_domain
from .train import domain_mean, evaluate, load_checkpoint, predict_instances, save_checkpoint, train

log = logging.getLogger("nucseg")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (override --config)")
    g.add_argument("--config", type=Path, help="key=value configuration file")
    for name, kind in field_types().items():
        g.add_argument(_flag(name), dest=f"cfg_{name}", metavar=kind.__name__.upper(), default=None)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for name, kind in field_types().items():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            changes[name] = _coerce(kind, raw)
    return cfg.replace(**changes) if changes else cfg


def domains_for(cfg: RunConfig, names, data_dir=None):
    if data_dir is not None:
        return [load_domain(data_dir, n) for n in names]
    return [generate_domain(n, cfg.n_images, cfg.seed, (cfg.size, cfg.size)) for n in names]


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def export_prediction(out_dir: Path, image_id: str, probs: np.ndarray, inst: np.ndarray, tau: float) -> None:
    """8-bit probability map, binary mask, 16-bit instance raster and instance table."""
    out_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(probs, 0, 1) * 255).astype(np.uint8)).save(out_dir / f"{image_id}_prob.png")
    Image.fromarray(((probs > tau) * 255).astype(np.uint8)).save(out_dir / f"{image_id}_mask.png")
    write_instance_png(out_dir / f"{image_id}_instances.png", inst)
    write_instance_csv(out_dir / f"{image_id}_instances.csv", inst)


# -- subcommands --------------------------------------------------------------
def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    for ds in domains_for(cfg, cfg.domain_list):
        path = save_domain(ds, args.out)
        print(f"{ds.domain_id}: {len(ds)} images -> {path}")
    return 0


def cmd_density(args) -> int:
    h, w = args.size
    pts = read_points_csv(args.points, h, w)
    sigma = args.sigma if args.sigma is not None and args.sigma > 0 else None
    dens = render_density(pts, args.r, sigma)
    write_density(args.out, dens.raster)
    if args.preview:
        write_density_preview(args.preview, dens.raster)
    print(f"{len(pts)} points, mass {dens.raster.sum():.6f} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    held_out = set(args.exclude.split(",")) if args.exclude else set()
    names = [n for n in cfg.domain_list if n not in held_out]
    ckpt = train(cfg, domains_for(cfg, names, args.data), log_path=args.log, forbidden_domains=held_out)
    save_checkpoint(args.out, ckpt.model)
    Path(str(args.out) + ".cfg").write_text(dump_config(cfg))
    print(f"trained on {'+'.join(names)} for {cfg.epochs} epochs, final loss {ckpt.losses[-1]:.5f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    sidecar = Path(f"{args.checkpoint}.cfg") if args.checkpoint else None
    if args.config is None and sidecar is not None and sidecar.exists():
        args.config = sidecar
    if args.checkpoint is None and not args.oracle:
        raise ValueError("--checkpoint is required unless --oracle is given")
    cfg = resolve_config(args)
    model = None if args.oracle else load_checkpoint(args.checkpoint, cfg)
    reports = []
    for ds in domains_for(cfg, args.domain.split(","), args.data):
        reports.extend(evaluate(cfg, model, ds, oracle=args.oracle))
        if args.masks and model is not None:
            for s in ds.samples:
                probs, inst = predict_instances(model, s, cfg)
                export_prediction(Path(args.masks), s.image_id, probs, inst, cfg.tau)
    rows = list(reports)
    for dom in dict.fromkeys(r.domain for r in reports):
        rows.append(domain_mean([r for r in reports if r.domain == dom], reports[0].dataset, dom))
    write_reports_csv(args.out if args.out else sys.stdout, rows)
    return 0


def _write_rows(args, rows, fields) -> None:
    if args.out:
        P.write_table(args.out, rows, fields)
    else:
        P.write_table(sys.stdout, rows, fields)


def _log_dir(args):
    if args.log_dir is None:
        return None
    Path(args.log_dir).mkdir(parents=True, exist_ok=True)
    return str(args.log_dir)


def cmd_lodo(args) -> int:
    cfg = resolve_config(args)
    _write_rows(args, P.run_lodo(cfg, domains_for(cfg, cfg.domain_list, args.data), _log_dir(args)), P.LODO_FIELDS)
    return 0


def cmd_adaptability(args) -> int:
    cfg = resolve_config(args).replace(protocol="adaptability")
    rows = P.run_adaptability(cfg, domains_for(cfg, cfg.domain_list, args.data), _log_dir(args))
    _write_rows(args, rows, P.ADAPT_FIELDS)
    return 0


def cmd_ablation(args) -> int:
    cfg = resolve_config(args)
    for entry in P.parameter_log(cfg):
        log.info("parameter count %s", json.dumps(entry))
    rows = P.run_ablation(cfg, domains_for(cfg, cfg.domain_list, args.data), _log_dir(args))
    _write_rows(args, rows, P.ABLATION_FIELDS)
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    rows = P.run_sweep(cfg, domains_for(cfg, cfg.domain_list, args.data), args.r_grid, args.n_grid, _log_dir(args))
    _write_rows(args, rows, P.SWEEP_FIELDS)
    return 0


def cmd_metrics(args) -> int:
    pred, gt = read_instance_png(args.pred), read_instance_png(args.gt)
    pct = args.hd_percentile if args.hd_percentile and args.hd_percentile > 0 else None
    report = score(pred, gt, pct, dataset="files", domain="-", image_id=Path(args.pred).stem)
    write_reports_csv(args.out if args.out else sys.stdout, [report])
    return 0


def cmd_gradcheck(args) -> int:
    from ..gradsuite import format_results, run_suite

    results = run_suite(seeds=range(args.seeds), h=args.h, tol=args.tol, max_coords=args.max_coords)
    print(format_results(results))
    ok = all(r.passed for r in results)
    print("gradient suite:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nucseg", description="Prompted nuclei segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic domains to disk")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("density", help="render a point CSV into a density raster")
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--size", type=_parse_size, required=True, help="HxW")
    p.add_argument("--r", type=int, default=10)
    p.add_argument("--sigma", type=float, default=None, help="defaults to r/3")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preview", type=Path, help="optional 8-bit PNG preview")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("train", help="train on the configured domains")
    _add_config_args(p)
    p.add_argument("--data", type=Path, help="dataset root written by 'generate'")
    p.add_argument("--exclude", help="comma-separated domains that must not be trained on")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="JSON-lines training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one or more domains")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--domain", required=True, help="comma-separated domain ids")
    p.add_argument("--out", type=Path, help="metrics CSV (stdout if omitted)")
    p.add_argument("--masks", type=Path, help="directory for per-image mask and instance rasters")
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (
        ("lodo", cmd_lodo, "leave-one-domain-out table"),
        ("adaptability", cmd_adaptability, "8:1:1 per-domain split table"),
        ("ablation", cmd_ablation, "eight-row module toggle table"),
        ("sweep", cmd_sweep, "grid over kernel radius r and space count N"),
    ):
        p = sub.add_parser(name, help=text)
        _add_config_args(p)
        p.add_argument("--data", type=Path)
        p.add_argument("--out", type=Path, help="CSV path (stdout if omitted)")
        p.add_argument("--log-dir", type=Path, help="directory for per-run training logs")
        if name == "sweep":
            p.add_argument("--r-grid", type=_int_list, default=[5, 10, 15])
            p.add_argument("--n-grid", type=_int_list, default=[1, 2, 3])
        p.set_defaults(func=func)

    p = sub.add_parser("metrics", help="score a predicted instance PNG against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--hd-percentile", type=float, default=None)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable component")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
