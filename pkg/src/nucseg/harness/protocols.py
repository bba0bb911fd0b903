"""Evaluation protocols built on :func:`train` and :func:`evaluate`.

Every protocol returns a list of row dicts and can write them as CSV with
:func:`write_table`. Floats are printed at fixed precision so that two runs
with the same configuration produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass

import numpy as np

from ..metrics import METRIC_NAMES, MetricsReport
from .config import RunConfig
from .data import DomainDataset
from .train import Checkpoint, build_model, domain_mean, evaluate, train

log = logging.getLogger(__name__)

PARAM_FIELDS = ("params_adapter", "params_gkp", "params_decoder", "params_trainable")
LODO_FIELDS = ("method", "target", "train_domains", "n_test", *METRIC_NAMES, *PARAM_FIELDS)
ADAPT_FIELDS = ("method", "domain", "n_train", "n_val", "n_test", *METRIC_NAMES, *PARAM_FIELDS)
ABLATION_FIELDS = ("row", "hs_adapter", "gkp_encoder", "tsm_decoder", "target", *METRIC_NAMES, *PARAM_FIELDS)
SWEEP_FIELDS = ("r", "n_spaces", "target", *METRIC_NAMES, *PARAM_FIELDS)

# rows of the toggle grid: baseline, each module alone, each pair, everything
ABLATION_GRID = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def method_name(cfg: RunConfig) -> str:
    on = [tag for tag, flag in (("M1", cfg.hs_adapter), ("M2", cfg.gkp_encoder), ("M3", cfg.tsm_decoder)) if flag]
    return "+".join(on) if on else "baseline"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4f}"
    return str(v)


def write_table(path_or_file, rows: list[dict], fields) -> None:
    own = not hasattr(path_or_file, "write")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for r in rows:
            wr.writerow([_fmt(r[f]) for f in fields])
    finally:
        if own:
            fh.close()


def table_text(rows: list[dict], fields) -> str:
    buf = io.StringIO()
    write_table(buf, rows, fields)
    return buf.getvalue()


def _metric_cols(report: MetricsReport) -> dict:
    return {m: getattr(report, m) for m in METRIC_NAMES}


def _param_cols(ckpt: Checkpoint) -> dict:
    groups = ckpt.model.parameter_groups()
    return {f"params_{k}": groups[k] for k in ("adapter", "gkp", "decoder", "trainable")}


def check_disjoint(ckpt: Checkpoint, test: DomainDataset, held_out_domain: bool = True) -> None:
    """Fail loudly if any test image (or, for held-out tests, its domain) reached the optimizer."""
    leaked = ckpt.trained_on & {s.image_id for s in test.samples}
    if leaked:
        raise AssertionError(f"test images used for training: {sorted(leaked)[:5]}")
    if held_out_domain:
        seen = ckpt.trained_domains & {s.domain for s in test.samples}
        if seen:
            raise AssertionError(f"held-out domain {sorted(seen)} was used for training")


def run_single(cfg: RunConfig, train_domains: list[DomainDataset], test: DomainDataset, log_path=None,
               held_out: bool = True):
    """Train on ``train_domains`` and score ``test``; returns (checkpoint, mean report)."""
    forbidden = {test.domain_id} if held_out else None
    ckpt = train(cfg, train_domains, log_path=log_path, forbidden_domains=forbidden)
    if held_out:
        check_disjoint(ckpt, test)
    reports = evaluate(cfg, ckpt, test)
    return ckpt, domain_mean(reports, "synthetic", test.domain_id)


def run_lodo(cfg: RunConfig, domains: list[DomainDataset], log_dir=None) -> list[dict]:
    """Leave-one-domain-out: one row per held-out target domain."""
    if len(domains) < 2:
        raise ValueError("leave-one-domain-out needs at least two domains")
    ids = [d.domain_id for d in domains]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate domain ids: {ids}")
    rows = []
    for fold, target in enumerate(domains):
        sources = [d for d in domains if d.domain_id != target.domain_id]
        log_path = None if log_dir is None else f"{log_dir}/lodo_{target.domain_id}.jsonl"
        ckpt, mean = run_single(cfg, sources, target, log_path)
        row = {
            "method": method_name(cfg),
            "target": target.domain_id,
            "train_domains": "+".join(d.domain_id for d in sources),
            "n_test": len(target),
            **_metric_cols(mean),
            **_param_cols(ckpt),
        }
        log.info("lodo fold %d target %s dice %.2f aji %.2f", fold, target.domain_id, mean.dice, mean.aji)
        rows.append(row)
    return rows


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def split_811(n: int, seed: int, salt: int = 0) -> Split:
    """Seeded 8:1:1 partition of ``range(n)``."""
    if n < 3:
        raise ValueError("an 8:1:1 split needs at least 3 images")
    n_hold = max(1, int(round(n / 10)))
    perm = np.random.default_rng([seed, salt]).permutation(n).tolist()
    test = tuple(sorted(perm[:n_hold]))
    val = tuple(sorted(perm[n_hold : 2 * n_hold]))
    tr = tuple(sorted(perm[2 * n_hold :]))
    return Split(tr, val, test)


def run_adaptability(cfg: RunConfig, domains: list[DomainDataset], log_dir=None) -> list[dict]:
    """Train once on the union of per-domain training splits, score each test split.

    The validation split is carved out and reported but not used for model
    selection: training always runs for ``cfg.epochs`` epochs.
    """
    splits = [split_811(len(d), cfg.seed, salt=k) for k, d in enumerate(domains)]
    train_sets = [d.subset(s.train) for d, s in zip(domains, splits)]
    log_path = None if log_dir is None else f"{log_dir}/adaptability.jsonl"
    ckpt = train(cfg, train_sets, log_path=log_path)
    rows = []
    for d, s in zip(domains, splits):
        test = d.subset(s.test)
        check_disjoint(ckpt, test, held_out_domain=False)
        mean = domain_mean(evaluate(cfg, ckpt, test), "synthetic", d.domain_id)
        rows.append(
            {
                "method": method_name(cfg),
                "domain": d.domain_id,
                "n_train": len(s.train),
                "n_val": len(s.val),
                "n_test": len(s.test),
                **_metric_cols(mean),
                **_param_cols(ckpt),
            }
        )
    return rows


def ablation_configs(cfg: RunConfig) -> list[RunConfig]:
    return [cfg.replace(hs_adapter=a, gkp_encoder=g, tsm_decoder=t) for a, g, t in ABLATION_GRID]


def run_ablation(cfg: RunConfig, domains: list[DomainDataset], log_dir=None) -> list[dict]:
    """The eight-row module toggle grid; the last domain is the held-out target."""
    if len(domains) < 2:
        raise ValueError("ablation needs at least one source and one target domain")
    sources, target = domains[:-1], domains[-1]
    rows = []
    for i, row_cfg in enumerate(ablation_configs(cfg), 1):
        log_path = None if log_dir is None else f"{log_dir}/ablation_row{i}.jsonl"
        ckpt, mean = run_single(row_cfg, sources, target, log_path)
        params = _param_cols(ckpt)
        log.info("ablation row %d (%s): %d trainable parameters", i, method_name(row_cfg), params["params_trainable"])
        rows.append(
            {
                "row": i,
                "hs_adapter": row_cfg.hs_adapter,
                "gkp_encoder": row_cfg.gkp_encoder,
                "tsm_decoder": row_cfg.tsm_decoder,
                "target": target.domain_id,
                **_metric_cols(mean),
                **params,
            }
        )
    return rows


def run_sweep(cfg: RunConfig, domains: list[DomainDataset], r_values, n_values, log_dir=None) -> list[dict]:
    """Grid over kernel radius ``r`` and adapter space count ``N``."""
    sources, target = domains[:-1], domains[-1]
    rows = []
    for r, n in itertools.product(r_values, n_values):
        ckpt, mean = run_single(cfg.replace(r=int(r), n_spaces=int(n)), sources, target)
        rows.append({"r": int(r), "n_spaces": int(n), "target": target.domain_id, **_metric_cols(mean),
                     **_param_cols(ckpt)})
    return rows


def parameter_log(cfg: RunConfig) -> list[dict]:
    """Parameter counts for every ablation row without training anything."""
    out = []
    for i, row_cfg in enumerate(ablation_configs(cfg), 1):
        model = build_model(row_cfg)
        out.append({"row": i, "method": method_name(row_cfg), **model.parameter_groups(),
                    "frozen_hash": model.frozen_hash()})
    return out
