"""Training loop, evaluation pipeline and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from ..decoder import LossWeights, loss_sem
from ..instances import connected_components, instances_from_probs
from ..metrics import MetricsReport, mean_report, score
from ..model import ConfigError, SegmentationModel
from .config import RunConfig
from .data import DomainDataset, Sample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite."""


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Checkpoint:
    model: SegmentationModel
    history: list[dict] = field(default_factory=list)
    trained_on: set[str] = field(default_factory=set)  # image ids
    trained_domains: set[str] = field(default_factory=set)
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def build_model(cfg: RunConfig) -> SegmentationModel:
    return SegmentationModel(cfg.model_spec())


def sample_loss(model: SegmentationModel, s: Sample, weights: LossWeights, densities: dict):
    dens = densities.get(s.image_id)
    if dens is None and model.gkp is not None:
        dens = densities[s.image_id] = model.density(s.points)
    pred = model(s.image, s.points, dens)
    target = (s.labels > 0).astype(np.float64)[None]
    return loss_sem(pred, target, weights)


def train(cfg: RunConfig, train_domains: list[DomainDataset], log_path=None, model: SegmentationModel | None = None,
          forbidden_domains: set[str] | None = None) -> Checkpoint:
    """Minimize the semantic loss over every trainable parameter.

    ``forbidden_domains`` lists domain tags that must never reach the
    optimizer; a sample carrying one aborts the run.
    """
    samples = [s for ds in train_domains for s in ds.samples]
    if not samples:
        raise ValueError("empty training set")
    forbidden = forbidden_domains or set()
    for s in samples:
        if s.domain in forbidden:
            raise AssertionError(f"held-out sample {s.image_id} from {s.domain} passed to train")
    model = model or build_model(cfg)
    params = model.trainable()
    opt = Adam(params, cfg.lr)
    weights = cfg.loss_weights()
    rng = np.random.default_rng([cfg.seed, 7])
    ckpt = Checkpoint(
        model,
        trained_on={s.image_id for s in samples},
        trained_domains={s.domain for s in samples},
        frozen_hash_before=model.frozen_hash(),
    )
    densities: dict = {}
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(samples))
            batch_losses = []
            for b0 in range(0, len(order), cfg.batch_size):
                batch_id = b0 // cfg.batch_size
                batch = [samples[i] for i in order[b0 : b0 + cfg.batch_size]]
                opt.zero_grad()
                loss = None
                for s in batch:
                    li = sample_loss(model, s, weights, densities)
                    loss = li if loss is None else loss + li
                loss = loss * (1.0 / len(batch))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {batch_id} "
                        f"(images {[s.image_id for s in batch]})"
                    )
                loss.backward()
                opt.step()
                batch_losses.append(value)
            rec = {"epoch": epoch, "loss": float(np.mean(batch_losses)), "lr": opt.lr}
            ckpt.history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.5f lr %.3g", epoch, rec["loss"], opt.lr)
            opt.lr *= cfg.lr_decay
    finally:
        if log_fh:
            log_fh.close()
    ckpt.frozen_hash_after = model.frozen_hash()
    if ckpt.frozen_hash_after != ckpt.frozen_hash_before:
        raise AssertionError("frozen encoder weights changed during training")
    return ckpt


def predict_instances(model: SegmentationModel, s: Sample, cfg: RunConfig):
    mask = model(s.image, s.points)
    probs = mask.probs.data[0]
    inst = instances_from_probs(probs, cfg.tau, cfg.min_separation, split=cfg.split)
    return probs, inst


def evaluate(cfg: RunConfig, ckpt, test_domain: DomainDataset, dataset: str = "synthetic",
             oracle: bool = False) -> list[MetricsReport]:
    """Per-image metrics on ``test_domain``; ``oracle`` scores GT-derived predictions instead."""
    model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    if not oracle and model is not None:
        spec = model.spec
        if tuple(spec.image_size) != test_domain.samples[0].labels.shape:
            raise ConfigError("checkpoint input size does not match the test images")
    reports = []
    for s in test_domain.samples:
        if oracle:
            inst = connected_components(s.labels > 0) if cfg.oracle_cc else s.labels
        else:
            _, inst = predict_instances(model, s, cfg)
        reports.append(
            score(inst, s.labels, cfg.hd_pct, dataset=dataset, domain=test_domain.domain_id, image_id=s.image_id)
        )
    return reports


def domain_mean(reports: list[MetricsReport], dataset: str, domain: str) -> MetricsReport:
    return mean_report(reports, dataset=dataset, domain=domain, image_id="mean")


# -- checkpoint file format ---------------------------------------------------
# v1, little-endian:
#   magic b"NSCK" | u32 version | u32 n_tensors
#   per tensor: u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | f64 data (row-major)
MAGIC = b"NSCK"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path, model: SegmentationModel) -> None:
    save_tensors(path, {k: t.data for k, t in model.state().items()})


def load_checkpoint(path, cfg: RunConfig) -> SegmentationModel:
    model = build_model(cfg)
    model.load_state(load_tensors(path))
    return model
