"""Finite-difference gradient suite over every trainable component.

A small model (32×32 input, width 16, one encoder block) is built per seed.
All trainable tensors are jittered away from their initial values first so
that no gradient is identically zero (zero-initialized adapter up-projections
would otherwise hide errors in the down-projections). Each component is then
checked coordinate-by-coordinate against central differences, and the
segmentation loss is checked on its own as a function of the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .adapter import encode_image
from .decoder import decoder_cross_attention, decoder_self_attention, fuse_embeddings, loss_sem, mask_logits
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .model import ModelSpec, SegmentationModel, normalize_image
from .prompt import PointPromptSet, encode_position_prompt, encode_semantic_prompt
from .tensor import Tensor

COMPONENTS = ("hs_adapter", "gkp_encoder", "decoder_attention", "mask_head", "loss")


@dataclass
class SuiteResult:
    seed: int
    component: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def component_of(name: str) -> str:
    if name.startswith("enc."):
        return "hs_adapter"
    if name.startswith("gkp."):
        return "gkp_encoder"
    leaf = name.split(".", 1)[1]
    if leaf.startswith(("up", "mlp")):
        return "mask_head"
    return "decoder_attention"


def toy_model(seed: int, cross_projections: bool = False) -> SegmentationModel:
    spec = ModelSpec(
        image_size=(32, 32), d=16, heads=2, blocks=1, patch=16, c_p=16, r=4,
        cross_projections=cross_projections, share_cross=False, seed=seed,
    )
    model = SegmentationModel(spec)
    rng = np.random.default_rng([seed, 99])
    for t in model.trainable().values():
        t.data += rng.normal(0.0, 0.1, size=t.shape)
    return model


def toy_batch(seed: int):
    rng = np.random.default_rng([seed, 98])
    image = rng.normal(size=(3, 32, 32))
    pts = PointPromptSet(rng.uniform(2, 29, size=(3, 2)), 32, 32)
    target = (rng.uniform(size=(1, 32, 32)) < 0.3).astype(np.float64)
    return image, pts, target


def _merge(reports: list[GradCheckReport], name: str) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_relative_error)
    n = sum(r.n_checked for r in reports)
    return GradCheckReport(worst.max_relative_error, worst.worst_index, all(r.passed for r in reports), n,
                           f"{name} (worst: {worst.name})")


def _readout(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def module_objectives(model: SegmentationModel, image, pts, seed: int) -> dict[str, tuple]:
    """Per-component ``(closure, params)`` pairs.

    Each closure is a fixed random linear readout of the component's own
    output, with upstream activations frozen as constants. This keeps the
    gradients of order one, so central differences at the fixed step are
    not swamped by rounding.
    """
    rng = np.random.default_rng([seed, 96])
    dec = model.decoder
    params = model.trainable()
    grid = model.encoder.grid
    h, w = model.spec.image_size
    norm = normalize_image(image)
    dens = model.density(pts)

    emb = encode_image(norm, model.encoder)
    p_sem = encode_semantic_prompt(dens, model.gkp)
    h_const = Tensor(emb.data.copy())
    p_sem_const = Tensor(p_sem.data.copy())
    q_prime = decoder_self_attention(dec.query, encode_position_prompt(pts, model.pe, dec.point_embed), dec)
    g = decoder_cross_attention(fuse_embeddings(h_const, p_sem_const), q_prime, model._psi, dec)
    g_const, q_const = Tensor(g.data.copy()), Tensor(q_prime.data.copy())

    w_emb = rng.normal(size=emb.shape)
    w_sem = rng.normal(size=p_sem.shape)
    w_g = rng.normal(size=g.shape)
    w_logit = rng.normal(size=(dec.categories, h, w))

    def adapter_obj():
        return _readout(encode_image(norm, model.encoder), w_emb)

    def gkp_obj():
        return _readout(encode_semantic_prompt(dens, model.gkp), w_sem)

    def attention_obj():
        qp = decoder_self_attention(dec.query, encode_position_prompt(pts, model.pe, dec.point_embed), dec)
        return _readout(decoder_cross_attention(fuse_embeddings(h_const, p_sem_const), qp, model._psi, dec), w_g)

    def head_obj():
        return _readout(mask_logits(g_const, q_const, grid, h, w, dec), w_logit)

    def pick(component):
        return {k: v for k, v in params.items() if component_of(k) == component}

    return {
        "hs_adapter": (adapter_obj, pick("hs_adapter")),
        "gkp_encoder": (gkp_obj, pick("gkp_encoder")),
        "decoder_attention": (attention_obj, pick("decoder_attention")),
        "mask_head": (head_obj, pick("mask_head")),
    }


def check_seed(seed: int, h: float = 1e-5, tol: float = 1e-4, max_coords: int = 6,
               variants=(False, True)) -> list[SuiteResult]:
    """Gradient check of all components for one seed.

    ``variants`` lists the ``cross_projections`` settings to build (the
    default decoder is projection-free; the learned variant adds weights).
    """
    image, pts, target = toy_batch(seed)
    grouped: dict[str, list[GradCheckReport]] = {c: [] for c in COMPONENTS}
    for cross in variants:
        model = toy_model(seed, cross_projections=cross)
        for component, (fn, params) in module_objectives(model, image, pts, seed).items():
            reps = grad_check_params(fn, params, h=h, tol=tol, max_coords=max_coords,
                                     rng=np.random.default_rng([seed, int(cross)]))
            grouped[component].extend(reps.values())

    rng = np.random.default_rng([seed, 97])
    logits = rng.normal(size=target.shape)
    rep = grad_check(lambda z: loss_sem(F.sigmoid(z), target), logits, h=h, tol=tol,
                     indices=rng.choice(logits.size, size=64, replace=False))
    rep.name = "loss_sem(logits)"
    grouped["loss"].append(rep)
    return [SuiteResult(seed, c, _merge(grouped[c], c)) for c in COMPONENTS]


def run_suite(seeds=(0, 1, 2, 3, 4), **kw) -> list[SuiteResult]:
    out = []
    for s in seeds:
        out.extend(check_seed(s, **kw))
    return out


def format_results(results: list[SuiteResult]) -> str:
    return "\n".join(f"seed {r.seed} {r.component:18s} {r.report}" for r in results)


__all__ = ["COMPONENTS", "SuiteResult", "check_seed", "run_suite", "format_results", "toy_model"]
