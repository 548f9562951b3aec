"""Finite-difference verification suite.

Covers every differentiable primitive of the tensor engine on randomized
small instances, plus the composite operations of the model (attention,
embedding update, correlation extraction, every loss, the calibrated block).
Used by the ``grad-check`` CLI command and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import MultiHeadCrossAttention, TransformerBlock, cross_attention
from .eam import (
    EamStage,
    semantic_aggregation,
    semantic_correlations,
    semantic_filtering,
    semantic_reweighting,
)
from .gradcheck import grad_check
from .losses import LossWeights, aux_loss, icr_loss, mcr_loss, seg_loss, total_loss
from .tensor import Tensor


@dataclass
class SuiteEntry:
    name: str
    kind: str           # primitive | composite
    trials: int
    checked: int
    max_rel_err: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.kind:9s} {self.name:28s} "
                f"trials={self.trials:<4d} elements={self.checked:<6d} "
                f"max_rel_err={self.max_rel_err:.3e}")


def _pos(rng, shape, low=0.5, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _std(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(mag * sign, requires_grad=True)


def _projector(rng, shape):
    """Fixed random projection to a scalar; created once so f stays deterministic."""
    w = Tensor(rng.standard_normal(shape))
    return lambda out: T.reduce_sum(T.mul(out, w))


def _primitive_cases(rng):
    """(name, builder) pairs; builder returns (f, params)."""

    def binary(op):
        def build():
            a = _std(rng, (3, 4))
            b = _std(rng, (4,))  # exercises broadcasting in the backward pass
            proj = _projector(rng, (3, 4))
            return (lambda: proj(op(a, T.broadcast_to(b, (3, 4))))), [a, b]
        return build

    def build_div():
        a = _std(rng, (3, 4))
        b = _pos(rng, (3, 4))
        proj = _projector(rng, (3, 4))
        return (lambda: proj(T.div(a, b))), [a, b]

    def build_scale():
        a = _std(rng, (2, 5))
        c = float(rng.uniform(-2, 2))
        proj = _projector(rng, (2, 5))
        return (lambda: proj(T.scale(a, c))), [a]

    def build_matmul():
        a, b = _std(rng, (3, 4)), _std(rng, (4, 2))
        proj = _projector(rng, (3, 2))
        return (lambda: proj(T.matmul(a, b))), [a, b]

    def build_bmm():
        a, b = _std(rng, (2, 3, 4)), _std(rng, (2, 4, 2))
        proj = _projector(rng, (2, 3, 2))
        return (lambda: proj(T.batched_matmul(a, b))), [a, b]

    def build_softmax():
        x = _std(rng, (2, 5))
        proj = _projector(rng, (2, 5))
        return (lambda: proj(T.softmax(x, axis=1))), [x]

    def build_log():
        x = _pos(rng, (3, 3))
        proj = _projector(rng, (3, 3))
        return (lambda: proj(T.log(x))), [x]

    def build_exp():
        x = _std(rng, (3, 3))
        proj = _projector(rng, (3, 3))
        return (lambda: proj(T.exp(x))), [x]

    def build_relu():
        x = _away_from_zero(rng, (4, 4))
        proj = _projector(rng, (4, 4))
        return (lambda: proj(T.relu(x))), [x]

    def build_gelu():
        x = _std(rng, (4, 4))
        proj = _projector(rng, (4, 4))
        return (lambda: proj(T.gelu(x))), [x]

    def build_reshape():
        x = _std(rng, (2, 6))
        proj = _projector(rng, (3, 4))
        return (lambda: proj(T.reshape(x, (3, 4)))), [x]

    def build_permute():
        x = _std(rng, (2, 3, 4))
        proj = _projector(rng, (4, 2, 3))
        return (lambda: proj(T.permute(x, (2, 0, 1)))), [x]

    def build_concat():
        a, b = _std(rng, (2, 3)), _std(rng, (2, 2))
        proj = _projector(rng, (2, 5))
        return (lambda: proj(T.concat([a, b], axis=1))), [a, b]

    def build_slice():
        x = _std(rng, (4, 5))
        proj = _projector(rng, (4, 3))
        return (lambda: proj(T.slice_axis(x, 1, 1, 4))), [x]

    def build_reduce_sum():
        x = _std(rng, (3, 4, 2))
        proj = _projector(rng, (4,))
        return (lambda: proj(T.reduce_sum(x, axes=(0, 2)))), [x]

    def build_broadcast():
        x = _std(rng, (1, 4))
        proj = _projector(rng, (3, 4))
        return (lambda: proj(T.broadcast_to(x, (3, 4)))), [x]

    def build_layer_norm():
        x, g, b = _std(rng, (2, 6)), _pos(rng, (6,)), _std(rng, (6,))
        proj = _projector(rng, (2, 6))
        return (lambda: proj(T.layer_norm(x, g, b))), [x, g, b]

    def build_pointwise():
        x, w, b = _std(rng, (3, 3, 4)), _std(rng, (4, 2)), _std(rng, (2,))
        proj = _projector(rng, (3, 3, 2))
        return (lambda: proj(T.pointwise_linear(x, w, b))), [x, w, b]

    def build_gather():
        x = _std(rng, (3, 4))
        idx = rng.integers(0, 3, size=(2, 4))
        proj = _projector(rng, (2, 4))
        return (lambda: proj(T.gather(x, 0, idx))), [x]

    def build_cosine():
        a, b = _std(rng, (3, 5)), _std(rng, (3, 5))
        proj = _projector(rng, (3,))
        return (lambda: proj(T.cosine_similarity(a, b))), [a, b]

    return [
        ("add", binary(T.add)),
        ("sub", binary(T.sub)),
        ("elementwise_mul", binary(T.mul)),
        ("scalar_mul", build_scale),
        ("div", build_div),
        ("matmul", build_matmul),
        ("batched_matmul", build_bmm),
        ("softmax", build_softmax),
        ("log", build_log),
        ("exp", build_exp),
        ("relu", build_relu),
        ("gelu", build_gelu),
        ("reshape", build_reshape),
        ("permute", build_permute),
        ("concat", build_concat),
        ("slice", build_slice),
        ("reduce_sum", build_reduce_sum),
        ("broadcast", build_broadcast),
        ("layer_norm", build_layer_norm),
        ("pointwise_linear", build_pointwise),
        ("gather", build_gather),
        ("cosine_similarity", build_cosine),
    ]


def _composite_cases(rng):
    z, d, n, s = 2, 8, 2, 6

    def build_cross_attention():
        q = _std(rng, (z, d))
        f = _std(rng, (s, d))
        wq, wk, wv = (_std(rng, (d, d // n), 0.5) for _ in range(3))

        def f_():
            out, scores = cross_attention(q, f, wq, wk, wv)
            return T.reduce_sum(T.mul(out, out)) + T.reduce_sum(T.mul(scores, scores))
        return f_, [q, f, wq, wk, wv]

    def build_mca():
        mca = MultiHeadCrossAttention(d, n, rng)
        q = _std(rng, (z, d))
        f = _std(rng, (s, d))

        def f_():
            out, maps = mca(q, f)
            return T.reduce_sum(T.mul(out, out)) + T.reduce_sum(T.mul(maps, maps))
        return f_, [q, f] + mca.params()

    def build_embedding_update():
        stage = EamStage(d, n, z, rng)
        q = _std(rng, (z, d))
        feats = _std(rng, (2, 3, d))

        def f_():
            q_out, maps = stage.update(q, feats)
            return T.reduce_sum(T.mul(q_out, q_out)) + T.reduce_sum(T.mul(maps, maps))
        return f_, [q, feats] + stage.params()

    def build_filtering():
        q = _std(rng, (z, d))
        maps = _std(rng, (z, n, 2, 2))
        kernels = _std(rng, (z, d, n))
        proj = _projector(rng, (z, z, 2, 2))
        return (lambda: proj(semantic_filtering(q, maps, kernels))), [q, maps, kernels]

    def build_reweighting():
        maps = _std(rng, (z, n, 2, 2))
        sim = _std(rng, (z, 2, 2))
        proj = _projector(rng, (z, n, 2, 2))
        return (lambda: proj(semantic_reweighting(maps, sim))), [maps, sim]

    def build_aggregation():
        maps = _std(rng, (z, n, 2, 2))
        sim = _std(rng, (z, 2, 2))
        proj = _projector(rng, (z,))
        return (lambda: proj(
            semantic_aggregation(semantic_reweighting(maps, sim), sim))), [maps, sim]

    def build_correlations():
        q = _std(rng, (z, d))
        maps = _std(rng, (z, n, 2, 2))
        kernels = _std(rng, (z, d, n))
        proj = _projector(rng, (z, z))
        return (lambda: proj(semantic_correlations(q, maps, kernels))), [q, maps, kernels]

    def build_seg_loss():
        logits = _std(rng, (z, 4, 4), 2.0)
        labels = rng.integers(0, z, size=(4, 4))
        return (lambda: seg_loss(logits, labels)), [logits]

    def build_aux_loss():
        stage = EamStage(d, n, z, rng)
        maps = _std(rng, (z, n, 2, 2))
        labels = rng.integers(0, z, size=(4, 4))
        return (lambda: aux_loss([stage.aux_logits(maps)], labels)), \
            [maps, stage.aux.weight, stage.aux.bias]

    def build_mcr():
        qa, qb = _std(rng, (z, d)), _std(rng, (z, d))
        return (lambda: mcr_loss(qa, qb)), [qa, qb]

    def build_icr():
        ea = [_std(rng, (z, z)) for _ in range(3)]
        eb = [_std(rng, (z, z)) for _ in range(3)]
        return (lambda: icr_loss(ea, eb, temperature=4.0)), ea + eb

    def build_total():
        # every loss input of the weighted objective on a 2-class 4x4 instance
        labels = {m: rng.integers(0, z, size=(4, 4)) for m in ("m1", "m2")}
        logits = {m: _std(rng, (z, 4, 4), 2.0) for m in ("m1", "m2")}
        auxl = {m: _std(rng, (z, 2, 2), 2.0) for m in ("m1", "m2")}
        qs = {m: _std(rng, (z, d)) for m in ("m1", "m2")}
        es = {m: [_std(rng, (z, z))] for m in ("m1", "m2")}
        weights = LossWeights(aux=0.3, mcr=1.0, icr=1.0, temperature=4.0)

        def f_():
            seg = {m: seg_loss(logits[m], labels[m]) for m in logits}
            aux = {m: seg_loss(auxl[m], labels[m][1::2, 1::2]) for m in auxl}
            mcr = mcr_loss(qs["m1"], qs["m2"])
            icr = icr_loss(es["m1"], es["m2"], weights.temperature)
            return total_loss(seg, aux, weights, mcr=mcr, icr=icr).total
        params = (list(logits.values()) + list(auxl.values()) + list(qs.values())
                  + [es["m1"][0], es["m2"][0]])
        return f_, params

    def build_calibrated_block():
        block = TransformerBlock(d, n, rng, calibrated=True, class_count=z, embed_dim=d)
        x = _std(rng, (4, d))
        q = _std(rng, (z, d))
        proj = _projector(rng, (4, d))
        return (lambda: proj(block(x, class_embed=q))), [x, q] + block.params()

    return [
        ("cross_attention", build_cross_attention),
        ("multi_head_cross_attention", build_mca),
        ("embedding_update", build_embedding_update),
        ("semantic_filtering", build_filtering),
        ("semantic_reweighting", build_reweighting),
        ("semantic_aggregation", build_aggregation),
        ("semantic_correlations", build_correlations),
        ("seg_ce_dice", build_seg_loss),
        ("aux_multi_scale", build_aux_loss),
        ("modality_consistency", build_mcr),
        ("image_consistency", build_icr),
        ("weighted_total", build_total),
        ("calibrated_block", build_calibrated_block),
    ]


def _run_cases(cases, kind, trials, tol, seed) -> list:
    entries = []
    for name, builder in cases:
        max_err = 0.0
        checked = 0
        ok = True
        for _ in range(trials):
            f, params = builder()
            rep = grad_check(f, params, tol=tol)
            max_err = max(max_err, rep.max_rel_err)
            checked += rep.checked
            ok = ok and rep.passed
        entries.append(SuiteEntry(name, kind, trials, checked, max_err, ok))
    return entries


def run_suite(primitive_trials: int = 100, composite_trials: int = 5,
              tol: float = 1e-4, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    entries = _run_cases(_primitive_cases(rng), "primitive", primitive_trials, tol, seed)
    rng2 = np.random.default_rng(seed + 1)
    entries += _run_cases(_composite_cases(rng2), "composite", composite_trials, tol, seed)
    return entries
