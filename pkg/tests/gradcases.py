"""Seeded gradient-check instances covering every differentiable piece.

Each builder takes a Generator and returns ``(f, leaves)`` for
``finite_diff_check``. Elementwise ops are probed through a random linear
functional so no coordinate's gradient cancels by symmetry.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from taskseg import gradkernel as gk
from taskseg.annotations import ClassTable, PanopticLabel, Segment, TaskKind, derive_task_gt
from taskseg.config import Config
from taskseg.losses import LossWeights, Temperature, classification_loss, contrastive_loss, mask_losses, total_loss
from taskseg.matcher import match_stage
from taskseg.model import build_model
from taskseg.textgen import build_text_list

RTOL = 2e-3
STEP = 1e-3


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return gk.parameter(rng.uniform(low, high, shape))


def _probe(out: gk.Tensor, rng) -> gk.Tensor:
    r = rng.normal(size=out.shape)
    return gk.sum(out * r)


def _unary(op, low=-2.0, high=2.0):
    def build(rng):
        x = _leaf(rng, 3, 4, low=low, high=high)
        r = rng.normal(size=(3, 4))
        return (lambda: gk.sum(op(x) * r)), [x]
    return build


def _binary(op, low_b=-2.0, high_b=2.0, shape_b=(3, 4)):
    def build(rng):
        a = _leaf(rng, 3, 4, low=-2, high=2)
        b = _leaf(rng, *shape_b, low=low_b, high=high_b)
        r = rng.normal(size=(3, 4))
        return (lambda: gk.sum(op(a, b) * r)), [a, b]
    return build


def _matmul_2d(rng):
    a, b = _leaf(rng, 3, 5), _leaf(rng, 5, 2)
    r = rng.normal(size=(3, 2))
    return (lambda: gk.sum(gk.matmul(a, b) * r)), [a, b]


def _matmul_batched(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 3)
    r = rng.normal(size=(2, 3, 3))
    return (lambda: gk.sum(gk.matmul(a, b) * r)), [a, b]


def _matmul_nd_2d(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    r = rng.normal(size=(2, 3, 5))
    return (lambda: gk.sum(gk.matmul(a, b) * r)), [a, b]


def _transpose(rng):
    a = _leaf(rng, 2, 3, 4)
    r = rng.normal(size=(4, 2, 3))
    return (lambda: gk.sum(gk.transpose(a, (2, 0, 1)) * r)), [a]


def _reshape(rng):
    a = _leaf(rng, 3, 4)
    r = rng.normal(size=(2, 6))
    return (lambda: gk.sum(gk.reshape(a, (2, 6)) * r)), [a]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 4, 3)
    r = rng.normal(size=(6, 3))
    return (lambda: gk.sum(gk.concat([a, b], axis=0) * r)), [a, b]


def _take_rows(rng):
    a = _leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=(2, 4))
    r = rng.normal(size=(2, 4, 3))
    return (lambda: gk.sum(gk.take(a, idx, axis=0) * r)), [a]


def _take_cols(rng):
    a = _leaf(rng, 3, 5)
    idx = rng.integers(0, 5, size=6)
    r = rng.normal(size=(3, 6))
    return (lambda: gk.sum(gk.take(a, idx, axis=1) * r)), [a]


def _getitem(rng):
    a = _leaf(rng, 4, 5)
    r = rng.normal(size=(3,))
    return (lambda: gk.sum(a[np.array([0, 2, 3]), np.array([1, 1, 4])] * r)), [a]


def _slice(rng):
    a = _leaf(rng, 4, 5)
    r = rng.normal(size=(2, 3))
    return (lambda: gk.sum(a[1:3, ::2] * r)), [a]


def _sum_axis(rng):
    a = _leaf(rng, 3, 4)
    r = rng.normal(size=(3, 1))
    return (lambda: gk.sum(gk.sum(a, axis=1, keepdims=True) * r)), [a]


def _mean_axis(rng):
    a = _leaf(rng, 3, 4)
    r = rng.normal(size=(4,))
    return (lambda: gk.sum(gk.mean(a, axis=0) * r)), [a]


def _softmax(rng):
    x = _leaf(rng, 3, 5, low=-3, high=3)
    tau = float(rng.uniform(0.3, 2.0))
    r = rng.normal(size=(3, 5))
    return (lambda: gk.sum(gk.softmax_rows(x, tau) * r)), [x]


def _log_softmax(rng):
    x = _leaf(rng, 3, 5, low=-3, high=3)
    r = rng.normal(size=(3, 5))
    return (lambda: gk.sum(gk.log_softmax(x) * r)), [x]


def _layer_norm(rng):
    x = _leaf(rng, 3, 6, low=-2, high=2)
    g, b = _leaf(rng, 6), _leaf(rng, 6)
    r = rng.normal(size=(3, 6))
    return (lambda: gk.sum(gk.layer_norm(x, g, b) * r)), [x, g, b]


def _l2_normalize(rng):
    x = _leaf(rng, 3, 4, low=0.2, high=1.5)
    r = rng.normal(size=(3, 4))
    return (lambda: gk.sum(gk.l2_normalize(x) * r)), [x]


def _attention(rng):
    q, k, v = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    mask = rng.random((3, 5)) < 0.4
    mask[0] = True  # exercises the fully blocked fallback
    r = rng.normal(size=(3, 4))
    return (lambda: gk.sum(gk.attention(q, k, v, mask) * r)), [q, k, v]


def _matmul_softmax_chain(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    r = rng.normal(size=(3, 5))
    return (lambda: gk.sum(gk.softmax_rows(gk.matmul(a, b)) * r)), [a, b]


def _composed(rng):
    """Three random ops in sequence."""
    unary = [gk.tanh, gk.sigmoid, gk.gelu, gk.exp, gk.softplus, gk.square]
    ops = [unary[i] for i in rng.integers(0, len(unary), 3)]
    x = _leaf(rng, 3, 4, low=-1, high=1)
    r = rng.normal(size=(3, 4))

    def f():
        y = x
        for op in ops:
            y = op(y) * 0.5
        return gk.sum(y * r)
    return f, [x]


# ---- losses


def _contrastive(rng):
    b = int(rng.integers(2, 5))
    obj, txt = _leaf(rng, b, 6), _leaf(rng, b, 6)
    temp = Temperature(float(rng.uniform(1.0, 15.0)))
    return (lambda: contrastive_loss(obj, txt, temp)), [obj, txt, temp.log_tau]


def _classification(rng):
    n, k1 = 6, 4
    logits = _leaf(rng, n, k1, low=-2, high=2)
    assigned = rng.integers(0, k1, size=n)
    w = LossWeights()
    return (lambda: classification_loss(logits, assigned, w)), [logits]


def _bce(rng):
    x = _leaf(rng, 3, 4, 4, low=-3, high=3)
    g = rng.random((3, 4, 4)) < 0.5
    return (lambda: mask_losses(x, g)[0]), [x]


def _dice(rng):
    x = _leaf(rng, 3, 4, 4, low=-3, high=3)
    g = rng.random((3, 4, 4)) < 0.5
    return (lambda: mask_losses(x, g)[1]), [x]


# ---- end to end

TOY_CLASSES = ClassTable.from_pairs([("car", True), ("person", True), ("road", False)])


def toy_config(seed: int = 0) -> Config:
    cfg = Config()
    cfg.model.image_size = 32
    cfg.model.hidden_dim = 8
    cfg.model.num_queries = 6
    cfg.model.num_text = 4
    cfg.model.num_ctx = 2
    cfg.model.init_layers = 1
    cfg.model.token_width = 6
    cfg.train.seed = seed
    return cfg.validate()


def toy_scene(rng) -> tuple[np.ndarray, PanopticLabel]:
    seg = np.full((32, 32), 3, dtype=np.int64)
    y, x = rng.integers(0, 16, 2)
    seg[y:y + 12, x:x + 12] = 1
    y, x = rng.integers(8, 24, 2)
    seg[y:y + 8, x:x + 8] = 2
    label = PanopticLabel(seg, [Segment(1, 0, True), Segment(2, 1, True), Segment(3, 2, False)])
    image = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    return image, label


def end_to_end(rng, tasks=(TaskKind.PANOPTIC, TaskKind.SEMANTIC)):
    """Total training loss of a toy model over a two-sample window.

    Matchings are computed once at the base point and held fixed: the
    assignment is piecewise constant and carries no gradient.
    """
    cfg = toy_config(int(rng.integers(1 << 16)))
    model = build_model(cfg, TOY_CLASSES)
    temp = Temperature()
    weights = LossWeights()
    samples = []
    for task in tasks:
        image, label = toy_scene(rng)
        samples.append((image, derive_task_gt(label, TOY_CLASSES, task), task))
    matches: dict[int, list] = {}

    def f():
        total, obj, txt = None, [], []
        for i, (image, gt, task) in enumerate(samples):
            out, bundle = model(image, task)
            if i not in matches:
                from taskseg.losses import target_masks

                masks = target_masks(gt, out.mask_logits.shape[1:])
                matches[i] = [match_stage(c.data, m.data, gt.class_ids, masks, weights) for c, m in out.stages()]
            part = total_loss(out, matches[i], gt, 0.0, weights).total
            total = part if total is None else total + part
            obj.append(gk.mean(bundle.object_queries, axis=0, keepdims=True))
            txt.append(gk.mean(model.text_mapper(build_text_list(gt, TOY_CLASSES, cfg.model.num_text)),
                               axis=0, keepdims=True))
        cl = contrastive_loss(gk.concat(obj), gk.concat(txt), temp)
        return total * (1.0 / len(samples)) + cl * weights.contrastive

    leaves = [p for _, p in model.named_parameters()] + [temp.log_tau]
    return f, leaves


OP_CASES: dict[str, Callable] = {
    "add": _binary(gk.add),
    "add_broadcast": _binary(gk.add, shape_b=(1, 4)),
    "sub": _binary(gk.sub),
    "mul": _binary(gk.mul),
    "mul_broadcast": _binary(gk.mul, shape_b=(3, 1)),
    "div": _binary(gk.div, low_b=0.5, high_b=2.0),
    "neg": _unary(gk.neg),
    "exp": _unary(gk.exp),
    "log": _unary(gk.log, 0.2, 3.0),
    "square": _unary(gk.square),
    "sqrt": _unary(gk.sqrt, 0.2, 3.0),
    "sigmoid": _unary(gk.sigmoid, -4, 4),
    "softplus": _unary(gk.softplus, -4, 4),
    "tanh": _unary(gk.tanh),
    "gelu": _unary(gk.gelu, -3, 3),
    "matmul": _matmul_2d,
    "matmul_batched": _matmul_batched,
    "matmul_nd_2d": _matmul_nd_2d,
    "transpose": _transpose,
    "reshape": _reshape,
    "concat": _concat,
    "take_rows": _take_rows,
    "take_cols": _take_cols,
    "getitem_fancy": _getitem,
    "getitem_slice": _slice,
    "sum_axis": _sum_axis,
    "mean_axis": _mean_axis,
    "softmax_rows": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "l2_normalize": _l2_normalize,
    "attention": _attention,
    "matmul_softmax": _matmul_softmax_chain,
    "composed_3op": _composed,
}

LOSS_CASES: dict[str, Callable] = {
    "contrastive": _contrastive,
    "classification": _classification,
    "bce": _bce,
    "dice": _dice,
}


def seeded_instances(per_case: int = 3, seed: int = 2024):
    """(name, seed) pairs: ``per_case`` seeds for every op and loss case."""
    out = []
    for name in list(OP_CASES) + list(LOSS_CASES):
        for k in range(per_case):
            out.append((name, seed + 1000 * k + len(out)))
    return out


def run_case(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    builder = OP_CASES.get(name) or LOSS_CASES[name]
    f, leaves = builder(rng)
    return gk.finite_diff_check(f, leaves, step=STEP, max_coords=None, rng=rng)
