"""Finite-difference verification of every primitive and of the model losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .backbone import ModelConfig, forward_full, init_params, is_descriptor_param, param_group
from .descriptor import ground_truth_descriptor
from .geometry import PointCloud
from .losses import cls_loss, descriptor_loss, region_similarity_loss, total_loss

TOLERANCE = 1e-4
PRIMITIVE_TOLERANCE = 1e-6


def _shape(rng, max_dim=8):
    return int(rng.integers(1, max_dim + 1)), int(rng.integers(1, max_dim + 1))


def _away_from(rng, shape, points, gap=0.05, scale=1.0):
    """Normal draws nudged at least ``gap`` away from each kink in ``points``."""
    x = rng.normal(scale=scale, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-300) * gap * (1 + rng.random(near.sum()))
    return x


def _broadcast_partner(rng, shape):
    r, c = shape
    choice = rng.integers(3)
    return [(r, c), (1, c), (r, 1)][choice]


def _case_binary(tag):
    def build(g, rng):
        shape = _shape(rng)
        a = g.param(rng.normal(size=shape), "a")
        b_shape = _broadcast_partner(rng, shape)
        if tag == "div":
            b = g.param(rng.uniform(0.5, 2.0, size=b_shape), "b")
        else:
            b = g.param(rng.normal(size=b_shape), "b")
        return g.apply(tag, a, b)
    return build


def _case_unary(tag, draw):
    def build(g, rng):
        x = g.param(draw(rng, _shape(rng)), "x")
        return g.apply(tag, x)
    return build


def _case_matmul(g, rng):
    r, k = _shape(rng)
    c = int(rng.integers(1, 9))
    return g.param(rng.normal(size=(r, k)), "a") @ g.param(rng.normal(size=(k, c)), "b")


def _case_maxpool(g, rng):
    r, c = _shape(rng)
    # distinct entries per column, separated by at least 0.1
    x = np.stack([rng.permutation(r) * 0.1 + rng.uniform(0, 0.02, r) for _ in range(c)], axis=1)
    return dc.maxpool_cols(g.param(x, "x"))


def _case_row_norm(g, rng):
    return dc.row_norm(g.param(rng.normal(size=_shape(rng)) + 0.1, "x"))


def _case_sum(g, rng):
    axis = [None, 1][int(rng.integers(2))]
    return dc.sum(g.param(rng.normal(size=_shape(rng)), "x"), axis=axis)


def _case_concat(g, rng):
    r, c = _shape(rng)
    c2 = int(rng.integers(1, 9))
    return dc.concat_cols([g.param(rng.normal(size=(r, c)), "a"), g.param(rng.normal(size=(r, c2)), "b")])


def _case_gather(g, rng):
    r, c = _shape(rng)
    idx = rng.integers(0, r, size=int(rng.integers(1, 9)))
    return dc.gather_rows(g.param(rng.normal(size=(r, c)), "x"), idx)


def _case_broadcast(g, rng):
    _, c = _shape(rng)
    return dc.broadcast_rows(g.param(rng.normal(size=(1, c)), "x"), int(rng.integers(1, 9)))


def _case_stop(g, rng):
    x = g.param(rng.normal(size=_shape(rng)), "x")
    return dc.stop_gradient(x) * x


def _case_clip(g, rng):
    x = g.param(_away_from(rng, _shape(rng), (-0.5, 0.5)), "x")
    return dc.clip(x, -0.5, 0.5)


def _case_clamp_min(g, rng):
    x = g.param(_away_from(rng, _shape(rng), (0.0,)), "x")
    return dc.clamp_min(x, 0.0)


PRIMITIVE_CASES = {
    "add": _case_binary("add"),
    "sub": _case_binary("sub"),
    "mul": _case_binary("mul"),
    "div": _case_binary("div"),
    "neg": _case_unary("neg", lambda rng, s: rng.normal(size=s)),
    "matmul": _case_matmul,
    "relu": _case_unary("relu", lambda rng, s: _away_from(rng, s, (0.0,))),
    "sigmoid": _case_unary("sigmoid", lambda rng, s: rng.normal(size=s)),
    "log": _case_unary("log", lambda rng, s: rng.uniform(0.5, 3.0, size=s)),
    "exp": _case_unary("exp", lambda rng, s: rng.normal(size=s)),
    "softmax_rows": _case_unary("softmax_rows", lambda rng, s: rng.normal(size=s)),
    "maxpool_cols": _case_maxpool,
    "row_norm": _case_row_norm,
    "sum": _case_sum,
    "mean": _case_unary("mean", lambda rng, s: rng.normal(size=s)),
    "concat_cols": _case_concat,
    "gather_rows": _case_gather,
    "broadcast_rows": _case_broadcast,
    "stop_gradient": _case_stop,
    "clip": _case_clip,
    "clamp_min": _case_clamp_min,
}


def check_primitive(tag: str, trials: int = 100, seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative error over random small instances of one primitive.

    The probe loss is a random linear functional of the primitive's output.
    """
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([seed, t, sum(map(ord, tag))])
        g = dc.Graph()
        out = PRIMITIVE_CASES[tag](g, rng)
        loss = dc.sum(out * rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape))
        analytic = dc.backward(g, loss)
        for name in g.params:
            worst = max(worst, dc.grad_check(g, loss, name, h, analytic))
    return worst


# -- model-level checks ------------------------------------------------------------

TINY = ModelConfig(n_classes=4, encoder_widths=(8, 16, 16), head_widths=(16, 8), descriptor_widths=(8, 8))


def tiny_problem(seed: int = 0, n_points: int = 16):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 1, size=(n_points, 3))
    labels = np.array([0, 1, 3] * n_points)[:n_points]  # class 2 absent
    params = init_params(TINY, rng)
    # small random biases so no unit sits exactly on a ReLU kink
    for name in params:
        if name.endswith(".b"):
            params[name] = rng.normal(scale=0.1, size=params[name].shape)
    return PointCloud(coords, labels), params


LOSS_TERMS = ("cls", "des_full_bce", "des_paper_exact", "rs", "total")


def build_loss(term: str, cloud: PointCloud, params, stop_gradient: bool = True):
    out = forward_full(cloud, params, stop_gradient=stop_gradient)
    truth = ground_truth_descriptor(cloud.labels, TINY.n_classes)
    # fixed selection: the check is about derivatives, not about which points win
    selected = np.arange(0, len(cloud), 3)
    pieces = {
        "cls": lambda: cls_loss(out.refined, cloud.labels),
        "des_full_bce": lambda: descriptor_loss(out.descriptor, truth, "full_bce"),
        "des_paper_exact": lambda: descriptor_loss(out.descriptor, truth, "paper_exact"),
        "rs": lambda: region_similarity_loss(out.point_features, cloud, selected, k=3),
    }
    if term == "total":
        loss = total_loss(pieces["cls"](), pieces["des_full_bce"](), pieces["rs"](), 1.0, 1.0, 1.0)
    else:
        loss = pieces[term]()
    return out.graph, loss


@dataclass
class GroupResult:
    term: str
    group: str
    error: float
    max_abs_grad: float
    note: str = ""

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


@dataclass
class Report:
    primitives: dict[str, float] = field(default_factory=dict)
    groups: list[GroupResult] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (all(e <= PRIMITIVE_TOLERANCE for e in self.primitives.values())
                and all(r.ok for r in self.groups) and not self.failures_stop())

    def failures_stop(self) -> list[str]:
        return [m for m in self.messages if m.startswith("FAIL")]


def check_model(seed: int = 0, h: float = 1e-5, stop_gradient: bool = True,
                terms=LOSS_TERMS) -> tuple[list[GroupResult], list[str]]:
    cloud, params = tiny_problem(seed)
    results, messages = [], []
    for term in terms:
        graph, loss = build_loss(term, cloud, params, stop_gradient)
        analytic = dc.backward(graph, loss)
        groups: dict[str, list[str]] = {}
        for name in params:
            groups.setdefault(param_group(name), []).append(name)
        for group, names in groups.items():
            err = max(dc.grad_check(graph, loss, name, h, analytic) for name in names)
            biggest = max(float(np.abs(analytic[name]).max()) for name in names)
            note = ""
            if term == "cls" and is_descriptor_param(names[0]):
                if stop_gradient and biggest != 0.0:
                    messages.append(f"FAIL {term}/{group}: stop-gradient leaked, max |grad| = {biggest:.3e}")
                elif not stop_gradient and biggest > 0.0:
                    note = "classification gradient reaches descriptor head (stop-gradient disabled)"
                    messages.append(f"INFO {term}/{group}: {note}, max |grad| = {biggest:.3e}")
                else:
                    note = "exactly zero (stop-gradient)"
            results.append(GroupResult(term, group, err, biggest, note))
    return results, messages


def run_all(trials: int = 100, seed: int = 0, h: float = 1e-5, stop_gradient: bool = True) -> Report:
    report = Report()
    for tag in sorted(PRIMITIVE_CASES):
        report.primitives[tag] = check_primitive(tag, trials, seed, h)
    report.groups, report.messages = check_model(seed, h, stop_gradient)
    return report
