"""Central finite-difference checks of every differentiable op and the network.

Each case builds a scalar from fresh random inputs (non-scalar outputs are
contracted with a fixed random weight tensor), differentiates it on the tape
and compares sampled gradient entries against ``(f(x+h) - f(x-h)) / 2h``.

Relative error is ``|a - n| / max(|a|, |n|, floor)``. The floor keeps entries
whose true gradient is essentially zero from dividing roundoff by roundoff.
Coordinates where the one-sided differences disagree sit on a kink of a
piecewise op (ReLU, max, clamp) and are resampled rather than scored.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from . import segnet as S
from . import tensor as T
from .tensor import Tensor

STEP = 1e-6
FLOOR = 1e-4  # below this magnitude the check is effectively |a - n| <= 1e-8
TOLERANCE = 1e-4
KINK_RATIO = 1e-3
KINK_SLACK = 1e-7  # absolute allowance for roundoff in one-sided differences


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    checked: int
    kinks: int = 0
    worst: str = ""

    @property
    def ok(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= TOLERANCE


@dataclass
class SuiteReport:
    cases: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.cases)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.cases), default=0.0)

    def format(self) -> str:
        lines = [f"{c.name},{c.max_rel_error:.3e},{c.checked},{c.kinks},{'ok' if c.ok else 'FAIL'}" for c in self.cases]
        return "case,max_rel_error,entries,kinks,status\n" + "\n".join(lines) + "\n"


def relative_error(a: float, n: float, floor: float = FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check(name: str, f: Callable[[], Tensor], inputs: dict[str, Tensor], rng, per_tensor: int | None = None,
          h: float = STEP) -> CaseResult:
    """Compare tape gradients of ``f()`` w.r.t. ``inputs`` against central differences.

    ``per_tensor`` limits the number of sampled entries per input tensor.
    """
    for t in inputs.values():
        t.grad = None
    T.backward(f())
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for k, t in inputs.items()}
    result = CaseResult(name, 0.0, 0)
    for key, t in inputs.items():
        flat = t.data.reshape(-1)
        order = rng.permutation(flat.size)
        want = flat.size if per_tensor is None else min(per_tensor, flat.size)
        done = 0
        for j in order:
            if done >= want:
                break
            orig = flat[j]
            f0 = f().item()
            flat[j] = orig + h
            fp = f().item()
            flat[j] = orig - h
            fm = f().item()
            flat[j] = orig
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > KINK_RATIO * max(abs(fwd), abs(bwd)) + KINK_SLACK:
                result.kinks += 1
                continue
            numeric = (fp - fm) / (2 * h)
            err = relative_error(float(analytic[key].reshape(-1)[j]), numeric)
            if err > result.max_rel_error:
                result.max_rel_error, result.worst = err, f"{key}[{j}]"
            done += 1
            result.checked += 1
    return result


def _leaf(rng, *shape, low=None, high=None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(w)))


def op_cases(rng) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    """One case per differentiable op, each with fresh inputs drawn from ``rng``."""
    cases = []

    def add(name, build, **inputs):
        probe = build(**inputs)
        w = rng.normal(size=probe.shape)
        cases.append((name, lambda: _contract(build(**inputs), w), inputs))

    add("matmul", lambda a, b: T.matmul(a, b), a=_leaf(rng, 4, 3), b=_leaf(rng, 3, 5))
    add("relu", lambda x: T.relu(x), x=_leaf(rng, 5, 4))
    add("sigmoid", lambda x: T.sigmoid(x), x=_leaf(rng, 5, 4))
    add("batch_norm", lambda x, g, b: T.batch_norm(x, g, b, 1e-5), x=_leaf(rng, 8, 4),
        g=_leaf(rng, 4, low=0.5, high=1.5), b=_leaf(rng, 4))
    add("batch_norm_grouped", lambda x, g, b: T.batch_norm(x, g, b, 1e-5, 3), x=_leaf(rng, 9, 2),
        g=_leaf(rng, 2, low=0.5, high=1.5), b=_leaf(rng, 2))
    add("max_pool_points", lambda x: T.max_pool_points(x), x=_leaf(rng, 6, 4))
    add("group_max", lambda x: T.group_max(x, 3), x=_leaf(rng, 9, 4))
    for op in ("add", "sub", "mul", "mean2"):
        add(op, lambda a, b, op=op: T.elementwise(op, a, b), a=_leaf(rng, 3, 4), b=_leaf(rng, 3, 4))
    add("concat", lambda a, b: T.concat([a, b], axis=1), a=_leaf(rng, 3, 2), b=_leaf(rng, 3, 4))
    add("slice_axis", lambda x: T.slice_axis(x, 1, 3, axis=1), x=_leaf(rng, 4, 5))
    idx = np.array([0, 2, 2, 1, 0, 3])
    add("gather_rows", lambda x: T.gather_rows(x, idx), x=_leaf(rng, 4, 3))
    add("tile_rows", lambda x: T.tile_rows(x, 5), x=_leaf(rng, 1, 3))
    add("add_bias", lambda x, b: T.add_bias(x, b), x=_leaf(rng, 4, 3), b=_leaf(rng, 3))
    add("reshape", lambda x: T.reshape(x, (2, 6)), x=_leaf(rng, 3, 4))
    add("scale", lambda x: T.scale(x, -1.7), x=_leaf(rng, 3, 3))
    add("affine", lambda x: T.affine(x, 0.3, 2.0), x=_leaf(rng, 3, 3))
    add("log", lambda x: T.log(x), x=_leaf(rng, 3, 3, low=0.2, high=3.0))
    add("power", lambda x: T.power(x, 2.5), x=_leaf(rng, 3, 3, low=0.2, high=2.0))
    add("clamp", lambda x: T.clamp(x, -0.5, 0.5), x=_leaf(rng, 4, 4))
    add("tsum", lambda x: T.tsum(x), x=_leaf(rng, 3, 4))
    add("tmean", lambda x: T.tmean(x), x=_leaf(rng, 3, 4))
    y = (rng.uniform(size=(6, 2)) < 0.5).astype(float)
    add("bce", lambda z: L.bce(T.sigmoid(z), y), z=_leaf(rng, 6, 2))
    add("focal_loss", lambda z: L.focal_loss(T.sigmoid(z), y), z=_leaf(rng, 6, 2))
    target = rng.normal(size=(5, 3)) * 2.0
    add("smooth_l1", lambda x: L.smooth_l1(x, target), x=_leaf(rng, 5, 3, low=-4.0, high=4.0))
    return cases


def _random_params(config: S.SegNetConfig, rng) -> S.Params:
    """Initial parameters with the zero-initialised heads replaced by random values."""
    p = S.init_params(config, seed=int(rng.integers(2**31)), zero_attention_out=False)
    p["tnet.w4"].data = rng.normal(0.0, 0.05, size=p["tnet.w4"].shape)
    for name, t in p.items():
        if name.endswith(("gamma", "beta", ".b", "b2", "b3")):
            t.data = t.data + rng.normal(0.0, 0.1, size=t.shape)
    return p


def network_cases(rng, per_tensor: int = 1) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor], int | None]]:
    cases = []
    # residual attention alone on an 8 x 4 input
    cfg = S.SegNetConfig(k=3, num_layers=2, width=4, tnet_dims=(4, 4, 4), head_dim=4)
    p = _random_params(cfg, rng)
    att = {k: v for k, v in p.items() if k.startswith("layer1.att_local")}
    x = _leaf(rng, 8, 4)
    w = rng.normal(size=(8, 4))
    cases.append(("residual_attention", lambda: _contract(S.residual_attention(x, att, "layer1.att_local"), w),
                  {"x": x, **att}, 2))
    # branches with attention masks
    feats = _leaf(rng, 10, 3)
    graph = S.knn_graph(feats.data, 3)
    ew1, ew2 = _leaf(rng, 6, 4), _leaf(rng, 4, 4)
    bn = {n: _leaf(rng, 4, low=0.5, high=1.5) for n in ("bn1.gamma", "bn2.gamma")}
    bn.update({n: _leaf(rng, 4) for n in ("bn1.beta", "bn2.beta")})
    mask = _leaf(rng, 10, 4)
    bp = {"e.w1": ew1, "e.w2": ew2, **{f"e.{k}": v for k, v in bn.items()}}
    we = rng.normal(size=(10, 4))
    cases.append(("edgeconv_branch", lambda: _contract(S.edgeconv_branch(feats, graph, bp, "e", T.sigmoid(mask)), we),
                  {"features": feats, "mask": mask, **bp}, None))
    mw1 = _leaf(rng, 3, 4)
    mp = {"m.w1": mw1, "m.w2": _leaf(rng, 4, 4), **{f"m.{k}": _leaf(rng, 4, low=0.5, high=1.5) if "gamma" in k
                                                   else _leaf(rng, 4) for k in bn}}
    mask2 = _leaf(rng, 10, 4)
    cases.append(("mlp_branch", lambda: _contract(S.mlp_branch(feats, mp, "m", T.sigmoid(mask2)), we),
                  {"features": feats, "mask": mask2, **mp}, None))
    # T-Net alignment
    tp = {k: v for k, v in p.items() if k.startswith("tnet.")}
    pts = rng.normal(size=(12, 3))
    wt = rng.normal(size=(12, 3))
    cases.append(("tnet_align", lambda: _contract(S.tnet_align(pts, tp), wt), tp, 2))
    # the full 2-layer network on 16 points at width 8
    ncfg = S.SegNetConfig(k=4, num_layers=2, width=8, tnet_dims=(8, 8, 8), head_dim=8)
    npar = _random_params(ncfg, rng)
    cloud = rng.normal(size=(16, 3))
    labels = rng.integers(0, 2, size=16)
    cases.append(("segnet_full", lambda: S.segmentation_loss(S.segnet_forward(cloud, npar, ncfg), labels, ncfg),
                  npar, per_tensor))
    return cases


def run_suite(seeds=range(20), per_tensor: int = 1) -> SuiteReport:
    """Every op and network case over every seed; worst error per case name."""
    start = time.perf_counter()
    worst: dict[str, CaseResult] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = [(n, f, i, None) for n, f, i in op_cases(rng)] + network_cases(rng, per_tensor)
        for name, f, inputs, limit in cases:
            r = check(name, f, inputs, rng, limit)
            prev = worst.get(name)
            if prev is None:
                worst[name] = r
            else:
                merged = CaseResult(name, max(prev.max_rel_error, r.max_rel_error), prev.checked + r.checked,
                                    prev.kinks + r.kinks, prev.worst if prev.max_rel_error >= r.max_rel_error else r.worst)
                worst[name] = merged
    return SuiteReport(list(worst.values()), time.perf_counter() - start)
