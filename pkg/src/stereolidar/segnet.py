"""Attention-based point segmentation network.

Pipeline of :func:`segnet_forward`::

    points -> T-Net alignment -> attention layers (local EdgeConv branch +
    global per-point MLP branch, each modulated by a residual-attention
    mask from the previous layer) -> concat of every layer output ->
    max-pool global vector tiled back to points -> shared MLP -> N x p logits

Every stage is row-permutation equivariant: kNN uses exact pairwise
distances, reductions are order independent and the attention module pairs
points by a sort of their features rather than by input index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .losses import focal_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

BN_EPS = 1e-5


class SegNetError(ValueError):
    pass


@dataclass
class SegNetConfig:
    k: int = 10
    num_layers: int = 3
    width: int = 64
    layer_dims: tuple[int, ...] | None = None
    num_classes: int = 2
    tnet_dims: tuple[int, int, int] = (16, 32, 16)
    head_dim: int = 32
    use_local: bool = True
    use_global: bool = True
    use_attention: bool = True
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.layer_dims is None:
            self.layer_dims = (self.width,) * self.num_layers
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) != self.num_layers:
            raise SegNetError(f"layer_dims has {len(self.layer_dims)} entries for {self.num_layers} layers")
        if self.k < 1 or self.num_layers < 1 or self.num_classes < 1:
            raise SegNetError("k, num_layers and num_classes must be positive")
        if min(self.layer_dims + tuple(self.tnet_dims) + (self.head_dim,)) < 1:
            raise SegNetError("all widths must be positive")
        if not (self.use_local or self.use_global):
            raise SegNetError("at least one of the local and global branches must be enabled")

    def fused_width(self, layer: int) -> int:
        return self.layer_dims[layer] * (int(self.use_local) + int(self.use_global))


Params = dict  # name -> Tensor, insertion ordered


# --------------------------------------------------------------------------
# parameter construction


def _he(rng, fan_in, fan_out):
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _add_bn(p: Params, name: str, c: int) -> None:
    p[f"{name}.gamma"] = _ones(c)
    p[f"{name}.beta"] = _zeros(c)


def _add_residual_unit(p: Params, rng, name: str, c: int) -> None:
    _add_bn(p, f"{name}.bn1", c)
    p[f"{name}.w1"] = _he(rng, c, c)
    _add_bn(p, f"{name}.bn2", c)
    p[f"{name}.w2"] = _he(rng, c, c)


def add_attention_params(p: Params, rng, name: str, c_in: int, c_out: int, zero_out: bool = True) -> None:
    for ru in ("ru1", "ru2", "ru3"):
        _add_residual_unit(p, rng, f"{name}.{ru}", c_in)
    p[f"{name}.out1.w"] = _he(rng, c_in, c_out)
    p[f"{name}.out1.b"] = _zeros(c_out)
    p[f"{name}.out2.w"] = _zeros(c_out, c_out) if zero_out else _he(rng, c_out, c_out)
    p[f"{name}.out2.b"] = _zeros(c_out)


def add_tnet_params(p: Params, rng, dims: tuple[int, int, int]) -> None:
    t1, t2, t3 = dims
    p["tnet.w1"] = _he(rng, 3, t1)
    _add_bn(p, "tnet.bn1", t1)
    p["tnet.w2"] = _he(rng, t1, t2)
    _add_bn(p, "tnet.bn2", t2)
    p["tnet.w3"] = _he(rng, t2, t3)
    p["tnet.b3"] = _zeros(t3)
    # zero head + identity bias: the initial transform is exactly the identity
    p["tnet.w4"] = _zeros(t3, 16)
    p["tnet.b4"] = Tensor(np.eye(4).reshape(-1), requires_grad=True)


def init_params(config: SegNetConfig, seed: int | None = None, zero_attention_out: bool = True) -> Params:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    p: Params = {}
    add_tnet_params(p, rng, config.tnet_dims)
    c_in = 3
    for i, c in enumerate(config.layer_dims):
        if config.use_local:
            p[f"layer{i}.local.w1"] = _he(rng, 2 * c_in, c)
            _add_bn(p, f"layer{i}.local.bn1", c)
            p[f"layer{i}.local.w2"] = _he(rng, c, c)
            _add_bn(p, f"layer{i}.local.bn2", c)
        if config.use_global:
            p[f"layer{i}.global.w1"] = _he(rng, c_in, c)
            _add_bn(p, f"layer{i}.global.bn1", c)
            p[f"layer{i}.global.w2"] = _he(rng, c, c)
            _add_bn(p, f"layer{i}.global.bn2", c)
        if config.use_attention and i > 0:
            prev = config.layer_dims[i - 1]
            if config.use_local:
                add_attention_params(p, rng, f"layer{i}.att_local", prev, c, zero_attention_out)
            if config.use_global:
                add_attention_params(p, rng, f"layer{i}.att_global", prev, c, zero_attention_out)
        c_in = config.fused_width(i)
    total = sum(config.fused_width(i) for i in range(config.num_layers))
    p["head.w1"] = _he(rng, 2 * total, config.head_dim)
    _add_bn(p, "head.bn1", config.head_dim)
    p["head.w2"] = _he(rng, config.head_dim, config.num_classes)
    p["head.b2"] = _zeros(config.num_classes)
    return p


def param_list(params: Params) -> list[Tensor]:
    return list(params.values())


# --------------------------------------------------------------------------
# building blocks


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """N x k indices of each row's nearest other rows (Euclidean).

    The point itself is excluded; equal distances resolve to the lower index.
    """
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    n = len(x)
    if not 1 <= k < n:
        raise SegNetError(f"knn_graph needs 1 <= k < N, got k={k}, N={n}")
    d = cdist(x, x, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return T.add_bias(y, b) if b is not None else y


def _bn(x: Tensor, p: Params, name: str, group: int = 1) -> Tensor:
    return T.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], BN_EPS, group)


def residual_unit(x: Tensor, p: Params, name: str) -> Tensor:
    """Pre-activation unit: x + W2 relu(bn2(W1 relu(bn1(x))))."""
    h = T.matmul(T.relu(_bn(x, p, f"{name}.bn1")), p[f"{name}.w1"])
    h = T.matmul(T.relu(_bn(h, p, f"{name}.bn2")), p[f"{name}.w2"])
    return T.add(x, h)


def _pairing(x: np.ndarray):
    """Pair rows adjacent in lexicographic feature order.

    Returns the interleaved gather index for pooling and, per row, the index
    of the pooled row it belongs to.
    """
    n = len(x)
    order = np.lexsort(x.T[::-1])
    if n % 2:
        order = np.append(order, order[-1])
    owner = np.empty(n, dtype=np.intp)
    owner[order] = np.arange(len(order)) // 2
    return order, owner


def residual_attention(x: Tensor, p: Params, name: str) -> Tensor:
    """Bottom-up / top-down attention mask with entries in (0, 1).

    block1: residual unit, then 2:1 max-pool of feature-sorted point pairs.
    block2: residual unit at the low resolution, nearest-duplication back to
    N rows and a skip connection from the block1 output.
    block3: residual unit, two per-point linear layers, sigmoid.
    """
    if x.shape[0] < 2:
        raise SegNetError("residual attention needs at least 2 points")
    a = residual_unit(x, p, f"{name}.ru1")
    order, owner = _pairing(a.data)
    pooled = T.group_max(T.gather_rows(a, order), 2)
    # a single pooled row has no batch statistics; skip the unit there
    low = residual_unit(pooled, p, f"{name}.ru2") if pooled.shape[0] >= 2 else pooled
    up = T.add(T.gather_rows(low, owner), a)
    u = residual_unit(up, p, f"{name}.ru3")
    u = T.relu(_linear(u, p[f"{name}.out1.w"], p[f"{name}.out1.b"]))
    return T.sigmoid(_linear(u, p[f"{name}.out2.w"], p[f"{name}.out2.b"]))


def _modulate(feat: Tensor, mask: Tensor | None) -> Tensor:
    if mask is None:
        return feat
    return T.mul(T.affine(mask, 1.0, 1.0), feat)


def edge_features(x: Tensor, graph: np.ndarray) -> Tensor:
    """(N*k) x 2C rows ``[x_i, x_j - x_i]`` for every graph edge i -> j."""
    n, k = graph.shape
    centre = T.gather_rows(x, np.repeat(np.arange(n), k))
    neigh = T.gather_rows(x, graph.reshape(-1))
    return T.concat([centre, T.sub(neigh, centre)], axis=1)


def edgeconv_branch(x: Tensor, graph: np.ndarray, p: Params, name: str, attention: Tensor | None = None) -> Tensor:
    """EdgeConv: two shared layers over edges, max over neighbours, then (1+R)."""
    n, k = graph.shape
    c = x.shape[1]
    w1 = p[f"{name}.w1"]
    if w1.shape[0] != 2 * c:
        raise T.ShapeError(f"{name}: weight expects {w1.shape[0] // 2} input channels, got {c}")
    w_self, w_nb = T.slice_axis(w1, 0, c, axis=0), T.slice_axis(w1, c, 2 * c, axis=0)
    # [x_i, x_j - x_i] W1 == x_i (W_self - W_nb) + x_j W_nb: multiply per point, then gather per edge
    a = T.matmul(x, T.sub(w_self, w_nb))
    b = T.matmul(x, w_nb)
    pre = T.add(T.gather_rows(a, np.repeat(np.arange(n), k)), T.gather_rows(b, graph.reshape(-1)))
    e1 = T.relu(_bn(pre, p, f"{name}.bn1", k))
    e2 = _bn(T.matmul(e1, p[f"{name}.w2"]), p, f"{name}.bn2", k)
    e2 = T.group_max(e2, graph.shape[1])
    return _modulate(e2, attention)


def mlp_branch(x: Tensor, p: Params, name: str, attention: Tensor | None = None) -> Tensor:
    m1 = T.relu(_bn(T.matmul(x, p[f"{name}.w1"]), p, f"{name}.bn1"))
    m2 = _bn(T.matmul(m1, p[f"{name}.w2"]), p, f"{name}.bn2")
    return _modulate(m2, attention)


def attention_layer(index: int, x: Tensor, prev_l: Tensor | None, prev_g: Tensor | None, p: Params,
                    config: SegNetConfig, trace: dict | None = None):
    """One stacked layer. Returns ``(L, G, fused)``; a disabled branch yields None."""
    name = f"layer{index}"
    outs = []
    new_l = new_g = None
    if config.use_local:
        graph = knn_graph(x.data, config.k)
        if trace is not None:
            trace.setdefault("graphs", []).append(graph)
        r1 = None
        if config.use_attention and prev_l is not None:
            r1 = residual_attention(prev_l, p, f"{name}.att_local")
            if trace is not None:
                trace.setdefault("attention", []).append(r1.data)
        new_l = edgeconv_branch(x, graph, p, f"{name}.local", r1)
        if prev_l is not None and prev_l.shape == new_l.shape:
            new_l = T.add(new_l, prev_l)
        outs.append(new_l)
    if config.use_global:
        r2 = None
        if config.use_attention and prev_g is not None:
            r2 = residual_attention(prev_g, p, f"{name}.att_global")
        new_g = mlp_branch(x, p, f"{name}.global", r2)
        if prev_g is not None and prev_g.shape == new_g.shape:
            new_g = T.add(new_g, prev_g)
        outs.append(new_g)
    return new_l, new_g, T.concat(outs, axis=1)


def tnet_transform(points: Tensor, p: Params) -> Tensor:
    """The 4 x 4 matrix A applied as ``[x y z 1] @ A``."""
    h = T.relu(_bn(T.matmul(points, p["tnet.w1"]), p, "tnet.bn1"))
    h = T.relu(_bn(T.matmul(h, p["tnet.w2"]), p, "tnet.bn2"))
    g = T.max_pool_points(h)
    g = T.relu(_linear(g, p["tnet.w3"], p["tnet.b3"]))
    a = T.add(T.reshape(T.matmul(g, p["tnet.w4"]), (16,)), p["tnet.b4"])
    return T.reshape(a, (4, 4))


def tnet_align(points, p: Params) -> Tensor:
    pts = T.as_tensor(points)
    n = pts.shape[0]
    hom = T.concat([pts, Tensor(np.ones((n, 1)))], axis=1)
    out = T.matmul(hom, tnet_transform(pts, p))
    return T.slice_axis(out, 0, 3, axis=1)


def segnet_forward(points, params: Params, config: SegNetConfig, trace: dict | None = None) -> Tensor:
    """N x 3 points -> N x num_classes logits."""
    pts = T.as_tensor(points)
    n = pts.shape[0]
    if pts.data.ndim != 2 or pts.shape[1] != 3:
        raise SegNetError(f"expected N x 3 points, got {pts.shape}")
    if n <= config.k:
        raise SegNetError(f"need more than k={config.k} points, got {n}")
    x = tnet_align(pts, params)
    prev_l = prev_g = None
    fused_all = []
    for i in range(config.num_layers):
        prev_l, prev_g, x = attention_layer(i, x, prev_l, prev_g, params, config, trace)
        fused_all.append(x)
    feats = T.concat(fused_all, axis=1)
    glob = T.tile_rows(T.max_pool_points(feats), n)
    h = T.concat([feats, glob], axis=1)
    h = T.relu(_bn(T.matmul(h, params["head.w1"]), params, "head.bn1"))
    return _linear(h, params["head.w2"], params["head.b2"])


# --------------------------------------------------------------------------
# training


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def segmentation_loss(logits: Tensor, labels: np.ndarray, config: SegNetConfig) -> Tensor:
    """Focal loss on per-class sigmoid probabilities against one-hot labels."""
    return focal_loss(T.sigmoid(logits), one_hot(labels, config.num_classes), config.focal_alpha, config.focal_gamma)


def predict(points, params: Params, config: SegNetConfig) -> np.ndarray:
    return np.argmax(segnet_forward(points, params, config).data, axis=1)


def accuracy(samples, params: Params, config: SegNetConfig) -> float:
    correct = total = 0
    for pts, labels in samples:
        pred = predict(pts, params, config)
        correct += int(np.sum(pred == np.asarray(labels)))
        total += len(labels)
    return correct / max(total, 1)


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    diagnostics: dict = field(default_factory=dict)


def segnet_train_step(batch, params: Params, config: SegNetConfig, lr: float) -> StepResult:
    """Forward, focal loss averaged over the batch, backward and an SGD update.

    ``batch`` is a sequence of ``(points N x 3, labels N)`` pairs.
    """
    plist = param_list(params)
    T.zero_grad(plist)
    try:
        losses = [segmentation_loss(segnet_forward(pts, params, config), labels, config) for pts, labels in batch]
        loss = losses[0]
        for extra in losses[1:]:
            loss = T.add(loss, extra)
        loss = T.scale(loss, 1.0 / len(losses))
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(f"non-finite value during the forward pass: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise T.NonFiniteError(f"non-finite loss {value}")
    T.backward(loss)
    grads = [p.grad for p in plist]
    sq = sum(float(np.sum(g * g)) for g in grads if g is not None)
    if not math.isfinite(sq):
        raise T.NonFiniteError("non-finite gradient norm")
    T.sgd_step(plist, grads, lr)
    return StepResult(value, math.sqrt(sq))
