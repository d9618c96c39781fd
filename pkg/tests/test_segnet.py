import numpy as np
import pytest

from stereolidar import segnet as S
from stereolidar import tensor as T
from stereolidar.config import PipelineConfig
from stereolidar.synthetic import gen_synthetic
from stereolidar.tensor import Tensor
from stereolidar.training import segmentation_samples

SMALL = S.SegNetConfig(k=4, num_layers=2, width=8, tnet_dims=(8, 8, 8), head_dim=8)


def _random_params(cfg, seed):
    """Parameters with every tensor randomised, so no branch is trivially zero."""
    rng = np.random.default_rng(seed)
    p = S.init_params(cfg, seed=seed)
    for name, t in p.items():
        if "gamma" in name:
            t.data = rng.uniform(0.5, 1.5, t.shape)
        else:
            t.data = rng.normal(0.0, 0.5, t.shape)
    return p


def test_knn_graph_hand_cases():
    assert S.knn_graph(np.array([[0.0], [1.0], [3.0]]), 1)[:, 0].tolist() == [1, 0, 1]
    pts = np.array([[0.0, 0.0], [5.0, 5.0], [0.0, 0.0], [5.0, 5.0]])
    assert S.knn_graph(pts, 1)[:, 0].tolist() == [2, 3, 0, 1]
    with pytest.raises(S.SegNetError):
        S.knn_graph(np.zeros((3, 2)), 3)


def test_knn_graph_matches_brute_force():
    x = np.random.default_rng(0).normal(size=(64, 5))
    g = S.knn_graph(x, 8)
    for i in range(64):
        d = [(float(np.sum((x[i] - x[j]) ** 2)), j) for j in range(64) if j != i]
        assert g[i].tolist() == [j for _, j in sorted(d)[:8]]


def test_edgeconv_identical_points_give_equal_rows():
    p = _random_params(SMALL, 1)
    x = Tensor(np.tile([[0.3, -1.0, 2.0]], (10, 1)))
    out = S.edgeconv_branch(x, S.knn_graph(np.arange(10.0)[:, None], 4), p, "layer0.local")
    assert np.allclose(out.data, out.data[0], atol=1e-12)


def test_zero_attention_leaves_branches_unmodulated():
    p = _random_params(SMALL, 2)
    x = Tensor(np.random.default_rng(2).normal(size=(12, 3)))
    g = S.knn_graph(x.data, 4)
    zero = Tensor(np.zeros((12, 8)))
    assert np.array_equal(S.edgeconv_branch(x, g, p, "layer0.local", zero).data,
                          S.edgeconv_branch(x, g, p, "layer0.local").data)
    assert np.array_equal(S.mlp_branch(x, p, "layer0.global", zero).data, S.mlp_branch(x, p, "layer0.global").data)


def test_attention_modulation_bound():
    p = _random_params(SMALL, 3)
    x = Tensor(np.random.default_rng(3).normal(size=(12, 8)))
    r = S.residual_attention(x, p, "layer1.att_local")
    assert np.all(r.data > 0) and np.all(r.data < 1)
    plain = S.mlp_branch(Tensor(np.random.default_rng(4).normal(size=(12, 3))), p, "layer0.global")
    mod = T.mul(T.affine(r, 1.0, 1.0), plain)
    nz = np.abs(plain.data) > 0
    assert np.all(np.abs(mod.data[nz]) >= np.abs(plain.data[nz]))
    assert np.all(np.abs(mod.data[nz]) <= 2 * np.abs(plain.data[nz]))


def test_zero_initialised_attention_is_one_half():
    p = S.init_params(SMALL, seed=0)
    r = S.residual_attention(Tensor(np.zeros((6, 8))), p, "layer1.att_local")
    assert np.all(r.data == 0.5)


def test_tnet_identity_init():
    p = S.init_params(SMALL, seed=0)
    pts = np.random.default_rng(5).normal(size=(20, 3))
    assert np.array_equal(S.tnet_align(pts, p).data, pts)


def test_first_layer_is_plain_concat():
    p = _random_params(SMALL, 6)
    x = S.tnet_align(np.random.default_rng(6).normal(size=(16, 3)), p)
    l, g, fused = S.attention_layer(0, x, None, None, p, SMALL)
    assert fused.shape == (16, 16)
    assert np.array_equal(fused.data, np.hstack([l.data, g.data]))


def test_forward_shape_and_errors():
    p = S.init_params(SMALL, seed=0)
    assert S.segnet_forward(np.random.default_rng(0).normal(size=(9, 3)), p, SMALL).shape == (9, 2)
    with pytest.raises(S.SegNetError):
        S.segnet_forward(np.zeros((4, 3)), p, SMALL)
    with pytest.raises(S.SegNetError):
        S.SegNetConfig(use_local=False, use_global=False)


def test_permutation_equivariance_is_exact():
    cfg = S.SegNetConfig(k=5, num_layers=3, width=8, tnet_dims=(8, 8, 8), head_dim=8)
    p = _random_params(cfg, 7)
    pts = np.random.default_rng(7).normal(size=(32, 3))
    perm = np.random.default_rng(8).permutation(32)
    base = S.segnet_forward(pts, p, cfg).data
    assert np.array_equal(S.segnet_forward(pts[perm], p, cfg).data, base[perm])


def test_forward_is_bit_deterministic():
    p = _random_params(SMALL, 9)
    pts = np.random.default_rng(9).normal(size=(20, 3))
    assert S.segnet_forward(pts, p, SMALL).data.tobytes() == S.segnet_forward(pts, p, SMALL).data.tobytes()


def test_graph_is_dynamic():
    p = _random_params(SMALL, 10)
    trace = {}
    S.segnet_forward(np.random.default_rng(10).normal(size=(24, 3)), p, SMALL, trace)
    g0, g1 = trace["graphs"]
    assert not np.array_equal(g0, g1)


@pytest.fixture(scope="module")
def scene_sample():
    return segmentation_samples(gen_synthetic(0, 1), PipelineConfig().segnet.k)[0]


def test_train_step_lr_zero_is_bit_identical(scene_sample):
    cfg = PipelineConfig().segnet
    p = S.init_params(cfg, seed=0)
    before = {k: v.data.tobytes() for k, v in p.items()}
    r = S.segnet_train_step([scene_sample], p, cfg, 0.0)
    assert all(p[k].data.tobytes() == before[k] for k in p)
    assert np.isfinite(r.grad_norm) and r.grad_norm > 0


def test_loss_decreases_over_first_steps(scene_sample):
    cfg = PipelineConfig().segnet
    lr = PipelineConfig().train.lr
    p = S.init_params(cfg, seed=0)
    losses = [S.segnet_train_step([scene_sample], p, cfg, lr).loss for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
