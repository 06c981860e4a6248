import json

import numpy as np
import pytest

from meshpref import primitives
from meshpref.cs_divergence import KernelConfig
from meshpref.errors import CapacityError, FormatError, PopulationError, ShapeError, StaleCacheError
from meshpref.mesh_prep import PatchTensor
from meshpref.reward_net import (
    DIMS,
    PARAM_SHAPES,
    RewardParams,
    TrainConfig,
    TrainingSet,
    backward,
    backward_batch,
    batch_schedule,
    forward,
    forward_batch,
    init_params,
    loss_batch,
    score,
    text_featurize,
    train,
)
from oracles import rel_err


def random_patch(rng, occupied=300):
    mask = np.zeros((256, 64), dtype=bool)
    cells = rng.choice(256 * 64, occupied, replace=False)
    mask.flat[cells] = True
    values = rng.standard_normal((256, 64, 10)) * mask[..., None]
    return PatchTensor(values, mask)


def random_text(rng):
    return text_featurize(" ".join(rng.choice(["a", "clean", "box", "torus", "rough", "with", "holes"], 4)))


def test_init_params():
    a, b = init_params(42), init_params(42)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    c = init_params(2)
    assert not np.array_equal(init_params(1).w_key, c.w_key)
    for n, arr in zip(PARAM_SHAPES, a.arrays()):
        assert arr.shape == PARAM_SHAPES[n](DIMS)
        assert np.all(np.isfinite(arr)) and np.all(np.abs(arr) < 1)


def test_params_json_round_trip():
    p = init_params(3)
    doc = json.loads(p.to_json())
    assert doc["format_version"] == 1
    assert doc["params"]["head_w2"]["shape"] == [64, 1]
    q = RewardParams.from_json(p.to_json())
    assert all(np.array_equal(x, y) for x, y in zip(p.arrays(), q.arrays()))
    doc["format_version"] = 99
    with pytest.raises(FormatError):
        RewardParams.from_json(json.dumps(doc))
    with pytest.raises(FormatError):
        RewardParams.from_json("{not json")


def test_text_featurize():
    assert np.array_equal(text_featurize(""), np.zeros((16, 128)))
    a = text_featurize("a cat")
    assert np.array_equal(a, text_featurize("a cat"))
    assert np.array_equal(a, text_featurize("A  CAT"))
    b = text_featurize("a dog")
    differs = np.flatnonzero(np.any(a != b, axis=1))
    assert differs.tolist() == [1]
    assert np.allclose(np.linalg.norm(a[:2], axis=1), 1.0)
    long = text_featurize(" ".join(f"w{i}" for i in range(30)))
    assert long.shape == (16, 128) and np.all(np.linalg.norm(long, axis=1) > 0)


def test_zero_params_reward_is_head_bias():
    rng = np.random.default_rng(0)
    p = init_params(0).map(np.zeros_like)
    p.class_token[:] = rng.standard_normal(128)
    p.head_b2[0] = 0.75
    r1, _, _ = forward(p, random_patch(rng), random_text(rng))
    r2, _, _ = forward(p, random_patch(rng), random_text(rng))
    assert r1 == r2 == 0.75


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    p, x, t = init_params(1), random_patch(rng), random_text(rng)
    assert forward(p, x, t)[0] == forward(p, x, t)[0]


def test_patch_permutation_with_output_weights_zeroed():
    rng = np.random.default_rng(2)
    p = init_params(2)
    p.w_out[:] = 0.0
    x, t = random_patch(rng), random_text(rng)
    perm = rng.permutation(256)
    y = PatchTensor(x.values[perm], x.mask[perm])
    r, z, _ = forward(p, x, t)
    assert r == forward(p, y, t)[0]
    assert np.array_equal(z, p.class_token)


def test_reward_depends_on_mesh_tokens():
    rng = np.random.default_rng(3)
    p, t = init_params(3), random_text(rng)
    assert forward(p, random_patch(rng), t)[0] != forward(p, random_patch(rng), t)[0]


def test_shape_errors():
    p = init_params(0)
    with pytest.raises(ShapeError):
        forward_batch(p, np.zeros((1, 256, 64, 9)), np.zeros((1, 256, 64), bool), np.zeros((1, 16, 128)))
    with pytest.raises(ShapeError):
        PatchTensor(np.zeros((255, 64, 10)), np.zeros((255, 64), bool))


def _objective(p, x, t, c):
    r, z, _ = forward(p, x, t)
    return r + float(z @ c)


@pytest.mark.parametrize("seed", range(3))
def test_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p, x, t = init_params(seed), random_patch(rng), random_text(rng)
    c = rng.standard_normal(128) * 0.1
    _, _, cache = forward(p, x, t)
    g, dx = backward(p, cache, 1.0, c)
    h = 1e-5
    errs = []
    for name in PARAM_SHAPES:
        arr = getattr(p, name)
        if name == "patch_projection":
            rows = cache.active[rng.choice(len(cache.active), 4)]
            idx = [(int(r), int(k)) for r, k in zip(rows, rng.integers(0, 128, 4))]
        else:
            idx = [tuple(int(rng.integers(0, s)) for s in arr.shape) for _ in range(4)]
        for i in idx:
            old = arr[i]
            arr[i] = old + h
            fp = _objective(p, x, t, c)
            arr[i] = old - h
            fm = _objective(p, x, t, c)
            arr[i] = old
            errs.append(rel_err(getattr(g, name)[i], (fp - fm) / (2 * h)))
    occupied = np.argwhere(x.mask)
    for pi, si in occupied[rng.choice(len(occupied), 10, replace=False)]:
        for f in rng.choice(10, 2, replace=False):
            v = x.values.copy()
            v[pi, si, f] += h
            fp = _objective(p, PatchTensor(v, x.mask), t, c)
            v[pi, si, f] -= 2 * h
            fm = _objective(p, PatchTensor(v, x.mask), t, c)
            errs.append(rel_err(dx[pi, si, f], (fp - fm) / (2 * h)))
    assert max(errs) < 1e-5
    assert np.all(dx[~x.mask] == 0)


def test_backward_zero_upstream_and_stale_cache():
    rng = np.random.default_rng(4)
    p, x, t = init_params(4), random_patch(rng), random_text(rng)
    _, _, cache = forward(p, x, t)
    g, dx = backward(p, cache, 0.0)
    assert all(not np.any(a) for a in g.arrays()) and not np.any(dx)
    with pytest.raises(StaleCacheError):
        backward(p.copy(), cache)


def test_batch_matches_single_items():
    rng = np.random.default_rng(5)
    p = init_params(5)
    xs = [random_patch(rng) for _ in range(3)]
    ts = [random_text(rng) for _ in range(3)]
    r, z, _ = forward_batch(p, np.stack([x.values for x in xs]), np.stack([x.mask for x in xs]), np.stack(ts))
    for i in range(3):
        ri, zi, _ = forward(p, xs[i], ts[i])
        assert r[i] == pytest.approx(ri, abs=1e-12)
        assert np.allclose(z[i], zi, atol=1e-12)


def _items(rng, n, score):
    return [(random_patch(rng, 150), random_text(rng), score + rng.uniform(-0.5, 0.5)) for _ in range(n)]


def test_loss_batch_lambda_zero_is_mse():
    rng = np.random.default_rng(6)
    p = init_params(6)
    pref, disp = _items(rng, 4, 4.5), _items(rng, 3, 1.0)
    res = loss_batch(p, pref, disp, 0.0)
    r = [forward(p, x, t)[0] for x, t, _ in pref + disp]
    s = [s for _, _, s in pref + disp]
    assert res.loss == pytest.approx(np.mean((np.array(r) - s) ** 2), rel=1e-12)
    assert res.loss == res.mse


def test_loss_batch_identical_populations_zero_cs():
    rng = np.random.default_rng(7)
    item = _items(rng, 1, 3.0)[0]
    res = loss_batch(init_params(7), [item, item], [item], 1.0, KernelConfig(1.0))
    assert abs(res.cs) < 1e-12
    assert res.loss == pytest.approx(res.mse, abs=1e-12)


def test_loss_batch_requires_both_populations():
    rng = np.random.default_rng(8)
    with pytest.raises(PopulationError):
        loss_batch(init_params(8), _items(rng, 2, 4.5), [], 1.0)


@pytest.mark.parametrize("cfg", [KernelConfig(2.0), KernelConfig("median", through_bandwidth=True)])
def test_loss_batch_gradient(cfg):
    rng = np.random.default_rng(9)
    p = init_params(9)
    pref, disp = _items(rng, 4, 4.5), _items(rng, 3, 1.0)
    res = loss_batch(p, pref, disp, 1.0, cfg)
    h = 1e-5
    errs = []
    for name in ("class_token", "w_key", "w_value", "head_w1", "patch_bias", "w_query"):
        arr = getattr(p, name)
        for _ in range(4):
            i = tuple(int(rng.integers(0, s)) for s in arr.shape)
            old = arr[i]
            arr[i] = old + h
            fp = loss_batch(p, pref, disp, 1.0, cfg).loss
            arr[i] = old - h
            fm = loss_batch(p, pref, disp, 1.0, cfg).loss
            arr[i] = old
            errs.append(rel_err(getattr(res.grads, name)[i], (fp - fm) / (2 * h)))
    assert max(errs) < 1e-5


def _linear_target_set(rng, n=40):
    """Scores are an affine function of one face feature in slot (0, 0)."""
    mask = np.zeros((n, 256, 64), dtype=bool)
    mask[:, :, 0] = True
    values = rng.standard_normal((n, 256, 64, 10)) * mask[..., None]
    scores = 2.5 + 1.5 * values[:, 0, 0, 0]
    texts = np.stack([text_featurize("a mesh")] * n)
    return TrainingSet(values, mask, texts, scores, scores >= np.median(scores))


def test_train_learns_linear_target():
    data = _linear_target_set(np.random.default_rng(10))
    _, hist = train(data, TrainConfig(lam=0.0, epochs=100, seed=0))
    assert hist.mse[-1] < 0.1 * hist.mse[0]


def test_train_deterministic():
    data = _linear_target_set(np.random.default_rng(11), 24)
    cfg = TrainConfig(lam=1.0, epochs=3, seed=5)
    p1, h1 = train(data, cfg)
    p2, h2 = train(data, cfg)
    assert h1 == h2
    assert all(np.array_equal(a, b) for a, b in zip(p1.arrays(), p2.arrays()))


def test_train_single_population():
    data = _linear_target_set(np.random.default_rng(12), 10)
    data.preferred[:] = True
    with pytest.raises(PopulationError):
        train(data, TrainConfig(epochs=1))


def test_lambda_zero_matches_mse_only_reference():
    data = _linear_target_set(np.random.default_rng(13), 24)
    cfg = TrainConfig(lam=0.0, epochs=4, seed=3)
    _, hist = train(data, cfg)

    # plain MSE regression with a hand-written AdamW
    p = init_params(cfg.seed)
    m = p.zeros_like()
    v = p.zeros_like()
    t = 0
    rng = np.random.default_rng(cfg.seed)
    pref, disp = np.flatnonzero(data.preferred), np.flatnonzero(~data.preferred)
    ref = []
    for _ in range(cfg.epochs):
        losses = []
        for ip, idn in batch_schedule(len(pref), len(disp), cfg, rng):
            rows = np.concatenate([pref[ip], disp[idn]])
            r, _, cache = forward_batch(p, data.values[rows], data.masks[rows], data.texts[rows])
            resid = r - data.scores[rows]
            losses.append(np.mean(resid ** 2))
            g, _ = backward_batch(p, cache, 2 * resid / len(rows))
            t += 1
            new = []
            for name in PARAM_SHAPES:
                w, gw = getattr(p, name), getattr(g, name)
                mw = 0.9 * getattr(m, name) + 0.1 * gw
                vw = 0.999 * getattr(v, name) + 0.001 * gw * gw
                setattr(m, name, mw)
                setattr(v, name, vw)
                step = (mw / (1 - 0.9 ** t)) / (np.sqrt(vw / (1 - 0.999 ** t)) + 1e-8)
                new.append(w - 1e-3 * (step + 0.01 * w))
            p = RewardParams(*new)
        ref.append(np.mean(losses))
    assert np.max(np.abs(np.array(hist.total) - ref)) < 1e-12


def test_score_properties():
    p = init_params(0)
    m = primitives.icosphere(2)
    s = score(p, m, "a clean sphere")
    assert s == score(p, m, "a clean sphere")
    assert s == pytest.approx(score(p, m.with_vertices(m.vertices + [3.0, -1.0, 2.0]), "a clean sphere"), abs=1e-9)
    with pytest.raises(CapacityError):
        score(p, primitives.grid(100, 100), "a plane")
