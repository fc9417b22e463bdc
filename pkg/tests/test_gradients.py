"""Finite-difference verification of every analytic gradient path.

All checks run in float64. Loss-level checks sweep every component of the
image-embedding gradient (and log_scale) at step 1e-5 with relative tolerance
1e-5. Composition checks go through loss(forward(params)) exactly the way the
trainer chains them: per seed, a deterministic random sample of components
from every parameter array, plus one exhaustive sweep over all parameters of
the tiny config so no component is ever skipped entirely.

FD step sizes are chosen so the oracle itself is trustworthy: central
differences carry O(h^2) truncation, and at h=1e-4 that truncation alone
reaches ~1e-4 relative on this architecture (verified by a Richardson sweep),
which would swamp the tolerance. Loss-level and probe checks use h=1e-5.
Composition checks use h=1e-6 because the freshly initialized encoder emits
raw embeddings with norms near 5e-3 (the output head starts at zero bias and
small weights), and the L2 normalization inside the losses then has curvature
of order 1/norm that amplifies truncation roughly 200x; at h=1e-6 truncation
lands near 1e-7 relative while float64 roundoff stays near 1e-10, both far
below the 1e-4 bound being enforced.
"""

import numpy as np
import pytest

from capalign.losses import AlignedBatch, Temperature, contrastive_loss, cosine_loss
from capalign.vision import EncoderParams, ViTConfig, forward, forward_backward, init_params

TINY = ViTConfig(image_size=8, patch_size=4, channels=3, width=16, depth=2,
                 heads=2, head_dim=8, ff_width=32, embed_dim=8)

MID = ViTConfig(image_size=16, patch_size=4, channels=3, width=32, depth=2,
                heads=2, head_dim=16, ff_width=64, embed_dim=8)

SEEDS = range(20)


def _assert_close(fd, an, rtol, atol, context):
    err = abs(fd - an)
    bound = rtol * max(abs(fd), abs(an)) + atol
    assert err <= bound, f"{context}: fd={fd:.10e} analytic={an:.10e} err={err:.3e}"


def _central_diff(f, x, i, eps):
    old = x.flat[i]
    x.flat[i] = old + eps
    fp = f()
    x.flat[i] = old - eps
    fm = f()
    x.flat[i] = old
    return (fp - fm) / (2.0 * eps)


# --- loss-level gradients -----------------------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_contrastive_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    b, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
    text = rng.standard_normal((b, d))
    img = rng.standard_normal((b, d))
    log_scale = float(rng.uniform(-1.0, 3.0))
    temp = Temperature(log_scale)
    res = contrastive_loss(AlignedBatch(text, img, list(range(b))), temp)

    state = {"s": log_scale}

    def loss_value():
        return contrastive_loss(
            AlignedBatch(text, img, list(range(b))), Temperature(state["s"])
        ).loss

    for i in range(img.size):
        fd = _central_diff(loss_value, img, i, 1e-5)
        _assert_close(fd, res.image_embed_grad.flat[i], 1e-5, 1e-10,
                      f"seed {seed} image_embeds[{i}]")

    old = state["s"]
    state["s"] = old + 1e-5
    fp = loss_value()
    state["s"] = old - 1e-5
    fm = loss_value()
    state["s"] = old
    _assert_close((fp - fm) / 2e-5, res.log_scale_grad, 1e-5, 1e-10, f"seed {seed} log_scale")


@pytest.mark.parametrize("seed", SEEDS)
def test_cosine_gradients_match_fd(seed):
    rng = np.random.default_rng(100 + seed)
    b, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
    text = rng.standard_normal((b, d))
    img = rng.standard_normal((b, d))
    res = cosine_loss(AlignedBatch(text, img, list(range(b))))

    def loss_value():
        return cosine_loss(AlignedBatch(text, img, list(range(b)))).loss

    for i in range(img.size):
        fd = _central_diff(loss_value, img, i, 1e-5)
        _assert_close(fd, res.image_embed_grad.flat[i], 1e-5, 1e-10,
                      f"seed {seed} image_embeds[{i}]")
    assert res.log_scale_grad is None


# --- encoder + head composition -------------------------------------------------


def _composed_loss_and_grads(params, images, text, loss_kind, temp):
    out = forward(params, images)
    batch = AlignedBatch(text, out, list(range(out.shape[0])))
    if loss_kind == "contrastive":
        res = contrastive_loss(batch, temp)
    else:
        res = cosine_loss(batch)
    _, grads = forward_backward(params, images, res.image_embed_grad)
    return res.loss, grads


def _check_composition(cfg, seed, samples_per_array, rtol, atol):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed).astype(np.float64)
    images = rng.uniform(-1, 1, (2, cfg.channels, cfg.image_size, cfg.image_size))
    text = rng.standard_normal((2, cfg.embed_dim))
    loss_kind = "contrastive" if seed % 2 == 0 else "cosine"
    temp = Temperature(float(rng.uniform(0.0, 2.0)))

    loss, grads = _composed_loss_and_grads(params, images, text, loss_kind, temp)
    assert np.isfinite(loss)

    def loss_value():
        return _composed_loss_and_grads(params, images, text, loss_kind, temp)[0]

    for name, arr in params.arrays.items():
        n = arr.size
        if samples_per_array is None or n <= samples_per_array:
            idxs = range(n)
        else:
            idxs = np.random.default_rng([seed, abs(hash(name)) % 2**32]).choice(
                n, size=samples_per_array, replace=False
            )
        g = grads[name]
        for i in idxs:
            # Step 1e-6: normalization curvature at init amplifies
            # truncation; see module docstring.
            fd = _central_diff(loss_value, arr, int(i), 1e-6)
            _assert_close(fd, g.flat[int(i)], rtol, atol,
                          f"{loss_kind} seed {seed} {name}[{int(i)}]")


@pytest.mark.parametrize("seed", range(6))
def test_forward_backward_matches_fd_linear_probe(seed):
    # forward_backward's own contract: gradients of <upstream, output>
    rng = np.random.default_rng(200 + seed)
    params = init_params(TINY, seed=seed).astype(np.float64)
    images = rng.uniform(-1, 1, (2, 3, 8, 8))
    up = rng.standard_normal((2, TINY.embed_dim))

    def probe():
        return float(np.sum(forward(params, images) * up))

    _, grads = forward_backward(params, images, up)
    for name, arr in params.arrays.items():
        idxs = np.random.default_rng([seed, abs(hash(name)) % 2**32]).choice(
            arr.size, size=min(10, arr.size), replace=False
        )
        for i in idxs:
            fd = _central_diff(probe, arr, int(i), 1e-5)
            _assert_close(fd, grads[name].flat[int(i)], 1e-4, 1e-8,
                          f"probe seed {seed} {name}[{int(i)}]")


def test_composition_param_budget():
    assert init_params(TINY, 0).param_count() <= 50_000
    assert init_params(MID, 0).param_count() <= 50_000


@pytest.mark.parametrize("seed", SEEDS)
def test_composition_gradients_match_fd(seed):
    _check_composition(TINY, seed, samples_per_array=12, rtol=1e-4, atol=1e-8)


def test_composition_gradients_exhaustive_tiny():
    # every component of every parameter array, one fixed seed
    _check_composition(TINY, seed=41, samples_per_array=None, rtol=1e-4, atol=1e-8)


def test_composition_gradients_midsize_sampled():
    _check_composition(MID, seed=7, samples_per_array=8, rtol=1e-4, atol=1e-8)
