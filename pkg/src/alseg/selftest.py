"""Built-in verification: gradient checks against central finite
differences, greedy selection against a brute-force per-step oracle, and
file-format round-trips. ``alseg selftest`` runs everything; the test
suite reuses the same oracles at larger instance counts.
"""

from __future__ import annotations

import math
import shutil
import tempfile
import time
from pathlib import Path

import numpy as np

from . import net
from .acquisition import (
    AcquisitionConfig,
    build_pool_state,
    entropy_image,
    greedy_select,
    rareness_image,
)
from .contrastive import (
    HeadParams,
    info_nce_backward,
    info_nce_loss,
    _project_batch,
)
from .data import SceneSpec, generate_dataset, load_dataset, save_dataset
from .experiment import miou
from .net import (
    NetConfig,
    NetParams,
    forward,
    image_embedding,
    init_params,
    load_params,
    save_params,
    weighted_cross_entropy,
)
from .ops import l2_distance, softmax
from .rng import Rng

TINY_NET = NetConfig(in_channels=1, enc1_channels=3, enc2_channels=4, dec_channels=3, n_classes=3)


def _rand_params(config: NetConfig, rng: Rng, dtype, scale: float = 0.6) -> NetParams:
    p = init_params(config, rng, dtype=np.float64)
    for _, arr in p.groups():
        arr *= scale
        arr += rng.normals(arr.shape, dtype=np.float64) * 0.05
    return p.astype(dtype)


def fd_gradients(loss_fn, params_like, h: float) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn() w.r.t. every group of
    ``params_like`` (perturbed in place, then restored)."""
    grads: dict[str, np.ndarray] = {}
    for name, arr in params_like.groups():
        g = np.zeros(arr.size, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads[name] = g.reshape(arr.shape)
    return grads


def group_rel_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, ga in analytic.items():
        gf = numeric[name]
        na = float(np.linalg.norm(ga.astype(np.float64)))
        nf = float(np.linalg.norm(gf))
        err = float(np.linalg.norm(ga.astype(np.float64) - gf)) / max(na, nf, 1e-12)
        worst = max(worst, err)
    return worst


def _kink_margin(cache, extra: list[np.ndarray] = ()) -> float:
    """Distance of the closest pre-ReLU value to zero. Finite differences
    are only trustworthy when the probe cannot cross a kink."""
    margin = min(
        float(np.abs(cache.z1).min()),
        float(np.abs(cache.z2).min()),
        float(np.abs(cache.z3).min()),
    )
    for arr in extra:
        margin = min(margin, float(np.abs(arr).min()))
    return margin


def gradcheck_ce(
    n_instances: int, dtype=np.float64, h: float = 1e-5, seed: int = 1234, margin_factor: float = 12
) -> float:
    """Worst per-group relative error of the weighted-CE backward pass
    over random tiny instances."""
    rng = Rng(seed)
    worst = 0.0
    for case in range(n_instances):
        for attempt in range(300):
            params = _rand_params(TINY_NET, rng.derive(f"p{case}.{attempt}"), dtype)
            r = rng.derive(f"x{case}.{attempt}")
            x = (r.normals((4, 4, 1), dtype=np.float64) * 0.4 + 0.5).astype(dtype)
            mask = np.array([[r.randint(TINY_NET.n_classes) for _ in range(4)] for _ in range(4)])
            weights = np.array([0.5 + r.random() * 2 for _ in range(TINY_NET.n_classes)])
            _, probs, _, cache = forward(params, x)
            if _kink_margin(cache) > margin_factor * h:
                break
        else:
            raise RuntimeError(f"no clean gradcheck instance found for case {case}")
        analytic = dict(net.backward(cache, mask, weights, params).groups())

        def loss():
            _, p, _, _ = forward(params, x)
            return weighted_cross_entropy(p, mask, weights)

        numeric = fd_gradients(loss, params, h)
        worst = max(worst, group_rel_error(analytic, numeric))
    return worst


def _rand_head(rng: Rng, dtype) -> HeadParams:
    # Nonzero biases keep the check instances away from the collapsed
    # all-equal-embeddings point, where the true gradient vanishes.
    return HeadParams(
        w1=rng.normals((TINY_NET.dec_channels, 4), dtype=np.float64).astype(dtype) * dtype(0.7),
        b1=rng.normals(4, dtype=np.float64).astype(dtype) * dtype(0.3),
        w2=rng.normals((4, 3), dtype=np.float64).astype(dtype) * dtype(0.7),
        b2=rng.normals(3, dtype=np.float64).astype(dtype) * dtype(0.3),
    )


def _infonce_instance(rng: Rng, case: int, h: float, margin_factor: float):
    """A random (params, head, views) batch far enough from ReLU kinks
    and embedding collapse for finite differences to be trustworthy."""
    for attempt in range(300):
        params = _rand_params(TINY_NET, rng.derive(f"p{case}.{attempt}"), np.float64)
        params.head_w = params.head_b = None
        head = _rand_head(rng.derive(f"h{case}.{attempt}"), np.float64)
        r = rng.derive(f"x{case}.{attempt}")
        # Distinct per-view brightness keeps the embeddings apart;
        # collapsed batches sit at a stationary point of the loss.
        offsets = np.arange(4, dtype=np.float64)[:, None, None, None] * 0.25
        views = r.normals((4, 4, 4, 1), dtype=np.float64) * 0.3 + 0.3 + offsets
        v, (cache, _, z1h, _, _, norms, _, _) = _project_batch(params, head, views)
        sims = v @ v.T
        np.fill_diagonal(sims, 0)
        if (
            _kink_margin(cache, [z1h]) > margin_factor * h
            and norms.min() > 0.05
            and sims.max() < 1.0 - 1e-5
        ):
            return params, head, views
    raise RuntimeError(f"no clean gradcheck instance found for case {case}")


def gradcheck_infonce(
    n_instances: int, dtype=np.float64, h: float = 1e-5, seed: int = 99, margin_factor: float = 12
) -> float:
    """Worst per-group relative error of the InfoNCE backward pass
    (network plus projection head) over random tiny batches.

    The finite-difference oracle always runs in float64 with step ``h``;
    with dtype=float32 the analytic gradients are computed by the pure
    32-bit pipeline and compared against that oracle (a 32-bit
    difference quotient would drown in rounding noise before reaching
    the 1e-2 tolerance).
    """
    rng = Rng(seed)
    tau = 0.5
    worst = 0.0
    for case in range(n_instances):
        params64, head64, views64 = _infonce_instance(rng, case, h, margin_factor)
        params, head, views = params64.astype(dtype), head64.astype(dtype), views64.astype(dtype)

        loss0, net_grads, head_grads = info_nce_backward(views, params, head, tau)
        analytic = dict(net_grads.groups())
        analytic.update({f"head_{k}": v for k, v in head_grads.groups()})

        def loss():
            v, _ = _project_batch(params64, head64, views64)
            return info_nce_loss(v, tau)

        if dtype == np.float64:
            assert abs(loss() - loss0) < 1e-5
        numeric = fd_gradients(loss, params64, h)
        head_numeric = fd_gradients(loss, head64, h)
        numeric.update({f"head_{k}": v for k, v in head_numeric.items()})
        worst = max(worst, group_rel_error(analytic, numeric))
    return worst


def brute_force_greedy(
    params: NetParams,
    images: np.ndarray,
    labelled: list[int],
    unlabelled: list[int],
    config: AcquisitionConfig,
    k: int,
) -> list[int]:
    """Algorithm-1 semantics the slow way: every step re-scans all of U,
    recomputes the posterior and every score from scratch, and measures
    diversity with freshly recomputed embeddings and min distances."""
    from .acquisition import class_posterior

    use_r, use_u, use_d = config.effective_terms()
    pool_all = sorted(labelled) + sorted(unlabelled)
    remaining = sorted(unlabelled)
    chosen: list[int] = []
    picks: list[int] = []
    for _ in range(k):
        posterior = class_posterior(params, images[np.asarray(pool_all, dtype=np.intp)])
        totals = np.empty(len(remaining), dtype=np.float64)
        for pos, i in enumerate(remaining):
            t = 0.0
            if use_r:
                t += rareness_image(params, images[i], posterior, config.aggregator)
            if use_u:
                t += entropy_image(params, images[i], config.aggregator)
            if use_d:
                emb = image_embedding(params, images[i])
                refs = [image_embedding(params, images[j]) for j in sorted(labelled) + chosen]
                t += min(l2_distance(emb, ref) for ref in refs)
            totals[pos] = t
        pick = remaining[int(np.argmax(totals))]
        picks.append(pick)
        chosen.append(pick)
        remaining.remove(pick)
    return picks


def greedy_matches_oracle(n_instances: int, seed: int = 7) -> bool:
    """Greedy pick sequences equal the brute-force oracle on random
    small pools with random models."""
    rng = Rng(seed)
    for case in range(n_instances):
        r = rng.derive(f"case{case}")
        n_pool = 6 + r.randint(7)  # 6..12
        k = 1 + r.randint(min(4, n_pool - 2))
        n_lab = 1 + r.randint(3)
        toggles = (bool(r.randint(2)), bool(r.randint(2)), bool(r.randint(2)))
        if not any(toggles):
            toggles = (True, True, True)
        config = AcquisitionConfig(
            strategy="rareness_aware",
            use_rareness=toggles[0],
            use_entropy=toggles[1],
            use_diversity=toggles[2],
            aggregator="max" if r.randint(2) else "mean",
        )
        params = _rand_params(TINY_NET, r.derive("params"), np.float32)
        images = (r.normals((n_pool + n_lab, 4, 4, 1), dtype=np.float64) * 0.3 + 0.5).astype(
            np.float32
        )
        labelled = list(range(n_lab))
        unlabelled = list(range(n_lab, n_lab + n_pool))

        pool = build_pool_state(params, images, labelled, unlabelled)
        fast, _, _ = greedy_select(params, images, pool, config, k)
        slow = brute_force_greedy(params, images, labelled, unlabelled, config, k)
        if fast != slow:
            return False
    return True


# ---------------------------------------------------------------------------
# Selftest entry point.

def _check_analytic() -> None:
    got = softmax(np.array([math.log(2.0), 0.0]))
    assert np.allclose(got, [2 / 3, 1 / 3], atol=1e-6)

    assert abs(l2_distance(np.zeros(2), np.array([3.0, 4.0])) - 5.0) < 1e-9

    probs = np.array([[0.8, 0.2], [0.4, 0.6]])
    mask = np.array([0, 1])
    expected = (1 * -math.log(0.8) + 3 * -math.log(0.6)) / 4
    assert abs(weighted_cross_entropy(probs, mask, np.array([1.0, 3.0])) - expected) < 1e-9

    e1 = np.array([1.0, 0.0], dtype=np.float32)
    e2 = np.array([0.0, 1.0], dtype=np.float32)
    v = np.stack([e1, e1, e2, e2])
    expected = math.log(math.e + 2) - 1.0
    assert abs(info_nce_loss(v, 1.0) - expected) < 1e-6

    gt = np.zeros((4, 4), dtype=np.int64)
    gt[:, 2:] = 1
    pred = np.zeros((4, 4), dtype=np.int64)
    pred[:, 3:] = 1
    iou, mean_iou = miou(pred, gt, 2)
    assert abs(iou[0] - 2 / 3) < 1e-9 and abs(iou[1] - 0.5) < 1e-9
    assert abs(mean_iou - 7 / 12) < 1e-9


def _check_roundtrips() -> None:
    tmp = Path(tempfile.mkdtemp(prefix="alseg_selftest_"))
    try:
        spec = SceneSpec()
        ds = generate_dataset(spec, 12, seed=3)
        save_dataset(ds, tmp / "ds")
        back = load_dataset(tmp / "ds")
        assert np.array_equal(ds.images, back.images)
        assert np.array_equal(ds.masks, back.masks)
        assert ds.train_indices == back.train_indices

        config = NetConfig(n_classes=len(ds.class_names))
        params = init_params(config, Rng(5))
        save_params(tmp / "ckpt.bin", params, config)
        loaded, loaded_cfg, kind = load_params(tmp / "ckpt.bin")
        assert loaded_cfg == config and kind == net.KIND_FULL
        for (_, a), (_, b) in zip(params.groups(), loaded.groups()):
            assert np.array_equal(a, b)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def run_all(verbose: bool = True) -> int:
    checks = [
        ("analytic unit values", _check_analytic),
        ("dataset and checkpoint round-trips", _check_roundtrips),
        ("weighted-CE gradients vs finite differences",
         lambda: _require(gradcheck_ce(5) < 1e-4, "relative error >= 1e-4")),
        ("InfoNCE gradients vs finite differences",
         lambda: _require(gradcheck_infonce(3) < 1e-4, "relative error >= 1e-4")),
        ("greedy selection vs brute-force oracle",
         lambda: _require(greedy_matches_oracle(10), "pick sequences diverged")),
    ]
    failures = 0
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as e:  # deliberate: report every check
            failures += 1
            if verbose:
                print(f"FAIL {name}: {e}")
            continue
        if verbose:
            print(f"ok   {name} ({time.perf_counter() - t0:.1f}s)")
    return 1 if failures else 0


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise AssertionError(message)
