"""Acceptance suite: one PASS/FAIL line per primary criterion.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import os
import sys
import tempfile
import time

import numpy as np
import pytest

from resunet import cli, data, metrics, model, tiling, train, verify
from resunet.model import ResidualUnitSpec

RESULTS: list[str] = []

# Desk-scale schedule: default lr, batch and epoch size, 3 epochs of 75 steps.
DESK_CONFIG = train.TrainConfig(epochs=3, seed=1, width_scale=0.125)
DESK_TRAIN_SCENES = (20, 0)  # count, dataset seed
DESK_HELD_OUT = (5, 1000)


def record(name: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return passed


# ------------------------------------------------------------------- criteria


def criterion_gradients() -> bool:
    t0 = time.perf_counter()
    worst_prim = max(fn(seed) for fn in verify.PRIMITIVE_CHECKS.values() for seed in range(20))
    model_err = verify.model_grad_error(seed=0, n_samples=30)
    elapsed = time.perf_counter() - t0
    ok = worst_prim < 1e-3 and model_err < 1e-2 and elapsed < 120
    return record(
        "gradient correctness", ok,
        f"primitives max rel err {worst_prim:.2e} (<1e-3, 20 seeds); "
        f"model max rel err {model_err:.2e} (<1e-2, 30 params); {elapsed:.1f}s (<120s)",
    )


def criterion_architecture() -> bool:
    t0 = time.perf_counter()
    shapes = verify.audit_shapes()
    store = model.init_params(0)
    main, total = model.count_main_path_conv(store), model.count_params(store)
    elapsed = time.perf_counter() - t0
    ok = shapes.passed and main == 7_780_096 and 7_400_000 <= total <= 8_400_000 and elapsed < 60
    return record(
        "architecture audit", ok,
        f"{shapes.detail}; main-path conv {main:,} (=7,780,096); total {total:,} "
        f"(in [7.4M, 8.4M]); {elapsed:.1f}s (<60s)",
    )


def criterion_residual_identity() -> bool:
    ok = True
    for level, width in ((2, 128), (5, 256)):
        spec = ResidualUnitSpec(width, width, 1)
        store = model.init_unit_params(spec, seed=level, level=level)
        # Non-trivial statistics so the branch really computes something before zeroing.
        for k in store.buffers:
            store.buffers[k][:] = np.random.default_rng(level).uniform(0.5, 2, store.buffers[k].shape)
        store.params[f"conv{2 * level - 1}.kernel"][:] = 0
        store.params[f"conv{2 * level}.kernel"][:] = 0
        x = np.random.default_rng(level).standard_normal((2, width, 16, 16)).astype(np.float32)
        ok &= np.array_equal(model.residual_unit_forward(x, spec, store, level, model.INFERENCE), x)
    return record("residual identity", bool(ok), "zeroed-branch units (128 and 256 channels) return x bit-exactly")


def _oracle_pr(pred, gt, rho):
    h, w = pred.shape

    def hits(a, b):
        return sum(
            bool(b[max(0, y - rho) : y + rho + 1, max(0, x - rho) : x + rho + 1].any())
            for y in range(h) for x in range(w) if a[y, x]
        )

    p_tot, g_tot = int(pred.sum()), int(gt.sum())
    return (hits(pred, gt) / p_tot if p_tot else 1.0), (hits(gt, pred) / g_tot if g_tot else 1.0)


def criterion_metric_oracle() -> bool:
    mismatches = 0
    strict_ok = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        density = rng.uniform(0.02, 0.4)
        pred, gt = rng.random((32, 32)) < density, rng.random((32, 32)) < density
        for rho in (0, 1, 3):
            mismatches += metrics.relaxed_pr(pred, gt, rho) != _oracle_pr(pred, gt, rho)
        tp = np.count_nonzero(pred & gt)
        strict_ok &= metrics.relaxed_pr(pred, gt, 0) == (tp / pred.sum(), tp / gt.sum())
    be = metrics.breakeven([(0.9, 0.8), (0.8, 0.9)])
    ok = mismatches == 0 and strict_ok and abs(be - 0.85) <= 1e-9
    return record(
        "metric oracle equivalence", ok,
        f"{150 - mismatches}/150 (pair, rho) cases exact; rho=0 strict {'exact' if strict_ok else 'differs'}; "
        f"two-point breakeven {be:.12f}",
    )


def criterion_stitching() -> bool:
    grid = tiling.plan_tiles(1500, 1500, overlap=14)
    rng = np.random.default_rng(0)
    tiles = [rng.uniform(0, 1, (224, 224)).astype(np.float32) for _ in range(len(grid))]
    total, count = np.zeros((1500, 1500)), np.zeros((1500, 1500))
    for tile, (x, y) in zip(tiles, grid.origins):
        total[y : y + 224, x : x + 224] += tile
        count[y : y + 224, x : x + 224] += 1
    oracle = (total / count).astype(np.float32)
    stitched_ok = np.array_equal(tiling.stitch(tiles, grid).probs[0, 0], oracle)

    store = model.init_params(0, width_scale=0.125)
    img = data.generate_synthetic_scene(data.SceneSpec(224, 224), seed=0).image
    single_ok = np.array_equal(tiling.predict_image(img, store).probs, model.forward(img, store))
    ok = stitched_ok and len(grid) == 64 and single_ok
    return record(
        "stitching exactness", ok,
        f"oracle {'bit-exact' if stitched_ok else 'differs'}; 1500x1500 o=14 -> {len(grid)} tiles; "
        f"single tile vs forward {'bit-exact' if single_ok else 'differs'}",
    )


def criterion_desk_end_to_end() -> bool:
    t0 = time.perf_counter()
    scenes = data.synthetic_dataset(DESK_TRAIN_SCENES[0], seed=DESK_TRAIN_SCENES[1])
    store, log = train.train(scenes, DESK_CONFIG)
    means = train.epoch_means(log)
    ratio = means[-1] / means[0]
    held = data.synthetic_dataset(DESK_HELD_OUT[0], seed=DESK_HELD_OUT[1])
    probs = [tiling.predict_image(s.image, store, batch_size=4).probs[0, 0] for s in held]
    curve = metrics.pr_curve(probs, [s.mask[0, 0] for s in held], rho=3)
    elapsed = time.perf_counter() - t0
    ok = ratio < 0.5 and curve.breakeven >= 0.90 and elapsed < 900
    return record(
        "desk-scale end-to-end", ok,
        f"epoch mean mse {' -> '.join(f'{m:.4f}' for m in means)} (ratio {ratio:.3f} < 0.5); "
        f"held-out relaxed breakeven {curve.breakeven:.4f} (>= 0.90, rho=3); {elapsed:.0f}s (<900s)",
    )


def _cli_run(root: str) -> dict[str, bytes]:
    out = os.path.join(root, "run")
    scene = data.generate_synthetic_scene(data.SceneSpec(300, 260), seed=42)
    img = os.path.join(root, "scene.png")
    data.save_png(scene.image[0], img)
    common = ["--threads", "1"]
    assert cli.main([
        "train", "--synthetic", "3", "--seed", "5", "--width-scale", "0.0625", "--epochs", "2",
        "--batch-size", "2", "--samples-per-epoch", "4", "--lr", "0.05", "--out", out, *common,
    ]) == 0
    assert cli.main([
        "predict", "--checkpoint", os.path.join(out, "final.ckpt"), "--out", os.path.join(root, "pred"), img, *common,
    ]) == 0
    files = {}
    for sub in ("run", "pred"):
        for name in sorted(os.listdir(os.path.join(root, sub))):
            if name.endswith((".ckpt", ".png")):
                with open(os.path.join(root, sub, name), "rb") as fh:
                    files[f"{sub}/{name}"] = fh.read()
    return files


def criterion_determinism() -> bool:
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        first, second = _cli_run(a), _cli_run(b)
    same = sorted(k for k in first if first[k] == second.get(k))
    ok = set(first) == set(second) and len(same) == len(first) and len(first) == 5
    return record("determinism", ok, f"{len(same)}/{len(first)} checkpoint and PNG files bit-identical across two train+predict runs")


def criterion_lr_schedule() -> bool:
    cfg = train.TrainConfig()
    got = [train.lr_at_epoch(cfg, e) for e in (0, 20, 45)]
    ok = got == [0.001, 0.0001, 0.00001]
    return record("LR schedule", ok, f"epochs 0/20/45 -> {got[0]!r} / {got[1]!r} / {got[2]!r}")


CRITERIA = [
    criterion_gradients,
    criterion_architecture,
    criterion_residual_identity,
    criterion_metric_oracle,
    criterion_stitching,
    criterion_desk_end_to_end,
    criterion_determinism,
    criterion_lr_schedule,
]


@pytest.mark.slow
@pytest.mark.parametrize("criterion", CRITERIA, ids=[c.__name__.removeprefix("criterion_") for c in CRITERIA])
def test_acceptance(criterion):
    assert criterion()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
