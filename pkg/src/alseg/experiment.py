"""The full active-learning protocol: select, reveal labels, retrain from
the initialization weights, evaluate; repeated over budgets and seeds.

Every cycle retrains from the run's initialization weights (random or
contrastively pretrained), never from the previous cycle's weights, so a
cycle's model depends only on (init weights, labelled set, cycle seed).
Cycle 0 uses a strategy-independent random first batch, which makes
strategies comparable point by point.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .acquisition import (
    AcquisitionConfig,
    build_pool_state,
    greedy_select,
    random_select,
)
from .contrastive import transfer
from .data import Dataset
from .net import NetConfig, NetParams, TrainConfig, forward, init_params, train
from .rng import Rng

# One color per class id; void is yellow so it stands out in overlays.
PALETTE = (
    (30, 30, 30),
    (70, 130, 200),
    (240, 160, 40),
    (250, 250, 70),
    (80, 200, 120),
    (200, 80, 200),
    (120, 120, 220),
    (240, 80, 80),
)


@dataclass(frozen=True)
class ExperimentConfig:
    budgets: tuple[int, ...] = (20, 40, 60, 80, 100)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    init_mode: str = "none"
    grid: str = "none"  # none | terms | aggregators
    export_overlays: bool = False
    threads: int = 1

    def __post_init__(self):
        if len(self.budgets) < 1 or any(
            b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])
        ):
            raise ValueError("budgets must be non-empty and strictly increasing")
        if self.init_mode not in ("none", "contrastive"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.grid not in ("none", "terms", "aggregators"):
            raise ValueError(f"unknown grid {self.grid!r}")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class CycleResult:
    cycle: int
    labels: int
    per_class_iou: list[float]
    miou: float
    selected: list[int]
    wall_seconds: float


@dataclass
class SelectionLog:
    cycle: int
    strategy: str
    posterior: list[float] | None
    picks: list[dict]


def miou(preds: np.ndarray, gts: np.ndarray, n_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU and its mean, accumulated over all pixels.

    Classes absent from both ground truth and prediction are NaN and
    excluded from the mean.
    """
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape} vs gts {gts.shape}")
    if preds.min(initial=0) < 0 or preds.max(initial=0) >= n_classes:
        raise ValueError("prediction contains a class out of range")
    if gts.min(initial=0) < 0 or gts.max(initial=0) >= n_classes:
        raise ValueError("ground truth contains a class out of range")
    cm = np.bincount(
        (gts.ravel().astype(np.int64) * n_classes + preds.ravel()).astype(np.int64),
        minlength=n_classes * n_classes,
    ).reshape(n_classes, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    iou = np.full(n_classes, np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return iou, float(np.nanmean(iou))


def _init_weights(
    net_config: NetConfig, init_mode: str, pretrained: NetParams | None, seed: int
) -> NetParams:
    rng = Rng(seed).derive("init")
    if init_mode == "contrastive":
        if pretrained is None:
            raise ValueError("init_mode=contrastive needs pretrained parameters")
        return transfer(pretrained, net_config, rng)
    return init_params(net_config, rng)


def _evaluate(params: NetParams, dataset: Dataset) -> tuple[np.ndarray, float]:
    preds = np.empty((len(dataset.test_indices),) + dataset.masks.shape[1:], dtype=np.int64)
    for row, i in enumerate(dataset.test_indices):
        _, probs, _, _ = forward(params, dataset.images[i])
        preds[row] = probs.argmax(axis=-1)
    gts = dataset.masks[np.asarray(dataset.test_indices, dtype=np.intp)]
    return miou(preds, gts, dataset.n_classes)


def run_single(
    dataset: Dataset,
    net_config: NetConfig,
    train_config: TrainConfig,
    acq_config: AcquisitionConfig,
    exp_config: ExperimentConfig,
    seed: int,
    pretrained: NetParams | None = None,
) -> tuple[list[CycleResult], list[SelectionLog], NetParams]:
    """One seeded AL run; returns per-cycle results, selection logs and
    the final cycle's trained parameters."""
    budgets = exp_config.budgets
    train_pool = sorted(dataset.train_indices)
    if budgets[-1] > len(train_pool):
        raise ValueError(
            f"final budget {budgets[-1]} exceeds the training pool ({len(train_pool)})"
        )
    init = _init_weights(net_config, exp_config.init_mode, pretrained, seed)
    first_rng = Rng(seed).derive("first-batch")
    select_rng = Rng(seed).derive("select")

    labelled = sorted(first_rng.sample(train_pool, budgets[0]))
    unlabelled = sorted(set(train_pool) - set(labelled))
    new_batch = list(labelled)

    results: list[CycleResult] = []
    logs: list[SelectionLog] = []
    params = init
    for t, budget in enumerate(budgets):
        t0 = time.perf_counter()
        cycle_cfg = replace(train_config, seed=seed ^ t)
        params, _ = train(init, dataset, labelled, cycle_cfg)
        iou, mean_iou = _evaluate(params, dataset)
        results.append(
            CycleResult(
                cycle=t,
                labels=len(labelled),
                per_class_iou=[float(v) for v in iou],
                miou=mean_iou,
                selected=list(new_batch),
                wall_seconds=time.perf_counter() - t0,
            )
        )
        if t + 1 == len(budgets):
            break
        k = budgets[t + 1] - budgets[t]
        pool = build_pool_state(params, dataset.images, labelled, unlabelled)
        if acq_config.strategy == "random":
            picks = random_select(pool, k, select_rng)
            logs.append(
                SelectionLog(
                    cycle=t + 1,
                    strategy="random",
                    posterior=None,
                    picks=[
                        {"rank": r, "index": int(i), "r": None, "u": None, "d": None, "total": None}
                        for r, i in enumerate(picks)
                    ],
                )
            )
        else:
            picks, records, posterior = greedy_select(params, dataset.images, pool, acq_config, k)
            logs.append(
                SelectionLog(
                    cycle=t + 1,
                    strategy=acq_config.strategy,
                    posterior=[float(p) for p in posterior],
                    picks=[
                        {
                            "rank": r,
                            "index": int(i),
                            "r": rec.r,
                            "u": rec.u,
                            "d": rec.d,
                            "total": rec.total,
                        }
                        for r, (i, rec) in enumerate(zip(picks, records))
                    ],
                )
            )
        new_batch = sorted(picks)
        labelled = sorted(labelled + picks)
        unlabelled = sorted(set(unlabelled) - set(picks))
    return results, logs, params


# ---------------------------------------------------------------------------
# Multi-seed experiment with CSV/JSON reporting.

def _f32str(x: float) -> str:
    """Format so that reparsing reproduces the exact float32 value."""
    return f"{float(np.float32(x)):.9g}"


def term_grid_variants(base: AcquisitionConfig) -> list[tuple[str, AcquisitionConfig]]:
    """The four term combinations of the ablation table, labelled by the
    enabled terms (u = entropy, r = rareness, d = diversity/feature)."""
    combos = [
        ("u", (False, True, False)),
        ("r+u", (True, True, False)),
        ("u+d", (False, True, True)),
        ("r+u+d", (True, True, True)),
    ]
    out = []
    for label, (use_r, use_u, use_d) in combos:
        cfg = replace(
            base, strategy="rareness_aware", use_rareness=use_r, use_entropy=use_u, use_diversity=use_d
        )
        out.append((f"rareness_aware({label})", cfg))
    return out


def aggregator_grid_variants(base: AcquisitionConfig) -> list[tuple[str, AcquisitionConfig]]:
    return [
        (f"rareness_aware[{agg}]", replace(base, strategy="rareness_aware", aggregator=agg))
        for agg in ("max", "mean")
    ]


def _variants(acq_config: AcquisitionConfig, grid: str) -> list[tuple[str, AcquisitionConfig]]:
    if grid == "terms":
        return term_grid_variants(acq_config)
    if grid == "aggregators":
        return aggregator_grid_variants(acq_config)
    return [(acq_config.strategy, acq_config)]


def run_experiment(
    dataset: Dataset,
    net_config: NetConfig,
    train_config: TrainConfig,
    acq_config: AcquisitionConfig,
    exp_config: ExperimentConfig,
    out_dir,
    pretrained: NetParams | None = None,
) -> dict:
    """Run every (variant, seed) pair, then write curve.csv, timings.csv,
    summary.json and per-cycle selection logs under ``out_dir``.

    Seeds run in a thread pool of ``exp_config.threads`` workers; outputs
    are written after the join in a fixed order, so results do not depend
    on the worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = _variants(acq_config, exp_config.grid)

    tasks = [(vi, seed) for vi in range(len(variants)) for seed in exp_config.seeds]

    def _work(task):
        vi, seed = task
        return run_single(
            dataset, net_config, train_config, variants[vi][1], exp_config, seed, pretrained
        )

    if exp_config.threads > 1:
        with ThreadPoolExecutor(max_workers=exp_config.threads) as pool:
            outcomes = list(pool.map(_work, tasks))
    else:
        outcomes = [_work(t) for t in tasks]

    by_task = dict(zip(tasks, outcomes))
    class_cols = [f"iou_{name}" for name in dataset.class_names]
    curve_lines = ["strategy,init_mode,seed,cycle,labels,miou," + ",".join(class_cols)]
    timing_lines = ["strategy,init_mode,seed,cycle,wall_seconds"]
    summary: list[dict] = []
    for vi, (label, _) in enumerate(variants):
        per_cycle: dict[int, list[float]] = {}
        for seed in exp_config.seeds:
            results, logs, _ = by_task[(vi, seed)]
            for res in results:
                row = [
                    label, exp_config.init_mode, str(seed), str(res.cycle), str(res.labels),
                    _f32str(res.miou),
                ] + [_f32str(v) for v in res.per_class_iou]
                curve_lines.append(",".join(row))
                timing_lines.append(
                    f"{label},{exp_config.init_mode},{seed},{res.cycle},{res.wall_seconds:.3f}"
                )
                per_cycle.setdefault(res.cycle, []).append(res.miou)
            _write_selection_logs(out_dir, label, seed, logs)
        for cycle in sorted(per_cycle):
            vals = np.array(per_cycle[cycle], dtype=np.float64)
            summary.append(
                {
                    "strategy": label,
                    "init_mode": exp_config.init_mode,
                    "cycle": cycle,
                    "labels": int(exp_config.budgets[cycle]),
                    "mean_miou": float(np.float32(vals.mean())),
                    "std_miou": float(np.float32(vals.std())),
                    "n_seeds": int(len(vals)),
                }
            )

    (out_dir / "curve.csv").write_text("\n".join(curve_lines) + "\n")
    (out_dir / "timings.csv").write_text("\n".join(timing_lines) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    if exp_config.export_overlays:
        label0, _ = variants[0]
        _, _, final_params = by_task[(0, exp_config.seeds[0])]
        test_idx = np.asarray(dataset.test_indices, dtype=np.intp)
        export_overlays(
            final_params,
            dataset.images[test_idx],
            dataset.masks[test_idx],
            out_dir / "overlays" / f"{label0}_seed{exp_config.seeds[0]}",
        )
    return {"summary": summary, "variants": [label for label, _ in variants]}


def _write_selection_logs(out_dir: Path, strategy_label: str, seed: int, logs: list[SelectionLog]):
    safe = strategy_label.replace("/", "_")
    for log in logs:
        d = out_dir / "selections" / safe / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        payload = {
            "cycle": log.cycle,
            "strategy": log.strategy,
            "posterior": log.posterior,
            "picks": log.picks,
        }
        (d / f"selection_cycle{log.cycle}.json").write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Qualitative overlays: binary PPM triptychs (input | ground truth | prediction).

def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)


def class_palette(n_classes: int) -> np.ndarray:
    if n_classes > len(PALETTE):
        raise ValueError(f"palette covers at most {len(PALETTE)} classes")
    return np.array(PALETTE[:n_classes], dtype=np.uint8)


def export_overlays(params: NetParams, images: np.ndarray, masks: np.ndarray, out_dir) -> list[Path]:
    """One PPM per image: grayscale input, palette-colored ground truth,
    palette-colored prediction, side by side."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_classes = params.head_w.shape[1]
    palette = class_palette(max(n_classes, int(masks.max()) + 1))
    paths = []
    for i in range(images.shape[0]):
        _, probs, _, _ = forward(params, images[i])
        pred = probs.argmax(axis=-1)
        gray = np.clip(np.round(images[i, :, :, 0] * 255), 0, 255).astype(np.uint8)
        panel_in = np.stack([gray] * 3, axis=-1)
        panel_gt = palette[masks[i]]
        panel_pred = palette[pred]
        trip = np.concatenate([panel_in, panel_gt, panel_pred], axis=1)
        path = out_dir / f"overlay_{i:04d}.ppm"
        write_ppm(path, trip)
        paths.append(path)
    return paths
