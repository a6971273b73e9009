"""Mode selection, per-horizon RMSE, lambda ablation sweeps and report output."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .data import ManeuverDistribution, PredictionOutput, TrajectorySample
from .model import MIAT, VanillaTransformer, collate, predict

log = logging.getLogger(__name__)

HORIZONS_S = (1, 2, 3, 4, 5)
RATE_HZ = 5

# Reported NGSIM values, kept for side-by-side display only.
PUBLISHED_BASELINE_RMSE = {
    "MIAT-NoScale": [0.40, 0.98, 1.65, 2.52, 3.61],
    "MIAT-200x": [0.44, 0.98, 1.58, 2.31, 3.26],
    "Vanilla TF": [0.61, 1.31, 2.17, 3.23, 4.57],
}
PUBLISHED_LAMBDA_RMSE = {
    1: [0.40, 0.98, 1.65, 2.52, 3.61],
    10: [0.42, 1.01, 1.71, 2.57, 3.69],
    50: [0.42, 0.98, 1.62, 2.40, 3.42],
    80: [0.43, 1.02, 1.68, 2.48, 3.51],
    100: [0.44, 0.99, 1.62, 2.39, 3.40],
    200: [0.44, 0.98, 1.58, 2.31, 3.26],
}
PUBLISHED_LAMBDA_DELTAS_200X = {3: 4.2, 4: 8.3, 5: 9.6}

RMSE_NOTE = ("RMSE is computed per horizon: sqrt(mean_i |error_i,k|^2) at step k. "
             "The summed-over-steps variant (sum over k'<=k inside the root) is available "
             "with cumulative=True and is not used for the tables.")
SELECTION_NOTE = ("Test trajectories use the mode with the highest predicted joint maneuver "
                  "probability; ground-truth labels are never used for selection.")


def select_mode(output: Union[PredictionOutput, ManeuverDistribution]):
    """Index and trajectory of the most probable maneuver pair (lowest index on ties)."""
    dist = output.maneuvers if isinstance(output, PredictionOutput) else output
    index = int(np.argmax(dist.joint()))
    traj = output.modes[index] if isinstance(output, PredictionOutput) else None
    return index, traj


def horizon_steps(horizons_s: Sequence[float] = HORIZONS_S, rate_hz: int = RATE_HZ) -> List[int]:
    return [int(round(h * rate_hz)) for h in horizons_s]


def rmse_at_horizon(predictions, truths, k: int, cumulative: bool = False) -> float:
    """Root mean squared Euclidean error over samples at 1-based step ``k``."""
    pred = np.asarray(predictions, dtype=np.float64)
    true = np.asarray(truths, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ValueError(f"expected matching (N, F, 2) arrays, got {pred.shape} and {true.shape}")
    if pred.shape[0] == 0:
        raise ValueError("no samples to evaluate")
    if not 1 <= k <= pred.shape[1]:
        raise ValueError(f"step {k} outside [1, {pred.shape[1]}]")
    sq = ((pred - true) ** 2).sum(-1)
    per_sample = sq[:, :k].sum(-1) if cumulative else sq[:, k - 1]
    return float(np.sqrt(per_sample.mean()))


Predictor = Union[MIAT, VanillaTransformer, Callable[[Sequence[TrajectorySample]], dict]]


def run_predictor(predictor: Predictor, samples: Sequence[TrajectorySample], batch_size: int = 256) -> dict:
    """Selected-mode means (N, F, 2) and, when available, maneuver probabilities."""
    if not isinstance(predictor, torch.nn.Module):
        return predictor(samples)
    dtype = next(predictor.parameters()).dtype
    means, p_lat, p_lon, modes = [], [], [], []
    was_training = predictor.training
    predictor.eval()
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i:i + batch_size], dtype)
            if isinstance(predictor, MIAT):
                out = predictor(batch, modes="argmax")
                p_lat.append(out["p_lat"].double().numpy())
                p_lon.append(out["p_lon"].double().numpy())
                modes.append(out["modes"].numpy())
            else:
                out = predictor(batch)
            means.append(out["traj"][:, 0, :, :2].double().numpy())
    predictor.train(was_training)
    result = {"means": np.concatenate(means) if means else np.zeros((0, 0, 2))}
    if p_lat:
        result.update(p_lat=np.concatenate(p_lat), p_lon=np.concatenate(p_lon), modes=np.concatenate(modes))
    return result


def evaluate(predictor: Predictor, samples: Sequence[TrajectorySample],
             horizons_s: Sequence[float] = HORIZONS_S, rate_hz: int = RATE_HZ,
             cumulative: bool = False) -> Dict[str, float]:
    """RMSE at each horizon plus lateral/longitudinal maneuver accuracy."""
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    pred = run_predictor(predictor, samples)
    truths = np.stack([s.future for s in samples]).astype(np.float64)
    result = {"n": len(samples)}
    for h, k in zip(horizons_s, horizon_steps(horizons_s, rate_hz)):
        if k <= truths.shape[1]:
            result[f"rmse_{h:g}s"] = rmse_at_horizon(pred["means"], truths, k, cumulative)
    if "p_lat" in pred:
        lat = np.array([int(s.label.lateral) for s in samples])
        lon = np.array([int(s.label.longitudinal) for s in samples])
        result["man_acc_lat"] = float(np.mean(pred["p_lat"].argmax(-1) == lat))
        result["man_acc_lon"] = float(np.mean(pred["p_lon"].argmax(-1) == lon))
    else:
        result["man_acc_lat"] = float("nan")
        result["man_acc_lon"] = float("nan")
    return result


def relative_deltas(rows: Dict, reference) -> Dict:
    """Percent RMSE improvement of every row over the reference row (positive = better)."""
    ref = rows[reference]
    return {key: [100.0 * (r - x) / r if r else 0.0 for r, x in zip(ref, vals)] for key, vals in rows.items()}


def ablation_sweep(split, model_cfg, train_cfg, lambdas: Sequence[float], *, seeds: Optional[Sequence[int]] = None,
                   include_vanilla: bool = False, horizons_s: Sequence[float] = HORIZONS_S,
                   out_dir: Optional[Path] = None) -> dict:
    """Train one model per (lambda, seed) on identical data and tabulate test RMSE
    of each run's best-validation epoch.

    Deltas are percent improvements over the lambda=1 row (the first lambda
    when 1 is absent), averaged over seeds.
    """
    from .training import train

    if not lambdas:
        raise ValueError("lambdas must be non-empty")
    seeds = list(seeds) if seeds is not None else [train_cfg.seed]
    eval_set = split.test or split.validation
    runs = []
    variants = [("miat", float(lam)) for lam in lambdas]
    if include_vanilla:
        variants.append(("vanilla", None))
    for kind, lam in variants:
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed, model_kind=kind, lambda_=lam if lam is not None else 0.0)
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / "runs" / (f"lambda_{lam:g}" if kind == "miat" else "vanilla") / f"seed_{seed}"
            log.info("ablation run kind=%s lambda=%s seed=%d", kind, lam, seed)
            result = train(split, model_cfg, cfg, out_dir=run_dir)
            result.model.load_state_dict(result.best_state)
            metrics = evaluate(result.model, eval_set, horizons_s)
            runs.append({"kind": kind, "lambda": lam, "seed": seed,
                         "best_epoch": result.best_epoch, **metrics})

    keys = [f"rmse_{h:g}s" for h in horizons_s]
    rows = {}
    for kind, lam in variants:
        sel = [r for r in runs if r["kind"] == kind and r["lambda"] == lam]
        name = f"lambda={lam:g}" if kind == "miat" else "vanilla"
        rows[name] = [float(np.mean([r[k] for r in sel])) for k in keys]
    reference = "lambda=1" if "lambda=1" in rows else f"lambda={float(lambdas[0]):g}"
    return {
        "horizons_s": list(horizons_s),
        "seeds": seeds,
        "reference": reference,
        "runs": runs,
        "mean_rmse": rows,
        "deltas_pct": relative_deltas(rows, reference),
        "published_reference": {
            "note": "NGSIM values reported for the original model; not reproducible at desk scale",
            "lambda_rmse": {str(k): v for k, v in PUBLISHED_LAMBDA_RMSE.items()},
            "lambda_200_deltas_pct": {f"{k}s": v for k, v in PUBLISHED_LAMBDA_DELTAS_200X.items()},
        },
        "notes": [RMSE_NOTE, SELECTION_NOTE],
    }


def evaluation_report(metrics: Dict[str, float], horizons_s: Sequence[float] = HORIZONS_S) -> dict:
    return {
        "metrics": metrics,
        "published_reference": {
            "note": "NGSIM values reported for the original model; not reproducible at desk scale",
            "baseline_rmse": PUBLISHED_BASELINE_RMSE,
        },
        "horizons_s": list(horizons_s),
        "notes": [RMSE_NOTE, SELECTION_NOTE],
    }


def format_table(rows: Dict[str, Sequence[float]], horizons_s: Sequence[float] = HORIZONS_S,
                 deltas: Optional[Dict[str, Sequence[float]]] = None) -> str:
    """Aligned text table; deltas, when given, are appended in parentheses."""
    name_w = max([len("model")] + [len(k) for k in rows])
    cells = {}
    for name, vals in rows.items():
        out = []
        for i, v in enumerate(vals):
            text = f"{v:.3f}"
            if deltas is not None:
                text += f" ({deltas[name][i]:+.1f}%)"
            out.append(text)
        cells[name] = out
    col_w = max([8] + [len(c) for cs in cells.values() for c in cs])
    lines = ["model".ljust(name_w) + "".join(f"{h:g} s".rjust(col_w + 2) for h in horizons_s)]
    lines.append("-" * len(lines[0]))
    for name, cs in cells.items():
        lines.append(name.ljust(name_w) + "".join(c.rjust(col_w + 2) for c in cs))
    return "\n".join(lines)


def write_report(report: dict, out_dir, stem: str = "report") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default))
    horizons = report.get("horizons_s", list(HORIZONS_S))
    lines = []
    if "mean_rmse" in report:
        lines.append(format_table(report["mean_rmse"], horizons, report["deltas_pct"]))
        lines.append("")
        lines.append("published NGSIM values (reference only):")
        ref = {f"lambda={k}": v for k, v in PUBLISHED_LAMBDA_RMSE.items()}
        lines.append(format_table(ref, horizons))
    else:
        m = report["metrics"]
        lines.append(format_table({"model": [m.get(f"rmse_{h:g}s", float("nan")) for h in horizons]}, horizons))
        lines.append(f"maneuver accuracy: lateral {m['man_acc_lat']:.3f}  longitudinal {m['man_acc_lon']:.3f}")
        lines.append("")
        lines.append("published NGSIM values (reference only):")
        lines.append(format_table(PUBLISHED_BASELINE_RMSE, horizons))
    lines.append("")
    lines.extend(report.get("notes", []))
    (out_dir / f"{stem}.txt").write_text("\n".join(lines) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def emit_plot_data(results: dict, path, trajectories: Optional[List[dict]] = None) -> List[Path]:
    """Write ``(lambda, horizon_s, rmse_m)`` rows and optional trajectory dumps.

    ``results`` is an ablation report (uses ``mean_rmse``) or a mapping of
    lambda to per-horizon RMSE lists. Returns the written paths.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows = results.get("mean_rmse", results)
    horizons = results.get("horizons_s", list(HORIZONS_S))
    written = []
    csv_path = path / "rmse_by_lambda.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "horizon_s", "rmse_m"])
        for name, vals in rows.items():
            lam = name.split("=", 1)[1] if isinstance(name, str) and name.startswith("lambda=") else name
            for h, v in zip(horizons, vals):
                w.writerow([lam, repr(float(h)), repr(float(v))])
    written.append(csv_path)
    if trajectories is not None:
        traj_path = path / "trajectories.json"
        traj_path.write_text(json.dumps(trajectories, default=_json_default))
        written.append(traj_path)
    return written


def read_plot_csv(path) -> List[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(lam, float(h), float(v)) for lam, h, v in reader]


def trajectory_dump(model: MIAT, samples: Sequence[TrajectorySample]) -> List[dict]:
    """Per-sample history, truth, 9 predicted mode means and maneuver probabilities."""
    outputs = predict(model, samples)
    dumps = []
    for s, out in zip(samples, outputs):
        idx, _ = select_mode(out)
        dumps.append({
            "ego_id": s.ego_id,
            "anchor_frame": s.anchor_frame,
            "label": str(s.label),
            "history": s.ego_history[:, :2].astype(np.float64).tolist(),
            "neighbors": [
                {"cell": int(c), "history": s.neighbor_histories[c, :, :2].astype(np.float64).tolist(),
                 "mask": s.neighbor_mask[c].tolist()}
                for c in np.flatnonzero(s.neighbor_mask.any(-1))
            ],
            "truth": s.future.astype(np.float64).tolist(),
            "modes": [g.means().tolist() for g in out.modes],
            "sigmas": [np.stack([g.sigma_x, g.sigma_y], -1).tolist() for g in out.modes],
            "p_lateral": out.maneuvers.p_lateral.tolist(),
            "p_longitudinal": out.maneuvers.p_longitudinal.tolist(),
            "selected_mode": idx,
        })
    return dumps
