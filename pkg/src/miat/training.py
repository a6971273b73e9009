"""Adam training loop, checkpoints and the finite-difference gradient checker."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import DatasetSplit, TrajectorySample
from .evaluation import HORIZONS_S, evaluate
from .model import MIAT, ModelConfig, build_model, collate, parameter_groups, record_kinks
from .objectives import LossConfig, combined_loss, model_losses

log = logging.getLogger(__name__)

METRIC_COLUMNS = (["epoch", "phase", "train_loss"] + [f"val_rmse_{h}s" for h in HORIZONS_S]
                  + ["man_acc_lat", "man_acc_lon"])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    warmup_epochs: int = 5
    lambda_: float = 1.0
    clip_norm: float = 10.0
    model_kind: str = "miat"
    float64: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.model_kind not in ("miat", "vanilla"):
            raise ValueError(f"model_kind must be 'miat' or 'vanilla', got {self.model_kind!r}")
        LossConfig(self.lambda_, self.warmup_epochs)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_, self.warmup_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the state of the last finished epoch."""

    def __init__(self, message: str, last_good: "Checkpoint"):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    epoch: int = -1
    best_epoch: int = -1
    best_score: float = math.inf
    metrics: List[dict] = field(default_factory=list)

    def build(self):
        model = build_model(self.model_cfg, self.train_cfg.model_kind)
        if self.train_cfg.float64:
            model = model.double()
        model.load_state_dict(self.model_state)
        return model


@dataclass
class TrainResult:
    model: torch.nn.Module
    metrics: List[dict]
    best_state: Dict[str, torch.Tensor]
    best_epoch: int
    last: Checkpoint


# --------------------------------------------------------------------------- training

def _stack(samples: Sequence[TrajectorySample], dtype) -> Dict[str, torch.Tensor]:
    return collate(samples, dtype)


def _index(batch: Dict[str, torch.Tensor], idx) -> Dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in batch.items()}


def _snapshot(model, optimizer, model_cfg, train_cfg, epoch, best_epoch, best_score, metrics) -> Checkpoint:
    return Checkpoint(
        model_cfg, train_cfg,
        {k: v.detach().clone() for k, v in model.state_dict().items()},
        copy.deepcopy(optimizer.state_dict()),
        epoch, best_epoch, best_score, [dict(m) for m in metrics],
    )


def train(split: DatasetSplit, model_cfg: ModelConfig, train_cfg: TrainConfig, *,
          out_dir=None, resume: Optional[Checkpoint] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train on ``split.train`` and select the best epoch by validation RMSE at 5 s.

    Shuffling for epoch ``e`` uses ``default_rng([seed, e])`` so a run resumed
    from a checkpoint replays exactly the batches of an uninterrupted run.
    When ``out_dir`` is given, ``metrics.csv``, ``checkpoint.bin`` (best epoch)
    and ``checkpoint_last.bin`` are written there.
    """
    if not split.train:
        raise ValueError("training set is empty")
    dtype = torch.float64 if train_cfg.float64 else torch.float32
    loss_cfg = train_cfg.loss

    model = build_model(model_cfg, train_cfg.model_kind, seed=train_cfg.seed).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                                 betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.adam_eps)
    metrics: List[dict] = []
    start_epoch, best_epoch, best_score = 0, -1, math.inf
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if resume is not None:
        if resume.model_cfg != model_cfg:
            raise ValueError("checkpoint model config does not match")
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        start_epoch, best_epoch, best_score = resume.epoch + 1, resume.best_epoch, resume.best_score
        metrics = [dict(m) for m in resume.metrics]

    data = _stack(split.train, dtype)
    n = len(split.train)
    val_set = split.validation or split.train
    last = _snapshot(model, optimizer, model_cfg, train_cfg, start_epoch - 1, best_epoch, best_score, metrics)
    best_ckpt = last

    for epoch in range(start_epoch, train_cfg.epochs):
        model.train()
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        total = 0.0
        for i in range(0, n, train_cfg.batch_size):
            idx = torch.as_tensor(order[i:i + train_cfg.batch_size])
            batch = _index(data, idx)
            modes = batch["lat"] * 3 + batch["lon"]
            out = model(batch, modes=modes) if isinstance(model, MIAT) else model(batch)
            l_traj, l_man = model_losses(out, batch, epoch, loss_cfg)
            loss = l_traj if l_man is None else combined_loss(l_traj, l_man, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {i // train_cfg.batch_size} "
                    f"(phase {loss_cfg.phase(epoch)}, traj={l_traj.item():g})", last)
            optimizer.zero_grad()
            loss.backward()
            if train_cfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.clip_norm)
            optimizer.step()
            total += loss.item() * len(idx)

        val = evaluate(model, val_set)
        row = {"epoch": epoch, "phase": loss_cfg.phase(epoch), "train_loss": total / n}
        for h in HORIZONS_S:
            row[f"val_rmse_{h}s"] = val.get(f"rmse_{h}s", float("nan"))
        row["man_acc_lat"] = val["man_acc_lat"]
        row["man_acc_lon"] = val["man_acc_lon"]
        metrics.append(row)
        log.info("epoch %d %s loss=%.4f val_rmse_5s=%.3f", epoch, row["phase"], row["train_loss"],
                 row["val_rmse_5s"])
        score = row["val_rmse_5s"]
        if score < best_score or best_epoch < 0:
            best_score, best_epoch = score, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        last = _snapshot(model, optimizer, model_cfg, train_cfg, epoch, best_epoch, best_score, metrics)
        if best_epoch == epoch:
            best_ckpt = last
        if on_epoch is not None:
            on_epoch(row)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out_dir / "metrics.csv")
        save_checkpoint(best_ckpt, out_dir / "checkpoint.bin")
        save_checkpoint(last, out_dir / "checkpoint_last.bin")
    return TrainResult(model, metrics, best_state, best_epoch, last)


def write_metrics(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], (str, int)) else repr(float(row[c])) for c in METRIC_COLUMNS])


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "epoch" else v if k == "phase" else float(v)) for k, v in r.items()})
        return rows


# --------------------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MIATCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(model_cfg: ModelConfig) -> str:
    blob = json.dumps(model_cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _flatten_optimizer(state: Optional[dict]):
    tensors, meta = {}, None
    if state is None:
        return tensors, meta
    meta = {"param_groups": state["param_groups"], "state": {}}
    for pid, st in state["state"].items():
        meta["state"][str(pid)] = []
        for key, val in st.items():
            name = f"optim/{pid}/{key}"
            tensors[name] = val if isinstance(val, torch.Tensor) else torch.tensor(val)
            meta["state"][str(pid)].append(key)
    return tensors, meta


def _unflatten_optimizer(meta, tensors):
    if meta is None:
        return None
    state = {int(pid): {key: tensors[f"optim/{pid}/{key}"] for key in keys} for pid, keys in meta["state"].items()}
    return {"param_groups": meta["param_groups"], "state": state}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Versioned binary: JSON header (configs, hash, tensor table) + raw tensor bytes."""
    tensors = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    opt_tensors, opt_meta = _flatten_optimizer(ckpt.optimizer_state)
    tensors.update(opt_tensors)
    table, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "model_config": ckpt.model_cfg.to_dict(),
        "train_config": ckpt.train_cfg.to_dict(),
        "config_hash": config_hash(ckpt.model_cfg),
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "best_score": ckpt.best_score if math.isfinite(ckpt.best_score) else None,
        "metrics": ckpt.metrics,
        "optimizer": opt_meta,
        "tensors": table,
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    buf.write(b"".join(chunks))
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path, model_cfg: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; reject it if ``model_cfg`` is given and differs."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupted or truncated)")
    header = json.loads(blob[16:16 + hlen])
    cfg = ModelConfig.from_dict(header["model_config"])
    if header["config_hash"] != config_hash(cfg):
        raise CheckpointError("config hash mismatch")
    if model_cfg is not None and config_hash(model_cfg) != header["config_hash"]:
        raise CheckpointError("checkpoint was written for a different model config")
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(blob) - 4:
            raise CheckpointError(f"tensor {entry['name']} truncated")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])),
                            offset=start).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    best = header["best_score"]
    return Checkpoint(
        cfg, TrainConfig.from_dict(header["train_config"]), model_state,
        _unflatten_optimizer(header["optimizer"], tensors),
        header["epoch"], header["best_epoch"], math.inf if best is None else best, header["metrics"],
    )


# --------------------------------------------------------------------------- gradient check

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    groups: List[str]
    worst: str
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def relative_error(analytic: float, numeric: float, abs_floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|), or the absolute difference when |a| < abs_floor."""
    diff = abs(analytic - numeric)
    if abs(analytic) < abs_floor:
        return diff
    return diff / max(abs(analytic), abs(numeric))


def random_sample(model_cfg: ModelConfig, seed: int = 0, scale: float = 1.0,
                  occupancy: float = 0.25) -> TrajectorySample:
    """A frozen random sample with meter-scale features and a random grid occupancy."""
    from .data import Lateral, Longitudinal, ManeuverLabel

    rng = np.random.default_rng(seed)
    T, F, D, C = model_cfg.history_len, model_cfg.future_len, model_cfg.input_dim, model_cfg.grid.n_cells
    ego = np.cumsum(rng.normal(0, scale, (T, D)), axis=0)
    ego -= ego[-1]
    mask = np.zeros((C, T), dtype=bool)
    for c in np.flatnonzero(rng.random(C) < occupancy):
        lo = int(rng.integers(0, T))
        mask[c, lo:int(rng.integers(lo + 1, T + 1))] = True
    nbrs = rng.normal(0, 3 * scale, (C, T, D)) * mask[..., None]
    future = np.cumsum(rng.normal(0, scale, (F, 2)), axis=0)
    label = ManeuverLabel(Lateral(int(rng.integers(3))), Longitudinal(int(rng.integers(3))))
    return TrajectorySample(ego.astype(np.float32), nbrs.astype(np.float32), mask,
                            future.astype(np.float32), label, ego_id=0, anchor_frame=0)


def gradcheck_samples(model: torch.nn.Module, model_cfg: ModelConfig, seed: int = 0, n: int = 1,
                      target_noise: float = 0.5) -> List[TrajectorySample]:
    """Frozen random samples whose futures sit near the model's own prediction.

    Keeping the loss O(1) keeps central-difference round-off (about
    machine-eps * loss / step) well under small gradient entries.
    """
    samples = [random_sample(model_cfg, seed + i) for i in range(n)]
    dtype = next(model.parameters()).dtype
    batch = collate(samples, dtype)
    modes = batch["lat"] * 3 + batch["lon"]
    with torch.no_grad():
        out = model(batch, modes=modes) if isinstance(model, MIAT) else model(batch)
    means = out["traj"][:, 0, :, :2].double().numpy()
    rng = np.random.default_rng(seed)
    for s, mu in zip(samples, means):
        s.future = (mu + rng.normal(0, target_noise, mu.shape)).astype(np.float32)
    return samples


def gradient_check(model: torch.nn.Module, samples: Sequence[TrajectorySample], loss_cfg: LossConfig, *,
                   epoch: Optional[int] = None, n_params: int = 200, step: float = 1e-4, seed: int = 0,
                   corrupt: Optional[Callable[[Dict[str, torch.Tensor]], None]] = None) -> GradCheckResult:
    """Compare autograd gradients of the combined loss with central differences.

    Runs on a float64 copy of ``model``. At least one element of every
    parameter group is checked and the rest of the ``n_params`` budget is
    drawn with probability proportional to tensor size. An element whose
    +-step perturbation flips the side of any LeakyReLU kink is not
    differentiable over the stencil; the step is shrunk tenfold (up to three
    times) until the stencil is kink-free, else the element is redrawn.
    ``epoch`` defaults to the first NLL epoch. ``corrupt`` may edit the
    analytic gradients in place before comparison.
    """
    model = copy.deepcopy(model).double()
    model.eval()
    epoch = loss_cfg.warmup_epochs if epoch is None else epoch
    batch = collate(samples, torch.float64)
    modes = batch["lat"] * 3 + batch["lon"]
    params = dict(model.named_parameters())

    def loss_fn():
        out = model(batch, modes=modes) if isinstance(model, MIAT) else model(batch)
        l_traj, l_man = model_losses(out, batch, epoch, loss_cfg)
        return l_traj if l_man is None else combined_loss(l_traj, l_man, loss_cfg)

    def loss_and_kinks():
        with record_kinks() as signs:
            value = loss_fn().item()
        return value, torch.cat(signs) if signs else torch.zeros(0, dtype=torch.bool)

    model.zero_grad()
    loss_fn().backward()
    grads = {k: p.grad.detach().clone() for k, p in params.items()}
    if corrupt is not None:
        corrupt(grads)
    with torch.no_grad():
        _, base_signs = loss_and_kinks()

    rng = np.random.default_rng(seed)
    groups = parameter_groups(model)
    picks = [names[int(rng.integers(len(names)))] for names in groups.values()]
    all_names = list(params)
    sizes = np.array([params[k].numel() for k in all_names], dtype=np.float64)
    picks += [all_names[i] for i in rng.choice(len(all_names), size=max(0, n_params - len(picks)),
                                               p=sizes / sizes.sum())]

    steps = [step * 10.0 ** -i for i in range(4)]
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    with torch.no_grad():
        for name in picks:
            p = params[name].view(-1)
            for _ in range(100):
                flat = int(rng.integers(p.numel()))
                orig = p[flat].item()
                for h in steps:
                    p[flat] = orig + h
                    up, up_signs = loss_and_kinks()
                    p[flat] = orig - h
                    down, down_signs = loss_and_kinks()
                    p[flat] = orig
                    if torch.equal(up_signs, base_signs) and torch.equal(down_signs, base_signs):
                        break
                    skipped += 1
                else:
                    continue
                break
            else:
                raise RuntimeError(f"could not find a kink-free element in {name}")
            numeric = (up - down) / (2 * h)
            err = relative_error(grads[name].view(-1)[flat].item(), numeric)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{flat}] (step {h:g})"
    if skipped:
        log.info("gradient check redrew %d kink-crossing elements", skipped)
    return GradCheckResult(worst, checked, sorted(groups), worst_name, skipped)


def loss_gradients(model: torch.nn.Module, samples: Sequence[TrajectorySample], loss_cfg: LossConfig,
                   epoch: Optional[int] = None):
    """Flat float64 gradients of (L_traj, L_man, L_combined) for one batch."""
    model = copy.deepcopy(model).double()
    epoch = loss_cfg.warmup_epochs if epoch is None else epoch
    batch = collate(samples, torch.float64)
    modes = batch["lat"] * 3 + batch["lon"]
    params = list(model.parameters())

    def flat_grad(which):
        out = model(batch, modes=modes)
        l_traj, l_man = model_losses(out, batch, epoch, loss_cfg)
        loss = {"traj": l_traj, "man": l_man, "combined": combined_loss(l_traj, l_man, loss_cfg)}[which]
        gs = torch.autograd.grad(loss, params, allow_unused=True)
        return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(gs, params)])

    return flat_grad("traj"), flat_grad("man"), flat_grad("combined")
