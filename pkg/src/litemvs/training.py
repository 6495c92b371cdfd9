"""RMSprop training loop with a step-decayed learning rate."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANTS, NetworkConfig
from .geometry import CameraView
from .network import DepthNetwork, depth_loss
from .tensor import NumericError, Tensor


class RMSprop:
    """RMSprop with smoothing 0.9 and epsilon 1e-8."""

    def __init__(self, params: dict[str, Tensor], rho: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.rho = rho
        self.eps = eps
        self.square_avg = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            s = self.square_avg[name]
            s *= self.rho
            s += (1.0 - self.rho) * p.grad * p.grad
            p.data -= lr * p.grad / (np.sqrt(s) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"opt/{name}": s for name, s in self.square_avg.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            name = key.removeprefix("opt/")
            if name not in self.square_avg:
                raise KeyError(f"unexpected optimizer entry '{name}'")
            self.square_avg[name][...] = arr


def learning_rate_at(iteration: int, config: NetworkConfig) -> float:
    """Step decay: initial rate times decay^(iteration // interval)."""
    return config.learning_rate * config.lr_decay ** (iteration // config.lr_decay_interval)


def train_step(model: DepthNetwork, views: list[CameraView], gt_depth: np.ndarray,
               valid_mask: np.ndarray, optimizer: RMSprop, lr: float):
    """One forward/backward/update step; returns (total_loss, per_branch)."""
    branches, _ = model.forward(views, training=True)
    total, per_branch = depth_loss([b[2] for b in branches], gt_depth, valid_mask,
                                   model.loss_weights)
    if not np.isfinite(total.data):
        raise NumericError(
            f"training loss is not finite (branch losses: {per_branch}); aborting"
        )
    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr)
    return float(total.data), per_branch


def compute_normalization(scenes) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over every image of the given scenes."""
    pixels = np.concatenate([v.image.reshape(-1, 3) for s in scenes for v in s.views])
    mean = pixels.mean(axis=0)
    std = pixels.std(axis=0)
    return mean, np.maximum(std, 1e-6)


def _pick_sample(scenes, seed: int, iteration: int):
    """Deterministic (scene, reference index) choice for one iteration."""
    rng = np.random.default_rng([seed, iteration])
    scene = scenes[int(rng.integers(len(scenes)))]
    ref = int(rng.integers(len(scene.views)))
    return scene, ref


def train(
    model: DepthNetwork,
    scenes,
    iterations: int,
    seed: int,
    out_dir: str | Path | None = None,
    optimizer: RMSprop | None = None,
    start_iteration: int = 0,
    log_every: int = 50,
    quiet: bool = False,
):
    """Train in place over the scene list; returns (optimizer, loss_history).

    Scene/reference sampling is a pure function of (seed, iteration), so a
    run resumed from a checkpoint continues with the same sample sequence.
    """
    if optimizer is None:
        optimizer = RMSprop(dict(model.named_parameters()))
    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows = []
    history = []
    for it in range(start_iteration, iterations):
        scene, ref_idx = _pick_sample(scenes, seed, it)
        order = [ref_idx] + [i for i in range(len(scene.views)) if i != ref_idx]
        views = [scene.views[i] for i in order]
        gt = scene.gt_depth_quarter[ref_idx]
        mask = gt > 0
        lr = learning_rate_at(it, model.config)
        loss, per_branch = train_step(model, views, gt, mask, optimizer, lr)
        history.append(loss)
        log_rows.append([it, lr, loss] + per_branch)
        if not quiet and (it % log_every == 0 or it == iterations - 1):
            print(f"iter {it:6d}  lr {lr:.6f}  loss {loss:.5f}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        header = ["iteration", "lr", "loss"] + [f"loss_branch{i}" for i in range(len(model.loss_weights))]
        mode = "a" if start_iteration and (out_dir / "loss_log.csv").exists() else "w"
        with open(out_dir / "loss_log.csv", mode, newline="") as fh:
            writer = csv.writer(fh)
            if mode == "w":
                writer.writerow(header)
            writer.writerows(log_rows)
        save_model(out_dir / "model.ckpt", model, optimizer, iterations)
    return optimizer, history


def save_model(path: str | Path, model: DepthNetwork, optimizer: RMSprop | None = None,
               iteration: int = 0) -> None:
    """Persist model, optimizer state, and config into one checkpoint file."""
    cfg = model.config
    state = model.state_dict()
    if optimizer is not None:
        state.update(optimizer.state_dict())
    variant_idx = sorted(VARIANTS).index(cfg.variant)
    state["meta/iteration"] = np.array(iteration, dtype=np.int64)
    state["meta/num_depths"] = np.array(cfg.num_depths, dtype=np.int64)
    state["meta/groups"] = np.array(cfg.groups, dtype=np.int64)
    state["meta/variant"] = np.array(variant_idx, dtype=np.int64)
    state["meta/loss_weights"] = np.asarray(cfg.loss_weights, dtype=np.float64)
    state["meta/lr"] = np.array([cfg.learning_rate, cfg.lr_decay, cfg.lr_decay_interval])
    save_checkpoint(path, state)


def load_model(path: str | Path, dtype=np.float32):
    """Rebuild a model (and optimizer state) from a checkpoint.

    Returns:
        (model, optimizer, iteration)
    """
    state = load_checkpoint(path)
    lr_array = state["meta/lr"]
    config = NetworkConfig(
        num_depths=int(state["meta/num_depths"]),
        groups=int(state["meta/groups"]),
        loss_weights=tuple(state["meta/loss_weights"]),
        learning_rate=float(lr_array[0]),
        lr_decay=float(lr_array[1]),
        lr_decay_interval=int(lr_array[2]),
        variant=sorted(VARIANTS)[int(state["meta/variant"])],
    )
    model = DepthNetwork(config, rng=np.random.default_rng(0), dtype=dtype)
    model.load_state_dict({k: v for k, v in state.items() if k.split("/")[0] in ("param", "buffer")})
    optimizer = RMSprop(dict(model.named_parameters()))
    opt_state = {k: v for k, v in state.items() if k.startswith("opt/")}
    if opt_state:
        optimizer.load_state_dict(opt_state)
    return model, optimizer, int(state["meta/iteration"])


def heldout_depth_mae(model: DepthNetwork, scenes) -> dict[str, float]:
    """Mean absolute depth error per scene (relative to each scene's range)."""
    results = {}
    for scene in scenes:
        errs = []
        rel = []
        for ref_idx in range(len(scene.views)):
            order = [ref_idx] + [i for i in range(len(scene.views)) if i != ref_idx]
            views = [scene.views[i] for i in order]
            out = model.infer(views)
            gt = scene.gt_depth_quarter[ref_idx]
            mask = gt > 0
            err = np.abs(out["depth"] - gt)[mask]
            errs.append(err.mean())
            span = views[0].d_max - views[0].d_min
            rel.append(err.mean() / span)
        results[scene.name] = {"mae": float(np.mean(errs)), "mae_rel_range": float(np.mean(rel))}
    return results
