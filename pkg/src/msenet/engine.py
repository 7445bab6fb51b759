"""Episodic training: parameter initialisation, Adam steps, checkpoints."""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .backbone import ResNet18Backbone, TinyBackbone, load_pretrained
from .config import RunConfig, from_dict
from .data import (DatasetIndex, Episode, ImageLoader, SplitSpec, build_index, check_split_supports,
                   episode_seed, make_splits, read_split_file, sample_episode, write_split_file)
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .model import MSENet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def set_determinism(deterministic: bool = True, threads: int | None = None) -> None:
    if threads:
        torch.set_num_threads(int(threads))
    torch.use_deterministic_algorithms(deterministic)


def build_model(config: RunConfig, pretrained: bool = True) -> MSENet:
    """Architecture from ``config``; residual18 weights are loaded when ``pretrained``."""
    m = config.model
    if m.backbone == "tiny":
        backbone = TinyBackbone(m.channel_plan, seed=config.seed)
    elif pretrained:
        if not m.pretrained:
            raise ConfigError("model.pretrained must point to a residual18 weight file")
        backbone = load_pretrained(m.pretrained)
    else:
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            backbone = ResNet18Backbone()
    return MSENet(
        backbone,
        multiscale=m.multiscale,
        learnable_weight=m.learnable_weight,
        self_attention=m.self_attention,
        w_init=m.w_init,
        gamma_init=m.gamma_init,
        reduction=m.reduction,
        split_gamma=m.split_gamma,
        freeze_gamma=m.freeze_gamma,
        distance=m.distance,
        seed=config.seed + 1,
    )


def init_params(config: RunConfig) -> MSENet:
    return build_model(config.validate(), pretrained=True)


def make_optimizer(model: MSENet, config: RunConfig, lr: float | None = None) -> torch.optim.Adam:
    o = config.optim
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=o.lr if lr is None else lr, betas=(o.beta1, o.beta2), eps=o.eps)


@dataclass
class TrainState:
    model: MSENet
    optimizer: torch.optim.Optimizer
    config: RunConfig
    episode: int = 0
    history: list[dict] = field(default_factory=list)
    best_val: float | None = None

    @classmethod
    def fresh(cls, config: RunConfig, model: MSENet | None = None) -> "TrainState":
        model = model if model is not None else init_params(config)
        return cls(model=model, optimizer=make_optimizer(model, config), config=config)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.history if r["kind"] == "step"]


def parameter_norms(model: torch.nn.Module) -> dict[str, float]:
    return {name: float(p.detach().norm()) for name, p in model.named_parameters()}


def train_step(state: TrainState, episode: Episode) -> TrainState:
    """One Adam update on the mean negative log-posterior of the episode's queries."""
    model = state.model
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    agg = model(episode)
    loss = F.cross_entropy(-agg, episode.query_labels)
    if not torch.isfinite(loss):
        snapshot = {"episode": state.episode, "episode_seed": episode.seed, "param_norms": parameter_norms(model)}
        raise TrainingDiverged(f"non-finite loss at episode {state.episode} (seed {episode.seed})", snapshot)
    loss.backward()
    state.optimizer.step()
    state.episode += 1
    with torch.no_grad():
        acc = (agg.argmin(dim=1) == episode.query_labels).float().mean().item()
    state.history.append({
        "kind": "step",
        "episode": state.episode,
        "loss": loss.item(),
        "accuracy": acc,
        "lr": state.optimizer.param_groups[0]["lr"],
        "episode_seed": episode.seed,
        "digest": episode.digest(),
        "timestamp": time.time(),
    })
    return state


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a single-file archive atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "variant": state.model.variant,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "episode": state.episode,
        "best_val": state.best_val,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
    }
    tmp = path.with_name(f".{path.name}.tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, config: RunConfig | None = None) -> TrainState:
    """Rebuild a ``TrainState``. With ``config`` the backbone variant must agree."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        found = payload.get("format_version") if isinstance(payload, dict) else None
        raise CheckpointError(f"{path}: format version {found!r}, expected {CHECKPOINT_VERSION}")
    if config is not None and config.model.backbone != payload["variant"]:
        raise CheckpointError(
            f"{path}: backbone variant mismatch: checkpoint is {payload['variant']!r}, "
            f"config asks for {config.model.backbone!r}")
    stored = from_dict(payload["config"])
    model = build_model(stored, pretrained=False)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not fit the stored architecture: {e}") from e
    optimizer = make_optimizer(model, stored)
    optimizer.load_state_dict(payload["optimizer"])
    return TrainState(model=model, optimizer=optimizer, config=stored, episode=payload["episode"],
                      best_val=payload.get("best_val"))


def resolve_split(config: RunConfig, index: DatasetIndex) -> SplitSpec:
    if config.data.split_file:
        return read_split_file(config.data.split_file, index)
    return make_splits(index, config.data.split_counts, config.seed)


def _atomic_copy(src: Path, dst: Path) -> None:
    tmp = dst.with_name(f".{dst.name}.tmp")
    shutil.copyfile(src, tmp)
    os.replace(tmp, dst)


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    best_checkpoint: Path
    history: list[dict]
    split: SplitSpec
    index: DatasetIndex


def train(config: RunConfig, run_dir, index: DatasetIndex | None = None, loader: ImageLoader | None = None,
          progress=None) -> TrainResult:
    """Run ``config.total_episodes`` training episodes and write checkpoints under ``run_dir``.

    Validation runs every ``eval_interval`` episodes when the split has
    validation classes; the best-by-val-accuracy state goes to ``best.pt``.
    """
    from .evaluation import evaluate  # evaluation imports engine

    config.validate()
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    index = index or build_index(config.data.resolved_root())
    split = resolve_split(config, index)
    write_split_file(split, run_dir / "split.txt")

    train_spec = config.train_task.spec()
    check_split_supports(index, split.train, train_spec)
    do_val = bool(split.val) and config.val_episodes > 0
    if do_val:
        check_split_supports(index, split.val, config.eval_task.spec())

    loader = loader or ImageLoader(config.data.normalization)
    torch.manual_seed(config.seed)
    state = TrainState.fresh(config)
    last, best = ckpt_dir / "last.pt", ckpt_dir / "best.pt"

    with open(run_dir / "history.jsonl", "w") as hist:
        for i in range(config.total_episodes):
            seed = episode_seed(config.seed, "train", i)
            episode = sample_episode(index, split.train, train_spec, seed, loader)
            train_step(state, episode)
            hist.write(json.dumps(state.history[-1]) + "\n")

            if state.episode % config.eval_interval == 0 or state.episode == config.total_episodes:
                if do_val:
                    report = evaluate(state.model, index, split.val, config.eval_task.spec(),
                                      config.val_episodes, config.seed + 7919, loader)
                    record = {"kind": "val", "episode": state.episode, "val_accuracy": report.accuracy,
                              "ci95": report.ci95, "timestamp": time.time()}
                    state.history.append(record)
                    hist.write(json.dumps(record) + "\n")
                    improved = state.best_val is None or report.accuracy > state.best_val
                    if improved:
                        state.best_val = report.accuracy
                    save_checkpoint(state, last)
                    if improved:
                        _atomic_copy(last, best)
                else:
                    save_checkpoint(state, last)
                hist.flush()
                if progress:
                    progress(state)
                log.info("episode %d loss %.4f", state.episode, state.losses()[-1])

    if not best.exists():
        _atomic_copy(last, best)
    return TrainResult(run_dir, last, best, state.history, split, index)
