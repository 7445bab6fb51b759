"""Episodic evaluation, confusion matrices, sample export and ablation runs.

A *scorer* is any callable mapping a loaded ``Episode`` to a (queries x N)
posterior matrix. ``MSENet`` instances are wrapped automatically; plain
callables make it easy to evaluate fixed strategies (chance, oracle).
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import (DatasetIndex, Episode, EpisodeSpec, ImageLoader, build_index, check_split_supports,
                   episode_seed, sample_episode)
from .errors import EpisodeError, MSENetError
from .head import class_posterior
from .model import MSENet

Scorer = Callable[[Episode], torch.Tensor]

ABLATION_GRID = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, True, True),
)
TOGGLE_NAMES = ("multiscale", "learnable_weight", "self_attention")


def model_scorer(model: MSENet) -> Scorer:
    def score(episode):
        model.eval()
        with torch.no_grad():
            return class_posterior(model(episode))
    return score


def as_scorer(scorer) -> Scorer:
    return model_scorer(scorer) if isinstance(scorer, MSENet) else scorer


def iterate_episodes(scorer, index: DatasetIndex, split: Iterable[str], spec: EpisodeSpec, episodes: int,
                     seed: int, loader: ImageLoader | None = None, stream: str = "eval"):
    """Yield ``(episode, posterior)`` for a deterministic stream of episodes."""
    split = sorted(split)
    check_split_supports(index, split, spec)
    score = as_scorer(scorer)
    loader = loader or ImageLoader()
    for i in range(episodes):
        episode = sample_episode(index, split, spec, episode_seed(seed, stream, i), loader)
        probs = score(episode)
        if probs.shape != (len(episode.query_files), spec.n_way):
            raise MSENetError(f"scorer returned shape {tuple(probs.shape)}, expected "
                              f"({len(episode.query_files)}, {spec.n_way})")
        yield episode, probs


@dataclass
class EvalReport:
    task: EpisodeSpec
    episodes: int
    accuracy: float
    ci95: float
    seed: int
    per_episode: list[float]
    dataset: str | None = None

    def to_dict(self):
        d = asdict(self)
        d["task"] = asdict(self.task)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "task": EpisodeSpec(**d["task"])})


def ci95(per_episode: Sequence[float]) -> float:
    """1.96 * sample standard deviation / sqrt(n); zero for a single episode."""
    n = len(per_episode)
    if n < 2:
        return 0.0
    return 1.96 * statistics.stdev(per_episode) / n ** 0.5


def evaluate(scorer, index: DatasetIndex, split: Iterable[str], spec: EpisodeSpec, episodes: int = 600,
             seed: int = 0, loader: ImageLoader | None = None, dataset: str | None = None) -> EvalReport:
    """Mean per-episode query accuracy with a normal-approximation 95% interval."""
    accs = []
    for episode, probs in iterate_episodes(scorer, index, split, spec, episodes, seed, loader):
        pred = probs.argmax(dim=1)
        accs.append(int((pred == episode.query_labels).sum()) / len(pred))
    return EvalReport(task=spec, episodes=episodes, accuracy=float(np.mean(accs)), ci95=ci95(accs),
                      seed=seed, per_episode=accs, dataset=dataset)


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray  # rows = truth, cols = prediction

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth\\predicted"] + self.labels)
            for name, row in zip(self.labels, self.counts):
                w.writerow([name] + [int(x) for x in row])

    @classmethod
    def from_csv(cls, path) -> "ConfusionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(labels=rows[0][1:], counts=np.array([[int(x) for x in r[1:]] for r in rows[1:]], dtype=np.int64))

    def render(self, path) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        n = len(self.labels)
        fig, ax = plt.subplots(figsize=(max(4, 0.5 * n + 2), max(4, 0.5 * n + 2)))
        ax.imshow(self.counts, cmap="Blues")
        ax.set_xticks(range(n), self.labels, rotation=90)
        ax.set_yticks(range(n), self.labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if n <= 30:
            for i in range(n):
                for j in range(n):
                    ax.text(j, i, int(self.counts[i, j]), ha="center", va="center", fontsize=7)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def confusion(scorer, index, split, spec, episodes=600, seed=0, loader=None) -> ConfusionMatrix:
    """Counts aggregated over all queries, keyed by original class identifiers."""
    labels = sorted(split)
    pos = {c: i for i, c in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for episode, probs in iterate_episodes(scorer, index, split, spec, episodes, seed, loader):
        pred = probs.argmax(dim=1)
        for t, p in zip(episode.query_labels.tolist(), pred.tolist()):
            counts[pos[episode.class_ids[t]], pos[episode.class_ids[p]]] += 1
    return ConfusionMatrix(labels, counts)


def _thumb(path, size=84):
    with Image.open(path) as im:
        return im.convert("RGB").resize((size, size), Image.BILINEAR)


def _render_case(episode: Episode, q: int, probs: torch.Tensor, pred: int, k_shot: int, out: Path):
    size, pad, text_h = 84, 4, 28
    n = episode.n_way
    canvas = Image.new("RGB", ((n + 1) * (size + pad) + pad, size + 2 * pad + text_h), "white")
    draw = ImageDraw.Draw(canvas)
    truth = int(episode.query_labels[q])
    canvas.paste(_thumb(episode.query_files[q]), (pad, pad))
    draw.text((pad, size + 2 * pad), f"query\n{episode.class_ids[truth]}", fill="black")
    for c in range(n):
        x = (c + 1) * (size + pad) + pad
        canvas.paste(_thumb(episode.support_files[c * k_shot]), (x, pad))
        colour = ("green" if c == truth else "red") if c == pred else "black"
        if c == pred:
            draw.rectangle([x - 2, pad - 2, x + size + 1, pad + size + 1], outline=colour, width=2)
        draw.text((x, size + 2 * pad), f"{episode.class_ids[c]}\n{100 * float(probs[c]):.0f}%", fill=colour)
    canvas.save(out)


def export_samples(scorer, index, split, spec: EpisodeSpec, seed: int, out_dir, episodes: int = 1,
                   loader=None, max_per_kind: int | None = None) -> list[dict]:
    """Write per-query grids (query + one support per class) split by correctness.

    Files go to ``out_dir/correct`` and ``out_dir/incorrect``, with one JSON
    record per case in ``out_dir/samples.jsonl``.
    """
    out = Path(out_dir)
    try:
        for sub in ("correct", "incorrect"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        meta = open(out / "samples.jsonl", "w")
    except OSError as e:
        raise MSENetError(f"cannot write samples to {out}: {e}") from e

    records, written = [], {"correct": 0, "incorrect": 0}
    with meta:
        for e_idx, (episode, probs) in enumerate(iterate_episodes(scorer, index, split, spec, episodes, seed, loader)):
            preds = probs.argmax(dim=1)
            for q in range(len(episode.query_files)):
                truth, pred = int(episode.query_labels[q]), int(preds[q])
                kind = "correct" if pred == truth else "incorrect"
                if max_per_kind is not None and written[kind] >= max_per_kind:
                    continue
                image = out / kind / f"ep{e_idx:03d}_q{q:03d}.png"
                _render_case(episode, q, probs[q], pred, spec.k_shot, image)
                rec = {
                    "kind": kind,
                    "episode": e_idx,
                    "episode_seed": episode.seed,
                    "query_file": str(episode.query_files[q]),
                    "true_class": episode.class_ids[truth],
                    "predicted_class": episode.class_ids[pred],
                    "confidence": float(probs[q, pred]),
                    "posterior": [float(p) for p in probs[q]],
                    "support_files": [str(p) for p in episode.support_files],
                    "image": str(image.relative_to(out)),
                }
                meta.write(json.dumps(rec) + "\n")
                records.append(rec)
                written[kind] += 1
    return records


def time_inference(model: MSENet, index, split, spec, episodes: int = 50, seed: int = 0, loader=None) -> float:
    """Median wall-clock seconds of one full-episode forward pass (images preloaded)."""
    loader = loader or ImageLoader()
    score = model_scorer(model)
    times = []
    for i in range(episodes):
        episode = sample_episode(index, split, spec, episode_seed(seed, "timing", i), loader)
        t0 = time.perf_counter()
        score(episode)
        times.append(time.perf_counter() - t0)
    return float(statistics.median(times))


def cross_domain_eval(checkpoint, target_root, spec: EpisodeSpec, episodes: int = 600, seed: int = 0,
                      loader: ImageLoader | None = None) -> EvalReport:
    """Evaluate a trained checkpoint on every class of an unseen dataset, without adaptation."""
    from .engine import load_checkpoint

    state = load_checkpoint(checkpoint)
    index = build_index(target_root)
    if spec.n_way > len(index.classes):
        raise EpisodeError(f"{spec.label} task needs {spec.n_way} classes but {target_root} has {len(index.classes)}")
    loader = loader or ImageLoader(state.config.data.normalization)
    return evaluate(state.model, index, index.classes, spec, episodes, seed, loader, dataset=str(Path(target_root)))


@dataclass
class AblationRow:
    toggles: dict[str, bool]
    reports: dict[str, EvalReport]
    inference_time: float
    param_count: int
    checkpoint: str | None = None

    def to_dict(self):
        return {"toggles": self.toggles, "reports": {k: v.to_dict() for k, v in self.reports.items()},
                "inference_time": self.inference_time, "param_count": self.param_count,
                "checkpoint": self.checkpoint}

    @classmethod
    def from_dict(cls, d):
        return cls(toggles=dict(d["toggles"]), reports={k: EvalReport.from_dict(v) for k, v in d["reports"].items()},
                   inference_time=d["inference_time"], param_count=d["param_count"], checkpoint=d.get("checkpoint"))


@dataclass
class AblationGrid:
    rows: list[AblationRow] = field(default_factory=list)
    dataset: str | None = None
    seed: int | None = None

    def to_dict(self):
        return {"dataset": self.dataset, "seed": self.seed, "rows": [r.to_dict() for r in self.rows]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "AblationGrid":
        d = json.loads(Path(path).read_text())
        return cls([AblationRow.from_dict(r) for r in d["rows"]], d.get("dataset"), d.get("seed"))

    def row(self, **toggles) -> AblationRow:
        for r in self.rows:
            if all(r.toggles[k] == v for k, v in toggles.items()):
                return r
        raise KeyError(toggles)


def normalize_grid(grid) -> list[dict[str, bool]]:
    rows = []
    for item in grid:
        row = dict(item) if isinstance(item, dict) else dict(zip(TOGGLE_NAMES, item))
        if set(row) != set(TOGGLE_NAMES):
            raise ValueError(f"ablation row needs exactly {TOGGLE_NAMES}, got {sorted(row)}")
        rows.append({k: bool(row[k]) for k in TOGGLE_NAMES})
    keys = [tuple(r.values()) for r in rows]
    if len(set(keys)) != len(keys):
        raise ValueError("ablation grid contains duplicate toggle rows")
    return rows


def run_ablation(base_config, grid=ABLATION_GRID, run_dir=None, tasks: Sequence[EpisodeSpec] | None = None,
                 eval_episodes: int | None = None, timing_episodes: int = 50, index=None, loader=None,
                 progress=None) -> AblationGrid:
    """Train and evaluate every toggle combination with a shared seed."""
    from .engine import load_checkpoint, train

    rows = normalize_grid(grid)
    base_config.validate()
    run_dir = Path(run_dir or "ablation")
    index = index or build_index(base_config.data.resolved_root())
    loader = loader or ImageLoader(base_config.data.normalization)
    n_way = base_config.eval_task.n_way
    tasks = tasks or [EpisodeSpec(n_way, 1, base_config.eval_task.n_query),
                      EpisodeSpec(n_way, 5, base_config.eval_task.n_query)]
    eval_episodes = eval_episodes or base_config.test_episodes

    result = AblationGrid(dataset=str(index.root), seed=base_config.seed)
    for i, toggles in enumerate(rows):
        config = base_config.replace(**{f"model.{k}": v for k, v in toggles.items()})
        trained = train(config, run_dir / f"row{i}", index=index, loader=loader)
        model = load_checkpoint(trained.best_checkpoint).model
        reports = {f"{t.n_way}w{t.k_shot}s": evaluate(model, index, trained.split.test, t, eval_episodes,
                                                       base_config.seed, loader, dataset=index.name)
                   for t in tasks}
        row = AblationRow(
            toggles=toggles,
            reports=reports,
            inference_time=time_inference(model, index, trained.split.test, tasks[-1], timing_episodes,
                                          base_config.seed, loader),
            param_count=model.num_parameters(),
            checkpoint=str(trained.best_checkpoint),
        )
        result.rows.append(row)
        if progress:
            progress(row)
    return result
