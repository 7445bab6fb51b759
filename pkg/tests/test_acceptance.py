"""Acceptance criteria. Each test records one PASS/FAIL line (shown in the
terminal summary, or inline with ``-s``)."""

import time

import numpy as np
import pytest
import torch

from msenet import synth
from msenet.attention import (StageAttentionSet, apply_attention, attend_all_stages, attention_weights,
                              global_avg_pool)
from msenet.backbone import TinyBackbone
from msenet.config import RunConfig, desk_config
from msenet.data import EpisodeSpec, ImageLoader, build_index
from msenet.engine import build_model, load_checkpoint, resolve_split, set_determinism, train
from msenet.evaluation import ABLATION_GRID, AblationGrid, evaluate, run_ablation
from msenet.head import (aggregate_distances, class_posterior, compute_prototypes, episode_loss,
                         stage_distances)
from msenet.model import MSENet
from oracles import (aggregate_loop, apply_attention_loop, central_difference, column_softmax_loop,
                     distances_loop, posterior_loop, protonet_reference, prototypes_loop, scores_loop)

F64 = torch.float64


# --- gradient fidelity ---------------------------------------------------------------------------

def _relative_errors(named_params, loss_fn):
    """Analytic vs central-difference gradient, per parameter tensor: |a - n| / max(|a|, |n|)."""
    params = [p for _, p in named_params]
    grads = torch.autograd.grad(loss_fn(), params)
    out = {}
    for (name, p), g in zip(named_params, grads):
        view = p.data.numpy()  # shares memory: central_difference perturbs p in place

        def scalar(_):
            with torch.no_grad():
                return loss_fn().item()

        num = central_difference(scalar, view)
        a = g.numpy()
        scale = max(np.linalg.norm(a), np.linalg.norm(num))
        out[name] = 0.0 if scale == 0 else float(np.linalg.norm(a - num) / scale)
    return out


def _episode_labels(n, k, q):
    return torch.arange(n).repeat_interleave(k), torch.arange(n).repeat_interleave(q)


def test_gradient_fidelity(verdict):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    n, k, q = 3, 2, 2
    s_lab, q_lab = _episode_labels(n, k, q)

    # attention parameters and stage weights on five C=8, 4x4 maps
    attn = StageAttentionSet([8] * 5, seed=1).double()
    w = torch.nn.Parameter(torch.tensor([1.0, 1.1, 1.2, 1.3, 1.4], dtype=F64))
    pyramid = [torch.randn(n * (k + q), 8, 4, 4, generator=gen, dtype=F64) for _ in range(5)]

    def attn_loss():
        vecs = attend_all_stages(pyramid, attn)
        bank = compute_prototypes([v[:n * k] for v in vecs], s_lab, n)
        dt = stage_distances([v[n * k:] for v in vecs], bank)
        return episode_loss(class_posterior(aggregate_distances(dt, w)), q_lab)

    errors = _relative_errors([*attn.named_parameters(), ("w", w)], attn_loss)

    # whole model on a C=8 tiny backbone with 8x8 input (stage maps 4, 2, 1, 1, 1); query/key kernels
    # of the 1x1 stages have exactly zero gradient, their nonzero case is covered above
    model = MSENet(TinyBackbone((8, 8, 8, 8, 8), seed=2), seed=3).double()
    with torch.no_grad():
        for conv in model.backbone.blocks:  # move pre-activations off the ReLU kink
            conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen, dtype=F64))
    support = torch.randn(n * k, 3, 8, 8, generator=gen, dtype=F64)
    query = torch.randn(n * q, 3, 8, 8, generator=gen, dtype=F64)

    def model_loss():
        _, agg = model.episode_distances(support, s_lab, query, n)
        return episode_loss(class_posterior(agg), q_lab)

    errors.update({f"model.{name}": e for name, e in
                   _relative_errors(list(model.named_parameters()), model_loss).items()})
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and elapsed < 60
    verdict("gradient fidelity", ok,
            f"{len(errors)} tensors, max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")


# --- oracle equivalence ----------------------------------------------------------------------------

def _oracle_errors(rng):
    t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64))
    err = {}

    def track(name, got, want):
        err[name] = max(err.get(name, 0.0), float(np.abs(np.asarray(got) - np.asarray(want)).max()))

    for _ in range(100):
        c, r, h, wd = rng.integers(1, 7), rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        L = h * wd
        qk = rng.normal(size=(2, r, L)) * rng.uniform(0.1, 3)
        beta = attention_weights(t(qk[0]).view(1, r, h, wd), t(qk[1]).view(1, r, h, wd))[0]
        track("attention_weights", beta, column_softmax_loop(scores_loop(qk[0], qk[1])))

        f, v = rng.normal(size=(c, L)), rng.normal(size=(c, L))
        b = column_softmax_loop(rng.normal(size=(L, L)))
        gamma = rng.normal()
        y = apply_attention(t(f).view(1, c, h, wd), t(b)[None], t(v).view(1, c, h, wd), gamma)
        track("apply_attention", y[0].reshape(c, L), apply_attention_loop(f, b, v, gamma))

        n_way, shots, n_q = rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 6)
        dims = rng.integers(1, 9, size=5)
        labels = rng.permutation(np.repeat(np.arange(n_way), shots))
        support = [rng.normal(size=(len(labels), d)) for d in dims]
        bank = compute_prototypes([t(s) for s in support], torch.from_numpy(labels), n_way)
        for s, got in zip(support, bank):
            track("compute_prototypes", got, prototypes_loop(list(s), list(labels), n_way))

        queries = [rng.normal(size=(n_q, d)) for d in dims]
        protos = [rng.normal(size=(n_way, d)) for d in dims]
        squared = bool(rng.integers(2))
        dt = stage_distances([t(x) for x in queries], [t(x) for x in protos], squared=squared)
        for p in range(5):
            track("stage_distances", dt[..., p], distances_loop(queries[p], protos[p], squared))

        dtn, wv = rng.uniform(0, 10, size=(n_q, n_way, 5)), rng.normal(size=5)
        track("aggregate_distances", aggregate_distances(t(dtn), t(wv)), aggregate_loop(dtn, wv))

        agg = rng.uniform(0, rng.uniform(0.1, 50), size=(n_q, n_way))
        track("class_posterior", class_posterior(t(agg)), posterior_loop(agg))
    return err


def test_oracle_equivalence(verdict):
    start = time.perf_counter()
    err = _oracle_errors(np.random.default_rng(0))
    elapsed = time.perf_counter() - start
    ok = len(err) == 6 and max(err.values()) <= 1e-6 and elapsed < 60
    verdict("oracle equivalence", ok,
            "100 instances; " + ", ".join(f"{k} {v:.1e}" for k, v in err.items()) + f"; {elapsed:.1f}s")


# --- exact reductions ------------------------------------------------------------------------------

def test_exact_reductions(verdict):
    gen = torch.Generator().manual_seed(4)
    channels = (16, 16, 32, 64, 64)
    pyramid = [torch.randn(6, c, s, s, generator=gen, dtype=F64) for c, s in zip(channels, (12, 6, 5, 3, 2))]
    attn = StageAttentionSet(channels, gamma=0.0, seed=5).double()
    gap = [global_avg_pool(f) for f in pyramid]
    gap_err = max(float((a - b).abs().max().detach()) for fused in (True, False)
                  for a, b in zip(attend_all_stages(pyramid, attn, fused=fused), gap))

    n, k, q = 4, 3, 2
    s_lab, _ = _episode_labels(n, k, q)
    support = torch.randn(n * k, 3, 36, 36, generator=gen, dtype=F64)
    query = torch.randn(n * q, 3, 36, 36, generator=gen, dtype=F64)
    proto_err = 0.0
    for self_attention in (False, True):
        model = MSENet(TinyBackbone(seed=6), multiscale=False, learnable_weight=False,
                       self_attention=self_attention, gamma_init=0.0, freeze_gamma=True).double()
        with torch.no_grad():
            _, agg = model.episode_distances(support, s_lab, query, n)
            final_s, final_q = model.backbone(support)[4].numpy(), model.backbone(query)[4].numpy()
        want = protonet_reference(final_s, s_lab.numpy(), final_q, n)
        proto_err = max(proto_err, float(np.abs(class_posterior(agg).numpy() - want).max()))

    ok = gap_err <= 1e-12 and proto_err <= 1e-6
    verdict("exact reductions", ok, f"(a) gamma=0 vs GAP {gap_err:.1e}; (b) stage-5 head vs protonet {proto_err:.1e}")


# --- normalization ---------------------------------------------------------------------------------

def test_normalization(verdict):
    rng = np.random.default_rng(7)
    col_err = row_err = 0.0
    in_range = True
    for _ in range(1000):
        r, h, wd = rng.integers(1, 9), rng.integers(1, 7), rng.integers(1, 7)
        qk = torch.from_numpy(rng.normal(size=(2, 2, r, h, wd)) * rng.uniform(0.01, 10))
        beta = attention_weights(qk[0], qk[1])
        col_err = max(col_err, float((beta.sum(dim=1) - 1).abs().max()))
        q, n = rng.integers(1, 20), rng.integers(1, 21)
        agg = torch.from_numpy(rng.uniform(0, rng.uniform(0.01, 500), size=(q, n)))
        post = class_posterior(agg)
        row_err = max(row_err, float((post.sum(dim=1) - 1).abs().max()))
        in_range &= bool(((beta >= 0) & (beta <= 1)).all() and ((post >= 0) & (post <= 1)).all())
    ok = col_err <= 1e-6 and row_err <= 1e-6 and in_range
    verdict("normalization", ok, f"1000 draws; column sums {col_err:.1e}, posterior rows {row_err:.1e}")


# --- desk-scale training, ablation and learnable weights --------------------------------------------

@pytest.fixture(scope="session")
def desk_grid(tmp_path_factory):
    """The four-row ablation grid at desk scale; its all-on row is the end-to-end run."""
    root = tmp_path_factory.mktemp("desk") / "synth"
    synth.generate(root, classes=30, images_per_class=40, seed=0)
    config = desk_config(root)
    marks = [time.perf_counter()]
    grid = run_ablation(config, ABLATION_GRID, root.parent / "ablation", eval_episodes=200,
                        progress=lambda row: marks.append(time.perf_counter()))
    seconds = [b - a for a, b in zip(marks, marks[1:])]
    return config, grid, seconds, root.parent


ALL_ON = dict(multiscale=True, learnable_weight=True, self_attention=True)


@pytest.mark.slow
def test_desk_end_to_end(desk_grid, verdict):
    _, grid, seconds, _ = desk_grid
    i = next(j for j, r in enumerate(grid.rows) if r.toggles == ALL_ON)
    one, five = grid.rows[i].reports["5w1s"], grid.rows[i].reports["5w5s"]
    ok = one.accuracy >= 0.85 and five.accuracy >= 0.95 and seconds[i] < 15 * 60
    verdict("desk end-to-end", ok,
            f"5w1s {one.accuracy:.4f} +/- {one.ci95:.4f} (>= 0.85), 5w5s {five.accuracy:.4f} +/- {five.ci95:.4f} "
            f"(>= 0.95), 500 episodes + 2x200 eval in {seconds[i]:.0f}s")


@pytest.mark.slow
def test_ablation_sanity(desk_grid, verdict, tmp_path):
    _, grid, _, _ = desk_grid
    grid.save(tmp_path / "ablation.json")
    back = AblationGrid.load(tmp_path / "ablation.json")
    full = grid.row(**ALL_ON).reports["5w1s"].accuracy
    frozen = {tuple(r.toggles.values()): r.reports["5w1s"].accuracy
              for r in grid.rows if not r.toggles["self_attention"]}
    ok = (len(grid.rows) == 4 and back.to_dict() == grid.to_dict()
          and all(full >= acc - 0.02 for acc in frozen.values()))
    verdict("ablation sanity", ok,
            f"full 5w1s {full:.4f} vs attention-off rows "
            + ", ".join(f"{''.join('T' if x else 'F' for x in k)} {v:.4f}" for k, v in frozen.items())
            + f"; {len(back.rows)} rows serialized")


@pytest.mark.slow
def test_learnable_weights_and_eval_determinism(desk_grid, verdict):
    config, grid, _, _ = desk_grid
    checkpoint = grid.row(**ALL_ON).checkpoint
    w = load_checkpoint(checkpoint).model.w.detach()
    moved = float((w - torch.tensor(config.model.w_init)).abs().max())
    index = build_index(config.data.resolved_root())
    test_classes = resolve_split(config, index).test
    loader = ImageLoader(config.data.normalization)
    runs = [evaluate(load_checkpoint(checkpoint).model, index, test_classes, EpisodeSpec(5, 1, 15), 30, seed, loader)
            for seed in (11, 11, 12)]
    same = runs[0].per_episode == runs[1].per_episode and runs[0].accuracy == runs[1].accuracy
    ok = moved > 1e-6 and same
    verdict("learnable weights", ok,
            f"w = {[round(x, 4) for x in w.tolist()]} (max move {moved:.3g} from init); "
            f"evaluate repeat identical: {same}; other seed differs: {runs[0].per_episode != runs[2].per_episode}")


# --- determinism -------------------------------------------------------------------------------------

@pytest.mark.slow
def test_training_determinism(tmp_path, verdict):
    root = tmp_path / "synth"
    synth.generate(root, classes=30, images_per_class=40, seed=0)
    config = desk_config(root, total_episodes=40)
    threads = torch.get_num_threads()
    set_determinism(True, threads=1)
    try:
        runs = [train(config, tmp_path / f"run{i}").history for i in range(2)]
    finally:
        set_determinism(False, threads=threads)
    steps = [[r for r in h if r["kind"] == "step"] for h in runs]
    gap = max(abs(a["loss"] - b["loss"]) for a, b in zip(*steps))
    same_stream = [(r["episode_seed"], r["digest"]) for r in steps[0]] == \
                  [(r["episode_seed"], r["digest"]) for r in steps[1]]
    ok = len(steps[0]) == len(steps[1]) == 40 and gap <= 1e-6 and same_stream
    verdict("determinism", ok, f"40 episodes x 2 runs; max loss gap {gap:.1e}; identical episode streams: {same_stream}")


# --- parameter accounting ----------------------------------------------------------------------------

def test_parameter_accounting(verdict):
    full = build_model(RunConfig(), pretrained=False).num_parameters()
    bare = build_model(RunConfig().replace(**{"model.self_attention": False}), pretrained=False).num_parameters()
    ok = 11_000_000 <= full <= 12_500_000 and 11_000_000 <= bare <= 12_500_000 and full > bare
    verdict("parameter accounting", ok, f"residual18 with attention {full:,}, without {bare:,}")
