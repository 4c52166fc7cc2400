import math

import numpy as np
import pytest

from vidcontrast import tensor as T
from vidcontrast.checkpoint import load_checkpoint, save_checkpoint
from vidcontrast.config import TrainConfig, replace
from vidcontrast.data import ClipPair, SyntheticVideo
from vidcontrast.encoder import anneal_momentum
from vidcontrast.errors import ConfigError, DataError, NonFiniteError
from vidcontrast.queues import DualQueues, EmbeddingQueue
from vidcontrast.trainer import (
    batch_for_step,
    init_state,
    lr_schedule,
    pair_from_checkpoint,
    run_pretraining,
    state_from_checkpoint,
    state_to_checkpoint,
    train_step,
    train_step_non_momentum,
)

from conftest import small_config
from oracles import MiniOracle, closed_form_lr, closed_form_momentum


# ---------------------------------------------------------------------------
# schedules


def schedule_golden_gap() -> float:
    """Largest deviation of lr_schedule / anneal_momentum from their closed forms at boundaries and midpoints."""
    total, warmup, base = 300, 50, 0.05
    cases = [
        (lr_schedule(0, total, warmup, base), 0.0),
        (lr_schedule(25, total, warmup, base), base / 2),
        (lr_schedule(warmup, total, warmup, base), base),
        (lr_schedule(175, total, warmup, base), base / 2),
        (lr_schedule(total, total, warmup, base), 0.0),
        (lr_schedule(total - 1, total, warmup, base),
         base * 0.5 * (1 + math.cos(math.pi * (total - 1 - warmup) / (total - warmup)))),
        (lr_schedule(10, 100, 0, 0.1), closed_form_lr(10, 100, 0, 0.1)),
        (anneal_momentum(0.0, 0.994), 0.994),
        (anneal_momentum(0.5, 0.994), 0.997),
        (anneal_momentum(1.0, 0.994), 1.0),
    ]
    cases += [(lr_schedule(s, total, warmup, base), closed_form_lr(s, total, warmup, base)) for s in range(total)]
    cases += [(anneal_momentum(s / total, 0.994), closed_form_momentum(s / total, 0.994)) for s in range(total + 1)]
    return max(abs(a - b) for a, b in cases)


def test_schedule_goldens():
    assert schedule_golden_gap() <= 1e-9


# ---------------------------------------------------------------------------
# single steps


def test_cold_start_loss_is_zero():
    state = init_state(small_config(lambda_nn=0.0))
    out = train_step(batch_for_step(state, 0), state)
    assert out.total.item() == 0.0
    assert len(state.queues.intra) == len(state.queues.nn) == 8


def test_nn_term_waits_for_min_pool():
    state = init_state(small_config(min_nn_pool=16))
    for s in range(3):
        out = train_step(batch_for_step(state, s), state)
        assert (out.nn_term.item() == 0.0) == (s < 2)
    assert state.metrics[2]["nn_same_class_frac"] is not None


def test_non_momentum_key_mirrors_query():
    state = init_state(small_config(mode="non_momentum"))
    for s in range(2):
        train_step_non_momentum(batch_for_step(state, s), state)
        for name, p in state.pair.query.params.items():
            assert p.data.tobytes() == state.pair.key.params[name].data.tobytes()
    with pytest.raises(ConfigError):
        train_step_non_momentum(batch_for_step(state, 2), init_state(small_config()))


def test_key_encoder_receives_no_gradient_and_follows_ema():
    state = init_state(small_config())
    before = {n: p.data.astype(np.float64).copy() for n, p in state.pair.key.params.items()}
    train_step(batch_for_step(state, 0), state)
    m = anneal_momentum(0.0, state.config.momentum_base)
    for name, k in state.pair.key.params.items():
        assert k.grad is None
        expected = m * before[name] + (1 - m) * state.pair.query.params[name].data
        np.testing.assert_allclose(k.data, expected, rtol=1e-5, atol=1e-7)


def test_weight_decay_applies_to_query_only():
    # the first step has an empty queue, so the loss gradient is zero and only decay moves the weights
    cfg = small_config(weight_decay=0.5, warmup_epochs=0, lambda_nn=0.0, momentum_base=1.0)
    state = init_state(cfg)
    q0 = {n: p.data.copy() for n, p in state.pair.query.params.items()}
    k0 = {n: p.data.copy() for n, p in state.pair.key.params.items()}
    train_step(batch_for_step(state, 0), state)
    lr = cfg.base_lr
    for name in q0:
        np.testing.assert_allclose(state.pair.query.params[name].data, q0[name] * (1 - lr * 0.5), rtol=1e-6)
        assert np.array_equal(state.pair.key.params[name].data, k0[name])


def test_batches_are_pure_functions_of_step():
    a, b = init_state(small_config()), init_state(small_config())
    for s in (0, 5, 3):
        pa, pb = batch_for_step(a, s), batch_for_step(b, s)
        assert [p.video_id for p in pa] == [p.video_id for p in pb]
        assert all(np.array_equal(x.x1, y.x1) and np.array_equal(x.x2, y.x2) for x, y in zip(pa, pb))


def test_epoch_covers_every_video_once():
    state = init_state(small_config())
    ids = [p.video_id for s in range(state.config.steps_per_epoch) for p in batch_for_step(state, s)]
    assert sorted(ids) == list(range(32))


def test_non_finite_loss_aborts_with_diagnostics():
    state = init_state(small_config(min_nn_pool=1))
    train_step(batch_for_step(state, 0), state)
    state.queues.intra._emb[:] = np.nan
    with pytest.raises(NonFiniteError) as info:
        train_step(batch_for_step(state, 1), state)
    diag = info.value.diagnostics
    assert diag["step"] == 1 and "positive_logits" in diag and "lr" in diag
    assert state.step == 1


# ---------------------------------------------------------------------------
# independent replay of a miniature run


def _mini_setup():
    cfg = small_config(n_videos=2, n_classes=1, batch_size=2, epochs=3, warmup_epochs=0, queue_capacity=4,
                       min_nn_pool=2, n_frames=1, frame_size=1, clip_len=1, crop_size=1,
                       conv_channels=(1,), conv_strides=(1,), head_dims=(3, 2), temperature=0.5,
                       base_lr=0.2, momentum_base=0.9, weight_decay=0.01)
    rng = np.random.default_rng(7)
    videos = [SyntheticVideo(np.full((1, 1, 1, 1), 0.5, np.float32), 0, i) for i in range(2)]
    params = {
        "backbone.conv0.weight": rng.normal(size=(1, 1, 3, 3, 3)),
        "backbone.conv0.bias": np.array([0.3]),
    }
    params["backbone.conv0.weight"][0, 0, 1, 1, 1] = 1.2
    for branch in ("intra", "nn"):
        params[f"head_{branch}.fc0.weight"] = rng.uniform(0.5, 1.5, size=(1, 3))
        params[f"head_{branch}.fc0.bias"] = rng.uniform(0.1, 0.3, size=3)
        params[f"head_{branch}.fc1.weight"] = rng.normal(size=(3, 2))
        params[f"head_{branch}.fc1.bias"] = rng.normal(size=2) * 0.1
    batches = [[ClipPair(np.full((1, 1, 1, 1), a), np.full((1, 1, 1, 1), b), vid)
                for vid, (a, b) in enumerate(rng.uniform(0.1, 1.0, size=(2, 2)))] for _ in range(3)]
    return cfg, videos, params, batches


def mini_oracle_gap() -> float:
    """Worst relative gap in losses and parameters after three steps, package vs scalar oracle."""
    cfg, videos, params, batches = _mini_setup()
    with T.precision(np.float64):
        state = init_state(cfg, videos)
        for side in ("query", "key"):
            for name, p in state.pair.side(side).params.items():
                p.data = params[name].astype(np.float64).copy()
        state.optimizer.velocity = {n: np.zeros_like(p.data) for n, p in state.pair.query.params.items()}
        state.queues = DualQueues(EmbeddingQueue(4, 2, np.float64), EmbeddingQueue(4, 2, np.float64))
        got = [train_step(b, state).total.item() for b in batches]
    oracle = MiniOracle(params, cfg.head_dims, cfg)
    want = [oracle.step_once([float(p.x1.ravel()[0]) for p in b], [float(p.x2.ravel()[0]) for p in b])
            for b in batches]
    gaps = [abs(g - w) / max(abs(w), 1e-12) for g, w in zip(got, want)]
    assert want[0] != 0.0 or want[1] != 0.0
    for name, arr in oracle.q.items():
        diff = np.abs(state.pair.query.params[name].data - arr)
        gaps.append(float(np.max(diff / np.maximum(np.abs(arr), 1e-3))))
        diff = np.abs(state.pair.key.params[name].data - oracle.k[name])
        gaps.append(float(np.max(diff / np.maximum(np.abs(oracle.k[name]), 1e-3))))
    np.testing.assert_allclose(state.queues.nn.embeddings(), np.array(oracle.q_nn), atol=1e-9)
    return max(gaps)


def test_three_steps_match_scalar_oracle():
    assert mini_oracle_gap() <= 1e-6


# ---------------------------------------------------------------------------
# runs, determinism and resume


def _read(path):
    return path.read_bytes()


def determinism_and_resume(tmp_path, config=None) -> tuple[bool, bool]:
    cfg = config or small_config()
    a = run_pretraining(cfg, tmp_path / "a")
    b = run_pretraining(cfg, tmp_path / "b")
    same = all(_read(tmp_path / "a" / f) == _read(tmp_path / "b" / f) for f in ("metrics.csv", "epochs.csv"))
    same = same and _read(tmp_path / "a" / "final.bin") == _read(tmp_path / "b" / "final.bin")
    stop = cfg.steps_per_epoch + 2
    part = run_pretraining(cfg, tmp_path / "c", stop_after_step=stop)
    resumed = run_pretraining(cfg, tmp_path / "d", resume=part.checkpoints[-1])
    exact = all(_read(tmp_path / "a" / f) == _read(tmp_path / "d" / f) for f in ("metrics.csv", "epochs.csv"))
    exact = exact and _read(tmp_path / "a" / "final.bin") == _read(tmp_path / "d" / "final.bin")
    assert len(a.metrics) == cfg.total_steps == len(resumed.metrics)
    return same, exact


def test_runs_are_bit_identical_and_resume_is_exact(tmp_path):
    same, exact = determinism_and_resume(tmp_path)
    assert same and exact


def test_run_writes_expected_artifacts(tmp_path):
    result = run_pretraining(small_config(epochs=2, warmup_epochs=0), tmp_path)
    names = sorted(p.name for p in result.checkpoints)
    assert names == ["ckpt_epoch000.bin", "ckpt_epoch001.bin", "ckpt_epoch002.bin", "final.bin"]
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("step,epoch,lr,m,loss_total")
    assert len(result.epochs) == 2 and all(math.isfinite(e["loss_total"]) for e in result.epochs)
    assert (tmp_path / "final.bin.manifest.txt").exists()


def test_resume_with_other_config_is_rejected(tmp_path):
    part = run_pretraining(small_config(), tmp_path, stop_after_step=2)
    with pytest.raises(ConfigError):
        run_pretraining(small_config(seed=5), tmp_path / "x", resume=part.checkpoints[-1])


def test_smoke_two_videos():
    cfg = small_config(epochs=1, warmup_epochs=0, batch_size=2, n_videos=2, n_classes=2, min_nn_pool=2)
    result = run_pretraining(cfg)
    assert len(result.metrics) == 1 and math.isfinite(result.metrics[0]["loss_total"])


def test_checkpoint_round_trip_and_corruption(tmp_path):
    state = init_state(small_config())
    for s in range(3):
        train_step(batch_for_step(state, s), state)
    path = save_checkpoint(tmp_path / "c.bin", state_to_checkpoint(state))
    restored = state_from_checkpoint(load_checkpoint(path))
    assert restored.step == 3 and restored.metrics == state.metrics
    for name, p in state.pair.query.params.items():
        assert np.array_equal(p.data, restored.pair.query.params[name].data)
    assert np.array_equal(restored.queues.nn.embeddings(), state.queues.nn.embeddings())
    pair = pair_from_checkpoint(load_checkpoint(path))
    assert np.array_equal(pair.key.params["backbone.conv0.weight"].data,
                          state.pair.key.params["backbone.conv0.weight"].data)

    raw = path.read_bytes()
    (tmp_path / "bad_magic.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.bin").write_bytes(raw[:-10])
    for name in ("bad_magic.bin", "short.bin"):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / name)


def test_replace_helper_keeps_validation():
    with pytest.raises(ConfigError):
        replace(small_config(), batch_size=100)


def non_momentum_loss_drop(steps=40) -> tuple[float, float]:
    """Mean loss over the first and last five steps of a short non-momentum run."""
    cfg = small_config(mode="non_momentum", epochs=10, warmup_epochs=1, min_nn_pool=8, lambda_nn=0.0)
    state = init_state(cfg)
    losses = [train_step(batch_for_step(state, s), state).total.item() for s in range(steps)]
    return float(np.mean(losses[5:10])), float(np.mean(losses[-5:]))


def test_non_momentum_run_stays_finite():
    first, last = non_momentum_loss_drop()
    assert math.isfinite(first) and math.isfinite(last)


@pytest.mark.slow
def test_reference_non_momentum_loss_decreases():
    """200 steps of the default corpus in non-momentum mode; final epoch loss below 0.8x the first."""
    cfg = replace(TrainConfig(), mode="non_momentum", epochs=20)
    result = run_pretraining(cfg)
    assert len(result.metrics) == 200
    assert result.epochs[-1]["loss_total"] < 0.8 * result.epochs[0]["loss_total"]
