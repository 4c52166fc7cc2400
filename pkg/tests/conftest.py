import os
import sys
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from vidcontrast.config import TrainConfig  # noqa: E402


def small_config(**overrides) -> TrainConfig:
    """A few-second training config: 32 videos of 8 frames, tiny encoder."""
    base = dict(
        epochs=3, batch_size=8, warmup_epochs=1, queue_capacity=24, min_nn_pool=8,
        n_videos=32, n_classes=16, n_frames=8, frame_size=12, clip_len=2, crop_size=8,
        conv_channels=(4, 8), conv_strides=(1, 2), head_dims=(8, 6), checkpoint_every=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """The default-config pretraining run with its evaluations, computed once per session."""
    from vidcontrast.checkpoint import load_checkpoint
    from vidcontrast.config import EvalConfig
    from vidcontrast.evaluation import extract_features, few_shot_subset, linear_probe, recall_at_k, stratified_split
    from vidcontrast.trainer import init_state, pair_from_checkpoint, run_pretraining

    cfg, ecfg = TrainConfig(), EvalConfig()
    out = tmp_path_factory.mktemp("reference")
    start = time.perf_counter()
    result = run_pretraining(cfg, out)
    seconds = time.perf_counter() - start
    trained = pair_from_checkpoint(load_checkpoint(out / "final.bin")).query
    untrained = init_state(cfg, result.state.videos).pair.query
    train_v, test_v = stratified_split(result.state.videos, ecfg.test_fraction)
    spec = cfg.video_spec()

    def evaluate(encoder):
        tr = extract_features(encoder, train_v, "train", spec)
        te = extract_features(encoder, test_v, "test", spec)
        probe = linear_probe(tr, te, ecfg.probe_epochs, ecfg.probe_lr)
        recall = recall_at_k(te, tr, ecfg.recall_ks).recall
        fewshot = {f: [linear_probe(few_shot_subset(tr, f, s), te, ecfg.probe_epochs, ecfg.probe_lr)
                       for s in ecfg.fewshot_seeds] for f in ecfg.fewshot_fractions}
        return {"probe": probe, "recall": recall, "fewshot": fewshot}

    return {"config": cfg, "seconds": seconds, "epochs": result.epochs, "metrics": result.metrics,
            "trained": evaluate(trained), "untrained": evaluate(untrained)}
