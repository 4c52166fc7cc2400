"""Pretraining loop: two-clip forward, combined loss, SGD, EMA update, queue refresh."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import ClipPair, SyntheticVideo, center_view, generate_dataset, sample_clip_pair
from .encoder import BRANCHES, EncoderPair, anneal_momentum
from .errors import ConfigError, NonFiniteError
from .evaluation import embed_clips, topk_same_class_fraction
from .losses import LossBreakdown, combined_loss
from .queues import DualQueues
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "lr", "m", "loss_total", "loss_intra", "loss_nn",
                 "qintra_len", "qnn_len", "nn_same_class_frac")
EPOCH_FIELDS = ("epoch", "loss_total", "loss_intra", "loss_nn", "nn_same_class_frac", "nn_top5_same_class")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then half-period cosine decay."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        # parameters without a gradient (e.g. a gated NN head) still decay
        for name, p in self.params.items():
            dt = p.data.dtype.type
            g = np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.data.dtype)
            g = g + dt(self.weight_decay) * p.data
            v = dt(self.momentum) * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - dt(lr) * v


@dataclass
class TrainState:
    config: TrainConfig
    pair: EncoderPair
    queues: DualQueues
    optimizer: SGD
    videos: list[SyntheticVideo]
    labels: dict[int, int]  # video_id -> class_id; metrics only, never the loss
    step: int = 0
    metrics: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    _eval_views: np.ndarray | None = None

    @property
    def epoch(self) -> int:
        return self.step // self.config.steps_per_epoch

    def eval_views(self) -> np.ndarray:
        if self._eval_views is None:
            spec = self.config.video_spec()
            self._eval_views = np.stack([center_view(v, spec) for v in self.videos])
        return self._eval_views


def init_state(config: TrainConfig, videos: Sequence[SyntheticVideo] | None = None) -> TrainState:
    if videos is None:
        videos = generate_dataset(config.seed, config.n_videos, config.n_classes, config.video_spec())
    videos = list(videos)
    if len(videos) < config.batch_size:
        raise ConfigError("fewer videos than batch_size")
    pair = EncoderPair(config.encoder_config(), np.random.default_rng([config.seed, 0]))
    queues = DualQueues.create(config.queue_capacity, config.encoder_config().embed_dim)
    optimizer = SGD(pair.query.params, config.sgd_momentum, config.weight_decay)
    labels = {v.video_id: v.class_id for v in videos}
    return TrainState(config, pair, queues, optimizer, videos, labels)


def batch_for_step(state: TrainState, step: int) -> list[ClipPair]:
    """Clip pairs for global ``step``; a pure function of (seed, step)."""
    cfg = state.config
    spe = cfg.steps_per_epoch
    epoch, within = divmod(step, spe)
    order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(state.videos))
    chosen = order[within * cfg.batch_size:(within + 1) * cfg.batch_size]
    rng = np.random.default_rng([cfg.seed, 2, step])
    spec, aug = cfg.video_spec(), cfg.augment_config()
    return [sample_clip_pair(state.videos[i], rng, spec, aug) for i in chosen]


def _stack(batch: Sequence[ClipPair]) -> tuple[Tensor, Tensor]:
    return Tensor(np.stack([p.x1 for p in batch])), Tensor(np.stack([p.x2 for p in batch]))


def forward_loss(state: TrainState, batch: Sequence[ClipPair], nn_path: bool = True) -> tuple[LossBreakdown, dict]:
    """Embed both clips on both sides and evaluate the combined objective.

    Key-side embeddings come from the momentum encoder, or from the query
    encoder with gradients cut in non-momentum mode.
    """
    cfg = state.config
    x1, x2 = _stack(batch)
    query = state.pair.query
    key = state.pair.key if cfg.mode == "momentum" else state.pair.query
    q1 = query.embed_all(x1)
    q2 = query.embed_all(x2)
    with T.no_grad():
        k1 = {b: z.detach() for b, z in key.embed_all(x1).items()}
        k2 = {b: z.detach() for b, z in key.embed_all(x2).items()}
    breakdown = combined_loss(
        q1["intra"], k2["intra"], q2["intra"], k1["intra"],
        q1["nn"], k2["nn"], q2["nn"], k1["nn"],
        state.queues, cfg.loss_weights(), min_nn_pool=cfg.min_nn_pool, nn_path=nn_path,
    )
    return breakdown, {"q1": q1, "q2": q2, "k1": k1, "k2": k2}


def _diagnostics(state: TrainState, emb: dict, breakdown: LossBreakdown, lr: float) -> dict:
    tau = state.config.temperature
    pos = (emb["q1"]["intra"].data * emb["k2"]["intra"].data).sum(axis=1) / tau
    diag = {"lr": lr, "step": state.step, "loss": {k: float(v) for k, v in breakdown.values().items()},
            "positive_logits": pos.tolist()}
    if len(state.queues.intra):
        neg = emb["q1"]["intra"].data @ state.queues.intra.embeddings().T / tau
        diag["negative_logit_range"] = [float(np.min(neg)), float(np.max(neg))]
    return diag


def train_step(batch: Sequence[ClipPair], state: TrainState, nn_path: bool = True,
               grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None) -> LossBreakdown:
    """One optimisation step; returns the loss breakdown and appends a metric row.

    Order: embed, loss, backward + SGD on query weights, key update (EMA or
    mirror), enqueue key-side clip-2 embeddings (intra queue, then NN queue).
    """
    if not batch:
        raise ConfigError("empty batch")
    cfg = state.config
    lr = lr_schedule(state.step, cfg.total_steps, cfg.warmup_steps, cfg.base_lr)
    m = anneal_momentum(state.step / cfg.total_steps, cfg.momentum_base, cfg.momentum_schedule)

    breakdown, emb = forward_loss(state, batch, nn_path)
    if not breakdown.total.is_finite():
        raise NonFiniteError("non-finite training loss", _diagnostics(state, emb, breakdown, lr))

    state.optimizer.zero_grad()
    if breakdown.total.requires_grad:
        breakdown.total.backward()
    if grad_hook is not None:
        grad_hook({name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                   for name, p in state.pair.query.params.items()})
    state.optimizer.step(lr)
    state.optimizer.zero_grad()

    if cfg.mode == "momentum":
        state.pair.momentum_update(m)
    else:
        state.pair.copy_query_to_key()

    same_class = _nn_same_class(state, batch, breakdown)
    vids = [p.video_id for p in batch]
    classes = [state.labels.get(v) for v in vids]
    state.queues.intra.enqueue(emb["k2"]["intra"].data, vids, classes)
    state.queues.nn.enqueue(emb["k2"]["nn"].data, vids, classes)

    values = breakdown.values()
    state.metrics.append({
        "step": state.step,
        "epoch": state.epoch + 1,
        "lr": lr,
        "m": m if cfg.mode == "momentum" else None,
        "loss_total": values["total"],
        "loss_intra": values["intra"],
        "loss_nn": values["nn"],
        "qintra_len": len(state.queues.intra),
        "qnn_len": len(state.queues.nn),
        "nn_same_class_frac": same_class,
    })
    state.step += 1
    return breakdown


def train_step_non_momentum(batch: Sequence[ClipPair], state: TrainState, **kwargs) -> LossBreakdown:
    if state.config.mode != "non_momentum":
        raise ConfigError("train_step_non_momentum requires mode = non_momentum")
    return train_step(batch, state, **kwargs)


def _nn_same_class(state: TrainState, batch: Sequence[ClipPair], breakdown: LossBreakdown) -> float | None:
    """Share of mined NN positives whose source video has the anchor's class."""
    picks = [p for p in breakdown.nn_picks if p is not None]
    if not picks:
        return None
    queue_classes = state.queues.nn.class_ids()
    anchor = np.array([state.labels.get(p.video_id, -2) for p in batch])
    hits = [queue_classes[p] == anchor for p in picks]
    return float(np.mean(np.concatenate(hits)))


def _epoch_summary(state: TrainState, epoch: int) -> dict:
    rows = [r for r in state.metrics if r["epoch"] == epoch]
    fracs = [r["nn_same_class_frac"] for r in rows if r["nn_same_class_frac"] is not None]
    summary = {
        "epoch": epoch,
        "loss_total": float(np.mean([r["loss_total"] for r in rows])),
        "loss_intra": float(np.mean([r["loss_intra"] for r in rows])),
        "loss_nn": float(np.mean([r["loss_nn"] for r in rows])),
        "nn_same_class_frac": float(np.mean(fracs)) if fracs else None,
        "nn_top5_same_class": None,
    }
    if state.config.track_nn_quality and len(state.videos) > 5:
        emb = embed_clips(state.pair.query, state.eval_views(), branch="nn")
        labels = np.array([v.class_id for v in state.videos])
        summary["nn_top5_same_class"] = topk_same_class_fraction(emb, labels, 5)
    return summary


# ---------------------------------------------------------------------------
# checkpoints


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.pair.query.params.items():
        tensors[f"query/{name}"] = p.data
    for name, p in state.pair.key.params.items():
        tensors[f"key/{name}"] = p.data
    for name, v in state.optimizer.velocity.items():
        tensors[f"velocity/{name}"] = v
    meta = {"step": state.step, "epoch": state.epoch, "queues": {},
            "rng": {"scheme": "derived", "seed": state.config.seed},
            "metrics": state.metrics, "epochs": state.epochs}
    for which in ("intra", "nn"):
        q = getattr(state.queues, which)
        st = q.state()
        tensors[f"queue_{which}/embeddings"] = st["embeddings"]
        meta["queues"][which] = {"video_ids": st["video_ids"], "class_ids": st["class_ids"]}
    return Checkpoint(state.config, tensors, meta)


def state_from_checkpoint(ckpt: Checkpoint, videos: Sequence[SyntheticVideo] | None = None) -> TrainState:
    state = init_state(ckpt.config, videos)
    _load_params(state.pair, ckpt)
    for name, v in ckpt.group("velocity").items():
        state.optimizer.velocity[name] = v.copy()
    for which in ("intra", "nn"):
        q = getattr(state.queues, which)
        info = ckpt.meta["queues"][which]
        q.load_state({"embeddings": ckpt.tensors[f"queue_{which}/embeddings"], **info})
    state.step = int(ckpt.meta["step"])
    state.metrics = list(ckpt.meta.get("metrics", []))
    state.epochs = list(ckpt.meta.get("epochs", []))
    return state


def _load_params(pair: EncoderPair, ckpt: Checkpoint) -> None:
    for side in ("query", "key"):
        params = pair.side(side).params
        stored = ckpt.group(side)
        if set(stored) != set(params):
            raise ConfigError(f"checkpoint {side} weights do not match the configured encoder")
        for name, arr in stored.items():
            if arr.shape != params[name].shape:
                raise ConfigError(f"shape mismatch for {side}/{name}: {arr.shape} vs {params[name].shape}")
            params[name].data = arr.astype(params[name].dtype)


def pair_from_checkpoint(ckpt: Checkpoint) -> EncoderPair:
    pair = EncoderPair(ckpt.config.encoder_config(), np.random.default_rng([ckpt.config.seed, 0]))
    _load_params(pair, ckpt)
    return pair


# ---------------------------------------------------------------------------
# driver


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([_fmt(r[h]) for h in header])


@dataclass
class RunResult:
    state: TrainState
    checkpoints: list[Path]

    @property
    def metrics(self) -> list[dict]:
        return self.state.metrics

    @property
    def epochs(self) -> list[dict]:
        return self.state.epochs


def run_pretraining(
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    videos: Sequence[SyntheticVideo] | None = None,
    stop_after_step: int | None = None,
) -> RunResult:
    """Train for ``config.epochs`` epochs, logging metrics and writing checkpoints.

    ``stop_after_step`` ends the run early once that many steps are done
    (used to exercise resume).  Checkpoints go to ``out_dir`` at epoch 0,
    every ``checkpoint_every`` epochs and at the end.
    """
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config != config:
            raise ConfigError("resume checkpoint was written with a different config")
        state = state_from_checkpoint(ckpt, videos)
    else:
        state = init_state(config, videos)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def checkpoint(name: str) -> None:
        if out is not None:
            written.append(save_checkpoint(out / name, state_to_checkpoint(state)))

    spe = config.steps_per_epoch
    if state.step == 0 and config.checkpoint_every:
        checkpoint("ckpt_epoch000.bin")
    stop = config.total_steps if stop_after_step is None else min(stop_after_step, config.total_steps)
    while state.step < stop:
        train_step(batch_for_step(state, state.step), state)
        if state.step % spe == 0:
            epoch = state.step // spe
            summary = _epoch_summary(state, epoch)
            state.epochs.append(summary)
            log.info("epoch %d loss %.4f nn_same_class %s", epoch, summary["loss_total"], summary["nn_same_class_frac"])
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                checkpoint(f"ckpt_epoch{epoch:03d}.bin")
    if state.step == config.total_steps:
        checkpoint("final.bin")
    elif out is not None:
        checkpoint(f"ckpt_step{state.step:06d}.bin")
    if out is not None:
        write_csv(out / "metrics.csv", METRIC_FIELDS, state.metrics)
        write_csv(out / "epochs.csv", EPOCH_FIELDS, state.epochs)
    return RunResult(state, written)
