"""Joint CTC + attention training at toy scale."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernel as K
from .corpus import SE_ID, Utterance, corpus_cer
from .ctc import ctc_head, ctc_loss_batch
from .decoder import decoder_forward, label_smoothed_ce, teacher_forcing_batch
from .encoder import encoder_forward
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .seeding import rng_stream

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "loss_joint", "loss_ctc", "loss_ce", "dev_cer_ops", "dev_cer_oah")


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lr_scale: float = 1.0
    warmup_steps: int = 400
    epochs: int = 50
    batch_size: int = 32
    avg_last_k: int = 5
    seed: int = 0
    time_masks: int = 1
    time_mask_width: int = 8
    freq_masks: int = 2
    freq_mask_width: int = 4
    grad_clip: float | None = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    dev_beam: int = 8
    dev_limit: int | None = 100

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.avg_last_k < 1:
            raise ValueError("avg_last_k must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# ---------------------------------------------------------------------------
# small pieces
# ---------------------------------------------------------------------------


def joint_loss(ctc, ce, alpha: float):
    """alpha * L_ctc + (1 - alpha) * L_ce; a zero weight drops its term entirely."""
    if alpha == 1.0:
        return ctc
    if alpha == 0.0:
        return ce
    return alpha * ctc + (1.0 - alpha) * ce


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def spec_mask(features: np.ndarray, rng: np.random.Generator, time_masks: int = 1, time_width: int = 8,
              freq_masks: int = 2, freq_width: int = 4) -> np.ndarray:
    """Zero random contiguous time spans and frequency bands (copy)."""
    out = np.array(features, dtype=np.float64, copy=True)
    T, D = out.shape
    if time_width > T or freq_width > D:
        raise ValueError("mask width exceeds the feature dimensions")
    for _ in range(freq_masks):
        w = int(rng.integers(0, freq_width + 1))
        f0 = int(rng.integers(0, D - w + 1))
        out[:, f0:f0 + w] = 0.0
    for _ in range(time_masks):
        w = int(rng.integers(0, time_width + 1))
        t0 = int(rng.integers(0, T - w + 1))
        out[t0:t0 + w, :] = 0.0
    return out


def average_checkpoints(params_list: Sequence[ModelParams], k: int) -> ModelParams:
    """Element-wise mean of the last ``k`` parameter sets."""
    if k < 1 or len(params_list) < k:
        raise ValueError(f"need at least k={k} checkpoints, got {len(params_list)}")
    chosen = list(params_list)[-k:]
    ref = chosen[0]
    out = {}
    for name in ref.names():
        arrs = []
        for i, p in enumerate(chosen):
            if name not in p:
                raise ValueError(f"checkpoint {i} lacks tensor {name!r}")
            if p[name].shape != ref[name].shape:
                raise ValueError(f"tensor {name!r}: shape {p[name].shape} != {ref[name].shape}")
            arrs.append(p[name].data)
        out[name] = K.Tensor(np.mean(arrs, axis=0), name)
    return ModelParams(ref.config, out)


class Adam:
    def __init__(self, names, beta1=0.9, beta2=0.98, eps=1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}
        self.t = 0

    def update(self, params: ModelParams, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self, params: ModelParams) -> dict:
        out = {}
        for n in params.names():
            z = np.zeros_like(params[n].data)
            out[f"optim/m/{n}"] = z if self.m[n] is None else self.m[n]
            out[f"optim/v/{n}"] = z if self.v[n] is None else self.v[n]
        return out

    def load_state(self, extra: dict, t: int) -> None:
        self.t = t
        for key, arr in extra.items():
            _, kind, name = key.split("/", 2)
            getattr(self, kind)[name] = arr.copy()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def pad_batch(utts: Sequence[Utterance], feats=None):
    feats = feats if feats is not None else [u.features for u in utts]
    lengths = np.array([f.shape[0] for f in feats])
    D = feats[0].shape[1]
    out = np.zeros((len(feats), lengths.max(), D))
    for b, f in enumerate(feats):
        out[b, :f.shape[0]] = f
    return out, lengths


def make_batches(lengths, batch_size: int, rng: np.random.Generator, window: int = 8) -> list:
    """Shuffled batches of similar length: sort within windows of
    ``window * batch_size`` random utterances, then shuffle the batches."""
    order = rng.permutation(len(lengths))
    span = window * batch_size
    for s in range(0, len(order), span):
        seg = order[s:s + span]
        order[s:s + span] = seg[np.argsort(lengths[seg], kind="stable")]
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def compute_losses(p: ModelParams, feats: np.ndarray, lengths, transcripts, alpha: float):
    """Returns ``(joint, ctc_value, ce_value)``; ``joint`` is None when some
    target cannot be aligned (infinite CTC loss)."""
    eta = p.config.decoder.label_smoothing
    hhat, enc_len = encoder_forward(p, feats, lengths)
    B = len(transcripts)
    ctc_t = ce_t = None
    if alpha > 0:
        losses = ctc_loss_batch(ctc_head(p, hhat), transcripts, enc_len, SE_ID)
        if not np.all(np.isfinite(losses.data)):
            return None, math.inf, math.nan
        ctc_t = K.mul(K.tsum(losses), 1.0 / B)
        ctc_v = float(ctc_t.data)
    else:
        lat = ctc_head(p, K.Tensor(hhat.data))
        ctc_v = float(np.mean(ctc_loss_batch(lat, transcripts, enc_len, SE_ID).data))
    if alpha < 1:
        inp, tgt = teacher_forcing_batch(transcripts)
        ce_t = label_smoothed_ce(decoder_forward(p, inp, hhat, enc_len), tgt, eta)
        ce_v = float(ce_t.data)
    else:
        ce_v = math.nan
    return joint_loss(ctc_t, ce_t, alpha), ctc_v, ce_v


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(p: ModelParams, utts: Sequence[Utterance], beam: int, modes=("ops", "oah"), **kw) -> dict:
    from .pipeline import decode

    out = {}
    for mode in modes:
        pairs = [(decode(p, u.features, mode, beam, **kw).selected, u.transcript) for u in utts]
        out[mode] = corpus_cer(pairs)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _epoch_ckpt(out_dir: Path, epoch: int) -> Path:
    return out_dir / f"epoch_{epoch:03d}.ckpt"


def train_toy(train: Sequence[Utterance], dev: Sequence[Utterance], model_config: ModelConfig,
              cfg: TrainConfig, out_dir=None, resume: bool = False,
              on_epoch: Callable[[dict], None] | None = None):
    """Train all three components jointly.

    Returns ``(averaged_params, metrics)`` where ``metrics`` holds one dict
    per epoch keyed by :data:`METRIC_FIELDS`.  With ``out_dir`` every epoch
    is checkpointed (model + optimizer state) and ``resume`` continues from
    the newest one.
    """
    if not train:
        raise ValueError("empty training corpus")
    p = init_params(model_config, rng_stream(cfg.seed, "init"))
    adam = Adam(p.names(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    snapshots: deque = deque(maxlen=cfg.avg_last_k)
    metrics: list[dict] = []
    start_epoch, step, skipped = 0, 0, 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume:
            start_epoch, step, skipped, p, metrics = _resume(out_dir, adam, snapshots, cfg)

    d_model = p.config.d_model
    dev_eval = list(dev)[: cfg.dev_limit] if cfg.dev_limit is not None else list(dev)
    names = p.names()
    decoder_names = [n for n in names if n.startswith("dec.")]
    train_lengths = np.array([u.features.shape[0] for u in train])
    for epoch in range(start_epoch, cfg.epochs):
        mask_rng = rng_stream(cfg.seed, "mask", epoch)
        sums = np.zeros(3)
        counted = 0
        lr = 0.0
        for idx in make_batches(train_lengths, cfg.batch_size, rng_stream(cfg.seed, "shuffle", epoch)):
            batch = [train[j] for j in idx]
            feats = [spec_mask(u.features, mask_rng, cfg.time_masks, min(cfg.time_mask_width, u.features.shape[0]),
                               cfg.freq_masks, cfg.freq_mask_width) for u in batch]
            x, lengths = pad_batch(batch, feats)
            step += 1
            lr = noam_lr(step, d_model, cfg.warmup_steps, cfg.lr_scale)
            params = p.values()
            with K.Tape() as tape:
                tape.watch(*params)
                joint, ctc_v, ce_v = compute_losses(p, x, lengths, [u.transcript for u in batch], cfg.alpha)
            if joint is None:
                skipped += 1
                log.warning("epoch %d step %d: infinite CTC loss, batch skipped (%d so far)", epoch, step, skipped)
                continue
            if not np.isfinite(joint.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            grads = tape.gradient(joint, params)
            gmap = dict(zip(names, grads))
            if cfg.alpha == 1.0:
                for n in decoder_names:
                    del gmap[n]
            if cfg.grad_clip:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in gmap.values()))
                if norm > cfg.grad_clip:
                    scale = cfg.grad_clip / norm
                    gmap = {n: g * scale for n, g in gmap.items()}
            adam.update(p, gmap, lr)
            sums += (float(joint.data), ctc_v, ce_v)
            counted += 1
        snapshots.append(p.copy())
        cers = evaluate(p, dev_eval, cfg.dev_beam) if dev_eval else {"ops": math.nan, "oah": math.nan}
        means = sums / max(counted, 1)
        row = {"epoch": epoch + 1, "lr": lr, "loss_joint": means[0], "loss_ctc": means[1],
               "loss_ce": means[2], "dev_cer_ops": cers["ops"], "dev_cer_oah": cers["oah"]}
        metrics.append(row)
        log.info("epoch %d  loss %.4f  ctc %.4f  ce %.4f  dev ops %.4f oah %.4f", *[row[f] for f in
                 ("epoch", "loss_joint", "loss_ctc", "loss_ce", "dev_cer_ops", "dev_cer_oah")])
        if on_epoch is not None:
            on_epoch(row)
        if out_dir is not None:
            meta = {"epoch": epoch + 1, "step": step, "skipped": skipped, "adam_t": adam.t,
                    "train_config": dataclasses.asdict(cfg), "metrics": metrics}
            save_checkpoint(_epoch_ckpt(out_dir, epoch + 1), p, adam.state_tensors(p), meta)
            stale = _epoch_ckpt(out_dir, epoch + 1 - cfg.avg_last_k)
            if stale.exists():
                stale.unlink()
    final = average_checkpoints(list(snapshots), min(cfg.avg_last_k, len(snapshots))) if snapshots else p
    return final, metrics


def _resume(out_dir: Path, adam: Adam, snapshots: deque, cfg: TrainConfig):
    ckpts = sorted(out_dir.glob("epoch_*.ckpt"))
    if not ckpts:
        raise FileNotFoundError(f"no epoch checkpoints to resume from in {out_dir}")
    p, extra, meta = load_checkpoint(ckpts[-1])
    for path in ckpts[-cfg.avg_last_k:-1]:
        snapshots.append(load_checkpoint(path)[0])
    snapshots.append(p.copy())
    adam.load_state(extra, meta["adam_t"])
    return meta["epoch"], meta["step"], meta["skipped"], p, list(meta["metrics"])


def write_metrics_csv(path, metrics: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in metrics:
            w.writerow({k: row[k] for k in METRIC_FIELDS})
