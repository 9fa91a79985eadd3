"""Training loop: batch assembly, tri-modal forward pass, total loss,
decoupled-weight-decay adaptive-moment updates under a cosine learning-rate
schedule, checkpointing, and periodic evaluation (proposal recall, ROI dice).
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import Dataset, kfold_split
from .encoders import (
    EncoderConfig,
    FmriEncoder,
    TextEncoder,
    VisualEncoder,
    patchify_batch,
)
from .io import tensor_from_bytes, tensor_to_bytes
from .losses import BatchFeatures, LossConfig, SlotFeatures, total_loss
from .roi import LocalizeConfig, attention_map, dice, threshold_mask
from .soip import SoipParams, propose
from .soir import retrieve

__all__ = ["TrainConfig", "TrainState", "BractiveModel", "AdamW", "cosine_lr",
           "calibrate_query_signs",
           "train", "train_step", "evaluate", "sweep_gamma", "best_constant_mask_dice",
           "save_checkpoint", "load_checkpoint", "CheckpointError"]


@dataclass
class TrainConfig:
    """Desk-scale defaults; `paper_parity()` restores the published regime."""

    epochs: int = 30
    base_lr: float = 1e-3          # desk-scale; full-scale runs used 2.5e-5
    batch_size: int = 32
    k: int = 4                     # proposal slots
    retrieval_tau: float = 1.0
    proposal_lr_scale: float = 100.0  # plain-SGD multiplier for the proposal head
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    seed: int = 0
    eval_every: int = 10           # epochs between evaluation events
    deterministic: bool = True

    def __post_init__(self):
        for name in ("epochs", "base_lr", "batch_size", "k", "retrieval_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @staticmethod
    def paper_parity() -> "TrainConfig":
        return TrainConfig(epochs=30, base_lr=2.5e-5, batch_size=4, k=4)


class BractiveModel:
    """The three encoders plus the proposal matrix, as one parameter owner."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self.visual = VisualEncoder(cfg)
        self.fmri = FmriEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.soip = SoipParams.init(cfg)

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.visual.parameters())
        params.update(self.fmri.parameters())
        params.update(self.soip.parameters())
        return params

    def all_parameters(self) -> dict[str, Tensor]:
        params = self.trainable_parameters()
        params.update(self.text.parameters())
        return params

    def forward(self, images: np.ndarray, grids: np.ndarray, captions: np.ndarray,
                valid: np.ndarray, k: int, tau: float):
        """Run the full per-batch pipeline and assemble the loss inputs."""
        vis = self.visual.encode(patchify_batch(images, self.cfg.patch))
        fm = self.fmri.encode_grids(grids)
        tx = self.text.encode_tokens(captions, valid)
        props = propose(tx.cls, tx.tokens, tx.valid_mask, self.soip, k)
        p_soi = retrieve(props.features, vis.tokens, tau)
        f_soi = retrieve(props.features, fm.tokens, tau)
        slots = [SlotFeatures(confidence=props.confidences[:, j],
                              text=props.features[:, j, :],
                              visual=p_soi.feature[:, j, :],
                              fmri=f_soi.feature[:, j, :])
                 for j in range(k)]
        batch = BatchFeatures(text_cls=tx.cls, visual_cls=vis.cls, fmri_cls=fm.cls,
                              slots=slots)
        return batch, props, {"visual": vis, "fmri": fm, "text": tx}


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay.

    Parameters whose gradient is absent for a step are skipped entirely, so
    an objective that never touches a tensor also never decays it.

    Names listed in `plain` take raw SGD steps (lr · plain_lr_scale, no
    moments, no decay) after row-centering the gradient. The proposal head
    needs this: the confidence-weighted loss always profits from lowering
    every confidence (each weighted term is a positive −log-probability), so
    the raw gradient's common mode across caption positions drives all
    confidences to zero; what identifies subject positions is only the
    *differential* between positions. Row-centering removes the collapse
    direction and keeps the ranking signal, and skipping adaptive moments
    matters because per-coordinate normalization flattens exactly that
    differential away.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.01,
                 plain: set[str] | frozenset[str] = frozenset(),
                 plain_lr_scale: float = 1.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.plain = set(plain)
        self.plain_lr_scale = plain_lr_scale
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter '{name}' {p.data.shape}")
            if name in self.plain:
                g = g - g.mean(axis=0, keepdims=True)
                p.data = p.data - lr * self.plain_lr_scale * g
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainState:
    model: BractiveModel
    optimizer: AdamW
    step: int = 0
    # Per-class localization query sign, fit on the training fold after the
    # loop finishes (see calibrate_query_signs). None until calibrated.
    query_signs: dict[int, float] | None = None


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Cosine decay from base_lr to zero; steps past the end clamp to zero."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if step >= total_steps:
        return 0.0
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


# ---------------------------------------------------------------------------
# batch materialization
# ---------------------------------------------------------------------------

@dataclass
class _Arrays:
    """All modality arrays for a list of sample ids, preloaded for speed."""

    ids: np.ndarray
    images: np.ndarray
    grids: np.ndarray
    captions: np.ndarray
    valid: np.ndarray
    subject_positions: list[dict[int, int]]
    gt_masks: list[dict[int, np.ndarray]]

    def take(self, rows) -> "_Arrays":
        return _Arrays(self.ids[rows], self.images[rows], self.grids[rows],
                       self.captions[rows], self.valid[rows],
                       [self.subject_positions[r] for r in rows],
                       [self.gt_masks[r] for r in rows])


def _materialize(dataset: Dataset, ids) -> _Arrays:
    samples = [dataset.load_sample(i) for i in ids]
    fmap = dataset.flatten_map
    return _Arrays(
        ids=np.asarray(ids),
        images=np.stack([s.image for s in samples]),
        grids=np.stack([fmap.flatten(s.fmri) for s in samples]),
        captions=np.stack([s.caption for s in samples]),
        valid=np.stack([s.valid_mask for s in samples]),
        subject_positions=[dataset.subject_positions(s) for s in samples],
        gt_masks=[s.gt_masks for s in samples],
    )


def train_step(state: TrainState, batch: _Arrays, train_cfg: TrainConfig,
               loss_cfg: LossConfig, lr: float) -> float:
    """One optimizer update over one batch; returns the (finite) loss value."""
    model = state.model
    state.optimizer.zero_grad()
    feats, _, _ = model.forward(batch.images, batch.grids, batch.captions,
                                batch.valid, train_cfg.k, train_cfg.retrieval_tau)
    loss = total_loss(feats, loss_cfg)
    loss.backward()
    state.optimizer.step(lr)
    state.step += 1
    return float(loss.data)


# ---------------------------------------------------------------------------
# query sign calibration
# ---------------------------------------------------------------------------

def calibrate_query_signs(model: BractiveModel, dataset: Dataset, train_ids,
                          train_cfg: TrainConfig, max_samples: int = 256,
                          arrays: _Arrays | None = None) -> dict[int, float]:
    """Fit one localization sign per class on the training fold.

    Contrastive training against a frozen text anchor identifies each class's
    brain feature only up to sign: a feature that is consistently *anti*
    -aligned with its class query separates samples just as well, and
    gradient descent cannot flip it afterwards because the flip passes
    through zero alignment. The sign is therefore calibrated after training,
    on training-fold samples only (the same data budget the mask-threshold
    sweep uses): for every class, average the cosine between the class query
    and the mean brain-token feature over that sample's labelled region, and
    keep its sign. Localization queries are multiplied by this sign.
    """
    ids = list(train_ids)[:max_samples]
    arrays = arrays.take(np.arange(min(max_samples, len(arrays.ids)))) \
        if arrays is not None else _materialize(dataset, ids)
    cfg = model.cfg
    patch = cfg.fmri_patch
    cols = cfg.grid_width // patch
    fmap = dataset.flatten_map
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    bs = train_cfg.batch_size
    n = len(arrays.ids)
    for lo in range(0, n, bs):
        sub = arrays.take(np.arange(lo, min(lo + bs, n)))
        text = model.text.encode_tokens(sub.captions, sub.valid).tokens.data
        fmri = model.fmri.encode_grids(sub.grids).tokens.data
        for b in range(len(sub.ids)):
            fn = fmri[b] / np.linalg.norm(fmri[b], axis=1, keepdims=True)
            for cid, pos in sub.subject_positions[b].items():
                q = text[b, pos]
                q = q / np.linalg.norm(q)
                mask = sub.gt_masks[b][cid]
                rows_g = fmap.rows[mask] // patch
                cols_g = fmap.cols[mask] // patch
                patches = np.unique(rows_g * cols + cols_g)
                f = fn[patches].mean(axis=0)
                sums[cid] = sums.get(cid, 0.0) + float(q @ f)
                counts[cid] = counts.get(cid, 0) + 1
    return {cid: (1.0 if sums[cid] >= 0.0 else -1.0) for cid in sums}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10, epoch)))
    return rng.permutation(n)


def evaluate(model: BractiveModel, dataset: Dataset, val_ids,
             train_cfg: TrainConfig, loss_cfg: LossConfig,
             gammas=(0.5,), mode: str = "bilinear",
             arrays: _Arrays | None = None,
             query_signs: dict[int, float] | None = None) -> dict:
    """Validation metrics: proposal recall (with analytic chance level),
    mean ROI dice per threshold, and mean loss.

    Dice uses each present class's text token feature as the localization
    query against that sample's brain-grid tokens.
    """
    if len(val_ids) == 0:
        raise ValueError("empty validation set")
    arrays = arrays if arrays is not None else _materialize(dataset, val_ids)
    fmap = dataset.flatten_map
    cfg = model.cfg
    n = len(arrays.ids)
    bs = train_cfg.batch_size

    recalls: list[float] = []
    chances: list[float] = []
    losses: list[float] = []
    dice_sums = {float(g): 0.0 for g in gammas}
    dice_count = 0

    for lo in range(0, n, bs):
        rows = np.arange(lo, min(lo + bs, n))
        sub = arrays.take(rows)
        feats, props, enc = model.forward(sub.images, sub.grids, sub.captions,
                                          sub.valid, train_cfg.k,
                                          train_cfg.retrieval_tau)
        losses.append(float(total_loss(feats, loss_cfg).data))
        text_tokens = enc["text"].tokens.data
        fmri_tokens = enc["fmri"].tokens.data
        for b in range(len(rows)):
            positions = sub.subject_positions[b]
            proposed = set(props.indices[b].tolist())
            hits = sum(1 for pos in positions.values() if pos in proposed)
            recalls.append(hits / len(positions))
            chances.append(min(1.0, train_cfg.k / int(sub.valid[b].sum())))
            for cid, pos in positions.items():
                sign = query_signs.get(cid, 1.0) if query_signs else 1.0
                att = attention_map(sign * text_tokens[b, pos], fmri_tokens[b], fmap,
                                    LocalizeConfig(mode=mode), patch=cfg.fmri_patch)
                gt = sub.gt_masks[b][cid]
                for g in gammas:
                    dice_sums[float(g)] += dice(threshold_mask(att, float(g)), gt)
                dice_count += 1

    return {
        "n": n,
        "soip_recall": float(np.mean(recalls)),
        "chance_recall": float(np.mean(chances)),
        "val_loss": float(np.mean(losses)),
        "dice": {g: s / max(dice_count, 1) for g, s in dice_sums.items()},
    }


def sweep_gamma(model: BractiveModel, dataset: Dataset, ids, train_cfg: TrainConfig,
                loss_cfg: LossConfig, gammas=None, mode: str = "bilinear") -> dict[float, float]:
    """Mean dice at each threshold over the given sample ids."""
    gammas = gammas if gammas is not None else [round(0.1 * i, 1) for i in range(1, 10)]
    report = evaluate(model, dataset, ids, train_cfg, loss_cfg, gammas=gammas, mode=mode)
    return report["dice"]


def best_constant_mask_dice(dataset: Dataset, ids) -> float:
    """Best mean dice achievable by one fixed mask for every (sample, class).

    Voxels are ranked by how often they appear in ground truth; every prefix
    of that ranking is scored and the best mean dice returned. This is the
    strongest class-blind constant predictor up to ties in the ranking.
    """
    n_f = dataset.manifest.num_voxels
    freq = np.zeros(n_f)
    gts = []
    for sid in ids:
        sample = dataset.load_sample(sid)
        for mask in sample.gt_masks.values():
            freq += mask
            gts.append(mask)
    order = np.argsort(-freq, kind="stable")
    gt_sizes = np.array([m.sum() for m in gts], dtype=np.float64)
    # Prefix masks: count, per gt, how many of its voxels fall in each prefix.
    membership = np.stack([m[order] for m in gts])        # [n_gt, n_f]
    cum_hits = np.cumsum(membership, axis=1)              # hits within prefix
    best = 0.0
    sizes = np.arange(1, n_f + 1, dtype=np.float64)
    mean_dice = (2.0 * cum_hits / (sizes[None, :] + gt_sizes[:, None])).mean(axis=0)
    best = float(mean_dice.max())
    return best


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    """Checkpoint archive is incompatible with the requested configuration."""


CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, path, train_cfg: TrainConfig | None = None) -> None:
    """Archive every parameter and optimizer moment, bitwise, plus configs."""
    model = state.model
    params = model.all_parameters()
    manifest = {
        "kind": "bractive-checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "adam_step": state.optimizer.t,
        "encoder_config": asdict(model.cfg),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "query_signs": ({str(c): s for c, s in state.query_signs.items()}
                        if state.query_signs else None),
        "tensors": {name: list(t.shape) for name, t in params.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        for name, t in params.items():
            zf.writestr(f"tensors/{name}.bt", tensor_to_bytes(t.data))
        for name in state.optimizer.params:
            zf.writestr(f"opt/m/{name}.bt", tensor_to_bytes(state.optimizer.m[name]))
            zf.writestr(f"opt/v/{name}.bt", tensor_to_bytes(state.optimizer.v[name]))


def load_checkpoint(path, train_cfg: TrainConfig | None = None,
                    expected: EncoderConfig | None = None) -> tuple[TrainState, TrainConfig | None]:
    """Rebuild a TrainState; all-or-nothing (no partial load on mismatch)."""
    try:
        return _load_checkpoint(path, train_cfg, expected)
    except (KeyError, json.JSONDecodeError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc


def _load_checkpoint(path, train_cfg, expected):
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("kind") != "bractive-checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint archive")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version")
        enc_cfg = EncoderConfig(**manifest["encoder_config"])
        if expected is not None and asdict(expected) != asdict(enc_cfg):
            raise CheckpointError(
                f"{path}: checkpoint encoder config (d={enc_cfg.d}) does not "
                f"match the requested config (d={expected.d})")
        tensors = {name: tensor_from_bytes(zf.read(f"tensors/{name}.bt"), name)
                   for name in manifest["tensors"]}
        model = BractiveModel(enc_cfg)
        params = model.all_parameters()
        if set(params) != set(tensors):
            raise CheckpointError(f"{path}: parameter set mismatch")
        for name, t in params.items():
            if tuple(tensors[name].shape) != t.shape:
                raise CheckpointError(
                    f"{path}: tensor '{name}' has shape {tensors[name].shape}, "
                    f"expected {t.shape}")
        saved_cfg = (TrainConfig(**manifest["train_config"])
                     if manifest.get("train_config") else None)
        cfg = train_cfg or saved_cfg or TrainConfig()
        optimizer = AdamW(model.trainable_parameters(), beta1=cfg.beta1,
                          beta2=cfg.beta2, eps=cfg.adam_eps,
                          weight_decay=cfg.weight_decay,
                          plain={"soip.weight"},
                          plain_lr_scale=cfg.proposal_lr_scale)
        moments_m = {name: tensor_from_bytes(zf.read(f"opt/m/{name}.bt"), name)
                     for name in optimizer.params}
        moments_v = {name: tensor_from_bytes(zf.read(f"opt/v/{name}.bt"), name)
                     for name in optimizer.params}
    # Assign only after everything parsed cleanly.
    for name, t in params.items():
        t.data = tensors[name]
    optimizer.m = moments_m
    optimizer.v = moments_v
    optimizer.t = manifest["adam_step"]
    signs = manifest.get("query_signs")
    state = TrainState(model=model, optimizer=optimizer, step=manifest["step"],
                       query_signs=({int(c): float(s) for c, s in signs.items()}
                                    if signs else None))
    return state, saved_cfg


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def train(model_or_state, dataset: Dataset, fold: int, train_cfg: TrainConfig,
          loss_cfg: LossConfig, out_dir=None, gammas=(0.5,),
          log=None, max_steps: int | None = None) -> tuple[TrainState, list[dict]]:
    """Train over the chosen fold's training split.

    Batch order is a pure function of (seed, epoch), so resuming from a
    checkpointed step reproduces the uninterrupted run bitwise. Partial
    trailing batches are dropped to keep the contrastive batch size constant.
    """
    if isinstance(model_or_state, TrainState):
        state = model_or_state
    else:
        optimizer = AdamW(model_or_state.trainable_parameters(),
                          beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                          eps=train_cfg.adam_eps,
                          weight_decay=train_cfg.weight_decay,
                          plain={"soip.weight"},
                          plain_lr_scale=train_cfg.proposal_lr_scale)
        state = TrainState(model=model_or_state, optimizer=optimizer, step=0)

    train_ids, val_ids = kfold_split(dataset.manifest, fold)
    arrays = _materialize(dataset, train_ids)
    val_arrays = _materialize(dataset, val_ids)
    steps_per_epoch = len(train_ids) // train_cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError("training split smaller than one batch")
    total_steps = steps_per_epoch * train_cfg.epochs
    if max_steps is not None:
        total_steps = min(total_steps, state.step + max_steps)

    out = Path(out_dir) if out_dir else None
    metrics_path = None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"

    events: list[dict] = []

    def emit(event: dict) -> None:
        events.append(event)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
        if log:
            log(event)

    order = None
    current_epoch = -1
    while state.step < total_steps:
        epoch = state.step // steps_per_epoch
        if epoch != current_epoch:
            order = _epoch_order(train_cfg.seed, epoch, len(train_ids))
            current_epoch = epoch
        pos = state.step % steps_per_epoch
        rows = order[pos * train_cfg.batch_size:(pos + 1) * train_cfg.batch_size]
        lr = cosine_lr(state.step, steps_per_epoch * train_cfg.epochs,
                       train_cfg.base_lr, train_cfg.warmup_steps)
        loss_value = train_step(state, arrays.take(rows), train_cfg, loss_cfg, lr)
        end_of_epoch = (state.step % steps_per_epoch) == 0
        finished = state.step >= total_steps
        if end_of_epoch:
            emit({"event": "epoch", "epoch": epoch, "step": state.step,
                  "loss": loss_value, "lr": lr})
        should_eval = (end_of_epoch and ((epoch + 1) % train_cfg.eval_every == 0)) or finished
        if should_eval:
            if finished:
                state.query_signs = calibrate_query_signs(
                    state.model, dataset, train_ids, train_cfg, arrays=arrays)
            report = evaluate(state.model, dataset, val_ids, train_cfg, loss_cfg,
                              gammas=gammas, arrays=val_arrays,
                              query_signs=state.query_signs)
            emit({"event": "eval", "epoch": epoch, "step": state.step, **report})
            if out:
                save_checkpoint(state, out / "checkpoints" / f"step{state.step:06d}.zip",
                                train_cfg)
    if out:
        save_checkpoint(state, out / "checkpoints" / "final.zip", train_cfg)
    return state, events
