"""Two-stage training: vanilla training on the base set, then mask-guided few-shot fine-tuning.

Stage 2 (method ``mgvit``) is:

1. switch the model to the mask-guided flow and fine-tune it on the base
   set for a few epochs with an all-ones mask;
2. every joint epoch: score every base sample by negative loss under the
   current model, keep the top ``neighborhood_size``, compute a salience
   mask per kept sample, then train one epoch on the novel shots
   (all-ones mask) together with the masked neighborhood.

Labels live in one joint space: base classes first, then novel classes.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import SampleRecord, split_base_novel
from .detection import (DetectionLossConfig, detection_loss, detection_salience_loss,
                        detection_targets, evaluate_detection, per_image_detection_loss)
from .errors import InputError, NonFiniteError
from .maskgen import classification_loss, salience_for_set
from .optim import AdamW, cosine_lr
from .selection import random_shots, select_neighborhood, select_shots, FewShotTask
from .tensor import cross_entropy, no_grad
from .vit import ModelConfig, ViT

log = logging.getLogger(__name__)

CLASSIFICATION = "classification"
DETECTION = "detection"
METHODS = ("mgvit", "ft-full", "ft-part")


@dataclass
class TrainConfig:
    """Every knob of an experiment.  Serialized as ``key = value`` lines."""

    task: str = CLASSIFICATION
    method: str = "mgvit"
    seed: int = 0
    # model
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 2
    num_layers: int = 4
    mlp_ratio: float = 2.0
    num_det_tokens: int = 8
    # stage 1
    stage1_epochs: int = 30
    batch_size: int = 32
    base_lr: float = 3e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 3
    # stage 2
    initial_finetune_epochs: int = 3
    initial_finetune_lr: float = 0.0
    joint_epochs: int = 20
    finetune_lr: float = 1e-3
    finetune_warmup_epochs: int = 1
    label_smoothing: float = 0.1
    topk: int = 16
    mask_kind: str = "discrete"
    neighborhood_size: int = 0
    # episode
    n_way: int = 4
    k_shot: int = 5
    # ablation switches
    use_mask: bool = True
    use_neighborhood: bool = True
    use_active_selection: bool = True
    # augmentation (training batches only)
    augment_hflip: bool = False
    augment_crop_pad: int = 0
    # detection loss
    det_class_weight: float = 1.0
    det_box_weight: float = 5.0
    det_noobject_weight: float = 0.1
    # data
    base_path: str = ""
    novel_path: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in (CLASSIFICATION, DETECTION):
            raise InputError(f"task must be classification or detection, got {self.task!r}")
        if self.method not in METHODS:
            raise InputError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mask_kind not in ("discrete", "continued"):
            raise InputError(f"mask_kind must be discrete or continued, got {self.mask_kind!r}")
        for name in ("stage1_epochs", "batch_size", "joint_epochs", "k_shot", "n_way", "topk"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        for name in ("initial_finetune_epochs", "warmup_epochs", "finetune_warmup_epochs",
                     "neighborhood_size", "augment_crop_pad"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")
        if self.base_lr < 0 or self.finetune_lr < 0 or self.initial_finetune_lr < 0:
            raise InputError("learning rates must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InputError("label_smoothing must lie in [0, 1)")

    # derived values -------------------------------------------------
    @property
    def stage2_lr(self) -> float:
        return self.finetune_lr or 10.0 * self.base_lr

    @property
    def adapt_lr(self) -> float:
        return self.initial_finetune_lr or self.base_lr

    @property
    def resolved_neighborhood_size(self) -> int:
        return self.neighborhood_size or 4 * self.n_way * self.k_shot

    @property
    def det_loss(self) -> DetectionLossConfig:
        return DetectionLossConfig(self.det_class_weight, self.det_box_weight,
                                   self.det_noobject_weight)

    def model_config(self, image_shape: tuple[int, int, int], num_classes: int) -> ModelConfig:
        c, h, w = image_shape
        return ModelConfig(image_height=h, image_width=w, channels=c, patch_size=self.patch_size,
                           embed_dim=self.embed_dim, num_heads=self.num_heads,
                           num_layers=self.num_layers, num_classes=num_classes,
                           num_det_tokens=self.num_det_tokens if self.task == DETECTION else 0,
                           mlp_ratio=self.mlp_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InputError(f"not a boolean: {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise InputError(f"cannot parse {raw!r} as {typ.__name__}")


def parse_key_values(lines: Sequence[str], source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_pairs(pairs: dict[str, str], base: TrainConfig | None = None) -> tuple[TrainConfig, dict]:
    """Build a :class:`TrainConfig` from string pairs.

    Keys prefixed ``data.`` are returned separately (synthetic-data settings);
    any other unknown key is an error.
    """
    hints = typing.get_type_hints(TrainConfig)
    values = (base or TrainConfig()).to_dict()
    data = {}
    for k, v in pairs.items():
        if k.startswith("data."):
            data[k[5:]] = v
        elif k in hints:
            values[k] = _parse_value(v, hints[k])
        else:
            raise InputError(f"unknown config key {k!r}")
    return TrainConfig(**values), data


def load_config(path=None, overrides: Sequence[str] = ()) -> tuple[TrainConfig, dict]:
    pairs = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise InputError(f"config file not found: {p}")
        pairs.update(parse_key_values(p.read_text().splitlines(), str(p)))
    pairs.update(parse_key_values(list(overrides), "--set"))
    return config_from_pairs(pairs)


# ----------------------------------------------------------------------
# training primitives


@dataclass
class RunState:
    """Everything needed to resume a training phase bit-exactly."""

    stage: str
    optimizer: AdamW
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    loss_trace: list = field(default_factory=list)

    def meta(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, "step": self.step,
                "optimizer_steps": self.optimizer.step_count,
                "lr": self.optimizer.lr, "weight_decay": self.optimizer.weight_decay,
                "rng": self.rng.bit_generator.state, "loss_trace": self.loss_trace}


def new_state(model: ViT, stage: str, lr: float, weight_decay: float, seed, trainable=None) -> RunState:
    params = {k: p for k, p in model.params.items() if trainable is None or k in trainable}
    model.set_trainable(set(params))
    return RunState(stage, AdamW(params, lr=lr, weight_decay=weight_decay),
                    np.random.default_rng(seed))


def save_run(path, model: ViT, state: RunState, extra_meta: dict | None = None) -> None:
    meta = state.meta()
    meta["trainable"] = sorted(state.optimizer.params)
    meta.update(extra_meta or {})
    arrays = {f"optim/{k}": v for k, v in state.optimizer.state_arrays().items()}
    ckpt.save_checkpoint(path, model, meta, arrays)


def load_run(path) -> tuple[ViT, RunState, dict]:
    model, meta, extra = ckpt.load_checkpoint(path)
    state = None
    if "stage" in meta and "rng" in meta:
        trainable = set(meta.get("trainable", model.params))
        params = {k: p for k, p in model.params.items() if k in trainable}
        model.set_trainable(trainable)
        opt = AdamW(params, lr=meta["lr"], weight_decay=meta["weight_decay"])
        opt.load_state_arrays({k[len("optim/"):]: v for k, v in extra.items()}, meta["optimizer_steps"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state = RunState(meta["stage"], opt, rng, meta["epoch"], meta["step"],
                         list(meta.get("loss_trace", [])))
    return model, state, meta


def augment(images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and pad-and-crop, per image."""
    if not cfg.augment_hflip and not cfg.augment_crop_pad:
        return images
    out = images.copy()
    pad = cfg.augment_crop_pad
    for i in range(len(out)):
        if cfg.augment_hflip and rng.random() < 0.5:
            out[i] = out[i, :, :, ::-1]
        if pad:
            padded = np.pad(out[i], ((0, 0), (pad, pad), (pad, pad)), mode="edge")
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            out[i] = padded[:, dy:dy + out.shape[2], dx:dx + out.shape[3]]
    return out


def _restricted_ce(logits, labels, columns, smoothing: float, reduction: str = "mean"):
    """Cross-entropy over a subset of logit columns (labels given in the joint space)."""
    if columns is None:
        return cross_entropy(logits, labels, smoothing, reduction)
    columns = list(columns)
    pos = {c: i for i, c in enumerate(columns)}
    try:
        local = [pos[int(l)] for l in labels]
    except KeyError as exc:
        raise InputError(f"label {exc.args[0]} is outside the trained classes {columns}")
    return cross_entropy(logits[:, np.asarray(columns)], local, smoothing, reduction)


@dataclass
class Batchable:
    """Training examples in one place: images, labels/targets and optional per-sample masks."""

    images: np.ndarray
    labels: np.ndarray | None = None
    targets: list | None = None
    masks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord], task: str,
                     masks: np.ndarray | None = None) -> "Batchable":
        imgs = np.stack([r.image for r in records])
        if task == DETECTION:
            _, h, w = imgs.shape[1:]
            return cls(imgs, targets=detection_targets(records, w, h), masks=masks)
        return cls(imgs, labels=np.array([r.label for r in records]), masks=masks)


def batch_loss(model: ViT, data: Batchable, idx: np.ndarray, cfg: TrainConfig,
               columns=None, images: np.ndarray | None = None):
    imgs = data.images[idx] if images is None else images
    mask = None if data.masks is None else data.masks[idx]
    seq = model.forward(imgs, mask)
    if cfg.task == DETECTION:
        logits, boxes = model.detect_head(seq)
        return detection_loss(logits, boxes, [data.targets[i] for i in idx],
                              model.config.num_classes, cfg.det_loss)
    return _restricted_ce(model.classify_head(seq), data.labels[idx], columns, cfg.label_smoothing)


def train_one_epoch(model: ViT, data: Batchable, state: RunState, cfg: TrainConfig,
                    lr_at: Callable[[int], float], columns=None) -> float:
    """One shuffled pass; returns the mean batch loss (also appended to ``state.loss_trace``)."""
    order = state.rng.permutation(len(data))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        imgs = augment(data.images[idx], cfg, state.rng)
        state.optimizer.zero_grad()
        loss = batch_loss(model, data, idx, cfg, columns, imgs)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss at {state.stage} epoch {state.epoch} step {state.step}")
        loss.backward()
        state.optimizer.step(lr_at(state.step))
        state.step += 1
        losses.append(value)
    mean = float(np.mean(losses))
    state.loss_trace.append(mean)
    state.epoch += 1
    return mean


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def run_supervised(model: ViT, data: Batchable, epochs: int, lr: float, warmup_epochs: int,
                   cfg: TrainConfig, state: RunState, columns=None,
                   on_epoch: Callable | None = None) -> RunState:
    """Epochs ``state.epoch .. epochs-1`` with a per-step warmup + cosine schedule."""
    spe = _steps_per_epoch(len(data), cfg.batch_size)
    total, warm = epochs * spe, min(warmup_epochs * spe, max(epochs * spe - 1, 0))
    while state.epoch < epochs:
        loss = train_one_epoch(model, data, state, cfg, lambda s: cosine_lr(s, total, warm, lr), columns)
        log.info("%s epoch %d/%d loss %.4f", state.stage, state.epoch, epochs, loss)
        if on_epoch is not None:
            on_epoch(state)
    return state


def base_columns(cfg: TrainConfig, base_labels) -> list[int] | None:
    return None if cfg.task == DETECTION else sorted(base_labels)


def train_stage1(model: ViT, base: Sequence[SampleRecord], cfg: TrainConfig,
                 state: RunState | None = None, on_epoch: Callable | None = None) -> RunState:
    """Vanilla supervised training on base data (logits restricted to base classes)."""
    if not base:
        raise InputError("stage-1 training needs a nonempty base dataset")
    model.mg_flow = False
    if state is None:
        state = new_state(model, "stage1", cfg.base_lr, cfg.weight_decay, [cfg.seed, 1])
    data = Batchable.from_records(base, cfg.task)
    return run_supervised(model, data, cfg.stage1_epochs, cfg.base_lr, cfg.warmup_epochs, cfg,
                          state, base_columns(cfg, {r.label for r in base}), on_epoch)


def initial_finetune(model: ViT, base: Sequence[SampleRecord], epochs: int, cfg: TrainConfig,
                     inject: bool = True, state: RunState | None = None) -> RunState:
    """Adapt to the mask-guided flow on base data with an all-ones mask.

    With ``inject=False`` the model stays on the vanilla flow, which makes
    this identical to continuing stage-1 training.
    """
    model.mg_flow = inject
    if state is None:
        state = new_state(model, "initial_finetune", cfg.adapt_lr, cfg.weight_decay, [cfg.seed, 2])
    if epochs == 0:
        return state
    data = Batchable.from_records(base, cfg.task)
    return run_supervised(model, data, epochs, cfg.adapt_lr, 0, cfg, state,
                          base_columns(cfg, {r.label for r in base}))


def mask_loss_fn(cfg: TrainConfig):
    if cfg.task == DETECTION:
        return detection_salience_loss(cfg.det_loss)
    return classification_loss(cfg.label_smoothing)


def joint_finetune_epoch(model: ViT, shots: Sequence[SampleRecord], base: Sequence[SampleRecord],
                         cfg: TrainConfig, state: RunState, lr_at: Callable[[int], float],
                         events: list | None = None) -> dict:
    """One epoch over the novel shots plus freshly mined, freshly masked base neighbors.

    Returns a summary with the neighborhood ids and the epoch loss.  The
    order of work per epoch is similarity -> top-k -> mask -> train; each
    step is appended to ``events`` when given.
    """
    if not shots:
        raise InputError("joint fine-tuning needs at least one novel shot")
    n = model.config.num_patches
    train_records = list(shots)
    masks = [np.ones((len(shots), n))]
    neighbor_ids: list[int] = []
    if cfg.use_neighborhood and base:
        size = min(cfg.resolved_neighborhood_size, len(base))
        loss_fn = (lambda m, recs: per_image_detection_loss(m, recs, cfg.det_loss)) \
            if cfg.task == DETECTION else None
        neighbor_ids, _ = select_neighborhood(model, base, size, 0.0, loss_fn)
        _note(events, "similarity")
        _note(events, "topk")
        by_id = {r.id: r for r in base}
        neighbors = [by_id[i] for i in neighbor_ids]
        if cfg.use_mask:
            images = np.stack([r.image for r in neighbors])
            labels = (detection_targets(neighbors, images.shape[3], images.shape[2])
                      if cfg.task == DETECTION else np.array([r.label for r in neighbors]))
            k = min(cfg.topk, n)
            pairs = salience_for_set(model, images, labels, k, cfg.mask_kind,
                                     ids=neighbor_ids, loss_fn=mask_loss_fn(cfg))
            masks.append(np.stack([m.as_float() for _, m in pairs]))
            _note(events, "mask")
        else:
            masks.append(np.ones((len(neighbors), n)))
        train_records += neighbors
    data = Batchable.from_records(train_records, cfg.task, np.concatenate(masks))
    loss = train_one_epoch(model, data, state, cfg, lr_at)
    _note(events, "train")
    return {"epoch": state.epoch, "loss": loss, "neighborhood_ids": neighbor_ids}


def _note(events, name):
    if events is not None:
        events.append(name)


def finetune_trainable(model: ViT, cfg: TrainConfig):
    if cfg.method == "ft-part":
        return {k for k in model.params if k.startswith(("head.", "det_cls.", "det_box."))}
    return None


def stage2(model: ViT, shots: Sequence[SampleRecord], base: Sequence[SampleRecord],
           cfg: TrainConfig, events: list | None = None) -> dict:
    """Run the configured fine-tuning method; returns per-epoch history."""
    history = {"initial_finetune_loss": [], "joint": []}
    if cfg.method == "mgvit":
        if cfg.initial_finetune_epochs:
            st = initial_finetune(model, base, cfg.initial_finetune_epochs, cfg)
            history["initial_finetune_loss"] = st.loss_trace
        model.mg_flow = True
    else:
        model.mg_flow = False
    state = new_state(model, "joint_finetune", cfg.stage2_lr, cfg.weight_decay, [cfg.seed, 3],
                      finetune_trainable(model, cfg))
    joint = cfg.method == "mgvit"
    n_train = len(shots) + (min(cfg.resolved_neighborhood_size, len(base))
                            if joint and cfg.use_neighborhood else 0)
    spe = _steps_per_epoch(n_train, cfg.batch_size)
    total = cfg.joint_epochs * spe
    warm = min(cfg.finetune_warmup_epochs * spe, max(total - 1, 0))
    run_cfg = cfg if joint else cfg.replace(use_neighborhood=False, use_mask=False)
    for _ in range(cfg.joint_epochs):
        summary = joint_finetune_epoch(model, shots, base, run_cfg, state,
                                       lambda s: cosine_lr(s, total, warm, cfg.stage2_lr), events)
        history["joint"].append(summary)
        log.info("stage2 epoch %d loss %.4f", summary["epoch"], summary["loss"])
    return history


# ----------------------------------------------------------------------
# evaluation


def _eval_workers() -> int:
    raw = os.environ.get("MGVIT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise InputError(f"MGVIT_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def predict_classes(model: ViT, images: np.ndarray, columns: Sequence[int],
                    flow: str | None = None, batch_size: int = 128) -> np.ndarray:
    """Argmax over ``columns`` only; ``flow="vanilla"`` forces the plain ViT path."""
    cols = np.asarray(list(columns))
    chunks = [images[s:s + batch_size] for s in range(0, len(images), batch_size)]

    def run(chunk):
        with no_grad():
            seq = model.forward_vanilla(chunk) if flow == "vanilla" else model.forward(chunk)
            logits = model.classify_head(seq).data[:, cols]
        return cols[np.argmax(logits, axis=1)]

    workers = min(_eval_workers(), len(chunks)) or 1
    if workers == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=int)


def evaluate_classification(model: ViT, records: Sequence[SampleRecord], columns: Sequence[int],
                            flow: str | None = None) -> float:
    """Top-1 accuracy with the argmax restricted to ``columns`` (the novel classes)."""
    if not records:
        raise InputError("evaluate_classification needs a nonempty split")
    pred = predict_classes(model, np.stack([r.image for r in records]), columns, flow)
    return float(np.mean(pred == np.array([r.label for r in records])))


# ----------------------------------------------------------------------
# experiments


TABLE3_ROWS = {
    "random+neighborhood+mask": dict(use_active_selection=False, use_neighborhood=True, use_mask=True),
    "active": dict(use_active_selection=True, use_neighborhood=False, use_mask=False),
    "active+neighborhood": dict(use_active_selection=True, use_neighborhood=True, use_mask=False),
    "active+neighborhood+mask": dict(use_active_selection=True, use_neighborhood=True, use_mask=True),
}


def ablation_configs(cfg: TrainConfig, include_baseline: bool = True) -> dict[str, TrainConfig]:
    """The four switch rows of the ablation grid, plus plain full fine-tuning."""
    out = {name: cfg.replace(method="mgvit", **sw) for name, sw in TABLE3_ROWS.items()}
    if include_baseline:
        out["ft-full"] = cfg.replace(method="ft-full", use_active_selection=False,
                                     use_neighborhood=False, use_mask=False)
    return out


@dataclass
class Stage1Result:
    model: ViT
    state: RunState
    base_train: list
    base_test: list
    base_labels: list[int]
    novel_labels: list[int]
    base_test_metric: float | None = None


def split_stage1(cfg: TrainConfig, base: Sequence[SampleRecord], novel: Sequence[SampleRecord]):
    """``(base_train, base_test, base_labels, novel_labels, num_classes)`` for ``cfg.task``."""
    if not base or not novel:
        raise InputError("both base and novel datasets must be nonempty")
    if cfg.task == DETECTION:
        base_train, _val, base_test = split_base_novel(base, (0.64, 0.16, 0.20), cfg.seed)
        return base_train, base_test, [0], [0], 1
    base_train, base_test = split_base_novel(base, (0.75, 0.25), cfg.seed)
    base_labels = sorted({r.label for r in base})
    novel_labels = sorted({r.label for r in novel})
    if set(base_labels) & set(novel_labels):
        raise InputError("base and novel label spaces overlap")
    return base_train, base_test, base_labels, novel_labels, max(base_labels + novel_labels) + 1


def prepare_stage1(cfg: TrainConfig, base: Sequence[SampleRecord], novel: Sequence[SampleRecord],
                   model: ViT | None = None, state: RunState | None = None,
                   on_epoch: Callable | None = None, train: bool = True) -> Stage1Result:
    """Split the base set, build the joint-head model and run stage 1.

    Pass ``model``/``state`` to resume an interrupted run, or ``train=False``
    to wrap an already trained model (no evaluation either).
    """
    base_train, base_test, base_labels, novel_labels, num_classes = split_stage1(cfg, base, novel)
    if model is None:
        model = ViT(cfg.model_config(base[0].image.shape, num_classes), seed=cfg.seed)
    elif model.config.num_classes != num_classes:
        raise InputError(f"checkpoint has {model.config.num_classes} classes, data needs {num_classes}")
    if not train:
        return Stage1Result(model, state, base_train, base_test, base_labels, novel_labels)
    state = train_stage1(model, base_train, cfg, state, on_epoch)
    res = Stage1Result(model, state, base_train, base_test, base_labels, novel_labels)
    if base_test:
        res.base_test_metric = (evaluate_detection(model, base_test) if cfg.task == DETECTION
                                else evaluate_classification(model, base_test, base_labels))
    return res


def choose_shots(cfg: TrainConfig, model: ViT, novel: Sequence[SampleRecord],
                 novel_labels: Sequence[int]) -> FewShotTask:
    labels = set(list(novel_labels)[: cfg.n_way]) if cfg.task == CLASSIFICATION else None
    pool = [r for r in novel if labels is None or r.label in labels]
    shots = (select_shots(pool, model, cfg.k_shot, cfg.seed) if cfg.use_active_selection
             else random_shots(pool, cfg.k_shot, cfg.seed))
    chosen = {i for ids in shots.values() for i in ids}
    test_ids = sorted(r.id for r in pool if r.id not in chosen)
    task = FewShotTask(n_way=len(shots), k_shot=cfg.k_shot, seed=cfg.seed, shot_ids=shots,
                       test_ids=test_ids,
                       selection="active" if cfg.use_active_selection else "random")
    task.validate()
    return task


def finetune_and_evaluate(cfg: TrainConfig, stage1: Stage1Result, novel: Sequence[SampleRecord],
                          task: FewShotTask | None = None) -> dict:
    """Stage 2 plus evaluation on a copy of the stage-1 model.  Returns a report dict."""
    model = stage1.model.copy()
    if task is None:
        task = choose_shots(cfg, model, novel, stage1.novel_labels)
    by_id = {r.id: r for r in novel}
    shots = [by_id[i] for i in task.all_shot_ids]
    test = [by_id[i] for i in task.test_ids]
    history = stage2(model, shots, stage1.base_train, cfg)
    flow = None if cfg.method == "mgvit" else "vanilla"
    if cfg.task == DETECTION:
        metric = {"AP": evaluate_detection(model, test, flow=flow)}
    else:
        cols = sorted(task.shot_ids)
        metric = {"ACC": evaluate_classification(model, test, cols, flow),
                  "train_ACC": evaluate_classification(model, shots, cols, flow)}
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "switches": {"use_active_selection": cfg.use_active_selection,
                     "use_neighborhood": cfg.use_neighborhood, "use_mask": cfg.use_mask,
                     "method": cfg.method, "mask_kind": cfg.mask_kind},
        "metrics": metric,
        "stage1": {"loss_trace": stage1.state.loss_trace if stage1.state else [],
                   "base_test_metric": stage1.base_test_metric},
        "initial_finetune_loss": history["initial_finetune_loss"],
        "joint_loss": [h["loss"] for h in history["joint"]],
        "neighborhood_ids_per_epoch": [h["neighborhood_ids"] for h in history["joint"]],
        "task": json.loads(task.to_json()),
        "model": model,
    }


def run_experiment(cfg: TrainConfig, base: Sequence[SampleRecord] | None = None,
                   novel: Sequence[SampleRecord] | None = None,
                   stage1: Stage1Result | None = None) -> dict:
    """Stage 1 -> shot selection -> stage 2 -> evaluation; returns a JSON-ready report.

    ``base``/``novel`` default to loading ``cfg.base_path``/``cfg.novel_path``.
    A precomputed ``stage1`` result (same config and data) may be shared
    between the rows of an ablation.
    """
    from .data import load_dataset

    t0 = time.time()
    if base is None or novel is None:
        for p in (cfg.base_path, cfg.novel_path):
            if not p or not Path(p).exists():
                raise InputError(f"dataset not found: {p!r}")
        base, novel = load_dataset(cfg.base_path), load_dataset(cfg.novel_path)
    if stage1 is None:
        stage1 = prepare_stage1(cfg, base, novel)
    report = finetune_and_evaluate(cfg, stage1, novel)
    report.pop("model")
    report["wall_clock"] = {"seconds": time.time() - t0}
    return report


def run_ablation(cfg: TrainConfig, base, novel, rows: dict[str, TrainConfig] | None = None) -> dict:
    """All ablation rows for one seed, sharing one stage-1 model."""
    rows = rows or ablation_configs(cfg)
    stage1 = prepare_stage1(cfg, base, novel)
    return {name: run_experiment(c, base, novel, stage1) for name, c in rows.items()}


def strip_wall_clock(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "wall_clock"}
