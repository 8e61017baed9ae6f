"""Weighted cross-entropy training loop with poly learning-rate decay.

The loss is L = -(1/N) sum_p sum_i w_i y_i^p log(o_i^p) over one-hot labels,
with the probability clamped at 1e-12 inside the log. The learning rate
follows base * (1 - iter/max_iter)^power and updates are plain SGD (momentum
optional, off by default). Augmentation applies shared random flips plus a
random rescale in [0.8, 1.2] with bilinear image / nearest mask resampling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatchError, Tensor, clip_min, gradients, log
from .backbone import ConfigError
from .data import Sample, resize_bilinear, resize_nearest
from .metrics import MetricEntry, MetricReport, aggregate, compute_metrics, confusion
from .model import ModelConfig, model_forward, predict_mask


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    base_lr: float = 1e-3
    power: float = 0.9
    max_iter: int = 1000
    class_weights: tuple[float, float] = (0.8, 0.2)
    sigma_sq: float = 10.0
    seed: int = 0
    batch_size: int = 4
    use_bidfl: bool = True
    use_mcdf: bool = True
    momentum: float = 0.0
    augment: bool = True
    stop_grad_alpha: bool = False

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 < self.power <= 1.0:
            raise ConfigError(f"power must be in (0, 1], got {self.power}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if any(w <= 0 for w in self.class_weights):
            raise ConfigError(f"class weights must be positive, got {self.class_weights}")
        if self.sigma_sq <= 0:
            raise ConfigError(f"sigma_sq must be positive, got {self.sigma_sq}")
        if self.batch_size < 1 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("batch_size must be >= 1 and momentum in [0, 1)")


@dataclass
class TrainState:
    iteration: int
    parameters: dict[str, Tensor]
    seed: int
    running_loss: float
    velocity: dict[str, np.ndarray] | None = None


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    lr: float
    loss: float


def weighted_ce_loss(probs: Tensor, labels, weights: tuple[float, ...]) -> Tensor:
    """Class-weighted cross entropy averaged over all pixels."""
    onehot = labels.data if isinstance(labels, Tensor) else np.asarray(labels, float)
    if onehot.shape != probs.shape:
        raise ShapeMismatchError(
            f"labels shape {onehot.shape} != probs shape {probs.shape}")
    if len(weights) != probs.shape[-3]:
        raise ShapeMismatchError(
            f"{len(weights)} class weights for {probs.shape[-3]} channels")
    if not np.isin(onehot, (0.0, 1.0)).all() \
            or not np.array_equal(onehot.sum(axis=-3), np.ones(onehot.sum(axis=-3).shape)):
        raise ValueError("labels must be one-hot over the class axis")
    w = np.asarray(weights, dtype=float).reshape(
        (1,) * (probs.ndim - 3) + (-1, 1, 1))
    pixels = onehot.size // onehot.shape[-3]
    weight_map = Tensor(w * onehot)
    return -(weight_map * log(clip_min(probs, 1e-12))).sum() / pixels


def poly_lr(iteration: int, config: TrainConfig) -> float:
    if not 0 <= iteration <= config.max_iter:
        raise ValueError(
            f"iteration {iteration} outside [0, {config.max_iter}]")
    return config.base_lr * (1.0 - iteration / config.max_iter) ** config.power


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.0) -> TrainState:
    """theta <- theta - lr * g (optionally velocity-smoothed); returns new state."""
    new_params: dict[str, Tensor] = {}
    velocity = state.velocity
    new_velocity: dict[str, np.ndarray] | None = None if momentum == 0.0 else {}
    for name, p in state.parameters.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} "
                f"for {name!r}")
        if momentum:
            v = momentum * (velocity[name] if velocity else 0.0) + g
            new_velocity[name] = v
            g = v
        new_params[name] = Tensor(p.data - lr * g, requires_grad=True)
    return TrainState(iteration=state.iteration + 1, parameters=new_params,
                      seed=state.seed, running_loss=state.running_loss,
                      velocity=new_velocity)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    flip_horizontal: bool
    flip_vertical: bool
    scale: float


def sample_augment(rng: np.random.Generator) -> AugmentDraw:
    return AugmentDraw(
        flip_horizontal=bool(rng.random() < 0.5),
        flip_vertical=bool(rng.random() < 0.5),
        scale=float(rng.uniform(0.8, 1.2)),
    )


def apply_flip(arr: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        arr = arr[..., ::-1]
    if vertical:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def apply_augment(image: np.ndarray, mask: np.ndarray,
                  draw: AugmentDraw) -> tuple[np.ndarray, np.ndarray]:
    image = apply_flip(image, draw.flip_horizontal, draw.flip_vertical)
    mask = apply_flip(mask, draw.flip_horizontal, draw.flip_vertical)
    h, w = image.shape[-2:]
    nh, nw = max(1, round(h * draw.scale)), max(1, round(w * draw.scale))
    if (nh, nw) != (h, w):
        image = resize_bilinear(image, nh, nw)
        mask = resize_nearest(mask, nh, nw)
        if nh >= h:  # center crop back
            top, left = (nh - h) // 2, (nw - w) // 2
            image = image[:, top:top + h, left:left + w]
            mask = mask[:, top:top + h, left:left + w]
        else:  # center pad back: image replicates edges, mask stays background
            top, left = (h - nh) // 2, (w - nw) // 2
            pad = ((0, 0), (top, h - nh - top), (left, w - nw - left))
            image = np.pad(image, pad, mode="edge")
            mask = np.pad(mask, pad)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(image: Tensor, mask: Tensor,
            rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """One random flip+scale draw applied identically to image and mask."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise ShapeMismatchError(
            f"image {image.shape} / mask {mask.shape} spatial mismatch")
    img, msk = apply_augment(image.data, mask.data, sample_augment(rng))
    return Tensor(img), Tensor(msk)


# ---------------------------------------------------------------------------
# training and evaluation loops
# ---------------------------------------------------------------------------

def one_hot_masks(masks: np.ndarray) -> np.ndarray:
    """(N,1,H,W) binary -> (N,2,H,W) one-hot with lesion as channel 0."""
    lesion = masks[:, 0]
    return np.stack([lesion, 1.0 - lesion], axis=1)


def train(dataset: list[Sample], config: TrainConfig) -> tuple[TrainState, list[LossRecord]]:
    """Full optimization loop; bit-deterministic for a fixed seed."""
    if not dataset:
        raise ConfigError("training dataset is empty")
    from .model import build_params  # local import keeps module load light

    init_seed, order_seed, aug_seed = (
        int(s.generate_state(1)[0])
        for s in np.random.SeedSequence(config.seed).spawn(3))
    params = build_params(config.model, init_seed, config.use_bidfl)
    state = TrainState(iteration=0, parameters=params, seed=config.seed,
                       running_loss=0.0)
    order_rng = np.random.default_rng(order_seed)
    aug_rng = np.random.default_rng(aug_seed)

    records: list[LossRecord] = []
    queue: list[int] = []
    for it in range(config.max_iter):
        lr = poly_lr(it, config)
        while len(queue) < config.batch_size:
            queue.extend(order_rng.permutation(len(dataset)).tolist())
        picks, queue = queue[:config.batch_size], queue[config.batch_size:]

        images, masks = [], []
        for idx in picks:
            sample = dataset[idx]
            img, msk = sample.image.data, sample.mask.data
            if config.augment:
                img, msk = apply_augment(img, msk, sample_augment(aug_rng))
            images.append(img)
            masks.append(msk)
        batch = Tensor(np.stack(images))
        labels = one_hot_masks(np.stack(masks))

        _, probs, _ = model_forward(batch, state.parameters, config.model,
                                    config.use_bidfl, config.use_mcdf,
                                    config.sigma_sq, config.stop_grad_alpha)
        loss = weighted_ce_loss(probs, labels, config.class_weights)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDivergedError(
                f"non-finite loss {loss_value} at iteration {it} (lr={lr:.3e}, "
                f"last finite loss={records[-1].loss if records else float('nan'):.6f})")
        grads = gradients(loss, state.parameters)
        state = sgd_step(state, grads, lr, momentum=config.momentum)
        state.running_loss = (loss_value if it == 0
                              else 0.98 * state.running_loss + 0.02 * loss_value)
        records.append(LossRecord(iteration=it, lr=lr, loss=loss_value))
    return state, records


def write_loss_log(path, records: list[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "loss"])
        for r in records:
            writer.writerow([r.iteration, f"{r.lr:.17g}", f"{r.loss:.17g}"])


def evaluate(samples: list[Sample], params: dict[str, Tensor], config: ModelConfig,
             use_bidfl: bool, use_mcdf: bool,
             sigma_sq: float) -> tuple[MetricReport, list[str]]:
    """Per-image metrics of thresholded predictions against ground truth."""
    if not samples:
        raise ConfigError("evaluation set is empty")
    entries: list[MetricEntry] = []
    ids: list[str] = []
    for sample in samples:
        pred = predict_mask(sample.image, params, config, use_bidfl, use_mcdf,
                            sigma_sq)
        entries.append(compute_metrics(confusion(pred, sample.mask.data[0])))
        ids.append(sample.id)
    return aggregate(entries), ids
