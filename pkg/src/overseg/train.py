"""Loss, optimizer, metric accumulation, and the mini-batch training loop.

The loop is deliberately plain: per epoch a seeded Fisher-Yates shuffle
fixes the batch order, every batch runs forward / BCE / backward / one
Adam step, and the trailing short batch is trained on rather than
dropped. All state that matters for reproducibility (shuffle order,
initialization, optimizer moments) is a pure function of the seeds, so
two runs with identical inputs produce identical checkpoints.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .nn import save_model, unet_forward_batch, unet_backward
from .rng import Rng, derive_seed

BCE_EPS = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle_seed: int = 0
    metric_threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(
                f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.metric_threshold < 1.0:
            raise ValueError(
                f"metric_threshold must lie in (0, 1), "
                f"got {self.metric_threshold}")


@dataclass
class MetricsReport:
    binary_accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    loss: float
    precision_defined: bool = True
    recall_defined: bool = True
    background_fraction: float = 0.0


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def bce_loss(probs, targets):
    """Mean clipped binary cross-entropy and its exact gradient.

    loss = -mean(t*ln(p + eps) + (1-t)*ln(1 - p + eps)) with eps = 1e-7;
    the gradient is the derivative of that same clipped expression, so
    the pair always passes a finite-difference check.
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.shape != targets.shape:
        raise ValueError(
            f"probs shape {probs.shape} != targets shape {targets.shape}")
    t = targets.astype(probs.dtype, copy=False)
    n = probs.size
    loss = -float(np.sum(t * np.log(probs + BCE_EPS)
                         + (1.0 - t) * np.log(1.0 - probs + BCE_EPS))) / n
    grad = (-(t / (probs + BCE_EPS))
            + (1.0 - t) / (1.0 - probs + BCE_EPS)) / n
    return loss, grad


def adam_init(params):
    return AdamState(
        m={k: np.zeros_like(val) for k, val in params.items()},
        v={k: np.zeros_like(val) for k, val in params.items()},
        t=0)


def adam_step(params, grads, state, config):
    """One Adam update; mutates params and state in place and returns them.

    t += 1; m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2;
    mhat = m/(1-b1^t); vhat = v/(1-b2^t);
    theta -= lr * mhat / (sqrt(vhat) + eps).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient", where=name)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2)
                                                + config.epsilon)
    return params, state


def dataset_arrays(dataset):
    """Stack a dataset into (images [N,H,W] f32, masks [N,C,H,W] u8)."""
    images = np.stack([s.input for s in dataset.samples]).astype(
        np.float32, copy=False)
    masks = np.stack([s.masks for s in dataset.samples])
    return images, masks


def _count_batch(probs, targets, threshold):
    pred = probs >= threshold
    t = targets.astype(bool)
    tp = int(np.count_nonzero(pred & t))
    fp = int(np.count_nonzero(pred & ~t))
    fn = int(np.count_nonzero(~pred & t))
    tn = int(np.count_nonzero(~pred & ~t))
    return tp, fp, tn, fn


def metrics_from_counts(tp, fp, tn, fn, loss, background_fraction=0.0):
    total = tp + fp + tn + fn
    precision_defined = (tp + fp) > 0
    recall_defined = (tp + fn) > 0
    return MetricsReport(
        binary_accuracy=(tp + tn) / total if total else 0.0,
        precision=tp / (tp + fp) if precision_defined else 0.0,
        recall=tp / (tp + fn) if recall_defined else 0.0,
        tp=tp, fp=fp, tn=tn, fn=fn, loss=loss,
        precision_defined=precision_defined,
        recall_defined=recall_defined,
        background_fraction=background_fraction)


def evaluate_arrays(params, unet_config, images, masks, threshold=0.5,
                    batch_size=64):
    """Micro-averaged pixel metrics over stacked arrays."""
    tp = fp = tn = fn = 0
    loss_sum = 0.0
    n = images.shape[0]
    for start in range(0, n, batch_size):
        batch = images[start:start + batch_size]
        targets = masks[start:start + batch_size].transpose(1, 0, 2, 3)
        probs, _ = unet_forward_batch(params, unet_config, batch)
        loss, _ = bce_loss(probs, targets)
        loss_sum += loss * batch.shape[0]
        btp, bfp, btn, bfn = _count_batch(probs, targets, threshold)
        tp += btp
        fp += bfp
        tn += btn
        fn += bfn
    background = float(np.mean(~masks.any(axis=1)))
    return metrics_from_counts(tp, fp, tn, fn, loss_sum / n,
                               background_fraction=background)


def evaluate_metrics(params, unet_config, dataset, threshold=0.5):
    """Pixel tp/fp/tn/fn accumulated over every (sample, class, pixel)."""
    if not dataset.samples:
        raise ValueError("dataset is empty")
    images, masks = dataset_arrays(dataset)
    return evaluate_arrays(params, unet_config, images, masks, threshold)


def train_on_arrays(images, masks, val_images, val_masks, unet_config,
                    train_config, init_params_fn, checkpoint_prefix=None,
                    progress=None):
    """Core loop over pre-stacked arrays; returns (params, history).

    init_params_fn() must produce the initial parameter dict; history is
    one entry per epoch: {"epoch", "train_loss", "val": MetricsReport}.
    Checkpoints (one per epoch) are written when checkpoint_prefix is
    given, as <prefix>.epochNN.unet.
    """
    n = images.shape[0]
    if n == 0 or val_images.shape[0] == 0:
        raise ValueError("train and val datasets must be non-empty")
    params = init_params_fn()
    state = adam_init(params)
    history = []
    batch = train_config.batch_size

    for epoch in range(train_config.epochs):
        order = list(range(n))
        Rng(derive_seed(train_config.shuffle_seed, epoch)).shuffle(order)
        order = np.array(order)
        loss_sum = 0.0
        for b_start in range(0, n, batch):
            idx = order[b_start:b_start + batch]
            x = images[idx]
            targets = masks[idx].transpose(1, 0, 2, 3)
            probs, cache = unet_forward_batch(params, unet_config, x)
            loss, grad = bce_loss(probs, targets)
            if not np.isfinite(loss):
                raise NumericError(
                    "loss is not finite",
                    where=f"epoch {epoch + 1} batch {b_start // batch + 1}")
            grads = unet_backward(cache, grad)
            params, state = adam_step(params, grads, state, train_config)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n

        val = evaluate_arrays(params, unet_config, val_images, val_masks,
                              train_config.metric_threshold)
        history.append({"epoch": epoch + 1, "train_loss": train_loss,
                        "val": val})
        if checkpoint_prefix is not None:
            save_model(params, unet_config,
                       f"{checkpoint_prefix}.epoch{epoch + 1:02d}.unet")
        if progress is not None:
            progress(history[-1])
    return params, history


def train(dataset_train, dataset_val, unet_config, train_config, init_seed,
          checkpoint_prefix=None, progress=None):
    """Train on a synthesized dataset pair; see train_on_arrays."""
    from .nn import init_params
    if not dataset_train.samples or not dataset_val.samples:
        raise ValueError("train and val datasets must be non-empty")
    images, masks = dataset_arrays(dataset_train)
    val_images, val_masks = dataset_arrays(dataset_val)
    return train_on_arrays(
        images, masks, val_images, val_masks, unet_config, train_config,
        lambda: init_params(unet_config, init_seed),
        checkpoint_prefix=checkpoint_prefix, progress=progress)


def history_to_csv(history, path_or_stream):
    """history CSV: epoch,train_loss,val_loss,val_accuracy,val_precision,val_recall."""
    close = False
    if isinstance(path_or_stream, (str, os.PathLike)):
        stream = open(path_or_stream, "w", encoding="utf-8")
        close = True
    else:
        stream = path_or_stream
    try:
        stream.write(
            "epoch,train_loss,val_loss,val_accuracy,val_precision,"
            "val_recall\n")
        for entry in history:
            val = entry["val"]
            stream.write(
                f"{entry['epoch']},{entry['train_loss']!r},{val.loss!r},"
                f"{val.binary_accuracy!r},{val.precision!r},"
                f"{val.recall!r}\n")
    finally:
        if close:
            stream.close()
