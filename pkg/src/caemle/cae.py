"""The convolutional autoencoder and its reconstruction pretraining."""

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)


class SpatialUnderflowError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class CaeConfig:
    input_shape: tuple = (1, 28, 28)
    embedding_dim: int = 10
    filters: tuple = (32, 64, 128)
    kernels: tuple = (5, 5, 3)
    strides: tuple = (2, 2, 2)
    epochs: int = 200
    batch_size: int = 256
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    dtype: str = "float64"
    target_loss: float = None  # stop pretraining early once the epoch loss drops below this

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.filters = tuple(int(v) for v in self.filters)
        self.kernels = tuple(int(v) for v in self.kernels)
        self.strides = tuple(int(v) for v in self.strides)
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, H, W)")
        if not (len(self.filters) == len(self.kernels) == len(self.strides)):
            raise ValueError("filters, kernels and strides must have equal length")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")

    def to_dict(self):
        d = asdict(self)
        for k in ("input_shape", "filters", "kernels", "strides"):
            d[k] = list(d[k])
        return d


@dataclass
class CaeModel:
    encoder: nn.Sequential
    decoder: nn.Sequential
    config: CaeConfig
    history: list = field(default_factory=list)

    @property
    def embedding_dim(self):
        return self.encoder.layers[-1].out_features

    @property
    def depth(self):
        """Layer count in the usual figure convention: input + weighted layers."""
        weighted = sum(1 for seq in (self.encoder, self.decoder) for layer in seq
                       if layer.kind in ("conv", "deconv", "dense"))
        return weighted + 1

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def bump_version(self):
        self.encoder.bump_version()
        self.decoder.bump_version()

    def _check_input(self, batch):
        batch = np.asarray(batch)
        if batch.ndim != 4 or batch.shape[1:] != self.config.input_shape:
            raise nn.ShapeError(
                f"encoder expects (N,) + {self.config.input_shape}, got {batch.shape}")
        return batch

    def encode(self, batch, batch_size=1024):
        return self.encoder.predict(self._check_input(batch), batch_size)

    def decode(self, z, batch_size=1024):
        z = np.asarray(z)
        if z.ndim != 2 or z.shape[1] != self.embedding_dim:
            raise nn.ShapeError(f"decoder expects (N, {self.embedding_dim}), got {z.shape}")
        return self.decoder.predict(z, batch_size)


def build_cae(cfg):
    """Encoder conv stack -> flatten -> dense(d); decoder mirrors it with deconvs."""
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    c, h, w = cfg.input_shape
    sizes = [(h, w)]
    for stage, s in enumerate(cfg.strides):
        ph, pw = sizes[-1]
        if ph < s or pw < s:
            raise SpatialUnderflowError(
                f"input {cfg.input_shape} is too small: stage {stage + 1} receives {ph}x{pw}"
                f" but strides down by {s}")
        sizes.append((-(-ph // s), -(-pw // s)))

    enc = []
    in_ch = c
    for f, k, s in zip(cfg.filters, cfg.kernels, cfg.strides):
        enc += [nn.Conv2D(in_ch, f, k, s, "same", rng=rng, dtype=dtype), nn.ReLU()]
        in_ch = f
    bottleneck = (in_ch,) + sizes[-1]
    flat = int(np.prod(bottleneck))
    enc += [nn.Flatten(), nn.Dense(flat, cfg.embedding_dim, rng=rng, dtype=dtype)]

    dec = [nn.Dense(cfg.embedding_dim, flat, rng=rng, dtype=dtype), nn.ReLU(), nn.Reshape(bottleneck)]
    stages = list(zip(cfg.filters, cfg.kernels, cfg.strides))
    for i in range(len(stages) - 1, -1, -1):
        f, k, s = stages[i]
        out_ch = cfg.filters[i - 1] if i > 0 else c
        dec.append(nn.Deconv2D(f, out_ch, k, s, "same", output_size=sizes[i], rng=rng, dtype=dtype))
        if i > 0:
            dec.append(nn.ReLU())
    return CaeModel(nn.Sequential(enc), nn.Sequential(dec), cfg)


def reconstruction_step(model, batch):
    """Forward + backward of the reconstruction loss on one batch.

    Returns ``(loss, grads, z, encoder_ctxs, decoder grad w.r.t. z)`` so callers
    can add further terms on the embedding before back-propagating the encoder.
    """
    z, enc_ctx = model.encoder.forward(batch)
    rec, dec_ctx = model.decoder.forward(z)
    loss, g_rec = nn.mse_loss(batch, rec)
    g_z, dec_grads = model.decoder.backward(g_rec, dec_ctx)
    return loss, dec_grads, z, enc_ctx, g_z


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def pretrain(model, images, epochs=None, batch_size=None, seed=None, optimizer=None):
    """Train the autoencoder on reconstruction loss alone.

    Appends one mean-loss entry per epoch to ``model.history`` and returns it.
    Stops early when the config's ``target_loss`` is reached.
    """
    cfg = model.config
    images = model._check_input(images).astype(cfg.dtype, copy=False)
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = batch_size or cfg.batch_size
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    opt = optimizer or nn.make_optimizer(cfg.optimizer, cfg.lr)
    params = model.parameters()
    n = images.shape[0]
    for epoch in range(epochs):
        total = 0.0
        for bi, idx in enumerate(_batches(n, batch_size, rng)):
            batch = images[idx]
            try:
                loss, dec_grads, _, enc_ctx, g_z = reconstruction_step(model, batch)
                _, enc_grads = model.encoder.backward(g_z, enc_ctx)
                if not np.isfinite(loss):
                    raise nn.NonFiniteError("reconstruction loss")
                opt.step(params, enc_grads + dec_grads)
            except nn.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"pretraining diverged at epoch {epoch + 1}, batch {bi}: {exc}") from exc
            model.bump_version()
            total += loss * len(idx)
        epoch_loss = total / n
        model.history.append(epoch_loss)
        log.debug("pretrain epoch %d: L_r=%.6g", epoch + 1, epoch_loss)
        if cfg.target_loss is not None and epoch_loss < cfg.target_loss:
            break
    return model.history


def write_loss_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_r"])
        for i, loss in enumerate(history, 1):
            writer.writerow([i, repr(float(loss))])


def save_model(model, path, extra=None):
    meta = {"config": model.config.to_dict(), "history": [float(v) for v in model.history]}
    meta.update(extra or {})
    return nn.save_checkpoint(path, {"encoder": model.encoder, "decoder": model.decoder}, meta)


def load_model(path):
    stacks, extra = nn.load_checkpoint(path)
    cfg = CaeConfig(**extra["config"])
    return CaeModel(stacks["encoder"], stacks["decoder"], cfg, list(extra.get("history", []))), extra
