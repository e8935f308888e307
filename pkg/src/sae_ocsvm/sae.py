"""Siamese patch auto-encoder: architecture, loss, pair sampling, training."""
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, NonFiniteError, ShapeError
from .nn import (
    AdamState,
    BatchNormState,
    ConvLayer,
    Tensor,
    adam_step,
    backprop,
    batch_norm,
    concat,
    conv2d,
    gelu,
    row_cosine,
    sigmoid,
    square,
)
from .nn.layers import conv_output_size
from .volume import Patch, PatchPair, eligible_mask

log = logging.getLogger(__name__)

# (kernel, stride, filters) per encoder block
DEFAULT_BLOCKS = ((5, 1, 3), (3, 1, 4), (3, 3, 12), (3, 1, 16))


@dataclass
class SaeConfig:
    patch_size: int = 15
    alpha: float = 1.0
    epochs: int = 30
    batch_size: int = 1000
    patches_per_subject: int = 250_000
    validation_fraction: float = 0.1
    seed: int = 0
    blocks: tuple = DEFAULT_BLOCKS
    in_channels: int = 2
    precision: str = "float32"

    def __post_init__(self):
        self.blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_cosine: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    initial_val_cosine: float = float("nan")
    best_epoch: int = -1


def shape_chain(patch_size, blocks):
    """Spatial side after each encoder block, starting with the input size.

    Raises ShapeError naming the first block whose kernel does not fit.
    """
    chain = [patch_size]
    for i, (k, s, _) in enumerate(blocks, start=1):
        out = conv_output_size(chain[-1], k, s)
        if out < 1:
            raise ShapeError(
                f"block {i} (kernel {k}, stride {s}) needs spatial size >= {k}, "
                f"but block {i - 1} yields {chain[-1]} for patch size {patch_size}"
            )
        chain.append(out)
    return chain


class SaeModel:
    """Encoder/decoder pair; both siamese branches share these parameters."""

    def __init__(self, config, encoder, decoder):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.chain = shape_chain(config.patch_size, config.blocks)
        self.latent_channels = config.blocks[-1][2]
        self.latent_dim = self.latent_channels * self.chain[-1] ** 2

    # parameters -------------------------------------------------------------
    def parameters(self):
        params = {}
        for i, (conv, bn) in enumerate(self.encoder):
            params[f"enc{i}.kernel"] = conv.kernel
            params[f"enc{i}.bias"] = conv.bias
            params[f"enc{i}.bn_scale"] = bn.scale
            params[f"enc{i}.bn_shift"] = bn.shift
        for i, (conv, bn) in enumerate(self.decoder):
            params[f"dec{i}.kernel"] = conv.kernel
            params[f"dec{i}.bias"] = conv.bias
            if bn is not None:
                params[f"dec{i}.bn_scale"] = bn.scale
                params[f"dec{i}.bn_shift"] = bn.shift
        return params

    def state_dict(self):
        """Every array defining the model, including batch-norm running stats."""
        state = {k: v.data for k, v in self.parameters().items()}
        for prefix, blocks in (("enc", self.encoder), ("dec", self.decoder)):
            for i, (_, bn) in enumerate(blocks):
                if bn is not None:
                    state[f"{prefix}{i}.bn_running_mean"] = bn.running_mean
                    state[f"{prefix}{i}.bn_running_var"] = bn.running_var
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in own.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise ShapeError(f"{k}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def snapshot(self):
        return {k: v.copy() for k, v in self.state_dict().items()}

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(repr((self.config.patch_size, self.config.blocks, self.chain)).encode())
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    # forward ----------------------------------------------------------------
    def encode_tensor(self, x, mode="infer", update_stats=True):
        h = x
        for conv, bn in self.encoder:
            h = batch_norm(gelu(conv2d(h, conv)), bn, mode, update_stats)
        return h.reshape(h.shape[0], -1)

    def decode_tensor(self, z, mode="infer", update_stats=True):
        s = self.chain[-1]
        h = z.reshape(z.shape[0], self.latent_channels, s, s)
        n_blocks = len(self.decoder)
        for i, (conv, bn) in enumerate(self.decoder):
            target = self.chain[n_blocks - 1 - i]
            h = conv2d(h, conv, out_hw=(target, target))
            if bn is None:
                h = sigmoid(h)
            else:
                h = batch_norm(gelu(h), bn, mode, update_stats)
        return h

    def _as_input(self, patches):
        arr = np.asarray(patches, dtype=self.config.dtype)
        if arr.ndim == 3:
            arr = arr[None]
        p = self.config.patch_size
        if arr.ndim != 4 or arr.shape[1:] != (self.config.in_channels, p, p):
            raise ShapeError(
                f"expected patches of shape (N, {self.config.in_channels}, {p}, {p}), got {arr.shape}"
            )
        return arr

    def encode_batch(self, patches, chunk=4096):
        """Latent vectors (N, latent_dim) for an array of patches, inference mode."""
        arr = self._as_input(patches)
        out = np.empty((arr.shape[0], self.latent_dim), dtype=arr.dtype)
        for lo in range(0, arr.shape[0], chunk):
            out[lo : lo + chunk] = self.encode_tensor(Tensor(arr[lo : lo + chunk])).data
        return out

    def decode_batch(self, z):
        z = np.asarray(z, dtype=self.config.dtype)
        if z.ndim == 1:
            z = z[None]
        if z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent vectors must have length {self.latent_dim}, got {z.shape[1]}")
        return self.decode_tensor(Tensor(z)).data


def build_sae(config=None):
    """Randomly initialised auto-encoder for ``config`` (seeded by config.seed)."""
    config = config or SaeConfig()
    chain = shape_chain(config.patch_size, config.blocks)
    rng = np.random.default_rng(config.seed)
    dtype = config.dtype
    channels = [config.in_channels] + [b[2] for b in config.blocks]
    encoder = []
    for i, (k, s, f) in enumerate(config.blocks):
        conv = ConvLayer.init(channels[i], f, (k, k), (s, s), rng=rng, dtype=dtype)
        encoder.append((conv, BatchNormState.init(f, dtype=dtype)))
    decoder = []
    for i in reversed(range(len(config.blocks))):
        k, s, _ = config.blocks[i]
        out_ch = channels[i]
        conv = ConvLayer.init(channels[i + 1], out_ch, (k, k), (s, s), transposed=True, rng=rng, dtype=dtype)
        bn = BatchNormState.init(out_ch, dtype=dtype) if i > 0 else None
        decoder.append((conv, bn))
    model = SaeModel(config, encoder, decoder)
    log.debug("built SAE with shape chain %s, latent_dim %d", chain, model.latent_dim)
    return model


def encode(patch, model):
    data = patch.data if isinstance(patch, Patch) else patch
    return model.encode_batch(data)[0]


def decode(z, model):
    return model.decode_batch(z)[0]


# loss ---------------------------------------------------------------------
def siamese_loss(x1, xh1, x2, xh2, z1, z2, alpha):
    """Per-pair loss tensor (N,): summed squared errors minus alpha * cosine."""
    n = x1.shape[0]
    r1 = square(xh1 - x1).reshape(n, -1).sum(axis=1)
    r2 = square(xh2 - x2).reshape(n, -1).sum(axis=1)
    return r1 + r2 - row_cosine(z1, z2) * alpha


def pair_forward(model, x1, x2, alpha, mode="train", update_stats=True):
    """Run both branches with shared weights; returns (per-pair loss, cosines)."""
    n = x1.shape[0]
    x = Tensor(np.concatenate([x1, x2], axis=0))
    z = model.encode_tensor(x, mode, update_stats)
    xh = model.decode_tensor(z, mode, update_stats)
    z1, z2 = z[:n], z[n:]
    losses = siamese_loss(x[:n], xh[:n], x[n:], xh[n:], z1, z2, alpha)
    cos = row_cosine(Tensor(z1.data), Tensor(z2.data)).data
    return losses, cos


def batch_loss(model, x1, x2, alpha, mode="train", update_stats=True):
    losses, _ = pair_forward(model, x1, x2, alpha, mode, update_stats)
    return losses.mean()


def sae_loss(pair, model, alpha, mode="infer"):
    """Loss of one patch pair (inference-mode batch norm by default)."""
    x1 = model._as_input(pair.x1.data)
    x2 = model._as_input(pair.x2.data)
    losses, _ = pair_forward(model, x1, x2, alpha, mode, update_stats=False)
    return float(losses.data[0])


# sampling -------------------------------------------------------------------
def _common_centers(controls, masks, patch_size):
    if len(controls) < 2:
        raise DegenerateDataError("pair sampling needs at least 2 control subjects")
    dims = controls[0].dims
    common = np.ones(dims, dtype=bool)
    for vol, mask in zip(controls, masks):
        if vol.dims != dims:
            raise ShapeError("all control volumes must share dimensions")
        common &= np.asarray(mask, dtype=bool)
    centers = np.argwhere(eligible_mask(common, patch_size))
    if len(centers) == 0:
        raise DegenerateDataError("no voxel is inside every control mask with a full patch in bounds")
    return centers


def _draw_pairs(n_subjects, n_locations, count, rng):
    loc = rng.integers(0, n_locations, size=count)
    s1 = rng.integers(0, n_subjects, size=count)
    s2 = rng.integers(0, n_subjects - 1, size=count)
    s2 = s2 + (s2 >= s1)  # uniform over subjects != s1
    return loc, s1, s2


class _PatchSource:
    """Fast patch extraction from a stack of co-registered subjects."""

    def __init__(self, controls, patch_size, dtype):
        stack = np.stack([v.channels for v in controls]).astype(dtype, copy=False)
        self.r = patch_size // 2
        self.win = np.lib.stride_tricks.sliding_window_view(stack, (patch_size, patch_size), axis=(2, 3))

    def get(self, subjects, centers):
        r = self.r
        # advanced indices split by a slice -> result is (n, C, p, p)
        return np.ascontiguousarray(
            self.win[subjects, :, centers[:, 0] - r, centers[:, 1] - r, centers[:, 2]]
        )


def sample_patch_pairs(controls, masks, count, patch_size, rng):
    """Yield ``count`` co-located patch pairs from two distinct subjects."""
    rng = np.random.default_rng(rng)
    centers = _common_centers(controls, masks, patch_size)
    loc, s1, s2 = _draw_pairs(len(controls), len(centers), count, rng)
    src = _PatchSource(controls, patch_size, controls[0].channels.dtype)
    for lo in range(0, count, 1024):
        c = centers[loc[lo : lo + 1024]]
        a = src.get(s1[lo : lo + 1024], c)
        b = src.get(s2[lo : lo + 1024], c)
        for k in range(len(c)):
            center = tuple(int(v) for v in c[k])
            yield PatchPair(
                Patch(a[k], center, int(s1[lo + k])),
                Patch(b[k], center, int(s2[lo + k])),
            )


# training -------------------------------------------------------------------
def _evaluate(model, src, centers, s1, s2, alpha, chunk=2048):
    total, cos_total = 0.0, 0.0
    for lo in range(0, len(s1), chunk):
        c = centers[lo : lo + chunk]
        x1 = src.get(s1[lo : lo + chunk], c)
        x2 = src.get(s2[lo : lo + chunk], c)
        losses, cos = pair_forward(model, x1, x2, alpha, mode="infer", update_stats=False)
        total += float(losses.data.astype(np.float64).sum())
        cos_total += float(cos.astype(np.float64).sum())
    return total / len(s1), cos_total / len(s1)


def train_sae(controls, masks, config=None, n_pairs=None, progress=None):
    """Train the siamese auto-encoder on co-located pairs from ``controls``.

    The number of pairs defaults to ``patches_per_subject * n_subjects / 2``
    (each pair holds two patches).  Returns the model restored to the epoch
    with the lowest validation loss, plus its TrainHistory.
    """
    config = config or SaeConfig()
    masks = list(masks)
    rng = np.random.default_rng(config.seed)
    model = build_sae(config)
    dtype = config.dtype

    centers = _common_centers(controls, masks, config.patch_size)
    if n_pairs is None:
        n_pairs = config.patches_per_subject * len(controls) // 2
    n_val = max(1, int(round(config.validation_fraction * n_pairs)))
    n_train = n_pairs - n_val
    if n_train < 1:
        raise DegenerateDataError(f"{n_pairs} pairs leave nothing to train on")

    # locations are split so validation pairs never share a center with training pairs
    perm = rng.permutation(len(centers))
    n_val_loc = max(1, int(math.ceil(config.validation_fraction * len(centers))))
    if n_val_loc >= len(centers):
        raise DegenerateDataError("too few locations for a location-disjoint validation split")
    val_centers, train_centers = centers[perm[:n_val_loc]], centers[perm[n_val_loc:]]

    tl, ts1, ts2 = _draw_pairs(len(controls), len(train_centers), n_train, rng)
    vl, vs1, vs2 = _draw_pairs(len(controls), len(val_centers), n_val, rng)
    tc, vc = train_centers[tl], val_centers[vl]
    src = _PatchSource(controls, config.patch_size, dtype)

    params = model.parameters()
    adam = AdamState()
    history = TrainHistory()
    history.initial_val_loss, history.initial_val_cosine = _evaluate(
        model, src, vc, vs1, vs2, config.alpha
    )
    best_loss, best_state = math.inf, model.snapshot()

    for epoch in range(config.epochs):
        order = rng.permutation(n_train)
        running, seen = 0.0, 0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            x1, x2 = src.get(ts1[idx], tc[idx]), src.get(ts2[idx], tc[idx])
            loss = batch_loss(model, x1, x2, config.alpha, mode="train")
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch + 1}, batch {lo // config.batch_size}")
            grads = backprop(params, loss)
            adam_step(params, grads, adam)
            running += value * len(idx)
            seen += len(idx)
        val_loss, val_cos = _evaluate(model, src, vc, vs1, vs2, config.alpha)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch + 1}")
        history.train_loss.append(running / seen)
        history.val_loss.append(val_loss)
        history.val_cosine.append(val_cos)
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.snapshot()
            history.best_epoch = epoch
        log.info("epoch %d/%d train %.5f val %.5f cos %.4f", epoch + 1, config.epochs,
                 history.train_loss[-1], val_loss, val_cos)
        if progress is not None:
            progress(epoch, history)

    model.load_state_dict(best_state)
    return model, history
